#pragma once

#include <cmath>

#include "ops.hpp"

namespace nr {

struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Post-norm encoder block: attn -> add -> norm -> FFN(GELU) -> add -> norm.
struct TransformerWeights {
  AttentionWeights attn;
  Var ln1_gamma, ln1_beta;
  Var ff_w1, ff_b1, ff_w2, ff_b2;
  Var ln2_gamma, ln2_beta;
};

inline constexpr double kLayerNormEps = 1e-5;

/// Multi-head scaled dot-product self-attention over the rows of `h` (L x d),
/// followed by the output projection. Keys with valid == false are excluded.
inline Var multi_head_attention(const Var& h, const AttentionWeights& w, std::size_t heads,
                                const Mask& valid) {
  const std::size_t d = h.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("hidden size " + std::to_string(d) + " is not divisible by " +
                     std::to_string(heads) + " heads");
  }
  detail::require_mask("multi_head_attention", valid, h.rows());
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Var q = add_row(matmul(h, w.wq), w.bq);
  Var k = add_row(matmul(h, w.wk), w.bk);
  Var v = add_row(matmul(h, w.wv), w.bv);

  std::vector<Var> outputs;
  outputs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    Var qh = slice_cols(q, i * dh, dh);
    Var kh = slice_cols(k, i * dh, dh);
    Var vh = slice_cols(v, i * dh, dh);
    Var weights = masked_softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), valid);
    outputs.push_back(matmul(weights, vh));
  }
  Var joined = heads == 1 ? outputs.front() : concat_cols(outputs);
  return add_row(matmul(joined, w.wo), w.bo);
}

inline Var transformer_layer(const Var& h, const TransformerWeights& w, std::size_t heads,
                             const Mask& valid) {
  Var attn = multi_head_attention(h, w.attn, heads, valid);
  Var x = layer_norm(add(h, attn), w.ln1_gamma, w.ln1_beta, kLayerNormEps);
  Var ff = add_row(matmul(gelu(add_row(matmul(x, w.ff_w1), w.ff_b1)), w.ff_w2), w.ff_b2);
  return layer_norm(add(x, ff), w.ln2_gamma, w.ln2_beta, kLayerNormEps);
}

}  // namespace nr
