#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "autograd.hpp"

namespace nr {

// Differentiable ops. Every op checks shapes, records its result with
// detail::record and adds input gradients in its backward closure.

/// Row validity flags; false rows are padding and take no part in reductions.
using Mask = std::vector<bool>;

namespace detail {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " differ");
  }
}

inline void require_matrix_like(const char* op, const Var& a) {
  if (a.value().rank() > 2) throw ShapeError(std::string(op) + ": rank > 2 is not supported");
}


inline void require_mask(const char* op, const Mask& mask, std::size_t n) {
  if (mask.size() != n) {
    throw ShapeError(std::string(op) + ": mask length " + std::to_string(mask.size()) +
                     " != " + std::to_string(n));
  }
  for (bool b : mask)
    if (b) return;
  throw InvalidArgument(std::string(op) + ": every position is masked");
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape("add", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::record("add", std::move(out), {a, b}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::record("sub", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::record("mul", std::move(out), {a, b}, [](Node& self) {
    auto& x = self.inputs[0];
    auto& y = self.inputs[1];
    if (x->requires_grad) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y->value[i];
    }
    if (y->requires_grad) {
      auto& g = y->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x->value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return detail::record("scale", std::move(out), {a}, [s](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// Sum of all elements, as a scalar.
inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::record("sum", Tensor::scalar(s), {a}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double up = self.grad[0];
    for (auto& v : g.data()) v += up;
  });
}

/// Adds a length-n bias to every row of an m x n matrix (or to a length-n vector).
inline Var add_row(const Var& a, const Var& bias) {
  detail::require_matrix_like("add_row", a);
  if (bias.value().size() != a.cols()) {
    throw ShapeError("add_row: bias of size " + std::to_string(bias.value().size()) +
                     " for rows of width " + std::to_string(a.cols()));
  }
  Tensor out = a.value();
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % n];
  return detail::record("add_row", std::move(out), {a, bias}, [n](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

inline Var matmul(const Var& a, const Var& b) {
  Tensor out = matmul(a.value(), b.value());
  return detail::record("matmul", std::move(out), {a, b}, [](Node& self) {
    auto& x = self.inputs[0];
    auto& y = self.inputs[1];
    // dX = dC * Y^T, dY = X^T * dC
    if (x->requires_grad) {
      auto& g = x->grad_buffer();
      Tensor d = matmul(self.grad, transpose(y->value));
      for (std::size_t i = 0; i < d.size(); ++i) g[i] += d[i];
    }
    if (y->requires_grad) {
      auto& g = y->grad_buffer();
      Tensor d = matmul(transpose(x->value), self.grad);
      for (std::size_t i = 0; i < d.size(); ++i) g[i] += d[i];
    }
  });
}

inline Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix");
  return detail::record("transpose", transpose(a.value()), {a}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    Tensor d = transpose(self.grad);
    for (std::size_t i = 0; i < d.size(); ++i) g[i] += d[i];
  });
}

/// Columns [start, start+count) of a matrix.
inline Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  detail::require_matrix_like("slice_cols", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (start + count > n) throw ShapeError("slice_cols out of range");
  Tensor out(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a.value()(i, start + j);
  return detail::record("slice_cols", std::move(out), {a}, [start, count, m, n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += self.grad(i, j);
  });
}

/// Side-by-side concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols row counts differ");
    n += p.cols();
  }
  Tensor out(Shape{m, n});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, offset + j) = p.value()(i, j);
    offset += p.cols();
  }
  return detail::record("concat_cols", std::move(out), parts, [m, n](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t w = in->value.cols();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + off + j];
      }
      off += w;
    }
  });
}

/// Stacks matrices (or vectors, as single rows) with equal widths.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_matrix_like("concat_rows", p);
    if (p.cols() != n) throw ShapeError("concat_rows widths differ");
    m += p.rows();
  }
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return detail::record("concat_rows", Tensor(Shape{m, n}, std::move(data)), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t len = in->value.size();
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

/// Packs scalars into a rows x cols matrix, row-major.
inline Var stack_scalars(const std::vector<Var>& scalars, std::size_t rows, std::size_t cols) {
  if (scalars.size() != rows * cols) throw ShapeError("stack_scalars count does not match shape");
  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < scalars.size(); ++i) out[i] = scalars[i].value().item();
  return detail::record("stack_scalars", std::move(out), scalars, [](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i)
      if (self.inputs[i]->requires_grad) self.inputs[i]->grad_buffer()[0] += self.grad[i];
  });
}

/// Row i of a matrix as a length-n vector.
inline Var select_row(const Var& a, std::size_t r) {
  if (r >= a.rows()) throw ShapeError("select_row out of range");
  const std::size_t n = a.cols();
  auto row = a.value().row(r);
  return detail::record("select_row", Tensor(Shape{n}, {row.begin(), row.end()}), {a},
                        [r, n](Node& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[j];
                        });
}

/// Rows whose mask entry is true, in order.
inline Var select_rows(const Var& a, const Mask& mask) {
  detail::require_mask("select_rows", mask, a.rows());
  const std::size_t n = a.cols();
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(i);
  Tensor out(Shape{idx.size(), n});
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t j = 0; j < n; ++j) out(k, j) = a.value()(idx[k], j);
  return detail::record("select_rows", std::move(out), {a}, [idx, n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < n; ++j) g[idx[k] * n + j] += self.grad(k, j);
  });
}

/// Row-wise softmax where columns with key_mask == false get weight exactly 0
/// (an additive -inf bias before normalization).
inline Var masked_softmax_rows(const Var& a, const Mask& key_mask) {
  detail::require_mask("masked_softmax_rows", key_mask, a.cols());
  const std::size_t m = a.rows(), n = a.cols();
  Tensor y(a.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (key_mask[j]) mx = std::max(mx, a.value()(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y(i, j) = key_mask[j] ? std::exp(a.value()(i, j) - mx) : 0.0);
    for (std::size_t j = 0; j < n; ++j) y(i, j) /= z;
  }
  return detail::record("softmax", y, {a}, [y, m, n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y(i, j) * self.grad(i, j);
      for (std::size_t j = 0; j < n; ++j) g(i, j) += y(i, j) * (self.grad(i, j) - dot);
    }
  });
}

inline Var softmax_rows(const Var& a) { return masked_softmax_rows(a, Mask(a.cols(), true)); }

/// Per-row normalization: gamma * (x - mean) / sqrt(var + eps) + beta, with the
/// population variance.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  detail::require_matrix_like("layer_norm", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("layer_norm on zero-width rows");
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw ShapeError("layer_norm: gamma/beta must have length " + std::to_string(n));
  }
  if (!(eps > 0.0)) throw InvalidArgument("layer_norm eps must be positive");
  Tensor xhat(Shape{m, n});
  std::vector<double> inv_std(m);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    auto row = x.value().row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (row[j] - mean) * inv_std[i];
      out[i * n + j] = gamma.value()[j] * xhat(i, j) + beta.value()[j];
    }
  }
  return detail::record(
      "layer_norm", std::move(out), {x, gamma, beta}, [xhat, inv_std, m, n](Node& self) {
        auto& xin = self.inputs[0];
        auto& gm = self.inputs[1];
        auto& bt = self.inputs[2];
        if (gm->requires_grad) {
          auto& g = gm->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * xhat(i, j);
        }
        if (bt->requires_grad) {
          auto& g = bt->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
        if (xin->requires_grad) {
          auto& g = xin->grad_buffer();
          std::vector<double> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = self.grad[i * n + j] * gm->value[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat(i, j);
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
              g[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
          }
        }
      });
}

inline constexpr double kInvSqrt2 = 0.7071067811865476;

/// Exact GELU, x * Phi(x).
inline Var gelu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return detail::record("gelu", std::move(out), {a}, [](Node& self) {
    auto& in = self.inputs[0];
    auto& g = in->grad_buffer();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = in->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

/// Elementwise maximum over the rows selected by `mask`; gradient goes to the
/// first row attaining the maximum.
inline Var masked_max_rows(const Var& a, const Mask& mask) {
  detail::require_mask("masked_max_rows", mask, a.rows());
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out(Shape{n}, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (a.value()(i, j) > out[j]) {
        out[j] = a.value()(i, j);
        arg[j] = i;
      }
    }
  }
  return detail::record("masked_max_rows", std::move(out), {a}, [arg, n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t j = 0; j < n; ++j) g[arg[j] * n + j] += self.grad[j];
  });
}

/// Mean over the rows selected by `mask`.
inline Var masked_mean_rows(const Var& a, const Mask& mask) {
  detail::require_mask("masked_mean_rows", mask, a.rows());
  const std::size_t m = a.rows(), n = a.cols();
  std::size_t count = 0;
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    ++count;
    for (std::size_t j = 0; j < n; ++j) out[j] += a.value()(i, j);
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& v : out.data()) v *= inv;
  return detail::record("masked_mean_rows", std::move(out), {a}, [rows = mask, inv, n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i]) continue;
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += inv * self.grad[j];
    }
  });
}

/// Maximum of each row, as a length-m vector (gradient to the first argmax).
inline Var max_per_row(const Var& a) {
  detail::require_matrix_like("max_per_row", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw ShapeError("max_per_row on zero-width rows");
  Tensor out(Shape{m});
  std::vector<std::size_t> arg(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    out[i] = a.value()(i, 0);
    for (std::size_t j = 1; j < n; ++j) {
      if (a.value()(i, j) > out[i]) {
        out[i] = a.value()(i, j);
        arg[i] = j;
      }
    }
  }
  return detail::record("max_per_row", std::move(out), {a}, [arg, n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[i * n + arg[i]] += self.grad[i];
  });
}

/// Minimum norm accepted by l2_normalize; anything shorter is a degenerate state.
inline constexpr double kMinNorm = 1e-12;

/// Scales each row (a vector counts as one row) to unit Euclidean length.
inline Var l2_normalize_rows(const Var& a) {
  detail::require_matrix_like("l2_normalize_rows", a);
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = a.value();
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += out[i * n + j] * out[i * n + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > kMinNorm)) throw NumericError("l2_normalize: vector norm is ~0");
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= norms[i];
  }
  Tensor y = out;
  return detail::record("l2_normalize", std::move(out), {a}, [y, norms, m, n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    // d(x/|x|) = (I - y y^T) / |x|
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += (self.grad[i * n + j] - y[i * n + j] * dot) / norms[i];
    }
  });
}

/// Mean over rows of -log softmax(S / tau)[i][i]: the in-batch-negatives
/// contrastive loss, computed with max-subtraction and log1p.
inline Var info_nce(const Var& scores, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("info_nce temperature must be positive");
  const auto& s = scores.value();
  if (s.rank() != 2 || s.rows() != s.cols()) {
    throw ShapeError("info_nce needs a square score matrix, got " + shape_string(s.shape()));
  }
  const std::size_t b = s.rows();
  if (b == 0) throw InvalidArgument("info_nce on an empty batch");
  Tensor probs(s.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < b; ++j)
      if (s(i, j) > s(i, arg)) arg = j;
    const double mx = s(i, arg) / tau;
    double rest = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      probs(i, j) = std::exp(s(i, j) / tau - mx);
      if (j != arg) rest += probs(i, j);
    }
    const double z = 1.0 + rest;
    for (std::size_t j = 0; j < b; ++j) probs(i, j) /= z;
    total += (mx - s(i, i) / tau) + std::log1p(rest);
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  return detail::record("info_nce", Tensor::scalar(total * inv_b), {scores},
                        [probs, b, tau, inv_b](Node& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          const double up = self.grad[0] * inv_b / tau;
                          for (std::size_t i = 0; i < b; ++i)
                            for (std::size_t j = 0; j < b; ++j)
                              g(i, j) += up * (probs(i, j) - (i == j ? 1.0 : 0.0));
                        });
}

/// Plain-value version of info_nce for analysis and tests.
inline double info_nce(const Tensor& scores, double tau) {
  return info_nce(constant(scores), tau).value().item();
}

}  // namespace nr
