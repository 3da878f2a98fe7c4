#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "corpus.hpp"
#include "nn.hpp"
#include "params.hpp"
#include "text_provider.hpp"

namespace nr {

enum class Pooling { cls, mean, max, multi };

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::cls: return "cls";
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
    case Pooling::multi: return "multi";
  }
  return "?";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "cls") return Pooling::cls;
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  if (s == "multi") return Pooling::multi;
  throw ConfigError("pooling must be one of cls, mean, max, multi; got '" + s + "'");
}

inline constexpr Pooling kAllPoolings[] = {Pooling::max, Pooling::mean, Pooling::cls, Pooling::multi};

struct EncoderConfig {
  std::size_t T = 8;
  std::size_t C = 4;
  std::size_t d = 768;
  std::size_t layers = 1;
  std::size_t heads = 4;
  std::size_t ffn_multiplier = 4;
  Pooling pooling = Pooling::mean;

  std::size_t D() const noexcept { return T * C; }
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline void validate(const EncoderConfig& cfg) {
  if (cfg.T == 0 || cfg.C == 0) throw ConfigError("encoder.T and encoder.C must be >= 1");
  if (cfg.d == 0) throw ConfigError("encoder.d must be >= 1");
  if (cfg.layers == 0) throw ConfigError("encoder.layers must be >= 1");
  if (cfg.heads == 0 || cfg.d % cfg.heads != 0) {
    throw ConfigError("encoder.d (" + std::to_string(cfg.d) + ") must be divisible by encoder.heads (" +
                      std::to_string(cfg.heads) + ")");
  }
  if (cfg.ffn_multiplier == 0) throw ConfigError("encoder.ffn_multiplier must be >= 1");
}

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"T", c.T},           {"C", c.C},
          {"d", c.d},           {"layers", c.layers},
          {"heads", c.heads},   {"ffn_multiplier", c.ffn_multiplier},
          {"pooling", to_string(c.pooling)}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.T = j.at("T").get<std::size_t>();
  c.C = j.at("C").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_multiplier = j.value("ffn_multiplier", std::size_t{4});
  c.pooling = parse_pooling(j.at("pooling").get<std::string>());
  validate(c);
  return c;
}

/// Trainable signal-encoder state. Parameter paths, in checkpoint order:
///   embed.weight (D x d), embed.bias (d), cls (d), then per layer l
///   layers.l.attn.{wq,bq,wk,bk,wv,bv,wo,bo}, layers.l.ln1.{gamma,beta},
///   layers.l.ffn.{w1,b1,w2,b2}, layers.l.ln2.{gamma,beta}.
struct EncoderParams {
  EncoderConfig config;
  ParamSet params;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

inline std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

/// Matrices uniform in +-1/sqrt(fan_in), biases zero, layer-norm gains one.
inline EncoderParams init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  const std::size_t d = cfg.d, D = cfg.D(), f = cfg.ffn_multiplier * cfg.d;
  EncoderParams e{cfg, {}};
  auto& p = e.params;
  p.add("embed.weight", uniform_init({D, d}, D, rng));
  p.add("embed.bias", Tensor(Shape{d}));
  p.add("cls", uniform_init({d}, d, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto pre = layer_prefix(l);
    for (const char* name : {"wq", "wk", "wv", "wo"}) {
      p.add(pre + "attn." + name, uniform_init({d, d}, d, rng));
      p.add(pre + "attn.b" + std::string(name + 1), Tensor(Shape{d}));
    }
    p.add(pre + "ln1.gamma", Tensor(Shape{d}, 1.0));
    p.add(pre + "ln1.beta", Tensor(Shape{d}));
    p.add(pre + "ffn.w1", uniform_init({d, f}, d, rng));
    p.add(pre + "ffn.b1", Tensor(Shape{f}));
    p.add(pre + "ffn.w2", uniform_init({f, d}, f, rng));
    p.add(pre + "ffn.b2", Tensor(Shape{d}));
    p.add(pre + "ln2.gamma", Tensor(Shape{d}, 1.0));
    p.add(pre + "ln2.beta", Tensor(Shape{d}));
  }
  return e;
}

/// Graph handles for every encoder parameter.
struct EncoderWeights {
  Var embed_w, embed_b, cls;
  std::vector<TransformerWeights> layers;
};

namespace detail {

template <typename Get>
EncoderWeights bind_with(const EncoderConfig& cfg, Get&& get) {
  EncoderWeights w;
  w.embed_w = get("embed.weight");
  w.embed_b = get("embed.bias");
  w.cls = get("cls");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto pre = layer_prefix(l);
    TransformerWeights t;
    t.attn = {get(pre + "attn.wq"), get(pre + "attn.bq"), get(pre + "attn.wk"), get(pre + "attn.bk"),
              get(pre + "attn.wv"), get(pre + "attn.bv"), get(pre + "attn.wo"), get(pre + "attn.bo")};
    t.ln1_gamma = get(pre + "ln1.gamma");
    t.ln1_beta = get(pre + "ln1.beta");
    t.ff_w1 = get(pre + "ffn.w1");
    t.ff_b1 = get(pre + "ffn.b1");
    t.ff_w2 = get(pre + "ffn.w2");
    t.ff_b2 = get(pre + "ffn.b2");
    t.ln2_gamma = get(pre + "ln2.gamma");
    t.ln2_beta = get(pre + "ln2.beta");
    w.layers.push_back(std::move(t));
  }
  return w;
}

}  // namespace detail

/// Leaves whose gradients flow into `enc.params`.
inline EncoderWeights bind_trainable(EncoderParams& enc) {
  return detail::bind_with(enc.config, [&](const std::string& n) { return enc.params.leaf(n); });
}

/// Constant handles for inference; nothing is recorded for backward.
inline EncoderWeights bind_frozen(const EncoderParams& enc) {
  return detail::bind_with(enc.config, [&](const std::string& n) { return constant(enc.params.value(n)); });
}

/// Row-major flattening of a T x C segment into D = T*C values.
inline std::vector<double> flatten_segment(const SignalSegment& s) {
  return std::vector<double>(s.samples.begin(), s.samples.end());
}

inline SignalSegment unflatten_segment(const std::vector<double>& flat, std::size_t T, std::size_t C) {
  if (flat.size() != T * C) throw ShapeError("cannot reshape " + std::to_string(flat.size()) + " values to T x C");
  SignalSegment s{T, C, std::vector<float>(flat.size())};
  for (std::size_t i = 0; i < flat.size(); ++i) s.samples[i] = static_cast<float>(flat[i]);
  return s;
}

/// L x D matrix of flattened word segments.
inline Tensor flatten_sequence(const SignalSequence& seq, const EncoderConfig& cfg) {
  const std::size_t L = seq.length(), D = cfg.D();
  if (L == 0) throw InvalidArgument("cannot encode an empty signal sequence");
  Tensor x(Shape{L, D});
  for (std::size_t i = 0; i < L; ++i) {
    const auto& s = seq.segments[i];
    if (s.T != cfg.T || s.C != cfg.C) {
      throw ShapeError("segment shape " + std::to_string(s.T) + "x" + std::to_string(s.C) +
                       " does not match encoder input " + std::to_string(cfg.T) + "x" + std::to_string(cfg.C));
    }
    std::copy(s.samples.begin(), s.samples.end(), x.row(i).begin());
  }
  return x;
}

/// Contextual word states: H0 = X_flat W_E + b_E, with the cls vector prepended
/// when pooling is cls, then the transformer stack. `valid` marks real (non-padding)
/// words; the returned mask covers the output rows (cls row included).
inline Var encode_signal(const SignalSequence& seq, const EncoderWeights& w, const EncoderConfig& cfg,
                         Mask valid, Mask* out_mask = nullptr) {
  if (valid.size() != seq.length()) throw ShapeError("valid mask length does not match sequence length");
  Var h = add_row(matmul(constant(flatten_sequence(seq, cfg)), w.embed_w), w.embed_b);
  if (cfg.pooling == Pooling::cls) {
    h = concat_rows({w.cls, h});
    valid.insert(valid.begin(), true);
  }
  for (const auto& layer : w.layers) h = transformer_layer(h, layer, cfg.heads, valid);
  if (out_mask != nullptr) *out_mask = std::move(valid);
  return h;
}

inline Var encode_signal(const SignalSequence& seq, const EncoderWeights& w, const EncoderConfig& cfg,
                         Mask* out_mask = nullptr) {
  return encode_signal(seq, w, cfg, Mask(seq.length(), true), out_mask);
}

/// Pools contextual rows and L2-normalizes: a length-d vector for cls/mean/max,
/// or the valid rows (each unit-norm) for multi.
inline Var pool(const Var& h, Pooling strategy, const Mask& valid) {
  switch (strategy) {
    case Pooling::cls:
      detail::require_mask("pool", valid, h.rows());
      return l2_normalize_rows(select_row(h, 0));
    case Pooling::mean: return l2_normalize_rows(masked_mean_rows(h, valid));
    case Pooling::max: return l2_normalize_rows(masked_max_rows(h, valid));
    case Pooling::multi: return l2_normalize_rows(select_rows(h, valid));
  }
  throw InvalidArgument("unknown pooling strategy");
}

inline Var l2_normalize(const Var& v) { return l2_normalize_rows(v); }

inline std::vector<double> l2_normalize(std::vector<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double n = std::sqrt(sq);
  if (!(n > kMinNorm)) throw NumericError("l2_normalize: vector norm is ~0");
  for (auto& x : v) x /= n;
  return v;
}

/// Unit-norm d-vector.
struct PooledEmbedding {
  std::vector<double> vector;
};

/// L x d rows for late interaction; rows with valid == false are ignored.
struct MultiVector {
  Tensor rows;
  Mask valid;
};

using Representation = std::variant<PooledEmbedding, MultiVector>;

inline Representation to_representation(const Var& pooled, Pooling strategy) {
  const auto& v = pooled.value();
  if (strategy == Pooling::multi) return MultiVector{v, Mask(v.rows(), true)};
  return PooledEmbedding{{v.data().begin(), v.data().end()}};
}

/// Inference-time query embedding of a signal sequence.
inline Representation embed_signal(const SignalSequence& seq, const EncoderParams& enc) {
  const auto w = bind_frozen(enc);
  Mask valid;
  Var h = encode_signal(seq, w, enc.config, &valid);
  return to_representation(pool(h, enc.config.pooling, valid), enc.config.pooling);
}

/// Frozen token vectors for a token list, L x d.
inline Tensor text_token_vectors(const std::vector<std::string>& tokens, const TextProvider& provider) {
  return provider.token_vectors(tokens);
}

/// Text-side representation. There is no trainable text CLS, so cls uses the
/// mean token vector like mean pooling does.
inline Representation encode_text(const std::vector<std::string>& tokens, const TextProvider& provider,
                                  Pooling strategy) {
  if (tokens.empty()) throw InvalidArgument("cannot encode an empty token list");
  Var rows = constant(provider.token_vectors(tokens));
  const Mask valid(tokens.size(), true);
  switch (strategy) {
    case Pooling::cls:
    case Pooling::mean: return to_representation(pool(rows, Pooling::mean, valid), strategy);
    case Pooling::max: return to_representation(pool(rows, Pooling::max, valid), strategy);
    case Pooling::multi: return to_representation(pool(rows, Pooling::multi, valid), strategy);
  }
  throw InvalidArgument("unknown pooling strategy");
}

// ---------------------------------------------------------------------------
// Checkpoints: "NRP1", u32 version, u32 length + EncoderConfig JSON, then every
// parameter in checkpoint order as little-endian f64.

inline constexpr char kCheckpointMagic[] = "NRP1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_checkpoint(const EncoderParams& enc) {
  ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.str(to_json(enc.config).dump());
  for (const auto& e : enc.params.entries())
    for (double v : e.value.data()) w.f64(v);
  return w.bytes();
}

inline EncoderParams decode_checkpoint(std::vector<char> bytes) {
  ByteReader r(std::move(bytes));
  if (r.raw(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError("bad magic: expected \"NRP1\"", 0);
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const std::size_t cfg_at = r.offset();
  EncoderConfig cfg;
  try {
    cfg = encoder_config_from_json(nlohmann::json::parse(r.str("config")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad encoder config: ") + e.what(), cfg_at);
  } catch (const ConfigError& e) {
    throw FormatError(e.what(), cfg_at);
  }
  EncoderParams enc = init_encoder(cfg, 0);
  for (auto& e : enc.params.entries())
    for (auto& v : e.value.data()) v = r.f64();
  r.expect_end();
  return enc;
}

inline void save_checkpoint(const EncoderParams& enc, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(enc));
}

inline EncoderParams load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace nr
