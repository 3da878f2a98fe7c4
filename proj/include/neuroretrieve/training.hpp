#pragma once

#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "encoders.hpp"
#include "ict.hpp"
#include "optim.hpp"

namespace nr {

struct TrainConfig {
  double learning_rate = 1e-5;
  double weight_decay = 0.01;
  double temperature = 0.07;
  std::size_t batch_size = 32;
  std::size_t warmup_epochs = 10;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  if (!(c.temperature > 0.0)) throw ConfigError("train.temperature must be positive");
  if (!(c.learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (c.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (c.max_epochs == 0) throw ConfigError("train.max_epochs must be >= 1");
  if (c.warmup_epochs >= c.max_epochs) throw ConfigError("train.warmup_epochs must be < train.max_epochs");
  if (c.patience == 0) throw ConfigError("train.patience must be >= 1");
  if (!(c.clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  }
  if (!(c.adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
}

/// Epoch-granular schedule: linear warmup to the base rate over warmup_epochs,
/// then linear decay reaching 0 at max_epochs.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.max_epochs) throw InvalidArgument("lr_at: epoch beyond max_epochs");
  const double base = cfg.learning_rate;
  if (epoch < cfg.warmup_epochs) {
    return base * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
  }
  return base * static_cast<double>(cfg.max_epochs - epoch) /
         static_cast<double>(cfg.max_epochs - cfg.warmup_epochs);
}

// ---------------------------------------------------------------------------
// Similarity

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Dot product for pooled embeddings (cosine, both are unit vectors); for
/// multi-vectors, MaxSim: sum over valid query rows of the best valid passage row.
inline double similarity(const Representation& q, const Representation& p) {
  if (q.index() != p.index()) throw InvalidArgument("similarity: pooled vs multi-vector mismatch");
  if (const auto* qa = std::get_if<PooledEmbedding>(&q)) {
    const auto& pa = std::get<PooledEmbedding>(p);
    if (qa->vector.size() != pa.vector.size()) throw ShapeError("similarity: embedding dimensions differ");
    return detail::dot(qa->vector, pa.vector);
  }
  const auto& qm = std::get<MultiVector>(q);
  const auto& pm = std::get<MultiVector>(p);
  if (qm.rows.cols() != pm.rows.cols()) throw ShapeError("similarity: embedding dimensions differ");
  double total = 0.0;
  for (std::size_t i = 0; i < qm.rows.rows(); ++i) {
    if (!qm.valid[i]) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < pm.rows.rows(); ++j)
      if (pm.valid[j]) best = std::max(best, detail::dot(qm.rows.row(i), pm.rows.row(j)));
    if (std::isinf(best)) throw InvalidArgument("similarity: passage has no valid rows");
    total += best;
  }
  return total;
}

/// Graph-side B x B score matrix between trainable query encodings and frozen
/// passage representations. Multi-vector scores are raw MaxSim sums.
inline Var score_matrix(const std::vector<Var>& queries, const std::vector<const Representation*>& passages,
                        Pooling strategy) {
  if (queries.size() != passages.size()) throw ShapeError("score_matrix needs one passage per query");
  const std::size_t b = queries.size();
  if (b == 0) throw InvalidArgument("score_matrix on an empty batch");
  if (strategy != Pooling::multi) {
    const std::size_t d = queries[0].cols();
    Tensor pt(Shape{d, b});
    for (std::size_t j = 0; j < b; ++j) {
      const auto& v = std::get<PooledEmbedding>(*passages[j]).vector;
      if (v.size() != d) throw ShapeError("score_matrix: embedding dimensions differ");
      for (std::size_t k = 0; k < d; ++k) pt(k, j) = v[k];
    }
    return matmul(concat_rows(queries), constant(std::move(pt)));
  }
  std::vector<Var> passage_t;
  passage_t.reserve(b);
  for (const auto* p : passages) {
    const auto& mv = std::get<MultiVector>(*p);
    passage_t.push_back(constant(transpose(mv.rows)));
  }
  std::vector<Var> cells;
  cells.reserve(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) cells.push_back(sum(max_per_row(matmul(queries[i], passage_t[j]))));
  return stack_scalars(cells, b, b);
}

/// Plain-value score matrix, S[i][j] = similarity(q_i, p_j).
inline Tensor score_matrix(const std::vector<Representation>& queries, const std::vector<Representation>& passages) {
  Tensor s(Shape{queries.size(), passages.size()});
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (std::size_t j = 0; j < passages.size(); ++j) s(i, j) = similarity(queries[i], passages[j]);
  return s;
}

// ---------------------------------------------------------------------------
// Loss over a batch of ICT pairs

/// Pair list with its frozen positive-passage representations computed once.
struct PreparedPairs {
  const std::vector<IctPair>* pairs = nullptr;
  std::vector<Representation> positives;

  std::size_t size() const noexcept { return positives.size(); }
};

inline PreparedPairs prepare_pairs(const std::vector<IctPair>& pairs, const TextProvider& provider, Pooling pooling) {
  PreparedPairs out{&pairs, {}};
  out.positives.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.positive_tokens.empty()) throw InvalidArgument("pair " + p.pair_id + " has an empty positive passage");
    out.positives.push_back(encode_text(p.positive_tokens, provider, pooling));
  }
  return out;
}

/// InfoNCE over the pairs at `indices` with in-batch negatives.
inline Var batch_loss(const PreparedPairs& data, std::span<const std::size_t> indices, const EncoderWeights& w,
                      const EncoderConfig& cfg, double temperature) {
  std::vector<Var> queries;
  std::vector<const Representation*> passages;
  queries.reserve(indices.size());
  passages.reserve(indices.size());
  for (auto i : indices) {
    Mask valid;
    Var h = encode_signal((*data.pairs)[i].query_signal, w, cfg, &valid);
    queries.push_back(pool(h, cfg.pooling, valid));
    passages.push_back(&data.positives[i]);
  }
  return info_nce(score_matrix(queries, passages, cfg.pooling), temperature);
}

/// Mean InfoNCE over consecutive batches, no parameter updates.
inline double evaluation_loss(const PreparedPairs& data, const EncoderParams& enc, std::size_t batch_size,
                              double temperature) {
  if (data.size() == 0) throw InvalidArgument("evaluation_loss on zero pairs");
  const auto w = bind_frozen(enc);
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size, ++batches) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    total += batch_loss(data, std::span(idx).subspan(start, n), w, enc.config, temperature).value().item();
  }
  return total / static_cast<double>(batches);
}

// ---------------------------------------------------------------------------
// Training loop

/// Tracks the best validation loss. Ties keep the earlier epoch.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 10) : patience_(patience) {}

  /// Records one epoch's validation loss; returns true on strict improvement.
  bool update(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      since_ = 0;
      return true;
    }
    ++since_;
    return false;
  }

  bool should_stop() const noexcept { return since_ >= patience_; }
  double best() const noexcept { return best_; }
  std::size_t epochs_since_improvement() const noexcept { return since_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_ = 0;
};

struct TrainState {
  std::size_t epoch = 0;  // epochs completed
  EarlyStopping stopper;
  AdamWState optimizer;
  Rng rng;

  explicit TrainState(const TrainConfig& cfg) : stopper(cfg.patience), rng(derive_seed(cfg.seed, 0x7A41)) {}
};

/// One pass over shuffled batches (last partial batch kept). Returns the mean
/// batch loss. Steps are skipped entirely when the scheduled rate is zero.
inline double train_epoch(const PreparedPairs& data, EncoderParams& enc, const TrainConfig& cfg, TrainState& state) {
  validate(cfg);
  if (data.size() == 0) throw InvalidArgument("train_epoch on zero pairs");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  state.rng.shuffle(std::span<std::size_t>(order));

  const double lr = lr_at(std::min(state.epoch, cfg.max_epochs - 1), cfg);
  const AdamWConfig opt{lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches) {
    const std::size_t n = std::min(cfg.batch_size, order.size() - start);
    const auto w = bind_trainable(enc);
    Var loss;
    try {
      loss = batch_loss(data, std::span(order).subspan(start, n), w, enc.config, cfg.temperature);
      backward(loss, enc.params);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(state.epoch + 1) + ", batch " + std::to_string(batches + 1) +
                         ": " + e.what());
    }
    total += loss.value().item();
    if (lr > 0.0) {
      clip_global_norm(enc.params, cfg.clip_norm);
      adamw_step(enc.params, state.optimizer, opt);
    }
  }
  state.epoch += 1;
  return total / static_cast<double>(batches);
}

inline double train_epoch(const std::vector<IctPair>& pairs, EncoderParams& enc, const TextProvider& provider,
                          const TrainConfig& cfg, TrainState& state) {
  return train_epoch(prepare_pairs(pairs, provider, enc.config.pooling), enc, cfg, state);
}

struct HistoryRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  bool stopped = false;
};

struct FitResult {
  EncoderParams best;
  std::size_t best_epoch = 0;  // 1-based
  std::vector<HistoryRow> history;
};

struct FitHooks {
  /// Replaces the validation-loss computation (tests use it to script losses).
  std::function<double(const EncoderParams&, std::size_t epoch)> validation_loss;
  /// Called whenever a new best epoch is found.
  std::function<void(const EncoderParams&, std::size_t epoch)> on_best;
};

/// Trains until patience runs out or max_epochs is reached and returns the
/// parameters of the best validation epoch.
inline FitResult fit(const std::vector<IctPair>& train_pairs, const std::vector<IctPair>& val_pairs,
                     EncoderParams enc, const TextProvider& provider, const TrainConfig& cfg,
                     const FitHooks& hooks = {}) {
  validate(cfg);
  if (val_pairs.empty()) throw InvalidArgument("fit needs a non-empty validation set");
  const auto train = prepare_pairs(train_pairs, provider, enc.config.pooling);
  const auto val = prepare_pairs(val_pairs, provider, enc.config.pooling);
  TrainState state(cfg);
  FitResult result{enc, 0, {}};
  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    HistoryRow row;
    row.epoch = e + 1;
    row.lr = lr_at(e, cfg);
    row.train_loss = train_epoch(train, enc, cfg, state);
    row.val_loss = hooks.validation_loss ? hooks.validation_loss(enc, e + 1)
                                         : evaluation_loss(val, enc, cfg.batch_size, cfg.temperature);
    if (!std::isfinite(row.val_loss)) throw NumericError("validation loss is not finite at epoch " + std::to_string(e + 1));
    if (state.stopper.update(row.val_loss)) {
      result.best = enc;
      result.best_epoch = e + 1;
      if (hooks.on_best) hooks.on_best(enc, e + 1);
    }
    row.stopped = state.stopper.should_stop();
    result.history.push_back(row);
    if (row.stopped) break;
  }
  return result;
}

/// Shortest round-trip decimal, "." separator regardless of locale.
inline std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string history_csv(const std::vector<HistoryRow>& history) {
  std::string out = "epoch,train_loss,val_loss,lr,stopped\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + format_number(r.train_loss) + "," + format_number(r.val_loss) + "," +
           format_number(r.lr) + "," + (r.stopped ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace nr
