#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "encoders.hpp"
#include "ict.hpp"
#include "stats.hpp"
#include "training.hpp"

namespace nr {

inline constexpr double kDefaultMaskRatios[] = {0.0, 0.25, 0.5, 0.75, 0.9, 1.0};

struct RankedList {
  std::string pair_id;
  std::vector<std::size_t> order;  // passage ids, best first
  std::size_t rank_of_positive = 0;  // 1-based
};

/// Sorts passage ids by descending score, ties by ascending id.
inline RankedList rank_scores(std::string pair_id, std::span<const double> scores, std::size_t positive_id) {
  if (scores.empty()) throw InvalidArgument("cannot rank an empty pool");
  if (positive_id >= scores.size()) throw InvalidArgument("positive passage " + std::to_string(positive_id) + " is not in the pool");
  RankedList r;
  r.pair_id = std::move(pair_id);
  r.order.resize(scores.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  });
  r.rank_of_positive = static_cast<std::size_t>(std::find(r.order.begin(), r.order.end(), positive_id) - r.order.begin()) + 1;
  return r;
}

/// Rank of the positive alone: 1 + passages scoring higher, or equal with a smaller id.
inline std::size_t rank_of(std::span<const double> scores, std::size_t positive_id) {
  if (positive_id >= scores.size()) throw InvalidArgument("positive passage is not in the pool");
  const double s = scores[positive_id];
  std::size_t above = 0;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > s || (scores[j] == s && j < positive_id)) ++above;
  return above + 1;
}

inline double mrr(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw InvalidArgument("mrr of an empty rank list");
  double s = 0.0;
  for (auto r : ranks) {
    if (r < 1) throw InvalidArgument("ranks are 1-based");
    s += 1.0 / static_cast<double>(r);
  }
  return s / static_cast<double>(ranks.size());
}

inline double hit_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw InvalidArgument("hit_at_k of an empty rank list");
  if (k < 1) throw InvalidArgument("hit_at_k needs k >= 1");
  std::size_t hits = 0;
  for (auto r : ranks) hits += r <= k;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

struct MetricsReport {
  double mrr = 0.0;
  double hit1 = 0.0;
  double hit5 = 0.0;
  double hit10 = 0.0;
  std::size_t n_queries = 0;
  std::size_t pool_size = 0;
  double mask_ratio = 0.0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport metrics_from_ranks(std::span<const std::size_t> ranks, std::size_t pool_size, double mask_ratio) {
  return {mrr(ranks), hit_at_k(ranks, 1), hit_at_k(ranks, 5), hit_at_k(ranks, 10), ranks.size(), pool_size, mask_ratio};
}

// ---------------------------------------------------------------------------
// Dense retrieval

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; each index is handled once.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Frozen text representations of every pool passage, indexed by passage id.
inline std::vector<Representation> encode_passages(const EvalPool& pool, const TextProvider& provider, Pooling pooling) {
  std::vector<Representation> out;
  out.reserve(pool.passages.size());
  for (const auto& p : pool.passages) out.push_back(encode_text(p.tokens, provider, pooling));
  return out;
}

/// Exhaustive ranking of one query against every passage representation.
inline RankedList rank(const Representation& query, std::string pair_id, const std::vector<Representation>& passages,
                       std::size_t positive_id) {
  std::vector<double> scores(passages.size());
  for (std::size_t j = 0; j < passages.size(); ++j) scores[j] = similarity(query, passages[j]);
  return rank_scores(std::move(pair_id), scores, positive_id);
}

/// Ranks every pair's signal query against the pool. `queries` overrides the
/// pairs' own signals (noise control uses this); it must be parallel to pool.pairs.
inline std::vector<std::size_t> dense_ranks(const EncoderParams& enc, const TextProvider& provider, const EvalPool& pool,
                                            std::size_t threads = 1,
                                            const std::vector<SignalSequence>* queries = nullptr) {
  if (pool.passages.empty()) throw InvalidArgument("evaluation pool is empty");
  const auto passages = encode_passages(pool, provider, enc.config.pooling);
  std::vector<std::size_t> ranks(pool.pairs.size());
  detail::parallel_for(pool.pairs.size(), threads, [&](std::size_t i) {
    const auto& signal = queries ? (*queries)[i] : pool.pairs[i].query_signal;
    const auto q = embed_signal(signal, enc);
    std::vector<double> scores(passages.size());
    for (std::size_t j = 0; j < passages.size(); ++j) scores[j] = similarity(q, passages[j]);
    ranks[i] = rank_of(scores, pool.positive_ids[i]);
  });
  return ranks;
}

inline MetricsReport evaluate(const EncoderParams& enc, const TextProvider& provider, const EvalPool& pool,
                              std::size_t threads = 1) {
  const auto ranks = dense_ranks(enc, provider, pool, threads);
  return metrics_from_ranks(ranks, pool.size(), pool.mask_ratio);
}

/// Same pool, but every query segment replaced by i.i.d. N(0, 1) samples.
inline MetricsReport noise_control(const EncoderParams& enc, const TextProvider& provider, const EvalPool& pool,
                                   std::uint64_t seed, std::size_t threads = 1) {
  std::vector<SignalSequence> noise;
  noise.reserve(pool.pairs.size());
  for (std::size_t i = 0; i < pool.pairs.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    SignalSequence s = pool.pairs[i].query_signal;
    for (auto& seg : s.segments)
      for (auto& v : seg.samples) v = static_cast<float>(rng.normal());
    noise.push_back(std::move(s));
  }
  const auto ranks = dense_ranks(enc, provider, pool, threads, &noise);
  return metrics_from_ranks(ranks, pool.size(), pool.mask_ratio);
}

// ---------------------------------------------------------------------------
// BM25 (Okapi)

struct Bm25Index {
  double k1 = 1.5;
  double b = 0.75;
  std::vector<std::map<std::string, std::size_t>> tf;
  std::vector<std::size_t> lengths;
  double avgdl = 0.0;
  std::map<std::string, std::size_t> df;
  std::size_t N = 0;
};

/// Documents are tokenized with normalize_tokens before indexing.
inline Bm25Index bm25_build(const std::vector<std::vector<std::string>>& docs, double k1 = 1.5, double b = 0.75) {
  if (docs.empty()) throw InvalidArgument("BM25 index over zero documents");
  Bm25Index idx;
  idx.k1 = k1;
  idx.b = b;
  idx.N = docs.size();
  double total = 0.0;
  for (const auto& doc : docs) {
    const auto toks = normalize_tokens(doc);
    std::map<std::string, std::size_t> tf;
    for (const auto& t : toks) ++tf[t];
    for (const auto& [t, _] : tf) ++idx.df[t];
    idx.lengths.push_back(toks.size());
    total += static_cast<double>(toks.size());
    idx.tf.push_back(std::move(tf));
  }
  idx.avgdl = total / static_cast<double>(idx.N);
  return idx;
}

inline double bm25_idf(const Bm25Index& idx, const std::string& term) {
  auto it = idx.df.find(term);
  const double df = it == idx.df.end() ? 0.0 : static_cast<double>(it->second);
  return std::log((static_cast<double>(idx.N) - df + 0.5) / (df + 0.5) + 1.0);
}

/// Score of every document; repeated query terms count once per occurrence.
inline std::vector<double> bm25_scores(const std::vector<std::string>& query, const Bm25Index& idx) {
  if (idx.N == 0) throw InvalidArgument("BM25 index is empty");
  std::vector<double> scores(idx.N, 0.0);
  for (const auto& term : normalize_tokens(query)) {
    if (!idx.df.contains(term)) continue;
    const double idf = bm25_idf(idx, term);
    for (std::size_t d = 0; d < idx.N; ++d) {
      auto it = idx.tf[d].find(term);
      if (it == idx.tf[d].end()) continue;
      const double f = static_cast<double>(it->second);
      const double norm = idx.avgdl > 0.0 ? static_cast<double>(idx.lengths[d]) / idx.avgdl : 0.0;
      scores[d] += idf * f * (idx.k1 + 1.0) / (f + idx.k1 * (1.0 - idx.b + idx.b * norm));
    }
  }
  return scores;
}

inline RankedList bm25_rank(const std::vector<std::string>& query, const Bm25Index& idx, std::size_t positive_id,
                            std::string pair_id = {}) {
  const auto scores = bm25_scores(query, idx);
  return rank_scores(std::move(pair_id), scores, positive_id);
}

/// Text-query baseline: each pair's query words against the pool passages.
inline MetricsReport bm25_evaluate(const EvalPool& pool, double k1 = 1.5, double b = 0.75) {
  std::vector<std::vector<std::string>> docs;
  docs.reserve(pool.passages.size());
  for (const auto& p : pool.passages) docs.push_back(p.tokens);
  const auto idx = bm25_build(docs, k1, b);
  std::vector<std::size_t> ranks;
  ranks.reserve(pool.pairs.size());
  for (std::size_t i = 0; i < pool.pairs.size(); ++i) {
    ranks.push_back(rank_of(bm25_scores(pool.pairs[i].query_words, idx), pool.positive_ids[i]));
  }
  return metrics_from_ranks(ranks, pool.size(), pool.mask_ratio);
}

// ---------------------------------------------------------------------------
// Masking sweep

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;

  friend bool operator==(const MetricSummary&, const MetricSummary&) = default;
};

struct SweepReport {
  std::string label;
  std::vector<MetricsReport> levels;  // ascending mask ratio
  MetricSummary mrr, hit1, hit5, hit10;

  std::vector<double> column(double MetricsReport::*field) const {
    std::vector<double> out;
    for (const auto& l : levels) out.push_back(l.*field);
    return out;
  }

  friend bool operator==(const SweepReport&, const SweepReport&) = default;
};

inline MetricSummary summarize(const std::vector<double>& xs) { return {mean_of(xs), sample_std(xs)}; }

/// Sorts levels by ratio and fills in mean and sample std of every metric.
inline SweepReport make_sweep_report(std::string label, std::vector<MetricsReport> levels) {
  if (levels.empty()) throw InvalidArgument("sweep report with no levels");
  std::stable_sort(levels.begin(), levels.end(),
                   [](const auto& a, const auto& b) { return a.mask_ratio < b.mask_ratio; });
  SweepReport r{std::move(label), std::move(levels), {}, {}, {}, {}};
  r.mrr = summarize(r.column(&MetricsReport::mrr));
  r.hit1 = summarize(r.column(&MetricsReport::hit1));
  r.hit5 = summarize(r.column(&MetricsReport::hit5));
  r.hit10 = summarize(r.column(&MetricsReport::hit10));
  return r;
}

inline void validate_ratios(const std::vector<double>& ratios) {
  if (ratios.empty()) throw ConfigError("mask ratio list is empty");
  for (double r : ratios)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("mask ratios must lie in [0, 1]");
}

/// One pool per ratio (same seed, hence nested masked sets), evaluated by `eval`.
template <typename Eval>
SweepReport sweep(std::string label, const std::vector<IctPair>& pairs, const std::vector<double>& ratios,
                  std::uint64_t seed, Eval&& eval) {
  validate_ratios(ratios);
  std::vector<MetricsReport> levels;
  for (double r : ratios) levels.push_back(eval(build_masked_pool(pairs, r, seed)));
  return make_sweep_report(std::move(label), std::move(levels));
}

inline SweepReport masking_sweep(const EncoderParams& enc, const TextProvider& provider,
                                 const std::vector<IctPair>& pairs, const std::vector<double>& ratios,
                                 std::uint64_t seed, std::size_t threads = 1, std::string label = "model") {
  return sweep(std::move(label), pairs, ratios, seed,
               [&](const EvalPool& pool) { return evaluate(enc, provider, pool, threads); });
}

inline SweepReport bm25_sweep(const std::vector<IctPair>& pairs, const std::vector<double>& ratios, std::uint64_t seed) {
  return sweep("bm25", pairs, ratios, seed, [](const EvalPool& pool) { return bm25_evaluate(pool); });
}

inline SweepReport noise_sweep(const EncoderParams& enc, const TextProvider& provider,
                               const std::vector<IctPair>& pairs, const std::vector<double>& ratios,
                               std::uint64_t seed, std::size_t threads = 1, std::string label = "noise") {
  return sweep(std::move(label), pairs, ratios, seed, [&](const EvalPool& pool) {
    return noise_control(enc, provider, pool, derive_seed(seed, 0x4E015E), threads);
  });
}

// ---------------------------------------------------------------------------
// Comparisons

struct MetricComparison {
  std::string metric;
  TTestResult test;
  bool significant = false;  // p < alpha
};

inline constexpr const char* kMetricNames[] = {"mrr", "hit1", "hit5", "hit10"};
inline constexpr double MetricsReport::*kMetricFields[] = {&MetricsReport::mrr, &MetricsReport::hit1,
                                                           &MetricsReport::hit5, &MetricsReport::hit10};

/// Paired t-test per metric, pairing by masking level. Positive t means a > b.
inline std::vector<MetricComparison> compare_sweeps(const SweepReport& a, const SweepReport& b, double alpha = 0.05) {
  if (a.levels.size() != b.levels.size()) throw ConfigError("reports have different masking-ratio grids");
  for (std::size_t i = 0; i < a.levels.size(); ++i) {
    if (std::abs(a.levels[i].mask_ratio - b.levels[i].mask_ratio) > 1e-12) {
      throw ConfigError("reports have different masking-ratio grids");
    }
  }
  std::vector<MetricComparison> out;
  for (std::size_t m = 0; m < 4; ++m) {
    const auto x = a.column(kMetricFields[m]);
    const auto y = b.column(kMetricFields[m]);
    const auto t = paired_t_test(x, y);
    out.push_back({kMetricNames[m], t, t.p < alpha});
  }
  return out;
}

}  // namespace nr
