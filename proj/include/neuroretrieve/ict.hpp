#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corpus.hpp"

namespace nr {

inline constexpr double kIctSpanRatio = 0.3;
inline constexpr double kIctMaskProbability = 0.9;

/// Inverse-cloze pair: a contiguous span of a passage is the query (words and
/// their signal segments); the positive is the passage, with the span cut out
/// when span_removed.
struct IctPair {
  std::string pair_id;
  Modality modality = Modality::visual;
  std::vector<std::string> query_words;
  SignalSequence query_signal;
  std::vector<std::string> positive_tokens;
  std::size_t span_start = 0;
  std::size_t span_len = 0;
  bool span_removed = false;
  std::string source_record_id;

  /// The full source passage, rebuilt from the positive and the query span.
  std::vector<std::string> source_words() const {
    if (!span_removed) return positive_tokens;
    std::vector<std::string> out(positive_tokens.begin(), positive_tokens.begin() + span_start);
    out.insert(out.end(), query_words.begin(), query_words.end());
    out.insert(out.end(), positive_tokens.begin() + span_start, positive_tokens.end());
    return out;
  }

  friend bool operator==(const IctPair&, const IctPair&) = default;
};

/// max(1, round_half_up(ratio * L)), capped at L.
inline std::size_t ict_span_length(std::size_t L, double ratio = kIctSpanRatio) {
  if (L == 0) throw InvalidArgument("ICT span of an empty passage");
  const auto len = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(L) + 0.5 + 1e-9));
  return std::clamp<std::size_t>(len, 1, L);
}

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Span length per ict_span_length, start uniform over [0, L - length].
inline Span extract_span(std::size_t L, Rng& rng, double ratio = kIctSpanRatio) {
  const std::size_t len = ict_span_length(L, ratio);
  return {static_cast<std::size_t>(rng.below(L - len + 1)), len};
}

/// Positive passage for a given masking decision.
inline std::vector<std::string> positive_for(const std::vector<std::string>& words, Span span, bool remove) {
  if (!remove) return words;
  std::vector<std::string> out(words.begin(), words.begin() + span.start);
  out.insert(out.end(), words.begin() + span.start + span.length, words.end());
  return out;
}

inline IctPair make_pair(const PairedRecord& record, double p_mask, Rng& rng, std::string pair_id,
                         double ratio = kIctSpanRatio) {
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) throw ConfigError("p_mask must lie in [0, 1]");
  const auto& seq = record.sequence;
  const Span span = extract_span(seq.length(), rng, ratio);
  IctPair p;
  p.pair_id = std::move(pair_id);
  p.modality = record.modality;
  p.query_signal = seq.slice(span.start, span.length);
  p.query_words = p.query_signal.words;
  p.span_start = span.start;
  p.span_len = span.length;
  p.span_removed = rng.bernoulli(p_mask);
  p.positive_tokens = positive_for(seq.words, span, p.span_removed);
  p.source_record_id = record.record_id;
  return p;
}

/// pairs_per_record pairs for every record. Record i draws from a generator
/// seeded with derive_seed(seed, i), so the result does not depend on batching.
inline std::vector<IctPair> build_training_pairs(const Corpus& corpus, std::size_t pairs_per_record,
                                                 double p_mask, std::uint64_t seed) {
  if (pairs_per_record == 0) throw ConfigError("pairs_per_record must be >= 1");
  std::vector<IctPair> pairs;
  pairs.reserve(corpus.size() * pairs_per_record);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const auto& rec = corpus.records[i];
    for (std::size_t k = 0; k < pairs_per_record; ++k) {
      pairs.push_back(make_pair(rec, p_mask, rng, rec.record_id + "#" + std::to_string(k)));
    }
  }
  return pairs;
}

struct Passage {
  std::size_t id = 0;
  std::vector<std::string> tokens;
};

/// Retrieval pool for one masking ratio: pairs (with masking decided), the
/// deduplicated passages, and each pair's positive passage id.
struct EvalPool {
  std::vector<IctPair> pairs;
  std::vector<Passage> passages;
  std::vector<std::size_t> positive_ids;  // parallel to pairs
  std::map<std::string, std::size_t> positives;
  double mask_ratio = 0.0;

  std::size_t size() const noexcept { return passages.size(); }
};

/// Number of masked positives for a ratio: round_half_up(ratio * n).
inline std::size_t masked_count(double ratio, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5 + 1e-9)));
}

/// Masks the positives of exactly masked_count(ratio, n) pairs, chosen as a prefix
/// of one seeded permutation so the masked set grows monotonically with the ratio.
inline EvalPool build_masked_pool(const std::vector<IctPair>& pairs, double mask_ratio, std::uint64_t seed) {
  if (pairs.empty()) throw InvalidArgument("cannot build an evaluation pool from zero pairs");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1]");
  const std::size_t n = pairs.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<bool> masked(n, false);
  for (std::size_t k = 0; k < masked_count(mask_ratio, n); ++k) masked[order[k]] = true;

  EvalPool pool;
  pool.mask_ratio = mask_ratio;
  std::map<std::vector<std::string>, std::size_t> seen;
  for (std::size_t i = 0; i < n; ++i) {
    IctPair p = pairs[i];
    const auto source = p.source_words();
    p.span_removed = masked[i];
    p.positive_tokens = positive_for(source, {p.span_start, p.span_len}, p.span_removed);
    if (p.positive_tokens.empty()) {
      throw InvalidArgument("pair " + p.pair_id + ": masking its span leaves an empty passage");
    }
    auto [it, inserted] = seen.try_emplace(p.positive_tokens, pool.passages.size());
    if (inserted) pool.passages.push_back({it->second, p.positive_tokens});
    if (!pool.positives.emplace(p.pair_id, it->second).second) {
      throw InvalidArgument("duplicate pair id " + p.pair_id);
    }
    pool.positive_ids.push_back(it->second);
    pool.pairs.push_back(std::move(p));
  }
  return pool;
}

// ---------------------------------------------------------------------------
// JSON-lines interchange (signal referenced by record id + span, not copied)

inline nlohmann::json pair_to_json(const IctPair& p) {
  return {{"pair_id", p.pair_id},
          {"modality", to_string(p.modality)},
          {"query_words", p.query_words},
          {"span_start", p.span_start},
          {"span_len", p.span_len},
          {"span_removed", p.span_removed},
          {"positive_tokens", p.positive_tokens},
          {"source_record_id", p.source_record_id}};
}

inline std::string pairs_to_jsonl(const std::vector<IctPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) out += pair_to_json(p).dump() + "\n";
  return out;
}

/// Parses pairs written by pairs_to_jsonl, re-slicing query signals from `corpus`.
inline std::vector<IctPair> pairs_from_jsonl(const std::string& text, const Corpus& corpus) {
  std::map<std::string, const PairedRecord*> by_id;
  for (const auto& r : corpus.records) by_id[r.record_id] = &r;
  std::vector<IctPair> pairs;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      IctPair p;
      p.pair_id = j.at("pair_id").get<std::string>();
      p.modality = parse_modality(j.at("modality").get<std::string>());
      p.query_words = j.at("query_words").get<std::vector<std::string>>();
      p.span_start = j.at("span_start").get<std::size_t>();
      p.span_len = j.at("span_len").get<std::size_t>();
      p.span_removed = j.at("span_removed").get<bool>();
      p.positive_tokens = j.at("positive_tokens").get<std::vector<std::string>>();
      p.source_record_id = j.at("source_record_id").get<std::string>();
      auto it = by_id.find(p.source_record_id);
      if (it == by_id.end()) throw InvalidArgument("pair references unknown record " + p.source_record_id);
      p.query_signal = it->second->sequence.slice(p.span_start, p.span_len);
      if (p.query_signal.words != p.query_words) {
        throw InvalidArgument("pair " + p.pair_id + " query words do not match its record span");
      }
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad pair line: ") + e.what());
    }
  }
  return pairs;
}

}  // namespace nr
