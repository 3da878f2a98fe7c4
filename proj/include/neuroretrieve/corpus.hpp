#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "random.hpp"
#include "text.hpp"
#include "text_provider.hpp"

namespace nr {

enum class Modality : std::uint8_t { auditory = 0, visual = 1 };

inline std::string to_string(Modality m) { return m == Modality::auditory ? "auditory" : "visual"; }

inline Modality parse_modality(const std::string& s) {
  if (s == "auditory") return Modality::auditory;
  if (s == "visual") return Modality::visual;
  throw ConfigError("modality must be 'auditory' or 'visual', got '" + s + "'");
}

/// Recording for one word: T temporal samples x C channels, row-major.
struct SignalSegment {
  std::size_t T = 0;
  std::size_t C = 0;
  std::vector<float> samples;

  float at(std::size_t t, std::size_t c) const { return samples[t * C + c]; }
  friend bool operator==(const SignalSegment&, const SignalSegment&) = default;
};

/// Word-aligned recording: one segment per word, all of one T x C shape.
struct SignalSequence {
  std::vector<SignalSegment> segments;
  std::vector<std::string> words;

  std::size_t length() const noexcept { return words.size(); }

  /// Words [start, start + len) with their segments.
  SignalSequence slice(std::size_t start, std::size_t len) const {
    if (start + len > length()) throw InvalidArgument("sequence slice out of range");
    SignalSequence s;
    s.segments.assign(segments.begin() + start, segments.begin() + start + len);
    s.words.assign(words.begin() + start, words.begin() + start + len);
    return s;
  }

  friend bool operator==(const SignalSequence&, const SignalSequence&) = default;
};

struct PairedRecord {
  std::string record_id;
  Modality modality = Modality::visual;
  std::string subject_id;
  SignalSequence sequence;

  friend bool operator==(const PairedRecord&, const PairedRecord&) = default;
};

struct CorpusMeta {
  std::string name;
  std::size_t T = 0;
  std::size_t C = 0;
  std::set<std::string> vocabulary;  // distinct normalized tokens

  friend bool operator==(const CorpusMeta&, const CorpusMeta&) = default;
};

struct Corpus {
  CorpusMeta meta;
  std::vector<PairedRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

inline std::set<std::string> compute_vocabulary(const std::vector<PairedRecord>& records) {
  std::set<std::string> vocab;
  for (const auto& r : records)
    for (const auto& w : r.sequence.words) {
      auto t = normalize_token(w);
      if (!t.empty()) vocab.insert(std::move(t));
    }
  return vocab;
}

inline void validate_segment(const SignalSegment& s, std::size_t T, std::size_t C) {
  if (s.T != T || s.C != C) {
    throw ShapeError("segment shape " + std::to_string(s.T) + "x" + std::to_string(s.C) +
                     " differs from corpus shape " + std::to_string(T) + "x" + std::to_string(C));
  }
  if (s.samples.size() != T * C) throw ShapeError("segment sample count does not match T x C");
  for (float v : s.samples)
    if (!std::isfinite(v)) throw NumericError("segment contains a non-finite sample");
}

/// Checks every corpus invariant; throws on the first violation.
inline void validate(const Corpus& c) {
  if (!c.empty() && (c.meta.T == 0 || c.meta.C == 0)) throw ShapeError("corpus T and C must be >= 1");
  std::unordered_set<std::string> ids;
  for (const auto& r : c.records) {
    if (!ids.insert(r.record_id).second) throw InvalidArgument("duplicate record id " + r.record_id);
    const auto& seq = r.sequence;
    if (seq.length() == 0) throw InvalidArgument("record " + r.record_id + " has no words");
    if (seq.segments.size() != seq.words.size()) {
      throw ShapeError("record " + r.record_id + ": segment count != word count");
    }
    for (const auto& s : seq.segments) validate_segment(s, c.meta.T, c.meta.C);
  }
}

/// Builds a corpus from records, deriving the vocabulary.
inline Corpus make_corpus(std::string name, std::size_t T, std::size_t C, std::vector<PairedRecord> records) {
  Corpus c;
  c.meta.name = std::move(name);
  c.meta.T = T;
  c.meta.C = C;
  c.records = std::move(records);
  c.meta.vocabulary = compute_vocabulary(c.records);
  validate(c);
  return c;
}

struct CorpusStats {
  std::size_t records = 0;
  std::size_t total_words = 0;
  std::size_t unique_words = 0;
  double avg_passage_length = 0.0;
};

inline CorpusStats corpus_stats(const Corpus& c) {
  CorpusStats s;
  s.records = c.size();
  for (const auto& r : c.records) s.total_words += r.sequence.length();
  s.unique_words = c.meta.vocabulary.size();
  s.avg_passage_length = s.records ? static_cast<double>(s.total_words) / static_cast<double>(s.records) : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic generation

struct GeneratorConfig {
  std::string name = "synthetic";
  Modality modality = Modality::visual;
  std::size_t n_records = 200;
  double passage_length_mean = 17.5;
  double passage_length_sd = 4.0;
  std::size_t query_count_target = 200;
  std::size_t T = 8;
  std::size_t C = 4;
  std::size_t latent_dim = 32;
  double noise_sigma = 0.0;
  std::size_t vocab_size = 100;
  std::size_t vocab_offset = 0;  // first global word index; shifts vocabularies apart
  std::size_t n_topics = 1;
  double topic_purity = 1.0;  // probability a word is drawn from the passage topic
  std::size_t n_subjects = 4;
  std::uint64_t seed = 0;
};

inline void validate(const GeneratorConfig& cfg) {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("generator.") + field + " must be positive");
  };
  positive(cfg.n_records, "n_records");
  positive(cfg.query_count_target, "query_count_target");
  positive(cfg.T, "T");
  positive(cfg.C, "C");
  positive(cfg.latent_dim, "latent_dim");
  positive(cfg.vocab_size, "vocab_size");
  positive(cfg.n_topics, "n_topics");
  positive(cfg.n_subjects, "n_subjects");
  if (!(cfg.passage_length_mean > 0.0)) throw ConfigError("generator.passage_length_mean must be positive");
  if (!(cfg.passage_length_sd >= 0.0)) throw ConfigError("generator.passage_length_sd must be >= 0");
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("generator.noise_sigma must be >= 0");
  if (!(cfg.topic_purity >= 0.0 && cfg.topic_purity <= 1.0)) {
    throw ConfigError("generator.topic_purity must lie in [0, 1]");
  }
  if (cfg.T * cfg.C < cfg.latent_dim) {
    throw ConfigError("generator: T*C = " + std::to_string(cfg.T * cfg.C) +
                      " is smaller than latent_dim = " + std::to_string(cfg.latent_dim));
  }
}

inline std::string synthetic_word(std::size_t global_index) {
  std::ostringstream os;
  os << 'w' << std::setw(4) << std::setfill('0') << global_index;
  return os.str();
}

/// Words the generator may emit, in global-index order, with their topic ids.
struct GeneratorVocabulary {
  std::vector<std::string> words;
  std::vector<std::size_t> topics;
};

inline GeneratorVocabulary generator_vocabulary(const GeneratorConfig& cfg) {
  GeneratorVocabulary v;
  for (std::size_t g = cfg.vocab_offset; g < cfg.vocab_offset + cfg.vocab_size; ++g) {
    v.words.push_back(synthetic_word(g));
    v.topics.push_back(g % cfg.n_topics);
  }
  return v;
}

/// Offset for a second vocabulary of size n_b so that its index range overlaps a
/// first range [0, n_a) with Jaccard similarity closest to `target`.
inline std::size_t vocab_offset_for_jaccard(std::size_t n_a, std::size_t n_b, double target) {
  if (!(target >= 0.0 && target <= 1.0)) throw ConfigError("Jaccard target must be in [0, 1]");
  const double shared = target * static_cast<double>(n_a + n_b) / (1.0 + target);
  const auto s = static_cast<std::size_t>(std::llround(std::min<double>(shared, std::min(n_a, n_b))));
  return n_a - s;
}

/// Mixing matrix A (T*C x k) with N(0, 1) entries, shared by every word of a corpus.
inline Tensor generator_mixing_matrix(const GeneratorConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0xA11CEULL));
  Tensor a(Shape{cfg.T * cfg.C, cfg.latent_dim});
  for (auto& v : a.data()) v = rng.normal();
  return a;
}

/// Synthetic word-aligned corpus: segment(w) = reshape(A * s_w, T x C) + sigma * N(0, 1),
/// where s_w is the provider's vector for w. Passage lengths are Gaussian around the
/// configured mean (at least 2 words, so a masked passage is never empty); each passage picks a topic and draws words from
/// it with probability topic_purity, otherwise uniformly from the vocabulary.
inline Corpus generate_synthetic(const GeneratorConfig& cfg, const TextProvider& provider) {
  validate(cfg);
  if (provider.dim() != cfg.latent_dim) {
    throw ConfigError("generator.latent_dim (" + std::to_string(cfg.latent_dim) +
                      ") must equal the text provider dimension (" + std::to_string(provider.dim()) + ")");
  }
  const auto vocab = generator_vocabulary(cfg);
  std::vector<std::vector<std::size_t>> by_topic(cfg.n_topics);
  for (std::size_t i = 0; i < vocab.words.size(); ++i) by_topic[vocab.topics[i]].push_back(i);

  const Tensor mixing = generator_mixing_matrix(cfg);
  const std::size_t D = cfg.T * cfg.C;
  std::vector<std::vector<float>> clean(vocab.words.size());
  for (std::size_t i = 0; i < vocab.words.size(); ++i) {
    const auto s = provider.vector(vocab.words[i]);
    clean[i].assign(D, 0.0f);
    for (std::size_t r = 0; r < D; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cfg.latent_dim; ++k) acc += mixing(r, k) * s[k];
      clean[i][r] = static_cast<float>(acc);
    }
  }

  Rng rng(cfg.seed);
  std::vector<PairedRecord> records;
  records.reserve(cfg.n_records);
  for (std::size_t n = 0; n < cfg.n_records; ++n) {
    const double draw = cfg.passage_length_mean + cfg.passage_length_sd * rng.normal();
    const auto L = static_cast<std::size_t>(std::max<long long>(2, std::llround(draw)));
    const std::size_t topic = rng.below(cfg.n_topics);
    const auto& pool = by_topic[topic].empty() ? by_topic[0] : by_topic[topic];

    PairedRecord rec;
    std::ostringstream id;
    id << cfg.name << '-' << std::setw(5) << std::setfill('0') << n;
    rec.record_id = id.str();
    rec.modality = cfg.modality;
    std::ostringstream subj;
    subj << 'S' << std::setw(2) << std::setfill('0') << (n % cfg.n_subjects) + 1;
    rec.subject_id = subj.str();
    for (std::size_t i = 0; i < L; ++i) {
      std::size_t w;
      if (cfg.n_topics > 1 && !pool.empty() && rng.bernoulli(cfg.topic_purity)) {
        w = pool[rng.below(pool.size())];
      } else {
        w = rng.below(vocab.words.size());
      }
      SignalSegment seg{cfg.T, cfg.C, clean[w]};
      if (cfg.noise_sigma > 0.0) {
        for (auto& v : seg.samples) v += static_cast<float>(cfg.noise_sigma * rng.normal());
      }
      rec.sequence.segments.push_back(std::move(seg));
      rec.sequence.words.push_back(vocab.words[w]);
    }
    records.push_back(std::move(rec));
  }
  return make_corpus(cfg.name, cfg.T, cfg.C, std::move(records));
}

// ---------------------------------------------------------------------------
// File format

inline constexpr char kCorpusMagic[] = "NRT1";
inline constexpr std::uint32_t kCorpusVersion = 1;

inline std::string sidecar_path(const std::string& path) {
  std::filesystem::path p(path);
  p.replace_extension(".meta.json");
  return p.string();
}

inline std::vector<char> encode_corpus(const Corpus& c) {
  validate(c);
  ByteWriter w;
  w.raw(std::string_view(kCorpusMagic, 4));
  w.u32(kCorpusVersion);
  w.u32(static_cast<std::uint32_t>(c.meta.T));
  w.u32(static_cast<std::uint32_t>(c.meta.C));
  w.u32(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    w.str(r.record_id);
    w.u8(static_cast<std::uint8_t>(r.modality));
    w.str(r.subject_id);
    w.u32(static_cast<std::uint32_t>(r.sequence.length()));
    for (const auto& word : r.sequence.words) w.str(word);
    for (const auto& seg : r.sequence.segments)
      for (float v : seg.samples) w.f32(v);
  }
  return w.bytes();
}

inline Corpus decode_corpus(std::vector<char> bytes, std::string name) {
  ByteReader r(std::move(bytes));
  const auto magic = r.raw(4, "magic");
  if (magic != std::string_view(kCorpusMagic, 4)) {
    throw FormatError("bad magic: expected \"NRT1\"", 0);
  }
  const std::size_t version_at = r.offset();
  const auto version = r.u32();
  if (version != kCorpusVersion) {
    throw FormatError("unsupported corpus version " + std::to_string(version) + " (expected 1)", version_at);
  }
  const std::size_t T = r.u32();
  const std::size_t C = r.u32();
  const std::size_t count = r.u32();
  if (count > 0 && (T == 0 || C == 0)) throw FormatError("T and C must be >= 1", 8);
  std::vector<PairedRecord> records;
  records.reserve(std::min<std::size_t>(count, 1 << 20));
  for (std::size_t n = 0; n < count; ++n) {
    PairedRecord rec;
    rec.record_id = r.str("record id");
    const std::size_t modality_at = r.offset();
    const auto modality = r.u8();
    if (modality > 1) throw FormatError("modality byte must be 0 or 1", modality_at);
    rec.modality = static_cast<Modality>(modality);
    rec.subject_id = r.str("subject id");
    const std::size_t length_at = r.offset();
    const std::size_t L = r.u32();
    if (L == 0) throw FormatError("record " + rec.record_id + " has L = 0", length_at);
    for (std::size_t i = 0; i < L; ++i) rec.sequence.words.push_back(r.str("word"));
    if (r.remaining() / 4 / T / C < L) {
      throw FormatError("truncated payload: record " + rec.record_id + " needs " +
                            std::to_string(L * T * C * 4) + " signal bytes",
                        r.offset());
    }
    for (std::size_t i = 0; i < L; ++i) {
      SignalSegment seg{T, C, std::vector<float>(T * C)};
      for (auto& v : seg.samples) v = r.f32();
      rec.sequence.segments.push_back(std::move(seg));
    }
    records.push_back(std::move(rec));
  }
  r.expect_end();
  try {
    return make_corpus(std::move(name), T, C, std::move(records));
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(e.what(), 0);
  }
}

inline nlohmann::json corpus_meta_json(const Corpus& c) {
  const auto s = corpus_stats(c);
  std::size_t auditory = 0;
  for (const auto& r : c.records) auditory += r.modality == Modality::auditory;
  return {{"name", c.meta.name},
          {"T", c.meta.T},
          {"C", c.meta.C},
          {"vocabulary", c.meta.vocabulary},
          {"statistics",
           {{"records", s.records},
            {"total_words", s.total_words},
            {"unique_words", s.unique_words},
            {"avg_passage_length", s.avg_passage_length},
            {"auditory_records", auditory},
            {"visual_records", s.records - auditory}}}};
}

/// Writes the binary corpus plus its ".meta.json" sidecar. `extra_meta` keys are
/// merged into the sidecar (e.g. the embeddings file that goes with the corpus).
inline void write_corpus(const Corpus& c, const std::string& path,
                         const nlohmann::json& extra_meta = nlohmann::json::object()) {
  write_file_atomic(path, encode_corpus(c));
  auto meta = corpus_meta_json(c);
  for (const auto& [k, v] : extra_meta.items()) meta[k] = v;
  write_file_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

inline nlohmann::json read_corpus_sidecar(const std::string& path) {
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) return nlohmann::json::object();
  try {
    const auto bytes = read_file_bytes(side);
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(side + ": " + e.what(), 0);
  }
}

inline Corpus read_corpus(const std::string& path) {
  auto side = read_corpus_sidecar(path);
  std::string name = side.contains("name") ? side["name"].get<std::string>()
                                           : std::filesystem::path(path).stem().string();
  return decode_corpus(read_file_bytes(path), std::move(name));
}

// ---------------------------------------------------------------------------
// Splits, merging, balancing

inline Corpus subset(const Corpus& c, std::vector<std::size_t> indices, std::string name) {
  std::sort(indices.begin(), indices.end());
  std::vector<PairedRecord> records;
  records.reserve(indices.size());
  for (auto i : indices) records.push_back(c.records.at(i));
  return make_corpus(std::move(name), c.meta.T, c.meta.C, std::move(records));
}

struct SplitFractions {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  Corpus train;
  Corpus dev;
  Corpus test;
};

/// Seeded record-level partition. dev and test get floor(n * fraction) records,
/// train gets the remainder; records keep corpus order within each part.
inline CorpusSplit split_corpus(const Corpus& c, SplitFractions f, std::uint64_t seed) {
  if (f.train < 0 || f.dev < 0 || f.test < 0 || std::abs(f.train + f.dev + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  const std::size_t n = c.size();
  if (n < 3) throw InvalidArgument("cannot split a corpus with fewer than 3 records");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_dev = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.dev + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.test + 1e-9));
  const std::size_t n_train = n - n_dev - n_test;
  auto part = [&](std::size_t from, std::size_t count) {
    return std::vector<std::size_t>(order.begin() + from, order.begin() + from + count);
  };
  return {subset(c, part(0, n_train), c.meta.name + "/train"),
          subset(c, part(n_train, n_dev), c.meta.name + "/dev"),
          subset(c, part(n_train + n_dev, n_test), c.meta.name + "/test")};
}

/// Concatenation of two corpora with identical T and C; modality tags are kept.
inline Corpus merge_corpora(const Corpus& a, const Corpus& b) {
  if (b.empty()) return a;
  if (a.empty()) return b;
  if (a.meta.T != b.meta.T || a.meta.C != b.meta.C) {
    throw ShapeError("cannot merge corpora with shapes " + std::to_string(a.meta.T) + "x" +
                     std::to_string(a.meta.C) + " and " + std::to_string(b.meta.T) + "x" +
                     std::to_string(b.meta.C) + "; resample to a common T, C first");
  }
  std::vector<PairedRecord> records = a.records;
  records.insert(records.end(), b.records.begin(), b.records.end());
  return make_corpus(a.meta.name + "+" + b.meta.name, a.meta.T, a.meta.C, std::move(records));
}

/// Seeded subsample of both corpora down to min(|a|, |b|) records.
inline std::pair<Corpus, Corpus> balance_corpora(const Corpus& a, const Corpus& b, std::uint64_t seed) {
  if (a.empty() || b.empty()) throw InvalidArgument("balance_corpora needs two non-empty corpora");
  const std::size_t n = std::min(a.size(), b.size());
  auto sample = [n](const Corpus& c, std::uint64_t s) {
    if (c.size() == n) return c;
    std::vector<std::size_t> order(c.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(s);
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(n);
    return subset(c, std::move(order), c.meta.name);
  };
  return {sample(a, derive_seed(seed, 0)), sample(b, derive_seed(seed, 1))};
}

/// |V_a intersect V_b| / |V_a union V_b| over normalized vocabularies.
inline double lexical_jaccard(const Corpus& a, const Corpus& b) {
  const auto& va = a.meta.vocabulary;
  const auto& vb = b.meta.vocabulary;
  if (va.empty() && vb.empty()) throw InvalidArgument("Jaccard of two empty vocabularies is undefined");
  std::size_t shared = 0;
  for (const auto& w : va) shared += vb.count(w);
  return static_cast<double>(shared) / static_cast<double>(va.size() + vb.size() - shared);
}

}  // namespace nr
