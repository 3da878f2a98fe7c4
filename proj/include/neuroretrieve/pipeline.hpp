#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <openssl/evp.h>
#include <nlohmann/json.hpp>

#include "report.hpp"

namespace nr {

inline constexpr char kToolName[] = "neuroretrieve";
inline constexpr char kToolVersion[] = "0.1.0";

// ---------------------------------------------------------------------------
// Digests and paths

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return os.str();
}

inline std::string sha256_file(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return sha256_hex(std::string_view(bytes.data(), bytes.size()));
}

/// `path` with its extension replaced, e.g. with_extension("m.bin", ".history.csv").
inline std::string with_extension(const std::string& path, const std::string& ext) {
  std::filesystem::path p(path);
  p.replace_extension(ext);
  return p.string();
}

inline void ensure_parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Run configuration

struct ProviderSettings {
  std::string mode = "topic";  // topic | seeded_hash | precomputed
  double spread = 0.5;         // topic mode: word noise relative to the topic direction
  std::string path;            // precomputed mode: JSON-lines embeddings
};

struct IctSettings {
  std::size_t pairs_per_record = 1;
  double p_mask = kIctMaskProbability;
};

struct EvalSettings {
  std::vector<double> ratios{std::begin(kDefaultMaskRatios), std::end(kDefaultMaskRatios)};
  bool noise = false;
  std::string baseline;  // "" or "bm25"
};

struct RunConfig {
  std::string preset;
  std::uint64_t seed = 0;
  std::vector<GeneratorConfig> generators{GeneratorConfig{}};
  std::optional<double> jaccard_target;  // places the second vocabulary
  ProviderSettings provider;
  EncoderConfig encoder{.T = 0, .C = 0, .d = 0};  // T, C from the corpus; d = 0 means the text dimension
  TrainConfig train;
  IctSettings ict;
  SplitFractions split;
  EvalSettings eval;
};

/// Seed streams derived from the run seed, one per pipeline stage.
enum class SeedStream : std::uint64_t {
  generator = 100,
  provider = 200,
  train = 300,
  init = 301,
  split = 400,
  train_pairs = 500,
  dev_pairs = 501,
  test_pairs = 502,
  pool = 600,
  noise = 700,
  balance = 800,
};

inline std::uint64_t stream_seed(const RunConfig& c, SeedStream s, std::uint64_t sub = 0) {
  return derive_seed(derive_seed(c.seed, static_cast<std::uint64_t>(s)), sub);
}

namespace detail {

/// Reads fields out of one JSON object, tracking which keys were consumed so that
/// unknown keys can be rejected with their full dotted path.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + " must be a JSON object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const nlohmann::json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field(key) + " must be true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field(key) + " must be an integer");
      if (!v.is_number_unsigned() && v.get<long long>() < 0) throw ConfigError(field(key) + " must be >= 0");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field(key) + " must be a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field(key) + " must be a string");
      out = v.get<std::string>();
    } else {
      try {
        out = v.get<T>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(field(key) + " has the wrong type");
      }
    }
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError("unknown config key " + field(k));
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_generator(const nlohmann::json& j, const std::string& path, GeneratorConfig& g) {
  ConfigReader r(j, path);
  r.get("name", g.name);
  if (r.has("modality")) {
    std::string m;
    r.get("modality", m);
    try {
      g.modality = parse_modality(m);
    } catch (const Error&) {
      throw ConfigError(r.field("modality") + " must be \"auditory\" or \"visual\"");
    }
  }
  r.get("n_records", g.n_records);
  r.get("passage_length_mean", g.passage_length_mean);
  r.get("passage_length_sd", g.passage_length_sd);
  r.get("query_count_target", g.query_count_target);
  r.get("T", g.T);
  r.get("C", g.C);
  r.get("latent_dim", g.latent_dim);
  r.get("noise_sigma", g.noise_sigma);
  r.get("vocab_size", g.vocab_size);
  r.get("vocab_offset", g.vocab_offset);
  r.get("n_topics", g.n_topics);
  r.get("topic_purity", g.topic_purity);
  r.get("n_subjects", g.n_subjects);
  r.finish();
}

inline void apply_config(const nlohmann::json& j, RunConfig& c) {
  ConfigReader r(j, "");
  r.get("preset", c.preset);
  r.get("seed", c.seed);
  if (r.has("generators")) {
    const auto& arr = r.at("generators");
    if (!arr.is_array() || arr.empty() || arr.size() > 2) {
      throw ConfigError("generators must be an array of one or two generator objects");
    }
    c.generators.resize(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) {
      read_generator(arr[i], "generators[" + std::to_string(i) + "]", c.generators[i]);
    }
  }
  if (r.has("jaccard_target")) {
    double t = 0.0;
    r.get("jaccard_target", t);
    c.jaccard_target = t;
  }
  if (r.has("provider")) {
    ConfigReader p(r.at("provider"), "provider");
    p.get("mode", c.provider.mode);
    p.get("spread", c.provider.spread);
    p.get("path", c.provider.path);
    p.finish();
  }
  if (r.has("encoder")) {
    ConfigReader e(r.at("encoder"), "encoder");
    e.get("d", c.encoder.d);
    e.get("layers", c.encoder.layers);
    e.get("heads", c.encoder.heads);
    e.get("ffn_multiplier", c.encoder.ffn_multiplier);
    if (e.has("pooling")) {
      std::string p;
      e.get("pooling", p);
      c.encoder.pooling = parse_pooling(p);
    }
    e.finish();
  }
  if (r.has("train")) {
    ConfigReader t(r.at("train"), "train");
    t.get("learning_rate", c.train.learning_rate);
    t.get("weight_decay", c.train.weight_decay);
    t.get("temperature", c.train.temperature);
    t.get("batch_size", c.train.batch_size);
    t.get("warmup_epochs", c.train.warmup_epochs);
    t.get("max_epochs", c.train.max_epochs);
    t.get("patience", c.train.patience);
    t.get("clip_norm", c.train.clip_norm);
    t.get("beta1", c.train.beta1);
    t.get("beta2", c.train.beta2);
    t.get("adam_eps", c.train.adam_eps);
    t.finish();
  }
  if (r.has("ict")) {
    ConfigReader i(r.at("ict"), "ict");
    i.get("pairs_per_record", c.ict.pairs_per_record);
    i.get("p_mask", c.ict.p_mask);
    i.finish();
  }
  if (r.has("split")) {
    ConfigReader s(r.at("split"), "split");
    s.get("train", c.split.train);
    s.get("dev", c.split.dev);
    s.get("test", c.split.test);
    s.finish();
  }
  if (r.has("eval")) {
    ConfigReader e(r.at("eval"), "eval");
    e.get("ratios", c.eval.ratios);
    e.get("noise", c.eval.noise);
    e.get("baseline", c.eval.baseline);
    e.finish();
  }
  r.finish();
}

}  // namespace detail

/// Checks every field before any work starts; messages name the offending field.
inline void validate(const RunConfig& c) {
  if (c.generators.empty() || c.generators.size() > 2) throw ConfigError("generators must hold one or two entries");
  for (const auto& g : c.generators) validate(g);
  if (c.generators.size() == 2) {
    const auto& a = c.generators[0];
    const auto& b = c.generators[1];
    if (a.latent_dim != b.latent_dim) throw ConfigError("generators[1].latent_dim must equal generators[0].latent_dim");
    if (a.T != b.T || a.C != b.C) throw ConfigError("generators[1].T/C must equal generators[0].T/C");
    if (a.name == b.name) throw ConfigError("generators[1].name must differ from generators[0].name");
  }
  if (c.jaccard_target && !(*c.jaccard_target >= 0.0 && *c.jaccard_target <= 1.0)) {
    throw ConfigError("jaccard_target must lie in [0, 1]");
  }
  const auto& m = c.provider.mode;
  if (m != "topic" && m != "seeded_hash" && m != "precomputed") {
    throw ConfigError("provider.mode must be one of topic, seeded_hash, precomputed");
  }
  if (m == "topic" && !(c.provider.spread >= 0.0)) throw ConfigError("provider.spread must be >= 0");
  if (m == "precomputed" && c.provider.path.empty()) throw ConfigError("provider.path is required in precomputed mode");
  if (c.encoder.layers == 0) throw ConfigError("encoder.layers must be >= 1");
  if (c.encoder.heads == 0) throw ConfigError("encoder.heads must be >= 1");
  if (c.encoder.ffn_multiplier == 0) throw ConfigError("encoder.ffn_multiplier must be >= 1");
  validate(c.train);
  if (c.ict.pairs_per_record == 0) throw ConfigError("ict.pairs_per_record must be >= 1");
  if (!(c.ict.p_mask >= 0.0 && c.ict.p_mask <= 1.0)) throw ConfigError("ict.p_mask must lie in [0, 1]");
  for (auto [name, v] : {std::pair{"split.train", c.split.train}, {"split.dev", c.split.dev}, {"split.test", c.split.test}}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  }
  if (std::abs(c.split.train + c.split.dev + c.split.test - 1.0) > 1e-9) {
    throw ConfigError("split.train + split.dev + split.test must equal 1");
  }
  if (!(c.split.dev > 0.0 && c.split.test > 0.0)) throw ConfigError("split.dev and split.test must be positive");
  validate_ratios(c.eval.ratios);
  if (!c.eval.baseline.empty() && c.eval.baseline != "bm25") throw ConfigError("eval.baseline must be \"bm25\"");
}

// ---------------------------------------------------------------------------
// Presets

inline GeneratorConfig table1_visual_generator() {
  GeneratorConfig g;
  g.name = "visual";
  g.modality = Modality::visual;
  g.n_records = 1200;
  g.query_count_target = 1200;
  g.passage_length_mean = 17.5;
  g.passage_length_sd = 4.0;
  g.vocab_size = 674;
  g.n_topics = 8;
  g.topic_purity = 0.8;
  g.T = 8;
  g.C = 4;
  g.latent_dim = 32;
  g.noise_sigma = 0.1;
  return g;
}

inline GeneratorConfig table1_auditory_generator() {
  GeneratorConfig g = table1_visual_generator();
  g.name = "auditory";
  g.modality = Modality::auditory;
  g.passage_length_mean = 19.6;
  g.vocab_size = 543;
  g.vocab_offset = vocab_offset_for_jaccard(674, 543, 0.175);
  return g;
}

/// Both preset corpora with the full experimental design; about a minute on one core.
/// The noisier visual signal stands in for the harder modality.
inline RunConfig reproduce_shape_config() {
  RunConfig c;
  c.preset = "reproduce-shape";
  GeneratorConfig a = table1_auditory_generator();
  a.vocab_offset = 0;
  a.noise_sigma = 0.3;
  GeneratorConfig v = table1_visual_generator();
  v.noise_sigma = 0.6;
  c.generators = {a, v};
  c.jaccard_target = 0.175;
  c.encoder.d = 0;
  c.encoder.heads = 2;
  c.train.learning_rate = 1e-3;
  c.train.batch_size = 32;
  c.train.warmup_epochs = 2;
  c.train.max_epochs = 40;
  c.train.patience = 5;
  return c;
}

inline RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "table1-visual") {
    c.generators = {table1_visual_generator()};
  } else if (name == "table1-auditory") {
    c.generators = {table1_auditory_generator()};
  } else if (name == "table1-pair") {
    c.generators = {table1_visual_generator(), table1_auditory_generator()};
    c.generators[1].vocab_offset = 0;
    c.jaccard_target = 0.175;
  } else if (name == "reproduce-shape") {
    c = reproduce_shape_config();
  } else if (!name.empty()) {
    throw ConfigError("unknown preset \"" + name + "\" (table1-visual, table1-auditory, table1-pair, reproduce-shape)");
  }
  return c;
}

/// Preset named in the JSON (if any), then every field from the JSON on top.
inline RunConfig config_from_json(const nlohmann::json& j) {
  std::string preset;
  if (j.is_object() && j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError("preset must be a string");
    preset = j["preset"].get<std::string>();
  }
  RunConfig c = preset_config(preset);
  detail::apply_config(j, c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json to_json(const GeneratorConfig& g) {
  return {{"name", g.name},
          {"modality", to_string(g.modality)},
          {"n_records", g.n_records},
          {"passage_length_mean", g.passage_length_mean},
          {"passage_length_sd", g.passage_length_sd},
          {"query_count_target", g.query_count_target},
          {"T", g.T},
          {"C", g.C},
          {"latent_dim", g.latent_dim},
          {"noise_sigma", g.noise_sigma},
          {"vocab_size", g.vocab_size},
          {"vocab_offset", g.vocab_offset},
          {"n_topics", g.n_topics},
          {"topic_purity", g.topic_purity},
          {"n_subjects", g.n_subjects}};
}

/// Snapshot in the same schema config_from_json reads (minus the preset key).
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& g : c.generators) gens.push_back(to_json(g));
  nlohmann::json j = {
      {"seed", c.seed},
      {"generators", gens},
      {"provider", {{"mode", c.provider.mode}, {"spread", c.provider.spread}, {"path", c.provider.path}}},
      {"encoder",
       {{"d", c.encoder.d},
        {"layers", c.encoder.layers},
        {"heads", c.encoder.heads},
        {"ffn_multiplier", c.encoder.ffn_multiplier},
        {"pooling", to_string(c.encoder.pooling)}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"weight_decay", c.train.weight_decay},
        {"temperature", c.train.temperature},
        {"batch_size", c.train.batch_size},
        {"warmup_epochs", c.train.warmup_epochs},
        {"max_epochs", c.train.max_epochs},
        {"patience", c.train.patience},
        {"clip_norm", json_number(c.train.clip_norm)},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"adam_eps", c.train.adam_eps}}},
      {"ict", {{"pairs_per_record", c.ict.pairs_per_record}, {"p_mask", c.ict.p_mask}}},
      {"split", {{"train", c.split.train}, {"dev", c.split.dev}, {"test", c.split.test}}},
      {"eval", {{"ratios", c.eval.ratios}, {"noise", c.eval.noise}, {"baseline", c.eval.baseline}}}};
  if (c.jaccard_target) j["jaccard_target"] = *c.jaccard_target;
  return j;
}

/// Evaluation worker count from NEURORETRIEVE_THREADS, else the hardware count.
inline std::size_t eval_threads() {
  if (const char* env = std::getenv("NEURORETRIEVE_THREADS")) {
    const std::string s(env);
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || v == 0) {
      throw ConfigError("NEURORETRIEVE_THREADS must be a positive integer, got \"" + s + "\"");
    }
    return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestFile {
  std::string role;
  std::string path;
  std::string sha256;
};

struct Manifest {
  std::string command;
  nlohmann::json config;
  std::vector<ManifestFile> inputs;
  std::vector<ManifestFile> artifacts;
  nlohmann::json details = nlohmann::json::object();
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void input(std::string role, const std::string& path) { inputs.push_back({std::move(role), path, sha256_file(path)}); }
  void artifact(std::string role, const std::string& path) {
    artifacts.push_back({std::move(role), path, sha256_file(path)});
  }
};

inline nlohmann::json to_json(const std::vector<ManifestFile>& files) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& f : files) out.push_back({{"role", f.role}, {"path", f.path}, {"sha256", f.sha256}});
  return out;
}

/// Written atomically; only wall_clock_seconds varies between identical runs.
inline void write_manifest(const Manifest& m, const std::string& path) {
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - m.started).count();
  nlohmann::json j = {{"tool", kToolName},
                      {"version", kToolVersion},
                      {"command", m.command},
                      {"config", m.config},
                      {"inputs", to_json(m.inputs)},
                      {"artifacts", to_json(m.artifacts)},
                      {"details", m.details},
                      {"wall_clock_seconds", secs}};
  write_file_atomic(path, j.dump(2) + "\n");
}

/// Re-hashes every recorded input and artifact; returns the paths that differ.
inline std::vector<std::string> verify_manifest(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what(), 0);
  }
  std::vector<std::string> bad;
  for (const char* key : {"inputs", "artifacts"}) {
    for (const auto& f : j.at(key)) {
      const auto p = f.at("path").get<std::string>();
      if (!std::filesystem::exists(p) || sha256_file(p) != f.at("sha256").get<std::string>()) bad.push_back(p);
    }
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Data generation

/// Corpus statistics over one ICT pair per record.
struct Table1Stats {
  std::string name;
  std::size_t queries = 0;
  std::size_t total_words = 0;  // query words plus passage words
  std::size_t unique_words = 0;
  double avg_query_length = 0.0;
  double avg_passage_length = 0.0;
};

inline Table1Stats table1_stats(const Corpus& c, const std::vector<IctPair>& pairs) {
  Table1Stats s;
  s.name = c.meta.name;
  s.queries = pairs.size();
  s.unique_words = c.meta.vocabulary.size();
  std::size_t q = 0;
  std::size_t p = 0;
  for (const auto& pair : pairs) {
    q += pair.query_words.size();
    p += pair.source_words().size();
  }
  s.total_words = q + p;
  if (!pairs.empty()) {
    s.avg_query_length = static_cast<double>(q) / static_cast<double>(pairs.size());
    s.avg_passage_length = static_cast<double>(p) / static_cast<double>(pairs.size());
  }
  return s;
}

inline nlohmann::json to_json(const Table1Stats& s) {
  return {{"queries", s.queries},
          {"total_words", s.total_words},
          {"unique_words", s.unique_words},
          {"avg_query_length", s.avg_query_length},
          {"avg_passage_length", s.avg_passage_length}};
}

/// The generators with the second vocabulary offset to hit jaccard_target.
inline std::vector<GeneratorConfig> resolved_generators(const RunConfig& c) {
  auto gens = c.generators;
  for (std::size_t i = 0; i < gens.size(); ++i) gens[i].seed = stream_seed(c, SeedStream::generator, i);
  if (gens.size() == 2 && c.jaccard_target) {
    gens[1].vocab_offset =
        gens[0].vocab_offset + vocab_offset_for_jaccard(gens[0].vocab_size, gens[1].vocab_size, *c.jaccard_target);
  }
  return gens;
}

/// Text provider shared by every generated corpus of a run.
inline TextProvider build_provider(const RunConfig& c, const std::vector<GeneratorConfig>& gens) {
  const std::size_t dim = gens.at(0).latent_dim;
  const auto seed = stream_seed(c, SeedStream::provider);
  if (c.provider.mode == "seeded_hash") return TextProvider::seeded_hash(dim, seed);
  if (c.provider.mode == "precomputed") {
    auto p = TextProvider::load_jsonl(c.provider.path);
    if (p.dim() != dim) {
      throw ConfigError("provider.path embeddings have dimension " + std::to_string(p.dim()) +
                        ", generators[0].latent_dim is " + std::to_string(dim));
    }
    return p;
  }
  std::map<std::size_t, std::size_t> topic_of;  // global word index -> topic
  for (const auto& g : gens) {
    const auto v = generator_vocabulary(g);
    for (std::size_t i = 0; i < v.words.size(); ++i) topic_of.emplace(g.vocab_offset + i, v.topics[i]);
  }
  std::vector<std::string> words;
  std::vector<std::size_t> topics;
  for (const auto& [idx, topic] : topic_of) {
    words.push_back(synthetic_word(idx));
    topics.push_back(topic);
  }
  return make_topic_provider(words, topics, gens[0].n_topics, dim, c.provider.spread, seed);
}

inline std::string embeddings_path(const std::string& corpus_path) {
  return with_extension(corpus_path, ".embeddings.jsonl");
}

/// Sidecar entry telling later commands how to rebuild the text provider.
inline nlohmann::json provider_meta(const TextProvider& p, const std::string& corpus_path) {
  if (p.mode() == ProviderMode::seeded_hash) return {{"mode", "seeded_hash"}, {"dim", p.dim()}, {"seed", p.seed()}};
  const auto emb = embeddings_path(corpus_path);
  return {{"mode", "precomputed"},
          {"embeddings", std::filesystem::path(emb).filename().string()},
          {"sha256", sha256_file(emb)}};
}

/// Text provider recorded in a corpus sidecar.
inline TextProvider provider_for_corpus(const std::string& corpus_path) {
  const auto side = read_corpus_sidecar(corpus_path);
  if (!side.contains("provider")) {
    throw ConfigError(corpus_path + " has no text provider in its sidecar; regenerate it with gen-data");
  }
  const auto& p = side["provider"];
  try {
    if (p.at("mode") == "seeded_hash") {
      return TextProvider::seeded_hash(p.at("dim").get<std::size_t>(), p.at("seed").get<std::uint64_t>());
    }
    const auto emb = (std::filesystem::path(corpus_path).parent_path() / p.at("embeddings").get<std::string>()).string();
    if (sha256_file(emb) != p.at("sha256").get<std::string>()) {
      throw FormatError(emb + " does not match the digest recorded in " + sidecar_path(corpus_path), 0);
    }
    return TextProvider::load_jsonl(emb);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar_path(corpus_path) + ": bad provider entry: " + e.what(), 0);
  }
}

inline std::string provider_fingerprint(const std::string& corpus_path) {
  const auto side = read_corpus_sidecar(corpus_path);
  if (!side.contains("provider")) return {};
  auto p = side["provider"];
  p.erase("embeddings");  // file name differs per corpus; the digest identifies the table
  return p.dump();
}

inline std::uint64_t name_key(const std::string& name) { return fnv1a64(name); }

inline void print_stats(std::ostream& out, const std::vector<Table1Stats>& stats, std::optional<double> jaccard) {
  out << std::left << std::setw(22) << "statistic";
  for (const auto& s : stats) out << std::setw(14) << s.name;
  out << "\n";
  auto row = [&](const char* label, auto get) {
    out << std::setw(22) << label;
    for (const auto& s : stats) out << std::setw(14) << get(s);
    out << "\n";
  };
  auto fixed2 = [](double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
    return std::string(buf, ptr);
  };
  row("total queries", [](const Table1Stats& s) { return std::to_string(s.queries); });
  row("total words", [](const Table1Stats& s) { return std::to_string(s.total_words); });
  row("unique words", [](const Table1Stats& s) { return std::to_string(s.unique_words); });
  row("avg query length", [&](const Table1Stats& s) { return fixed2(s.avg_query_length); });
  row("avg passage length", [&](const Table1Stats& s) { return fixed2(s.avg_passage_length); });
  if (jaccard) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, *jaccard, std::chars_format::fixed, 3);
    out << std::setw(22) << "lexical similarity" << std::string(buf, ptr) << "\n";
  }
}

struct GenDataResult {
  std::vector<std::string> corpus_paths;
  std::vector<Table1Stats> stats;
  std::optional<double> jaccard;
};

/// Generates one corpus per configured generator. outputs[i] is the corpus path
/// for generators[i]; the manifest goes next to outputs[0].
inline GenDataResult cmd_gen_data(const RunConfig& cfg, const std::vector<std::string>& outputs, std::ostream& log) {
  validate(cfg);
  if (outputs.size() != cfg.generators.size()) {
    throw ConfigError("gen-data: " + std::to_string(cfg.generators.size()) + " generator(s) configured but " +
                      std::to_string(outputs.size()) + " output path(s) given (use --out and --out2)");
  }
  Manifest manifest;
  manifest.command = "gen-data";
  manifest.config = to_json(cfg);
  const auto gens = resolved_generators(cfg);
  const auto provider = build_provider(cfg, gens);
  if (cfg.provider.mode == "precomputed") manifest.input("embeddings", cfg.provider.path);

  std::vector<std::string> tokens;  // provider vocabulary written next to each corpus
  for (const auto& g : gens) {
    for (const auto& w : generator_vocabulary(g).words) tokens.push_back(w);
  }
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());

  GenDataResult result;
  std::vector<Corpus> corpora;
  for (std::size_t i = 0; i < gens.size(); ++i) {
    const auto& path = outputs[i];
    ensure_parent_dir(path);
    Corpus c = generate_synthetic(gens[i], provider);
    if (provider.mode() == ProviderMode::precomputed) provider.save_jsonl(embeddings_path(path), tokens);
    const auto pairs = build_training_pairs(c, 1, cfg.ict.p_mask, stream_seed(cfg, SeedStream::train_pairs, name_key(c.meta.name)));
    auto stats = table1_stats(c, pairs);
    write_corpus(c, path, {{"provider", provider_meta(provider, path)}, {"table1", to_json(stats)}});
    manifest.artifact("corpus", path);
    manifest.artifact("sidecar", sidecar_path(path));
    if (provider.mode() == ProviderMode::precomputed) manifest.artifact("embeddings", embeddings_path(path));
    result.corpus_paths.push_back(path);
    result.stats.push_back(stats);
    corpora.push_back(std::move(c));
  }
  if (corpora.size() == 2) result.jaccard = lexical_jaccard(corpora[0], corpora[1]);
  print_stats(log, result.stats, result.jaccard);

  nlohmann::json stats = nlohmann::json::object();
  for (const auto& s : result.stats) stats[s.name] = to_json(s);
  manifest.details = {{"statistics", stats}};
  if (result.jaccard) manifest.details["lexical_jaccard"] = *result.jaccard;
  write_manifest(manifest, with_extension(outputs[0], ".manifest.json"));
  return result;
}

// ---------------------------------------------------------------------------
// Training and evaluation data

struct LoadedData {
  std::vector<std::string> paths;
  std::vector<Corpus> corpora;  // balanced when two
  TextProvider provider = TextProvider::seeded_hash(1, 0);
};

inline LoadedData load_data(const RunConfig& cfg, const std::vector<std::string>& paths) {
  if (paths.empty() || paths.size() > 2) throw ConfigError("expected one or two corpus paths");
  LoadedData d;
  d.paths = paths;
  for (const auto& p : paths) d.corpora.push_back(read_corpus(p));
  d.provider = provider_for_corpus(paths[0]);
  if (paths.size() == 2) {
    if (provider_fingerprint(paths[0]) != provider_fingerprint(paths[1])) {
      throw ConfigError("the two corpora were generated with different text providers");
    }
    if (d.corpora[0].meta.name == d.corpora[1].meta.name) throw ConfigError("the two corpora have the same name");
    auto [a, b] = balance_corpora(d.corpora[0], d.corpora[1], stream_seed(cfg, SeedStream::balance));
    d.corpora = {std::move(a), std::move(b)};
  }
  return d;
}

inline CorpusSplit split_for(const RunConfig& cfg, const Corpus& c) {
  return split_corpus(c, cfg.split, stream_seed(cfg, SeedStream::split));
}

/// ICT pairs of one split of every corpus; each corpus draws from its own seed
/// stream so a corpus yields the same pairs whether used alone or combined.
inline std::vector<IctPair> split_pairs(const RunConfig& cfg, const LoadedData& d, Corpus CorpusSplit::*part,
                                        SeedStream stream, std::size_t pairs_per_record) {
  std::vector<IctPair> pairs;
  for (const auto& c : d.corpora) {
    const auto split = split_for(cfg, c);
    auto p = build_training_pairs(split.*part, pairs_per_record, cfg.ict.p_mask,
                                  stream_seed(cfg, stream, name_key(c.meta.name)));
    pairs.insert(pairs.end(), p.begin(), p.end());
  }
  return pairs;
}

inline std::vector<IctPair> test_pairs(const RunConfig& cfg, const LoadedData& d) {
  return split_pairs(cfg, d, &CorpusSplit::test, SeedStream::test_pairs, 1);
}

inline EncoderConfig encoder_for(const RunConfig& cfg, const LoadedData& d) {
  EncoderConfig e = cfg.encoder;
  e.T = d.corpora[0].meta.T;
  e.C = d.corpora[0].meta.C;
  if (e.d == 0) e.d = d.provider.dim();
  if (e.d != d.provider.dim()) {
    throw ConfigError("encoder.d (" + std::to_string(e.d) + ") must equal the text embedding dimension (" +
                      std::to_string(d.provider.dim()) + ")");
  }
  validate(e);
  return e;
}

struct TrainResult {
  FitResult fit;
  std::string mode;  // individual | combined
  std::map<std::string, std::size_t> modality_counts;
};

inline TrainResult cmd_train(const RunConfig& cfg, const std::vector<std::string>& corpus_paths,
                             const std::string& out_checkpoint, std::ostream& log) {
  validate(cfg);
  Manifest manifest;
  manifest.command = "train";
  manifest.config = to_json(cfg);
  const auto data = load_data(cfg, corpus_paths);
  for (const auto& p : corpus_paths) manifest.input("corpus", p);

  const auto enc_cfg = encoder_for(cfg, data);
  const auto train_pairs = split_pairs(cfg, data, &CorpusSplit::train, SeedStream::train_pairs, cfg.ict.pairs_per_record);
  const auto dev_pairs = split_pairs(cfg, data, &CorpusSplit::dev, SeedStream::dev_pairs, 1);

  TrainConfig tc = cfg.train;
  tc.seed = stream_seed(cfg, SeedStream::train);
  TrainResult result;
  result.mode = corpus_paths.size() == 2 ? "combined" : "individual";
  for (const auto& c : data.corpora) {
    for (const auto& r : split_for(cfg, c).train.records) ++result.modality_counts[to_string(r.modality)];
  }
  log << result.mode << " training, pooling " << to_string(enc_cfg.pooling) << ", " << train_pairs.size()
      << " train / " << dev_pairs.size() << " dev pairs\n";
  result.fit = fit(train_pairs, dev_pairs, init_encoder(enc_cfg, stream_seed(cfg, SeedStream::init)), data.provider, tc);
  const auto& last = result.fit.history.back();
  log << "best epoch " << result.fit.best_epoch << " of " << last.epoch << "\n";

  ensure_parent_dir(out_checkpoint);
  save_checkpoint(result.fit.best, out_checkpoint);
  const auto history = with_extension(out_checkpoint, ".history.csv");
  write_file_atomic(history, history_csv(result.fit.history));
  manifest.artifact("checkpoint", out_checkpoint);
  manifest.artifact("history", history);
  manifest.details = {{"mode", result.mode},
                      {"modality_counts", result.modality_counts},
                      {"train_pairs", train_pairs.size()},
                      {"dev_pairs", dev_pairs.size()},
                      {"best_epoch", result.fit.best_epoch},
                      {"epochs_run", last.epoch},
                      {"encoder", to_json(enc_cfg)}};
  write_manifest(manifest, with_extension(out_checkpoint, ".manifest.json"));
  return result;
}

struct EvalResult {
  SweepReport model;
  std::optional<SweepReport> bm25;
  std::optional<SweepReport> noise;            // trained model, noise queries
  std::optional<SweepReport> noise_untrained;  // random-init model, noise queries
};

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j = {{"model", to_json(r.model)}};
  if (r.bm25) j["bm25"] = to_json(*r.bm25);
  if (r.noise) j["noise"] = to_json(*r.noise);
  if (r.noise_untrained) j["noise_untrained"] = to_json(*r.noise_untrained);
  return j;
}

/// Sweeps an already loaded encoder over the test split of `data`.
inline EvalResult evaluate_test_split(const RunConfig& cfg, const LoadedData& data, const EncoderParams& enc,
                                      std::string label) {
  const auto& ec = enc.config;
  const auto& meta = data.corpora[0].meta;
  if (ec.T != meta.T || ec.C != meta.C) {
    throw ShapeError("checkpoint expects segments of T x C = " + std::to_string(ec.T) + " x " + std::to_string(ec.C) +
                     ", corpus has " + std::to_string(meta.T) + " x " + std::to_string(meta.C));
  }
  if (ec.d != data.provider.dim()) {
    throw ShapeError("checkpoint dimension " + std::to_string(ec.d) + " does not match the text embedding dimension " +
                     std::to_string(data.provider.dim()));
  }
  const auto pairs = test_pairs(cfg, data);
  const auto pool_seed = stream_seed(cfg, SeedStream::pool);
  const auto threads = eval_threads();
  EvalResult r;
  r.model = masking_sweep(enc, data.provider, pairs, cfg.eval.ratios, pool_seed, threads, std::move(label));
  if (cfg.eval.baseline == "bm25") r.bm25 = bm25_sweep(pairs, cfg.eval.ratios, pool_seed);
  if (cfg.eval.noise) {
    const auto noise_seed = stream_seed(cfg, SeedStream::noise);
    r.noise = sweep("noise", pairs, cfg.eval.ratios, pool_seed, [&](const EvalPool& pool) {
      return noise_control(enc, data.provider, pool, noise_seed, threads);
    });
    const auto untrained = init_encoder(ec, stream_seed(cfg, SeedStream::init));
    r.noise_untrained = sweep("noise_untrained", pairs, cfg.eval.ratios, pool_seed, [&](const EvalPool& pool) {
      return noise_control(untrained, data.provider, pool, noise_seed, threads);
    });
  }
  return r;
}

/// Report files for an eval written to `out` (a .json path): out.json plus
/// one CSV per system (.csv, .bm25.csv, .noise.csv, .noise_untrained.csv).
inline std::vector<std::pair<std::string, std::string>> write_eval_outputs(const EvalResult& r, const std::string& out) {
  ensure_parent_dir(out);
  std::vector<std::pair<std::string, std::string>> files;
  auto put = [&](const std::string& role, const std::string& path, const std::string& text) {
    write_file_atomic(path, text);
    files.emplace_back(role, path);
  };
  put("report", out, to_json(r).dump(2) + "\n");
  put("csv", with_extension(out, ".csv"), sweep_csv(r.model));
  if (r.bm25) put("csv_bm25", with_extension(out, ".bm25.csv"), sweep_csv(*r.bm25));
  if (r.noise) put("csv_noise", with_extension(out, ".noise.csv"), sweep_csv(*r.noise));
  if (r.noise_untrained) {
    put("csv_noise_untrained", with_extension(out, ".noise_untrained.csv"), sweep_csv(*r.noise_untrained));
  }
  return files;
}

inline EvalResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                           const std::vector<std::string>& corpus_paths, const std::string& out, std::ostream& log) {
  validate(cfg);
  Manifest manifest;
  manifest.command = "eval";
  manifest.config = to_json(cfg);
  const auto enc = load_checkpoint(checkpoint);
  manifest.input("checkpoint", checkpoint);
  const auto data = load_data(cfg, corpus_paths);
  for (const auto& p : corpus_paths) manifest.input("corpus", p);
  auto r = evaluate_test_split(cfg, data, enc, "model");
  log << sweep_csv(r.model);
  if (r.bm25) log << "bm25\n" << sweep_csv(*r.bm25);
  if (r.noise) log << "noise\n" << sweep_csv(*r.noise);
  for (const auto& [role, path] : write_eval_outputs(r, out)) manifest.artifact(role, path);
  manifest.details = {{"pooling", to_string(enc.config.pooling)}, {"pairing", "masking levels"}};
  write_manifest(manifest, with_extension(out, ".manifest.json"));
  return r;
}

// ---------------------------------------------------------------------------
// Comparison

/// Reads a sweep report from JSON (an eval report or a bare sweep) or CSV.
inline SweepReport load_sweep(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  const std::string text(bytes.begin(), bytes.end());
  if (std::filesystem::path(path).extension() == ".csv") return parse_sweep_csv(text, path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what(), 0);
  }
  return sweep_from_json(j.contains("model") ? j["model"] : j);
}

inline std::vector<MetricComparison> cmd_compare(const std::string& a, const std::string& b, const std::string& out,
                                                 std::ostream& log) {
  const auto cmp = compare_sweeps(load_sweep(a), load_sweep(b));
  const auto table = comparison_csv(cmp);
  log << table;
  if (!out.empty()) {
    ensure_parent_dir(out);
    write_file_atomic(out, table);
  }
  return cmp;
}

// ---------------------------------------------------------------------------
// Experimental-design reproduction

/// gen-data, then per pooling strategy individual training on each modality and
/// combined training, evaluation of every model on each modality's test split,
/// BM25 and noise controls, and the combined-vs-individual significance tests.
inline Table2Report cmd_reproduce_shape(const RunConfig& base, const std::string& out_dir, std::ostream& log) {
  RunConfig cfg = base;
  validate(cfg);
  if (cfg.generators.size() != 2) throw ConfigError("reproduce-shape needs two generators (auditory and visual)");
  namespace fs = std::filesystem;
  auto path = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };
  Manifest manifest;
  manifest.command = "reproduce-shape";
  manifest.config = to_json(cfg);

  for (const char* sub : {"data", "models", "reports"}) ensure_parent_dir(path(std::string(sub) + "/x"));
  std::vector<std::string> corpora;
  for (const auto& g : cfg.generators) corpora.push_back(path("data/" + g.name + ".nrt"));
  cmd_gen_data(cfg, corpora, log);

  Table2Report table;
  std::vector<LoadedData> single;
  for (const auto& c : corpora) single.push_back(load_data(cfg, {c}));
  const auto& names = cfg.generators;

  for (std::size_t s = 0; s < 2; ++s) {
    auto bm25 = bm25_sweep(test_pairs(cfg, single[s]), cfg.eval.ratios, stream_seed(cfg, SeedStream::pool));
    write_file_atomic(path("reports/bm25-" + names[s].name + ".csv"), sweep_csv(bm25));
    table.rows.push_back({"text", "bm25", names[s].name, std::move(bm25)});
  }

  for (auto pooling : kAllPoolings) {
    RunConfig pc = cfg;
    pc.encoder.pooling = pooling;
    const auto pname = to_string(pooling);
    std::vector<std::string> individual;
    for (std::size_t s = 0; s < 2; ++s) {
      individual.push_back(path("models/" + pname + "-" + names[s].name + ".bin"));
      cmd_train(pc, {corpora[s]}, individual.back(), log);
    }
    const auto combined = path("models/" + pname + "-combined.bin");
    cmd_train(pc, corpora, combined, log);

    const auto comb_enc = load_checkpoint(combined);
    for (std::size_t s = 0; s < 2; ++s) {
      RunConfig ec = pc;
      ec.eval.noise = pooling == kAllPoolings[0];
      const auto ind = evaluate_test_split(pc, single[s], load_checkpoint(individual[s]), "individual");
      const auto comb = evaluate_test_split(ec, single[s], comb_enc, "combined");
      write_eval_outputs(ind, path("reports/" + pname + "-individual-" + names[s].name + ".json"));
      write_eval_outputs(comb, path("reports/" + pname + "-combined-" + names[s].name + ".json"));
      table.rows.push_back({"individual", pname, names[s].name, ind.model});
      table.rows.push_back({"combined", pname, names[s].name, comb.model});
      if (comb.noise) {
        table.rows.push_back({"random", "noise", names[s].name, *comb.noise});
        table.rows.push_back({"untrained", "noise", names[s].name, *comb.noise_untrained});
      }
    }
  }
  // Baselines and controls first, then individual and combined blocks.
  auto order = [](const Table2Row& r) {
    if (r.training == "text") return 0;
    if (r.training == "random" || r.training == "untrained") return 1;
    return r.training == "individual" ? 2 : 3;
  };
  std::stable_sort(table.rows.begin(), table.rows.end(),
                   [&](const Table2Row& a, const Table2Row& b) { return order(a) < order(b); });
  add_significance(table);

  const auto csv = path("table2.csv");
  const auto json = path("table2.json");
  write_file_atomic(csv, table2_csv(table));
  write_file_atomic(json, to_json(table).dump(2) + "\n");
  log << table2_csv(table);
  manifest.artifact("table2_csv", csv);
  manifest.artifact("table2_json", json);
  for (const auto& c : corpora) manifest.artifact("corpus", c);
  write_manifest(manifest, path("manifest.json"));
  return table;
}

}  // namespace nr
