#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "random.hpp"
#include "tensor.hpp"
#include "text.hpp"

namespace nr {

enum class ProviderMode { seeded_hash, precomputed };

/// Frozen token -> vector map standing in for a pretrained text encoder.
///
/// seeded_hash: each normalized token is hashed (FNV-1a 64, xor seed) and the hash
/// seeds a Gaussian draw that is scaled to unit length.
/// precomputed: lookup in a table loaded from JSON-lines; unknown tokens are errors.
class TextProvider {
 public:
  using Table = std::map<std::string, std::vector<double>>;

  static TextProvider seeded_hash(std::size_t dim, std::uint64_t seed) {
    if (dim == 0) throw ConfigError("text provider dimension must be positive");
    TextProvider p;
    p.mode_ = ProviderMode::seeded_hash;
    p.dim_ = dim;
    p.seed_ = seed;
    return p;
  }

  static TextProvider precomputed(Table table) {
    if (table.empty()) throw ConfigError("precomputed embedding table is empty");
    TextProvider p;
    p.mode_ = ProviderMode::precomputed;
    p.dim_ = table.begin()->second.size();
    for (const auto& [token, vec] : table) {
      if (vec.size() != p.dim_) {
        throw ConfigError("embedding for '" + token + "' has dimension " +
                          std::to_string(vec.size()) + ", expected " + std::to_string(p.dim_));
      }
    }
    if (p.dim_ == 0) throw ConfigError("embedding dimension must be positive");
    p.table_ = std::make_shared<const Table>(std::move(table));
    return p;
  }

  /// Reads {"token": ..., "vector": [...]} objects, one per line.
  static TextProvider load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embeddings file " + path);
    Table table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        auto obj = nlohmann::json::parse(line);
        table[normalize_token(obj.at("token").get<std::string>())] =
            obj.at("vector").get<std::vector<double>>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    return precomputed(std::move(table));
  }

  void save_jsonl(const std::string& path, const std::vector<std::string>& tokens) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write embeddings file " + path);
    for (const auto& t : tokens) {
      nlohmann::json obj = {{"token", t}, {"vector", vector(t)}};
      out << obj.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
  }

  ProviderMode mode() const noexcept { return mode_; }
  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }

  std::vector<double> vector(std::string_view token) const {
    const std::string key = normalize_token(token);
    if (mode_ == ProviderMode::precomputed) {
      auto it = table_->find(key);
      if (it == table_->end()) throw InvalidArgument("token '" + key + "' missing from precomputed embeddings");
      return it->second;
    }
    Rng rng(fnv1a64(key) ^ seed_);
    std::vector<double> v(dim_);
    double sq = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& x : v) x *= inv;
    return v;
  }

  /// Token vectors stacked as an L x dim matrix.
  Tensor token_vectors(const std::vector<std::string>& tokens) const {
    Tensor out(Shape{tokens.size(), dim_});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto v = vector(tokens[i]);
      std::copy(v.begin(), v.end(), out.row(i).begin());
    }
    return out;
  }

 private:
  ProviderMode mode_ = ProviderMode::seeded_hash;
  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  std::shared_ptr<const Table> table_;
};

/// Precomputed table where every word belongs to a topic (index mod n_topics)
/// and its vector is a shared topic direction plus word-specific noise of
/// relative size `spread`, normalized. Gives the synthetic corpora graded
/// semantic similarity between distinct words.
inline TextProvider make_topic_provider(const std::vector<std::string>& words,
                                        const std::vector<std::size_t>& topic_of,
                                        std::size_t n_topics, std::size_t dim, double spread,
                                        std::uint64_t seed) {
  if (words.size() != topic_of.size()) throw InvalidArgument("topic list does not match word list");
  if (n_topics == 0 || dim == 0) throw ConfigError("topic provider needs topics and a dimension");
  auto unit_gaussian = [dim](Rng& rng) {
    std::vector<double> v(dim);
    double sq = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      sq += x * x;
    }
    for (auto& x : v) x /= std::sqrt(sq);
    return v;
  };
  std::vector<std::vector<double>> centers;
  for (std::size_t t = 0; t < n_topics; ++t) {
    Rng rng(derive_seed(seed, t));
    centers.push_back(unit_gaussian(rng));
  }
  TextProvider::Table table;
  for (std::size_t i = 0; i < words.size(); ++i) {
    Rng rng(fnv1a64(normalize_token(words[i])) ^ seed);
    auto noise = unit_gaussian(rng);
    std::vector<double> v(dim);
    double sq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      v[j] = centers[topic_of[i] % n_topics][j] + spread * noise[j];
      sq += v[j] * v[j];
    }
    for (auto& x : v) x /= std::sqrt(sq);
    table[normalize_token(words[i])] = std::move(v);
  }
  return TextProvider::precomputed(std::move(table));
}

}  // namespace nr
