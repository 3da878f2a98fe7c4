#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "neuroretrieve/neuroretrieve.hpp"

namespace nrtest {

inline nr::Tensor random_tensor(nr::Shape shape, nr::Rng& rng, double scale = 1.0) {
  nr::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

/// Record whose word i has a segment filled with (i + 1) * 0.1 + channel offsets.
inline nr::PairedRecord make_record(const std::string& id, const std::vector<std::string>& words, std::size_t T = 2,
                                    std::size_t C = 2, nr::Modality m = nr::Modality::visual) {
  nr::PairedRecord r;
  r.record_id = id;
  r.modality = m;
  r.subject_id = "S01";
  for (std::size_t i = 0; i < words.size(); ++i) {
    nr::SignalSegment s{T, C, std::vector<float>(T * C)};
    for (std::size_t k = 0; k < T * C; ++k) s.samples[k] = static_cast<float>(0.1 * (i + 1) + 0.01 * k);
    r.sequence.segments.push_back(std::move(s));
    r.sequence.words.push_back(words[i]);
  }
  return r;
}

inline nr::GeneratorConfig small_generator(std::size_t n_records = 40, std::uint64_t seed = 1) {
  nr::GeneratorConfig g;
  g.name = "toy";
  g.n_records = n_records;
  g.query_count_target = n_records;
  g.passage_length_mean = 8;
  g.passage_length_sd = 2;
  g.T = 2;
  g.C = 4;
  g.latent_dim = 8;
  g.vocab_size = 40;
  g.seed = seed;
  return g;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("nrtest-" + tag + "-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace nrtest
