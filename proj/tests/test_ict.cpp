#include <catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "support.hpp"

using Catch::Approx;
using namespace nr;

namespace {

std::vector<std::string> numbered_words(std::size_t n, const std::string& prefix = "w") {
  std::vector<std::string> w;
  for (std::size_t i = 0; i < n; ++i) w.push_back(prefix + std::to_string(i));
  return w;
}

/// True when `needle` occurs as a contiguous run inside `hay`.
bool contains_run(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

Corpus passages(std::size_t n, std::size_t L) {
  std::vector<PairedRecord> recs;
  for (std::size_t i = 0; i < n; ++i) {
    recs.push_back(nrtest::make_record("r" + std::to_string(i), numbered_words(L, "p" + std::to_string(i) + "w")));
  }
  return make_corpus("p", 2, 2, std::move(recs));
}

std::set<std::string> masked_ids(const EvalPool& pool) {
  std::set<std::string> ids;
  for (const auto& p : pool.pairs)
    if (p.span_removed) ids.insert(p.pair_id);
  return ids;
}

}  // namespace

TEST_CASE("span length") {
  CHECK(ict_span_length(20) == 6);
  CHECK(ict_span_length(1) == 1);
  CHECK(ict_span_length(2) == 1);
  CHECK(ict_span_length(5) == 2);  // 1.5 rounds half up
  CHECK(ict_span_length(10) == 3);
  CHECK_THROWS_AS(ict_span_length(0), InvalidArgument);

  Rng rng(1);
  const auto s = extract_span(1, rng);
  CHECK(s.start == 0);
  CHECK(s.length == 1);
}

TEST_CASE("span start is uniform") {
  // L = 10 gives span 3 and starts 0..7.
  Rng rng(4);
  const int draws = 80000;
  std::vector<int> counts(8, 0);
  for (int i = 0; i < draws; ++i) {
    const auto s = extract_span(10, rng);
    REQUIRE(s.start < 8);
    counts[s.start]++;
  }
  const double expect = draws / 8.0;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // 7 degrees of freedom; the 0.999 quantile is 24.32.
  CHECK(chi2 < 24.32);
}

TEST_CASE("make_pair masking") {
  const auto rec = nrtest::make_record("r", numbered_words(20));
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto p = make_pair(rec, 1.0, rng, "x");
    CHECK(p.span_removed);
    CHECK(p.positive_tokens.size() == 14);
    CHECK_FALSE(contains_run(p.positive_tokens, p.query_words));
    const auto q = make_pair(rec, 0.0, rng, "y");
    CHECK_FALSE(q.span_removed);
    CHECK(q.positive_tokens == rec.sequence.words);
  }

  std::size_t removed = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) removed += make_pair(rec, 0.9, rng, "z").span_removed;
  CHECK(static_cast<double>(removed) / n == Approx(0.9).margin(0.01));

  CHECK_THROWS_AS(make_pair(rec, 1.5, rng, "bad"), ConfigError);
}

TEST_CASE("pair invariants hold on generated corpora") {
  auto g = nrtest::small_generator(80, 2);
  const auto c = generate_synthetic(g, TextProvider::seeded_hash(g.latent_dim, 7));
  const auto pairs = build_training_pairs(c, 3, 0.5, 11);
  REQUIRE(pairs.size() == 240);
  for (const auto& p : pairs) {
    const auto& src = std::find_if(c.records.begin(), c.records.end(),
                                   [&](const PairedRecord& r) { return r.record_id == p.source_record_id; })
                          ->sequence;
    CHECK(p.span_len == ict_span_length(src.length()));
    CHECK(p.query_signal.length() == p.span_len);
    CHECK(p.query_signal.segments.size() == p.span_len);
    CHECK(p.query_signal == src.slice(p.span_start, p.span_len));
    CHECK(p.query_words == p.query_signal.words);
    CHECK(p.source_words() == src.words);

    // Reassembly as a multiset.
    auto joined = p.positive_tokens;
    if (p.span_removed) joined.insert(joined.end(), p.query_words.begin(), p.query_words.end());
    auto original = src.words;
    std::sort(joined.begin(), joined.end());
    std::sort(original.begin(), original.end());
    CHECK(joined == original);
  }
}

TEST_CASE("build_training_pairs") {
  const auto c = passages(7, 12);
  CHECK(build_training_pairs(c, 2, 0.9, 1).size() == 14);
  CHECK(build_training_pairs(c, 2, 0.9, 1) == build_training_pairs(c, 2, 0.9, 1));
  CHECK_FALSE(build_training_pairs(c, 2, 0.9, 1) == build_training_pairs(c, 2, 0.9, 2));
  CHECK_THROWS_AS(build_training_pairs(c, 0, 0.9, 1), ConfigError);
}

TEST_CASE("visual preset query length") {
  GeneratorConfig g;
  g.n_records = 1200;
  g.passage_length_mean = 17.5;
  g.passage_length_sd = 4.0;
  g.T = 2;
  g.C = 4;
  g.latent_dim = 8;
  g.vocab_size = 674;
  g.seed = 3;
  const auto c = generate_synthetic(g, TextProvider::seeded_hash(8, 1));
  const auto pairs = build_training_pairs(c, 1, 0.9, 5);
  double total = 0.0;
  for (const auto& p : pairs) total += static_cast<double>(p.query_words.size());
  CHECK(total / pairs.size() == Approx(17.5 * 0.3).epsilon(0.10));
}

TEST_CASE("build_masked_pool") {
  const auto c = passages(300, 10);
  const auto pairs = build_training_pairs(c, 1, 0.9, 3);

  SECTION("ratio 0 keeps every span") {
    const auto pool = build_masked_pool(pairs, 0.0, 1);
    for (std::size_t i = 0; i < pool.pairs.size(); ++i) {
      const auto& p = pool.pairs[i];
      CHECK_FALSE(p.span_removed);
      CHECK(contains_run(pool.passages[pool.positive_ids[i]].tokens, p.query_words));
    }
  }
  SECTION("ratio 1 removes every span") {
    const auto pool = build_masked_pool(pairs, 1.0, 1);
    for (std::size_t i = 0; i < pool.pairs.size(); ++i) {
      CHECK_FALSE(contains_run(pool.passages[pool.positive_ids[i]].tokens, pool.pairs[i].query_words));
    }
  }
  SECTION("ratio 0.5 on 300 pairs masks exactly 150") {
    CHECK(masked_ids(build_masked_pool(pairs, 0.5, 1)).size() == 150);
    CHECK(masked_count(0.9, 300) == 270);
    CHECK(masked_count(0.25, 6) == 2);  // 1.5 rounds half up
  }
  SECTION("masked sets nest as the ratio grows") {
    for (std::uint64_t seed : {1, 2, 3}) {
      std::set<std::string> prev;
      for (double r : kDefaultMaskRatios) {
        const auto cur = masked_ids(build_masked_pool(pairs, r, seed));
        CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
        prev = cur;
      }
    }
  }
  SECTION("every positive id exists and passages are unique") {
    const auto pool = build_masked_pool(pairs, 0.5, 4);
    std::set<std::vector<std::string>> seen;
    for (std::size_t k = 0; k < pool.passages.size(); ++k) {
      CHECK(pool.passages[k].id == k);
      CHECK(seen.insert(pool.passages[k].tokens).second);
    }
    for (auto id : pool.positive_ids) CHECK(id < pool.size());
  }
  SECTION("bad input") {
    CHECK_THROWS_AS(build_masked_pool({}, 0.5, 1), InvalidArgument);
    CHECK_THROWS_AS(build_masked_pool(pairs, 1.5, 1), ConfigError);
  }
}

TEST_CASE("identical passages share one pool entry") {
  const auto a = nrtest::make_record("a", {"x", "y", "z", "q"});
  auto b = a;
  b.record_id = "b";
  const auto corpus = make_corpus("dup", 2, 2, {a, b});
  auto pairs = build_training_pairs(corpus, 1, 0.0, 1);
  const auto pool = build_masked_pool(pairs, 0.0, 1);
  CHECK(pool.size() == 1);
  CHECK(pool.positive_ids == std::vector<std::size_t>{0, 0});
}

TEST_CASE("pairs JSON-lines round-trip") {
  auto g = nrtest::small_generator(10, 2);
  const auto c = generate_synthetic(g, TextProvider::seeded_hash(g.latent_dim, 7));
  const auto pairs = build_training_pairs(c, 2, 0.9, 8);
  const auto text = pairs_to_jsonl(pairs);
  CHECK(pairs_from_jsonl(text, c) == pairs);
  CHECK_THROWS_AS(pairs_from_jsonl("{not json}\n", c), ConfigError);
}
