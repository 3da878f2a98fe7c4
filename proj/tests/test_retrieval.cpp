#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "support.hpp"

using Catch::Approx;
using namespace nr;

namespace {

double harmonic(std::size_t n) {
  double h = 0.0;
  for (std::size_t k = 1; k <= n; ++k) h += 1.0 / static_cast<double>(k);
  return h;
}

/// Standard error of the mean reciprocal rank of n uniform ranks over 1..m.
double rr_standard_error(std::size_t m, std::size_t n) {
  double s2 = 0.0;
  for (std::size_t k = 1; k <= m; ++k) s2 += 1.0 / static_cast<double>(k * k);
  const double mean = harmonic(m) / static_cast<double>(m);
  return std::sqrt((s2 / static_cast<double>(m) - mean * mean) / static_cast<double>(n));
}

std::size_t sort_oracle_rank(const std::vector<double>& scores, std::size_t positive) {
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return static_cast<std::size_t>(std::find(ids.begin(), ids.end(), positive) - ids.begin()) + 1;
}

struct World {
  GeneratorConfig gen;
  TextProvider provider;
  Corpus corpus;
  std::vector<IctPair> pairs;
};

World world(std::size_t records, std::uint64_t seed) {
  World w{nrtest::small_generator(records, seed), TextProvider::seeded_hash(8, 13), {}, {}};
  w.gen.passage_length_mean = 12;
  w.gen.vocab_size = 200;
  w.corpus = generate_synthetic(w.gen, w.provider);
  w.pairs = build_training_pairs(w.corpus, 1, 0.9, seed);
  return w;
}

EncoderParams untrained(const World& w, Pooling p, std::uint64_t seed = 1) {
  return init_encoder({.T = w.gen.T, .C = w.gen.C, .d = 8, .layers = 1, .heads = 2, .ffn_multiplier = 2, .pooling = p},
                      seed);
}

}  // namespace

TEST_CASE("rank examples") {
  CHECK(rank_scores("q", std::vector<double>{0.3}, 0).rank_of_positive == 1);
  CHECK(rank_scores("q", std::vector<double>{0.9, 0.1}, 0).rank_of_positive == 1);
  const auto tie = rank_scores("q", std::vector<double>{0.5, 0.5, 0.7}, 1);
  CHECK(tie.order == std::vector<std::size_t>{2, 0, 1});
  CHECK(tie.rank_of_positive == 3);
  CHECK_THROWS_AS(rank_scores("q", std::vector<double>{}, 0), InvalidArgument);
  CHECK_THROWS_AS(rank_scores("q", std::vector<double>{1.0}, 1), InvalidArgument);
}

TEST_CASE("rank agrees with a full-sort oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(100);
    std::vector<double> scores(n);
    // Coarse values force ties.
    for (auto& s : scores) s = static_cast<double>(rng.below(trial % 2 ? 5 : 1000)) / 10.0;
    const std::size_t pos = rng.below(n);
    const auto oracle = sort_oracle_rank(scores, pos);
    CHECK(rank_scores("q", scores, pos).rank_of_positive == oracle);
    CHECK(rank_of(scores, pos) == oracle);
  }
}

TEST_CASE("mrr and hit@k") {
  CHECK(mrr(std::vector<std::size_t>{1, 1, 1}) == 1.0);
  CHECK(mrr(std::vector<std::size_t>{1, 2, 4}) == Approx(0.583333).margin(1e-6));
  CHECK(hit_at_k(std::vector<std::size_t>{1, 7, 3}, 5) == Approx(2.0 / 3).margin(1e-15));
  CHECK(hit_at_k(std::vector<std::size_t>{1, 7, 3}, 7) == 1.0);
  CHECK_THROWS_AS(mrr(std::vector<std::size_t>{}), InvalidArgument);
  CHECK_THROWS_AS(mrr(std::vector<std::size_t>{0}), InvalidArgument);

  Rng rng(4);
  std::vector<std::size_t> uniform(1000);
  for (auto& r : uniform) r = 1 + rng.below(100);
  CHECK(mrr(uniform) == Approx(harmonic(100) / 100).margin(0.01));
  CHECK(harmonic(100) / 100 == Approx(0.051874).margin(1e-6));

  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(30), pool = 1 + rng.below(50);
    std::vector<std::size_t> ranks(n);
    for (auto& r : ranks) r = 1 + rng.below(pool);
    double rr = 0.0;
    for (auto r : ranks) rr += 1.0 / static_cast<double>(r);
    CHECK(mrr(ranks) == Approx(rr / n).margin(1e-15));
    double prev = 0.0;
    for (std::size_t k = 1; k <= pool; ++k) {
      const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
      const double h = hit_at_k(ranks, k);
      CHECK(h == static_cast<double>(hits) / n);
      CHECK(h >= prev);
      prev = h;
    }
    CHECK(prev == 1.0);
    const auto m = metrics_from_ranks(ranks, pool, 0.0);
    CHECK(m.hit1 <= m.mrr);
    CHECK(m.mrr <= 1.0);
    CHECK(m.hit1 <= m.hit5);
    CHECK(m.hit5 <= m.hit10);
  }
}

TEST_CASE("BM25 three-document example") {
  // d0 = a b, d1 = a a c, d2 = b c c d; N = 3, avgdl = 3, k1 = 1.5, b = 0.75.
  const auto idx = bm25_build({{"a", "b"}, {"A", "a", "c"}, {"b", "c", "c", "d."}});
  CHECK(idx.avgdl == 3.0);
  CHECK(idx.df.at("c") == 2);
  const double idf = std::log(1.6);  // df 2: ln((3 - 2 + 0.5) / 2.5 + 1)
  CHECK(bm25_idf(idx, "a") == Approx(idf).margin(1e-15));
  CHECK(bm25_idf(idx, "d") == Approx(std::log(2.5 / 1.5 + 1.0)).margin(1e-15));

  const auto s = bm25_scores({"a", "c"}, idx);
  CHECK(std::abs(s[0] - idf * 2.5 / 2.125) < 1e-9);
  CHECK(std::abs(s[1] - idf * (5.0 / 3.5 + 1.0)) < 1e-9);
  CHECK(std::abs(s[2] - idf * 5.0 / 3.875) < 1e-9);
  CHECK(bm25_rank({"a", "c"}, idx, 0).order == std::vector<std::size_t>{1, 2, 0});

  const auto none = bm25_scores({"zebra"}, idx);
  CHECK(none == std::vector<double>{0.0, 0.0, 0.0});

  const auto twin = bm25_build({{"x", "y"}, {"x", "y"}, {"z"}});
  const auto ts = bm25_scores({"x"}, twin);
  CHECK(ts[0] == ts[1]);
  CHECK(bm25_rank({"x"}, twin, 1).order == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(bm25_build({}), InvalidArgument);
}

TEST_CASE("paired t-test against the Student-t distribution") {
  const std::vector<double> a{0.1, 0.2, 0.3}, zero{0, 0, 0};
  const auto r = paired_t_test(a, zero);
  CHECK(r.df == 2);
  CHECK(r.t == Approx(3.4641016).margin(1e-6));
  CHECK(r.p == Approx(0.0742).margin(1e-4));

  const auto same = paired_t_test(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);

  const std::vector<double> shifted{1.1, 1.2, 1.3};
  const auto flat = paired_t_test(shifted, a);
  CHECK(std::isinf(flat.t));
  CHECK(flat.t > 0);
  CHECK(flat.p == 0.0);
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), InvalidArgument);

  Rng rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    std::vector<double> x(n), y(n), d(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = rng.normal() + 0.3 * rng.uniform();
      d[i] = x[i] - y[i];
    }
    double m = 0.0, ss = 0.0;
    for (double v : d) m += v;
    m /= n;
    for (double v : d) ss += (v - m) * (v - m);
    const double t = m / std::sqrt(ss / (n - 1) / n);
    const boost::math::students_t dist(static_cast<double>(n - 1));
    const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));

    const auto got = paired_t_test(x, y);
    CHECK(std::abs(got.t - t) <= 1e-6);
    CHECK(std::abs(got.p - p) <= 1e-4);
    const auto swapped = paired_t_test(y, x);
    CHECK(swapped.t == -got.t);
    CHECK(swapped.p == got.p);
  }
}

TEST_CASE("untrained encoder ranks at chance on a 100-passage pool") {
  const auto w = world(100, 2);
  const auto pool = build_masked_pool(w.pairs, 0.0, 1);
  REQUIRE(pool.size() == 100);
  const double expect = harmonic(100) / 100;
  const double se = rr_standard_error(100, pool.pairs.size());
  for (auto p : {Pooling::mean, Pooling::max}) {
    const auto m = evaluate(untrained(w, p), w.provider, pool);
    CHECK(std::abs(m.mrr - expect) <= 3 * se);
    CHECK(m.n_queries == 100);
    CHECK(m.pool_size == 100);
  }
}

TEST_CASE("text-encoded queries retrieve their own passage") {
  const auto w = world(60, 3);
  const auto pool = build_masked_pool(w.pairs, 0.0, 1);
  for (auto s : kAllPoolings) {
    const auto passages = encode_passages(pool, w.provider, s);
    for (std::size_t i = 0; i < pool.pairs.size(); ++i) {
      const auto& tokens = pool.passages[pool.positive_ids[i]].tokens;
      const auto r = rank(encode_text(tokens, w.provider, s), pool.pairs[i].pair_id, passages, pool.positive_ids[i]);
      if (s != Pooling::multi) CHECK(r.rank_of_positive == 1);
    }
  }
}

TEST_CASE("evaluate is deterministic and thread-count independent") {
  const auto w = world(40, 4);
  const auto pool = build_masked_pool(w.pairs, 0.5, 2);
  for (auto s : kAllPoolings) {
    const auto enc = untrained(w, s, 7);
    const auto one = evaluate(enc, w.provider, pool, 1);
    CHECK(evaluate(enc, w.provider, pool, 1) == one);
    CHECK(evaluate(enc, w.provider, pool, 4) == one);
    CHECK(one.hit1 <= one.hit5);
    CHECK(one.hit5 <= one.hit10);
    CHECK(one.hit1 <= one.mrr);
  }
}

TEST_CASE("noise control stays near chance") {
  const auto w = world(100, 5);
  const auto pool = build_masked_pool(w.pairs, 0.0, 1);
  const auto enc = untrained(w, Pooling::mean, 3);
  const auto a = noise_control(enc, w.provider, pool, 1);
  const auto b = noise_control(enc, w.provider, pool, 2);
  CHECK_FALSE(a == b);
  CHECK(noise_control(enc, w.provider, pool, 1) == a);
  const double expect = harmonic(pool.size()) / static_cast<double>(pool.size());
  const double se = rr_standard_error(pool.size(), pool.pairs.size());
  CHECK(std::abs(a.mrr - expect) <= 3 * se);
  CHECK(std::abs(b.mrr - expect) <= 3 * se);
}

TEST_CASE("masking sweep") {
  const auto w = world(50, 6);
  const std::vector<double> ratios(std::begin(kDefaultMaskRatios), std::end(kDefaultMaskRatios));
  const auto enc = untrained(w, Pooling::mean);
  const auto r = masking_sweep(enc, w.provider, w.pairs, ratios, 8);
  REQUIRE(r.levels.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(r.levels[i].mask_ratio == ratios[i]);

  // Spreadsheet-style recomputation.
  double sum = 0.0, sq = 0.0;
  for (const auto& l : r.levels) sum += l.mrr;
  const double mean = sum / 6;
  for (const auto& l : r.levels) sq += (l.mrr - mean) * (l.mrr - mean);
  CHECK(r.mrr.mean == Approx(mean).margin(1e-15));
  CHECK(r.mrr.std == Approx(std::sqrt(sq / 5)).margin(1e-15));

  const MetricsReport level{0.4, 0.2, 0.6, 0.8, 10, 10, 0.0};
  std::vector<MetricsReport> flat(3, level);
  flat[1].mask_ratio = 0.5;
  flat[2].mask_ratio = 1.0;
  const auto f = make_sweep_report("flat", flat);
  CHECK(f.mrr.std == 0.0);
  CHECK(f.hit10.mean == 0.8);

  CHECK_THROWS_AS(masking_sweep(enc, w.provider, w.pairs, {}, 1), ConfigError);
  CHECK_THROWS_AS(masking_sweep(enc, w.provider, w.pairs, {1.2}, 1), ConfigError);
}

TEST_CASE("BM25 degrades as spans are masked") {
  const auto w = world(200, 7);
  const std::vector<double> ratios(std::begin(kDefaultMaskRatios), std::end(kDefaultMaskRatios));
  const auto r = bm25_sweep(w.pairs, ratios, 3);
  CHECK(r.levels.back().mrr <= r.levels.front().mrr);
  CHECK(r.levels.front().mrr > 0.8);
  for (const auto& l : r.levels) {
    CHECK(l.hit1 <= l.hit5);
    CHECK(l.hit5 <= l.hit10);
    CHECK(l.hit1 <= l.mrr);
  }
}

TEST_CASE("compare_sweeps") {
  auto levels = [](std::vector<double> mrrs) {
    std::vector<MetricsReport> out;
    for (std::size_t i = 0; i < mrrs.size(); ++i) {
      out.push_back({mrrs[i], mrrs[i] / 2, mrrs[i], mrrs[i], 10, 10, kDefaultMaskRatios[i]});
    }
    return make_sweep_report("x", out);
  };
  const auto base = levels({0.5, 0.4, 0.3, 0.2, 0.15, 0.1});
  for (const auto& c : compare_sweeps(base, base)) {
    CHECK(c.test.p == 1.0);
    CHECK_FALSE(c.significant);
  }
  // d = [0.1, 0.2, 0.3, 0.1, 0.2, 0.3]: mean 0.2, sample sd sqrt(0.04 / 5).
  const auto better = levels({0.6, 0.6, 0.6, 0.3, 0.35, 0.4});
  const auto cmp = compare_sweeps(better, base);
  const double t = 0.2 / (std::sqrt(0.04 / 5) / std::sqrt(6.0));
  const boost::math::students_t dist(5.0);
  CHECK(cmp[0].metric == "mrr");
  CHECK(cmp[0].test.df == 5);
  CHECK(cmp[0].test.t == Approx(t).margin(1e-9));
  CHECK(cmp[0].test.p == Approx(2 * boost::math::cdf(boost::math::complement(dist, t))).margin(1e-6));
  CHECK(cmp[0].test.p < 0.05);
  CHECK(cmp[0].significant);

  const auto short_grid = make_sweep_report("s", {base.levels[0], base.levels[1]});
  CHECK_THROWS_AS(compare_sweeps(base, short_grid), ConfigError);
}

TEST_CASE("sweep CSV round-trip") {
  const auto w = world(40, 9);
  const std::vector<double> ratios(std::begin(kDefaultMaskRatios), std::end(kDefaultMaskRatios));
  const auto r = masking_sweep(untrained(w, Pooling::max), w.provider, w.pairs, ratios, 2);
  const auto csv = sweep_csv(r);
  CHECK(csv.rfind("ratio,pool_size,mrr,hit1,hit5,hit10\n", 0) == 0);
  CHECK(csv.find("mean±std,,") != std::string::npos);
  auto back = parse_sweep_csv(csv, r.label);
  auto expect = r;
  for (auto& l : expect.levels) l.n_queries = 0;
  CHECK(back == expect);

  auto tampered = csv;
  tampered.replace(tampered.find("mean±std,,") + 10, 1, "9");
  CHECK_THROWS_AS(parse_sweep_csv(tampered), FormatError);
  CHECK_THROWS_AS(parse_sweep_csv("ratio,mrr\n"), FormatError);
  CHECK(sweep_from_json(to_json(r)) == r);
}
