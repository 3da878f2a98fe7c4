#include <catch_amalgamated.hpp>

#include <cmath>

#include "support.hpp"

using Catch::Approx;
using namespace nr;

namespace {

std::vector<double> pooled(const Var& v) { return {v.value().data().begin(), v.value().data().end()}; }

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

SignalSequence random_sequence(std::size_t L, std::size_t T, std::size_t C, Rng& rng) {
  SignalSequence s;
  for (std::size_t i = 0; i < L; ++i) {
    SignalSegment seg{T, C, std::vector<float>(T * C)};
    for (auto& v : seg.samples) v = static_cast<float>(rng.normal());
    s.segments.push_back(std::move(seg));
    s.words.push_back("w" + std::to_string(i));
  }
  return s;
}

EncoderConfig small_config(Pooling p) {
  return {.T = 2, .C = 2, .d = 8, .layers = 1, .heads = 2, .ffn_multiplier = 2, .pooling = p};
}

}  // namespace

TEST_CASE("flatten_segment") {
  const SignalSegment s{2, 3, {1, 2, 3, 4, 5, 6}};
  CHECK(flatten_segment(s) == std::vector<double>{1, 2, 3, 4, 5, 6});
  const SignalSegment row{1, 4, {9, 8, 7, 6}};
  CHECK(flatten_segment(row) == std::vector<double>{9, 8, 7, 6});

  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto seq = random_sequence(1, 3, 5, rng);
    CHECK(unflatten_segment(flatten_segment(seq.segments[0]), 3, 5) == seq.segments[0]);
  }
  CHECK_THROWS_AS(unflatten_segment({1, 2, 3}, 2, 2), ShapeError);
}

TEST_CASE("pooling hand examples") {
  const auto h = constant(Tensor::matrix({{1, 5}, {3, 2}}));
  const Mask both{true, true};
  const auto mx = pooled(pool(h, Pooling::max, both));
  const auto mn = pooled(pool(h, Pooling::mean, both));
  const auto emx = l2_normalize(std::vector<double>{3, 5});
  const auto emn = l2_normalize(std::vector<double>{2, 3.5});
  for (int j = 0; j < 2; ++j) {
    CHECK(mx[j] == Approx(emx[j]).margin(1e-15));
    CHECK(mn[j] == Approx(emn[j]).margin(1e-15));
  }

  const Mask first{true, false};
  const auto row = l2_normalize(std::vector<double>{1, 5});
  CHECK(pooled(pool(h, Pooling::max, first)) == pooled(pool(h, Pooling::mean, first)));
  for (int j = 0; j < 2; ++j) CHECK(pooled(pool(h, Pooling::max, first))[j] == Approx(row[j]).margin(1e-15));

  CHECK(pooled(pool(h, Pooling::cls, both)) == row);
  const auto multi = pool(h, Pooling::multi, first).value();
  CHECK(multi.shape() == Shape{1, 2});
}

TEST_CASE("l2_normalize") {
  CHECK(l2_normalize(std::vector<double>{3, 4}) == std::vector<double>{0.6, 0.8});
  const std::vector<double> unit{0.6, 0.8};
  CHECK(l2_normalize(unit) == unit);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(5), cv(5);
    const double c = 0.1 + 10 * rng.uniform();
    for (int i = 0; i < 5; ++i) cv[i] = c * (v[i] = rng.normal());
    const auto a = l2_normalize(v), b = l2_normalize(cv);
    for (int i = 0; i < 5; ++i) CHECK(a[i] == Approx(b[i]).margin(1e-12));
  }
  CHECK_THROWS_AS(l2_normalize(std::vector<double>{0, 0}), NumericError);
}

TEST_CASE("text provider") {
  const auto p = TextProvider::seeded_hash(16, 5);
  const auto q = TextProvider::seeded_hash(16, 5);
  CHECK(p.vector("cat") == p.vector("cat"));
  CHECK(p.vector("Cat!") == p.vector("cat"));
  CHECK(p.vector("cat") == q.vector("cat"));
  CHECK(p.vector("cat") != TextProvider::seeded_hash(16, 6).vector("cat"));
  CHECK(norm(p.vector("dog")) == Approx(1.0).margin(1e-12));

  const auto m = text_token_vectors({"a", "b", "a"}, p);
  CHECK(m.shape() == Shape{3, 16});
  CHECK(std::vector<double>(m.row(0).begin(), m.row(0).end()) == std::vector<double>(m.row(2).begin(), m.row(2).end()));

  const auto big = TextProvider::seeded_hash(768, 1);
  double total = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = big.vector("x" + std::to_string(i));
    const auto b = big.vector("y" + std::to_string(i));
    total += std::abs(detail::dot(a, b));
  }
  CHECK(total / 1000 < 0.1);
}

TEST_CASE("precomputed provider") {
  nrtest::TempDir dir("emb");
  const auto p = TextProvider::seeded_hash(4, 1);
  p.save_jsonl(dir.file("e.jsonl"), {"a", "b"});
  const auto q = TextProvider::load_jsonl(dir.file("e.jsonl"));
  CHECK(q.dim() == 4);
  CHECK(q.vector("a") == p.vector("a"));
  CHECK_THROWS(q.vector("zzz"));
  CHECK_THROWS_AS(TextProvider::precomputed({{"a", {1, 0}}, {"b", {1, 0, 0}}}), ConfigError);
}

TEST_CASE("encode_text") {
  const auto p = TextProvider::seeded_hash(8, 2);
  const auto a = l2_normalize(p.vector("a"));
  for (auto s : {Pooling::cls, Pooling::mean, Pooling::max}) {
    const auto r = std::get<PooledEmbedding>(encode_text({"a"}, p, s)).vector;
    for (std::size_t j = 0; j < 8; ++j) CHECK(r[j] == Approx(a[j]).margin(1e-15));
  }
  const auto aa = std::get<PooledEmbedding>(encode_text({"a", "a"}, p, Pooling::mean)).vector;
  for (std::size_t j = 0; j < 8; ++j) CHECK(aa[j] == Approx(a[j]).margin(1e-15));

  const auto mv = std::get<MultiVector>(encode_text({"a", "b", "c"}, p, Pooling::multi));
  REQUIRE(mv.rows.shape() == Shape{3, 8});
  for (std::size_t r = 0; r < 3; ++r) CHECK(norm(mv.rows.row(r)) == Approx(1.0).margin(1e-12));
  CHECK_THROWS_AS(encode_text({}, p, Pooling::mean), InvalidArgument);
}

TEST_CASE("encode_signal shapes and degenerate weights") {
  Rng rng(7);
  const auto seq = random_sequence(3, 2, 2, rng);
  for (auto s : kAllPoolings) {
    const auto cfg = small_config(s);
    const auto enc = init_encoder(cfg, 1);
    Mask valid;
    const auto h = encode_signal(seq, bind_frozen(enc), cfg, &valid);
    CHECK(h.rows() == (s == Pooling::cls ? 4u : 3u));
    CHECK(h.cols() == 8);
    CHECK(valid.size() == h.rows());
  }

  // Zero embedding and attention weights: every row sees the same input.
  auto enc = init_encoder(small_config(Pooling::mean), 1);
  for (auto& e : enc.params.entries()) {
    if (e.name.find("attn.") != std::string::npos || e.name == "embed.weight") e.value.fill(0.0);
  }
  enc.params.value("embed.bias") = nrtest::random_tensor({8}, rng);
  const auto h = encode_signal(seq, bind_frozen(enc), enc.config).value();
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(h(r, c) == Approx(h(0, c)).margin(1e-12));

  const auto other = random_sequence(1, 3, 2, rng);
  CHECK_THROWS_AS(encode_signal(other, bind_frozen(enc), enc.config), ShapeError);
  CHECK_THROWS_AS(encode_signal(SignalSequence{}, bind_frozen(enc), enc.config), InvalidArgument);
}

TEST_CASE("word order changes contextual states") {
  Rng rng(8);
  const auto seq = random_sequence(3, 2, 2, rng);
  auto rev = seq;
  std::reverse(rev.segments.begin(), rev.segments.end());
  std::reverse(rev.words.begin(), rev.words.end());
  const auto enc = init_encoder(small_config(Pooling::mean), 3);
  const auto a = encode_signal(seq, bind_frozen(enc), enc.config).value();
  const auto b = encode_signal(rev, bind_frozen(enc), enc.config).value();
  CHECK_FALSE(a == b);
  // Without positions, the state of a word does not depend on where it sits.
  for (std::size_t c = 0; c < 8; ++c) CHECK(a(0, c) == Approx(b(2, c)).margin(1e-12));
}

TEST_CASE("embeddings are unit norm") {
  Rng rng(9);
  for (auto s : kAllPoolings) {
    const auto enc = init_encoder(small_config(s), 4);
    for (int trial = 0; trial < 10; ++trial) {
      const auto rep = embed_signal(random_sequence(1 + rng.below(5), 2, 2, rng), enc);
      if (s == Pooling::multi) {
        const auto& mv = std::get<MultiVector>(rep);
        for (std::size_t r = 0; r < mv.rows.rows(); ++r) CHECK(norm(mv.rows.row(r)) == Approx(1.0).margin(1e-6));
      } else {
        CHECK(norm(std::get<PooledEmbedding>(rep).vector) == Approx(1.0).margin(1e-6));
      }
    }
  }
}

TEST_CASE("mean and max pooling ignore row order; max dominates mean") {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t L = 2 + rng.below(5);
    const auto h = nrtest::random_tensor({L, 6}, rng);
    Mask valid(L);
    for (std::size_t i = 0; i < L; ++i) valid[i] = rng.bernoulli(0.7);
    valid[rng.below(L)] = true;
    std::vector<std::size_t> perm(L);
    for (std::size_t i = 0; i < L; ++i) perm[i] = i;
    rng.shuffle(std::span<std::size_t>(perm));
    Tensor ph(Shape{L, 6});
    Mask pv(L);
    for (std::size_t i = 0; i < L; ++i) {
      std::copy(h.row(perm[i]).begin(), h.row(perm[i]).end(), ph.row(i).begin());
      pv[i] = valid[perm[i]];
    }
    for (auto s : {Pooling::mean, Pooling::max}) {
      const auto a = pooled(pool(constant(h), s, valid));
      const auto b = pooled(pool(constant(ph), s, pv));
      for (std::size_t j = 0; j < 6; ++j) CHECK(a[j] == Approx(b[j]).margin(1e-15));
    }
    const auto mx = masked_max_rows(constant(h), valid).value();
    const auto mn = masked_mean_rows(constant(h), valid).value();
    for (std::size_t j = 0; j < 6; ++j) CHECK(mx[j] >= mn[j]);
  }
}

TEST_CASE("cls pooling reads the prepended row") {
  Rng rng(11);
  const auto seq = random_sequence(3, 2, 2, rng);
  auto enc = init_encoder(small_config(Pooling::cls), 5);
  Mask valid;
  const auto h = encode_signal(seq, bind_frozen(enc), enc.config, &valid);
  CHECK(h.rows() == 4);
  const auto row0 = select_row(h, 0).value();
  const auto expect = l2_normalize(std::vector<double>(row0.data().begin(), row0.data().end()));
  CHECK(std::get<PooledEmbedding>(embed_signal(seq, enc)).vector == expect);

  // The cls vector changes the result; word rows alone do not determine it.
  enc.params.value("cls") = nrtest::random_tensor({8}, rng);
  CHECK_FALSE(std::get<PooledEmbedding>(embed_signal(seq, enc)).vector == expect);
}

TEST_CASE("encoder gradients match finite differences for every pooling") {
  Rng rng(12);
  const auto provider = TextProvider::seeded_hash(8, 3);
  for (auto s : kAllPoolings) {
    const auto cfg = small_config(s);
    auto enc = init_encoder(cfg, 6);
    const auto seq = random_sequence(3, 2, 2, rng);
    const auto target = encode_text({"alpha", "beta"}, provider, s);
    const double err = grad_check(
        [&](ParamSet& ps) {
          const auto w = detail::bind_with(cfg, [&](const std::string& n) { return ps.leaf(n); });
          Mask valid;
          auto q = pool(encode_signal(seq, w, cfg, &valid), s, valid);
          return score_matrix({q}, {&target}, s);
        },
        enc.params);
    CHECK(err < 1e-4);
  }

  // Single word, no cls row.
  const auto cfg = small_config(Pooling::mean);
  auto enc = init_encoder(cfg, 7);
  const auto seq = random_sequence(1, 2, 2, rng);
  const auto weights = nrtest::random_tensor({1, 8}, rng);
  const double err = grad_check(
      [&](ParamSet& ps) {
        const auto w = detail::bind_with(cfg, [&](const std::string& n) { return ps.leaf(n); });
        const auto h = encode_signal(seq, w, cfg);
        return sum(mul(h, constant(weights)));
      },
      enc.params);
  CHECK(err < 1e-4);
}

TEST_CASE("checkpoint round-trip") {
  nrtest::TempDir dir("ckpt");
  for (auto s : kAllPoolings) {
    auto cfg = small_config(s);
    cfg.layers = 2;
    const auto enc = init_encoder(cfg, 9);
    const auto path = dir.file("m.ckpt");
    save_checkpoint(enc, path);
    CHECK(load_checkpoint(path) == enc);
  }
  auto bytes = encode_checkpoint(init_encoder(small_config(Pooling::max), 1));
  bytes[1] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  bytes = encode_checkpoint(init_encoder(small_config(Pooling::max), 1));
  bytes.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
}

TEST_CASE("encoder config validation") {
  auto cfg = small_config(Pooling::mean);
  cfg.heads = 3;
  CHECK_THROWS_AS(init_encoder(cfg, 1), ConfigError);
  CHECK_THROWS_AS(parse_pooling("sum"), ConfigError);
  for (auto s : kAllPoolings) CHECK(parse_pooling(to_string(s)) == s);
}
