#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "support.hpp"

using Catch::Approx;
using namespace nr;

namespace {

Tensor uniform_scores(std::size_t b, Rng& rng) {
  Tensor s(Shape{b, b});
  for (auto& v : s.data()) v = rng.uniform(-1.0, 1.0);
  return s;
}

struct Toy {
  GeneratorConfig gen;
  TextProvider provider;
  Corpus corpus;
  std::vector<IctPair> pairs;
};

/// Noise-free corpus whose latent space is the text space (d = latent_dim).
Toy toy(std::size_t records, std::size_t d, std::uint64_t seed, Modality m = Modality::visual) {
  Toy t{nrtest::small_generator(records, seed), TextProvider::seeded_hash(d, 21), {}, {}};
  t.gen.latent_dim = d;
  t.gen.T = d / 4;
  t.gen.C = 4;
  t.gen.vocab_size = 60;
  t.gen.modality = m;
  t.gen.name = to_string(m);
  t.corpus = generate_synthetic(t.gen, t.provider);
  t.pairs = build_training_pairs(t.corpus, 1, 0.9, seed);
  return t;
}

EncoderConfig config_for(const Toy& t, Pooling p = Pooling::mean) {
  return {.T = t.gen.T, .C = t.gen.C, .d = t.provider.dim(), .layers = 1, .heads = 2, .ffn_multiplier = 2, .pooling = p};
}

}  // namespace

TEST_CASE("similarity") {
  const PooledEmbedding e1{{1, 0}}, e2{{0, 1}};
  CHECK(similarity(e1, e1) == 1.0);
  CHECK(similarity(e1, e2) == 0.0);

  const MultiVector q{Tensor::matrix({{1, 0}, {0, 1}}), {true, true}};
  const MultiVector p{Tensor::matrix({{1, 0}, {0, -1}}), {true, true}};
  CHECK(similarity(q, p) == 1.0);

  const MultiVector masked{Tensor::matrix({{1, 0}, {0, 1}}), {true, false}};
  CHECK(similarity(masked, p) == 1.0);
  CHECK_THROWS_AS(similarity(e1, q), InvalidArgument);
}

TEST_CASE("info_nce closed forms") {
  for (std::size_t b : {1u, 2u, 4u, 32u}) {
    const Tensor flat(Shape{b, b}, 0.3);
    CHECK(std::abs(info_nce(flat, 0.07) - std::log(static_cast<double>(b))) <= 1e-9);
  }
  CHECK(info_nce(Tensor::matrix({{0.42}}), 0.07) == 0.0);

  for (std::size_t b : {2u, 4u, 32u}) {
    Tensor s(Shape{b, b}, -1.0);
    for (std::size_t i = 0; i < b; ++i) s(i, i) = 1.0;
    const double expect = std::log1p(static_cast<double>(b - 1) * std::exp(-2.0 / 0.07));
    CHECK(info_nce(s, 0.07) == Approx(expect).margin(1e-15));
    CHECK(info_nce(s, 0.07) <= 1e-9);
  }
  CHECK_THROWS_AS(info_nce(Tensor(Shape{2, 3}), 0.07), ShapeError);
  CHECK_THROWS_AS(info_nce(Tensor(Shape{2, 2}), 0.0), InvalidArgument);
}

TEST_CASE("info_nce properties") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng.below(8);
    const double tau = 0.05 + rng.uniform();
    auto s = uniform_scores(b, rng);
    const double loss = info_nce(s, tau);
    CHECK(loss >= 0.0);
    const std::size_t row = rng.below(b);
    const double c = rng.uniform(-3.0, 3.0);
    for (std::size_t j = 0; j < b; ++j) s(row, j) += c;
    CHECK(std::abs(info_nce(s, tau) - loss) <= 1e-9);
  }

  for (int trial = 0; trial < 20; ++trial) {
    ParamSet p;
    p.add("S", uniform_scores(4, rng));
    // Unit temperature: at 0.07 the third derivative is ~1/tau^3 and the
    // central-difference truncation error alone exceeds 1e-6.
    CHECK(grad_check([](ParamSet& ps) { return info_nce(ps.leaf("S"), 1.0); }, p) < 1e-6);
  }
}

TEST_CASE("lr_at schedule") {
  TrainConfig c;
  CHECK(lr_at(4, c) == Approx(5e-6).margin(1e-20));
  CHECK(lr_at(10, c) == Approx(1e-5).margin(1e-20));
  CHECK(lr_at(105, c) == Approx(1e-5 * 95 / 190).margin(1e-20));
  CHECK(lr_at(199, c) > 0.0);
  CHECK_THROWS_AS(lr_at(200, c), InvalidArgument);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.temperature = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.warmup_epochs = c.max_epochs;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.learning_rate = -1;
  CHECK_THROWS_AS(validate(c), ConfigError);
}

TEST_CASE("zero learning rate is a pure evaluation") {
  const auto t = toy(20, 8, 3);
  auto enc = init_encoder(config_for(t), 1);
  const auto before = enc;
  TrainConfig c;
  c.learning_rate = 0.0;
  c.clip_norm = std::numeric_limits<double>::infinity();
  c.batch_size = 64;
  TrainState state(c);
  const auto data = prepare_pairs(t.pairs, t.provider, enc.config.pooling);
  const double loss = train_epoch(data, enc, c, state);
  CHECK(enc == before);
  CHECK(loss == Approx(evaluation_loss(data, enc, c.batch_size, c.temperature)).margin(1e-12));
  CHECK(state.epoch == 1);
}

TEST_CASE("training is deterministic") {
  const auto t = toy(30, 8, 4);
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 8;
  c.warmup_epochs = 1;
  c.max_epochs = 4;
  c.seed = 9;
  auto run = [&] {
    return fit(t.pairs, std::vector<IctPair>(t.pairs.begin(), t.pairs.begin() + 8), init_encoder(config_for(t), 2),
               t.provider, c);
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
  }
  CHECK(a.best == b.best);
  CHECK(history_csv(a.history) == history_csv(b.history));
}

TEST_CASE("training halves the loss on a separable corpus") {
  const auto t = toy(100, 32, 6);
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 16;
  c.warmup_epochs = 2;
  c.max_epochs = 50;
  c.seed = 1;
  auto enc = init_encoder(config_for(t), 3);
  const auto data = prepare_pairs(t.pairs, t.provider, enc.config.pooling);
  const double initial = evaluation_loss(data, enc, c.batch_size, c.temperature);
  TrainState state(c);
  for (std::size_t e = 0; e < c.max_epochs; ++e) train_epoch(data, enc, c, state);
  const double final_loss = evaluation_loss(data, enc, c.batch_size, c.temperature);
  INFO("initial " << initial << ", final " << final_loss);
  CHECK(final_loss <= 0.5 * initial);
}

TEST_CASE("early stopping") {
  const auto t = toy(12, 8, 7);
  const std::vector<IctPair> val(t.pairs.begin(), t.pairs.begin() + 4);

  SECTION("worsening validation loss stops at epoch 11 with epoch-1 parameters") {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.batch_size = 4;
    c.patience = 10;
    c.warmup_epochs = 1;
    c.max_epochs = 50;
    EncoderParams after_first;
    FitHooks hooks;
    hooks.validation_loss = [&](const EncoderParams& enc, std::size_t epoch) {
      if (epoch == 1) after_first = enc;
      return static_cast<double>(epoch);
    };
    const auto r = fit(t.pairs, val, init_encoder(config_for(t), 1), t.provider, c, hooks);
    CHECK(r.history.size() == 11);
    CHECK(r.history.back().stopped);
    CHECK(r.best_epoch == 1);
    CHECK(r.best == after_first);
  }
  SECTION("max_epochs bounds the run") {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.batch_size = 4;
    c.warmup_epochs = 1;
    c.max_epochs = 3;
    FitHooks hooks;
    hooks.validation_loss = [](const EncoderParams&, std::size_t) { return 1.0; };
    const auto r = fit(t.pairs, val, init_encoder(config_for(t), 1), t.provider, c, hooks);
    CHECK(r.history.size() == 3);
    CHECK(r.best_epoch == 1);  // ties keep the earliest epoch
    CHECK_FALSE(r.history.back().stopped);
  }
  SECTION("counter resets on strict improvement") {
    EarlyStopping s(2);
    CHECK(s.update(3.0));
    CHECK_FALSE(s.update(3.0));
    CHECK(s.epochs_since_improvement() == 1);
    CHECK(s.update(2.0));
    CHECK(s.epochs_since_improvement() == 0);
    CHECK_FALSE(s.update(5.0));
    CHECK_FALSE(s.update(5.0));
    CHECK(s.should_stop());
  }
}

TEST_CASE("history CSV") {
  const std::vector<HistoryRow> rows{{1, 0.5, 0.25, 1e-3, false}, {2, 0.125, 0.3, 2e-3, true}};
  CHECK(history_csv(rows) == "epoch,train_loss,val_loss,lr,stopped\n1,0.5,0.25,0.001,0\n2,0.125,0.3,0.002,1\n");
}

TEST_CASE("combined training updates one shared encoder") {
  const auto a = toy(10, 8, 8, Modality::auditory);
  auto b = toy(10, 8, 9, Modality::visual);
  const auto merged = merge_corpora(a.corpus, b.corpus);
  const auto pairs = build_training_pairs(merged, 1, 0.9, 1);
  std::size_t auditory = 0;
  for (const auto& p : pairs) auditory += p.modality == Modality::auditory;
  CHECK(auditory == 10);

  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 20;
  c.warmup_epochs = 1;
  c.max_epochs = 2;
  auto enc = init_encoder(config_for(a), 1);
  const auto before = enc;
  TrainState state(c);
  train_epoch(pairs, enc, a.provider, c, state);
  CHECK_FALSE(enc.params.value("embed.weight") == before.params.value("embed.weight"));
}

TEST_CASE("multi-vector training runs and scores with MaxSim") {
  const auto t = toy(12, 8, 10);
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 6;
  c.warmup_epochs = 1;
  c.max_epochs = 2;
  auto enc = init_encoder(config_for(t, Pooling::multi), 1);
  TrainState state(c);
  const double loss = train_epoch(t.pairs, enc, t.provider, c, state);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
}
