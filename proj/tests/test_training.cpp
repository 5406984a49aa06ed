#include <doctest.h>

#include <cmath>
#include <fstream>

#include "circuitlab/errors.hpp"
#include "support.hpp"

using namespace circuitlab;

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  const long warm = 400, total = 20000;
  CHECK(lr_schedule(0, total, warm, c) == 0.0);
  CHECK(lr_schedule(200, total, warm, c) == doctest::Approx(5e-4));
  CHECK(lr_schedule(warm, total, warm, c) == doctest::Approx(1e-3));
  CHECK(lr_schedule(total, total, warm, c) == doctest::Approx(5e-5));
  CHECK(lr_schedule(warm + (total - warm) / 2, total, warm, c) == doctest::Approx((1e-3 + 5e-5) / 2));

  double peak = 0.0, prev = lr_schedule(0, total, warm, c);
  for (long s = 1; s <= total; ++s) {
    const double r = lr_schedule(s, total, warm, c);
    peak = std::max(peak, r);
    CHECK(std::abs(r - prev) <= 1e-3 / warm + 1e-12);
    prev = r;
  }
  CHECK(peak == doctest::Approx(c.lr_init));
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.lr_final = 2e-3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"epochs", "many"}}), ConfigError);
  auto j = to_json(TrainConfig{});
  CHECK(train_config_from_json(j).batch_size == 25);
}

TEST_CASE("cross-entropy on hand-computed logits") {
  Matrix logits(2, 3);
  logits << 0.0f, 0.0f, 0.0f, 1.0f, 2.0f, 3.0f;
  auto r = cross_entropy_loss<float>(logits, {1, 2}, {1, 1});
  const double l0 = std::log(3.0);
  const double l1 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  CHECK(r.loss == doctest::Approx((l0 + l1) / 2).epsilon(1e-6));
  CHECK(r.n_tokens == 2);
  CHECK(r.dlogits(0, 1) == doctest::Approx((1.0 / 3 - 1) / 2).epsilon(1e-6));
  CHECK(r.dlogits.row(1).sum() == doctest::Approx(0.0).epsilon(1e-6));

  auto masked = cross_entropy_loss<float>(logits, {1, 2}, {1, 0});
  CHECK(masked.loss == doctest::Approx(l0).epsilon(1e-6));
  CHECK(masked.dlogits.row(1).isZero());
  CHECK_THROWS_AS(cross_entropy_loss<float>(logits, {1, 2}, {0, 0}), DegenerateBatchError);
  CHECK_THROWS_AS(cross_entropy_loss<float>(logits, {1, 7}, {1, 1}), BoundsError);
}

TEST_CASE("first Adam step moves each weight by lr against the gradient sign") {
  ModelConfig cfg = testkit::tiny_config(20);
  ModelParams p = zero_params<float>(cfg);
  ModelParams g = zero_params<float>(cfg);
  g.embed(0, 0) = 0.5f;
  g.embed(1, 1) = -2.0f;
  Adam<float> adam(p, 0.9, 0.999, 1e-8);
  adam.step(p, g, 1e-3);
  CHECK(p.embed(0, 0) == doctest::Approx(-1e-3).epsilon(1e-4));
  CHECK(p.embed(1, 1) == doctest::Approx(1e-3).epsilon(1e-4));
  CHECK(p.embed(2, 2) == 0.0f);
  CHECK(adam.steps() == 1);
}

TEST_CASE("one epoch on 100 episodes lowers the loss") {
  Dataset data = testkit::small_dataset(13, 100, 20);
  TrainConfig cfg;
  cfg.model = testkit::tiny_config(static_cast<int>(data.vocab.size()));
  cfg.model.d_model = 32;
  cfg.model.d_head = 8;
  cfg.model.dropout = 0.1;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0.0;
  cfg.seed = 4;

  auto loss_of = [&](const ModelParams& p) {
    std::vector<const Episode*> ptrs;
    for (const auto& e : data.train) ptrs.push_back(&e);
    auto b = pack_episodes(ptrs, data.vocab);
    auto fwd = forward<float>(p, cfg.model, b.pairs, ForwardOptions{});
    return cross_entropy_loss<float>(fwd.logits, b.targets, b.mask).loss;
  };
  Rng rng(cfg.seed);
  cfg.model.vocab_size = static_cast<int>(data.vocab.size());
  const double before = loss_of(init_model(cfg.model, rng));
  auto r = train(data, cfg);
  REQUIRE(r.history.size() == 1);
  CHECK(r.history[0].steps == 4);
  CHECK(loss_of(r.params) < before);
}

TEST_CASE("training refuses a split with leaked signatures") {
  Dataset data = testkit::small_dataset(14, 30, 5);
  data.test.push_back(data.train[3]);
  TrainConfig cfg;
  cfg.model = testkit::tiny_config(static_cast<int>(data.vocab.size()));
  cfg.epochs = 1;
  CHECK_THROWS_AS(train(data, cfg), ConfigError);
}

TEST_CASE("train_to_dir writes metrics and loadable checkpoints") {
  Dataset data = testkit::small_dataset(15, 50, 10);
  TrainConfig cfg;
  cfg.model = testkit::tiny_config(static_cast<int>(data.vocab.size()));
  cfg.epochs = 2;
  auto dir = testkit::scratch_dir("train");
  train_to_dir(data, cfg, dir);
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["epoch"] == ++n);
    for (const char* k : {"train_loss", "lr", "test_exact_match", "steps", "seconds"}) CHECK(j.contains(k));
  }
  CHECK(n == 2);
  auto ck = load_checkpoint(dir / "model.ckpt", &data.vocab);
  CHECK(ck.config.vocab_size == static_cast<int>(data.vocab.size()));
  CHECK(std::filesystem::exists(dir / "latest.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("exact match counts whole sequences") {
  Dataset data = testkit::small_dataset(16, 20, 10);
  ModelConfig cfg = testkit::tiny_config(static_cast<int>(data.vocab.size()));
  ModelParams p = testkit::random_model(cfg, 1);
  int ok = 0;
  for (const auto& e : data.test) {
    auto out = greedy_decode(p, cfg, render_prompt(e, data.vocab), data.vocab.sos(), data.vocab.eos(),
                             static_cast<int>(e.target.size()) + 1);
    ok += out == decoder_target(e, data.vocab);
  }
  CHECK(evaluate_exact_match(p, cfg, data.vocab, data.test) == doctest::Approx(ok / 10.0));
}
