#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "imn/synthgen.hpp"
#include "imn/toy.hpp"
#include "imn/training.hpp"
#include "test_support.hpp"

using namespace imn;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

PreparedLog market_toy(std::uint64_t seed) {
  MarketConfig c;
  c.n_users = 3;
  c.n_items = 5;
  c.n_events = 300;
  c.latent_dim = 2;
  c.propensity = 0.2;
  c.seed = seed;
  return prepare_log(generate_market(c).log);
}

TrainConfig small_config(std::uint64_t seed, int epochs) {
  TrainConfig c;
  c.embedding_dim = 8;
  c.negatives = 5;
  c.epochs = epochs;
  c.seed = seed;
  return c;
}

std::string bytes_of(const TrainingCheckpoint& ck) {
  std::ostringstream os;
  write_checkpoint(os, ck);
  return os.str();
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("imn_test_" + name);
}

}  // namespace

TEST_CASE("Adam first step has magnitude lr", "[training]") {
  ParamSet ps;
  auto& p = ps[ps.add("x", 1, 1)];
  p.values()(0, 0) = 0.25;
  p.grads()(0, 0) = 1.0;
  auto st = make_adam_state(ps);
  adam_step(ps, st, 1e-3);
  // m_hat = 1, v_hat = 1 at t = 1.
  const double expected = 1e-3 * 1.0 / (std::sqrt(1.0) + 1e-8);
  CHECK_THAT(0.25 - p.value()(0, 0), WithinAbs(expected, 1e-18));
  CHECK_THAT(0.25 - p.value()(0, 0), WithinAbs(9.99e-4, 1e-6));
  CHECK(st.step == 1);
}

TEST_CASE("Adam leaves parameters alone at zero gradient", "[training]") {
  std::mt19937_64 rng(1);
  ParamSet ps;
  auto& a = ps[ps.add("a", 3, 2)];
  auto& frozen = ps[ps.add("frozen", 2, 2, false)];
  test::fill_random(a, rng);
  test::fill_random(frozen, rng);
  const Mat a0 = a.value(), f0 = frozen.value();
  auto st = make_adam_state(ps);
  for (int k = 0; k < 5; ++k) {
    ps.zero_grad();
    adam_step(ps, st, 1e-2);
  }
  CHECK(a.value() == a0);
  frozen.grads().setOnes();
  adam_step(ps, st, 1e-2);
  CHECK(frozen.value() == f0);
}

TEST_CASE("Adam matches a scalar reference over several steps", "[training]") {
  ParamSet ps;
  auto& p = ps[ps.add("x", 1, 1)];
  p.values()(0, 0) = 1.0;
  auto st = make_adam_state(ps);
  double x = 1.0, m = 0.0, v = 0.0;
  const double grads[] = {0.5, -2.0, 0.1, 3.0, 0.0, -0.7};
  for (int t = 1; t <= 6; ++t) {
    const double gr = grads[t - 1];
    p.grads()(0, 0) = gr;
    adam_step(ps, st, 0.01);
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK_THAT(p.value()(0, 0), WithinAbs(x, 1e-14));
  }
}

TEST_CASE("event loss passes grad_check on the toy log", "[training][gradcheck]") {
  for (Variant v : kAllVariants) {
    const auto r = toy_event_gradcheck(5, v);
    INFO(variant_name(v) << " worst " << r.worst_param << " analytic " << r.worst_analytic
                         << " numeric " << r.worst_numeric);
    CHECK(r.entries_checked > 0);
    CHECK(r.max_rel_err <= 1e-4);
  }
}

TEST_CASE("training loss falls on a small market", "[training]") {
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto log = market_toy(seed);
    const auto ck = train(small_config(seed, 5), log);
    REQUIRE(ck.history.size() == 5);
    if (ck.history[4].train_loss < ck.history[0].train_loss) ++improved;
  }
  CHECK(improved >= 9);
}

TEST_CASE("training is deterministic", "[training]") {
  const auto log = market_toy(2);
  const auto a = train(small_config(7, 2), log);
  const auto b = train(small_config(7, 2), log);
  CHECK(detail::same_values(a.params, b.params));
  CHECK(a.adam == b.adam);
  CHECK(a.best == b.best);
  for (std::size_t k = 0; k < a.history.size(); ++k) {
    CHECK(a.history[k].train_loss == b.history[k].train_loss);
    CHECK(a.history[k].val_ndcg10 == b.history[k].val_ndcg10);
  }
  const auto c = train(small_config(8, 2), log);
  CHECK_FALSE(detail::same_values(a.params, c.params));
}

TEST_CASE("zero epochs return the initial model", "[training]") {
  const auto log = market_toy(3);
  const auto config = small_config(4, 0);
  const auto ck = train(config, log);
  CHECK(ck.history.empty());
  CHECK(ck.epochs_completed == 0);
  CHECK(ck.best.epoch == 0);
  const auto init = make_model_params(config.dims_for(log), config.seed);
  CHECK(detail::same_values(ck.params, param_values(init.set)));
  CHECK(detail::same_values(ck.best.params, param_values(init.set)));
  std::ostringstream os;
  write_epoch_report(os, ck.history);
  CHECK(os.str() == std::string(kEpochReportHeader) + "\n");
}

TEST_CASE("best epoch has the highest validation NDCG", "[training]") {
  const auto log = market_toy(4);
  auto config = small_config(5, 6);
  config.learning_rate = 3e-2;
  const auto ck = train(config, log);
  REQUIRE(ck.history.size() == 6);
  int best = 1;
  for (const auto& r : ck.history) {
    if (r.val_ndcg10 > ck.history[static_cast<std::size_t>(best - 1)].val_ndcg10) best = r.epoch;
  }
  CHECK(ck.best.epoch == best);
  CHECK(ck.best.val_ndcg10 == ck.history[static_cast<std::size_t>(best - 1)].val_ndcg10);

  // Re-scoring the snapshot reproduces the validation number it was chosen by.
  const auto metrics = evaluate_checkpoint(ck, log);
  CHECK(metrics.validation.ndcg10 == ck.best.val_ndcg10);
  CHECK(metrics.test.events == log.split.test.size());
}

TEST_CASE("checkpoint bytes round-trip", "[training][checkpoint]") {
  const auto log = market_toy(5);
  const auto ck = train(small_config(6, 2), log);
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(path.string(), ck);
  const auto loaded = load_checkpoint(path.string());
  CHECK(loaded == ck);
  CHECK(bytes_of(loaded) == bytes_of(ck));
  std::filesystem::remove(path);
}

TEST_CASE("damaged checkpoints are rejected", "[training][checkpoint]") {
  const auto log = market_toy(5);
  const auto text = bytes_of(train(small_config(6, 1), log));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, text.size() / 2, text.size() - 1}) {
    std::istringstream is(text.substr(0, cut));
    CHECK_THROWS_AS(read_checkpoint(is, "cut"), CheckpointError);
  }
  std::string bad = text;
  bad[0] = 'X';
  std::istringstream magic(bad);
  CHECK_THROWS_WITH(read_checkpoint(magic, "bad"), ContainsSubstring("bad"));
  std::istringstream extra(text + "junk");
  CHECK_THROWS_AS(read_checkpoint(extra, "extra"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(temp_file("missing.ckpt").string()), CheckpointError);
}

TEST_CASE("resumed training equals uninterrupted training", "[training][checkpoint]") {
  const auto log = market_toy(6);
  const auto config = small_config(9, 4);
  const auto full = train(config, log);

  const auto path = temp_file("resume.ckpt");
  TrainOptions first;
  first.checkpoint_path = path.string();
  first.max_epochs_this_run = 2;
  const auto half = train(config, log, first);
  CHECK(half.epochs_completed == 2);
  const auto resumed = resume_training(load_checkpoint(path.string()), log);
  std::filesystem::remove(path);

  CHECK(detail::same_values(resumed.params, full.params));
  CHECK(resumed.adam == full.adam);
  CHECK(resumed.best == full.best);
  REQUIRE(resumed.history.size() == full.history.size());
  for (std::size_t k = 0; k < full.history.size(); ++k) {
    CHECK(resumed.history[k].train_loss == full.history[k].train_loss);
  }
}

TEST_CASE("resuming against other data fails", "[training][checkpoint]") {
  const auto ck = train(small_config(1, 1), market_toy(1));
  MarketConfig c;
  c.n_users = 4;
  c.n_items = 5;
  c.n_events = 100;
  c.latent_dim = 2;
  CHECK_THROWS_AS(Trainer(ck, prepare_log(generate_market(c).log)), CheckpointError);
}

TEST_CASE("a non-finite parameter aborts with the batch named", "[training]") {
  const auto log = market_toy(7);
  Trainer t(small_config(1, 2), log);
  auto* w = t.params().set.find("predict.W1");
  REQUIRE(w != nullptr);
  w->values()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_MATCHES(t.run_epoch(), TrainingError,
                       Catch::Matchers::MessageMatches(ContainsSubstring("epoch 1, batch 0")));
}

TEST_CASE("invalid training configs are rejected", "[training]") {
  const auto log = market_toy(1);
  auto c = small_config(1, 1);
  c.negatives = 1;
  CHECK_THROWS_AS(Trainer(c, log), ContractError);
  c = small_config(1, 1);
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(Trainer(c, log), ContractError);
  c = small_config(1, 1);
  c.batch_cap = 0;
  CHECK_THROWS_AS(Trainer(c, log), ContractError);
}

TEST_CASE("epoch report CSV", "[training]") {
  std::vector<EpochRecord> rows{{1, 0.5, 0.25, 0.125, 2.0}};
  std::ostringstream os;
  write_epoch_report(os, rows);
  CHECK(os.str() == "epoch,train_loss,val_recall@10,val_ndcg@10,wall_seconds\n1,0.5,0.25,0.125,2\n");
}
