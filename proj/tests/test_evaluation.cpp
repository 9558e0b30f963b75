#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "imn/evaluation.hpp"
#include "test_support.hpp"

using namespace imn;
using Catch::Matchers::WithinAbs;

namespace {

double brute_recall(const std::vector<Index>& ranks, Index k) {
  if (ranks.empty()) return 0.0;
  double hits = 0.0;
  for (Index r : ranks) hits += r <= k ? 1.0 : 0.0;
  return hits / static_cast<double>(ranks.size());
}

double brute_ndcg(const std::vector<Index>& ranks, Index k) {
  if (ranks.empty()) return 0.0;
  double s = 0.0;
  for (Index r : ranks) {
    if (k > 0 && r > k) continue;
    s += std::log(2.0) / std::log(static_cast<double>(r) + 1.0);
  }
  return s / static_cast<double>(ranks.size());
}

std::vector<Mat> values_of(const ParamSet& set) {
  std::vector<Mat> out;
  for (const auto& p : set) out.push_back(p.value());
  return out;
}

struct Fixture {
  PreparedLog log;
  ModelParams m;
  DynamicState s;

  explicit Fixture(std::uint64_t seed, Index items = 10, Index dim = 6)
      : log(prepare_log(test::random_log(5, items, 60, 3, seed))),
        m(make_model_params(ModelDims{5, items, 3, dim, CombineMode::sum}, seed)),
        s(initial_state(m)) {
    replay_range(m, s, log, log.split.train, true);
  }
};

}  // namespace

TEST_CASE("metric spot values", "[evaluation]") {
  const std::vector<Index> one{1}, three{3}, seven{7};
  CHECK(ndcg(one) == 1.0);
  CHECK(ndcg(three) == 0.5);
  CHECK_THAT(ndcg(seven), WithinAbs(1.0 / 3.0, 1e-15));
  CHECK(ndcg(seven, 5) == 0.0);
  CHECK(recall_at_k(seven, 7) == 1.0);
  CHECK(recall_at_k(seven, 6) == 0.0);
  const std::vector<Index> none;
  CHECK(ndcg(none) == 0.0);
  CHECK(recall_at_k(none, 10) == 0.0);
  const std::vector<Index> bad{0};
  CHECK_THROWS_AS(ndcg(bad), ContractError);
}

TEST_CASE("metrics match brute force on random rank vectors", "[evaluation][property]") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<Index> rank(1, 60);
  std::uniform_int_distribution<std::size_t> len(1, 50);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Index> ranks(len(rng));
    for (auto& r : ranks) r = rank(rng);
    for (Index k : {Index{1}, Index{5}, Index{10}, Index{20}}) {
      CHECK(recall_at_k(ranks, k) == brute_recall(ranks, k));
      CHECK_THAT(ndcg(ranks, k), WithinAbs(brute_ndcg(ranks, k), 1e-12));
    }
    const auto report = metrics_from_ranks(ranks);
    CHECK(report.recall10 <= report.recall20);
    CHECK(report.ndcg10 <= report.ndcg20);
    CHECK(report.ndcg20 <= ndcg(ranks));
    CHECK(report.events == ranks.size());
  }
}

TEST_CASE("ranking orders by score with ties by id", "[evaluation]") {
  Vec scores(3);
  scores << 0.9, 0.1, 0.5;
  CHECK(ranking(scores) == std::vector<Index>{0, 2, 1});
  CHECK(rank_of(scores, 0) == 1);
  CHECK(rank_of(scores, 1) == 3);
  CHECK(rank_of(scores, 2) == 2);

  Vec tied(4);
  tied << 0.3, 0.7, 0.3, 0.3;
  CHECK(ranking(tied) == std::vector<Index>{1, 0, 2, 3});
  CHECK(rank_of(tied, 2) == 3);
  CHECK(rank_of(tied, 3) == 4);
}

TEST_CASE("rank_of agrees with the position in ranking", "[evaluation][property]") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> level(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    Vec scores(15);
    for (Index k = 0; k < scores.size(); ++k) scores(k) = level(rng);
    const auto order = ranking(scores);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      CHECK(rank_of(scores, order[pos]) == static_cast<Index>(pos) + 1);
    }
  }
}

TEST_CASE("ranks are invariant under increasing transforms", "[evaluation][property]") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec scores = test::random_matrix(20, 1, rng, -3, 3).col(0);
    const Vec affine = (2.5 * scores.array() + 7.0).matrix();
    const Vec expd = scores.array().exp().matrix();
    CHECK(ranking(affine) == ranking(scores));
    CHECK(ranking(expd) == ranking(scores));
  }
}

TEST_CASE("score_all matches per-candidate fusion_score", "[evaluation]") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Fixture f(seed);
    for (bool cosine : {false, true}) {
      ScoringOptions opt;
      opt.cosine = cosine;
      const auto& ev = f.log.events()[f.log.split.validation.begin];
      const auto q = query_context(f.m, f.s, ev, f.log.deltas[f.log.split.validation.begin], true);
      const Vec all = score_all(f.m, f.s, q, opt);
      REQUIRE(all.size() == 10);
      for (Index k = 0; k < 10; ++k) {
        CHECK_THAT(all(k), WithinAbs(fusion_score(f.m, f.s, k, q, opt), 1e-12));
      }
    }
  }
}

TEST_CASE("single-term scoring reduces to one signal", "[evaluation]") {
  Fixture f(4);
  const auto& ev = f.log.events()[f.log.split.validation.begin];
  const auto q = query_context(f.m, f.s, ev, f.log.deltas[f.log.split.validation.begin], true);
  const Mat& statics = f.m[f.m.statics.item_table].value();

  ScoringOptions mse_only;
  mse_only.weights.alpha_n = 0.0;
  const Vec a = score_all(f.m, f.s, q, mse_only);
  ScoringOptions nce_only;
  nce_only.weights.alpha_m = 0.0;
  const Vec b = score_all(f.m, f.s, q, nce_only);
  const Index d = f.m.dims.embedding;
  for (Index k = 0; k < f.m.dims.items; ++k) {
    const Vec target = statics.row(k).transpose();
    CHECK_THAT(a(k), WithinAbs(-(q.predicted - target).norm(), 1e-12));
    Vec x(3 * d);
    x << q.user_dynamic, item_dynamic_value(f.m, f.s, k).col(0), target;
    CHECK_THAT(b(k), WithinAbs(std::log(density_ratio(f.m, x, q.context)), 1e-9));
  }
}

TEST_CASE("weights only matter through their ratio", "[evaluation]") {
  Fixture f(5);
  const auto& ev = f.log.events()[f.log.split.validation.begin];
  const auto q = query_context(f.m, f.s, ev, f.log.deltas[f.log.split.validation.begin], true);
  ScoringOptions a, b;
  a.weights.alpha_m = 0.9;
  a.weights.alpha_n = 0.1;
  b.weights.alpha_m = 9.0;
  b.weights.alpha_n = 1.0;
  const Vec sa = score_all(f.m, f.s, q, a), sb = score_all(f.m, f.s, q, b);
  for (Index k = 0; k < sa.size(); ++k) CHECK_THAT(sa(k), WithinAbs(sb(k), 1e-12));
}

TEST_CASE("evaluation replays events as it scores", "[evaluation]") {
  Fixture f(6);
  DynamicState scored = f.s, replayed = f.s;
  const auto before = values_of(f.m.set);
  const auto report = evaluate_range(f.m, scored, f.log, f.log.split.validation, {});
  replay_range(f.m, replayed, f.log, f.log.split.validation, true);
  CHECK(scored == replayed);
  CHECK(values_of(f.m.set) == before);
  CHECK(report.events == f.log.split.validation.size());
  for (Index r : report.ranks) {
    CHECK(r >= 1);
    CHECK(r <= f.m.dims.items);
  }
}

TEST_CASE("predictions dump", "[evaluation]") {
  Fixture f(7);
  DynamicState s = f.s;
  const auto empty = dump_predictions(f.m, s, f.log, EventRange{3, 3}, 5, {});
  CHECK(empty.empty());
  std::ostringstream header;
  write_predictions(header, empty);
  CHECK(header.str() == "day,timestamp,user,ground_truth,rank,top_k\n");

  DynamicState s2 = f.s;
  const auto rows = dump_predictions(f.m, s2, f.log, f.log.split.validation, 3, {});
  REQUIRE(rows.size() == f.log.split.validation.size());
  DynamicState s3 = f.s;
  const auto report = evaluate_range(f.m, s3, f.log, f.log.split.validation, {});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    CHECK(rows[k].top.size() == 3);
    CHECK(rows[k].rank == report.ranks[k]);
    const auto& ev = f.log.events()[f.log.split.validation.begin + k];
    CHECK(rows[k].ground_truth == std::to_string(ev.item));
    CHECK(rows[k].day == static_cast<long long>(std::floor(ev.timestamp / 100.0)));
  }
  std::ostringstream out;
  write_predictions(out, rows);
  const auto text = out.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(rows.size()) + 1);
  CHECK_THROWS_AS(dump_predictions(f.m, s, f.log, f.log.split.test, 0, {}), ContractError);
}

TEST_CASE("metrics CSV row", "[evaluation]") {
  std::ostringstream os;
  write_metrics_row(os, "full", "test", metrics_from_ranks({1, 3}), 7);
  CHECK(os.str() == "full,test,1,0.75,1,0.75,7\n");
  CHECK(std::string(kMetricsHeader) == "variant,split,recall@10,ndcg@10,recall@20,ndcg@20,seed");
}

TEST_CASE("recall examples", "[evaluation]") {
  const std::vector<Index> ranks{1, 11, 3, 30};
  CHECK(recall_at_k(ranks, 10) == 0.5);
  const std::vector<Index> ones(5, 1);
  CHECK(recall_at_k(ones, 10) == 1.0);
  CHECK(recall_at_k(ranks, 30) == 1.0);
}

TEST_CASE("a one-item catalog ranks that item first", "[evaluation]") {
  Fixture f(9, 1);
  const auto k = f.log.split.validation.begin;
  const auto r = predict_next(f.m, f.s, f.log.events()[k], f.log.deltas[k], {}, k);
  CHECK(r.ranked == std::vector<Index>{0});
  CHECK(r.rank == 1);
}
