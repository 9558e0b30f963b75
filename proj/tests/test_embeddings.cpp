#include <catch_amalgamated.hpp>

#include <random>
#include <set>

#include "imn/model.hpp"
#include "test_support.hpp"

using namespace imn;

namespace {

ModelDims small_dims(Index users, Index items, Index dim = 8) {
  ModelDims d;
  d.users = users;
  d.items = items;
  d.features = 2;
  d.embedding = dim;
  return d;
}

}  // namespace

TEST_CASE("init_state is seeded", "[embeddings]") {
  const auto a = init_state(small_dims(5, 7, kDefaultEmbeddingDim), 7);
  const auto b = init_state(small_dims(5, 7, kDefaultEmbeddingDim), 7);
  for (const auto& p : a.params.set) {
    CHECK(p.value() == b.params.set.find(p.name())->value());
  }
  CHECK(a.state == b.state);

  const auto c = init_state(small_dims(5, 7, kDefaultEmbeddingDim), 8);
  CHECK(c.params[c.params.statics.user_table].value() !=
        a.params[a.params.statics.user_table].value());
}

TEST_CASE("static tables are uniform in [-0.1, 0.1] and initial vectors are zero", "[embeddings]") {
  const auto r = init_state(small_dims(20, 30), 1);
  const Mat& users = r.params[r.params.statics.user_table].value();
  CHECK(users.rows() == 20);
  CHECK(users.cols() == 8);
  CHECK(users.cwiseAbs().maxCoeff() <= kStaticInitScale);
  CHECK(r.params[r.params.initial.user_general].value().isZero(0.0));
  CHECK(r.params[r.params.initial.user_limited].value().isZero(0.0));
  CHECK(r.params[r.params.initial.item].value().isZero(0.0));
}

TEST_CASE("all users start from the shared initial vector", "[embeddings]") {
  auto r = init_state(small_dims(6, 3), 2);
  std::mt19937_64 rng(3);
  test::fill_random(r.params[r.params.initial.user_general], rng);
  const auto s = initial_state(r.params);
  for (Index u = 0; u < s.n_users(); ++u) {
    CHECK(s.user_general.row(u) == s.user_general.row(0));
  }
  CHECK(s.user_general.row(0).transpose() == r.params[r.params.initial.user_general].value());
}

TEST_CASE("single user gives a 1 x 128 table", "[embeddings]") {
  const auto r = init_state(small_dims(1, 2, kDefaultEmbeddingDim), 0);
  const Mat& t = r.params[r.params.statics.user_table].value();
  CHECK(t.rows() == 1);
  CHECK(t.cols() == 128);
  CHECK(r.state.user_general.rows() == 1);
}

TEST_CASE("lookup_static returns the exact row and checks range", "[embeddings]") {
  ParamSet ps;
  std::mt19937_64 rng(4);
  const auto e = add_static_embeddings(ps, 5, 6, 4, rng);
  auto& items = ps[e.item_table];
  items.values().setZero();
  items.values()(3, 3) = 1.0;
  Graph g;
  const auto row = lookup_static(g, ps, e.item_table, 3);
  Mat e3 = Mat::Zero(4, 1);
  e3(3, 0) = 1.0;
  CHECK(g.value(row) == e3);
  CHECK_THROWS_AS(lookup_static(g, ps, e.item_table, 6), ContractError);
  CHECK_THROWS_AS(lookup_static(g, ps, e.item_table, -1), ContractError);
}

TEST_CASE("static gradient touches exactly the looked-up rows", "[embeddings][property]") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ParamSet ps;
    const auto e = add_static_embeddings(ps, 4, 12, 3, rng);
    std::uniform_int_distribution<Index> pick(0, 11);
    std::set<Index> ids;
    const int k = 1 + trial % 5;
    while (static_cast<int>(ids.size()) < k) ids.insert(pick(rng));

    Graph g;
    NodeId acc = g.input(Mat(Mat::Zero(1, 1)));
    for (Index id : ids) {
      const auto v = g.input(test::random_matrix(3, 1, rng, 0.5, 1.5));
      acc = g.add(acc, g.dot(lookup_static(g, ps, e.item_table, id), v));
    }
    g.backward(acc);
    const Mat& grad = ps[e.item_table].grad();
    std::set<Index> touched;
    for (Index r = 0; r < grad.rows(); ++r) {
      if (!grad.row(r).isZero(0.0)) touched.insert(r);
    }
    CHECK(touched == ids);
    CHECK(ps[e.user_table].grad().isZero(0.0));
  }
}

TEST_CASE("last-time arrays never decrease while replaying", "[embeddings][property]") {
  auto r = init_state(small_dims(4, 5), 9);
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<Index> user(0, 3), item(0, 4);
  std::bernoulli_distribution buy(0.3);
  std::vector<InteractionEvent> events;
  double t = 0.0;
  for (int k = 0; k < 200; ++k) {
    t += std::uniform_real_distribution<double>(0.0, 5.0)(rng);
    events.push_back({user(rng), item(rng), t, buy(rng) ? Action::purchase : Action::click,
                      test::random_matrix(2, 1, rng).col(0)});
  }
  const auto deltas = compute_deltas(events);
  auto prev = r.state;
  for (std::size_t k = 0; k < events.size(); ++k) {
    apply_event(r.params, r.state, events[k], deltas[k], 1.0, true);
    for (Index u = 0; u < 4; ++u) {
      const auto i = static_cast<std::size_t>(u);
      CHECK(r.state.last_time_user[i] >= prev.last_time_user[i]);
      CHECK(r.state.last_purchase_time_user[i] >= prev.last_purchase_time_user[i]);
    }
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(r.state.last_time_item[i] >= prev.last_time_item[i]);
    }
    prev = r.state;
  }
  auto late = events.front();
  late.timestamp = 0.0;
  CHECK_THROWS_AS(apply_event(r.params, r.state, late, deltas.front(), 1.0, true), ContractError);
}
