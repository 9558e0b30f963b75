#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "imn/diffgraph.hpp"
#include "test_support.hpp"

using namespace imn;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

Mat col(std::initializer_list<double> xs) {
  Mat m(static_cast<Index>(xs.size()), 1);
  Index i = 0;
  for (double x : xs) m(i++, 0) = x;
  return m;
}

// Central differences computed from a plain function of the parameter values,
// without going through the graph.
Mat central_difference(Parameter& p, const std::function<double()>& loss, double step) {
  Mat out(p.rows(), p.cols());
  auto v = p.values();
  for (Index r = 0; r < p.rows(); ++r) {
    for (Index c = 0; c < p.cols(); ++c) {
      const double saved = v(r, c);
      v(r, c) = saved + step;
      const double up = loss();
      v(r, c) = saved - step;
      const double down = loss();
      v(r, c) = saved;
      out(r, c) = (up - down) / (2.0 * step);
    }
  }
  return out;
}

double max_rel_error(const Mat& analytic, const Mat& numeric) {
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, grad_rel_error(analytic.data()[i], numeric.data()[i]));
  }
  return worst;
}

}  // namespace

TEST_CASE("forward evaluates primitive examples", "[diffgraph]") {
  Graph g;
  const auto s = g.sigmoid(g.input(col({0.0})));
  CHECK(g.scalar(s) == 0.5);

  Mat eye = Mat::Identity(2, 2);
  const auto mv = g.matvec(g.input(eye), g.input(col({3.0, -1.0})));
  CHECK(g.value(mv) == col({3.0, -1.0}));

  const auto affine = g.sigmoid(
      g.add(g.matvec(g.input(eye), g.input(col({0.0, 0.0}))), g.input(col({0.0, 0.0}))));
  CHECK(g.value(affine) == col({0.5, 0.5}));
}

TEST_CASE("backward matches hand-derived gradients", "[diffgraph]") {
  SECTION("gradient of x.x is 2x") {
    Parameter x("x", 2, 1);
    x.values() = col({1.0, 2.0});
    Graph g;
    const auto xn = g.parameter(x);
    const auto loss = g.dot(xn, xn);
    g.backward(loss);
    CHECK(x.grad() == col({2.0, 4.0}));
    CHECK(g.grad(loss)(0, 0) == 1.0);
  }
  SECTION("sigmoid slope at zero is a quarter") {
    Parameter x("x", 1, 1);
    Graph g;
    const auto loss = g.sum(g.sigmoid(g.parameter(x)));
    g.backward(loss);
    CHECK(x.grad()(0, 0) == 0.25);
  }
}

TEST_CASE("random affine-sigmoid-dot graph agrees with central differences", "[diffgraph]") {
  std::mt19937_64 rng(11);
  Parameter w("W", 3, 3);
  Parameter b("b", 3, 1);
  Parameter v("v", 3, 1);
  test::fill_random(w, rng);
  test::fill_random(b, rng);
  test::fill_random(v, rng);
  const Mat x = test::random_matrix(3, 1, rng);

  Graph g;
  const auto h = g.sigmoid(g.add(g.matvec(g.parameter(w), g.input(x)), g.parameter(b)));
  const auto loss = g.dot(h, g.parameter(v));
  g.backward(loss);

  auto plain = [&] {
    const Mat pre = w.value() * x + b.value();
    const Mat act = pre.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
    return act.col(0).dot(v.value().col(0));
  };
  CHECK(max_rel_error(w.grad(), central_difference(w, plain, 1e-5)) <= 1e-4);
  CHECK(max_rel_error(b.grad(), central_difference(b, plain, 1e-5)) <= 1e-4);
  CHECK(max_rel_error(v.grad(), central_difference(v, plain, 1e-5)) <= 1e-4);
}

TEST_CASE("every primitive passes the finite-difference check at random points",
          "[diffgraph][property]") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    Parameter a("a", 4, 1);
    Parameter b("b", 4, 1);
    Parameter m("m", 4, 4);
    Parameter t("t", 5, 4);
    test::fill_random(a, rng);
    test::fill_random(b, rng);
    test::fill_random(m, rng);
    test::fill_random(t, rng);
    // Keep divisors and log arguments away from zero.
    Parameter pos("pos", 4, 1);
    test::fill_random(pos, rng, 0.5, 1.5);

    Graph g;
    const auto an = g.parameter(a);
    const auto bn = g.parameter(b);
    const auto mn = g.parameter(m);
    const auto pn = g.parameter(pos);
    std::vector<NodeId> terms;
    terms.push_back(g.sum(g.add(an, bn)));
    terms.push_back(g.sum(g.mul(g.sub(an, bn), bn)));
    terms.push_back(g.sum(g.div(an, pn)));
    terms.push_back(g.sum(g.scale(an, -1.7)));
    terms.push_back(g.dot(g.matvec(mn, an), bn));
    terms.push_back(g.sum(g.sigmoid(an)));
    terms.push_back(g.sum(g.exp(bn)));
    terms.push_back(g.sum(g.log(pn)));
    terms.push_back(g.l2norm(g.add(an, bn)));
    terms.push_back(g.logsumexp(g.matvec(mn, bn)));
    terms.push_back(g.pick(g.concat({an, bn}), 5));
    const auto stacked = g.stack({an, bn, pn});
    terms.push_back(g.sum(g.bilinear(stacked, mn, bn)));
    terms.push_back(g.sum(g.mul(g.tile(an, 3), g.hcat({g.gather(t, {0, 3, 3})}))));
    terms.push_back(g.dot(g.lookup(t, 2), an));
    auto total = terms.front();
    for (std::size_t k = 1; k < terms.size(); ++k) {
      total = g.add(total, g.scale(terms[k], 0.5 + 0.1 * static_cast<double>(k)));
    }
    const auto report = grad_check(g, total, 1e-5);
    INFO("worst " << report.worst_param << "[" << report.worst_row << "," << report.worst_col
                  << "] analytic " << report.worst_analytic << " numeric "
                  << report.worst_numeric);
    CHECK(report.max_rel_err <= 1e-4);
  }
}

TEST_CASE("grad_check on a linear graph is exact", "[diffgraph]") {
  std::mt19937_64 rng(5);
  Parameter w("W", 3, 4);
  test::fill_random(w, rng);
  Graph g;
  const auto x = g.input(test::random_matrix(4, 1, rng));
  const auto loss = g.sum(g.matvec(g.parameter(w), x));
  // Below ~1e-5 the loss round-off divided by the step dominates, even for linear graphs.
  for (double step : {1e-2, 1e-3, 1e-4}) {
    CHECK(grad_check(g, loss, step).max_rel_err <= 1e-10);
  }
  CHECK_THROWS_AS(grad_check(g, loss, 0.0), ContractError);
  CHECK_THROWS_AS(grad_check(g, loss, 0.5), ContractError);
}

TEST_CASE("grad_check flags a corrupted backward rule", "[diffgraph]") {
  auto bad_sigmoid = std::make_shared<CustomRule>(CustomRule{
      "bad_sigmoid",
      [](const Mat& x) { return Mat(x.unaryExpr([](double z) { return stable_sigmoid(z); })); },
      [](const Mat&, const Mat& y, const Mat& g) {
        // Off by the (1 - y) factor.
        return Mat(g.cwiseProduct(y));
      }});
  std::mt19937_64 rng(3);
  Parameter w("W", 3, 3);
  test::fill_random(w, rng);
  Graph g;
  const auto h = g.custom(g.matvec(g.parameter(w), g.input(test::random_matrix(3, 1, rng))),
                          bad_sigmoid);
  const auto loss = g.sum(h);
  const auto report = grad_check(g, loss, 1e-5);
  CHECK(report.max_rel_err >= 1e-2);
  CHECK(report.worst_param == "W");
}

TEST_CASE("forward is deterministic", "[diffgraph]") {
  std::mt19937_64 rng(9);
  Parameter w("W", 8, 8);
  test::fill_random(w, rng);
  const Mat x = test::random_matrix(8, 1, rng);
  auto run = [&] {
    Graph g;
    const auto h = g.sigmoid(g.matvec(g.parameter(w), g.input(x)));
    return Mat(g.value(g.logsumexp(g.matvec(g.parameter(w), h))));
  };
  const Mat first = run();
  CHECK(run() == first);
}

TEST_CASE("backward is linear in the loss", "[diffgraph][property]") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Parameter w("W", 4, 4);
    test::fill_random(w, rng);
    const Mat x = test::random_matrix(4, 1, rng);
    std::uniform_real_distribution<double> coef(-2.0, 2.0);
    const double a = coef(rng);
    const double b = coef(rng);

    auto grad_of = [&](double ca, double cb) {
      Graph g;
      const auto h = g.matvec(g.parameter(w), g.input(x));
      const auto f = g.sum(g.sigmoid(h));
      const auto q = g.l2norm(h);
      const auto loss = g.add(g.scale(f, ca), g.scale(q, cb));
      g.backward(loss);
      return Mat(w.grad());
    };
    const Mat combined = grad_of(a, b);
    const Mat separate = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0);
    CHECK((combined - separate).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("backward resets gradients on every call", "[diffgraph]") {
  Parameter x("x", 2, 1);
  x.values() = col({1.0, -3.0});
  Graph g;
  const auto xn = g.parameter(x);
  const auto loss = g.dot(xn, xn);
  g.backward(loss);
  g.backward(loss);
  CHECK(x.grad() == col({2.0, -6.0}));
}

TEST_CASE("gradient shapes equal value shapes", "[diffgraph]") {
  std::mt19937_64 rng(1);
  Parameter t("table", 6, 3);
  Parameter w("W", 3, 3);
  test::fill_random(t, rng);
  test::fill_random(w, rng);
  Graph g;
  const auto rows = g.gather(t, {1, 4});
  const auto v = g.lookup(t, 2);
  const auto logits = g.bilinear(rows, g.parameter(w), v);
  const auto loss = g.logsumexp(logits);
  g.backward(loss);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const NodeId id{i};
    if (!g.node(id).requires_grad) continue;
    CHECK(g.grad(id).rows() == g.value(id).rows());
    CHECK(g.grad(id).cols() == g.value(id).cols());
  }
}

TEST_CASE("lookup sends gradient only to the selected row", "[diffgraph]") {
  std::mt19937_64 rng(4);
  Parameter t("table", 5, 3);
  test::fill_random(t, rng);
  Graph g;
  const auto loss = g.dot(g.lookup(t, 2), g.input(col({1.0, 2.0, 3.0})));
  g.backward(loss);
  for (Index r = 0; r < 5; ++r) {
    if (r == 2) {
      CHECK(t.grad().row(r) == Mat(col({1.0, 2.0, 3.0}).transpose()));
    } else {
      CHECK(t.grad().row(r).isZero(0.0));
    }
  }
  CHECK_THROWS_AS(g.lookup(t, 5), ContractError);
}

TEST_CASE("errors are structured", "[diffgraph]") {
  Graph g;
  const auto a = g.input(col({1.0, 2.0}));
  const auto b = g.input(col({1.0, 2.0, 3.0}));
  CHECK_THROWS_MATCHES(g.add(a, b), ShapeError,
                       Catch::Matchers::MessageMatches(ContainsSubstring("node 0") &&
                                                       ContainsSubstring("node 1")));
  CHECK_THROWS_MATCHES(g.log(g.input(col({-1.0}))), NumericError,
                       Catch::Matchers::MessageMatches(ContainsSubstring("node")));
  CHECK_THROWS_AS(g.input(col({std::nan("")})), NumericError);
  CHECK_THROWS_AS(g.backward(a), ContractError);
  CHECK_THROWS_AS(g.bind(g.sum(a), col({1.0})), ContractError);
  CHECK_THROWS_AS(g.bind(a, col({1.0})), ShapeError);
}

TEST_CASE("bind and forward recompute downstream values", "[diffgraph]") {
  Graph g;
  const auto x = g.input(col({0.0, 0.0}));
  const auto y = g.sum(g.sigmoid(x));
  CHECK(g.scalar(y) == 1.0);
  g.bind(x, col({100.0, 100.0}));
  g.forward();
  CHECK_THAT(g.scalar(y), WithinAbs(2.0, 1e-12));
}

TEST_CASE("parameter names are unique within a set", "[diffgraph]") {
  ParamSet set;
  set.add("W", 2, 2);
  CHECK_THROWS_AS(set.add("W", 3, 3), ContractError);
  CHECK(set.find("W") != nullptr);
  CHECK(set.scalar_count() == 4);
}
