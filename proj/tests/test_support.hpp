#pragma once

#include <random>

#include "imn/dataio.hpp"
#include "imn/diffgraph.hpp"

namespace imn::test {

inline Mat random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0,
                         double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  }
  return m;
}

inline void fill_random(Parameter& p, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  p.values() = random_matrix(p.rows(), p.cols(), rng, lo, hi);
}

/// Uniformly random log with increasing timestamps and one on-sale count per day.
inline InteractionLog random_log(Index users, Index items, std::size_t events, Index features,
                                 std::uint64_t seed, double purchase_prob = 0.2) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick_user(0, users - 1), pick_item(0, items - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  InteractionLog log;
  log.meta.n_users = users;
  log.meta.n_items = items;
  log.meta.feature_dim = features;
  log.meta.day_length = 100.0;
  double t = 0.0;
  for (std::size_t k = 0; k < events; ++k) {
    t += 1.0 + 20.0 * unit(rng);
    InteractionEvent e;
    e.user = pick_user(rng);
    e.item = pick_item(rng);
    e.timestamp = t;
    e.action = unit(rng) < purchase_prob ? Action::purchase : Action::click;
    e.features = random_matrix(features, 1, rng).col(0);
    log.events.push_back(std::move(e));
  }
  const auto days = static_cast<std::size_t>(t / log.meta.day_length) + 1;
  for (std::size_t d = 0; d < days; ++d) {
    log.meta.on_sale_counts.push_back(static_cast<double>(items) * (0.5 + 0.5 * unit(rng)));
  }
  return log;
}

}  // namespace imn::test
