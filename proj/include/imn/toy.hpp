#pragma once

// A hand-written three-user, four-item log and a gradient check of the per-event fusion
// loss over it.

#include <algorithm>
#include <random>

#include "imn/training.hpp"

namespace imn {

inline InteractionLog toy_log(Index features = 2) {
  struct Row {
    Index user, item;
    Action action;
  };
  const Row rows[] = {{0, 0, Action::click},    {1, 1, Action::purchase}, {0, 2, Action::purchase},
                      {2, 3, Action::click},    {1, 0, Action::click},    {0, 2, Action::click},
                      {2, 1, Action::purchase}, {1, 1, Action::purchase}, {0, 2, Action::purchase},
                      {2, 0, Action::click},    {0, 3, Action::click},    {1, 2, Action::click}};
  InteractionLog log;
  log.meta.n_users = 3;
  log.meta.n_items = 4;
  log.meta.feature_dim = features;
  log.meta.day_length = 4.0;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  double t = 0.0;
  for (const auto& r : rows) {
    t += 1.0 + 0.5 * dist(rng);
    InteractionEvent e;
    e.user = r.user;
    e.item = r.item;
    e.timestamp = t;
    e.action = r.action;
    e.features = Vec(features);
    for (Index k = 0; k < features; ++k) e.features(k) = dist(rng);
    log.events.push_back(std::move(e));
  }
  log.meta.on_sale_counts = {4, 3, 2, 4};
  return log;
}

/// Moves every parameter away from its initializer so no gradient is trivially zero.
inline void jitter(ModelParams& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.3, 0.3);
  for (auto& p : m.set) {
    for (Index r = 0; r < p.rows(); ++r) {
      for (Index c = 0; c < p.cols(); ++c) p.values()(r, c) += dist(rng);
    }
  }
}

/// Worst relative gradient error over the fusion loss of every event of the toy log,
/// with the state and recurrence cache advanced event by event as in training.
inline GradCheckReport toy_event_gradcheck(std::uint64_t seed, Variant variant = Variant::full,
                                           Index dim = 8, double step = 1e-6) {
  const PreparedLog log = prepare_log(toy_log());
  ModelDims dims{log.n_users(), log.n_items(), log.feature_dim(), dim, CombineMode::sum};
  ModelParams m = make_model_params(dims, seed);
  jitter(m, seed + 1);
  DynamicState s = initial_state(m);
  RecurrenceCache cache(dims.users, dims.items);
  const LossWeights w = variant_weights(variant, LossWeights{1.0, 1.0, 0.5, 0.5, 0.9, 0.1});
  GradCheckReport worst;
  for (std::size_t k = 0; k < log.events().size(); ++k) {
    Graph g;
    const EventInputs in{&log.events()[k], log.deltas[k], log.inventory[k]};
    auto rng = event_rng(seed, 1, k);
    const EventGraph eg = add_event_loss(g, m, s, cache, in, w, variant, 128, rng);
    const auto r = grad_check(g, eg.loss, step);
    worst.entries_checked += r.entries_checked;
    if (r.max_rel_err >= worst.max_rel_err) {
      const auto entries = worst.entries_checked;
      worst = r;
      worst.entries_checked = entries;
    }
    commit_event(g, eg, in, s, cache);
  }
  return worst;
}

}  // namespace imn
