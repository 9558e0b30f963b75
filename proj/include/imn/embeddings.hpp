#pragma once

// Static (id-compression) tables and the per-entity dynamic state.

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "imn/diffgraph.hpp"
#include "imn/errors.hpp"

namespace imn {

inline constexpr Index kDefaultEmbeddingDim = 128;
inline constexpr double kStaticInitScale = 0.1;

/// Two trainable lookup tables, one row per user / item.
struct StaticEmbeddings {
  ParamId user_table;
  ParamId item_table;
};

inline void fill_uniform(Parameter& p, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  auto v = p.values();
  for (Index r = 0; r < p.rows(); ++r) {
    for (Index c = 0; c < p.cols(); ++c) v(r, c) = dist(rng);
  }
}

inline StaticEmbeddings add_static_embeddings(ParamSet& params, Index n_users, Index n_items,
                                              Index dim, std::mt19937_64& rng) {
  if (n_users <= 0 || n_items <= 0 || dim <= 0) {
    throw ContractError("static embeddings need positive user, item and dimension counts");
  }
  StaticEmbeddings e;
  e.user_table = params.add("static.user", n_users, dim);
  e.item_table = params.add("static.item", n_items, dim);
  fill_uniform(params[e.user_table], kStaticInitScale, rng);
  fill_uniform(params[e.item_table], kStaticInitScale, rng);
  return e;
}

/// Row `id` of a static table as a graph node; gradient reaches that row only.
inline NodeId lookup_static(Graph& g, ParamSet& params, ParamId table, Index id) {
  Parameter& t = params[table];
  if (id < 0 || id >= t.rows()) {
    throw ContractError("lookup_static: id " + std::to_string(id) + " outside [0, " +
                        std::to_string(t.rows()) + ") of '" + t.name() + "'");
  }
  return g.lookup(t, id);
}

/// Shared learned starting vectors for every entity of a class.
struct InitialEmbeddings {
  ParamId user_general;
  ParamId user_limited;
  ParamId item;
};

inline InitialEmbeddings add_initial_embeddings(ParamSet& params, Index dim) {
  return {params.add("init.user_general", dim, 1), params.add("init.user_limited", dim, 1),
          params.add("init.item", dim, 1)};
}

/// Current dynamic embeddings plus interaction bookkeeping. Plain values: the trainer
/// feeds rows back into a fresh graph for every batch.
struct DynamicState {
  Mat user_general;  ///< n_users x dim
  Mat user_limited;  ///< n_users x dim
  Mat item;          ///< n_items x dim
  std::vector<double> last_time_user;
  std::vector<double> last_time_item;
  std::vector<double> last_purchase_time_user;
  std::vector<Index> last_item_of_user;  ///< -1 before the first interaction
  std::vector<std::uint8_t> user_seen;
  std::vector<std::uint8_t> user_purchased;
  std::vector<std::uint8_t> item_seen;

  Index n_users() const noexcept { return user_general.rows(); }
  Index n_items() const noexcept { return item.rows(); }
  Index dim() const noexcept { return item.cols(); }

  friend bool operator==(const DynamicState& a, const DynamicState& b) {
    auto same = [](const Mat& x, const Mat& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    };
    return same(a.user_general, b.user_general) && same(a.user_limited, b.user_limited) &&
           same(a.item, b.item) && a.last_time_user == b.last_time_user &&
           a.last_time_item == b.last_time_item &&
           a.last_purchase_time_user == b.last_purchase_time_user &&
           a.last_item_of_user == b.last_item_of_user && a.user_seen == b.user_seen &&
           a.user_purchased == b.user_purchased && a.item_seen == b.item_seen;
  }
};

inline DynamicState make_dynamic_state(Index n_users, Index n_items, const Mat& init_general,
                                       const Mat& init_limited, const Mat& init_item) {
  if (n_users <= 0 || n_items <= 0) {
    throw ContractError("dynamic state needs positive user and item counts");
  }
  const double never = -std::numeric_limits<double>::infinity();
  DynamicState s;
  s.user_general = init_general.col(0).transpose().replicate(n_users, 1);
  s.user_limited = init_limited.col(0).transpose().replicate(n_users, 1);
  s.item = init_item.col(0).transpose().replicate(n_items, 1);
  s.last_time_user.assign(static_cast<std::size_t>(n_users), never);
  s.last_time_item.assign(static_cast<std::size_t>(n_items), never);
  s.last_purchase_time_user.assign(static_cast<std::size_t>(n_users), never);
  s.last_item_of_user.assign(static_cast<std::size_t>(n_users), -1);
  s.user_seen.assign(static_cast<std::size_t>(n_users), 0);
  s.user_purchased.assign(static_cast<std::size_t>(n_users), 0);
  s.item_seen.assign(static_cast<std::size_t>(n_items), 0);
  return s;
}

}  // namespace imn
