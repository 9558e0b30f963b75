#pragma once

// Forward computation of the interest-behaviour network on a Graph:
// the coupled user/item recurrent updates, the purchase-gated resource branch,
// temporal projection, the linear item predictor, the history context and the
// bilinear density-ratio scorer.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "imn/dataio.hpp"
#include "imn/diffgraph.hpp"
#include "imn/embeddings.hpp"
#include "imn/errors.hpp"

namespace imn {

/// How the general and resource-limited user embeddings are fused.
enum class CombineMode : std::uint8_t { sum, concat };

struct ModelDims {
  Index users = 0;
  Index items = 0;
  Index features = 0;
  Index embedding = kDefaultEmbeddingDim;
  CombineMode combine = CombineMode::sum;

  Index combined_dim() const noexcept {
    return combine == CombineMode::sum ? embedding : 2 * embedding;
  }
  Index context_dim() const noexcept { return combined_dim() + 3 * embedding; }
  Index sample_dim() const noexcept { return 3 * embedding; }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Every trainable tensor of the model, registered in one ParamSet.
struct ModelParams {
  ModelDims dims;
  ParamSet set;
  StaticEmbeddings statics;
  InitialEmbeddings initial;
  std::array<ParamId, 4> user_rnn;  ///< h_user, h_item, delta, features
  std::array<ParamId, 4> item_rnn;  ///< h_item, h_user, delta, features
  /// h_limited, h_general, h_item, user static, item static, delta, features, inventory
  std::array<ParamId, 8> limited;
  ParamId inventory_code;
  ParamId time_proj;
  std::array<ParamId, 4> predict;  ///< combined user, user static, last item, last item static
  ParamId bilinear;

  Parameter& operator[](ParamId id) { return set[id]; }
  const Parameter& operator[](ParamId id) const { return set[id]; }
};

inline ModelParams make_model_params(const ModelDims& dims, std::uint64_t seed) {
  if (dims.users <= 0 || dims.items <= 0 || dims.embedding <= 0 || dims.features < 0) {
    throw ContractError("model dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  const Index d = dims.embedding;
  ModelParams m;
  m.dims = dims;
  m.statics = add_static_embeddings(m.set, dims.users, dims.items, d, rng);
  m.initial = add_initial_embeddings(m.set, d);

  auto dense = [&](const std::string& name, Index rows, Index cols, double scale) {
    const ParamId id = m.set.add(name, rows, cols);
    fill_uniform(m.set[id], scale, rng);
    return id;
  };
  auto glorot = [&](const std::string& name, Index rows, Index cols) {
    return dense(name, rows, cols, 1.0 / std::sqrt(static_cast<double>(std::max<Index>(cols, 1))));
  };

  m.user_rnn = {glorot("user_rnn.W1", d, d), glorot("user_rnn.W2", d, d),
                glorot("user_rnn.W3", d, 1), glorot("user_rnn.W4", d, dims.features)};
  m.item_rnn = {glorot("item_rnn.W1", d, d), glorot("item_rnn.W2", d, d),
                glorot("item_rnn.W3", d, 1), glorot("item_rnn.W4", d, dims.features)};
  m.limited = {glorot("limited.W1", d, d), glorot("limited.W2", d, d),
               glorot("limited.W3", d, d), glorot("limited.W4", d, d),
               glorot("limited.W5", d, d), glorot("limited.W6", d, 1),
               glorot("limited.W7", d, dims.features), glorot("limited.W8", d, d)};
  m.inventory_code = dense("limited.inventory_code", d, 1, 0.1);
  m.time_proj = dense("time_proj.W", d, 1, 0.01);
  const Index c = dims.combined_dim();
  m.predict = {glorot("predict.W1", d, c), glorot("predict.W2", d, d),
               glorot("predict.W3", d, d), glorot("predict.W4", d, d)};
  m.bilinear = dense("mi.W1", dims.sample_dim(), dims.context_dim(),
                     0.1 / std::sqrt(static_cast<double>(dims.context_dim())));
  return m;
}

/// Fresh state where every entity holds its class's shared initial vector.
inline DynamicState initial_state(const ModelParams& m) {
  return make_dynamic_state(m.dims.users, m.dims.items, m[m.initial.user_general].value(),
                            m[m.initial.user_limited].value(), m[m.initial.item].value());
}

struct InitResult {
  ModelParams params;
  DynamicState state;
};

inline InitResult init_state(const ModelDims& dims, std::uint64_t seed) {
  InitResult r{make_model_params(dims, seed), {}};
  r.state = initial_state(r.params);
  return r;
}

// ---- dynamic-state readers --------------------------------------------------------

inline Mat column(const Eigen::Ref<const Mat>& row) { return row.transpose(); }

/// Value of an item's dynamic embedding; unseen items read the shared initial vector.
inline Mat item_dynamic_value(const ModelParams& m, const DynamicState& s, Index item) {
  return s.item_seen[static_cast<std::size_t>(item)] ? column(s.item.row(item))
                                                     : m[m.initial.item].value();
}

inline NodeId param_node(Graph& g, ModelParams& m, ParamId id) { return g.parameter(m[id]); }

/// Graph node for the stored general embedding of `user`. Users that have not interacted
/// yet are the learned initial vector itself so it receives gradient.
inline NodeId user_general_node(Graph& g, ModelParams& m, const DynamicState& s, Index user) {
  return s.user_seen[static_cast<std::size_t>(user)]
             ? g.input(column(s.user_general.row(user)))
             : param_node(g, m, m.initial.user_general);
}

inline NodeId user_limited_node(Graph& g, ModelParams& m, const DynamicState& s, Index user) {
  return s.user_purchased[static_cast<std::size_t>(user)]
             ? g.input(column(s.user_limited.row(user)))
             : param_node(g, m, m.initial.user_limited);
}

inline NodeId item_node(Graph& g, ModelParams& m, const DynamicState& s, Index item) {
  return s.item_seen[static_cast<std::size_t>(item)] ? g.input(column(s.item.row(item)))
                                                     : param_node(g, m, m.initial.item);
}

// ---- recurrent updates ----------------------------------------------------------------

namespace detail {

inline void require_length(const Graph& g, NodeId n, Index len, const char* what) {
  const Mat& v = g.value(n);
  if (v.rows() != len || v.cols() != 1) {
    throw ShapeError(std::string(what) + ": node " + std::to_string(n.index) + " is " +
                     shape_string(v) + ", expected " + shape_string(len, 1));
  }
}

inline NodeId affine_sum(Graph& g, std::initializer_list<NodeId> terms) {
  auto it = terms.begin();
  NodeId acc = *it++;
  for (; it != terms.end(); ++it) acc = g.add(acc, *it);
  return acc;
}

}  // namespace detail

/// sigma(W1 h_user + W2 h_item + W3 delta + W4 v) for the general user embedding.
inline NodeId user_rnn_update(Graph& g, ModelParams& m, NodeId h_user, NodeId h_item,
                              double delta_user, NodeId features) {
  const auto& w = m.user_rnn;
  return g.sigmoid(detail::affine_sum(
      g, {g.matvec(param_node(g, m, w[0]), h_user), g.matvec(param_node(g, m, w[1]), h_item),
          g.scale(param_node(g, m, w[2]), delta_user),
          g.matvec(param_node(g, m, w[3]), features)}));
}

/// sigma(W1 h_item + W2 h_user + W3 delta + W4 v) for the item embedding.
inline NodeId item_rnn_update(Graph& g, ModelParams& m, NodeId h_item, NodeId h_user,
                              double delta_item, NodeId features) {
  const auto& w = m.item_rnn;
  return g.sigmoid(detail::affine_sum(
      g, {g.matvec(param_node(g, m, w[0]), h_item), g.matvec(param_node(g, m, w[1]), h_user),
          g.scale(param_node(g, m, w[2]), delta_item),
          g.matvec(param_node(g, m, w[3]), features)}));
}

struct MrrnnOutput {
  NodeId user;
  NodeId item;
};

/// One interaction's mutually recursive update; both sides read the other's previous value.
inline MrrnnOutput mrrnn_step(Graph& g, ModelParams& m, NodeId h_user_prev, NodeId h_item_prev,
                              double delta_user, double delta_item, NodeId features) {
  const Index d = m.dims.embedding;
  detail::require_length(g, h_user_prev, d, "mrrnn_step user");
  detail::require_length(g, h_item_prev, d, "mrrnn_step item");
  detail::require_length(g, features, m.dims.features, "mrrnn_step features");
  return {user_rnn_update(g, m, h_user_prev, h_item_prev, delta_user, features),
          item_rnn_update(g, m, h_item_prev, h_user_prev, delta_item, features)};
}

struct ResourceInputs {
  NodeId limited_prev;      ///< h_l before this purchase
  NodeId user_general;      ///< h_g after this interaction
  NodeId item;              ///< h_i after this interaction
  NodeId user_static;       ///< static user row
  NodeId item_static;       ///< static row of the purchased item
  double delta_purchase = 0.0;
  NodeId features;          ///< features of the purchase
  double inventory = 1.0;   ///< normalized on-sale count of the day
};

/// Resource-limited user embedding after a purchase. Clicks never reach this function.
inline NodeId resource_step(Graph& g, ModelParams& m, const ResourceInputs& in, Action action) {
  if (action != Action::purchase) {
    throw ContractError("resource_step: the resource-limited branch only updates on purchases");
  }
  const auto& w = m.limited;
  const NodeId inventory = g.scale(param_node(g, m, m.inventory_code), in.inventory);
  return g.sigmoid(detail::affine_sum(
      g, {g.matvec(param_node(g, m, w[0]), in.limited_prev),
          g.matvec(param_node(g, m, w[1]), in.user_general),
          g.matvec(param_node(g, m, w[2]), in.item),
          g.matvec(param_node(g, m, w[3]), in.user_static),
          g.matvec(param_node(g, m, w[4]), in.item_static),
          g.scale(param_node(g, m, w[5]), in.delta_purchase),
          g.matvec(param_node(g, m, w[6]), in.features),
          g.matvec(param_node(g, m, w[7]), inventory)}));
}

// ---- projection, fusion and prediction ----------------------------------------------

/// (1 + W_t * delta) (.) h: maps a stale embedding to the query time.
inline NodeId project(Graph& g, ModelParams& m, NodeId h, double delta) {
  if (!(delta >= 0.0)) {
    throw ContractError("project: elapsed time must be non-negative, got " +
                        std::to_string(delta));
  }
  const NodeId w = g.scale(param_node(g, m, m.time_proj), delta);
  return g.add(h, g.mul(w, h));
}

/// Fuses the projected general and resource-limited user embeddings. Without a limited
/// embedding (resource branch ablated) the general one passes through; concat mode pads
/// with zeros to keep the width.
inline NodeId combine(Graph& g, NodeId general, std::optional<NodeId> limited, CombineMode mode) {
  if (mode == CombineMode::sum) {
    return limited ? g.add(general, *limited) : general;
  }
  const NodeId other =
      limited ? *limited : g.input(Mat(Mat::Zero(g.value(general).rows(), 1)));
  return g.concat({general, other});
}

/// Linear predictor of the next item's static embedding.
inline NodeId predict_item(Graph& g, ModelParams& m, NodeId combined_user, NodeId user_static,
                           NodeId last_item_dynamic, NodeId last_item_static) {
  const auto& w = m.predict;
  return detail::affine_sum(g, {g.matvec(param_node(g, m, w[0]), combined_user),
                                g.matvec(param_node(g, m, w[1]), user_static),
                                g.matvec(param_node(g, m, w[2]), last_item_dynamic),
                                g.matvec(param_node(g, m, w[3]), last_item_static)});
}

/// History context [combined user, user static, last item dynamic, last item static].
struct Context {
  NodeId general;            ///< h_g before projection
  NodeId combined;
  NodeId user_static;
  NodeId last_item_dynamic;
  NodeId last_item_static;
  NodeId vector;
};

struct ContextInputs {
  NodeId general;
  std::optional<NodeId> limited;  ///< empty when the resource branch is ablated
  double delta_general = 0.0;     ///< since the user's last interaction
  double delta_limited = 0.0;     ///< since the user's last purchase
  NodeId user_static;
  NodeId last_item_dynamic;
  NodeId last_item_static;
};

inline Context make_context(Graph& g, ModelParams& m, const ContextInputs& in) {
  Context c;
  c.general = in.general;
  const NodeId pg = project(g, m, in.general, in.delta_general);
  std::optional<NodeId> pl;
  if (in.limited) pl = project(g, m, *in.limited, in.delta_limited);
  c.combined = combine(g, pg, pl, m.dims.combine);
  c.user_static = in.user_static;
  c.last_item_dynamic = in.last_item_dynamic;
  c.last_item_static = in.last_item_static;
  c.vector = g.concat({c.combined, c.user_static, c.last_item_dynamic, c.last_item_static});
  return c;
}

/// Context for `user` read from the stored state, strictly before the query event.
/// Cold users fall back to the shared initial vectors; a missing last item contributes
/// the initial item vector and a zero static row.
inline Context build_context(Graph& g, ModelParams& m, const DynamicState& s, Index user,
                             double delta_general, double delta_limited, bool resource_branch) {
  if (user < 0 || user >= s.n_users()) {
    throw ContractError("build_context: user " + std::to_string(user) + " out of range");
  }
  ContextInputs in;
  in.general = user_general_node(g, m, s, user);
  if (resource_branch) in.limited = user_limited_node(g, m, s, user);
  in.delta_general = delta_general;
  in.delta_limited = delta_limited;
  in.user_static = lookup_static(g, m.set, m.statics.user_table, user);
  const Index last = s.last_item_of_user[static_cast<std::size_t>(user)];
  if (last >= 0) {
    in.last_item_dynamic = item_node(g, m, s, last);
    in.last_item_static = lookup_static(g, m.set, m.statics.item_table, last);
  } else {
    in.last_item_dynamic = param_node(g, m, m.initial.item);
    in.last_item_static = g.input(Mat(Mat::Zero(m.dims.embedding, 1)));
  }
  return make_context(g, m, in);
}

// ---- mutual-information scorer --------------------------------------------------------

/// log f1 = x^T W c for every row x of `samples` (n x sample_dim). Working in log space
/// keeps the exponential out of the graph.
inline NodeId log_density_ratio(Graph& g, ModelParams& m, NodeId samples, NodeId context) {
  return g.bilinear(samples, param_node(g, m, m.bilinear), context);
}

/// f1 = exp(x^T W c) for a single candidate representation x.
inline double density_ratio(const ModelParams& m, const Vec& candidate, const Vec& context) {
  const Mat& w = m[m.bilinear].value();
  if (candidate.size() != w.rows() || context.size() != w.cols()) {
    throw ShapeError("density_ratio: candidate " + std::to_string(candidate.size()) +
                     " / context " + std::to_string(context.size()) + " do not fit " +
                     shape_string(w));
  }
  return std::exp(candidate.dot(w * context));
}

/// `count` distinct item ids drawn uniformly from the catalog without `positive`.
inline std::vector<Index> sample_negatives(Index n_items, Index positive, Index count,
                                           std::mt19937_64& rng) {
  if (count < 0 || count > n_items - 1) {
    throw ContractError("sample_negatives: cannot draw " + std::to_string(count) +
                        " negatives from a catalog of " + std::to_string(n_items));
  }
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(count));
  if (2 * count <= n_items) {
    std::uniform_int_distribution<Index> dist(0, n_items - 1);
    std::unordered_set<Index> taken{positive};
    while (static_cast<Index>(out.size()) < count) {
      const Index k = dist(rng);
      if (taken.insert(k).second) out.push_back(k);
    }
  } else {
    std::vector<Index> pool;
    pool.reserve(static_cast<std::size_t>(n_items - 1));
    for (Index k = 0; k < n_items; ++k) {
      if (k != positive) pool.push_back(k);
    }
    for (Index k = 0; k < count; ++k) {
      std::uniform_int_distribution<Index> dist(k, static_cast<Index>(pool.size()) - 1);
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(dist(rng))]);
      out.push_back(pool[static_cast<std::size_t>(k)]);
    }
  }
  return out;
}

/// The n x sample_dim matrix of candidate interactions: row 0 is the positive
/// [user, positive item dynamic, positive item static]; the following rows pair the same
/// user vector with each negative item's stored dynamic embedding and static row.
inline NodeId assemble_samples(Graph& g, ModelParams& m, const DynamicState& s, NodeId user,
                               Index positive_item, NodeId positive_dynamic,
                               std::span<const Index> negatives) {
  std::unordered_set<Index> seen{positive_item};
  for (Index k : negatives) {
    if (k < 0 || k >= s.n_items()) {
      throw ContractError("assemble_samples: negative item " + std::to_string(k) +
                          " out of range");
    }
    if (!seen.insert(k).second) {
      throw ContractError("assemble_samples: negative item " + std::to_string(k) +
                          " repeats or equals the positive item");
    }
  }
  const auto n = static_cast<Index>(negatives.size()) + 1;
  NodeId dynamic = g.stack({positive_dynamic});
  if (!negatives.empty()) {
    Mat rows(static_cast<Index>(negatives.size()), m.dims.embedding);
    const Mat& init = m[m.initial.item].value();
    for (std::size_t k = 0; k < negatives.size(); ++k) {
      const Index item = negatives[k];
      if (s.item_seen[static_cast<std::size_t>(item)]) {
        rows.row(static_cast<Index>(k)) = s.item.row(item);
      } else {
        rows.row(static_cast<Index>(k)) = init.col(0).transpose();
      }
    }
    dynamic = g.concat({dynamic, g.input(std::move(rows))});
  }
  std::vector<Index> ids{positive_item};
  ids.insert(ids.end(), negatives.begin(), negatives.end());
  const NodeId statics = g.gather(m[m.statics.item_table], std::move(ids));
  return g.hcat({g.tile(user, n), dynamic, statics});
}

// ---- replay without gradients -----------------------------------------------------------

/// Bookkeeping that follows every applied interaction.
inline void mark_interaction(DynamicState& s, const InteractionEvent& ev) {
  const auto u = static_cast<std::size_t>(ev.user);
  const auto i = static_cast<std::size_t>(ev.item);
  s.last_time_user[u] = ev.timestamp;
  s.last_time_item[i] = ev.timestamp;
  if (ev.is_purchase()) s.last_purchase_time_user[u] = ev.timestamp;
  s.last_item_of_user[u] = ev.item;
  s.user_seen[u] = 1;
  s.item_seen[i] = 1;
}

inline void check_event_order(const DynamicState& s, const InteractionEvent& ev) {
  if (ev.user < 0 || ev.user >= s.n_users() || ev.item < 0 || ev.item >= s.n_items()) {
    throw ContractError("event user/item id outside the state");
  }
  if (ev.timestamp < s.last_time_user[static_cast<std::size_t>(ev.user)] ||
      ev.timestamp < s.last_time_item[static_cast<std::size_t>(ev.item)]) {
    throw ContractError("events must be applied in time order");
  }
}

/// Advances the state by one observed interaction with frozen parameters.
inline void apply_event(ModelParams& m, DynamicState& s, const InteractionEvent& ev,
                        const DeltaAnnotation& d, double inventory, bool resource_branch) {
  check_event_order(s, ev);
  Graph g;
  const NodeId hu = user_general_node(g, m, s, ev.user);
  const NodeId hi = item_node(g, m, s, ev.item);
  const NodeId v = g.input(Mat(ev.features));
  const auto out = mrrnn_step(g, m, hu, hi, d.delta_user, d.delta_item, v);
  if (ev.is_purchase() && resource_branch) {
    ResourceInputs in;
    in.limited_prev = user_limited_node(g, m, s, ev.user);
    in.user_general = out.user;
    in.item = out.item;
    in.user_static = lookup_static(g, m.set, m.statics.user_table, ev.user);
    in.item_static = lookup_static(g, m.set, m.statics.item_table, ev.item);
    in.delta_purchase = d.delta_purchase;
    in.features = v;
    in.inventory = inventory;
    s.user_limited.row(ev.user) = g.value(resource_step(g, m, in, ev.action)).col(0).transpose();
    s.user_purchased[static_cast<std::size_t>(ev.user)] = 1;
  }
  s.user_general.row(ev.user) = g.value(out.user).col(0).transpose();
  s.item.row(ev.item) = g.value(out.item).col(0).transpose();
  mark_interaction(s, ev);
}

}  // namespace imn
