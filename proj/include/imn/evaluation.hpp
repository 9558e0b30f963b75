#pragma once

// Joint ranking of the whole catalog, Recall@K / NDCG and the evaluation replay.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "imn/dataio.hpp"
#include "imn/model.hpp"
#include "imn/objectives.hpp"

namespace imn {

/// How candidates are scored at prediction time.
struct ScoringOptions {
  LossWeights weights;          ///< only alpha_m / alpha_n are read; normalized on use
  bool resource_branch = true;  ///< whether h_l enters the context
  bool cosine = false;          ///< 1 - cos replaces the L2 distance

  static ScoringOptions for_variant(Variant v, const LossWeights& base) {
    return {variant_weights(v, base), uses_resource_branch(v), uses_cosine(v)};
  }
};

/// Everything about a query that does not depend on the candidate.
struct QueryContext {
  Index user = 0;
  Vec context;         ///< c_t
  Vec predicted;       ///< j_hat
  Vec user_dynamic;    ///< user slot of the candidate representation
};

/// Builds c_t and j_hat for `user` at a query with the given normalized elapsed times.
inline QueryContext query_context(ModelParams& m, const DynamicState& s, Index user,
                                  double delta_general, double delta_limited,
                                  bool resource_branch) {
  Graph g;
  const Context c = build_context(g, m, s, user, delta_general, delta_limited, resource_branch);
  const NodeId j = predict_item(g, m, c.combined, c.user_static, c.last_item_dynamic,
                                c.last_item_static);
  return {user, g.vector(c.vector), g.vector(j), g.vector(c.general)};
}

inline QueryContext query_context(ModelParams& m, const DynamicState& s,
                                  const InteractionEvent& ev, const DeltaAnnotation& d,
                                  bool resource_branch) {
  return query_context(m, s, ev.user, d.delta_user, d.delta_purchase, resource_branch);
}

namespace detail {

inline double distance(const Vec& predicted, const Eigen::Ref<const Vec>& target, bool cosine) {
  if (!cosine) return (predicted - target).norm();
  const double na = predicted.norm(), nb = target.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - predicted.dot(target) / (na * nb);
}

}  // namespace detail

/// alpha_m * (-distance(j_hat, item static)) + alpha_n * log f1([h_u, h_item, item static], c).
/// Scores one candidate directly; score_all is the batched equivalent.
inline double fusion_score(const ModelParams& m, const DynamicState& s, Index item,
                           const QueryContext& q, const ScoringOptions& opt) {
  const LossWeights w = opt.weights.normalized();
  const Mat& statics = m[m.statics.item_table].value();
  const Vec target = statics.row(item).transpose();
  const Index d = m.dims.embedding;
  Vec x(3 * d);
  x << q.user_dynamic, item_dynamic_value(m, s, item).col(0), target;
  const double log_f1 = x.dot(m[m.bilinear].value() * q.context);
  return w.alpha_m * -detail::distance(q.predicted, target, opt.cosine) + w.alpha_n * log_f1;
}

/// Fusion scores of every catalog item.
inline Vec score_all(const ModelParams& m, const DynamicState& s, const QueryContext& q,
                     const ScoringOptions& opt) {
  const LossWeights w = opt.weights.normalized();
  const Index d = m.dims.embedding;
  const Index n = m.dims.items;
  const Mat& statics = m[m.statics.item_table].value();
  Vec scores = Vec::Zero(n);
  if (w.alpha_n > 0.0) {
    const Vec wc = m[m.bilinear].value() * q.context;
    const double user_part = q.user_dynamic.dot(wc.head(d));
    Mat dynamic = s.item;
    const Mat& init = m[m.initial.item].value();
    for (Index k = 0; k < n; ++k) {
      if (!s.item_seen[static_cast<std::size_t>(k)]) dynamic.row(k) = init.col(0).transpose();
    }
    const Vec logits = (dynamic * wc.segment(d, d) + statics * wc.tail(d)).array() + user_part;
    scores += w.alpha_n * logits;
  }
  if (w.alpha_m > 0.0) {
    for (Index k = 0; k < n; ++k) {
      scores(k) -= w.alpha_m * detail::distance(q.predicted, statics.row(k).transpose(), opt.cosine);
    }
  }
  return scores;
}

/// 1-based rank of `item`: higher scores first, equal scores ordered by ascending id.
inline Index rank_of(const Vec& scores, Index item) {
  const double target = scores(item);
  Index rank = 1;
  for (Index k = 0; k < scores.size(); ++k) {
    if (scores(k) > target || (scores(k) == target && k < item)) ++rank;
  }
  return rank;
}

/// Item ids by descending score, ties by ascending id.
inline std::vector<Index> ranking(const Vec& scores) {
  std::vector<Index> ids(static_cast<std::size_t>(scores.size()));
  std::iota(ids.begin(), ids.end(), Index{0});
  std::stable_sort(ids.begin(), ids.end(),
                   [&](Index a, Index b) { return scores(a) > scores(b); });
  return ids;
}

struct RankingResult {
  std::size_t event = 0;
  std::vector<Index> ranked;  ///< every catalog item, best first
  Index rank = 0;             ///< of the ground-truth item, 1-based
};

inline RankingResult predict_next(ModelParams& m, const DynamicState& s,
                                  const InteractionEvent& ev, const DeltaAnnotation& d,
                                  const ScoringOptions& opt, std::size_t event_index = 0) {
  const auto q = query_context(m, s, ev, d, opt.resource_branch);
  const Vec scores = score_all(m, s, q, opt);
  RankingResult r;
  r.event = event_index;
  r.ranked = ranking(scores);
  r.rank = rank_of(scores, ev.item);
  return r;
}

// ---- metrics --------------------------------------------------------------------------

inline double recall_at_k(std::span<const Index> ranks, Index k) {
  if (ranks.empty()) return 0.0;
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](Index r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

/// Mean of 1 / log2(1 + rank) over events; with k > 0 ranks beyond k contribute 0.
inline double ndcg(std::span<const Index> ranks, Index k = 0) {
  if (ranks.empty()) return 0.0;
  double s = 0.0;
  for (Index r : ranks) {
    if (r < 1) throw ContractError("ndcg: ranks are 1-based, got " + std::to_string(r));
    if (k <= 0 || r <= k) s += 1.0 / std::log2(1.0 + static_cast<double>(r));
  }
  return s / static_cast<double>(ranks.size());
}

struct MetricsReport {
  double recall10 = 0.0;
  double ndcg10 = 0.0;
  double recall20 = 0.0;
  double ndcg20 = 0.0;
  std::size_t events = 0;
  std::vector<Index> ranks;
};

inline MetricsReport metrics_from_ranks(std::vector<Index> ranks) {
  MetricsReport r;
  r.recall10 = recall_at_k(ranks, 10);
  r.ndcg10 = ndcg(ranks, 10);
  r.recall20 = recall_at_k(ranks, 20);
  r.ndcg20 = ndcg(ranks, 20);
  r.events = ranks.size();
  r.ranks = std::move(ranks);
  return r;
}

/// Ranks every event of `range` against the state as it stood just before the event,
/// then applies the event with frozen parameters.
inline MetricsReport evaluate_range(ModelParams& m, DynamicState& s, const PreparedLog& log,
                                    EventRange range, const ScoringOptions& opt) {
  std::vector<Index> ranks;
  ranks.reserve(range.size());
  const auto& events = log.events();
  for (std::size_t k = range.begin; k < range.end; ++k) {
    const auto q = query_context(m, s, events[k], log.deltas[k], opt.resource_branch);
    ranks.push_back(rank_of(score_all(m, s, q, opt), events[k].item));
    apply_event(m, s, events[k], log.deltas[k], log.inventory[k], opt.resource_branch);
  }
  return metrics_from_ranks(std::move(ranks));
}

/// Applies events with frozen parameters and no scoring.
inline void replay_range(ModelParams& m, DynamicState& s, const PreparedLog& log,
                         EventRange range, bool resource_branch) {
  for (std::size_t k = range.begin; k < range.end; ++k) {
    apply_event(m, s, log.events()[k], log.deltas[k], log.inventory[k], resource_branch);
  }
}

// ---- CSV reports ------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "variant,split,recall@10,ndcg@10,recall@20,ndcg@20,seed";

inline void write_metrics_row(std::ostream& os, std::string_view variant, std::string_view split,
                              const MetricsReport& r, std::uint64_t seed) {
  os << variant << ',' << split << ',' << detail::format_double(r.recall10) << ','
     << detail::format_double(r.ndcg10) << ',' << detail::format_double(r.recall20) << ','
     << detail::format_double(r.ndcg20) << ',' << seed << '\n';
}

struct PredictionRow {
  long long day = 0;
  double timestamp = 0.0;
  std::string user;
  std::string ground_truth;
  Index rank = 0;
  std::vector<std::string> top;
};

namespace detail {

inline std::string key_of(const std::vector<std::string>& keys, Index id) {
  return static_cast<std::size_t>(id) < keys.size() ? keys[static_cast<std::size_t>(id)]
                                                     : std::to_string(id);
}

}  // namespace detail

/// Top-k predictions for each event of `range`, replaying the state as it goes.
inline std::vector<PredictionRow> dump_predictions(ModelParams& m, DynamicState& s,
                                                   const PreparedLog& log, EventRange range,
                                                   Index top_k, const ScoringOptions& opt) {
  if (top_k <= 0) throw ContractError("dump_predictions: k must be positive");
  std::vector<PredictionRow> rows;
  const auto& meta = log.log.meta;
  for (std::size_t k = range.begin; k < range.end; ++k) {
    const auto& ev = log.events()[k];
    const auto r = predict_next(m, s, ev, log.deltas[k], opt, k);
    PredictionRow row;
    row.day = static_cast<long long>(std::floor(ev.timestamp / meta.day_length));
    row.timestamp = ev.timestamp;
    row.user = detail::key_of(meta.user_keys, ev.user);
    row.ground_truth = detail::key_of(meta.item_keys, ev.item);
    row.rank = r.rank;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(top_k), r.ranked.size());
    for (std::size_t j = 0; j < n; ++j) row.top.push_back(detail::key_of(meta.item_keys, r.ranked[j]));
    rows.push_back(std::move(row));
    apply_event(m, s, ev, log.deltas[k], log.inventory[k], opt.resource_branch);
  }
  return rows;
}

inline void write_predictions(std::ostream& os, std::span<const PredictionRow> rows) {
  os << "day,timestamp,user,ground_truth,rank,top_k\n";
  for (const auto& r : rows) {
    os << r.day << ',' << detail::format_double(r.timestamp) << ',' << r.user << ','
       << r.ground_truth << ',' << r.rank << ',' << detail::join(r.top, ' ') << '\n';
  }
}

}  // namespace imn
