#pragma once

// Loss terms and their weighted fusion, plus the variant presets used by the ablations.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "imn/diffgraph.hpp"
#include "imn/errors.hpp"

namespace imn {

struct LossWeights {
  double lambda_m = 1.0;  ///< distance to the next item's static embedding
  double lambda_n = 1.0;  ///< NCE
  double lambda_U = 0.1;  ///< user drift
  double lambda_I = 0.1;  ///< item drift
  double alpha_m = 0.9;   ///< ranking weight of the distance term
  double alpha_n = 0.1;   ///< ranking weight of the log density ratio

  void validate() const {
    for (double x : {lambda_m, lambda_n, lambda_U, lambda_I, alpha_m, alpha_n}) {
      if (!(x >= 0.0) || !std::isfinite(x)) {
        throw ContractError("loss weights must be finite and non-negative");
      }
    }
    if (alpha_m + alpha_n <= 0.0) throw ContractError("alpha_m + alpha_n must be positive");
  }

  /// Same weights with (alpha_m, alpha_n) rescaled to sum to one.
  LossWeights normalized() const {
    validate();
    LossWeights w = *this;
    const double s = alpha_m + alpha_n;
    w.alpha_m = alpha_m / s;
    w.alpha_n = alpha_n / s;
    return w;
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

enum class Variant : std::uint8_t { full, no_resource_branch, mse_only, nce_only, cosine };

inline constexpr Variant kAllVariants[] = {Variant::full, Variant::no_resource_branch,
                                           Variant::mse_only, Variant::nce_only, Variant::cosine};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_resource_branch: return "no_resource_branch";
    case Variant::mse_only: return "mse_only";
    case Variant::nce_only: return "nce_only";
    case Variant::cosine: return "cosine";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == s) return v;
  }
  throw ParseError("unknown variant '" + std::string(s) + "'");
}

inline bool uses_resource_branch(Variant v) { return v != Variant::no_resource_branch; }
inline bool uses_cosine(Variant v) { return v == Variant::cosine; }

/// Loss weights of a variant derived from the configured base weights. Ablations differ
/// only in weights so their numbers stay comparable.
inline LossWeights variant_weights(Variant v, LossWeights base) {
  switch (v) {
    case Variant::mse_only:
      base.lambda_n = 0.0;
      base.alpha_m = 1.0;
      base.alpha_n = 0.0;
      break;
    case Variant::nce_only:
      base.lambda_m = 0.0;
      base.alpha_m = 0.0;
      base.alpha_n = 1.0;
      break;
    default:
      break;
  }
  return base.normalized();
}

/// ||j_hat - j_true||_2 for one event (not squared; zero subgradient at zero residual).
inline NodeId mse_loss(Graph& g, NodeId j_hat, NodeId j_true) {
  return g.l2norm(g.sub(j_hat, j_true));
}

/// -log softmax(logits)[0]: the positive sits in row 0 of the n x 1 logit column.
inline NodeId nce_loss(Graph& g, NodeId logits, bool training = true) {
  const Mat& v = g.value(logits);
  if (v.cols() != 1) {
    throw ShapeError("nce_loss: logits node " + std::to_string(logits.index) + " is " +
                     shape_string(v) + ", expected a column");
  }
  if (training && v.rows() < 2) {
    throw ContractError("nce_loss: training needs at least one negative, got N = " +
                        std::to_string(v.rows()));
  }
  return g.sub(g.logsumexp(logits), g.pick(logits, 0));
}

/// ||h_new - h_old||_2: how far an entity moved in one update.
inline NodeId drift_regularizer(Graph& g, NodeId h_new, NodeId h_old) {
  return g.l2norm(g.sub(h_new, h_old));
}

namespace detail {

inline std::shared_ptr<const CustomRule> cosine_distance_rule(Index half) {
  auto rule = std::make_shared<CustomRule>();
  rule->name = "cosine_distance";
  rule->forward = [half](const Mat& x) {
    const auto a = x.topRows(half);
    const auto b = x.bottomRows(half);
    const double na = a.norm(), nb = b.norm();
    Mat out(1, 1);
    out(0, 0) = (na == 0.0 || nb == 0.0) ? 1.0 : 1.0 - a.col(0).dot(b.col(0)) / (na * nb);
    return out;
  };
  rule->backward = [half](const Mat& x, const Mat&, const Mat& g) {
    Mat out = Mat::Zero(x.rows(), 1);
    const Mat a = x.topRows(half);
    const Mat b = x.bottomRows(half);
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return out;
    const double cosv = a.col(0).dot(b.col(0)) / (na * nb);
    out.topRows(half) = -g(0, 0) * (b / (na * nb) - cosv * a / (na * na));
    out.bottomRows(half) = -g(0, 0) * (a / (na * nb) - cosv * b / (nb * nb));
    return out;
  };
  return rule;
}

}  // namespace detail

/// 1 - cos(j_hat, j_true); a zero-length operand counts as orthogonal (loss 1, no gradient).
inline NodeId cosine_loss(Graph& g, NodeId j_hat, NodeId j_true) {
  const Mat& a = g.value(j_hat);
  const Mat& b = g.value(j_true);
  if (a.cols() != 1 || b.cols() != 1 || a.rows() != b.rows()) {
    throw ShapeError("cosine_loss: nodes " + std::to_string(j_hat.index) + " and " +
                     std::to_string(j_true.index) + " are " + shape_string(a) + " and " +
                     shape_string(b));
  }
  return g.custom(g.concat({j_hat, j_true}), detail::cosine_distance_rule(a.rows()));
}

/// Per-batch loss components, each already summed over the batch's events.
struct LossTerms {
  NodeId mse;
  NodeId nce;
  NodeId drift_user;
  NodeId drift_item;
};

inline NodeId fusion_loss(Graph& g, const LossTerms& t, const LossWeights& w) {
  return g.add(g.add(g.scale(t.mse, w.lambda_m), g.scale(t.nce, w.lambda_n)),
               g.add(g.scale(t.drift_user, w.lambda_U), g.scale(t.drift_item, w.lambda_I)));
}

inline double fusion_loss(double mse, double nce, double drift_user, double drift_item,
                          const LossWeights& w) {
  return w.lambda_m * mse + w.lambda_n * nce + w.lambda_U * drift_user + w.lambda_I * drift_item;
}

/// Sum of scalar nodes; an empty span gives the constant 0.
inline NodeId sum_scalars(Graph& g, std::span<const NodeId> terms) {
  if (terms.empty()) return g.constant(0.0);
  NodeId acc = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) acc = g.add(acc, terms[k]);
  return acc;
}

}  // namespace imn
