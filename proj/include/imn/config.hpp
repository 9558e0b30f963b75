#pragma once

// Flat `key = value` run configuration covering the market generator, training, loss
// weights, ablation runs and file paths. Unknown keys are errors.

#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "imn/dataio.hpp"
#include "imn/errors.hpp"
#include "imn/synthgen.hpp"
#include "imn/training.hpp"

namespace imn {

struct RunConfig {
  std::uint64_t seed = 1;  ///< drives both the market and training
  MarketConfig market;
  TrainConfig train;
  std::vector<Variant> ablation_variants{Variant::full, Variant::no_resource_branch,
                                         Variant::mse_only};
  std::vector<std::uint64_t> ablation_seeds{1, 2, 3, 4, 5};
  Index dump_k = 10;
  double gradcheck_step = 1e-6;
  std::string data_path;        ///< interaction CSV (metadata sidecar beside it)
  std::string checkpoint_path;
  std::string report_path;      ///< per-epoch CSV written by train
  std::string metrics_path;
  std::string predictions_path;

  MarketConfig market_config() const {
    MarketConfig m = market;
    m.seed = seed;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  void validate() const {
    market_config().validate();
    train_config().validate();
    if (ablation_variants.empty()) throw ContractError("ablation.variants must not be empty");
    if (ablation_seeds.empty()) throw ContractError("ablation.seeds must not be empty");
    if (dump_k <= 0) throw ContractError("dump.k must be positive");
    if (!(gradcheck_step > 0.0 && gradcheck_step <= 1e-2)) {
      throw ContractError("gradcheck.step must lie in (0, 1e-2]");
    }
  }
};

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

template <class Ref>
ConfigKey real_key(std::string name, std::string doc, Ref ref) {
  return {std::move(name), std::move(doc),
          [ref](RunConfig& c, std::string_view v) {
            const auto x = parse_double(v);
            if (!x) throw ParseError("expected a number, got '" + std::string(v) + "'");
            ref(c) = *x;
          },
          [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
ConfigKey int_key(std::string name, std::string doc, Ref ref) {
  return {std::move(name), std::move(doc),
          [ref](RunConfig& c, std::string_view v) {
            const auto x = parse_int(v);
            if (!x || *x < 0) {
              throw ParseError("expected a non-negative integer, got '" + std::string(v) + "'");
            }
            using T = std::remove_reference_t<decltype(ref(c))>;
            ref(c) = static_cast<T>(*x);
          },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
ConfigKey text_key(std::string name, std::string doc, Ref ref) {
  return {std::move(name), std::move(doc),
          [ref](RunConfig& c, std::string_view v) { ref(c) = std::string(trim(v)); },
          [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); }};
}

}  // namespace detail

/// Every accepted key, in the order write_config emits them.
inline const std::vector<ConfigKey>& config_schema() {
  using detail::int_key;
  using detail::real_key;
  using detail::text_key;
  using detail::join;
  using detail::parse_int;
  using detail::split_list;
  using detail::trim;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(int_key("seed", "seed of the market and of training",
                        [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
#define IMN_MARKET_INT(field, doc) \
  k.push_back(int_key("market." #field, doc, [](RunConfig& c) -> auto& { return c.market.field; }))
#define IMN_MARKET_REAL(field, doc) \
  k.push_back(real_key("market." #field, doc, [](RunConfig& c) -> double& { return c.market.field; }))
    IMN_MARKET_INT(n_users, "number of users");
    IMN_MARKET_INT(n_items, "number of items");
    IMN_MARKET_INT(n_events, "number of interactions");
    IMN_MARKET_INT(latent_dim, "preference dimension; features have one more column");
    IMN_MARKET_REAL(horizon_days, "expected span of the log in days");
    IMN_MARKET_REAL(day_length, "seconds per day");
    IMN_MARKET_REAL(activity_sigma, "log-normal spread of user activity");
    IMN_MARKET_REAL(price_log_mean, "mean log price");
    IMN_MARKET_REAL(price_log_sigma, "spread of log prices");
    IMN_MARKET_REAL(budget_mean, "median initial budget");
    IMN_MARKET_REAL(budget_sigma, "log-normal spread of initial budgets");
    IMN_MARKET_REAL(income_amount, "income per period");
    IMN_MARKET_REAL(income_period_days, "days between paydays");
    IMN_MARKET_REAL(stock_mean, "mean stock per item");
    IMN_MARKET_REAL(restock_period_days, "days between restocks");
    IMN_MARKET_REAL(propensity, "chance a feasible click becomes a purchase");
    IMN_MARKET_REAL(preference_weight, "weight of user-item affinity in clicks");
    IMN_MARKET_REAL(affordability_weight, "click penalty per log-unit of price above budget");
    IMN_MARKET_REAL(similarity_weight, "weight of similarity to the last item");
    IMN_MARKET_REAL(popularity_sigma, "spread of item popularity");
    IMN_MARKET_REAL(feature_noise, "noise added to item features");
#undef IMN_MARKET_INT
#undef IMN_MARKET_REAL
    k.push_back(real_key("train.learning_rate", "Adam step size",
                         [](RunConfig& c) -> double& { return c.train.learning_rate; }));
    k.push_back(int_key("train.batch_cap", "largest t-batch",
                        [](RunConfig& c) -> std::size_t& { return c.train.batch_cap; }));
    k.push_back(int_key("train.epochs", "training epochs",
                        [](RunConfig& c) -> int& { return c.train.epochs; }));
    k.push_back(int_key("train.negatives", "N: the positive plus N - 1 sampled items",
                        [](RunConfig& c) -> Index& { return c.train.negatives; }));
    k.push_back(int_key("train.embedding_dim", "embedding width",
                        [](RunConfig& c) -> Index& { return c.train.embedding_dim; }));
    k.push_back({"train.variant", "full, no_resource_branch, mse_only, nce_only or cosine",
                 [](RunConfig& c, std::string_view v) { c.train.variant = parse_variant(trim(v)); },
                 [](const RunConfig& c) { return std::string(variant_name(c.train.variant)); }});
    k.push_back({"train.combine", "sum or concat",
                 [](RunConfig& c, std::string_view v) {
                   v = trim(v);
                   if (v == "sum") c.train.combine = CombineMode::sum;
                   else if (v == "concat") c.train.combine = CombineMode::concat;
                   else throw ParseError("expected sum or concat, got '" + std::string(v) + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.train.combine == CombineMode::sum ? "sum" : "concat");
                 }});
#define IMN_LOSS(field, doc) \
  k.push_back(real_key("loss." #field, doc, [](RunConfig& c) -> double& { return c.train.weights.field; }))
    IMN_LOSS(lambda_m, "weight of the distance loss");
    IMN_LOSS(lambda_n, "weight of the NCE loss");
    IMN_LOSS(lambda_U, "weight of user drift");
    IMN_LOSS(lambda_I, "weight of item drift");
    IMN_LOSS(alpha_m, "ranking weight of the distance term");
    IMN_LOSS(alpha_n, "ranking weight of the log density ratio");
#undef IMN_LOSS
    k.push_back({"ablation.variants", "comma-separated variants",
                 [](RunConfig& c, std::string_view v) {
                   c.ablation_variants.clear();
                   for (const auto& s : split_list(v)) c.ablation_variants.push_back(parse_variant(s));
                 },
                 [](const RunConfig& c) {
                   std::vector<std::string> names;
                   for (Variant x : c.ablation_variants) names.emplace_back(variant_name(x));
                   return join(names);
                 }});
    k.push_back({"ablation.seeds", "comma-separated seeds",
                 [](RunConfig& c, std::string_view v) {
                   c.ablation_seeds.clear();
                   for (const auto& s : split_list(v)) {
                     const auto x = parse_int(s);
                     if (!x || *x < 0) throw ParseError("bad seed '" + s + "'");
                     c.ablation_seeds.push_back(static_cast<std::uint64_t>(*x));
                   }
                 },
                 [](const RunConfig& c) {
                   std::vector<std::string> xs;
                   for (auto s : c.ablation_seeds) xs.push_back(std::to_string(s));
                   return join(xs);
                 }});
    k.push_back(int_key("dump.k", "predictions listed per event",
                        [](RunConfig& c) -> Index& { return c.dump_k; }));
    k.push_back(real_key("gradcheck.step", "finite-difference step",
                         [](RunConfig& c) -> double& { return c.gradcheck_step; }));
    k.push_back(text_key("paths.data", "interaction CSV",
                         [](RunConfig& c) -> std::string& { return c.data_path; }));
    k.push_back(text_key("paths.checkpoint", "checkpoint file",
                         [](RunConfig& c) -> std::string& { return c.checkpoint_path; }));
    k.push_back(text_key("paths.report", "per-epoch CSV",
                         [](RunConfig& c) -> std::string& { return c.report_path; }));
    k.push_back(text_key("paths.metrics", "metrics CSV",
                         [](RunConfig& c) -> std::string& { return c.metrics_path; }));
    k.push_back(text_key("paths.predictions", "prediction dump CSV",
                         [](RunConfig& c) -> std::string& { return c.predictions_path; }));
    return k;
  }();
  return keys;
}

/// Applies one setting; the error names the key.
inline void apply_setting(RunConfig& c, std::string_view key, std::string_view value) {
  key = detail::trim(key);
  for (const auto& k : config_schema()) {
    if (k.name != key) continue;
    try {
      k.set(c, value);
    } catch (const Error& e) {
      throw ParseError("config key '" + k.name + "': " + e.what());
    }
    return;
  }
  throw ParseError("unknown config key '" + std::string(key) + "'");
}

/// `key=value` as given on the command line.
inline void apply_override(RunConfig& c, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ParseError("override '" + std::string(assignment) + "' is not key=value");
  }
  apply_setting(c, assignment.substr(0, eq), assignment.substr(eq + 1));
}

/// Reads `key = value` lines on top of `base`; '#' starts a comment.
inline RunConfig parse_config(std::istream& in, const std::string& source, RunConfig base = {}) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string_view v = line;
    if (const auto hash = v.find('#'); hash != std::string_view::npos) v = v.substr(0, hash);
    if (detail::trim(v).empty()) continue;
    const auto eq = v.find('=');
    try {
      if (eq == std::string_view::npos) throw ParseError("expected key = value");
      apply_setting(base, v.substr(0, eq), v.substr(eq + 1));
    } catch (const ParseError& e) {
      throw ParseError(source + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file '" + path + "'");
  return parse_config(in, path);
}

/// Every key with its current value and a one-line description.
inline void write_config(std::ostream& os, const RunConfig& c) {
  for (const auto& k : config_schema()) {
    os << "# " << k.doc << '\n' << k.name << " = " << k.get(c) << '\n';
  }
}

}  // namespace imn
