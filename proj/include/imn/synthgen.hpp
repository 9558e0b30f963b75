#pragma once

// Seeded simulator of a marketplace where users click and occasionally buy, limited by
// their budgets (with periodic income) and by per-item stock (with periodic restocks).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "imn/dataio.hpp"
#include "imn/errors.hpp"

namespace imn {

struct MarketConfig {
  Index n_users = 2000;
  Index n_items = 500;
  std::size_t n_events = 100000;
  Index latent_dim = 8;            ///< preference space; features are latent_dim + 1 wide
  double horizon_days = 60.0;      ///< expected span of the log
  double day_length = 86400.0;
  double activity_sigma = 0.5;     ///< log-normal spread of per-user event rates
  double price_log_mean = 4.0;
  double price_log_sigma = 1.0;
  double budget_mean = 40.0;       ///< median initial budget
  double budget_sigma = 0.5;
  double income_amount = 15.0;     ///< paid to every user once per income period
  double income_period_days = 7.0;
  double stock_mean = 3.0;         ///< mean per-item capacity (at least 1)
  double restock_period_days = 7.0;
  double propensity = 0.027;       ///< chance a feasible click turns into a purchase
  double preference_weight = 2.0;
  double affordability_weight = 6.0;  ///< per log-unit of price above budget
  double similarity_weight = 1.0;
  double popularity_sigma = 0.5;
  double feature_noise = 0.1;
  std::uint64_t seed = 1;

  Index feature_dim() const noexcept { return latent_dim + 1; }

  void validate() const {
    if (n_users <= 0 || n_items <= 0 || n_events == 0 || latent_dim <= 0) {
      throw ContractError("market config: user, item, event and latent counts must be positive");
    }
    for (double x : {horizon_days, day_length, income_period_days, restock_period_days}) {
      if (!(x > 0.0)) throw ContractError("market config: time spans must be positive");
    }
    for (double x : {activity_sigma, price_log_sigma, budget_sigma, stock_mean, feature_noise,
                     budget_mean, income_amount, popularity_sigma}) {
      if (!(x >= 0.0)) throw ContractError("market config: scales must be non-negative");
    }
    if (!(propensity >= 0.0 && propensity <= 1.0)) {
      throw ContractError("market config: propensity must lie in [0, 1]");
    }
  }
};

struct PurchaseRecord {
  std::size_t event = 0;
  Index user = 0;
  Index item = 0;
  double price = 0.0;
  double budget_before = 0.0;
};

/// Ground truth the log itself does not carry, kept for checking the simulator.
struct MarketTrace {
  std::vector<double> prices;
  std::vector<double> initial_budgets;
  std::vector<double> income_phase;  ///< first payday of each user, in days
  std::vector<Index> capacity;
  std::vector<double> restock_times;  ///< seconds
  std::vector<PurchaseRecord> purchases;
  std::vector<std::string> warnings;
};

struct MarketResult {
  InteractionLog log;
  MarketTrace trace;
};

/// Spend that a user could have covered by time t: initial budget plus paydays so far.
inline double budget_cap(const MarketConfig& c, const MarketTrace& tr, Index user, double t) {
  const double period = c.income_period_days * c.day_length;
  const double first = tr.income_phase[static_cast<std::size_t>(user)] * c.day_length;
  const double paid = t < first ? 0.0 : std::floor((t - first) / period) + 1.0;
  return tr.initial_budgets[static_cast<std::size_t>(user)] + paid * c.income_amount;
}

inline MarketResult generate_market(const MarketConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto U = static_cast<std::size_t>(c.n_users);
  const auto I = static_cast<std::size_t>(c.n_items);
  const Index p = c.latent_dim;
  const double spread = 1.0 / std::sqrt(static_cast<double>(p));

  MarketResult out;
  MarketTrace& tr = out.trace;

  Mat users(c.n_users, p), items(c.n_items, p);
  for (Index u = 0; u < c.n_users; ++u) {
    for (Index k = 0; k < p; ++k) users(u, k) = normal(rng);
  }
  for (Index i = 0; i < c.n_items; ++i) {
    for (Index k = 0; k < p; ++k) items(i, k) = spread * normal(rng);
  }
  std::vector<double> popularity(I), activity(U);
  for (auto& b : popularity) b = c.popularity_sigma * normal(rng);
  tr.prices.resize(I);
  for (auto& x : tr.prices) x = std::exp(c.price_log_mean + c.price_log_sigma * normal(rng));
  tr.capacity.resize(I);
  std::poisson_distribution<Index> extra(std::max(c.stock_mean - 1.0, 0.0));
  for (auto& x : tr.capacity) x = 1 + (c.stock_mean > 1.0 ? extra(rng) : 0);
  tr.initial_budgets.resize(U);
  for (auto& x : tr.initial_budgets) x = c.budget_mean * std::exp(c.budget_sigma * normal(rng));
  tr.income_phase.resize(U);
  for (auto& x : tr.income_phase) x = unit(rng) * c.income_period_days;
  for (auto& a : activity) a = std::exp(c.activity_sigma * normal(rng));
  std::discrete_distribution<std::size_t> pick_user(activity.begin(), activity.end());

  // A log with no feasible purchase at all is still produced, as clicks only.
  const double min_price = *std::min_element(tr.prices.begin(), tr.prices.end());
  const double max_budget =
      *std::max_element(tr.initial_budgets.begin(), tr.initial_budgets.end()) +
      c.income_amount * (std::ceil(c.horizon_days / c.income_period_days) + 1.0);
  const bool purchases_possible = max_budget >= min_price && c.propensity > 0.0;
  if (!purchases_possible) {
    tr.warnings.push_back("no user can ever afford any item; the log holds clicks only");
  }

  const double event_rate = static_cast<double>(c.n_events) / (c.horizon_days * c.day_length);
  std::exponential_distribution<double> gap(event_rate);
  const double price_mu = c.price_log_mean;
  const double price_sd = c.price_log_sigma > 0.0 ? c.price_log_sigma : 1.0;

  std::vector<double> budget = tr.initial_budgets;
  std::vector<double> paid_until(U, 0.0);  // income periods already credited
  std::vector<Index> stock = tr.capacity;
  std::vector<Index> last_item(U, -1);
  const double restock_period = c.restock_period_days * c.day_length;
  double next_restock = restock_period;
  std::vector<double> on_sale;
  auto in_stock = [&] {
    return static_cast<double>(std::count_if(stock.begin(), stock.end(), [](Index s) { return s > 0; }));
  };

  auto& meta = out.log.meta;
  meta.n_users = c.n_users;
  meta.n_items = c.n_items;
  meta.feature_dim = c.feature_dim();
  meta.day_length = c.day_length;
  auto& events = out.log.events;
  events.reserve(c.n_events);

  const Mat affinity = users * items.transpose();
  std::vector<double> weights(I);
  double t = 0.0;
  for (std::size_t e = 0; e < c.n_events; ++e) {
    t += gap(rng);
    while (t >= next_restock) {
      stock = tr.capacity;
      tr.restock_times.push_back(next_restock);
      next_restock += restock_period;
    }
    while (static_cast<double>(on_sale.size()) * c.day_length <= t) on_sale.push_back(in_stock());

    const std::size_t u = pick_user(rng);
    const double cap = budget_cap(c, tr, static_cast<Index>(u), t);
    const double credited = cap - tr.initial_budgets[u];
    budget[u] += credited - paid_until[u];
    paid_until[u] = credited;

    // Clicks go to in-stock items; if everything is sold out any item can be browsed.
    const bool any_stock = std::any_of(stock.begin(), stock.end(), [](Index s) { return s > 0; });
    double top = -1e300;
    for (std::size_t i = 0; i < I; ++i) {
      if (any_stock && stock[i] <= 0) {
        weights[i] = -1e300;
        continue;
      }
      // Log-scale gap between price and budget: a drained budget tilts clicks to cheap items.
      const double shortfall = std::max(0.0, std::log(tr.prices[i] / std::max(budget[u], 1.0)));
      double s = c.preference_weight * affinity(static_cast<Index>(u), static_cast<Index>(i)) +
                 popularity[i] - c.affordability_weight * shortfall;
      if (last_item[u] >= 0) {
        s += c.similarity_weight * std::sqrt(static_cast<double>(p)) *
             items.row(last_item[u]).dot(items.row(static_cast<Index>(i)));
      }
      weights[i] = s;
      top = std::max(top, s);
    }
    for (auto& w : weights) w = w <= -1e299 ? 0.0 : std::exp(w - top);
    std::discrete_distribution<std::size_t> pick_item(weights.begin(), weights.end());
    const std::size_t i = pick_item(rng);

    Action action = Action::click;
    const bool feasible = tr.prices[i] <= budget[u] && stock[i] > 0;
    if (purchases_possible && feasible && unit(rng) < c.propensity) {
      action = Action::purchase;
      tr.purchases.push_back({e, static_cast<Index>(u), static_cast<Index>(i), tr.prices[i], budget[u]});
      budget[u] -= tr.prices[i];
      --stock[i];
    }

    Vec v(c.feature_dim());
    for (Index k = 0; k < p; ++k) {
      v(k) = items(static_cast<Index>(i), k) / spread + c.feature_noise * normal(rng);
    }
    v(p) = (std::log(tr.prices[i]) - price_mu) / price_sd + c.feature_noise * normal(rng);
    events.push_back({static_cast<Index>(u), static_cast<Index>(i), t, action, std::move(v)});
    last_item[u] = static_cast<Index>(i);
  }
  meta.on_sale_counts = std::move(on_sale);
  return out;
}

inline double purchase_ratio(const InteractionLog& log) {
  if (log.events.empty()) return 0.0;
  const auto n = std::count_if(log.events.begin(), log.events.end(),
                               [](const InteractionEvent& e) { return e.is_purchase(); });
  return static_cast<double>(n) / static_cast<double>(log.events.size());
}

}  // namespace imn
