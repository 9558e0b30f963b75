#pragma once

// Trains several variants on the same data and seeds and tabulates their test metrics.

#include <algorithm>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "imn/training.hpp"

namespace imn {

struct AblationRow {
  Variant variant = Variant::full;
  std::uint64_t seed = 0;
  SplitMetrics metrics;
};

using AblationProgress = std::function<void(const AblationRow&)>;

/// One training run per (variant, seed); everything but the variant and seed comes from
/// `base`. Rows are ordered variant-major in the order given.
inline std::vector<AblationRow> run_ablation(const TrainConfig& base,
                                             std::span<const Variant> variants,
                                             std::span<const std::uint64_t> seeds,
                                             const PreparedLog& log,
                                             const AblationProgress& progress = {}) {
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    for (std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.variant = v;
      c.seed = seed;
      AblationRow row{v, seed, evaluate_checkpoint(train(c, log), log)};
      if (progress) progress(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

/// Metrics CSV with one test-split row per run.
inline void write_ablation_table(std::ostream& os, std::span<const AblationRow> rows) {
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) write_metrics_row(os, variant_name(r.variant), "test", r.metrics.test, r.seed);
}

/// Median test NDCG@10 of one variant over its seeds (mean of the middle two when even).
inline double median_test_ndcg10(std::span<const AblationRow> rows, Variant v) {
  std::vector<double> xs;
  for (const auto& r : rows) {
    if (r.variant == v) xs.push_back(r.metrics.test.ndcg10);
  }
  if (xs.empty()) throw ContractError("median_test_ndcg10: no runs of " + std::string(variant_name(v)));
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace imn
