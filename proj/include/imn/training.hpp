#pragma once

// Adam over t-batches, per-epoch validation with best-checkpoint selection, and the
// binary checkpoint format used for resuming and evaluation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "imn/dataio.hpp"
#include "imn/evaluation.hpp"
#include "imn/model.hpp"
#include "imn/objectives.hpp"

namespace imn {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_cap = 256;
  int epochs = 50;
  Index negatives = 128;  ///< N: one positive plus N - 1 sampled items
  Index embedding_dim = kDefaultEmbeddingDim;
  std::uint64_t seed = 0;
  LossWeights weights;
  Variant variant = Variant::full;
  CombineMode combine = CombineMode::sum;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ContractError("learning_rate must be positive");
    }
    if (batch_cap == 0) throw ContractError("batch_cap must be positive");
    if (epochs < 0) throw ContractError("epochs must be non-negative");
    if (negatives < 2) throw ContractError("negatives must be at least 2");
    if (embedding_dim <= 0) throw ContractError("embedding_dim must be positive");
    weights.validate();
  }

  LossWeights effective_weights() const { return variant_weights(variant, weights); }
  ScoringOptions scoring() const { return ScoringOptions::for_variant(variant, weights); }

  ModelDims dims_for(const PreparedLog& log) const {
    ModelDims d;
    d.users = log.n_users();
    d.items = log.n_items();
    d.features = log.feature_dim();
    d.embedding = embedding_dim;
    d.combine = combine;
    return d;
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---- Adam -------------------------------------------------------------------------------

namespace detail {

inline bool same_values(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

inline bool same_values(const std::vector<Mat>& a, const std::vector<Mat>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!same_values(a[k], b[k])) return false;
  }
  return true;
}

}  // namespace detail

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Mat> m;
  std::vector<Mat> v;

  friend bool operator==(const AdamState& a, const AdamState& b) {
    return a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.epsilon == b.epsilon &&
           a.step == b.step && detail::same_values(a.m, b.m) && detail::same_values(a.v, b.v);
  }
};

inline AdamState make_adam_state(const ParamSet& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(Mat::Zero(p.rows(), p.cols()));
    s.v.push_back(Mat::Zero(p.rows(), p.cols()));
  }
  return s;
}

/// One bias-corrected Adam update of every trainable parameter from its gradient buffer.
inline void adam_step(ParamSet& params, AdamState& s, double lr) {
  if (s.m.size() != params.size() || s.v.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match the parameter set");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  std::size_t k = 0;
  for (auto& p : params) {
    Mat& m = s.m[k];
    Mat& v = s.v[k];
    ++k;
    if (!p.requires_grad()) continue;
    if (m.rows() != p.rows() || m.cols() != p.cols()) {
      throw ShapeError("adam_step: moment shape differs from '" + p.name() + "'");
    }
    const auto g = p.grad().array();
    m.array() = s.beta1 * m.array() + (1.0 - s.beta1) * g;
    v.array() = s.beta2 * v.array() + (1.0 - s.beta2) * g.square();
    p.values().array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + s.epsilon);
  }
}

// ---- per-event loss ---------------------------------------------------------------------

/// Inputs of the update that produced an entity's current embedding. Re-running that one
/// update inside the next graph lets the recurrent weights receive gradient from the
/// losses that read the embedding; anything older stays detached.
struct UpdateRecord {
  bool valid = false;
  Mat self_prev;
  Mat other_prev;
  double delta = 0.0;
  Mat features;
};

struct LimitedRecord {
  bool valid = false;
  Mat limited_prev;
  Mat general_after;
  Mat item_after;
  Index item = -1;
  double delta = 0.0;
  Mat features;
  double inventory = 1.0;
};

struct RecurrenceCache {
  std::vector<UpdateRecord> user;
  std::vector<UpdateRecord> item;
  std::vector<LimitedRecord> limited;

  RecurrenceCache() = default;
  RecurrenceCache(Index users, Index items)
      : user(static_cast<std::size_t>(users)),
        item(static_cast<std::size_t>(items)),
        limited(static_cast<std::size_t>(users)) {}
};

inline NodeId current_user_general(Graph& g, ModelParams& m, const DynamicState& s,
                                   const RecurrenceCache& c, Index user) {
  const auto& r = c.user[static_cast<std::size_t>(user)];
  if (!r.valid) return user_general_node(g, m, s, user);
  return user_rnn_update(g, m, g.input(r.self_prev), g.input(r.other_prev), r.delta,
                         g.input(r.features));
}

inline NodeId current_item(Graph& g, ModelParams& m, const DynamicState& s,
                           const RecurrenceCache& c, Index item) {
  const auto& r = c.item[static_cast<std::size_t>(item)];
  if (!r.valid) return item_node(g, m, s, item);
  return item_rnn_update(g, m, g.input(r.self_prev), g.input(r.other_prev), r.delta,
                         g.input(r.features));
}

inline NodeId current_user_limited(Graph& g, ModelParams& m, const DynamicState& s,
                                   const RecurrenceCache& c, Index user) {
  const auto& r = c.limited[static_cast<std::size_t>(user)];
  if (!r.valid) return user_limited_node(g, m, s, user);
  ResourceInputs in;
  in.limited_prev = g.input(r.limited_prev);
  in.user_general = g.input(r.general_after);
  in.item = g.input(r.item_after);
  in.user_static = lookup_static(g, m.set, m.statics.user_table, user);
  in.item_static = lookup_static(g, m.set, m.statics.item_table, r.item);
  in.delta_purchase = r.delta;
  in.features = g.input(r.features);
  in.inventory = r.inventory;
  return resource_step(g, m, in, Action::purchase);
}

/// Nodes of one event's contribution to the fusion loss.
struct EventGraph {
  NodeId loss;
  NodeId general_prev;
  NodeId item_prev;
  NodeId general_new;
  NodeId item_new;
  std::optional<NodeId> limited_prev;
  std::optional<NodeId> limited_new;
  NodeId features;
  std::optional<NodeId> mse;
  std::optional<NodeId> nce;
  NodeId drift_user;
  NodeId drift_item;
};

struct EventInputs {
  const InteractionEvent* event = nullptr;
  DeltaAnnotation delta;
  double inventory = 1.0;
};

/// Builds the fusion loss of one event on `g`, reading every other entity from `s`.
/// Terms with zero weight are left out of the graph.
inline EventGraph add_event_loss(Graph& g, ModelParams& m, const DynamicState& s,
                                 const RecurrenceCache& cache, const EventInputs& in,
                                 const LossWeights& w, Variant variant, Index negatives,
                                 std::mt19937_64& rng) {
  const InteractionEvent& ev = *in.event;
  const DeltaAnnotation& d = in.delta;
  check_event_order(s, ev);
  const bool branch = uses_resource_branch(variant);
  EventGraph eg;
  eg.general_prev = current_user_general(g, m, s, cache, ev.user);
  eg.item_prev = current_item(g, m, s, cache, ev.item);
  if (branch) eg.limited_prev = current_user_limited(g, m, s, cache, ev.user);

  ContextInputs ci;
  ci.general = eg.general_prev;
  ci.limited = eg.limited_prev;
  ci.delta_general = d.delta_user;
  ci.delta_limited = d.delta_purchase;
  ci.user_static = lookup_static(g, m.set, m.statics.user_table, ev.user);
  const Index last = s.last_item_of_user[static_cast<std::size_t>(ev.user)];
  if (last == ev.item) {
    ci.last_item_dynamic = eg.item_prev;
  } else if (last >= 0) {
    ci.last_item_dynamic = g.input(item_dynamic_value(m, s, last));
  } else {
    ci.last_item_dynamic = param_node(g, m, m.initial.item);
  }
  ci.last_item_static = last >= 0 ? lookup_static(g, m.set, m.statics.item_table, last)
                                  : g.input(Mat(Mat::Zero(m.dims.embedding, 1)));
  const Context ctx = make_context(g, m, ci);

  eg.features = g.input(Mat(ev.features));
  const auto out = mrrnn_step(g, m, eg.general_prev, eg.item_prev, d.delta_user, d.delta_item,
                              eg.features);
  eg.general_new = out.user;
  eg.item_new = out.item;
  if (branch && ev.is_purchase()) {
    ResourceInputs ri;
    ri.limited_prev = *eg.limited_prev;
    ri.user_general = out.user;
    ri.item = out.item;
    ri.user_static = ctx.user_static;
    ri.item_static = lookup_static(g, m.set, m.statics.item_table, ev.item);
    ri.delta_purchase = d.delta_purchase;
    ri.features = eg.features;
    ri.inventory = in.inventory;
    eg.limited_new = resource_step(g, m, ri, ev.action);
  }

  eg.drift_user = drift_regularizer(g, out.user, eg.general_prev);
  eg.drift_item = drift_regularizer(g, out.item, eg.item_prev);
  if (w.lambda_m > 0.0) {
    const NodeId j = predict_item(g, m, ctx.combined, ctx.user_static, ctx.last_item_dynamic,
                                  ctx.last_item_static);
    const NodeId target =
        g.input(Mat(m[m.statics.item_table].value().row(ev.item).transpose()));
    eg.mse = uses_cosine(variant) ? cosine_loss(g, j, target) : mse_loss(g, j, target);
  }
  if (w.lambda_n > 0.0) {
    const Index count = std::min<Index>(negatives - 1, m.dims.items - 1);
    const auto neg = sample_negatives(m.dims.items, ev.item, count, rng);
    const NodeId pn = assemble_samples(g, m, s, out.user, ev.item, eg.item_prev, neg);
    eg.nce = nce_loss(g, log_density_ratio(g, m, pn, ctx.vector), true);
  }
  const NodeId zero = g.constant(0.0);
  eg.loss = fusion_loss(g, {eg.mse.value_or(zero), eg.nce.value_or(zero), eg.drift_user,
                            eg.drift_item}, w);
  return eg;
}

/// Deterministic generator for one event's negatives.
inline std::mt19937_64 event_rng(std::uint64_t seed, int epoch, std::size_t event) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return std::mt19937_64(
      mix(mix(mix(seed) ^ static_cast<std::uint64_t>(epoch)) ^ static_cast<std::uint64_t>(event)));
}

/// Writes an event's forward values into the state and the recurrence cache.
inline void commit_event(const Graph& g, const EventGraph& eg, const EventInputs& in,
                         DynamicState& s, RecurrenceCache& cache) {
  const InteractionEvent& ev = *in.event;
  const auto u = static_cast<std::size_t>(ev.user);
  const auto i = static_cast<std::size_t>(ev.item);
  cache.user[u] = {true, g.value(eg.general_prev), g.value(eg.item_prev), in.delta.delta_user,
                   g.value(eg.features)};
  cache.item[i] = {true, g.value(eg.item_prev), g.value(eg.general_prev), in.delta.delta_item,
                   g.value(eg.features)};
  if (eg.limited_new) {
    cache.limited[u] = {true,
                        g.value(*eg.limited_prev),
                        g.value(eg.general_new),
                        g.value(eg.item_new),
                        ev.item,
                        in.delta.delta_purchase,
                        g.value(eg.features),
                        in.inventory};
    s.user_limited.row(ev.user) = g.value(*eg.limited_new).col(0).transpose();
    s.user_purchased[u] = 1;
  }
  s.user_general.row(ev.user) = g.value(eg.general_new).col(0).transpose();
  s.item.row(ev.item) = g.value(eg.item_new).col(0).transpose();
  mark_interaction(s, ev);
}

// ---- trainer ----------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  ///< mean fusion loss per training event
  double val_recall10 = 0.0;
  double val_ndcg10 = 0.0;
  double wall_seconds = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

/// Parameter values and end-of-training state of one epoch.
struct Snapshot {
  int epoch = 0;  ///< 0 = nothing trained yet
  double val_ndcg10 = -std::numeric_limits<double>::infinity();
  std::vector<Mat> params;
  DynamicState state;

  friend bool operator==(const Snapshot& a, const Snapshot& b) {
    return a.epoch == b.epoch && a.val_ndcg10 == b.val_ndcg10 &&
           detail::same_values(a.params, b.params) && a.state == b.state;
  }
};

/// Everything needed to resume training at an epoch boundary or to evaluate the best epoch.
struct TrainingCheckpoint {
  TrainConfig config;
  ModelDims dims;
  Normalization norm;
  std::vector<std::string> param_names;
  std::vector<Mat> params;
  AdamState adam;
  int epochs_completed = 0;
  std::vector<EpochRecord> history;
  Snapshot best;

  friend bool operator==(const TrainingCheckpoint& a, const TrainingCheckpoint& b) {
    return a.config == b.config && a.dims == b.dims && a.norm == b.norm &&
           a.param_names == b.param_names && detail::same_values(a.params, b.params) &&
           a.adam == b.adam && a.epochs_completed == b.epochs_completed &&
           a.history == b.history && a.best == b.best;
  }
};

inline std::vector<Mat> param_values(const ParamSet& set) {
  std::vector<Mat> out;
  for (const auto& p : set) out.push_back(p.value());
  return out;
}

inline void assign_param_values(ParamSet& set, const std::vector<Mat>& values) {
  if (values.size() != set.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(values.size()) +
                          " parameters, the model has " + std::to_string(set.size()));
  }
  std::size_t k = 0;
  for (auto& p : set) {
    const Mat& v = values[k++];
    if (v.rows() != p.rows() || v.cols() != p.cols()) {
      throw CheckpointError("checkpoint parameter '" + p.name() + "' is " + shape_string(v) +
                            ", the model expects " + shape_string(p.rows(), p.cols()));
    }
    p.values() = v;
  }
}

/// Model with the given dimensions holding `values` (registration order).
inline ModelParams restore_params(const ModelDims& dims, const std::vector<Mat>& values) {
  ModelParams m = make_model_params(dims, 0);
  assign_param_values(m.set, values);
  return m;
}

class Trainer {
 public:
  Trainer(const TrainConfig& config, const PreparedLog& log)
      : config_(config), log_(log), params_(make_model_params(config.dims_for(log), config.seed)) {
    config_.validate();
    adam_ = make_adam_state(params_.set);
    batches_ = build_tbatches(log_.events(), log_.split.train, config_.batch_cap);
  }

  Trainer(const TrainingCheckpoint& ck, const PreparedLog& log)
      : config_(ck.config), log_(log), params_(restore_params(ck.dims, ck.params)) {
    config_.validate();
    if (ck.dims != config_.dims_for(log)) {
      throw CheckpointError("checkpoint dimensions do not match the data");
    }
    if (!(ck.norm == log.norm)) {
      throw CheckpointError("checkpoint normalization differs from the prepared log");
    }
    check_names(ck.param_names);
    adam_ = ck.adam;
    if (adam_.m.size() != params_.set.size()) {
      throw CheckpointError("checkpoint optimizer state does not match the model");
    }
    epochs_completed_ = ck.epochs_completed;
    history_ = ck.history;
    best_ = ck.best;
    batches_ = build_tbatches(log_.events(), log_.split.train, config_.batch_cap);
  }

  const TrainConfig& config() const noexcept { return config_; }
  ModelParams& params() noexcept { return params_; }
  const std::vector<EpochRecord>& history() const noexcept { return history_; }
  int epochs_completed() const noexcept { return epochs_completed_; }
  bool finished() const noexcept { return epochs_completed_ >= config_.epochs; }
  const std::vector<TBatch>& batches() const noexcept { return batches_; }
  const AdamState& adam() const noexcept { return adam_; }

  /// Trains one epoch over the training range, then scores the validation range.
  EpochRecord run_epoch() {
    const auto start = std::chrono::steady_clock::now();
    const int epoch = epochs_completed_ + 1;
    DynamicState state = initial_state(params_);
    RecurrenceCache cache(params_.dims.users, params_.dims.items);
    double total = 0.0;
    for (std::size_t b = 0; b < batches_.size(); ++b) {
      total += train_batch(batches_[b], epoch, b, state, cache);
    }
    DynamicState val_state = state;
    const auto val =
        evaluate_range(params_, val_state, log_, log_.split.validation, config_.scoring());
    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = total / static_cast<double>(std::max<std::size_t>(log_.split.train.size(), 1));
    r.val_recall10 = val.recall10;
    r.val_ndcg10 = val.ndcg10;
    if (r.val_ndcg10 > best_.val_ndcg10) {
      best_.epoch = epoch;
      best_.val_ndcg10 = r.val_ndcg10;
      best_.params = param_values(params_.set);
      best_.state = std::move(state);
    }
    r.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history_.push_back(r);
    epochs_completed_ = epoch;
    return r;
  }

  /// Best epoch so far; before any epoch, the initial parameters with the training range
  /// replayed through them.
  Snapshot best() const {
    if (best_.epoch > 0) return best_;
    Snapshot s;
    s.params = param_values(params_.set);
    ModelParams m = params_;
    s.state = initial_state(m);
    replay_range(m, s.state, log_, log_.split.train, uses_resource_branch(config_.variant));
    return s;
  }

  TrainingCheckpoint checkpoint() const {
    TrainingCheckpoint ck;
    ck.config = config_;
    ck.dims = params_.dims;
    ck.norm = log_.norm;
    for (const auto& p : params_.set) ck.param_names.push_back(p.name());
    ck.params = param_values(params_.set);
    ck.adam = adam_;
    ck.epochs_completed = epochs_completed_;
    ck.history = history_;
    ck.best = best();
    return ck;
  }

 private:
  void check_names(const std::vector<std::string>& names) const {
    std::size_t k = 0;
    for (const auto& p : params_.set) {
      if (k >= names.size() || names[k] != p.name()) {
        throw CheckpointError("checkpoint parameter " + std::to_string(k) + " is not '" +
                              p.name() + "'");
      }
      ++k;
    }
  }

  double train_batch(const TBatch& batch, int epoch, std::size_t index, DynamicState& state,
                     RecurrenceCache& cache) {
    const LossWeights w = config_.effective_weights();
    params_.set.zero_grad();
    std::vector<Graph> graphs(batch.events.size());
    std::vector<EventGraph> nodes(batch.events.size());
    std::vector<EventInputs> inputs(batch.events.size());
    double total = 0.0;
    try {
      for (std::size_t j = 0; j < batch.events.size(); ++j) {
        const std::size_t k = batch.events[j];
        inputs[j] = {&log_.events()[k], log_.deltas[k], log_.inventory[k]};
        auto rng = event_rng(config_.seed, epoch, k);
        nodes[j] = add_event_loss(graphs[j], params_, state, cache, inputs[j], w,
                                  config_.variant, config_.negatives, rng);
        graphs[j].backward(nodes[j].loss, GradMode::accumulate);
        total += graphs[j].scalar(nodes[j].loss);
        // Only values are needed for the commit; drop the rest of the graph early.
        graphs[j] = keep_values(graphs[j], nodes[j]);
      }
    } catch (const NumericError& e) {
      throw TrainingError("non-finite value in epoch " + std::to_string(epoch) + ", batch " +
                          std::to_string(index) + ": " + e.what());
    }
    if (!std::isfinite(total)) {
      throw TrainingError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                          std::to_string(index));
    }
    adam_step(params_.set, adam_, config_.learning_rate);
    for (std::size_t j = 0; j < batch.events.size(); ++j) {
      commit_event(graphs[j], nodes[j], inputs[j], state, cache);
    }
    return total;
  }

  // Replaces a finished event graph by one holding only the nodes commit_event reads.
  static Graph keep_values(const Graph& g, EventGraph& eg) {
    Graph small;
    auto keep = [&](NodeId& n) { n = small.input(g.value(n)); };
    keep(eg.general_prev);
    keep(eg.item_prev);
    keep(eg.general_new);
    keep(eg.item_new);
    keep(eg.features);
    if (eg.limited_prev) keep(*eg.limited_prev);
    if (eg.limited_new) keep(*eg.limited_new);
    return small;
  }

  TrainConfig config_;
  const PreparedLog& log_;
  ModelParams params_;
  AdamState adam_;
  std::vector<TBatch> batches_;
  int epochs_completed_ = 0;
  std::vector<EpochRecord> history_;
  Snapshot best_;
};

// ---- checkpoint file ------------------------------------------------------------------------

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'I', 'M', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}
  template <class T>
  void pod(const T& x) {
    static_assert(std::is_trivially_copyable_v<T>);
    os_.write(reinterpret_cast<const char*>(&x), sizeof(T));
  }
  void u64(std::uint64_t x) { pod(x); }
  void i64(std::int64_t x) { pod(x); }
  void f64(double x) { pod(x); }
  void u8(std::uint8_t x) { pod(x); }
  void str(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void mat(const Mat& m) {
    i64(m.rows());
    i64(m.cols());
    os_.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
  }
  template <class T>
  void vec(const std::vector<T>& xs) {
    u64(xs.size());
    for (const auto& x : xs) pod(x);
  }

 private:
  std::ostream& os_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}
  template <class T>
  T pod() {
    T x{};
    read(reinterpret_cast<char*>(&x), sizeof(T));
    return x;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::int64_t i64() { return pod<std::int64_t>(); }
  double f64() { return pod<double>(); }
  std::uint8_t u8() { return pod<std::uint8_t>(); }
  std::size_t count(std::size_t limit = std::size_t{1} << 32) {
    const auto n = u64();
    if (n > limit) fail("implausible element count " + std::to_string(n));
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    std::string s(count(1 << 20), '\0');
    read(s.data(), s.size());
    return s;
  }
  Mat mat() {
    const auto r = i64(), c = i64();
    if (r < 0 || c < 0 || (r > 0 && c > (std::int64_t{1} << 40) / r)) fail("bad matrix shape");
    Mat m(r, c);
    read(reinterpret_cast<char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
  }
  template <class T>
  std::vector<T> vec() {
    std::vector<T> xs(count());
    for (auto& x : xs) x = pod<T>();
    return xs;
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw CheckpointError("checkpoint '" + source_ + "': " + why);
  }
  void read(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail("truncated file");
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::string source_;
};

inline void write_state(BinaryWriter& w, const DynamicState& s) {
  w.mat(s.user_general);
  w.mat(s.user_limited);
  w.mat(s.item);
  w.vec(s.last_time_user);
  w.vec(s.last_time_item);
  w.vec(s.last_purchase_time_user);
  w.vec(s.last_item_of_user);
  w.vec(s.user_seen);
  w.vec(s.user_purchased);
  w.vec(s.item_seen);
}

inline DynamicState read_state(BinaryReader& r) {
  DynamicState s;
  s.user_general = r.mat();
  s.user_limited = r.mat();
  s.item = r.mat();
  s.last_time_user = r.vec<double>();
  s.last_time_item = r.vec<double>();
  s.last_purchase_time_user = r.vec<double>();
  s.last_item_of_user = r.vec<Index>();
  s.user_seen = r.vec<std::uint8_t>();
  s.user_purchased = r.vec<std::uint8_t>();
  s.item_seen = r.vec<std::uint8_t>();
  const auto users = static_cast<std::size_t>(s.user_general.rows());
  const auto items = static_cast<std::size_t>(s.item.rows());
  if (s.user_limited.rows() != s.user_general.rows() || s.last_time_user.size() != users ||
      s.last_purchase_time_user.size() != users || s.last_item_of_user.size() != users ||
      s.user_seen.size() != users || s.user_purchased.size() != users ||
      s.last_time_item.size() != items || s.item_seen.size() != items) {
    r.fail("inconsistent dynamic state");
  }
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const TrainingCheckpoint& ck) {
  detail::BinaryWriter w(os);
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  w.pod(detail::kCheckpointVersion);

  const auto& c = ck.config;
  w.f64(c.learning_rate);
  w.u64(c.batch_cap);
  w.i64(c.epochs);
  w.i64(c.negatives);
  w.i64(c.embedding_dim);
  w.u64(c.seed);
  for (double x : {c.weights.lambda_m, c.weights.lambda_n, c.weights.lambda_U,
                   c.weights.lambda_I, c.weights.alpha_m, c.weights.alpha_n}) {
    w.f64(x);
  }
  w.u8(static_cast<std::uint8_t>(c.variant));
  w.u8(static_cast<std::uint8_t>(c.combine));

  w.i64(ck.dims.users);
  w.i64(ck.dims.items);
  w.i64(ck.dims.features);
  w.i64(ck.dims.embedding);
  w.u8(static_cast<std::uint8_t>(ck.dims.combine));

  w.f64(ck.norm.deltas.user);
  w.f64(ck.norm.deltas.item);
  w.f64(ck.norm.deltas.purchase);
  w.f64(ck.norm.inventory);

  w.u64(ck.params.size());
  for (std::size_t k = 0; k < ck.params.size(); ++k) {
    w.str(k < ck.param_names.size() ? ck.param_names[k] : std::string());
    w.mat(ck.params[k]);
  }

  w.f64(ck.adam.beta1);
  w.f64(ck.adam.beta2);
  w.f64(ck.adam.epsilon);
  w.i64(ck.adam.step);
  w.u64(ck.adam.m.size());
  for (std::size_t k = 0; k < ck.adam.m.size(); ++k) {
    w.mat(ck.adam.m[k]);
    w.mat(ck.adam.v[k]);
  }

  w.i64(ck.epochs_completed);
  w.u64(ck.history.size());
  for (const auto& r : ck.history) {
    w.i64(r.epoch);
    w.f64(r.train_loss);
    w.f64(r.val_recall10);
    w.f64(r.val_ndcg10);
    w.f64(r.wall_seconds);
  }

  w.i64(ck.best.epoch);
  w.f64(ck.best.val_ndcg10);
  w.u64(ck.best.params.size());
  for (const auto& m : ck.best.params) w.mat(m);
  detail::write_state(w, ck.best.state);
}

inline TrainingCheckpoint read_checkpoint(std::istream& is, const std::string& source) {
  detail::BinaryReader r(is, source);
  char magic[sizeof(detail::kCheckpointMagic)];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) r.fail("not a checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != detail::kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(version));
  }

  TrainingCheckpoint ck;
  auto& c = ck.config;
  c.learning_rate = r.f64();
  c.batch_cap = r.u64();
  c.epochs = static_cast<int>(r.i64());
  c.negatives = r.i64();
  c.embedding_dim = r.i64();
  c.seed = r.u64();
  c.weights.lambda_m = r.f64();
  c.weights.lambda_n = r.f64();
  c.weights.lambda_U = r.f64();
  c.weights.lambda_I = r.f64();
  c.weights.alpha_m = r.f64();
  c.weights.alpha_n = r.f64();
  const auto variant = r.u8();
  const auto combine = r.u8();
  if (variant > static_cast<std::uint8_t>(Variant::cosine) || combine > 1) r.fail("bad enum value");
  c.variant = static_cast<Variant>(variant);
  c.combine = static_cast<CombineMode>(combine);

  ck.dims.users = r.i64();
  ck.dims.items = r.i64();
  ck.dims.features = r.i64();
  ck.dims.embedding = r.i64();
  const auto dims_combine = r.u8();
  if (dims_combine > 1) r.fail("bad enum value");
  ck.dims.combine = static_cast<CombineMode>(dims_combine);

  ck.norm.deltas.user = r.f64();
  ck.norm.deltas.item = r.f64();
  ck.norm.deltas.purchase = r.f64();
  ck.norm.inventory = r.f64();

  const auto n_params = r.count(1 << 16);
  for (std::size_t k = 0; k < n_params; ++k) {
    ck.param_names.push_back(r.str());
    ck.params.push_back(r.mat());
  }

  ck.adam.beta1 = r.f64();
  ck.adam.beta2 = r.f64();
  ck.adam.epsilon = r.f64();
  ck.adam.step = r.i64();
  const auto n_moments = r.count(1 << 16);
  for (std::size_t k = 0; k < n_moments; ++k) {
    ck.adam.m.push_back(r.mat());
    ck.adam.v.push_back(r.mat());
  }

  ck.epochs_completed = static_cast<int>(r.i64());
  const auto n_history = r.count(1 << 24);
  for (std::size_t k = 0; k < n_history; ++k) {
    EpochRecord e;
    e.epoch = static_cast<int>(r.i64());
    e.train_loss = r.f64();
    e.val_recall10 = r.f64();
    e.val_ndcg10 = r.f64();
    e.wall_seconds = r.f64();
    ck.history.push_back(e);
  }

  ck.best.epoch = static_cast<int>(r.i64());
  ck.best.val_ndcg10 = r.f64();
  const auto n_best = r.count(1 << 16);
  for (std::size_t k = 0; k < n_best; ++k) ck.best.params.push_back(r.mat());
  ck.best.state = detail::read_state(r);
  if (!r.at_end()) r.fail("trailing bytes after the checkpoint");
  return ck;
}

inline void save_checkpoint(const std::string& path, const TrainingCheckpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint '" + path + "'");
  write_checkpoint(os, ck);
  os.flush();
  if (!os) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

inline TrainingCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is, path);
}

// ---- driver -----------------------------------------------------------------------------

inline constexpr const char* kEpochReportHeader =
    "epoch,train_loss,val_recall@10,val_ndcg@10,wall_seconds";

inline void write_epoch_report(std::ostream& os, std::span<const EpochRecord> history) {
  os << kEpochReportHeader << '\n';
  for (const auto& r : history) {
    os << r.epoch << ',' << detail::format_double(r.train_loss) << ','
       << detail::format_double(r.val_recall10) << ',' << detail::format_double(r.val_ndcg10)
       << ',' << detail::format_double(r.wall_seconds) << '\n';
  }
}

struct TrainOptions {
  std::string checkpoint_path;  ///< written after every epoch when set
  int max_epochs_this_run = -1; ///< stop early (simulated interruption); -1 runs to the end
  std::function<void(const EpochRecord&)> on_epoch;
};

inline TrainingCheckpoint run_training(Trainer& trainer, const TrainOptions& opt = {}) {
  int ran = 0;
  while (!trainer.finished() && (opt.max_epochs_this_run < 0 || ran < opt.max_epochs_this_run)) {
    const auto r = trainer.run_epoch();
    ++ran;
    if (opt.on_epoch) opt.on_epoch(r);
    if (!opt.checkpoint_path.empty()) save_checkpoint(opt.checkpoint_path, trainer.checkpoint());
  }
  auto ck = trainer.checkpoint();
  if (!opt.checkpoint_path.empty() && ran == 0) save_checkpoint(opt.checkpoint_path, ck);
  return ck;
}

inline TrainingCheckpoint train(const TrainConfig& config, const PreparedLog& log,
                                const TrainOptions& opt = {}) {
  Trainer t(config, log);
  return run_training(t, opt);
}

inline TrainingCheckpoint resume_training(const TrainingCheckpoint& ck, const PreparedLog& log,
                                          const TrainOptions& opt = {}) {
  Trainer t(ck, log);
  return run_training(t, opt);
}

/// Metrics of the best epoch on validation and then test, replaying from its end-of-training
/// state so the test range sees the validation events first.
struct SplitMetrics {
  MetricsReport validation;
  MetricsReport test;
};

inline SplitMetrics evaluate_checkpoint(const TrainingCheckpoint& ck, const PreparedLog& log) {
  ModelParams m = restore_params(ck.dims, ck.best.params);
  DynamicState s = ck.best.state;
  if (s.n_users() != ck.dims.users || s.n_items() != ck.dims.items) {
    throw CheckpointError("checkpoint state does not match its dimensions");
  }
  const auto opt = ck.config.scoring();
  SplitMetrics out;
  out.validation = evaluate_range(m, s, log, log.split.validation, opt);
  out.test = evaluate_range(m, s, log, log.split.test, opt);
  return out;
}

}  // namespace imn
