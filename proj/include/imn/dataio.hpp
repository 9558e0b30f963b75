#pragma once

// Interaction logs: CSV ingestion, metadata sidecar, elapsed-time annotations,
// chronological splitting and t-batch construction.
//
// CSV layout (header required):
//   user_id,item_id,timestamp,action,f0,...,f{d-1}
// action is 0 (click) or 1 (purchase). Ids are either non-negative integers or
// arbitrary string keys; string columns are densified in first-seen order.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "imn/diffgraph.hpp"
#include "imn/errors.hpp"

namespace imn {

enum class Action : std::uint8_t { click = 0, purchase = 1 };

struct InteractionEvent {
  Index user = 0;
  Index item = 0;
  double timestamp = 0.0;
  Action action = Action::click;
  Vec features;

  bool is_purchase() const noexcept { return action == Action::purchase; }
};

struct LogMetadata {
  Index n_users = 0;
  Index n_items = 0;
  Index feature_dim = 0;
  /// Original keys when the CSV used string ids; index = dense id.
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;
  /// Seconds per day; on_sale_counts[d] covers [d * day_length, (d + 1) * day_length).
  double day_length = 86400.0;
  std::vector<double> on_sale_counts;
};

struct InteractionLog {
  std::vector<InteractionEvent> events;
  LogMetadata meta;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

/// Ids for one column: kept as integers when every entry is a non-negative integer,
/// otherwise densified first-seen.
struct IdColumn {
  std::vector<Index> ids;
  std::vector<std::string> keys;
  Index count = 0;
};

inline IdColumn resolve_ids(const std::vector<std::string>& raw) {
  IdColumn col;
  bool numeric = true;
  Index max_id = -1;
  col.ids.reserve(raw.size());
  for (const auto& s : raw) {
    const auto v = parse_int(s);
    if (!v || *v < 0) {
      numeric = false;
      break;
    }
    col.ids.push_back(static_cast<Index>(*v));
    max_id = std::max<Index>(max_id, static_cast<Index>(*v));
  }
  if (numeric) {
    col.count = max_id + 1;
    return col;
  }
  col.ids.clear();
  std::unordered_map<std::string, Index> seen;
  for (const auto& s : raw) {
    auto [it, inserted] = seen.emplace(s, static_cast<Index>(col.keys.size()));
    if (inserted) col.keys.push_back(s);
    col.ids.push_back(it->second);
  }
  col.count = static_cast<Index>(col.keys.size());
  return col;
}

}  // namespace detail

/// Parses the interaction CSV. Errors carry the 1-based line number.
inline InteractionLog parse_interactions(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("line 1: missing header");
  ++line_no;
  const auto header = detail::split_fields(detail::trim(line));
  static constexpr std::string_view kFixed[] = {"user_id", "item_id", "timestamp", "action"};
  if (header.size() < 4) throw ParseError("line 1: header needs at least 4 columns");
  for (std::size_t k = 0; k < 4; ++k) {
    if (detail::trim(header[k]) != kFixed[k]) {
      throw ParseError("line 1: column " + std::to_string(k + 1) + " must be '" +
                       std::string(kFixed[k]) + "', got '" + std::string(header[k]) + "'");
    }
  }
  const std::size_t dim = header.size() - 4;
  for (std::size_t k = 0; k < dim; ++k) {
    const std::string want = "f" + std::to_string(k);
    if (detail::trim(header[4 + k]) != want) {
      throw ParseError("line 1: feature column " + std::to_string(k) + " must be '" + want +
                       "', got '" + std::string(header[4 + k]) + "'");
    }
  }

  std::vector<std::string> users;
  std::vector<std::string> items;
  InteractionLog log;
  log.meta.feature_dim = static_cast<Index>(dim);
  double last_time = -std::numeric_limits<double>::infinity();
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto fields = detail::split_fields(body);
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (fields.size() != 4 + dim) {
      throw ParseError(where + "expected " + std::to_string(4 + dim) + " fields, got " +
                       std::to_string(fields.size()));
    }
    InteractionEvent ev;
    const auto user = detail::trim(fields[0]);
    const auto item = detail::trim(fields[1]);
    if (user.empty() || item.empty()) throw ParseError(where + "empty user or item id");
    const auto ts = detail::parse_double(fields[2]);
    if (!ts || !std::isfinite(*ts)) {
      throw ParseError(where + "bad timestamp '" + std::string(fields[2]) + "'");
    }
    if (*ts < last_time) {
      throw ParseError(where + "timestamp " + std::string(detail::trim(fields[2])) +
                       " decreases (previous " + detail::format_double(last_time) + ")");
    }
    last_time = *ts;
    ev.timestamp = *ts;
    const auto act = detail::trim(fields[3]);
    if (act == "0") {
      ev.action = Action::click;
    } else if (act == "1") {
      ev.action = Action::purchase;
    } else {
      throw ParseError(where + "action must be 0 (click) or 1 (purchase), got '" +
                       std::string(act) + "'");
    }
    ev.features.resize(static_cast<Index>(dim));
    for (std::size_t k = 0; k < dim; ++k) {
      const auto v = detail::parse_double(fields[4 + k]);
      if (!v || !std::isfinite(*v)) {
        throw ParseError(where + "bad feature f" + std::to_string(k) + " '" +
                         std::string(fields[4 + k]) + "'");
      }
      ev.features(static_cast<Index>(k)) = *v;
    }
    users.emplace_back(user);
    items.emplace_back(item);
    log.events.push_back(std::move(ev));
  }

  auto ucol = detail::resolve_ids(users);
  auto icol = detail::resolve_ids(items);
  for (std::size_t k = 0; k < log.events.size(); ++k) {
    log.events[k].user = ucol.ids[k];
    log.events[k].item = icol.ids[k];
  }
  log.meta.n_users = ucol.count;
  log.meta.n_items = icol.count;
  log.meta.user_keys = std::move(ucol.keys);
  log.meta.item_keys = std::move(icol.keys);
  return log;
}

inline void write_interactions(std::ostream& out, std::span<const InteractionEvent> events,
                               Index feature_dim) {
  out << "user_id,item_id,timestamp,action";
  for (Index k = 0; k < feature_dim; ++k) out << ",f" << k;
  out << '\n';
  for (const auto& ev : events) {
    if (ev.features.size() != feature_dim) {
      throw ContractError("write_interactions: event with " +
                          std::to_string(ev.features.size()) + " features, expected " +
                          std::to_string(feature_dim));
    }
    out << ev.user << ',' << ev.item << ',' << detail::format_double(ev.timestamp) << ','
        << (ev.is_purchase() ? 1 : 0);
    for (Index k = 0; k < feature_dim; ++k) out << ',' << detail::format_double(ev.features(k));
    out << '\n';
  }
}

// ---- metadata sidecar (key = value lines) -------------------------------------

namespace detail {

inline std::string join(const std::vector<std::string>& xs, char sep = ',') {
  std::string out;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (k) out += sep;
    out += xs[k];
  }
  return out;
}

inline std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  for (auto f : split_fields(v)) out.emplace_back(trim(f));
  return out;
}

}  // namespace detail

inline void write_metadata(std::ostream& out, const LogMetadata& meta) {
  for (const auto* keys : {&meta.user_keys, &meta.item_keys}) {
    for (const auto& k : *keys) {
      if (k.find_first_of(",\n\r") != std::string::npos) {
        throw ContractError("metadata key '" + k + "' contains a separator");
      }
    }
  }
  out << "n_users = " << meta.n_users << '\n';
  out << "n_items = " << meta.n_items << '\n';
  out << "feature_dim = " << meta.feature_dim << '\n';
  out << "day_length = " << detail::format_double(meta.day_length) << '\n';
  if (!meta.on_sale_counts.empty()) {
    std::vector<std::string> counts;
    counts.reserve(meta.on_sale_counts.size());
    for (double c : meta.on_sale_counts) counts.push_back(detail::format_double(c));
    out << "on_sale_counts = " << detail::join(counts) << '\n';
  }
  if (!meta.user_keys.empty()) out << "user_keys = " << detail::join(meta.user_keys) << '\n';
  if (!meta.item_keys.empty()) out << "item_keys = " << detail::join(meta.item_keys) << '\n';
}

inline LogMetadata read_metadata(std::istream& in) {
  LogMetadata meta;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = detail::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    const std::string where = "metadata line " + std::to_string(line_no) + ": ";
    if (eq == std::string_view::npos) throw ParseError(where + "expected 'key = value'");
    const auto key = detail::trim(body.substr(0, eq));
    const auto value = detail::trim(body.substr(eq + 1));
    auto as_count = [&](std::string_view v) {
      const auto n = detail::parse_int(v);
      if (!n || *n < 0) throw ParseError(where + "bad count '" + std::string(v) + "'");
      return static_cast<Index>(*n);
    };
    if (key == "n_users") {
      meta.n_users = as_count(value);
    } else if (key == "n_items") {
      meta.n_items = as_count(value);
    } else if (key == "feature_dim") {
      meta.feature_dim = as_count(value);
    } else if (key == "day_length") {
      const auto d = detail::parse_double(value);
      if (!d || !(*d > 0.0)) throw ParseError(where + "day_length must be positive");
      meta.day_length = *d;
    } else if (key == "on_sale_counts") {
      for (const auto& f : detail::split_list(value)) {
        const auto c = detail::parse_double(f);
        if (!c || *c < 0.0) throw ParseError(where + "bad on-sale count '" + f + "'");
        meta.on_sale_counts.push_back(*c);
      }
    } else if (key == "user_keys") {
      meta.user_keys = detail::split_list(value);
    } else if (key == "item_keys") {
      meta.item_keys = detail::split_list(value);
    } else {
      throw ParseError(where + "unknown key '" + std::string(key) + "'");
    }
  }
  return meta;
}

inline std::filesystem::path metadata_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".meta");
}

/// Reads `csv` and, when present, its `<csv>.meta` sidecar. Sidecar counts may widen
/// the catalog beyond the ids seen in the file, never shrink it.
inline InteractionLog load_log(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw DataError("cannot open interaction log '" + csv.string() + "'");
  InteractionLog log = parse_interactions(in);
  const auto meta_path = metadata_path(csv);
  if (std::filesystem::exists(meta_path)) {
    std::ifstream min(meta_path);
    LogMetadata side = read_metadata(min);
    if (side.n_users < log.meta.n_users || side.n_items < log.meta.n_items) {
      throw DataError("metadata '" + meta_path.string() + "' declares fewer users/items (" +
                      std::to_string(side.n_users) + "/" + std::to_string(side.n_items) +
                      ") than the log uses (" + std::to_string(log.meta.n_users) + "/" +
                      std::to_string(log.meta.n_items) + ")");
    }
    if (side.feature_dim != log.meta.feature_dim) {
      throw DataError("metadata feature_dim " + std::to_string(side.feature_dim) +
                      " disagrees with the CSV header (" +
                      std::to_string(log.meta.feature_dim) + ")");
    }
    if (log.meta.user_keys.empty()) log.meta.user_keys = std::move(side.user_keys);
    if (log.meta.item_keys.empty()) log.meta.item_keys = std::move(side.item_keys);
    log.meta.n_users = side.n_users;
    log.meta.n_items = side.n_items;
    log.meta.day_length = side.day_length;
    log.meta.on_sale_counts = std::move(side.on_sale_counts);
  }
  return log;
}

inline void save_log(const std::filesystem::path& csv, const InteractionLog& log) {
  {
    std::ofstream out(csv, std::ios::binary);
    if (!out) throw DataError("cannot write '" + csv.string() + "'");
    write_interactions(out, log.events, log.meta.feature_dim);
  }
  std::ofstream mout(metadata_path(csv), std::ios::binary);
  if (!mout) throw DataError("cannot write '" + metadata_path(csv).string() + "'");
  write_metadata(mout, log.meta);
}

// ---- elapsed-time annotations -------------------------------------------------

struct DeltaAnnotation {
  double delta_user = 0.0;      ///< since the user's previous interaction
  double delta_item = 0.0;      ///< since the item's previous interaction
  double delta_purchase = 0.0;  ///< since the user's previous purchase
  bool has_prev_user = false;
  bool has_prev_item = false;
  bool has_prev_purchase = false;
  bool normalized = false;
};

/// Raw elapsed times per event; first contact yields 0.
inline std::vector<DeltaAnnotation> compute_deltas(std::span<const InteractionEvent> events) {
  std::unordered_map<Index, double> last_user;
  std::unordered_map<Index, double> last_item;
  std::unordered_map<Index, double> last_purchase;
  std::vector<DeltaAnnotation> out;
  out.reserve(events.size());
  for (const auto& ev : events) {
    DeltaAnnotation d;
    if (auto it = last_user.find(ev.user); it != last_user.end()) {
      d.delta_user = ev.timestamp - it->second;
      d.has_prev_user = true;
    }
    if (auto it = last_item.find(ev.item); it != last_item.end()) {
      d.delta_item = ev.timestamp - it->second;
      d.has_prev_item = true;
    }
    if (auto it = last_purchase.find(ev.user); it != last_purchase.end()) {
      d.delta_purchase = ev.timestamp - it->second;
      d.has_prev_purchase = true;
    }
    last_user[ev.user] = ev.timestamp;
    last_item[ev.item] = ev.timestamp;
    if (ev.is_purchase()) last_purchase[ev.user] = ev.timestamp;
    out.push_back(d);
  }
  return out;
}

struct EventRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return end == begin; }
  friend bool operator==(const EventRange&, const EventRange&) = default;
};

/// Divisors applied to each delta kind: the mean observed gap over the training range.
struct DeltaScales {
  double user = 1.0;
  double item = 1.0;
  double purchase = 1.0;
  friend bool operator==(const DeltaScales&, const DeltaScales&) = default;
};

inline DeltaScales fit_delta_scales(std::span<const DeltaAnnotation> raw, EventRange train) {
  double su = 0.0, si = 0.0, sp = 0.0;
  std::size_t nu = 0, ni = 0, np = 0;
  for (std::size_t k = train.begin; k < train.end && k < raw.size(); ++k) {
    const auto& d = raw[k];
    if (d.has_prev_user) su += d.delta_user, ++nu;
    if (d.has_prev_item) si += d.delta_item, ++ni;
    if (d.has_prev_purchase) sp += d.delta_purchase, ++np;
  }
  auto mean_or_one = [](double s, std::size_t n) {
    return (n == 0 || !(s > 0.0)) ? 1.0 : s / static_cast<double>(n);
  };
  return {mean_or_one(su, nu), mean_or_one(si, ni), mean_or_one(sp, np)};
}

inline std::vector<DeltaAnnotation> normalize_deltas(std::vector<DeltaAnnotation> deltas,
                                                     const DeltaScales& scales) {
  for (auto& d : deltas) {
    if (d.normalized) throw ContractError("normalize_deltas: annotation already normalized");
    d.delta_user /= scales.user;
    d.delta_item /= scales.item;
    d.delta_purchase /= scales.purchase;
    d.normalized = true;
  }
  return deltas;
}

// ---- chronological split -------------------------------------------------------

struct SplitLog {
  EventRange train;
  EventRange validation;
  EventRange test;
};

/// Contiguous train/validation/test ranges of sizes floor(f_train n), floor(f_val n) and
/// the remainder. Empty validation or test ranges are rejected.
inline SplitLog chronological_split(std::size_t n, double train_fraction = 0.8,
                                    double validation_fraction = 0.1,
                                    double test_fraction = 0.1) {
  if (train_fraction <= 0.0 || validation_fraction <= 0.0 || test_fraction <= 0.0 ||
      std::abs(train_fraction + validation_fraction + test_fraction - 1.0) > 1e-9) {
    throw ContractError("chronological_split: fractions must be positive and sum to 1");
  }
  if (n < 3) {
    throw DataError("chronological_split: need at least 3 events, got " + std::to_string(n));
  }
  const auto part = [n](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  };
  const std::size_t n_train = part(train_fraction);
  const std::size_t n_val = part(validation_fraction);
  if (n_val == 0 || n_train + n_val >= n || n_train == 0) {
    throw DataError("chronological_split: " + std::to_string(n) +
                    " events leave an empty train, validation or test range");
  }
  SplitLog s;
  s.train = {0, n_train};
  s.validation = {n_train, n_train + n_val};
  s.test = {n_train + n_val, n};
  return s;
}

// ---- t-batches ------------------------------------------------------------------

struct TBatch {
  std::vector<std::size_t> events;  ///< absolute event indices, time ordered
};

/// Greedy t-batching: an event goes to batch 1 + max(last batch of its user, last batch
/// of its item); each resulting batch is then cut into chunks of at most `cap` events.
inline std::vector<TBatch> build_tbatches(std::span<const InteractionEvent> events,
                                          EventRange range, std::size_t cap = 256) {
  if (cap == 0) throw ContractError("build_tbatches: cap must be positive");
  if (range.end > events.size()) throw ContractError("build_tbatches: range outside the log");
  Index max_user = -1, max_item = -1;
  for (std::size_t k = range.begin; k < range.end; ++k) {
    max_user = std::max(max_user, events[k].user);
    max_item = std::max(max_item, events[k].item);
  }
  std::vector<std::ptrdiff_t> user_batch(static_cast<std::size_t>(max_user + 1), -1);
  std::vector<std::ptrdiff_t> item_batch(static_cast<std::size_t>(max_item + 1), -1);
  std::vector<TBatch> grouped;
  for (std::size_t k = range.begin; k < range.end; ++k) {
    const auto u = static_cast<std::size_t>(events[k].user);
    const auto i = static_cast<std::size_t>(events[k].item);
    const std::ptrdiff_t b = std::max(user_batch[u], item_batch[i]) + 1;
    if (static_cast<std::size_t>(b) == grouped.size()) grouped.emplace_back();
    grouped[static_cast<std::size_t>(b)].events.push_back(k);
    user_batch[u] = b;
    item_batch[i] = b;
  }
  std::vector<TBatch> out;
  out.reserve(grouped.size());
  for (auto& g : grouped) {
    for (std::size_t at = 0; at < g.events.size(); at += cap) {
      const std::size_t stop = std::min(g.events.size(), at + cap);
      out.push_back(TBatch{{g.events.begin() + static_cast<std::ptrdiff_t>(at),
                            g.events.begin() + static_cast<std::ptrdiff_t>(stop)}});
    }
  }
  return out;
}

// ---- prepared log ------------------------------------------------------------------

struct Normalization {
  DeltaScales deltas;
  double inventory = 1.0;  ///< mean on-sale count over training events
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

/// An interaction log with its split, normalized deltas and normalized on-sale counts.
struct PreparedLog {
  InteractionLog log;
  SplitLog split;
  Normalization norm;
  std::vector<DeltaAnnotation> deltas;
  std::vector<double> inventory;

  const std::vector<InteractionEvent>& events() const noexcept { return log.events; }
  Index n_users() const noexcept { return log.meta.n_users; }
  Index n_items() const noexcept { return log.meta.n_items; }
  Index feature_dim() const noexcept { return log.meta.feature_dim; }
};

inline double raw_on_sale_count(const LogMetadata& meta, double timestamp) {
  if (meta.on_sale_counts.empty()) return 1.0;
  const double day = std::floor(timestamp / meta.day_length);
  if (day < 0.0) return meta.on_sale_counts.front();
  const auto d = static_cast<std::size_t>(day);
  return d < meta.on_sale_counts.size() ? meta.on_sale_counts[d] : meta.on_sale_counts.back();
}

/// Splits the log and normalizes it, fitting the constants on the training range
/// unless `fixed` supplies them (evaluation against a trained checkpoint).
inline PreparedLog prepare_log(InteractionLog log,
                               const std::optional<Normalization>& fixed = std::nullopt) {
  PreparedLog p;
  p.split = chronological_split(log.events.size());
  auto raw = compute_deltas(log.events);
  std::vector<double> counts;
  counts.reserve(log.events.size());
  for (const auto& ev : log.events) counts.push_back(raw_on_sale_count(log.meta, ev.timestamp));
  if (fixed) {
    p.norm = *fixed;
  } else {
    p.norm.deltas = fit_delta_scales(raw, p.split.train);
    double s = 0.0;
    for (std::size_t k = p.split.train.begin; k < p.split.train.end; ++k) s += counts[k];
    const double mean = s / static_cast<double>(p.split.train.size());
    p.norm.inventory = mean > 0.0 ? mean : 1.0;
  }
  p.deltas = normalize_deltas(std::move(raw), p.norm.deltas);
  for (double& c : counts) c /= p.norm.inventory;
  p.inventory = std::move(counts);
  p.log = std::move(log);
  return p;
}

}  // namespace imn
