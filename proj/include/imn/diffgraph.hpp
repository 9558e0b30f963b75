#pragma once

// Reverse-mode differentiation over dense vectors and matrices.
//
// A Graph is a tape: nodes are appended in evaluation order, so parents always
// precede children and backward() is a single reverse sweep. Values are computed
// eagerly when a node is added; forward() re-evaluates the whole tape after inputs
// are rebound or parameter values change (finite-difference checks rely on this).
//
// Column vectors are n x 1 matrices. Parameter nodes do not copy the parameter:
// they read its storage and accumulate straight into its gradient buffer.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "imn/errors.hpp"

namespace imn {

using Index = Eigen::Index;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

inline std::string shape_string(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

inline std::string shape_string(const Mat& m) { return shape_string(m.rows(), m.cols()); }

/// A named, fixed-shape block of trainable reals with its gradient buffer.
class Parameter {
 public:
  Parameter(std::string name, Index rows, Index cols, bool requires_grad = true)
      : name_(std::move(name)),
        value_(Mat::Zero(rows, cols)),
        grad_(Mat::Zero(rows, cols)),
        requires_grad_(requires_grad) {}

  const std::string& name() const noexcept { return name_; }
  Index rows() const noexcept { return value_.rows(); }
  Index cols() const noexcept { return value_.cols(); }
  Index size() const noexcept { return value_.size(); }

  const Mat& value() const noexcept { return value_; }
  /// Mutable view; a Map cannot be resized, so the shape stays fixed.
  Eigen::Map<Mat> values() noexcept { return {value_.data(), value_.rows(), value_.cols()}; }

  const Mat& grad() const noexcept { return grad_; }
  Eigen::Map<Mat> grads() noexcept { return {grad_.data(), grad_.rows(), grad_.cols()}; }
  void zero_grad() { grad_.setZero(); }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

 private:
  friend class Graph;
  Mat& grads_buffer() noexcept { return grad_; }

  std::string name_;
  Mat value_;
  Mat grad_;
  bool requires_grad_;
};

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId, ParamId) = default;
};

/// Owns parameters in registration order; names are unique. References stay valid as
/// more parameters are added.
class ParamSet {
 public:
  ParamId add(std::string name, Index rows, Index cols, bool requires_grad = true) {
    if (find(name) != nullptr) {
      throw ContractError("duplicate parameter name '" + name + "'");
    }
    params_.emplace_back(std::move(name), rows, cols, requires_grad);
    return ParamId{params_.size() - 1};
  }

  Parameter& operator[](ParamId id) { return params_.at(id.index); }
  const Parameter& operator[](ParamId id) const { return params_.at(id.index); }

  Parameter* find(std::string_view name) {
    for (auto& p : params_) {
      if (p.name() == name) return &p;
    }
    return nullptr;
  }
  const Parameter* find(std::string_view name) const {
    return const_cast<ParamSet*>(this)->find(name);
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
  }

 private:
  std::deque<Parameter> params_;
};

enum class Op : std::uint8_t {
  input,
  parameter,
  lookup,
  gather,
  add,
  sub,
  mul,
  div,
  scale,
  matvec,
  bilinear,
  sigmoid,
  concat,
  hcat,
  stack,
  tile,
  dot,
  exp,
  log,
  sum,
  l2norm,
  logsumexp,
  pick,
  custom,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::parameter: return "parameter";
    case Op::lookup: return "lookup";
    case Op::gather: return "gather";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::scale: return "scale";
    case Op::matvec: return "matvec";
    case Op::bilinear: return "bilinear";
    case Op::sigmoid: return "sigmoid";
    case Op::concat: return "concat";
    case Op::hcat: return "hcat";
    case Op::stack: return "stack";
    case Op::tile: return "tile";
    case Op::dot: return "dot";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sum: return "sum";
    case Op::l2norm: return "l2norm";
    case Op::logsumexp: return "logsumexp";
    case Op::pick: return "pick";
    case Op::custom: return "custom";
  }
  return "?";
}

enum class GradMode : std::uint8_t { reset, accumulate };

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Unary rule supplied by the caller. backward receives (x, y, dL/dy) and returns dL/dx,
/// which must have the shape of x.
struct CustomRule {
  std::string name;
  std::function<Mat(const Mat&)> forward;
  std::function<Mat(const Mat&, const Mat&, const Mat&)> backward;
};

struct GraphNode {
  std::size_t id = 0;
  Op op = Op::input;
  std::vector<std::size_t> parents;
  Mat value;
  Mat grad;
  bool requires_grad = false;
  double scalar = 0.0;
  Index index = 0;
  std::vector<Index> rows;
  Parameter* param = nullptr;
  std::shared_ptr<const CustomRule> rule;
};

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sum_exp(const Eigen::Ref<const Mat>& x) {
  const double m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  std::size_t size() const noexcept { return nodes_.size(); }
  const GraphNode& node(NodeId id) const { return nodes_.at(id.index); }

  const Mat& value(NodeId id) const {
    const auto& n = nodes_.at(id.index);
    return n.op == Op::parameter ? n.param->value() : n.value;
  }
  double scalar(NodeId id) const {
    const Mat& v = value(id);
    if (v.size() != 1) {
      throw ShapeError("node " + std::to_string(id.index) + " is " + shape_string(v) +
                       ", not a scalar");
    }
    return v(0, 0);
  }
  Vec vector(NodeId id) const {
    const Mat& v = value(id);
    if (v.cols() != 1) {
      throw ShapeError("node " + std::to_string(id.index) + " is " + shape_string(v) +
                       ", not a column vector");
    }
    return Vec(v.col(0));
  }
  /// Gradient of the last backward() loss w.r.t. this node. Parameter nodes report
  /// the parameter's gradient buffer.
  const Mat& grad(NodeId id) const {
    const auto& n = nodes_.at(id.index);
    return n.op == Op::parameter ? n.param->grad() : n.grad;
  }

  // ---- leaves -------------------------------------------------------------

  NodeId input(Mat value) {
    GraphNode n;
    n.op = Op::input;
    n.value = std::move(value);
    return push(std::move(n));
  }
  NodeId input(const Vec& v) { return input(Mat(v)); }
  NodeId constant(double x) { return input(Mat(Mat::Constant(1, 1, x))); }

  NodeId parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
      return NodeId{it->second};
    }
    GraphNode n;
    n.op = Op::parameter;
    n.param = &p;
    n.requires_grad = p.requires_grad();
    const NodeId id = push(std::move(n));
    param_nodes_.emplace(&p, id.index);
    return id;
  }

  /// Row `row` of a table parameter as a column vector; gradient flows to that row only.
  NodeId lookup(Parameter& table, Index row) {
    if (row < 0 || row >= table.rows()) {
      throw ContractError("lookup row " + std::to_string(row) + " out of range for '" +
                          table.name() + "' with " + std::to_string(table.rows()) + " rows");
    }
    GraphNode n;
    n.op = Op::lookup;
    n.param = &table;
    n.index = row;
    n.requires_grad = table.requires_grad();
    return push(std::move(n));
  }

  /// Several rows of a table parameter, stacked as a matrix in the given order.
  NodeId gather(Parameter& table, std::vector<Index> rows) {
    for (Index r : rows) {
      if (r < 0 || r >= table.rows()) {
        throw ContractError("gather row " + std::to_string(r) + " out of range for '" +
                            table.name() + "' with " + std::to_string(table.rows()) + " rows");
      }
    }
    GraphNode n;
    n.op = Op::gather;
    n.param = &table;
    n.rows = std::move(rows);
    n.requires_grad = table.requires_grad();
    return push(std::move(n));
  }

  // ---- element-wise and linear algebra ------------------------------------

  NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary(Op::div, a, b); }

  NodeId scale(NodeId a, double s) {
    GraphNode n;
    n.op = Op::scale;
    n.parents = {a.index};
    n.scalar = s;
    return push(std::move(n));
  }

  NodeId matvec(NodeId w, NodeId x) { return binary(Op::matvec, w, x); }

  /// Row-wise bilinear form: for X (n x dx), W (dx x dc), c (dc x 1) returns the
  /// n x 1 column whose j-th entry is X_j^T W c.
  NodeId bilinear(NodeId x, NodeId w, NodeId c) {
    GraphNode n;
    n.op = Op::bilinear;
    n.parents = {x.index, w.index, c.index};
    return push(std::move(n));
  }

  NodeId sigmoid(NodeId a) { return unary(Op::sigmoid, a); }
  NodeId exp(NodeId a) { return unary(Op::exp, a); }
  NodeId log(NodeId a) { return unary(Op::log, a); }
  NodeId sum(NodeId a) { return unary(Op::sum, a); }
  NodeId l2norm(NodeId a) { return unary(Op::l2norm, a); }
  NodeId logsumexp(NodeId a) { return unary(Op::logsumexp, a); }
  NodeId dot(NodeId a, NodeId b) { return binary(Op::dot, a, b); }

  /// Entry `k` of a column vector as a scalar.
  NodeId pick(NodeId a, Index k) {
    GraphNode n;
    n.op = Op::pick;
    n.parents = {a.index};
    n.index = k;
    return push(std::move(n));
  }

  /// Vertical concatenation; column vectors join end to end.
  NodeId concat(std::span<const NodeId> parts) { return nary(Op::concat, parts); }
  NodeId concat(std::initializer_list<NodeId> parts) {
    return concat(std::span<const NodeId>(parts.begin(), parts.size()));
  }
  /// Horizontal concatenation of matrices with equal row counts.
  NodeId hcat(std::span<const NodeId> parts) { return nary(Op::hcat, parts); }
  NodeId hcat(std::initializer_list<NodeId> parts) {
    return hcat(std::span<const NodeId>(parts.begin(), parts.size()));
  }
  /// Column vectors of equal length become the rows of a matrix.
  NodeId stack(std::span<const NodeId> rows) { return nary(Op::stack, rows); }
  NodeId stack(std::initializer_list<NodeId> rows) {
    return stack(std::span<const NodeId>(rows.begin(), rows.size()));
  }
  /// A column vector repeated as `count` identical rows.
  NodeId tile(NodeId v, Index count) {
    GraphNode n;
    n.op = Op::tile;
    n.parents = {v.index};
    n.index = count;
    return push(std::move(n));
  }

  NodeId custom(NodeId a, std::shared_ptr<const CustomRule> rule) {
    GraphNode n;
    n.op = Op::custom;
    n.parents = {a.index};
    n.rule = std::move(rule);
    return push(std::move(n));
  }

  // ---- evaluation ---------------------------------------------------------

  /// Replace the value of an input node; shapes must agree. Call forward() afterwards.
  void bind(NodeId id, Mat value) {
    auto& n = nodes_.at(id.index);
    if (n.op != Op::input) {
      throw ContractError("bind: node " + std::to_string(id.index) + " is a " +
                          op_name(n.op) + " node, not an input");
    }
    if (value.rows() != n.value.rows() || value.cols() != n.value.cols()) {
      throw ShapeError("bind: node " + std::to_string(id.index) + " is " +
                       shape_string(n.value) + ", got " + shape_string(value));
    }
    n.value = std::move(value);
  }

  /// Re-evaluates every node from the current inputs and parameter values.
  void forward() {
    for (auto& n : nodes_) evaluate(n);
  }

  /// Accumulates d(loss)/d(node) for every node that depends on a trainable
  /// parameter, and d(loss)/d(parameter) into the parameters' own buffers.
  /// With GradMode::reset the gradients of every parameter referenced by this graph are
  /// zeroed first; GradMode::accumulate adds to whatever the buffers hold, so several
  /// graphs can contribute to one optimizer step.
  void backward(NodeId loss, GradMode mode = GradMode::reset) {
    const auto& root = nodes_.at(loss.index);
    if (root.op == Op::parameter || root.value.size() != 1) {
      throw ContractError("backward: loss node " + std::to_string(loss.index) + " is " +
                          shape_string(value(loss)) + ", expected a scalar");
    }
    if (mode == GradMode::reset) {
      for (Parameter* p : parameters()) p->zero_grad();
    }
    for (auto& n : nodes_) {
      if (n.op != Op::parameter) {
        if (n.requires_grad) {
          n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        } else {
          n.grad.resize(0, 0);
        }
      }
    }
    if (!root.requires_grad) return;
    nodes_[loss.index].grad(0, 0) = 1.0;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.op == Op::parameter || n.op == Op::input) continue;
      propagate(n);
    }
  }

  /// Parameters referenced by this graph, in first-use order.
  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> out;
    for (const auto& n : nodes_) {
      if (n.param != nullptr && std::find(out.begin(), out.end(), n.param) == out.end()) {
        out.push_back(n.param);
      }
    }
    return out;
  }

 private:
  NodeId push(GraphNode n) {
    n.id = nodes_.size();
    for (std::size_t p : n.parents) {
      if (p >= nodes_.size()) {
        throw ContractError("node references unknown parent " + std::to_string(p));
      }
      n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    }
    evaluate(n);
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
  }

  NodeId unary(Op op, NodeId a) {
    GraphNode n;
    n.op = op;
    n.parents = {a.index};
    return push(std::move(n));
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    GraphNode n;
    n.op = op;
    n.parents = {a.index, b.index};
    return push(std::move(n));
  }

  NodeId nary(Op op, std::span<const NodeId> parts) {
    if (parts.empty()) throw ContractError(std::string(op_name(op)) + ": no operands");
    GraphNode n;
    n.op = op;
    n.parents.reserve(parts.size());
    for (NodeId p : parts) n.parents.push_back(p.index);
    return push(std::move(n));
  }

  const Mat& val(std::size_t i) const {
    const auto& n = nodes_[i];
    return n.op == Op::parameter ? n.param->value() : n.value;
  }

  [[noreturn]] void mismatch(const GraphNode& n, std::size_t a, std::size_t b) const {
    throw ShapeError(std::string(op_name(n.op)) + ": shape mismatch between node " +
                     std::to_string(a) + " (" + shape_string(val(a)) + ") and node " +
                     std::to_string(b) + " (" + shape_string(val(b)) + ")");
  }

  void require_column(const GraphNode& n, std::size_t a) const {
    if (val(a).cols() != 1) {
      throw ShapeError(std::string(op_name(n.op)) + ": node " + std::to_string(a) + " is " +
                       shape_string(val(a)) + ", expected a column vector");
    }
  }

  void evaluate(GraphNode& n) const {
    const auto& ps = n.parents;
    auto same_shape = [&](std::size_t a, std::size_t b) {
      if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols()) mismatch(n, a, b);
    };
    switch (n.op) {
      case Op::input:
        break;
      case Op::parameter:
        return;  // value lives in the parameter
      case Op::lookup:
        n.value = n.param->value().row(n.index).transpose();
        break;
      case Op::gather: {
        const Mat& t = n.param->value();
        n.value.resize(static_cast<Index>(n.rows.size()), t.cols());
        for (std::size_t k = 0; k < n.rows.size(); ++k) {
          n.value.row(static_cast<Index>(k)) = t.row(n.rows[k]);
        }
        break;
      }
      case Op::add:
        same_shape(ps[0], ps[1]);
        n.value = val(ps[0]) + val(ps[1]);
        break;
      case Op::sub:
        same_shape(ps[0], ps[1]);
        n.value = val(ps[0]) - val(ps[1]);
        break;
      case Op::mul:
        same_shape(ps[0], ps[1]);
        n.value = val(ps[0]).cwiseProduct(val(ps[1]));
        break;
      case Op::div:
        same_shape(ps[0], ps[1]);
        n.value = val(ps[0]).cwiseQuotient(val(ps[1]));
        break;
      case Op::scale:
        n.value = n.scalar * val(ps[0]);
        break;
      case Op::matvec:
        require_column(n, ps[1]);
        if (val(ps[0]).cols() != val(ps[1]).rows()) mismatch(n, ps[0], ps[1]);
        n.value.noalias() = val(ps[0]) * val(ps[1]);
        break;
      case Op::bilinear: {
        const Mat& x = val(ps[0]);
        const Mat& w = val(ps[1]);
        const Mat& c = val(ps[2]);
        require_column(n, ps[2]);
        if (x.cols() != w.rows()) mismatch(n, ps[0], ps[1]);
        if (w.cols() != c.rows()) mismatch(n, ps[1], ps[2]);
        const Mat wc = w * c;
        n.value.noalias() = x * wc;
        break;
      }
      case Op::sigmoid:
        n.value = val(ps[0]).unaryExpr([](double x) { return stable_sigmoid(x); });
        break;
      case Op::exp:
        n.value = val(ps[0]).array().exp().matrix();
        break;
      case Op::log:
        n.value = val(ps[0]).array().log().matrix();
        break;
      case Op::sum:
        n.value = Mat::Constant(1, 1, val(ps[0]).sum());
        break;
      case Op::l2norm:
        n.value = Mat::Constant(1, 1, val(ps[0]).norm());
        break;
      case Op::logsumexp:
        require_column(n, ps[0]);
        n.value = Mat::Constant(1, 1, log_sum_exp(val(ps[0])));
        break;
      case Op::dot:
        require_column(n, ps[0]);
        same_shape(ps[0], ps[1]);
        n.value = Mat::Constant(1, 1, val(ps[0]).col(0).dot(val(ps[1]).col(0)));
        break;
      case Op::pick:
        require_column(n, ps[0]);
        if (n.index < 0 || n.index >= val(ps[0]).rows()) {
          throw ShapeError("pick: index " + std::to_string(n.index) + " outside node " +
                           std::to_string(ps[0]) + " (" + shape_string(val(ps[0])) + ")");
        }
        n.value = Mat::Constant(1, 1, val(ps[0])(n.index, 0));
        break;
      case Op::concat: {
        Index rows = 0;
        const Index cols = val(ps[0]).cols();
        for (std::size_t p : ps) {
          if (val(p).cols() != cols) mismatch(n, ps[0], p);
          rows += val(p).rows();
        }
        n.value.resize(rows, cols);
        Index at = 0;
        for (std::size_t p : ps) {
          n.value.middleRows(at, val(p).rows()) = val(p);
          at += val(p).rows();
        }
        break;
      }
      case Op::hcat: {
        Index cols = 0;
        const Index rows = val(ps[0]).rows();
        for (std::size_t p : ps) {
          if (val(p).rows() != rows) mismatch(n, ps[0], p);
          cols += val(p).cols();
        }
        n.value.resize(rows, cols);
        Index at = 0;
        for (std::size_t p : ps) {
          n.value.middleCols(at, val(p).cols()) = val(p);
          at += val(p).cols();
        }
        break;
      }
      case Op::stack: {
        const Index width = val(ps[0]).rows();
        n.value.resize(static_cast<Index>(ps.size()), width);
        for (std::size_t k = 0; k < ps.size(); ++k) {
          require_column(n, ps[k]);
          if (val(ps[k]).rows() != width) mismatch(n, ps[0], ps[k]);
          n.value.row(static_cast<Index>(k)) = val(ps[k]).col(0).transpose();
        }
        break;
      }
      case Op::tile:
        require_column(n, ps[0]);
        n.value.resize(n.index, val(ps[0]).rows());
        for (Index r = 0; r < n.index; ++r) n.value.row(r) = val(ps[0]).col(0).transpose();
        break;
      case Op::custom:
        n.value = n.rule->forward(val(ps[0]));
        break;
    }
    if (!n.value.allFinite()) {
      throw NumericError("node " + std::to_string(n.id) + " (" + op_name(n.op) +
                         ") holds a non-finite value");
    }
  }

  Mat& slot(std::size_t i) {
    auto& n = nodes_[i];
    return n.op == Op::parameter ? n.param->grads_buffer() : n.grad;
  }

  void propagate(GraphNode& n) {
    const Mat& g = n.grad;
    const auto& ps = n.parents;
    auto needs = [&](std::size_t p) { return nodes_[p].requires_grad; };
    switch (n.op) {
      case Op::input:
      case Op::parameter:
        break;
      case Op::lookup:
        n.param->grads_buffer().row(n.index) += g.col(0).transpose();
        break;
      case Op::gather: {
        Mat& tg = n.param->grads_buffer();
        for (std::size_t k = 0; k < n.rows.size(); ++k) {
          tg.row(n.rows[k]) += g.row(static_cast<Index>(k));
        }
        break;
      }
      case Op::add:
        if (needs(ps[0])) slot(ps[0]) += g;
        if (needs(ps[1])) slot(ps[1]) += g;
        break;
      case Op::sub:
        if (needs(ps[0])) slot(ps[0]) += g;
        if (needs(ps[1])) slot(ps[1]) -= g;
        break;
      case Op::mul:
        if (needs(ps[0])) slot(ps[0]) += g.cwiseProduct(val(ps[1]));
        if (needs(ps[1])) slot(ps[1]) += g.cwiseProduct(val(ps[0]));
        break;
      case Op::div: {
        const Mat& a = val(ps[0]);
        const Mat& b = val(ps[1]);
        if (needs(ps[0])) slot(ps[0]) += g.cwiseQuotient(b);
        if (needs(ps[1])) {
          slot(ps[1]).array() -= g.array() * a.array() / (b.array() * b.array());
        }
        break;
      }
      case Op::scale:
        if (needs(ps[0])) slot(ps[0]) += n.scalar * g;
        break;
      case Op::matvec:
        if (needs(ps[0])) slot(ps[0]).noalias() += g * val(ps[1]).transpose();
        if (needs(ps[1])) slot(ps[1]).noalias() += val(ps[0]).transpose() * g;
        break;
      case Op::bilinear: {
        const Mat& x = val(ps[0]);
        const Mat& w = val(ps[1]);
        const Mat& c = val(ps[2]);
        if (needs(ps[0])) {
          const Mat wc = w * c;
          slot(ps[0]).noalias() += g * wc.transpose();
        }
        if (needs(ps[1]) || needs(ps[2])) {
          const Mat t = x.transpose() * g;
          if (needs(ps[1])) slot(ps[1]).noalias() += t * c.transpose();
          if (needs(ps[2])) slot(ps[2]).noalias() += w.transpose() * t;
        }
        break;
      }
      case Op::sigmoid:
        if (needs(ps[0])) {
          slot(ps[0]).array() += g.array() * n.value.array() * (1.0 - n.value.array());
        }
        break;
      case Op::exp:
        if (needs(ps[0])) slot(ps[0]) += g.cwiseProduct(n.value);
        break;
      case Op::log:
        if (needs(ps[0])) slot(ps[0]) += g.cwiseQuotient(val(ps[0]));
        break;
      case Op::sum:
        if (needs(ps[0])) slot(ps[0]).array() += g(0, 0);
        break;
      case Op::l2norm:
        // The norm is not differentiable at zero; the zero subgradient is used there.
        if (needs(ps[0]) && n.value(0, 0) > 0.0) {
          slot(ps[0]) += (g(0, 0) / n.value(0, 0)) * val(ps[0]);
        }
        break;
      case Op::logsumexp:
        if (needs(ps[0])) {
          slot(ps[0]).array() += g(0, 0) * (val(ps[0]).array() - n.value(0, 0)).exp();
        }
        break;
      case Op::dot:
        if (needs(ps[0])) slot(ps[0]) += g(0, 0) * val(ps[1]);
        if (needs(ps[1])) slot(ps[1]) += g(0, 0) * val(ps[0]);
        break;
      case Op::pick:
        if (needs(ps[0])) slot(ps[0])(n.index, 0) += g(0, 0);
        break;
      case Op::concat: {
        Index at = 0;
        for (std::size_t p : ps) {
          const Index r = val(p).rows();
          if (needs(p)) slot(p) += g.middleRows(at, r);
          at += r;
        }
        break;
      }
      case Op::hcat: {
        Index at = 0;
        for (std::size_t p : ps) {
          const Index c = val(p).cols();
          if (needs(p)) slot(p) += g.middleCols(at, c);
          at += c;
        }
        break;
      }
      case Op::stack:
        for (std::size_t k = 0; k < ps.size(); ++k) {
          if (needs(ps[k])) slot(ps[k]) += g.row(static_cast<Index>(k)).transpose();
        }
        break;
      case Op::tile:
        if (needs(ps[0])) slot(ps[0]) += g.colwise().sum().transpose();
        break;
      case Op::custom:
        if (needs(ps[0])) {
          Mat dx = n.rule->backward(val(ps[0]), n.value, g);
          if (dx.rows() != val(ps[0]).rows() || dx.cols() != val(ps[0]).cols()) {
            throw ShapeError("custom rule '" + n.rule->name + "' returned a " +
                             shape_string(dx) + " gradient for node " + std::to_string(ps[0]) +
                             " of shape " + shape_string(val(ps[0])));
          }
          slot(ps[0]) += dx;
        }
        break;
    }
  }

  std::vector<GraphNode> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

/// Result of comparing analytic gradients against central differences.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Index worst_row = 0;
  Index worst_col = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Relative errors use max(|analytic|, |numeric|, kGradCheckFloor) as denominator, so
/// entries whose true gradient is ~0 are judged on absolute error instead. Central
/// differences of an O(1) loss carry roundoff near 1e-16 / step, far below 1e-4 * floor.
inline constexpr double kGradCheckFloor = 1e-4;

inline double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

/// Checks every entry of every trainable parameter referenced by `graph`.
/// Leaves parameter values and node values as they were on entry.
inline GradCheckReport grad_check(Graph& graph, NodeId loss, double step) {
  if (!(step > 0.0 && step <= 1e-2)) {
    throw ContractError("grad_check: step must lie in (0, 1e-2], got " + std::to_string(step));
  }
  graph.forward();
  graph.backward(loss);
  GradCheckReport report;
  for (Parameter* p : graph.parameters()) {
    if (!p->requires_grad()) continue;
    const Mat analytic = p->grad();
    auto values = p->values();
    for (Index r = 0; r < p->rows(); ++r) {
      for (Index c = 0; c < p->cols(); ++c) {
        const double saved = values(r, c);
        // Divide by the perturbation actually representable in floating point.
        const double hi = saved + step;
        const double lo = saved - step;
        values(r, c) = hi;
        graph.forward();
        const double up = graph.scalar(loss);
        values(r, c) = lo;
        graph.forward();
        const double down = graph.scalar(loss);
        values(r, c) = saved;
        const double numeric = (up - down) / (hi - lo);
        const double err = grad_rel_error(analytic(r, c), numeric);
        ++report.entries_checked;
        if (err > report.max_rel_err || report.worst_param.empty()) {
          report.max_rel_err = std::max(report.max_rel_err, err);
          report.worst_param = p->name();
          report.worst_row = r;
          report.worst_col = c;
          report.worst_analytic = analytic(r, c);
          report.worst_numeric = numeric;
        }
      }
    }
  }
  graph.forward();
  graph.backward(loss);
  return report;
}

}  // namespace imn
