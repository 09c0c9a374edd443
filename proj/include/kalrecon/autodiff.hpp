#pragma once

// Tape-based reverse-mode differentiation over dense double matrices.
//
// A Graph records every operation in creation order, which is already a
// topological order, so backward() walks the tape once from the loss down.
// Parameters live outside the graph in a ParameterStore; a graph leaf created
// with Graph::param() adds its gradient into Parameter::grad on backward.
// One graph per forward pass; graphs are single-use and single-threaded.

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "kalrecon/error.hpp"
#include "kalrecon/matrix.hpp"

namespace kalrecon::ad {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool has_grad = false;
  bool decay = true;  // weight decay applies to weights, not biases or gains
  Matrix adam_m;
  Matrix adam_v;

  void zero_grad() {
    grad.setZero(value.rows(), value.cols());
    has_grad = false;
  }
};

/// Named parameters plus the Adam state that belongs to them.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix init, bool decay = true) {
    if (index_.contains(name)) throw Error(Errc::ConfigInvalid, "duplicate parameter " + name);
    Parameter p;
    p.name = name;
    p.decay = decay;
    p.grad = Matrix::Zero(init.rows(), init.cols());
    p.adam_m = Matrix::Zero(init.rows(), init.cols());
    p.adam_v = Matrix::Zero(init.rows(), init.cols());
    p.value = std::move(init);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
  }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(Errc::CheckpointMismatch, "no parameter " + name);
    return params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(Errc::CheckpointMismatch, "no parameter " + name);
    return params_[it->second];
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::uint64_t step_count() const { return step_; }
  void increment_step() { ++step_; }

  nlohmann::json to_json() const {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : params_) {
      params.push_back({{"name", p.name},
                        {"rows", p.value.rows()},
                        {"cols", p.value.cols()},
                        {"decay", p.decay},
                        {"values", std::vector<double>(p.value.data(), p.value.data() + p.value.size())}});
    }
    return {{"format", "kalrecon-params"}, {"version", 1}, {"step", step_}, {"parameters", params}};
  }

  /// Overwrites values of existing parameters; names and shapes must match.
  void load_json(const nlohmann::json& j) {
    try {
      if (j.at("format") != "kalrecon-params" || j.at("version").get<int>() != 1) {
        throw Error(Errc::CheckpointMismatch, "unsupported parameter checkpoint");
      }
      const auto& list = j.at("parameters");
      if (list.size() != params_.size()) {
        throw Error(Errc::CheckpointMismatch, "checkpoint holds " + std::to_string(list.size()) +
                                                  " parameters, model has " +
                                                  std::to_string(params_.size()));
      }
      for (const auto& jp : list) {
        Parameter& p = get(jp.at("name").get<std::string>());
        const auto rows = jp.at("rows").get<Eigen::Index>();
        const auto cols = jp.at("cols").get<Eigen::Index>();
        const auto values = jp.at("values").get<std::vector<double>>();
        if (rows != p.value.rows() || cols != p.value.cols() ||
            values.size() != static_cast<std::size_t>(rows * cols)) {
          throw Error(Errc::CheckpointMismatch, "shape mismatch for " + p.name);
        }
        p.value = Eigen::Map<const Matrix>(values.data(), rows, cols);
      }
      step_ = j.value("step", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::CheckpointMismatch, e.what());
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
    out << to_json().dump() << '\n';
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
    load_json(nlohmann::json::parse(in));
  }

 private:
  std::deque<Parameter> params_;  // stable addresses for graph leaves
  std::map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Graph {
 public:
  using Backprop = std::function<void(Graph&, const Matrix&)>;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  /// Leaf bound to `p`. Repeated calls within one graph return the same leaf.
  Var param(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{this, it->second};
    Var v = push(p.value, true, nullptr);
    nodes_[v.id].param = &p;
    bound_.emplace(&p, v.id);
    return v;
  }

  /// Appends a node whose inputs are `inputs`. `backprop` receives the node's
  /// gradient and must route it to the inputs through accumulate().
  Var record(Matrix value, std::initializer_list<Var> inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backprop) : Backprop{});
  }

  Var record(Matrix value, std::span<const Var> inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backprop) : Backprop{});
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 loss. A graph can be swept once.
  void backward(Var loss) {
    if (loss.graph != this) throw Error(Errc::ShapeMismatch, "loss belongs to another graph");
    if (nodes_[loss.id].value.rows() != 1 || nodes_[loss.id].value.cols() != 1) {
      throw Error(Errc::NonScalarLoss, "loss has shape " +
                                           std::to_string(nodes_[loss.id].value.rows()) + "x" +
                                           std::to_string(nodes_[loss.id].value.cols()));
    }
    if (backward_done_) throw Error(Errc::DoubleBackward, "graph already swept");
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backprop) n.backprop(*this, n.grad);
      if (n.param != nullptr) {
        n.param->grad += n.grad;
        n.param->has_grad = true;
      }
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows in
    bool requires_grad = false;
    Backprop backprop;
    Parameter* param = nullptr;
  };

  Var push(Matrix value, bool requires_grad, Backprop backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  bool backward_done_ = false;
};

inline const Matrix& Var::value() const { return graph->value(id); }

inline const Matrix& Var::grad() const {
  static const Matrix kEmpty;
  return graph->grad(id).size() == 0 ? kEmpty : graph->grad(id);
}

namespace detail {

inline std::string shape_of(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(Errc::ShapeMismatch, std::string(op) + ": " + shape_of(a.value()) + " vs " +
                                         shape_of(b.value()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw Error(Errc::ShapeMismatch, "matmul: " + detail::shape_of(a.value()) + " * " +
                                         detail::shape_of(b.value()));
  }
  Graph& g = *a.graph;
  Matrix out = a.value() * b.value();
  return g.record(std::move(out), {a, b}, [a = a.id, b = b.id](Graph& g, const Matrix& grad) {
    if (g.requires_grad(a)) g.accumulate(a, grad * g.value(b).transpose());
    if (g.requires_grad(b)) g.accumulate(b, g.value(a).transpose() * grad);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Graph& g = *a.graph;
  return g.record(a.value() + b.value(), {a, b}, [a = a.id, b = b.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad);
    g.accumulate(b, grad);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Graph& g = *a.graph;
  return g.record(a.value() - b.value(), {a, b}, [a = a.id, b = b.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad);
    g.accumulate(b, -grad);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Graph& g = *a.graph;
  Matrix out = a.value().cwiseProduct(b.value());
  return g.record(std::move(out), {a, b}, [a = a.id, b = b.id](Graph& g, const Matrix& grad) {
    if (g.requires_grad(a)) g.accumulate(a, grad.cwiseProduct(g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, grad.cwiseProduct(g.value(a)));
  });
}

/// a + row, with the 1 x cols `row` broadcast over every row of `a`.
inline Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw Error(Errc::ShapeMismatch, "add_row: " + detail::shape_of(a.value()) + " + " +
                                         detail::shape_of(row.value()));
  }
  Graph& g = *a.graph;
  Matrix out = a.value().rowwise() + row.value().row(0);
  return g.record(std::move(out), {a, row}, [a = a.id, r = row.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad);
    if (g.requires_grad(r)) g.accumulate(r, grad.colwise().sum());
  });
}

/// a .* row, with the 1 x cols `row` broadcast over every row of `a`.
inline Var mul_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw Error(Errc::ShapeMismatch, "mul_row: " + detail::shape_of(a.value()) + " * " +
                                         detail::shape_of(row.value()));
  }
  Graph& g = *a.graph;
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return g.record(std::move(out), {a, row}, [a = a.id, r = row.id](Graph& g, const Matrix& grad) {
    if (g.requires_grad(a)) {
      Matrix ga = grad.array().rowwise() * g.value(r).row(0).array();
      g.accumulate(a, ga);
    }
    if (g.requires_grad(r)) g.accumulate(r, grad.cwiseProduct(g.value(a)).colwise().sum());
  });
}

inline Var scale(Var a, double c) {
  Graph& g = *a.graph;
  return g.record(a.value() * c, {a}, [a = a.id, c](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad * c);
  });
}

inline Var transpose(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().transpose();
  return g.record(std::move(out), {a}, [a = a.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad.transpose());
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error(Errc::ShapeMismatch, "concat_cols: no inputs");
  Graph& g = *parts.front().graph;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw Error(Errc::ShapeMismatch, "concat_cols: row count differs");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id, at);
    at += p.cols();
  }
  return g.record(std::move(out), parts, [spans](Graph& g, const Matrix& grad) {
    for (const auto& [id, off] : spans) {
      if (g.requires_grad(id)) g.accumulate(id, grad.middleCols(off, g.value(id).cols()));
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error(Errc::ShapeMismatch, "concat_rows: no inputs");
  Graph& g = *parts.front().graph;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw Error(Errc::ShapeMismatch, "concat_rows: column count differs");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id, at);
    at += p.rows();
  }
  return g.record(std::move(out), parts, [spans](Graph& g, const Matrix& grad) {
    for (const auto& [id, off] : spans) {
      if (g.requires_grad(id)) g.accumulate(id, grad.middleRows(off, g.value(id).rows()));
    }
  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_cols(Var a, Eigen::Index offset, Eigen::Index width) {
  if (offset < 0 || width < 0 || offset + width > a.cols()) {
    throw Error(Errc::ShapeMismatch, "slice_cols out of range");
  }
  Graph& g = *a.graph;
  Matrix out = a.value().middleCols(offset, width);
  return g.record(std::move(out), {a}, [a = a.id, offset](Graph& g, const Matrix& grad) {
    Matrix full = Matrix::Zero(g.value(a).rows(), g.value(a).cols());
    full.middleCols(offset, grad.cols()) = grad;
    g.accumulate(a, full);
  });
}

inline Var slice_rows(Var a, Eigen::Index offset, Eigen::Index count) {
  if (offset < 0 || count < 0 || offset + count > a.rows()) {
    throw Error(Errc::ShapeMismatch, "slice_rows out of range");
  }
  Graph& g = *a.graph;
  Matrix out = a.value().middleRows(offset, count);
  return g.record(std::move(out), {a}, [a = a.id, offset](Graph& g, const Matrix& grad) {
    Matrix full = Matrix::Zero(g.value(a).rows(), g.value(a).cols());
    full.middleRows(offset, grad.rows()) = grad;
    g.accumulate(a, full);
  });
}

inline Var sigmoid(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  Matrix saved = out;
  return g.record(std::move(out), {a}, [a = a.id, s = std::move(saved)](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

inline Var tanh(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().array().tanh().matrix();
  Matrix saved = out;
  return g.record(std::move(out), {a}, [a = a.id, t = std::move(saved)](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad.cwiseProduct((1.0 - t.array().square()).matrix()));
  });
}

inline Var relu(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().cwiseMax(0.0);
  return g.record(std::move(out), {a}, [a = a.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, (g.value(a).array() > 0.0).select(grad, 0.0).matrix());
  });
}

/// log(1 + exp(x)) without overflow.
inline Var softplus(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().unaryExpr([](double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  return g.record(std::move(out), {a}, [a = a.id](Graph& g, const Matrix& grad) {
    Matrix s = g.value(a).unaryExpr([](double x) {
      if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
      const double e = std::exp(x);
      return e / (1.0 + e);
    });
    g.accumulate(a, grad.cwiseProduct(s));
  });
}

inline Var square(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().array().square().matrix();
  return g.record(std::move(out), {a}, [a = a.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, 2.0 * grad.cwiseProduct(g.value(a)));
  });
}

inline Var log(Var a) {
  Graph& g = *a.graph;
  Matrix out = a.value().array().log().matrix();
  return g.record(std::move(out), {a}, [a = a.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad.cwiseQuotient(g.value(a)));
  });
}

/// Elementwise clamp to [lo, hi]; the gradient is zero where the input lies
/// strictly outside the interval.
inline Var clamp(Var a, double lo, double hi) {
  Graph& g = *a.graph;
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return g.record(std::move(out), {a}, [a = a.id, lo, hi](Graph& g, const Matrix& grad) {
    const auto& x = g.value(a).array();
    g.accumulate(a, ((x >= lo) && (x <= hi)).select(grad, 0.0).matrix());
  });
}

inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Var softmax_rows(Var a) {
  Graph& g = *a.graph;
  Matrix out = softmax_rows_value(a.value());
  Matrix saved = out;
  return g.record(std::move(out), {a}, [a = a.id, s = std::move(saved)](Graph& g, const Matrix& grad) {
    // dx = s .* (g - rowsum(g .* s))
    Matrix gs = grad.cwiseProduct(s);
    Eigen::VectorXd dots = gs.rowwise().sum();
    Matrix dx = gs - (s.array().colwise() * dots.array()).matrix();
    g.accumulate(a, dx);
  });
}

inline Var log_softmax_rows(Var a) {
  Graph& g = *a.graph;
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  Matrix probs = out.array().exp().matrix();
  return g.record(std::move(out), {a}, [a = a.id, p = std::move(probs)](Graph& g, const Matrix& grad) {
    Eigen::VectorXd sums = grad.rowwise().sum();
    Matrix dx = grad - (p.array().colwise() * sums.array()).matrix();
    g.accumulate(a, dx);
  });
}

/// Per-row standardization (x - mean) / sqrt(var + eps).
inline Var normalize_rows(Var a, double eps = 1e-5) {
  Graph& g = *a.graph;
  const Matrix& x = a.value();
  const auto n = static_cast<double>(x.cols());
  Matrix y(x.rows(), x.cols());
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / n;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    y.row(r) = ((x.row(r).array() - mean) * inv_std(r)).matrix();
  }
  Matrix saved = y;
  return g.record(std::move(y), {a},
                  [a = a.id, y = std::move(saved), inv_std, n](Graph& g, const Matrix& grad) {
                    Matrix dx(grad.rows(), grad.cols());
                    for (Eigen::Index r = 0; r < grad.rows(); ++r) {
                      const double mg = grad.row(r).mean();
                      const double mgy = grad.row(r).cwiseProduct(y.row(r)).sum() / n;
                      dx.row(r) = ((grad.row(r).array() - mg - y.row(r).array() * mgy) * inv_std(r))
                                      .matrix();
                    }
                    g.accumulate(a, dx);
                  });
}

/// Row-wise layer normalization with learned gain and bias rows.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  return add_row(mul_row(normalize_rows(x, eps), gain), bias);
}

inline Var sum_all(Var a) {
  Graph& g = *a.graph;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), {a}, [a = a.id](Graph& g, const Matrix& grad) {
    g.accumulate(a, Matrix::Constant(g.value(a).rows(), g.value(a).cols(), grad(0, 0)));
  });
}

inline Var mean_all(Var a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum_all(a), n > 0 ? 1.0 / n : 0.0);
}

/// Mean over the rows whose mask entry is non-zero; result is 1 x cols.
inline Var masked_mean(Var a, std::span<const std::uint8_t> mask) {
  if (static_cast<Eigen::Index>(mask.size()) != a.rows()) {
    throw Error(Errc::ShapeMismatch, "masked_mean: mask length differs from row count");
  }
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw Error(Errc::EmptyMask, "masked_mean: no rows selected");
  Graph& g = *a.graph;
  Matrix out = Matrix::Zero(1, a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    if (mask[static_cast<std::size_t>(r)]) out.row(0) += a.value().row(r);
  }
  const double inv = 1.0 / static_cast<double>(count);
  out *= inv;
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return g.record(std::move(out), {a}, [a = a.id, m = std::move(m), inv](Graph& g, const Matrix& grad) {
    Matrix dx = Matrix::Zero(g.value(a).rows(), g.value(a).cols());
    for (std::size_t r = 0; r < m.size(); ++r) {
      if (m[r]) dx.row(static_cast<Eigen::Index>(r)) = grad.row(0) * inv;
    }
    g.accumulate(a, dx);
  });
}

/// Rows of `table` selected by `ids`; an id of -1 yields a zero row. The
/// gradient scatters back into the selected rows.
inline Var gather_rows(Var table, std::span<const int> ids) {
  Graph& g = *table.graph;
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < -1 || ids[i] >= table.rows()) throw Error(Errc::ShapeMismatch, "gather_rows: id out of range");
    if (ids[i] >= 0) out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return g.record(std::move(out), {table}, [t = table.id, idx = std::move(idx)](Graph& g, const Matrix& grad) {
    Matrix dt = Matrix::Zero(g.value(t).rows(), g.value(t).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= 0) dt.row(idx[i]) += grad.row(static_cast<Eigen::Index>(i));
    }
    g.accumulate(t, dt);
  });
}

enum class DropoutMode {
  Off,          // identity
  Train,        // inverted dropout: survivors scaled by 1 / (1 - rate)
  Missingness,  // zero without rescaling; simulates absent fields, also at eval
};

/// Drops entries with probability `rate`. When `columns` is non-empty only
/// columns flagged there are eligible.
inline Var dropout(Var a, double rate, std::mt19937_64& rng, DropoutMode mode,
                   std::span<const std::uint8_t> columns = {}) {
  if (rate < 0.0 || rate > 1.0) throw Error(Errc::ConfigInvalid, "dropout rate outside [0, 1]");
  if (mode == DropoutMode::Off || rate == 0.0) return a;
  if (!columns.empty() && static_cast<Eigen::Index>(columns.size()) != a.cols()) {
    throw Error(Errc::ShapeMismatch, "dropout: column mask width differs");
  }
  const double keep_scale = (mode == DropoutMode::Train && rate < 1.0) ? 1.0 / (1.0 - rate) : 1.0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix mask = Matrix::Ones(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      if (!columns.empty() && !columns[static_cast<std::size_t>(c)]) continue;
      const bool drop = rate >= 1.0 || u(rng) < rate;
      mask(r, c) = drop ? 0.0 : keep_scale;
    }
  }
  Graph& g = *a.graph;
  Matrix out = a.value().cwiseProduct(mask);
  return g.record(std::move(out), {a}, [a = a.id, mask = std::move(mask)](Graph& g, const Matrix& grad) {
    g.accumulate(a, grad.cwiseProduct(mask));
  });
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update from the gradients accumulated in `store`. Weight decay is
/// decoupled: theta -= lr * wd * theta, applied to parameters flagged `decay`.
inline void adam_step(ParameterStore& store, const AdamConfig& cfg) {
  for (const auto& p : store) {
    if (!p.has_grad) throw Error(Errc::MissingGradient, "no gradient for " + p.name);
  }
  store.increment_step();
  const auto t = static_cast<double>(store.step_count());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& p : store) {
    p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * p.grad;
    p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    if (p.decay && cfg.weight_decay != 0.0) p.value -= cfg.lr * cfg.weight_decay * p.value;
    p.value.array() -= cfg.lr * (p.adam_m.array() / bc1) / ((p.adam_v.array() / bc2).sqrt() + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// Initialization helpers

inline Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace kalrecon::ad
