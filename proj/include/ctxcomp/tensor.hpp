#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctxcomp/common.hpp"

namespace ctxcomp {

// Dense 2-D tensor with reverse-mode gradients. Values are double precision,
// stored row-major. Scalars are 1x1. Every recorded operation appends a
// backward closure; backward(loss) replays them in reverse topological order.

using Array = Eigen::ArrayXd;
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  int rows = 0;
  int cols = 0;
  Array values;
  Array grad;  // sized on first accumulation, kept until zeroed
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;  // pushes this->grad into parents

  int64_t size() const { return static_cast<int64_t>(rows) * cols; }

  void ensure_grad() {
    if (grad.size() != values.size()) {
      grad = Array::Zero(values.size());
    }
  }

  void accumulate(const Array& g) {
    ensure_grad();
    grad += g;
  }
};

namespace detail {

// Thread-local switch: when off, ops produce constants (no graph). Used for
// frozen-model passes and finite-difference re-evaluation.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline void check_finite(const char* op, const Array& v) {
  if (!v.allFinite()) {
    throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

}  // namespace detail

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    return filled(rows, cols, 0.0, requires_grad);
  }

  static Tensor filled(int rows, int cols, double v, bool requires_grad = false) {
    if (rows < 0 || cols < 0) throw DimensionError("tensor: negative extent");
    auto n = std::make_shared<TensorNode>();
    n->rows = rows;
    n->cols = cols;
    n->values = Array::Constant(static_cast<int64_t>(rows) * cols, v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(int rows, int cols, std::vector<double> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != static_cast<int64_t>(rows) * cols) {
      throw DimensionError("tensor: data length does not match shape");
    }
    auto n = std::make_shared<TensorNode>();
    n->rows = rows;
    n->cols = cols;
    n->values = Eigen::Map<const Array>(data.data(), static_cast<int64_t>(data.size()));
    n->requires_grad = requires_grad;
    detail::check_finite("from", n->values);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return filled(1, 1, v); }

  static Tensor randn(int rows, int cols, RandomSource& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(rows, cols, requires_grad);
    for (int64_t i = 0; i < t.size(); ++i) t.node()->values[i] = rng.normal(0.0, stddev);
    return t;
  }

  const NodePtr& node() const { return node_; }
  TensorNode* operator->() const { return node_.get(); }

  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  int64_t size() const { return node_->size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

  double operator()(int r, int c) const { return node_->values[static_cast<int64_t>(r) * cols() + c]; }
  double& at(int r, int c) { return node_->values[static_cast<int64_t>(r) * cols() + c]; }

  double item() const {
    if (size() != 1) throw ParameterError("item: tensor is not scalar");
    return node_->values[0];
  }

  double grad_at(int r, int c) const {
    if (node_->grad.size() != node_->values.size()) return 0.0;
    return node_->grad[static_cast<int64_t>(r) * cols() + c];
  }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }

  void zero_grad() { node_->grad.resize(0); }

  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  // Constant view of the same values, cut off from the graph.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode>();
    n->rows = rows();
    n->cols = cols();
    n->values = node_->values;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

 private:
  NodePtr node_;
};

namespace detail {

inline Tensor make_result(int rows, int cols, Array values, const char* op,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorNode&)> backprop) {
  check_finite(op, values);
  auto n = std::make_shared<TensorNode>();
  n->rows = rows;
  n->cols = cols;
  n->values = std::move(values);
  bool track = grad_mode();
  bool any_rg = false;
  for (const auto& t : inputs) any_rg = any_rg || t.requires_grad();
  if (track && any_rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

inline ConstMatMap mat(const Tensor& t) { return ConstMatMap(t->values.data(), t.rows(), t.cols()); }
inline ConstMatMap mat(const TensorNode& n) { return ConstMatMap(n.values.data(), n.rows, n.cols); }

}  // namespace detail

// ----------------------------- elementwise ops -----------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("add: shape mismatch");
  return detail::make_result(
      a.rows(), a.cols(), a->values + b->values, "add", {a, b}, [](TensorNode& o) {
        if (o.parents[0]->requires_grad) o.parents[0]->accumulate(o.grad);
        if (o.parents[1]->requires_grad) o.parents[1]->accumulate(o.grad);
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("sub: shape mismatch");
  return detail::make_result(
      a.rows(), a.cols(), a->values - b->values, "sub", {a, b}, [](TensorNode& o) {
        if (o.parents[0]->requires_grad) o.parents[0]->accumulate(o.grad);
        if (o.parents[1]->requires_grad) o.parents[1]->accumulate(-o.grad);
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("mul: shape mismatch");
  return detail::make_result(
      a.rows(), a.cols(), a->values * b->values, "mul", {a, b}, [](TensorNode& o) {
        if (o.parents[0]->requires_grad) o.parents[0]->accumulate(o.grad * o.parents[1]->values);
        if (o.parents[1]->requires_grad) o.parents[1]->accumulate(o.grad * o.parents[0]->values);
      });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::make_result(a.rows(), a.cols(), a->values * c, "scale", {a}, [c](TensorNode& o) {
    if (o.parents[0]->requires_grad) o.parents[0]->accumulate(o.grad * c);
  });
}

inline Tensor add_const(const Tensor& a, double c) {
  return detail::make_result(a.rows(), a.cols(), a->values + c, "add_const", {a},
                             [](TensorNode& o) {
                               if (o.parents[0]->requires_grad) o.parents[0]->accumulate(o.grad);
                             });
}

inline Tensor sigmoid(const Tensor& a) {
  Array y(a.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    double x = a->values[i];
    // Split by sign so exp never overflows.
    y[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return detail::make_result(a.rows(), a.cols(), std::move(y), "sigmoid", {a}, [](TensorNode& o) {
    if (!o.parents[0]->requires_grad) return;
    o.parents[0]->accumulate(o.grad * o.values * (1.0 - o.values));
  });
}

inline Tensor softplus(const Tensor& a) {
  Array y(a.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    double x = a->values[i];
    // max(x,0) + log1p(exp(-|x|)): exact and stable at both tails.
    y[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  return detail::make_result(a.rows(), a.cols(), std::move(y), "softplus", {a}, [](TensorNode& o) {
    if (!o.parents[0]->requires_grad) return;
    const Array& x = o.parents[0]->values;
    Array d(x.size());
    for (int64_t i = 0; i < x.size(); ++i) {
      double xi = x[i];
      d[i] = xi >= 0.0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
    }
    o.parents[0]->accumulate(o.grad * d);
  });
}

inline Tensor gelu(const Tensor& a) {
  const double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 0.39894228040143267794;
  Array y(a.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    double x = a->values[i];
    y[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  return detail::make_result(
      a.rows(), a.cols(), std::move(y), "gelu", {a}, [inv_sqrt2, inv_sqrt2pi](TensorNode& o) {
        if (!o.parents[0]->requires_grad) return;
        const Array& x = o.parents[0]->values;
        Array d(x.size());
        for (int64_t i = 0; i < x.size(); ++i) {
          double xi = x[i];
          double cdf = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
          d[i] = cdf + xi * pdf;
        }
        o.parents[0]->accumulate(o.grad * d);
      });
}

// ----------------------------- linear algebra -----------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions disagree");
  Array out(static_cast<int64_t>(a.rows()) * b.cols());
  MatMap(out.data(), a.rows(), b.cols()) = detail::mat(a) * detail::mat(b);
  return detail::make_result(
      a.rows(), b.cols(), std::move(out), "matmul", {a, b}, [](TensorNode& o) {
        auto& a_n = *o.parents[0];
        auto& b_n = *o.parents[1];
        ConstMatMap g(o.grad.data(), o.rows, o.cols);
        if (a_n.requires_grad) {
          Array ga(a_n.values.size());
          MatMap(ga.data(), a_n.rows, a_n.cols) = g * detail::mat(b_n).transpose();
          a_n.accumulate(ga);
        }
        if (b_n.requires_grad) {
          Array gb(b_n.values.size());
          MatMap(gb.data(), b_n.rows, b_n.cols) = detail::mat(a_n).transpose() * g;
          b_n.accumulate(gb);
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  Array out(a.size());
  MatMap(out.data(), a.cols(), a.rows()) = detail::mat(a).transpose();
  return detail::make_result(a.cols(), a.rows(), std::move(out), "transpose", {a},
                             [](TensorNode& o) {
                               auto& a_n = *o.parents[0];
                               if (!a_n.requires_grad) return;
                               Array ga(a_n.values.size());
                               MatMap(ga.data(), a_n.rows, a_n.cols) =
                                   ConstMatMap(o.grad.data(), o.rows, o.cols).transpose();
                               a_n.accumulate(ga);
                             });
}

// x: m x n, bias: 1 x n broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_row_bias: bias must be 1 x cols(x)");
  }
  Array out(x.size());
  MatMap o(out.data(), x.rows(), x.cols());
  o = detail::mat(x);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->values.data(), bias.cols());
  return detail::make_result(
      x.rows(), x.cols(), std::move(out), "add_row_bias", {x, bias}, [](TensorNode& o2) {
        auto& x_n = *o2.parents[0];
        auto& b_n = *o2.parents[1];
        if (x_n.requires_grad) x_n.accumulate(o2.grad);
        if (b_n.requires_grad) {
          Array gb(b_n.values.size());
          Eigen::Map<Eigen::RowVectorXd>(gb.data(), b_n.cols) =
              ConstMatMap(o2.grad.data(), o2.rows, o2.cols).colwise().sum();
          b_n.accumulate(gb);
        }
      });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  return add_row_bias(matmul(x, w), bias);
}

// Mean over rows -> 1 x n.
inline Tensor mean_rows(const Tensor& x) {
  if (x.rows() == 0) throw ParameterError("mean_rows: empty tensor");
  Array out(x.cols());
  Eigen::Map<Eigen::RowVectorXd>(out.data(), x.cols()) =
      detail::mat(x).colwise().mean();
  return detail::make_result(1, x.cols(), std::move(out), "mean_rows", {x}, [](TensorNode& o) {
    auto& x_n = *o.parents[0];
    if (!x_n.requires_grad) return;
    Array gx(x_n.values.size());
    MatMap g(gx.data(), x_n.rows, x_n.cols);
    g = ConstMatMap(o.grad.data(), 1, o.cols).replicate(x_n.rows, 1) / double(x_n.rows);
    x_n.accumulate(gx);
  });
}

inline Tensor sum_all(const Tensor& x) {
  Array out(1);
  out[0] = x->values.sum();
  return detail::make_result(1, 1, std::move(out), "sum_all", {x}, [](TensorNode& o) {
    auto& x_n = *o.parents[0];
    if (x_n.requires_grad) x_n.accumulate(Array::Constant(x_n.values.size(), o.grad[0]));
  });
}

inline Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) throw ParameterError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ----------------------------- structural ops -----------------------------

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  if (r0 < 0 || r1 > x.rows() || r0 >= r1) throw DimensionError("slice_rows: bad range");
  int m = r1 - r0;
  Array out(static_cast<int64_t>(m) * x.cols());
  MatMap(out.data(), m, x.cols()) = detail::mat(x).middleRows(r0, m);
  return detail::make_result(m, x.cols(), std::move(out), "slice_rows", {x},
                             [r0, m](TensorNode& o) {
                               auto& x_n = *o.parents[0];
                               if (!x_n.requires_grad) return;
                               x_n.ensure_grad();
                               MatMap(x_n.grad.data(), x_n.rows, x_n.cols).middleRows(r0, m) +=
                                   ConstMatMap(o.grad.data(), o.rows, o.cols);
                             });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw DimensionError("slice_cols: bad range");
  int m = c1 - c0;
  Array out(static_cast<int64_t>(x.rows()) * m);
  MatMap(out.data(), x.rows(), m) = detail::mat(x).middleCols(c0, m);
  return detail::make_result(x.rows(), m, std::move(out), "slice_cols", {x},
                             [c0, m](TensorNode& o) {
                               auto& x_n = *o.parents[0];
                               if (!x_n.requires_grad) return;
                               x_n.ensure_grad();
                               MatMap(x_n.grad.data(), x_n.rows, x_n.cols).middleCols(c0, m) +=
                                   ConstMatMap(o.grad.data(), o.rows, o.cols);
                             });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ParameterError("concat_rows: no parts");
  int cols = parts[0].cols();
  int rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Array out(static_cast<int64_t>(rows) * cols);
  MatMap o(out.data(), rows, cols);
  int r = 0;
  for (const auto& p : parts) {
    o.middleRows(r, p.rows()) = detail::mat(p);
    r += p.rows();
  }
  std::vector<int> offsets;
  offsets.reserve(parts.size());
  r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    r += p.rows();
  }
  return detail::make_result(rows, cols, std::move(out), "concat_rows", parts,
                             [offsets](TensorNode& o2) {
                               ConstMatMap g(o2.grad.data(), o2.rows, o2.cols);
                               for (size_t i = 0; i < o2.parents.size(); ++i) {
                                 auto& p = *o2.parents[i];
                                 if (!p.requires_grad) continue;
                                 Array gp(p.values.size());
                                 MatMap(gp.data(), p.rows, p.cols) = g.middleRows(offsets[i], p.rows);
                                 p.accumulate(gp);
                               }
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ParameterError("concat_cols: no parts");
  int rows = parts[0].rows();
  int cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Array out(static_cast<int64_t>(rows) * cols);
  MatMap o(out.data(), rows, cols);
  int c = 0;
  std::vector<int> offsets;
  offsets.reserve(parts.size());
  for (const auto& p : parts) {
    offsets.push_back(c);
    o.middleCols(c, p.cols()) = detail::mat(p);
    c += p.cols();
  }
  return detail::make_result(rows, cols, std::move(out), "concat_cols", parts,
                             [offsets](TensorNode& o2) {
                               ConstMatMap g(o2.grad.data(), o2.rows, o2.cols);
                               for (size_t i = 0; i < o2.parents.size(); ++i) {
                                 auto& p = *o2.parents[i];
                                 if (!p.requires_grad) continue;
                                 Array gp(p.values.size());
                                 MatMap(gp.data(), p.rows, p.cols) = g.middleCols(offsets[i], p.cols);
                                 p.accumulate(gp);
                               }
                             });
}

// Embedding lookup: rows of `table` selected by `ids`. Gradient scatter-adds.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  for (int id : ids) {
    if (id < 0 || id >= table.rows()) throw ParameterError("gather_rows: index out of range");
  }
  int m = static_cast<int>(ids.size());
  Array out(static_cast<int64_t>(m) * table.cols());
  MatMap o(out.data(), m, table.cols());
  for (int i = 0; i < m; ++i) o.row(i) = detail::mat(table).row(ids[i]);
  return detail::make_result(m, table.cols(), std::move(out), "gather_rows", {table},
                             [ids](TensorNode& o2) {
                               auto& t = *o2.parents[0];
                               if (!t.requires_grad) return;
                               t.ensure_grad();
                               MatMap tg(t.grad.data(), t.rows, t.cols);
                               ConstMatMap g(o2.grad.data(), o2.rows, o2.cols);
                               for (int i = 0; i < o2.rows; ++i) tg.row(ids[i]) += g.row(i);
                             });
}

// out[i, :] = x[i, :] * s[i]  with s an m x 1 column of scales.
inline Tensor row_scale(const Tensor& x, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != x.rows()) throw DimensionError("row_scale: scale must be m x 1");
  Array out(x.size());
  MatMap o(out.data(), x.rows(), x.cols());
  o = detail::mat(x);
  for (int i = 0; i < x.rows(); ++i) o.row(i) *= s->values[i];
  return detail::make_result(
      x.rows(), x.cols(), std::move(out), "row_scale", {x, s}, [](TensorNode& o2) {
        auto& x_n = *o2.parents[0];
        auto& s_n = *o2.parents[1];
        ConstMatMap g(o2.grad.data(), o2.rows, o2.cols);
        if (x_n.requires_grad) {
          Array gx(x_n.values.size());
          MatMap gm(gx.data(), x_n.rows, x_n.cols);
          gm = g;
          for (int i = 0; i < x_n.rows; ++i) gm.row(i) *= s_n.values[i];
          x_n.accumulate(gx);
        }
        if (s_n.requires_grad) {
          Array gs(s_n.values.size());
          for (int i = 0; i < o2.rows; ++i) {
            gs[i] = (g.row(i).array() * detail::mat(x_n).row(i).array()).sum();
          }
          s_n.accumulate(gs);
        }
      });
}

// out = x * s with s a 1x1 tensor (gradient flows to both).
inline Tensor scalar_scale(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("scalar_scale: scale must be 1 x 1");
  return detail::make_result(
      x.rows(), x.cols(), x->values * s->values[0], "scalar_scale", {x, s}, [](TensorNode& o) {
        auto& x_n = *o.parents[0];
        auto& s_n = *o.parents[1];
        if (x_n.requires_grad) x_n.accumulate(o.grad * s_n.values[0]);
        if (s_n.requires_grad) {
          Array gs(1);
          gs[0] = (o.grad * x_n.values).sum();
          s_n.accumulate(gs);
        }
      });
}

// ----------------------------- softmax family -----------------------------

// Row-wise softmax with temperature; max-subtraction keeps exp in range.
inline Tensor softmax(const Tensor& x, double temperature = 1.0) {
  if (temperature <= 0.0) throw ParameterError("softmax: temperature must be positive");
  Array out(x.size());
  MatMap o(out.data(), x.rows(), x.cols());
  ConstMatMap in = detail::mat(x);
  for (int r = 0; r < x.rows(); ++r) {
    double mx = in.row(r).maxCoeff();
    Eigen::ArrayXd e = ((in.row(r).array() - mx) / temperature).exp();
    o.row(r) = e / e.sum();
  }
  double inv_t = 1.0 / temperature;
  return detail::make_result(
      x.rows(), x.cols(), std::move(out), "softmax", {x}, [inv_t](TensorNode& o2) {
        auto& x_n = *o2.parents[0];
        if (!x_n.requires_grad) return;
        Array gx(x_n.values.size());
        MatMap gm(gx.data(), o2.rows, o2.cols);
        ConstMatMap y(o2.values.data(), o2.rows, o2.cols);
        ConstMatMap g(o2.grad.data(), o2.rows, o2.cols);
        for (int r = 0; r < o2.rows; ++r) {
          double dot = (g.row(r).array() * y.row(r).array()).sum();
          gm.row(r) = (g.row(r).array() - dot) * y.row(r).array() * inv_t;
        }
        x_n.accumulate(gx);
      });
}

// softmax(Q K^T / sqrt(D) + mask) V. Mask entries are added to the scores;
// use large negative values to block positions.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor* mask = nullptr) {
  if (q.cols() != k.cols()) throw DimensionError("attention: query/key width mismatch");
  if (k.rows() != v.rows()) throw DimensionError("attention: key/value count mismatch");
  if (mask != nullptr && (mask->rows() != q.rows() || mask->cols() != k.rows())) {
    throw DimensionError("attention: mask must be q x s");
  }
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  if (mask != nullptr) scores = add(scores, *mask);
  return matmul(softmax(scores), v);
}

// Causal mask for a q x s score matrix where query position i may attend to
// key positions j <= i + (s - q). For self-attention q == s.
inline Tensor causal_mask(int q, int s) {
  Tensor m = Tensor::zeros(q, s);
  const double neg = -1e30;
  int offset = s - q;
  for (int i = 0; i < q; ++i) {
    for (int j = i + offset + 1; j < s; ++j) m.at(i, j) = neg;
  }
  return m;
}

// ----------------------------- normalization -----------------------------

// Row-wise layer norm with learned gain and bias (both 1 x n).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("layer_norm: gain/bias must be 1 x cols(x)");
  }
  int n = x.cols();
  Array out(x.size());
  Array xhat(x.size());
  Array inv_std(x.rows());
  MatMap o(out.data(), x.rows(), n);
  MatMap xh(xhat.data(), x.rows(), n);
  ConstMatMap in = detail::mat(x);
  Eigen::Map<const Eigen::RowVectorXd> g(gain->values.data(), n);
  Eigen::Map<const Eigen::RowVectorXd> b(bias->values.data(), n);
  for (int r = 0; r < x.rows(); ++r) {
    double mean = in.row(r).mean();
    double var = (in.row(r).array() - mean).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    xh.row(r) = (in.row(r).array() - mean) * is;
    o.row(r) = xh.row(r).cwiseProduct(g) + b;
  }
  // Capture the normalized activations for the backward pass.
  auto xhat_p = std::make_shared<Array>(std::move(xhat));
  auto istd_p = std::make_shared<Array>(std::move(inv_std));
  return detail::make_result(
      x.rows(), n, std::move(out), "layer_norm", {x, gain, bias},
      [xhat_p, istd_p, n](TensorNode& o2) {
        auto& x_n = *o2.parents[0];
        auto& g_n = *o2.parents[1];
        auto& b_n = *o2.parents[2];
        ConstMatMap gr(o2.grad.data(), o2.rows, o2.cols);
        ConstMatMap xh(xhat_p->data(), o2.rows, o2.cols);
        Eigen::Map<const Eigen::RowVectorXd> g(g_n.values.data(), n);
        if (g_n.requires_grad) {
          Array gg(n);
          Eigen::Map<Eigen::RowVectorXd>(gg.data(), n) = (gr.array() * xh.array()).colwise().sum();
          g_n.accumulate(gg);
        }
        if (b_n.requires_grad) {
          Array gb(n);
          Eigen::Map<Eigen::RowVectorXd>(gb.data(), n) = gr.colwise().sum();
          b_n.accumulate(gb);
        }
        if (x_n.requires_grad) {
          Array gx(x_n.values.size());
          MatMap r(gx.data(), o2.rows, o2.cols);
          for (int i = 0; i < o2.rows; ++i) {
            Eigen::RowVectorXd dy = gr.row(i).cwiseProduct(g);
            double m1 = dy.mean();
            double m2 = dy.cwiseProduct(xh.row(i)).mean();
            r.row(i) = (((dy.array() - m1) - xh.row(i).array() * m2) * (*istd_p)[i]).matrix();
          }
          x_n.accumulate(gx);
        }
      });
}

// ----------------------------- losses -----------------------------

// Mean NLL over positions not listed in `ignore`. targets[t] is the token id
// position t must predict; ignored positions contribute nothing.
inline Tensor nll_loss(const Tensor& logits, const std::vector<int>& targets,
                       const std::set<int>& ignore = {}) {
  if (static_cast<int>(targets.size()) != logits.rows()) {
    throw DimensionError("nll_loss: one target per logits row required");
  }
  int vocab = logits.cols();
  std::vector<int> active;
  for (int t = 0; t < logits.rows(); ++t) {
    if (ignore.count(t)) continue;
    if (targets[t] < 0 || targets[t] >= vocab) {
      throw ParameterError("nll_loss: target id outside vocabulary");
    }
    active.push_back(t);
  }
  if (active.empty()) throw ParameterError("nll_loss: no active positions");
  ConstMatMap in = detail::mat(logits);
  double total = 0.0;
  for (int t : active) {
    double mx = in.row(t).maxCoeff();
    double lse = std::log((in.row(t).array() - mx).exp().sum()) + mx;
    total += lse - in(t, targets[t]);
  }
  Array out(1);
  out[0] = total / static_cast<double>(active.size());
  return detail::make_result(
      1, 1, std::move(out), "nll_loss", {logits},
      [targets, active](TensorNode& o) {
        auto& l = *o.parents[0];
        if (!l.requires_grad) return;
        double gscale = o.grad[0] / static_cast<double>(active.size());
        l.ensure_grad();
        MatMap lg(l.grad.data(), l.rows, l.cols);
        ConstMatMap in2(l.values.data(), l.rows, l.cols);
        for (int t : active) {
          double mx = in2.row(t).maxCoeff();
          Eigen::ArrayXd p = (in2.row(t).array() - mx).exp();
          p /= p.sum();
          lg.row(t) += (p * gscale).matrix();
          lg(t, targets[t]) -= gscale;
        }
      });
}

// D_KL(softmax(teacher/T) || softmax(student/T)) * T^2, averaged over rows.
// The teacher is treated as a constant: no gradient flows into it.
inline Tensor kl_divergence(const Tensor& teacher_logits, const Tensor& student_logits,
                            double temperature = 1.0) {
  if (!teacher_logits.same_shape(student_logits)) {
    throw DimensionError("kl_divergence: logits shapes differ");
  }
  if (temperature <= 0.0) throw ParameterError("kl_divergence: temperature must be positive");
  int rows = teacher_logits.rows();
  int cols = teacher_logits.cols();
  ConstMatMap tm = detail::mat(teacher_logits);
  ConstMatMap sm = detail::mat(student_logits);
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    double tmx = tm.row(r).maxCoeff();
    Eigen::ArrayXd tp = ((tm.row(r).array() - tmx) / temperature).exp();
    double tz = tp.sum();
    Eigen::ArrayXd tlog = (tm.row(r).array() - tmx) / temperature - std::log(tz);
    tp /= tz;
    double smx = sm.row(r).maxCoeff();
    Eigen::ArrayXd sp = ((sm.row(r).array() - smx) / temperature).exp();
    double sz = sp.sum();
    Eigen::ArrayXd slog = (sm.row(r).array() - smx) / temperature - std::log(sz);
    total += (tp * (tlog - slog)).sum();
  }
  Array out(1);
  out[0] = total * temperature * temperature / static_cast<double>(rows);
  double temp = temperature;
  return detail::make_result(
      1, 1, std::move(out), "kl_divergence", {teacher_logits, student_logits},
      [temp](TensorNode& o) {
        auto& t_n = *o.parents[0];
        auto& s_n = *o.parents[1];
        if (!s_n.requires_grad) return;
        double gscale = o.grad[0] * temp / static_cast<double>(t_n.rows);
        s_n.ensure_grad();
        MatMap sg(s_n.grad.data(), s_n.rows, s_n.cols);
        ConstMatMap tm2(t_n.values.data(), t_n.rows, t_n.cols);
        ConstMatMap sm2(s_n.values.data(), s_n.rows, s_n.cols);
        for (int r = 0; r < s_n.rows; ++r) {
          double tmx = tm2.row(r).maxCoeff();
          Eigen::ArrayXd tp = ((tm2.row(r).array() - tmx) / temp).exp();
          tp /= tp.sum();
          double smx = sm2.row(r).maxCoeff();
          Eigen::ArrayXd sp = ((sm2.row(r).array() - smx) / temp).exp();
          sp /= sp.sum();
          sg.row(r) += ((sp - tp) * gscale).matrix();
        }
      });
}

// ----------------------------- backward -----------------------------

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ParameterError("backward: loss must be scalar");
  if (!loss.requires_grad()) return;

  // Iterative depth-first topological sort over the recorded graph.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      TensorNode* child = node->parents[next_child].get();
      ++next_child;
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Array::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && n->grad.size() == n->values.size()) n->backprop(*n);
  }
}

inline void zero_grads(const std::vector<Tensor>& params) {
  for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
}

// ----------------------------- finite differences -----------------------------

// Central-difference check of analytic gradients. `computation` must rebuild
// the full forward pass from scratch (re-seeding any RandomSource it uses) and
// return a scalar loss. Returns the worst relative error over all parameter
// entries, with the convention |a - n| / max(|a|, |n|, 1e-8).
inline double finite_diff_check(const std::function<Tensor()>& computation,
                                const std::vector<Tensor>& params, double epsilon = 1e-5) {
  Tensor base = computation();
  if (base.size() != 1) throw ParameterError("finite_diff_check: computation must be scalar");
  {
    Tensor repeat = computation();
    if (repeat->values[0] != base->values[0]) {
      throw VerificationError("finite_diff_check: computation is not deterministic");
    }
  }
  zero_grads(params);
  backward(base);
  std::vector<Array> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    analytic.push_back(p.has_grad() ? p.node()->grad : Array::Zero(p.size()));
  }

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (int64_t i = 0; i < p.size(); ++i) {
      double saved = p.node()->values[i];
      double plus, minus;
      {
        NoGradGuard ng;
        p.node()->values[i] = saved + epsilon;
        plus = computation().item();
        p.node()->values[i] = saved - epsilon;
        minus = computation().item();
        p.node()->values[i] = saved;
      }
      double numeric = (plus - minus) / (2.0 * epsilon);
      double a = analytic[pi][i];
      double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ctxcomp
