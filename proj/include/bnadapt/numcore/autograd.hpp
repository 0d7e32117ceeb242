#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "bnadapt/numcore/tensor.hpp"

// Define-by-run reverse-mode differentiation over a tape of matrix
// operations. Nodes are appended in evaluation order, so walking the tape
// backwards is a reverse topological order.
namespace bnadapt::ag {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr); }
  Var parameter(Tensor value) { return push(std::move(value), true, {}, nullptr); }

  // Records an operation; it requires a gradient iff any parent does.
  Var record(Tensor value, std::vector<std::size_t> parents, Backward backward) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    return push(std::move(value), needs, std::move(parents), needs ? std::move(backward) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a parent, or nullptr if the parent is not differentiable.
  Tensor* grad_target(std::size_t id) {
    Node& n = nodes_[id];
    return n.requires_grad ? &n.grad : nullptr;
  }

  // Runs the backward pass from a single-element root. Returns the ids of
  // the nodes whose backward function ran, in visit order.
  std::vector<std::size_t> backward(Var root) {
    if (root.tape() != this) throw Error("backward: variable from another tape");
    if (nodes_[root.id()].value.size() != 1) throw ShapeError("backward: root must be a scalar");
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad = Tensor(n.value.shape(), 0.0);
    }
    if (!nodes_[root.id()].requires_grad) return {};
    nodes_[root.id()].grad[0] = 1.0;
    std::vector<std::size_t> visited;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward) continue;
      visited.push_back(id);
      n.backward(*this, id);
    }
    return visited;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, std::vector<std::size_t> parents, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(parents), std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error("operands recorded on different tapes");
  return *a.tape();
}

inline void require_row(const Tensor& row, std::size_t cols, const char* op) {
  if (row.rows() != 1 || row.cols() != cols) {
    throw ShapeError(std::string(op) + ": expected 1x" + std::to_string(cols) + " row, got " +
                     row.shape_string());
  }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(bnadapt::matmul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (Tensor* ga = tp.grad_target(ia)) {
      const Tensor& B = tp.value(ib);
      // dA = G * B^T
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t k = 0; k < B.rows(); ++k) {
          double s = 0.0;
          const double* gr = &g(i, 0);
          const double* br = &B(k, 0);
          for (std::size_t j = 0; j < g.cols(); ++j) s += gr[j] * br[j];
          (*ga)(i, k) += s;
        }
    }
    if (Tensor* gb = tp.grad_target(ib)) {
      const Tensor& A = tp.value(ia);
      // dB = A^T * G
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t k = 0; k < A.cols(); ++k) {
          const double av = A(i, k);
          if (av == 0.0) continue;
          double* out = &(*gb)(k, 0);
          const double* gr = &g(i, 0);
          for (std::size_t j = 0; j < g.cols(); ++j) out[j] += av * gr[j];
        }
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    for (std::size_t id : {ia, ib})
      if (Tensor* gt = tp.grad_target(id))
        for (std::size_t i = 0; i < g.size(); ++i) (*gt)[i] += g[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (Tensor* ga = tp.grad_target(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gb = tp.grad_target(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia, c](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (Tensor* ga = tp.grad_target(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
  });
}

// x (N x D) + row (1 x D), broadcast over rows.
inline Var add_row(const Var& x, const Var& row) {
  Tape& t = detail::same_tape(x, row);
  const Tensor& X = x.value();
  detail::require_row(row.value(), X.cols(), "add_row");
  Tensor out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += row.value()[j];
  const std::size_t ix = x.id(), ir = row.id();
  return t.record(std::move(out), {ix, ir}, [ix, ir](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (Tensor* gx = tp.grad_target(ix))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (Tensor* gr = tp.grad_target(ir))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gr)[j] += g(i, j);
  });
}

// x (N x D) * row (1 x D), broadcast over rows.
inline Var mul_row(const Var& x, const Var& row) {
  Tape& t = detail::same_tape(x, row);
  const Tensor& X = x.value();
  detail::require_row(row.value(), X.cols(), "mul_row");
  Tensor out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) *= row.value()[j];
  const std::size_t ix = x.id(), ir = row.id();
  return t.record(std::move(out), {ix, ir}, [ix, ir](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& Xv = tp.value(ix);
    const Tensor& R = tp.value(ir);
    if (Tensor* gx = tp.grad_target(ix))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gx)(i, j) += g(i, j) * R[j];
    if (Tensor* gr = tp.grad_target(ir))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gr)[j] += g(i, j) * Xv(i, j);
  });
}

inline Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& X = tp.value(ix);
    if (Tensor* gx = tp.grad_target(ix))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (X[i] > 0.0) (*gx)[i] += g[i];
  });
}

inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t ix = x.id();
  return x.tape()->record(bnadapt::slice_rows(x.value(), begin, end), {ix},
                          [ix, begin](Tape& tp, std::size_t self) {
                            const Tensor& g = tp.grad(self);
                            if (Tensor* gx = tp.grad_target(ix)) {
                              const std::size_t off = begin * g.cols();
                              for (std::size_t i = 0; i < g.size(); ++i) (*gx)[off + i] += g[i];
                            }
                          });
}

inline Var concat_rows(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t na = a.value().size();
  return t.record(bnadapt::concat_rows(a.value(), b.value()), {ia, ib}, [ia, ib, na](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (Tensor* ga = tp.grad_target(ia))
      for (std::size_t i = 0; i < na; ++i) (*ga)[i] += g[i];
    if (Tensor* gb = tp.grad_target(ib))
      for (std::size_t i = na; i < g.size(); ++i) (*gb)[i - na] += g[i];
  });
}

// [x | row] where the 1 x E row is repeated for every row of x.
inline Var concat_cols_broadcast(const Var& x, const Var& row) {
  Tape& t = detail::same_tape(x, row);
  const Tensor& X = x.value();
  const Tensor& R = row.value();
  if (R.rows() != 1) throw ShapeError("concat_cols_broadcast: expected a row");
  const std::size_t d = X.cols(), e = R.cols();
  Tensor out = Tensor::zeros(X.rows(), d + e);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out(i, j) = X(i, j);
    for (std::size_t j = 0; j < e; ++j) out(i, d + j) = R[j];
  }
  const std::size_t ix = x.id(), ir = row.id();
  return t.record(std::move(out), {ix, ir}, [ix, ir, d, e](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor* gx = tp.grad_target(ix);
    Tensor* gr = tp.grad_target(ir);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      if (gx)
        for (std::size_t j = 0; j < d; ++j) (*gx)(i, j) += g(i, j);
      if (gr)
        for (std::size_t j = 0; j < e; ++j) (*gr)[j] += g(i, d + j);
    }
  });
}

inline Var col_mean(const Var& x) {
  const std::size_t ix = x.id();
  return x.tape()->record(column_mean(x.value()), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (Tensor* gx = tp.grad_target(ix)) {
      const double inv_n = 1.0 / static_cast<double>(gx->rows());
      for (std::size_t i = 0; i < gx->rows(); ++i)
        for (std::size_t j = 0; j < gx->cols(); ++j) (*gx)(i, j) += g[j] * inv_n;
    }
  });
}

// Population variance per column. The mean is recomputed internally; since
// deviations sum to zero the mean's own dependence on x drops out.
inline Var col_var(const Var& x) {
  const Tensor& X = x.value();
  const Tensor mean = column_mean(X);
  const std::size_t ix = x.id();
  return x.tape()->record(column_variance(X, mean), {ix}, [ix, mean](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& Xv = tp.value(ix);
    if (Tensor* gx = tp.grad_target(ix)) {
      const double two_over_n = 2.0 / static_cast<double>(Xv.rows());
      for (std::size_t i = 0; i < Xv.rows(); ++i)
        for (std::size_t j = 0; j < Xv.cols(); ++j)
          (*gx)(i, j) += g[j] * two_over_n * (Xv(i, j) - mean[j]);
    }
  });
}

// (x - mean) / sqrt(var + eps), mean and var as 1 x D rows.
inline Var normalize(const Var& x, const Var& mean, const Var& var, double eps) {
  Tape& t = detail::same_tape(x, mean);
  detail::same_tape(x, var);
  const Tensor& X = x.value();
  detail::require_row(mean.value(), X.cols(), "normalize(mean)");
  detail::require_row(var.value(), X.cols(), "normalize(var)");
  Tensor inv_std = Tensor::zeros(1, X.cols());
  for (std::size_t j = 0; j < X.cols(); ++j) {
    const double v = var.value()[j] + eps;
    if (!(v > 0.0)) throw NumericError("normalize: non-positive variance + eps");
    inv_std[j] = 1.0 / std::sqrt(v);
  }
  Tensor out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) = (X(i, j) - mean.value()[j]) * inv_std[j];
  const std::size_t ix = x.id(), im = mean.id(), iv = var.id();
  return t.record(std::move(out), {ix, im, iv}, [ix, im, iv, inv_std](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& Xv = tp.value(ix);
    const Tensor& M = tp.value(im);
    Tensor* gx = tp.grad_target(ix);
    Tensor* gm = tp.grad_target(im);
    Tensor* gv = tp.grad_target(iv);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) {
        const double gij = g(i, j);
        const double s = inv_std[j];
        if (gx) (*gx)(i, j) += gij * s;
        if (gm) (*gm)[j] -= gij * s;
        if (gv) (*gv)[j] += gij * (Xv(i, j) - M[j]) * (-0.5) * s * s * s;
      }
  });
}

// Each row standardized across its own features (population statistics).
inline Var row_standardize(const Var& x, double eps) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), d = X.cols();
  Tensor out = Tensor::zeros(n, d);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += X(i, j);
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) v += (X(i, j) - m) * (X(i, j) - m);
    v /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(v + eps);
    for (std::size_t j = 0; j < d; ++j) out(i, j) = (X(i, j) - m) * inv_std[i];
  }
  const std::size_t ix = x.id();
  Tensor y = out;
  return x.tape()->record(std::move(out), {ix}, [ix, y = std::move(y), inv_std](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor* gx = tp.grad_target(ix);
    if (!gx) return;
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double gm = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        gm += g(i, j);
        gy += g(i, j) * y(i, j);
      }
      gm /= static_cast<double>(d);
      gy /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) (*gx)(i, j) += inv_std[i] * (g(i, j) - gm - y(i, j) * gy);
    }
  });
}

// Row-wise softmax, shifted by the row max.
inline Tensor softmax_values(const Tensor& logits) {
  Tensor p = logits;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double mx = p(i, 0);
    for (std::size_t j = 1; j < p.cols(); ++j) mx = std::max(mx, p(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) {
      p(i, j) = std::exp(p(i, j) - mx);
      s += p(i, j);
    }
    for (std::size_t j = 0; j < p.cols(); ++j) p(i, j) /= s;
  }
  return p;
}

inline Var softmax(const Var& logits) {
  Tensor p = softmax_values(logits.value());
  const std::size_t il = logits.id();
  Tensor pc = p;
  return logits.tape()->record(std::move(p), {il}, [il, pc = std::move(pc)](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor* gl = tp.grad_target(il);
    if (!gl) return;
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * pc(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) (*gl)(i, j) += pc(i, j) * (g(i, j) - dot);
    }
  });
}

// Mean cross-entropy -(1/N) sum y log p against one-hot labels, taking
// probabilities directly.
inline Var cross_entropy(const Var& probs, const Tensor& one_hot) {
  const Tensor& P = probs.value();
  require_same_shape(P, one_hot, "cross_entropy");
  const double n = static_cast<double>(P.rows());
  double loss = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i)
    if (one_hot[i] != 0.0) loss -= one_hot[i] * std::log(P[i]);
  loss /= n;
  const std::size_t ip = probs.id();
  return probs.tape()->record(Tensor::scalar(loss), {ip}, [ip, one_hot, n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Tensor& Pv = tp.value(ip);
    if (Tensor* gp = tp.grad_target(ip))
      for (std::size_t i = 0; i < Pv.size(); ++i)
        if (one_hot[i] != 0.0) (*gp)[i] -= g * one_hot[i] / (n * Pv[i]);
  });
}

// Mean entropy (1/N) sum_n H(p_n) of probability rows; 0 log 0 := 0.
inline Var prediction_entropy(const Var& probs) {
  const Tensor& P = probs.value();
  const double n = static_cast<double>(P.rows());
  double h = 0.0;
  for (double p : P.values())
    if (p > 0.0) h -= p * std::log(p);
  h /= n;
  const std::size_t ip = probs.id();
  return probs.tape()->record(Tensor::scalar(h), {ip}, [ip, n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Tensor& Pv = tp.value(ip);
    if (Tensor* gp = tp.grad_target(ip))
      for (std::size_t i = 0; i < Pv.size(); ++i)
        if (Pv[i] > 0.0) (*gp)[i] -= g * (std::log(Pv[i]) + 1.0) / n;
  });
}

// Fused, log-sum-exp stable softmax + mean cross-entropy over class indices.
inline Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& Z = logits.value();
  if (labels.size() != Z.rows()) throw ShapeError("softmax_cross_entropy: label count mismatch");
  Tensor p = softmax_values(Z);
  const double n = static_cast<double>(Z.rows());
  double loss = 0.0;
  for (std::size_t i = 0; i < Z.rows(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= Z.cols()) throw ShapeError("softmax_cross_entropy: label out of range");
    double mx = Z(i, 0);
    for (std::size_t j = 1; j < Z.cols(); ++j) mx = std::max(mx, Z(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < Z.cols(); ++j) s += std::exp(Z(i, j) - mx);
    loss += mx + std::log(s) - Z(i, y);
  }
  loss /= n;
  std::vector<int> y(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return logits.tape()->record(Tensor::scalar(loss), {il}, [il, p = std::move(p), y = std::move(y), n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    Tensor* gl = tp.grad_target(il);
    if (!gl) return;
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) {
        const double target = static_cast<int>(j) == y[i] ? 1.0 : 0.0;
        (*gl)(i, j) += g * (p(i, j) - target) / n;
      }
  });
}

// Fused mean softmax entropy of logits. dH/dz_j = -p_j (log p_j + H).
inline Var softmax_entropy(const Var& logits) {
  const Tensor& Z = logits.value();
  Tensor p = softmax_values(Z);
  const double n = static_cast<double>(Z.rows());
  std::vector<double> row_h(Z.rows(), 0.0);
  double h = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (std::size_t j = 0; j < p.cols(); ++j)
      if (p(i, j) > 0.0) row_h[i] -= p(i, j) * std::log(p(i, j));
    h += row_h[i];
  }
  h /= n;
  const std::size_t il = logits.id();
  return logits.tape()->record(Tensor::scalar(h), {il}, [il, p = std::move(p), row_h = std::move(row_h), n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    Tensor* gl = tp.grad_target(il);
    if (!gl) return;
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) {
        const double pij = p(i, j);
        if (pij > 0.0) (*gl)(i, j) -= g * pij * (std::log(pij) + row_h[i]) / n;
      }
  });
}

// Unbiased sample covariance (divisor N - 1) of the rows of x.
inline Var covariance(const Var& x) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), d = X.cols();
  if (n < 2) throw ShapeError("covariance needs at least 2 rows");
  const Tensor mean = column_mean(X);
  Tensor centered = X;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) -= mean[j];
  Tensor cov = Tensor::zeros(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double ca = centered(i, a);
      for (std::size_t b = 0; b < d; ++b) cov(a, b) += ca * centered(i, b);
    }
  const double denom = static_cast<double>(n - 1);
  for (auto& v : cov.values()) v /= denom;
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(cov), {ix}, [ix, centered = std::move(centered), denom](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor* gx = tp.grad_target(ix);
    if (!gx) return;
    const std::size_t d = g.rows();
    // dX = Xc (G + G^T) / (N - 1)
    for (std::size_t i = 0; i < centered.rows(); ++i)
      for (std::size_t b = 0; b < d; ++b) {
        double s = 0.0;
        for (std::size_t a = 0; a < d; ++a) s += centered(i, a) * (g(a, b) + g(b, a));
        (*gx)(i, b) += s / denom;
      }
  });
}

inline Var sum_squares(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v * v;
  const std::size_t ix = x.id();
  return x.tape()->record(Tensor::scalar(s), {ix}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Tensor& X = tp.value(ix);
    if (Tensor* gx = tp.grad_target(ix))
      for (std::size_t i = 0; i < X.size(); ++i) (*gx)[i] += 2.0 * g * X[i];
  });
}

inline Var mean_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const double n = static_cast<double>(x.value().size());
  const std::size_t ix = x.id();
  return x.tape()->record(Tensor::scalar(s / n), {ix}, [ix, n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    if (Tensor* gx = tp.grad_target(ix))
      for (auto& v : gx->values()) v += g / n;
  });
}

}  // namespace bnadapt::ag
