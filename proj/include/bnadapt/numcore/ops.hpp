#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "bnadapt/numcore/autograd.hpp"
#include "bnadapt/numcore/tensor.hpp"

namespace bnadapt {

inline void require_row_stochastic(const Tensor& probs, const char* op) {
  probs.check_finite(op);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      if (probs(i, j) < 0.0) throw NumericError(std::string(op) + ": negative probability");
      s += probs(i, j);
    }
    if (std::abs(s - 1.0) > 1e-9) throw NumericError(std::string(op) + ": row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
}

// Mean cross-entropy of one-hot labels against probability rows.
inline double cross_entropy(const Tensor& one_hot, const Tensor& probs) {
  require_same_shape(one_hot, probs, "cross_entropy");
  one_hot.check_finite("cross_entropy labels");
  require_row_stochastic(probs, "cross_entropy");
  ag::Tape tape;
  return ag::cross_entropy(tape.constant(probs), one_hot).value().item();
}

// Mean entropy of probability rows.
inline double prediction_entropy(const Tensor& probs) {
  require_row_stochastic(probs, "prediction_entropy");
  ag::Tape tape;
  return ag::prediction_entropy(tape.constant(probs)).value().item();
}

inline Tensor softmax(const Tensor& logits) { return ag::softmax_values(logits); }

inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor t = Tensor::zeros(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) t(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return t;
}

// Unbiased covariance of the rows of x.
inline Tensor covariance(const Tensor& x) {
  if (x.rows() < 2) throw ShapeError("covariance needs N >= 2 rows, got " + std::to_string(x.rows()));
  ag::Tape tape;
  return ag::covariance(tape.constant(x)).value();
}

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& s) {
  Eigen::MatrixXd m(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s(i, j);
  return m;
}

inline Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t = Tensor::zeros(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

inline void require_symmetric(const Tensor& s, const char* op) {
  if (s.rows() != s.cols()) throw ShapeError(std::string(op) + ": matrix not square");
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = i + 1; j < s.cols(); ++j)
      if (std::abs(s(i, j) - s(j, i)) > 1e-9) throw NumericError(std::string(op) + ": matrix not symmetric");
}

// V f(lambda) V^T over the eigenpairs of a symmetric PSD matrix; eigenvalues
// are shifted by ridge and floored at ridge.
template <typename F>
Tensor psd_spectral(const Tensor& s, double ridge, const char* op, F f) {
  require_symmetric(s, op);
  s.check_finite(op);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(to_eigen(s));
  if (eig.info() != Eigen::Success) throw NumericError(std::string(op) + ": eigendecomposition failed");
  Eigen::VectorXd lambda = eig.eigenvalues();
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) < -1e-6) throw NumericError(std::string(op) + ": negative eigenvalue " + std::to_string(lambda(i)));
    double l = std::max(lambda(i) + ridge, ridge);
    if (!(l > 0.0)) throw NumericError(std::string(op) + ": singular matrix with ridge 0");
    lambda(i) = f(l);
  }
  const Eigen::MatrixXd& v = eig.eigenvectors();
  Eigen::MatrixXd r = v * lambda.asDiagonal() * v.transpose();
  // Exact symmetry.
  r = 0.5 * (r + r.transpose()).eval();
  return from_eigen(r);
}

}  // namespace detail

// R with R (S + ridge I) R = I, via symmetric eigendecomposition.
inline Tensor inv_sqrt_psd(const Tensor& s, double ridge) {
  return detail::psd_spectral(s, ridge, "inv_sqrt_psd", [](double l) { return 1.0 / std::sqrt(l); });
}

// Symmetric square root of S + ridge I.
inline Tensor sqrt_psd(const Tensor& s, double ridge = 0.0) {
  if (ridge == 0.0) {
    // Allow exactly singular PSD input: zero eigenvalues map to zero.
    detail::require_symmetric(s, "sqrt_psd");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(detail::to_eigen(s));
    Eigen::VectorXd lambda = eig.eigenvalues();
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
      if (lambda(i) < -1e-6) throw NumericError("sqrt_psd: negative eigenvalue");
      lambda(i) = std::sqrt(std::max(lambda(i), 0.0));
    }
    const Eigen::MatrixXd& v = eig.eigenvectors();
    Eigen::MatrixXd r = v * lambda.asDiagonal() * v.transpose();
    r = 0.5 * (r + r.transpose()).eval();
    return detail::from_eigen(r);
  }
  return detail::psd_spectral(s, ridge, "sqrt_psd", [](double l) { return std::sqrt(l); });
}

using ScalarFunction = std::function<ag::Var(ag::Tape&, const ag::Var&)>;

// Max relative error max_i |g_analytic - g_fd| / max(1, |g_fd|) between the
// tape gradient of f at `point` and central finite differences.
inline double grad_check(const ScalarFunction& f, const Tensor& point, double step) {
  if (step < 1e-7 || step > 1e-3) throw Error("grad_check: step outside [1e-7, 1e-3]");
  ag::Tape tape;
  const ag::Var x = tape.parameter(point);
  const ag::Var y = f(tape, x);
  if (!y.value().all_finite()) throw NumericError("grad_check: non-finite value at the point");
  tape.backward(y);
  const Tensor analytic = x.grad();

  auto eval = [&](const Tensor& p) {
    ag::Tape t;
    const double v = f(t, t.constant(p)).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite value at perturbed point");
    return v;
  };

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace bnadapt
