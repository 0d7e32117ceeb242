#pragma once

// Finite-difference cases for every differentiable primitive. Shared by the
// numcore unit tests and the acceptance run.

#include <string>
#include <vector>

#include "bnadapt/adapt.hpp"
#include "bnadapt/numcore.hpp"

namespace bnadapt::testing {

inline Tensor random_matrix(RandomStream& rs, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t = Tensor::zeros(r, c);
  for (auto& v : t.values()) v = scale * rs.normal();
  return t;
}

struct GradCase {
  std::string name;
  std::size_t rows, cols;
  ScalarFunction f;
};

// Scalar readout that touches every entry with a distinct weight.
inline ag::Var readout(ag::Tape& t, const ag::Var& y, const Tensor& w) {
  return ag::add(ag::sum_squares(y), ag::mean_all(ag::matmul(y, t.constant(w))));
}

// Constants (weights, labels) are drawn once per case from `rs`, so the
// function stays fixed while the point varies.
inline std::vector<GradCase> gradient_cases(RandomStream& rs) {
  std::vector<GradCase> cases;
  const std::size_t n = 5, d = 3;
  const Tensor w = random_matrix(rs, d, 2);
  const Tensor a = random_matrix(rs, n, 4);
  const Tensor b = random_matrix(rs, d, 4);
  const Tensor row = random_matrix(rs, 1, d);
  const Tensor other = random_matrix(rs, n, d);
  const Tensor w4 = random_matrix(rs, 4, 2);
  const Tensor gamma = random_matrix(rs, 1, d);
  const Tensor beta = random_matrix(rs, 1, d);
  const std::vector<int> labels = {0, 2, 1, 2, 0};
  const Tensor onehot = one_hot(labels, d);
  const Tensor target = random_matrix(rs, 7, d, 1.5);
  const Tensor bias4 = random_matrix(rs, 1, 4);
  const Tensor wide = random_matrix(rs, 2 * d, 2);
  const Tensor square = random_matrix(rs, d, d);
  const Tensor w2 = random_matrix(rs, 2, 2);

  auto add_case = [&](std::string name, std::size_t r, std::size_t c, ScalarFunction f) {
    cases.push_back({std::move(name), r, c, std::move(f)});
  };

  add_case("matmul (left operand)", n, 4, [=](ag::Tape& t, const ag::Var& x) {
    return readout(t, ag::matmul(x, t.constant(transpose(b))), w);
  });
  add_case("matmul (right operand)", 4, d, [=](ag::Tape& t, const ag::Var& x) {
    return readout(t, ag::matmul(t.constant(a), x), w);
  });
  add_case("affine", n, d, [=](ag::Tape& t, const ag::Var& x) {
    return readout(t, ag::add_row(ag::matmul(x, t.constant(b)), t.constant(bias4)), w4);
  });
  add_case("add / sub / scale", n, d, [=](ag::Tape& t, const ag::Var& x) {
    const ag::Var y = ag::sub(ag::add(x, t.constant(other)), ag::scale(x, 0.3));
    return readout(t, y, w);
  });
  add_case("add_row / mul_row (row operand)", 1, d, [=](ag::Tape& t, const ag::Var& x) {
    return readout(t, ag::mul_row(ag::add_row(t.constant(other), x), x), w);
  });
  add_case("relu", n, d, [=](ag::Tape& t, const ag::Var& x) { return readout(t, ag::relu(x), w); });
  add_case("slice_rows / concat_rows", n, d, [=](ag::Tape& t, const ag::Var& x) {
    const ag::Var y = ag::concat_rows(ag::slice_rows(x, 3, 5), ag::slice_rows(x, 0, 2));
    return readout(t, y, w);
  });
  add_case("concat_cols_broadcast", 1, d, [=](ag::Tape& t, const ag::Var& x) {
    const ag::Var y = ag::concat_cols_broadcast(t.constant(other), x);
    return readout(t, ag::matmul(y, t.constant(wide)), w2);
  });
  add_case("col_mean / col_var", n, d, [=](ag::Tape& t, const ag::Var& x) {
    return ag::add(readout(t, ag::col_mean(x), w), readout(t, ag::col_var(x), w));
  });
  add_case("batchnorm train mode", n, d, [=](ag::Tape& t, const ag::Var& x) {
    const ag::Var h = ag::normalize(x, ag::col_mean(x), ag::col_var(x), kBatchNormEpsilon);
    const ag::Var y = ag::add_row(ag::mul_row(h, t.constant(gamma)), t.constant(beta));
    return ag::softmax_cross_entropy(y, labels);
  });
  add_case("batchnorm with context statistics", 4 + n, d, [=](ag::Tape& t, const ag::Var& x) {
    // Rows 0..3 are context-only; statistics come from all rows, the loss
    // from the last n rows.
    const ag::Var q = ag::slice_rows(x, 4, 4 + n);
    const ag::Var h = ag::normalize(q, ag::col_mean(x), ag::col_var(x), kBatchNormEpsilon);
    const ag::Var y = ag::add_row(ag::mul_row(h, t.constant(gamma)), t.constant(beta));
    return ag::softmax_cross_entropy(y, labels);
  });
  add_case("row_standardize", n, d, [=](ag::Tape& t, const ag::Var& x) {
    return readout(t, ag::row_standardize(x, kBatchNormEpsilon), w);
  });
  add_case("softmax + cross_entropy", n, d, [=](ag::Tape&, const ag::Var& x) {
    return ag::cross_entropy(ag::softmax(x), onehot);
  });
  add_case("softmax + prediction_entropy", n, d, [=](ag::Tape&, const ag::Var& x) {
    return ag::prediction_entropy(ag::softmax(x));
  });
  add_case("softmax_cross_entropy", n, d, [=](ag::Tape&, const ag::Var& x) {
    return ag::softmax_cross_entropy(x, labels);
  });
  add_case("softmax_entropy", n, d, [=](ag::Tape&, const ag::Var& x) { return ag::softmax_entropy(x); });
  add_case("covariance", n, d, [=](ag::Tape& t, const ag::Var& x) { return readout(t, ag::covariance(x), w); });
  add_case("coral_penalty", n, d, [=](ag::Tape& t, const ag::Var& x) {
    return coral_penalty(x, t.constant(target));
  });
  add_case("cross_entropy . softmax . affine", n, d, [=](ag::Tape& t, const ag::Var& x) {
    const ag::Var z = ag::add_row(ag::matmul(x, t.constant(square)), t.constant(row));
    return ag::softmax_cross_entropy(z, labels);
  });
  add_case("batchnorm -> affine -> entropy", n, d, [=](ag::Tape& t, const ag::Var& x) {
    const ag::Var h = ag::normalize(x, ag::col_mean(x), ag::col_var(x), kBatchNormEpsilon);
    const ag::Var z = ag::add_row(ag::matmul(h, t.constant(transpose(square))), t.constant(row));
    return ag::softmax_entropy(z);
  });
  return cases;
}

}  // namespace bnadapt::testing
