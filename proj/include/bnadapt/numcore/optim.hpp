#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "bnadapt/numcore/tensor.hpp"

namespace bnadapt {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

// Adaptive moment estimation over a fixed list of tensors.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // params[i] -= lr * mhat / (sqrt(vhat) + eps), moments allocated on first use.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, double lr) {
    if (m_.empty()) {
      for (const Tensor* p : params) {
        m_.emplace_back(p->shape(), 0.0);
        v_.emplace_back(p->shape(), 0.0);
      }
    }
    if (params.size() != m_.size() || grads.size() != params.size()) throw ShapeError("Adam: parameter list changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      require_same_shape(p, g, "Adam");
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * p[i];
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// lr_t = base * (1 + cos(pi t / total)) / 2
inline double cosine_annealing(double base, std::size_t t, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

}  // namespace bnadapt
