#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sapo/errors.hpp"

namespace sapo {

enum class OptimizerKind { sgd, adam };

// SGD or bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8).
class Optimizer {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  Optimizer(OptimizerKind kind, double lr, std::size_t n) : kind_(kind), lr_(lr) {
    if (lr < 0.0) throw ConfigError("optimizer: learning rate must be >= 0");
    if (kind == OptimizerKind::adam) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
    }
    n_ = n;
  }

  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != n_ || grads.size() != n_)
      throw ContractError("optimizer: parameter/gradient length mismatch");
    for (double g : grads)
      if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient");
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < n_; ++i) params[i] -= lr_ * grads[i];
      return;
    }
    t_ += 1;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < n_; ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grads[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grads[i] * grads[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      params[i] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t n_ = 0;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace sapo
