#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sessrec/errors.hpp"
#include "sessrec/tensor.hpp"

namespace sessrec {

// Adam with bias correction. Holds first/second moment buffers per
// parameter; step() consumes the accumulated gradients and zeroes them.
// Optional weight_decay adds l2 * w to the gradient before the moment
// update (classic L2-through-gradient coupling).
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
       T eps = T(1e-8), T weight_decay = T(0))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
        weight_decay_(weight_decay) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step() {
    for (const auto& p : params_)
      if (!p.has_grad())
        throw ContractError("adam: parameter with shape " + shape_str(p.shape()) +
                            " has no gradient");
    ++step_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& w = params_[k].mut_value();
      const auto& g = params_[k].grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        T gi = g[i];
        if (weight_decay_ != T(0)) gi += weight_decay_ * w[i];
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * gi;
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * gi * gi;
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      params_[k].zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }
  T lr() const { return lr_; }
  void set_lr(T lr) { lr_ = lr; }

  std::size_t num_params() const { return params_.size(); }
  std::vector<T>& moment1(std::size_t k) { return m_[k]; }
  std::vector<T>& moment2(std::size_t k) { return v_[k]; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T lr_, beta1_, beta2_, eps_, weight_decay_;
  std::int64_t step_ = 0;
};

}  // namespace sessrec
