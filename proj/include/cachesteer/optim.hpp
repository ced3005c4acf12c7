#pragma once

// Adam with optional decoupled weight decay (AdamW when decay > 0).

#include <cmath>
#include <vector>

#include "cachesteer/tensor.hpp"

namespace cachesteer {

class Adam {
 public:
  Adam(std::vector<Tensor> params, real lr, real weight_decay = 0, real beta1 = real(0.9),
       real beta2 = real(0.999), real eps = real(1e-8))
      : params_(std::move(params)),
        lr_(lr),
        weight_decay_(weight_decay),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), real(0));
      v_[i].assign(params_[i].size(), real(0));
    }
  }

  void set_lr(real lr) { lr_ = lr; }
  real lr() const { return lr_; }

  void step() {
    ++t_;
    real bc1 = real(1) - std::pow(beta1_, real(t_));
    real bc2 = real(1) - std::pow(beta2_, real(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto& data = p.mutable_data();
      const auto& g = p.grad();
      for (size_t j = 0; j < data.size(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (real(1) - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (real(1) - beta2_) * g[j] * g[j];
        real mhat = m_[i][j] / bc1;
        real vhat = v_[i][j] / bc2;
        if (weight_decay_ > 0) data[j] -= lr_ * weight_decay_ * data[j];
        data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  real lr_;
  real weight_decay_;
  real beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<real>> m_, v_;
};

}  // namespace cachesteer
