#pragma once

#include <cstdint>
#include <vector>

#include "tps/tensor.hpp"

namespace tps {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer with bias correction. step() consumes the
// accumulated gradients and zeroes them.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg);

  void step();
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

  long step_count() const { return step_; }
  std::size_t size() const { return params_.size(); }
  const Parameter& param(std::size_t i) const { return *params_[i]; }
  Tensor& first_moment(std::size_t i) { return m_[i]; }
  Tensor& second_moment(std::size_t i) { return v_[i]; }
  void set_step_count(long t) { step_ = t; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  long step_ = 0;
};

}  // namespace tps
