#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cct/tensor.hpp"

namespace cct {

struct SgdConfig {
  double lr = 1e-2;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void sgd_step(const std::vector<Parameter*>& params, const SgdConfig& cfg);

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list, which is stable for a given model.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<Parameter*>& params);

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t steps_taken() const { return t_; }

  // Checkpoint access.
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_steps_taken(int64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace cct
