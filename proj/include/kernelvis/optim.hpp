#pragma once

#include <vector>

#include "kernelvis/nn.hpp"

namespace kv {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam over a parameter store. Moments kept in double for a precision-
// independent update rule; the whole step is deterministic.
template <typename T>
class Adam {
 public:
  Adam(ParamStore<T>& params, AdamConfig cfg);

  void step();
  void zero_grad() { params_->zero_grads(); }

 private:
  ParamStore<T>* params_;
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace kv
