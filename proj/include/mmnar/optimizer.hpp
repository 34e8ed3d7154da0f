#pragma once

#include <cstdint>

#include "mmnar/tape.hpp"

namespace mmnar {

struct AdamWConfig {
  double lr = 2e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with decoupled weight decay: the decay multiplies the parameter
// directly and never enters the moment estimates.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  // Applies one update from the accumulated grads, then zeroes them.
  // Throws std::runtime_error naming the parameter on a non-finite gradient.
  void step(ParamStore& params);

  int64_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  int64_t step_ = 0;
};

}  // namespace mmnar
