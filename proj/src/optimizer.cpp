#include "mmnar/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace mmnar {

void AdamW::step(ParamStore& params) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& pp : params.all()) {
    Param& p = *pp;
    if (!p.grad.all_finite())
      throw std::runtime_error("optimizer: non-finite gradient for parameter " + p.name);
    if (p.m1.size() == 0) {
      p.m1 = Tensor(p.value.rows, p.value.cols);
      p.m2 = Tensor(p.value.rows, p.value.cols);
    }
    double* v = p.value.data.data();
    double* g = p.grad.data.data();
    double* m1 = p.m1.data.data();
    double* m2 = p.m2.data.data();
    const size_t n = p.value.size();
    for (size_t i = 0; i < n; ++i) {
      v[i] -= cfg_.lr * cfg_.weight_decay * v[i];
      m1[i] = cfg_.beta1 * m1[i] + (1.0 - cfg_.beta1) * g[i];
      m2[i] = cfg_.beta2 * m2[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m1[i] / bc1;
      const double vhat = m2[i] / bc2;
      v[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      g[i] = 0.0;
    }
  }
}

}  // namespace mmnar
