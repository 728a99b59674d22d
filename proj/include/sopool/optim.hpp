#pragma once

#include <cmath>
#include <span>

#include "sopool/autograd.hpp"

namespace sopool {

/// Adam with bias correction. Gradients are zeroed after each step.
struct Adam {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void step(std::span<ag::Parameter* const> params) const {
    for (ag::Parameter* p : params) {
      Matrix::require_same_shape(p->value, p->grad, "adam_step");
      ++p->steps;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(p->steps));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(p->steps));
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * g;
        p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * g * g;
        const double m_hat = p->adam_m[i] / c1;
        const double v_hat = p->adam_v[i] / c2;
        p->value[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      }
      p->zero_grad();
    }
  }
};

/// Step decay: initial · factor^⌊epoch / every⌋, epochs counted from 0.
struct StepDecay {
  double initial = 0.01;
  double factor = 0.5;
  int every = 50;

  double at(int epoch) const { return initial * std::pow(factor, epoch / every); }
};

}  // namespace sopool
