#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "kr/tensor.hpp"

namespace kr {

struct OptimizerState {
  std::vector<std::vector<double>> velocity;  // mirrors parameter shapes
  std::size_t iteration = 0;

  static OptimizerState for_parameters(std::span<const Parameter> params);
};

// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v
void sgd_step(std::span<Parameter> params, OptimizerState& state, double lr, double momentum,
              double weight_decay);

struct LrStep {
  std::size_t iter = 0;
  double rate = 0.0;
};

// Piecewise constant: `base` until the first breakpoint, then each step's rate
// from its iteration onward. Steps must be sorted by iteration.
double lr_schedule(std::size_t iter, double base, std::span<const LrStep> steps);

// Breakpoints 30k and 48k, rates 0.01 and 0.001 after a base of 0.1.
std::vector<LrStep> reference_steps();

// Moves each breakpoint to iter * max_iter / reference_total (floor) and
// multiplies every rate by rate_factor.
std::vector<LrStep> scale_steps(std::span<const LrStep> steps, std::size_t reference_total,
                                std::size_t max_iter, double rate_factor = 1.0);

}  // namespace kr
