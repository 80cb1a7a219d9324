#include "kr/optim.hpp"

#include <string>

#include "kr/errors.hpp"

namespace kr {

OptimizerState OptimizerState::for_parameters(std::span<const Parameter> params) {
  OptimizerState state;
  for (const Parameter& p : params) state.velocity.emplace_back(p.tensor.numel(), 0.0);
  return state;
}

void sgd_step(std::span<Parameter> params, OptimizerState& state, double lr, double momentum,
              double weight_decay) {
  if (state.velocity.size() != params.size()) {
    throw UsageError("sgd_step: optimizer tracks " + std::to_string(state.velocity.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    auto& v = state.velocity[i];
    if (v.size() != p.tensor.numel()) {
      throw UsageError("sgd_step: velocity shape mismatch for '" + p.name + "'");
    }
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.grad();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum * v[j] + g[j] + weight_decay * w[j];
      w[j] -= lr * v[j];
    }
  }
  ++state.iteration;
}

double lr_schedule(std::size_t iter, double base, std::span<const LrStep> steps) {
  double rate = base;
  for (const LrStep& s : steps) {
    if (iter >= s.iter) rate = s.rate;
  }
  return rate;
}

std::vector<LrStep> reference_steps() { return {{30000, 0.01}, {48000, 0.001}}; }

std::vector<LrStep> scale_steps(std::span<const LrStep> steps, std::size_t reference_total,
                                std::size_t max_iter, double rate_factor) {
  if (reference_total == 0) throw UsageError("scale_steps: reference_total must be positive");
  std::vector<LrStep> out;
  for (const LrStep& s : steps) {
    out.push_back({s.iter * max_iter / reference_total, s.rate * rate_factor});
  }
  return out;
}

}  // namespace kr
