#include "kr/recode.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kr/errors.hpp"

namespace kr {

PenaltyKind parse_penalty_kind(std::string_view text) {
  if (text == "sparse_recoding") return PenaltyKind::sparse_recoding;
  if (text == "l1") return PenaltyKind::l1;
  if (text == "l2") return PenaltyKind::l2;
  if (text == "none") return PenaltyKind::none;
  throw ConfigError("unknown penalty kind '" + std::string(text) +
                    "' (expected sparse_recoding, l1, l2 or none)");
}

std::string_view to_string(PenaltyKind kind) {
  switch (kind) {
    case PenaltyKind::sparse_recoding: return "sparse_recoding";
    case PenaltyKind::l1: return "l1";
    case PenaltyKind::l2: return "l2";
    case PenaltyKind::none: return "none";
  }
  return "none";
}

double ThresholdState::mean_epsilon() const {
  if (epsilon.empty()) return 0.0;
  double total = 0.0;
  for (double e : epsilon) total += e;
  return total / static_cast<double>(epsilon.size());
}

ThresholdState init_threshold_state(std::span<const Parameter> params, double ema_beta, double lambda,
                                    bool additive) {
  if (!(ema_beta >= 0.0 && ema_beta < 1.0)) throw ConfigError("penalty.ema_beta must lie in [0, 1)");
  if (!(lambda >= 0.0)) throw ConfigError("penalty.lambda must be non-negative");
  ThresholdState state;
  state.ema_beta = ema_beta;
  state.lambda = lambda;
  state.additive = additive;
  for (const Parameter& p : params) {
    double total = 0.0;
    for (double v : p.tensor.data()) total += std::abs(v);
    state.epsilon.push_back(std::max(total / static_cast<double>(p.tensor.numel()), kEpsilonFloor));
  }
  return state;
}

double phi0(double g, double epsilon) {
  if (!(epsilon > 0.0)) throw UsageError("phi0: epsilon must be positive");
  const double a = std::abs(g);
  // (|g| + g^2) / eps, factored so no multiply-add can be fused.
  return a >= epsilon ? (a / epsilon) * (1.0 + a) : 0.0;
}

namespace {

void require_aligned(std::size_t params, const ThresholdState& state) {
  if (params != state.epsilon.size()) {
    throw UsageError("threshold state holds " + std::to_string(state.epsilon.size()) +
                     " thresholds for " + std::to_string(params) + " parameter tensors");
  }
}

void require_grad(const Parameter& p) {
  if (!p.tensor.has_grad()) throw UsageError("missing gradient for parameter '" + p.name + "'");
}

}  // namespace

double phi_sum(std::span<const Parameter> params, const ThresholdState& state) {
  require_aligned(params.size(), state);
  double total = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_grad(params[i]);
    for (double g : params[i].tensor.grad()) total += phi0(g, state.epsilon[i]);
  }
  return total;
}

double recode_value(double g, double epsilon, double lambda, bool additive) {
  const double a = std::abs(g);
  if (a < epsilon) return additive ? g : 0.0;
  const double sign = g > 0.0 ? 1.0 : -1.0;
  if (additive) return g + lambda * sign * (1.0 + 2.0 * a) / epsilon;
  return sign * lambda * phi0(a, epsilon);
}

void recode_gradients(std::span<Parameter> params, const ThresholdState& state) {
  require_aligned(params.size(), state);
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_grad(params[i]);
    const double eps = state.epsilon[i];
    if (!(eps > 0.0)) throw UsageError("recode_gradients: non-positive threshold");
    for (double& g : params[i].tensor.mutable_grad()) g = recode_value(g, eps, state.lambda, state.additive);
  }
}

std::vector<double> mean_abs_gradients(std::span<const Parameter> params) {
  std::vector<double> out;
  out.reserve(params.size());
  for (const Parameter& p : params) {
    require_grad(p);
    double total = 0.0;
    for (double g : p.tensor.grad()) total += std::abs(g);
    out.push_back(total / static_cast<double>(p.tensor.numel()));
  }
  return out;
}

void update_epsilon(ThresholdState& state, std::span<const double> mean_abs_grads) {
  require_aligned(mean_abs_grads.size(), state);
  for (std::size_t i = 0; i < mean_abs_grads.size(); ++i) {
    const double next = state.ema_beta * state.epsilon[i] + (1.0 - state.ema_beta) * mean_abs_grads[i];
    state.epsilon[i] = std::max(next, kEpsilonFloor);
  }
}

void update_epsilon(ThresholdState& state, std::span<const Parameter> params) {
  const auto means = mean_abs_gradients(params);
  update_epsilon(state, means);
}

void baseline_recode(std::span<Parameter> params, PenaltyKind kind, double weight) {
  if (kind == PenaltyKind::sparse_recoding) {
    throw UsageError("baseline_recode handles l1, l2 and none only");
  }
  if (kind == PenaltyKind::none) return;
  for (Parameter& p : params) {
    require_grad(p);
    auto w = p.tensor.data();
    auto g = p.tensor.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (kind == PenaltyKind::l2) {
        g[i] += weight * w[i];
      } else {
        g[i] += weight * static_cast<double>((w[i] > 0.0) - (w[i] < 0.0));
      }
    }
  }
}

double sparsity_fraction(std::span<const Parameter> params, double threshold) {
  std::size_t small = 0, total = 0;
  for (const Parameter& p : params) {
    for (double v : p.tensor.data()) small += std::abs(v) < threshold ? 1 : 0;
    total += p.tensor.numel();
  }
  if (total == 0) throw UsageError("sparsity_fraction: no parameters");
  return static_cast<double>(small) / static_cast<double>(total);
}

}  // namespace kr
