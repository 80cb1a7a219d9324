#pragma once

// Sparse gradient recoding.
//
// phi0(g, eps) = (|g| + g^2) / eps   if |g| >= eps
//              = 0                   otherwise
//
// Applied to the student as a gradient-replacement operator
// g -> sign(g) * lambda * phi0(g, eps): gradients inside the dead zone
// (-eps, eps) are dropped and the rest are amplified. Every parameter tensor
// carries its own threshold eps, tracked as an exponential moving average of
// the tensor's mean absolute raw gradient.

#include <span>
#include <string_view>
#include <vector>

#include "kr/tensor.hpp"

namespace kr {

enum class PenaltyKind { sparse_recoding, l1, l2, none };

PenaltyKind parse_penalty_kind(std::string_view text);
std::string_view to_string(PenaltyKind kind);

inline constexpr double kEpsilonFloor = 1e-12;

struct ThresholdState {
  std::vector<double> epsilon;  // one per parameter tensor
  double ema_beta = 0.9;
  double lambda = 1.0;
  bool additive = false;  // g + lambda * dphi0/dg instead of replacement

  double mean_epsilon() const;
};

// epsilon_i = mean |W_i| (clamped to the floor).
ThresholdState init_threshold_state(std::span<const Parameter> params, double ema_beta, double lambda,
                                    bool additive = false);

double phi0(double g, double epsilon);

// sum over every gradient entry of phi0 under that tensor's threshold.
double phi_sum(std::span<const Parameter> params, const ThresholdState& state);

// Scalar recoding rule for one gradient entry.
double recode_value(double g, double epsilon, double lambda, bool additive = false);

// Recodes the gradients of `params` in place.
void recode_gradients(std::span<Parameter> params, const ThresholdState& state);

// Per tensor: eps <- beta * eps + (1 - beta) * mean|g|, floored at kEpsilonFloor.
void update_epsilon(ThresholdState& state, std::span<const Parameter> params);
// Same rule given precomputed mean |g| per tensor.
void update_epsilon(ThresholdState& state, std::span<const double> mean_abs_grads);

std::vector<double> mean_abs_gradients(std::span<const Parameter> params);

// Loss-on-weights baselines: l1 adds weight*sign(w), l2 adds weight*w, none is
// the identity. Throws UsageError for sparse_recoding.
void baseline_recode(std::span<Parameter> params, PenaltyKind kind, double weight);

// Fraction of scalar entries with |w| < threshold.
double sparsity_fraction(std::span<const Parameter> params, double threshold = 1e-3);

}  // namespace kr
