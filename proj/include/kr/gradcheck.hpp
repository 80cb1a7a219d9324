#pragma once

// Central finite-difference checks for every differentiable operation and the
// two composite losses.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kr/tensor.hpp"

namespace kr {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

// ||a - n|| / max(||a||, ||n||); 0 when both vanish.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

// d f / d x by central differences, perturbing x's data in place.
std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& x, double step = kGradcheckStep);

struct GradcheckCase {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  bool ok() const;
};

GradcheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 20,
                                    double tolerance = kGradcheckTolerance);

}  // namespace kr
