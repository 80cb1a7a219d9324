#include <doctest.h>

#include <cmath>
#include <random>

#include "kr/errors.hpp"
#include "kr/recode.hpp"

using namespace kr;

namespace {

Parameter with_grad(std::vector<double> w, std::vector<double> g) {
  const std::size_t n = w.size();
  Parameter p{Tensor::from({n}, std::move(w), true), "p", 0};
  auto dst = p.tensor.mutable_grad();
  std::copy(g.begin(), g.end(), dst.begin());
  return p;
}

std::vector<double> grads(const Parameter& p) { return {p.tensor.grad().begin(), p.tensor.grad().end()}; }

}  // namespace

TEST_CASE("phi0 values") {
  CHECK(phi0(0.05, 0.1) == 0.0);
  CHECK(phi0(0.5, 0.1) == 7.5);
  CHECK(phi0(-0.5, 0.1) == 7.5);
  CHECK(phi0(0.1, 0.1) == 1.1);
  CHECK(phi0(0.1, 0.1) > 0.0);  // boundary is active
  CHECK_THROWS_AS(phi0(0.3, 0.0), UsageError);
  CHECK_THROWS_AS(phi0(0.3, -1.0), UsageError);
}

TEST_CASE("phi_sum") {
  std::vector<Parameter> zero{with_grad({1, 2}, {0, 0})};
  ThresholdState s{{0.1}, 0.9, 1.0, false};
  CHECK(phi_sum(zero, s) == 0.0);
  std::vector<Parameter> layer{with_grad({1, 2}, {0.5, 0.05})};
  CHECK(phi_sum(layer, s) == 7.5);
  std::vector<Parameter> swapped{with_grad({1, 2}, {0.05, 0.5})};
  CHECK(phi_sum(swapped, s) == phi_sum(layer, s));
  std::vector<Parameter> bare{{Tensor::from({1}, {1.0}, true), "bare", 0}};
  CHECK_THROWS_AS(phi_sum(bare, s), UsageError);
}

TEST_CASE("recode_gradients") {
  CHECK(recode_value(-0.5, 0.1, 1.0) == -7.5);
  CHECK(recode_value(0.02, 0.1, 3.0) == 0.0);
  std::vector<Parameter> p{with_grad({0, 0, 0}, {0.2, -0.01, 0.1})};
  ThresholdState s{{0.1}, 0.9, 0.5, false};
  recode_gradients(p, s);
  const auto g = grads(p[0]);
  CHECK(g[0] == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(g[1] == 0.0);
  CHECK(g[2] == doctest::Approx(0.55).epsilon(1e-15));
}

TEST_CASE("additive recoding adds the penalty derivative") {
  CHECK(recode_value(0.5, 0.1, 1.0, true) == doctest::Approx(0.5 + 20.0));
  CHECK(recode_value(-0.5, 0.1, 1.0, true) == doctest::Approx(-0.5 - 20.0));
  CHECK(recode_value(0.05, 0.1, 1.0, true) == 0.05);
}

TEST_CASE("recoding properties over random samples") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> ug(-2.0, 2.0), ue(1e-4, 1.0), ul(0.01, 3.0);
  int dead = 0, active = 0;
  for (int i = 0; i < 10000; ++i) {
    const double g = ug(rng), eps = ue(rng), lambda = ul(rng);
    const double r = recode_value(g, eps, lambda);
    CHECK(recode_value(-g, eps, lambda) == -r);
    CHECK((r == 0.0) == (std::abs(g) < eps));
    if (std::abs(g) >= eps) {
      ++active;
      const double ratio = std::abs(recode_value(g, eps, 1.0)) / std::abs(g);
      CHECK(ratio == doctest::Approx((1 + std::abs(g)) / eps).epsilon(1e-12));
      CHECK(ratio >= (1 + eps) / eps * (1 - 1e-12));
      CHECK(ratio > 1.0);
    } else {
      ++dead;
    }
  }
  CHECK(dead > 100);
  CHECK(active > 100);
}

TEST_CASE("recoding is strictly increasing above the threshold") {
  const double eps = 0.05;
  double prev = recode_value(eps, eps, 1.0);
  for (double g = eps + 0.001; g < 2.0; g += 0.001) {
    const double r = recode_value(g, eps, 1.0);
    CHECK(r > prev);
    prev = r;
  }
}

TEST_CASE("threshold discontinuity is exactly 1 + eps") {
  const double eps = 0.25;
  CHECK(phi0(std::nextafter(eps, 0.0), eps) == 0.0);
  CHECK(phi0(eps, eps) == doctest::Approx(1 + eps).epsilon(1e-15));
}

TEST_CASE("update_epsilon") {
  ThresholdState s{{0.1}, 0.9, 1.0, false};
  std::vector<Parameter> p{with_grad({0, 0}, {0.2, -0.2})};
  update_epsilon(s, p);
  CHECK(s.epsilon[0] == doctest::Approx(0.11).epsilon(1e-15));

  ThresholdState fixed{{0.3}, 0.9, 1.0, false};
  std::vector<Parameter> q{with_grad({0, 0}, {0.3, -0.3})};
  update_epsilon(fixed, q);
  CHECK(fixed.epsilon[0] == doctest::Approx(0.3).epsilon(1e-15));

  ThresholdState decay{{1.0}, 0.5, 1.0, false};
  std::vector<Parameter> z{with_grad({0}, {0})};
  for (int i = 0; i < 200; ++i) {
    update_epsilon(decay, z);
    CHECK(decay.epsilon[0] > 0.0);
  }
  CHECK(decay.epsilon[0] == kEpsilonFloor);
}

TEST_CASE("threshold initialization uses mean |W|") {
  std::vector<Parameter> p{with_grad({1, -3}, {0, 0}), with_grad({0, 0}, {0, 0})};
  const ThresholdState s = init_threshold_state(p, 0.9, 1.0);
  CHECK(s.epsilon[0] == 2.0);
  CHECK(s.epsilon[1] == kEpsilonFloor);
}

TEST_CASE("baseline penalties") {
  std::vector<Parameter> p{with_grad({2.0}, {0.0})};
  baseline_recode(p, PenaltyKind::l2, 0.1);
  CHECK(grads(p[0])[0] == doctest::Approx(0.2).epsilon(1e-15));
  std::vector<Parameter> q{with_grad({-3.0}, {0.0})};
  baseline_recode(q, PenaltyKind::l1, 0.1);
  CHECK(grads(q[0])[0] == -0.1);
  std::vector<Parameter> r{with_grad({5.0}, {0.7})};
  baseline_recode(r, PenaltyKind::none, 0.1);
  CHECK(grads(r[0])[0] == 0.7);
  CHECK_THROWS_AS(baseline_recode(r, PenaltyKind::sparse_recoding, 0.1), UsageError);
}

TEST_CASE("penalty kind names") {
  for (auto k : {PenaltyKind::sparse_recoding, PenaltyKind::l1, PenaltyKind::l2, PenaltyKind::none}) {
    CHECK(parse_penalty_kind(to_string(k)) == k);
  }
  CHECK_THROWS(parse_penalty_kind("l3"));
}

TEST_CASE("sparsity fraction") {
  std::vector<Parameter> p{with_grad({0.0, 5e-4, -2e-3, 1.0}, {0, 0, 0, 0})};
  CHECK(sparsity_fraction(p) == 0.5);
}
