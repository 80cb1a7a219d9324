#include "kr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "kr/aggregation.hpp"
#include "kr/data.hpp"
#include "kr/distill.hpp"
#include "kr/models.hpp"
#include "kr/ops.hpp"

namespace kr {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& x, double step) {
  auto data = x.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + step;
    const double up = f();
    data[i] = saved - step;
    const double down = f();
    data[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

bool GradcheckReport::ok() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed; });
}

namespace {

using Builder = std::function<Tensor()>;

struct Instance {
  std::vector<Tensor> inputs;  // differentiated
  Builder loss;
};

// Largest relative error over all inputs of one instance.
double check_instance(const Instance& inst) {
  for (const Tensor& t : inst.inputs) const_cast<Tensor&>(t).zero_grad();
  active_tape().clear();
  Tensor loss = inst.loss();
  backward(loss);
  active_tape().clear();
  double worst = 0.0;
  for (const Tensor& t : inst.inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    Tensor handle = t;
    const auto numeric = numeric_gradient(
        [&] {
          NoGradGuard guard;
          return inst.loss().item();
        },
        handle);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  Tensor tensor(Shape shape, double lo = -1.0, double hi = 1.0, bool grad = true) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = d(rng_);
    return Tensor::from(std::move(shape), std::move(v), grad);
  }
  // Entries bounded away from zero, for relu inputs.
  Tensor away_from_zero(Shape shape) {
    Tensor t = tensor(std::move(shape));
    for (double& x : t.mutable_data()) x = x < 0 ? x - 0.05 : x + 0.05;
    return t;
  }
  std::size_t pick(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

 private:
  std::mt19937_64 rng_;
};

// Projects a non-scalar output onto a fixed random direction.
Builder projected(std::function<Tensor()> f, const Tensor& direction) {
  return [f, direction] { return sum(mul(f(), direction)); };
}

NetworkConfig tiny_config(std::string name, std::vector<BlockSpec> blocks) {
  NetworkConfig cfg;
  cfg.name = std::move(name);
  cfg.blocks = std::move(blocks);
  for (const auto& b : cfg.blocks) cfg.conv_layer_count += b.convs;
  cfg.input_shape = {1, 4, 4};
  cfg.classifier_width = cfg.flattened_width();
  cfg.class_count = 3;
  return cfg;
}

using Factory = std::function<Instance(Gen&)>;

std::vector<std::pair<std::string, Factory>> factories() {
  std::vector<std::pair<std::string, Factory>> f;
  f.emplace_back("matmul", [](Gen& g) {
    const std::size_t m = g.pick(1, 4), k = g.pick(1, 4), n = g.pick(1, 4);
    Tensor a = g.tensor({m, k}), b = g.tensor({k, n}), r = g.tensor({m, n}, -1, 1, false);
    return Instance{{a, b}, projected([a, b] { return matmul(a, b); }, r)};
  });
  f.emplace_back("conv2d", [](Gen& g) {
    std::size_t n, c, h, w, fo, k, stride, pad;
    do {
      n = g.pick(1, 2), c = g.pick(1, 3), h = g.pick(3, 6), w = g.pick(3, 6), fo = g.pick(1, 3);
      k = g.pick(0, 1) ? 3 : 1, stride = g.pick(1, 2), pad = g.pick(0, 1);
    } while ((h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
    Tensor x = g.tensor({n, c, h, w}), wt = g.tensor({fo, c, k, k}), r = g.tensor({n, fo, ho, wo}, -1, 1, false);
    return Instance{{x, wt}, projected([x, wt, stride, pad] { return conv2d(x, wt, stride, pad); }, r)};
  });
  f.emplace_back("relu", [](Gen& g) {
    Tensor x = g.away_from_zero({g.pick(1, 3), g.pick(1, 5)}), r = g.tensor(x.shape(), -1, 1, false);
    return Instance{{x}, projected([x] { return relu(x); }, r)};
  });
  f.emplace_back("add", [](Gen& g) {
    const Shape s{g.pick(1, 3), g.pick(1, 4)};
    Tensor a = g.tensor(s), b = g.tensor(s), r = g.tensor(s, -1, 1, false);
    return Instance{{a, b}, projected([a, b] { return add(a, b); }, r)};
  });
  f.emplace_back("sub", [](Gen& g) {
    const Shape s{g.pick(1, 3), g.pick(1, 4)};
    Tensor a = g.tensor(s), b = g.tensor(s), r = g.tensor(s, -1, 1, false);
    return Instance{{a, b}, projected([a, b] { return sub(a, b); }, r)};
  });
  f.emplace_back("mul", [](Gen& g) {
    const Shape s{g.pick(1, 3), g.pick(1, 4)};
    Tensor a = g.tensor(s), b = g.tensor(s), r = g.tensor(s, -1, 1, false);
    return Instance{{a, b}, projected([a, b] { return mul(a, b); }, r)};
  });
  f.emplace_back("scale", [](Gen& g) {
    Tensor x = g.tensor({g.pick(1, 3), g.pick(1, 4)}), r = g.tensor(x.shape(), -1, 1, false);
    const double s = g.uniform(-2, 2);
    return Instance{{x}, projected([x, s] { return scale(x, s); }, r)};
  });
  f.emplace_back("avgpool2d", [](Gen& g) {
    const std::size_t k = g.pick(1, 3);
    Tensor x = g.tensor({g.pick(1, 2), g.pick(1, 3), k * g.pick(1, 3), k * g.pick(1, 3)});
    Tensor r = g.tensor({x.dim(0), x.dim(1), x.dim(2) / k, x.dim(3) / k}, -1, 1, false);
    return Instance{{x}, projected([x, k] { return avgpool2d(x, k); }, r)};
  });
  f.emplace_back("flatten", [](Gen& g) {
    Tensor x = g.tensor({g.pick(1, 2), g.pick(1, 3), g.pick(1, 3), g.pick(1, 3)});
    Tensor r = g.tensor({x.dim(0), x.numel() / x.dim(0)}, -1, 1, false);
    return Instance{{x}, projected([x] { return flatten(x); }, r)};
  });
  f.emplace_back("add_bias", [](Gen& g) {
    Tensor x = g.tensor({g.pick(1, 4), g.pick(1, 4)}), b = g.tensor({x.dim(1)}), r = g.tensor(x.shape(), -1, 1, false);
    return Instance{{x, b}, projected([x, b] { return add_bias(x, b); }, r)};
  });
  f.emplace_back("sum", [](Gen& g) {
    Tensor x = g.tensor({g.pick(1, 4), g.pick(1, 4)});
    return Instance{{x}, [x] { return scale(mul(sum(x), sum(x)), 0.5); }};
  });
  f.emplace_back("softmax_cross_entropy", [](Gen& g) {
    const std::size_t n = g.pick(1, 4), k = g.pick(2, 6);
    const double t = g.uniform(0.5, 4.0);
    Tensor z = g.tensor({n, k}, -3, 3);
    Tensor p = softmax(g.tensor({n, k}, -3, 3, false), 1.0);
    return Instance{{z}, [z, p, t] { return softmax_cross_entropy(z, p, t); }};
  });
  f.emplace_back("l2_distance", [](Gen& g) {
    const Shape s{g.pick(1, 3), g.pick(1, 4)};
    Tensor a = g.tensor(s), b = g.tensor(s);
    return Instance{{a, b}, [a, b] { return l2_distance(a, b); }};
  });
  f.emplace_back("residual_block", [](Gen& g) {
    BlockGeometry geo{g.pick(1, 2), g.pick(1, 3), g.pick(1, 2), g.pick(1, 2)};
    Tensor x = g.tensor({2, geo.in_channels, 4, 4});
    std::vector<Parameter> convs;
    std::vector<Tensor> inputs{x};
    for (std::size_t j = 0; j < geo.convs; ++j) {
      Tensor w = g.tensor({geo.out_channels, j == 0 ? geo.in_channels : geo.out_channels, 3, 3}, -0.5, 0.5);
      convs.push_back({w, "w" + std::to_string(j), -1});
      inputs.push_back(w);
    }
    auto proj = std::make_shared<Parameter>();
    if (geo.has_projection()) {
      proj->tensor = g.tensor({geo.out_channels, geo.in_channels, 1, 1});
      inputs.push_back(proj->tensor);
    }
    const std::size_t side = 4 / geo.stride;
    Tensor r = g.tensor({2, geo.out_channels, side, side}, -1, 1, false);
    return Instance{inputs, projected(
                                [x, geo, convs, proj] {
                                  return residual_block_forward(x, geo, convs,
                                                                geo.has_projection() ? proj.get() : nullptr);
                                },
                                r)};
  });
  f.emplace_back("aggregation_loss", [](Gen& g) {
    const Shape s{g.pick(1, 3), g.pick(1, 3), 2, 2};
    Tensor ft = g.tensor(s, -1, 1, false), fa = g.tensor(s);
    const MeasureWeight mu{g.uniform(0.1, 2.0)};
    const double gamma = g.uniform(0.1, 2.0);
    return Instance{{fa}, [ft, fa, mu, gamma] { return aggregation_loss(ft, fa, mu, gamma); }};
  });
  f.emplace_back("aggregator_loss", [](Gen& g) {
    const std::uint64_t seed = g.pick(0, 1u << 30);
    auto teacher = std::make_shared<Network>(
        build_network(tiny_config("t", {{3, 1, 2}, {4, 2, 2}}), mix_seed(seed, 1), "teacher"));
    auto student = std::make_shared<Network>(
        build_network(tiny_config("s", {{2, 1, 1}, {3, 2, 1}}), mix_seed(seed, 2), "student"));
    auto agg = std::make_shared<KnowledgeAggregator>(*teacher, *student, 2, mix_seed(seed, 3), false);
    Tensor x = g.tensor({2, 1, 4, 4}, 0, 1, false);
    auto feats = std::make_shared<std::vector<Tensor>>(agg->teacher_features(*teacher, x));
    std::vector<Tensor> inputs;
    for (const Parameter& p : agg->parameters()) inputs.push_back(p.tensor);
    return Instance{inputs, [agg, feats, x, teacher, student] { return agg->loss(*feats, x, 1.0); }};
  });
  f.emplace_back("prior_match_loss", [](Gen& g) {
    const std::uint64_t seed = g.pick(0, 1u << 30);
    auto teacher = std::make_shared<Network>(
        build_network(tiny_config("t", {{3, 1, 2}, {4, 2, 2}}), mix_seed(seed, 1), "teacher"));
    auto student = std::make_shared<Network>(
        build_network(tiny_config("s", {{2, 1, 1}, {3, 2, 1}}), mix_seed(seed, 2), "student"));
    auto agg = std::make_shared<KnowledgeAggregator>(*teacher, *student, 2, mix_seed(seed, 3), false);
    Tensor x = g.tensor({2, 1, 4, 4}, 0, 1, false);
    std::vector<Tensor> inputs;
    for (const Parameter& p : student->parameters()) inputs.push_back(p.tensor);
    return Instance{inputs, [agg, student, x, teacher] { return prior_match_loss(*student, *agg, x); }};
  });
  return f;
}

}  // namespace

GradcheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t instances, double tolerance) {
  GradcheckReport report;
  const auto all = factories();
  for (std::size_t c = 0; c < all.size(); ++c) {
    GradcheckCase result{all[c].first, instances, 0.0, true};
    for (std::size_t i = 0; i < instances; ++i) {
      Gen gen(mix_seed(seed, c * 1000003 + i));
      const Instance inst = all[c].second(gen);
      result.max_error = std::max(result.max_error, check_instance(inst));
    }
    result.passed = result.max_error < tolerance;
    report.cases.push_back(result);
  }
  return report;
}

}  // namespace kr
