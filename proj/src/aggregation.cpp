#include "kr/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "kr/errors.hpp"
#include "kr/ops.hpp"

namespace kr {

GroupingPlan plan_groups(std::size_t teacher_conv_layers, std::size_t student_blocks, std::size_t c) {
  if (c == 0 || student_blocks == 0) throw PlanningError("plan_groups: c and student block count must be positive");
  if (teacher_conv_layers != student_blocks * c) {
    throw PlanningError("plan_groups: teacher has " + std::to_string(teacher_conv_layers) +
                        " conv layers but " + std::to_string(student_blocks) + " student blocks x c=" +
                        std::to_string(c) + " needs " + std::to_string(student_blocks * c));
  }
  GroupingPlan plan;
  plan.c = c;
  for (std::size_t g = 0; g < student_blocks; ++g) {
    std::vector<std::size_t> layers(c);
    std::iota(layers.begin(), layers.end(), g * c);
    plan.groups.push_back(std::move(layers));
    plan.target_block.push_back(g);
  }
  return plan;
}

MeasureWeight measure_weight(std::span<const Parameter* const> group_params) {
  if (group_params.empty()) throw UsageError("measure_weight: empty group");
  return {param_stats(group_params).std};
}

MeasureWeight measure_weight(std::span<const Parameter> group_params) {
  if (group_params.empty()) throw UsageError("measure_weight: empty group");
  return {param_stats(group_params).std};
}

Tensor aggregation_loss(const Tensor& f_teacher_group, const Tensor& f_agg, MeasureWeight mu, double gamma) {
  if (f_teacher_group.shape() != f_agg.shape()) {
    throw DimensionError("aggregation_loss: teacher features " + shape_str(f_teacher_group.shape()) +
                         " vs aggregated " + shape_str(f_agg.shape()));
  }
  Tensor teacher = f_teacher_group.requires_grad() ? f_teacher_group.detach() : f_teacher_group;
  return scale(l2_distance(teacher, f_agg), gamma * mu.value);
}

double squared_euclidean(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("squared_euclidean: dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += (x[i] - y[i]) * (x[i] - y[i]);
  return total;
}

TransportPlan transport_cost_oracle(const std::vector<std::vector<double>>& points_a,
                                    const std::vector<std::vector<double>>& points_b, const PointCost& cost) {
  const std::size_t n = points_a.size();
  if (n != points_b.size()) {
    throw UsageError("transport_cost_oracle: cardinality mismatch " + std::to_string(n) + " vs " +
                     std::to_string(points_b.size()));
  }
  if (n == 0 || n > 8) throw UsageError("transport_cost_oracle: supports 1..8 points per side");
  std::vector<std::vector<double>> table(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) table[i][j] = cost(points_a[i], points_b[j]);
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  TransportPlan best;
  best.cost = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += table[i][perm[i]];
    if (total < best.cost) {
      best.cost = total;
      best.assignment = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.cost /= static_cast<double>(n);

  // Uniform mass in equals uniform mass out: every target hit exactly once.
  std::vector<int> hits(n, 0);
  for (std::size_t j : best.assignment) ++hits.at(j);
  if (!std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; })) {
    throw std::logic_error("transport_cost_oracle: optimal coupling is not a bijection");
  }
  return best;
}

std::span<const Parameter> AggregatedBlock::convs() const {
  return std::span<const Parameter>(params).first(geometry.convs);
}

const Parameter* AggregatedBlock::projection() const {
  return geometry.has_projection() ? &params.at(geometry.convs) : nullptr;
}

Tensor AggregatedBlock::forward(const Tensor& x) const {
  return residual_block_forward(x, geometry, convs(), projection());
}

Tensor AggregatedBlock::adapt(const Tensor& features) const {
  return adapter ? adapter->apply(features) : features;
}

namespace {

Tensor he_tensor(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

}  // namespace

KnowledgeAggregator::KnowledgeAggregator(const Network& teacher, const Network& student, std::size_t c,
                                         std::uint64_t seed, bool shared_init)
    : plan_(plan_groups(teacher.config().conv_layer_count, student.block_count(), c)) {
  if (teacher.config().input_shape != student.config().input_shape) {
    throw PlanningError("teacher and student input shapes differ");
  }
  // Map each teacher conv layer to its block and check group boundaries.
  std::vector<std::size_t> layer_block;
  std::vector<bool> block_end;
  for (std::size_t b = 0; b < teacher.block_count(); ++b) {
    const std::size_t convs = teacher.block_geometry(b).convs;
    for (std::size_t j = 0; j < convs; ++j) {
      layer_block.push_back(b);
      block_end.push_back(j + 1 == convs);
    }
  }
  const auto teacher_convs = teacher.conv_parameters();
  for (const auto& group : plan_.groups) {
    const std::size_t last = group.back();
    if (!block_end[last]) {
      throw PlanningError("group ending at teacher conv layer " + std::to_string(last) +
                          " does not close a residual block, so it has no feature tap");
    }
    teacher_blocks_.push_back(layer_block[last]);
    std::vector<const Parameter*> members;
    for (std::size_t layer : group) members.push_back(teacher_convs[layer]);
    measures_.push_back(measure_weight(members));
  }

  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < plan_.groups.size(); ++k) {
    const std::size_t sb = plan_.target_block[k];
    AggregatedBlock block;
    block.group_index = k;
    block.geometry = student.block_geometry(sb);
    const std::string base = "agg.block" + std::to_string(k);
    const auto student_params = student.block_parameters(sb);
    for (std::size_t j = 0; j < student_params.size(); ++j) {
      const Parameter& sp = *student_params[j];
      const bool is_proj = j == block.geometry.convs;
      const std::string name = base + (is_proj ? ".proj.weight" : ".conv" + std::to_string(j) + ".weight");
      Tensor t;
      if (shared_init) {
        t = sp.tensor.clone();
        t.set_requires_grad(true);
      } else {
        const Shape& s = sp.tensor.shape();
        t = he_tensor(s, s[1] * s[2] * s[3], rng);
      }
      block.params.push_back({t, name, sp.layer_index});
    }

    const Shape agg_shape = student.tap_shape(sb, 1);
    const Shape teacher_shape = teacher.tap_shape(teacher_blocks_[k], 1);
    if (agg_shape != teacher_shape) {
      if (agg_shape[2] % teacher_shape[2] != 0 || agg_shape[3] % teacher_shape[3] != 0 ||
          agg_shape[2] / teacher_shape[2] != agg_shape[3] / teacher_shape[3]) {
        throw PlanningError("cannot adapt aggregated features " + shape_str(agg_shape) + " to teacher group " +
                            shape_str(teacher_shape));
      }
      IdentityMapping adapter;
      adapter.stride = agg_shape[2] / teacher_shape[2];
      adapter.weight = {he_tensor({teacher_shape[1], agg_shape[1], 1, 1}, agg_shape[1], rng),
                        base + ".adapter.weight", -1};
      block.adapter = std::move(adapter);
    }
    blocks_.push_back(std::move(block));
  }
  optimizer_ = OptimizerState::for_parameters(parameters());
}

std::vector<Parameter> KnowledgeAggregator::parameters() const {
  std::vector<Parameter> out;
  for (const AggregatedBlock& b : blocks_) {
    for (const Parameter& p : b.params) out.push_back(p);
    if (b.adapter) out.push_back(b.adapter->weight);
  }
  return out;
}

std::vector<Tensor> KnowledgeAggregator::forward(const Tensor& x) const {
  std::vector<Tensor> out;
  Tensor h = x;
  for (const AggregatedBlock& b : blocks_) {
    h = b.forward(h);
    out.push_back(h);
  }
  return out;
}

Tensor KnowledgeAggregator::loss(std::span<const Tensor> teacher_group_features, const Tensor& x, double gamma,
                                 std::vector<double>* group_losses) const {
  if (blocks_.empty()) throw UsageError("aggregator has no planned groups");
  if (teacher_group_features.size() != blocks_.size()) {
    throw UsageError("expected " + std::to_string(blocks_.size()) + " teacher group features, got " +
                     std::to_string(teacher_group_features.size()));
  }
  const auto features = forward(x);
  Tensor total;
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    Tensor term = aggregation_loss(teacher_group_features[k], blocks_[k].adapt(features[k]), measures_[k], gamma);
    if (group_losses) group_losses->push_back(term.item());
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Stage1Result KnowledgeAggregator::stage1_step(std::span<const Tensor> teacher_group_features, const Tensor& x,
                                              double gamma, double lr, double momentum, double weight_decay) {
  Stage1Result result;
  if (gamma == 0.0) {
    if (blocks_.empty()) throw UsageError("aggregator has no planned groups");
    result.group_losses.assign(blocks_.size(), 0.0);
    return result;
  }
  auto params = parameters();
  for (Parameter& p : params) p.tensor.zero_grad();
  Tensor total = loss(teacher_group_features, x, gamma, &result.group_losses);
  result.loss = total.item();
  if (!std::isfinite(result.loss)) throw DivergenceError("stage-1 aggregation loss is not finite");
  backward(total);
  active_tape().clear();
  sgd_step(params, optimizer_, lr, momentum, weight_decay);
  return result;
}

std::vector<Tensor> KnowledgeAggregator::teacher_features(const Network& teacher, const Tensor& x) const {
  NoGradGuard guard;
  ForwardResult out = teacher.forward_with_taps(x);
  std::vector<Tensor> features;
  for (std::size_t k = 0; k < blocks_.size(); ++k) features.push_back(out.taps.at(teacher_blocks_[k]).features);
  return features;
}

Stage1Result KnowledgeAggregator::stage1_step(const Network& teacher, const Tensor& x, double gamma, double lr,
                                              double momentum, double weight_decay) {
  const auto features = teacher_features(teacher, x);
  return stage1_step(features, x, gamma, lr, momentum, weight_decay);
}

}  // namespace kr
