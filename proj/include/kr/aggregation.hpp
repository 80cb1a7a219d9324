#pragma once

// Deep knowledge aggregation: contiguous groups of c teacher conv layers are
// each summarized by one aggregated block with the topology of the matching
// student block. Stage 1 fits the aggregated blocks to the teacher by
// minimizing gamma * mu_k * ||F_teacher_k - F_agg_k||_2 per group, where mu_k
// is the standard deviation of the group's teacher weights.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "kr/models.hpp"
#include "kr/optim.hpp"
#include "kr/tensor.hpp"

namespace kr {

struct GroupingPlan {
  std::size_t c = 0;
  std::vector<std::vector<std::size_t>> groups;  // teacher conv-layer indices
  std::vector<std::size_t> target_block;         // student block per group
};

// Contiguous depth-ordered groups; group i feeds student block i.
GroupingPlan plan_groups(std::size_t teacher_conv_layers, std::size_t student_blocks, std::size_t c);

struct MeasureWeight {
  double value = 0.0;
};

// Population standard deviation over every scalar entry of the group.
MeasureWeight measure_weight(std::span<const Parameter* const> group_params);
MeasureWeight measure_weight(std::span<const Parameter> group_params);

// gamma * mu * ||f_teacher - f_agg||_2 with the teacher side detached.
Tensor aggregation_loss(const Tensor& f_teacher_group, const Tensor& f_agg, MeasureWeight mu, double gamma);

// Exact discrete transport between two equal-size uniform point clouds.
struct TransportPlan {
  double cost = 0.0;
  std::vector<std::size_t> assignment;  // a[i] -> b[assignment[i]]
};

using PointCost = std::function<double(std::span<const double>, std::span<const double>)>;

double squared_euclidean(std::span<const double> x, std::span<const double> y);

// Minimum over all permutation couplings of (1/n) * sum cost(a_i, b_T(i)),
// found by enumeration. At most 8 points per side.
TransportPlan transport_cost_oracle(const std::vector<std::vector<double>>& points_a,
                                    const std::vector<std::vector<double>>& points_b,
                                    const PointCost& cost = squared_euclidean);

struct AggregatedBlock {
  std::size_t group_index = 0;
  BlockGeometry geometry;
  std::vector<Parameter> params;  // convs, then projection when present
  std::optional<IdentityMapping> adapter;

  std::span<const Parameter> convs() const;
  const Parameter* projection() const;
  // Student-shaped block output.
  Tensor forward(const Tensor& x) const;
  // Maps block output to the teacher group's output shape.
  Tensor adapt(const Tensor& features) const;
};

struct Stage1Result {
  double loss = 0.0;
  std::vector<double> group_losses;
};

class KnowledgeAggregator {
 public:
  // Builds one aggregated block per student block. With shared_init the
  // block weights start as copies of the student's; adapters are He-initialized
  // from `seed` wherever shapes differ.
  KnowledgeAggregator(const Network& teacher, const Network& student, std::size_t c, std::uint64_t seed,
                      bool shared_init = true);

  const GroupingPlan& plan() const { return plan_; }
  std::vector<AggregatedBlock>& blocks() { return blocks_; }
  const std::vector<AggregatedBlock>& blocks() const { return blocks_; }
  const std::vector<MeasureWeight>& measures() const { return measures_; }
  OptimizerState& optimizer() { return optimizer_; }
  const OptimizerState& optimizer() const { return optimizer_; }
  // Teacher block whose output closes group k.
  std::size_t teacher_block(std::size_t group) const { return teacher_blocks_.at(group); }

  // Handles (sharing storage) to every trainable tensor: block weights then
  // adapter, block by block.
  std::vector<Parameter> parameters() const;

  // Chained student-shaped features of every aggregated block.
  std::vector<Tensor> forward(const Tensor& x) const;

  // Sum over groups of aggregation_loss against teacher features.
  Tensor loss(std::span<const Tensor> teacher_group_features, const Tensor& x, double gamma,
              std::vector<double>* group_losses = nullptr) const;

  // One SGD step on every aggregated parameter. gamma == 0 leaves everything
  // untouched.
  Stage1Result stage1_step(std::span<const Tensor> teacher_group_features, const Tensor& x, double gamma,
                           double lr, double momentum, double weight_decay);
  Stage1Result stage1_step(const Network& teacher, const Tensor& x, double gamma, double lr, double momentum,
                           double weight_decay);

  // Teacher taps at group boundaries, computed without recording.
  std::vector<Tensor> teacher_features(const Network& teacher, const Tensor& x) const;

 private:
  GroupingPlan plan_;
  std::vector<std::size_t> teacher_blocks_;
  std::vector<AggregatedBlock> blocks_;
  std::vector<MeasureWeight> measures_;
  OptimizerState optimizer_;
};

}  // namespace kr
