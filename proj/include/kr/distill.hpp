#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "kr/aggregation.hpp"
#include "kr/data.hpp"
#include "kr/models.hpp"
#include "kr/optim.hpp"
#include "kr/recode.hpp"

namespace kr {

// Batch streams: stage 1 and stage 2 draw from independent seeded sequences so
// that disabling one stage never shifts the other's batches.
inline constexpr std::uint64_t kStage1Stream = 1;
inline constexpr std::uint64_t kStage2Stream = 2;

// Iteration count the reference breakpoints (30k, 48k) are laid out for.
inline constexpr std::size_t kReferenceTotalIter = 60000;

struct DistillConfig {
  double gamma = 1.0;
  double lambda = 1.0;
  double temperature = 4.0;
  std::size_t max_iter = 1000;
  std::size_t interleave_stage1 = 1;
  std::size_t interleave_stage2 = 1;
  double lr1 = 0.1;
  double lr2 = 0.01;
  // When unset, the reference breakpoints are scaled to max_iter and each
  // rate is scaled by base / 0.1.
  std::optional<std::vector<LrStep>> steps1;
  std::optional<std::vector<LrStep>> steps2;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::uint64_t seed = 1;
  PenaltyKind penalty = PenaltyKind::sparse_recoding;
  double ema_beta = 0.9;
  bool additive = false;
  double baseline_weight = 1e-4;  // l1 / l2 baselines only
  std::size_t c = 3;
  std::size_t batch_size = 32;
  std::size_t log_interval = 100;
  std::size_t eval_interval = 0;  // 0: evaluate the test set on the final row only
  bool hard_labels = false;
  bool shared_init = true;

  std::vector<LrStep> stage1_steps() const;
  std::vector<LrStep> stage2_steps() const;
  void validate() const;
};

struct MetricsRow {
  std::size_t iter = 0;  // iterations completed
  double stage1_loss = 0.0;
  double prior_loss = 0.0;
  double kd_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = std::numeric_limits<double>::quiet_NaN();
  double mean_epsilon = 0.0;
  double weight_sparsity_fraction = 0.0;
  std::size_t stage1_steps = 0;
  std::size_t stage2_steps = 0;
};

struct TrainReport {
  std::vector<MetricsRow> rows;
  // Stage-2 objective (gamma * prior + kd) after every stage-2 step.
  std::vector<double> stage2_loss_trace;
  // KD term alone, same steps.
  std::vector<double> kd_loss_trace;
  std::vector<double> stage1_loss_trace;
  std::size_t iterations = 0;
  double final_train_acc = 0.0;
  double final_test_acc = std::numeric_limits<double>::quiet_NaN();
};

// Teacher logits and block taps precomputed for every example of a dataset.
// Gathering is bitwise identical to running the teacher on the batch.
class TeacherCache {
 public:
  TeacherCache(const Network& teacher, const Dataset& data, std::size_t chunk = 100);

  Tensor logits(std::span<const std::size_t> indices) const;
  Tensor tap(std::size_t block, std::span<const std::size_t> indices) const;
  std::size_t size() const { return size_; }

 private:
  std::size_t size_ = 0;
  std::size_t classes_ = 0;
  std::vector<double> logits_;
  std::vector<Shape> tap_shapes_;  // per example
  std::vector<std::vector<double>> taps_;
};

// Sum over blocks of ||F_agg - F_student|| on the batch plus ||W_agg - W_student||
// for every same-shaped parameter pair. The aggregated side is detached.
Tensor prior_match_loss(const Network& student, const KnowledgeAggregator& aggregator, const Tensor& batch);
Tensor prior_match_loss(std::span<const Tap> student_taps, const Network& student,
                        const KnowledgeAggregator& aggregator, const Tensor& batch);

struct Stage2Result {
  double prior_loss = 0.0;
  double kd_loss = 0.0;
  double total = 0.0;
  std::size_t correct = 0;
};

// One stage-2 step: loss = gamma * prior + KD(student, targets), backward,
// gradient recoding (or the configured baseline), threshold update, SGD.
Stage2Result stage2_step(Network& student, const KnowledgeAggregator& aggregator, const Batch& batch,
                         const Tensor& targets, const DistillConfig& config, ThresholdState& threshold,
                         OptimizerState& optimizer, double lr);

using MetricsSink = std::function<void(const MetricsRow&)>;

// Alternating two-stage optimization. The teacher is read only.
class Distiller {
 public:
  Distiller(const Network& teacher, Network& student, DistillConfig config);

  KnowledgeAggregator& aggregator() { return aggregator_; }
  const KnowledgeAggregator& aggregator() const { return aggregator_; }
  ThresholdState& threshold() { return threshold_; }
  OptimizerState& student_optimizer() { return student_opt_; }
  std::size_t iteration() const { return iteration_; }
  void set_iteration(std::size_t iter) { iteration_ = iter; }
  const DistillConfig& config() const { return config_; }

  void use_teacher_cache(const TeacherCache* cache) { cache_ = cache; }

  // Runs from the current iteration up to config.max_iter.
  TrainReport run(const Dataset& train, const Dataset* test = nullptr, const MetricsSink& sink = {});

 private:
  const Network& teacher_;
  Network& student_;
  DistillConfig config_;
  KnowledgeAggregator aggregator_;
  ThresholdState threshold_;
  OptimizerState student_opt_;
  std::size_t iteration_ = 0;
  const TeacherCache* cache_ = nullptr;
};

TrainReport joint_train(const Network& teacher, Network& student, const Dataset& train, const DistillConfig& config,
                        const Dataset* test = nullptr, const TeacherCache* cache = nullptr);

// Reference supervised trainer: hard-label cross entropy and SGD with momentum.
struct PlainTrainConfig {
  std::size_t max_iter = 1000;
  double lr = 0.01;
  std::optional<std::vector<LrStep>> steps;  // default: reference scaled by lr / 0.1
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

struct PlainTrainReport {
  std::vector<double> loss_trace;
  std::size_t correct = 0;
  std::size_t seen = 0;
};

PlainTrainReport train_supervised(Network& net, const Dataset& train, const PlainTrainConfig& config);

double evaluate_accuracy(const Network& net, const Dataset& data, std::size_t batch = 250);

// Student tensors counted by the sparsity metric: every conv, projection and
// classifier weight (biases excluded).
std::vector<Parameter> weight_tensors(const Network& net);

}  // namespace kr
