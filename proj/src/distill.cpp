#include "kr/distill.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kr/errors.hpp"
#include "kr/ops.hpp"

namespace kr {

namespace {

constexpr double kReferenceBaseRate = 0.1;

void check_schedule(double base, const std::vector<LrStep>& steps, const char* what) {
  if (!(base > 0.0)) throw ConfigError(std::string(what) + ": base learning rate must be positive");
  double prev_rate = base;
  std::size_t prev_iter = 0;
  for (const LrStep& s : steps) {
    if (!(s.rate > 0.0)) throw ConfigError(std::string(what) + ": rates must be positive");
    if (s.rate > prev_rate) throw ConfigError(std::string(what) + ": schedule must be non-increasing");
    if (s.iter < prev_iter) throw ConfigError(std::string(what) + ": breakpoints must be sorted");
    prev_rate = s.rate;
    prev_iter = s.iter;
  }
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  auto z = logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * k;
    const auto best = static_cast<int>(std::max_element(row, row + k) - row);
    correct += best == labels[i] ? 1 : 0;
  }
  return correct;
}

bool any_gradient(std::span<const Parameter> params) {
  for (const Parameter& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.impl()->grad) {
      if (g != 0.0) return true;
    }
  }
  return false;
}

void zero_grads(std::span<Parameter> params) {
  for (Parameter& p : params) p.tensor.zero_grad();
}

}  // namespace

std::vector<LrStep> DistillConfig::stage1_steps() const {
  if (steps1) return *steps1;
  return scale_steps(reference_steps(), kReferenceTotalIter, max_iter, lr1 / kReferenceBaseRate);
}

std::vector<LrStep> DistillConfig::stage2_steps() const {
  if (steps2) return *steps2;
  return scale_steps(reference_steps(), kReferenceTotalIter, max_iter, lr2 / kReferenceBaseRate);
}

void DistillConfig::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("distill.gamma must be non-negative");
  if (!(lambda >= 0.0)) throw ConfigError("distill.lambda must be non-negative");
  if (!(temperature > 0.0)) throw ConfigError("distill.temperature must be positive");
  if (interleave_stage1 == 0 || interleave_stage2 == 0) throw ConfigError("distill.interleave counts must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optim.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
  if (!(ema_beta >= 0.0 && ema_beta < 1.0)) throw ConfigError("penalty.ema_beta must lie in [0, 1)");
  if (!(baseline_weight >= 0.0)) throw ConfigError("penalty.baseline_weight must be non-negative");
  if (batch_size == 0) throw ConfigError("distill.batch_size must be positive");
  if (log_interval == 0) throw ConfigError("distill.log_interval must be positive");
  if (c == 0) throw ConfigError("aggregation.c must be positive");
  check_schedule(lr1, stage1_steps(), "optim.lr1");
  check_schedule(lr2, stage2_steps(), "optim.lr2");
}

TeacherCache::TeacherCache(const Network& teacher, const Dataset& data, std::size_t chunk)
    : size_(data.size()), classes_(teacher.config().class_count) {
  if (chunk == 0) throw UsageError("TeacherCache: chunk must be positive");
  NoGradGuard guard;
  taps_.resize(teacher.block_count());
  for (std::size_t b = 0; b < teacher.block_count(); ++b) {
    Shape s = teacher.tap_shape(b, 1);
    s.erase(s.begin());
    tap_shapes_.push_back(s);
    taps_[b].reserve(size_ * shape_numel(s));
  }
  logits_.reserve(size_ * classes_);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < size_; start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(size_, start + chunk); ++i) idx.push_back(i);
    const Batch batch = make_batch(data, idx);
    const ForwardResult out = teacher.forward_with_taps(batch.images);
    auto l = out.logits.data();
    logits_.insert(logits_.end(), l.begin(), l.end());
    for (std::size_t b = 0; b < taps_.size(); ++b) {
      auto t = out.taps[b].features.data();
      taps_[b].insert(taps_[b].end(), t.begin(), t.end());
    }
  }
}

Tensor TeacherCache::logits(std::span<const std::size_t> indices) const {
  std::vector<double> out;
  out.reserve(indices.size() * classes_);
  for (std::size_t i : indices) {
    if (i >= size_) throw UsageError("TeacherCache: index out of range");
    out.insert(out.end(), logits_.begin() + static_cast<std::ptrdiff_t>(i * classes_),
               logits_.begin() + static_cast<std::ptrdiff_t>((i + 1) * classes_));
  }
  return Tensor::from({indices.size(), classes_}, std::move(out));
}

Tensor TeacherCache::tap(std::size_t block, std::span<const std::size_t> indices) const {
  const Shape& s = tap_shapes_.at(block);
  const std::size_t n = shape_numel(s);
  std::vector<double> out;
  out.reserve(indices.size() * n);
  for (std::size_t i : indices) {
    if (i >= size_) throw UsageError("TeacherCache: index out of range");
    out.insert(out.end(), taps_[block].begin() + static_cast<std::ptrdiff_t>(i * n),
               taps_[block].begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor::from(std::move(shape), std::move(out));
}

Tensor prior_match_loss(std::span<const Tap> student_taps, const Network& student,
                        const KnowledgeAggregator& aggregator, const Tensor& batch) {
  const auto& blocks = aggregator.blocks();
  if (blocks.size() != student.block_count() || student_taps.size() != blocks.size()) {
    throw UsageError("prior_match_loss: aggregator plan does not align with the student blocks");
  }
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const BlockGeometry& a = blocks[k].geometry;
    const BlockGeometry& s = student.block_geometry(aggregator.plan().target_block[k]);
    if (a.in_channels != s.in_channels || a.out_channels != s.out_channels || a.stride != s.stride ||
        a.convs != s.convs) {
      throw UsageError("prior_match_loss: aggregated block " + std::to_string(k) +
                       " does not share the student block topology");
    }
  }
  std::vector<Tensor> agg_features;
  {
    NoGradGuard guard;
    agg_features = aggregator.forward(batch);
  }
  Tensor total;
  auto accumulate = [&total](const Tensor& term) { total = total.defined() ? add(total, term) : term; };
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    accumulate(l2_distance(agg_features[k], student_taps[aggregator.plan().target_block[k]].features));
  }
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto student_params = student.block_parameters(aggregator.plan().target_block[k]);
    for (std::size_t j = 0; j < student_params.size() && j < blocks[k].params.size(); ++j) {
      const Tensor& agg = blocks[k].params[j].tensor;
      const Tensor& mine = student_params[j]->tensor;
      if (agg.shape() == mine.shape()) accumulate(l2_distance(agg.detach(), mine));
    }
  }
  return total;
}

Tensor prior_match_loss(const Network& student, const KnowledgeAggregator& aggregator, const Tensor& batch) {
  const ForwardResult out = student.forward_with_taps(batch);
  return prior_match_loss(out.taps, student, aggregator, batch);
}

Stage2Result stage2_step(Network& student, const KnowledgeAggregator& aggregator, const Batch& batch,
                         const Tensor& targets, const DistillConfig& config, ThresholdState& threshold,
                         OptimizerState& optimizer, double lr) {
  if (!targets.defined()) throw UsageError("stage2_step: missing teacher targets");
  auto& params = student.parameters();
  zero_grads(params);

  Stage2Result result;
  const ForwardResult out = student.forward_with_taps(batch.images);
  Tensor kd = softmax_cross_entropy(out.logits, targets, config.temperature);
  result.kd_loss = kd.item();
  Tensor total = kd;
  if (config.gamma > 0.0) {
    Tensor prior = prior_match_loss(out.taps, student, aggregator, batch.images);
    result.prior_loss = prior.item();
    total = add(kd, scale(prior, config.gamma));
  }
  result.total = total.item();
  result.correct = count_correct(out.logits, batch.labels);
  if (!std::isfinite(result.total)) throw DivergenceError("stage-2 loss is not finite");

  backward(total);
  active_tape().clear();

  auto weights = weight_tensors(student);
  if (config.penalty == PenaltyKind::sparse_recoding) {
    const auto raw = mean_abs_gradients(weights);
    recode_gradients(weights, threshold);
    update_epsilon(threshold, raw);
  } else {
    baseline_recode(weights, config.penalty, config.baseline_weight);
  }
  sgd_step(params, optimizer, lr, config.momentum, config.weight_decay);
  return result;
}

Distiller::Distiller(const Network& teacher, Network& student, DistillConfig config)
    : teacher_(teacher),
      student_(student),
      config_(std::move(config)),
      aggregator_(teacher, student, config_.c, mix_seed(config_.seed, 3), config_.shared_init),
      threshold_(init_threshold_state(weight_tensors(student), config_.ema_beta, config_.lambda, config_.additive)),
      student_opt_(OptimizerState::for_parameters(student.parameters())) {
  config_.validate();
  if (teacher.config().class_count != student.config().class_count) {
    throw UsageError("teacher and student class counts differ");
  }
}

TrainReport Distiller::run(const Dataset& train, const Dataset* test, const MetricsSink& sink) {
  if (cache_ && cache_->size() != train.size()) throw UsageError("teacher cache does not match training set");
  const DistillConfig& cfg = config_;
  BatchSampler stage1_sampler(train.size(), cfg.batch_size, cfg.seed, kStage1Stream);
  BatchSampler stage2_sampler(train.size(), cfg.batch_size, cfg.seed, kStage2Stream);
  const auto steps1 = cfg.stage1_steps();
  const auto steps2 = cfg.stage2_steps();
  const std::size_t classes = student_.config().class_count;

  TrainReport report;
  MetricsRow window;
  std::size_t window_seen = 0, window_correct = 0;

  for (; iteration_ < cfg.max_iter; ++iteration_) {
    const std::size_t it = iteration_;
    try {
      const double lr1 = lr_schedule(it, cfg.lr1, steps1);
      const double lr2 = lr_schedule(it, cfg.lr2, steps2);

      for (std::size_t j = 0; j < cfg.interleave_stage1; ++j) {
        const auto idx = stage1_sampler.indices(it * cfg.interleave_stage1 + j);
        const Batch batch = make_batch(train, idx);
        zero_grads(student_.parameters());
        std::vector<Tensor> features;
        if (cache_) {
          for (std::size_t k = 0; k < aggregator_.blocks().size(); ++k) {
            features.push_back(cache_->tap(aggregator_.teacher_block(k), idx));
          }
        } else {
          features = aggregator_.teacher_features(teacher_, batch.images);
        }
        const Stage1Result r = aggregator_.stage1_step(features, batch.images, cfg.gamma, lr1, cfg.momentum,
                                                       cfg.weight_decay);
        if (any_gradient(student_.parameters()) || any_gradient(teacher_.parameters())) {
          throw IsolationError("stage-1 step produced gradients outside the aggregated blocks");
        }
        report.stage1_loss_trace.push_back(r.loss);
        window.stage1_loss += r.loss;
        ++window.stage1_steps;
      }

      auto agg_params = aggregator_.parameters();
      zero_grads(agg_params);
      for (std::size_t j = 0; j < cfg.interleave_stage2; ++j) {
        const auto idx = stage2_sampler.indices(it * cfg.interleave_stage2 + j);
        const Batch batch = make_batch(train, idx);
        Tensor targets;
        if (cfg.hard_labels) {
          targets = one_hot(batch.labels, classes);
        } else if (cache_) {
          targets = softmax(cache_->logits(idx), cfg.temperature);
        } else {
          NoGradGuard guard;
          targets = softmax(teacher_.forward(batch.images), cfg.temperature);
        }
        const Stage2Result r =
            stage2_step(student_, aggregator_, batch, targets, cfg, threshold_, student_opt_, lr2);
        if (any_gradient(agg_params) || any_gradient(teacher_.parameters())) {
          throw IsolationError("stage-2 step produced gradients outside the student");
        }
        report.stage2_loss_trace.push_back(r.total);
        report.kd_loss_trace.push_back(r.kd_loss);
        window.prior_loss += r.prior_loss;
        window.kd_loss += r.kd_loss;
        window_correct += r.correct;
        window_seen += batch.labels.size();
        ++window.stage2_steps;
      }
    } catch (const DivergenceError& e) {
      throw DivergenceError("iteration " + std::to_string(it) + ": " + e.what());
    }

    const std::size_t done = it + 1;
    if (done % cfg.log_interval == 0 || done == cfg.max_iter) {
      MetricsRow row = window;
      row.iter = done;
      if (row.stage1_steps) row.stage1_loss /= static_cast<double>(row.stage1_steps);
      if (row.stage2_steps) {
        row.prior_loss /= static_cast<double>(row.stage2_steps);
        row.kd_loss /= static_cast<double>(row.stage2_steps);
      }
      row.train_acc = window_seen ? static_cast<double>(window_correct) / static_cast<double>(window_seen) : 0.0;
      row.mean_epsilon = threshold_.mean_epsilon();
      row.weight_sparsity_fraction = sparsity_fraction(weight_tensors(student_));
      const bool eval_now = (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) || done == cfg.max_iter;
      if (test && eval_now) row.test_acc = evaluate_accuracy(student_, *test);
      report.rows.push_back(row);
      if (sink) sink(row);
      window = MetricsRow{};
      window_seen = window_correct = 0;
    }
  }
  report.iterations = iteration_;
  report.final_train_acc = evaluate_accuracy(student_, train);
  if (test) {
    report.final_test_acc = !report.rows.empty() && !std::isnan(report.rows.back().test_acc)
                                ? report.rows.back().test_acc
                                : evaluate_accuracy(student_, *test);
  }
  return report;
}

TrainReport joint_train(const Network& teacher, Network& student, const Dataset& train, const DistillConfig& config,
                        const Dataset* test, const TeacherCache* cache) {
  Distiller distiller(teacher, student, config);
  distiller.use_teacher_cache(cache);
  return distiller.run(train, test);
}

PlainTrainReport train_supervised(Network& net, const Dataset& train, const PlainTrainConfig& config) {
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");
  const auto steps = config.steps ? *config.steps
                                  : scale_steps(reference_steps(), kReferenceTotalIter, config.max_iter,
                                                config.lr / kReferenceBaseRate);
  check_schedule(config.lr, steps, "lr");
  BatchSampler sampler(train.size(), config.batch_size, config.seed, kStage2Stream);
  auto& params = net.parameters();
  OptimizerState opt = OptimizerState::for_parameters(params);
  PlainTrainReport report;
  for (std::size_t it = 0; it < config.max_iter; ++it) {
    const auto idx = sampler.indices(it);
    const Batch batch = make_batch(train, idx);
    zero_grads(params);
    Tensor logits = net.forward(batch.images);
    Tensor loss = softmax_cross_entropy(logits, one_hot(batch.labels, net.config().class_count), 1.0);
    if (!std::isfinite(loss.item())) {
      throw DivergenceError("supervised training diverged at iteration " + std::to_string(it));
    }
    backward(loss);
    active_tape().clear();
    sgd_step(params, opt, lr_schedule(it, config.lr, steps), config.momentum, config.weight_decay);
    report.loss_trace.push_back(loss.item());
    report.correct += count_correct(logits, batch.labels);
    report.seen += batch.labels.size();
  }
  zero_grads(params);
  return report;
}

double evaluate_accuracy(const Network& net, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) throw UsageError("evaluate_accuracy: empty dataset");
  NoGradGuard guard;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx);
    correct += count_correct(net.forward(b.images), b.labels);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<Parameter> weight_tensors(const Network& net) {
  std::vector<Parameter> out;
  for (const Parameter& p : net.parameters()) {
    if (p.name.ends_with(".weight")) out.push_back(p);
  }
  return out;
}

}  // namespace kr
