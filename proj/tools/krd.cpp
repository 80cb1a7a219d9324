// krd: command-line front end for teacher training, distillation and checks.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kr/checkpoint.hpp"
#include "kr/config.hpp"
#include "kr/data.hpp"
#include "kr/distill.hpp"
#include "kr/errors.hpp"
#include "kr/gradcheck.hpp"
#include "kr/metrics.hpp"
#include "kr/models.hpp"

namespace fs = std::filesystem;
using namespace kr;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_iter;
  std::string out_dir = "run";
  std::string teacher_ckpt;
  std::string preset;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Config file (key = value)");
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--max-iter", o.max_iter, "Iteration budget");
  cmd->add_option("--out-dir", o.out_dir, "Output directory")->capture_default_str();
  cmd->add_option("--teacher-ckpt", o.teacher_ckpt, "Teacher checkpoint");
  cmd->add_option("--preset", o.preset, "Network preset (T6, S2, T9, S3)");
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) {
    cfg.distill.seed = *o.seed;
    cfg.init_seed = *o.seed;
  }
  if (!o.teacher_ckpt.empty()) cfg.teacher_checkpoint = o.teacher_ckpt;
  return cfg;
}

DatasetSplit load_data(const RunConfig& cfg) {
  DatasetSplit split = load_dataset(cfg.data);
  std::fprintf(stderr, "data: %s, %zu train / %zu test\n", std::string(to_string(cfg.data.kind)).c_str(),
               split.train.size(), split.test.size());
  return split;
}

NetworkConfig network_for(const std::string& name, const Dataset& data) {
  return preset(name, data.image_shape, data.class_count);
}

// Tensors in a checkpoint are named "<prefix>.<...>"; the prefix of the first
// one names the network role.
std::string checkpoint_prefix(const Checkpoint& ckpt) {
  if (ckpt.tensors.empty()) throw FormatError("checkpoint holds no tensors");
  const std::string& n = ckpt.tensors.front().name;
  return n.substr(0, n.find('.'));
}

Network load_teacher(const RunConfig& cfg, const Dataset& train) {
  Network teacher = build_network(network_for(cfg.teacher_preset, train), mix_seed(cfg.init_seed, 7), "teacher");
  if (cfg.teacher_checkpoint.empty()) {
    std::fprintf(stderr, "warning: no teacher checkpoint given; distilling from an untrained teacher\n");
    return teacher;
  }
  restore_parameters(load_checkpoint(cfg.teacher_checkpoint), teacher.parameters());
  return teacher;
}

int cmd_train_teacher(const CommonOptions& o) {
  RunConfig cfg = resolve_config(o);
  if (!o.preset.empty()) cfg.teacher_preset = o.preset;
  if (o.max_iter) cfg.teacher.max_iter = *o.max_iter;
  const DatasetSplit data = load_data(cfg);
  Network teacher = build_network(network_for(cfg.teacher_preset, data.train), mix_seed(cfg.init_seed, 7), "teacher");
  PlainTrainConfig train;
  train.max_iter = cfg.teacher.max_iter;
  train.lr = cfg.teacher.lr;
  train.batch_size = cfg.teacher.batch_size;
  train.momentum = cfg.distill.momentum;
  train.weight_decay = cfg.distill.weight_decay;
  train.seed = cfg.distill.seed;
  const PlainTrainReport report = train_supervised(teacher, data.train, train);
  const double acc = evaluate_accuracy(teacher, data.test);
  Checkpoint ckpt;
  ckpt.seed = cfg.distill.seed;
  ckpt.iteration = cfg.teacher.max_iter;
  ckpt.config = config_snapshot(cfg);
  add_parameters(ckpt, teacher.parameters());
  const fs::path path = fs::path(o.out_dir) / "teacher.ckpt";
  save_checkpoint(path, ckpt);
  const double last = report.loss_trace.empty() ? 0.0 : report.loss_trace.back();
  std::printf("teacher %s: %zu iterations, last loss %.6f, test accuracy %.4f\n", cfg.teacher_preset.c_str(),
              cfg.teacher.max_iter, last, acc);
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

int cmd_distill(const CommonOptions& o, bool resume) {
  RunConfig cfg = resolve_config(o);
  if (!o.preset.empty()) cfg.student_preset = o.preset;
  if (o.max_iter) cfg.distill.max_iter = *o.max_iter;
  cfg.distill.validate();
  const DatasetSplit data = load_data(cfg);
  const Network teacher = load_teacher(cfg, data.train);
  Network student = build_network(network_for(cfg.student_preset, data.train), mix_seed(cfg.init_seed, 8), "student");

  const fs::path out(o.out_dir);
  fs::create_directories(out);
  const fs::path ckpt_path = out / "student.ckpt";
  const std::string snapshot = config_snapshot(cfg);
  {
    std::FILE* f = std::fopen((out / "config.snapshot").string().c_str(), "wb");
    if (!f) throw Error("cannot write config snapshot");
    std::fwrite(snapshot.data(), 1, snapshot.size(), f);
    std::fclose(f);
  }

  Distiller distiller(teacher, student, cfg.distill);
  if (resume && fs::exists(ckpt_path)) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    restore_distiller(ckpt, distiller, student);
    std::fprintf(stderr, "resuming at iteration %zu\n", distiller.iteration());
  }
  std::optional<TeacherCache> cache;
  if (distiller.iteration() < cfg.distill.max_iter) {
    cache.emplace(teacher, data.train);
    distiller.use_teacher_cache(&*cache);
  }
  MetricsWriter metrics(out / "metrics.csv", resume && distiller.iteration() > 0);
  const TrainReport report = distiller.run(data.train, &data.test, [&](const MetricsRow& r) {
    metrics.write(r);
    std::fprintf(stderr, "iter %zu  stage1 %.5f  prior %.5f  kd %.5f  train %.4f\n", r.iter, r.stage1_loss,
                 r.prior_loss, r.kd_loss, r.train_acc);
  });
  save_checkpoint(ckpt_path, capture_distiller(distiller, student, snapshot));
  std::printf("student %s: %zu iterations, test accuracy %.4f\n", cfg.student_preset.c_str(), report.iterations,
              report.final_test_acc);
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint) {
  RunConfig cfg = resolve_config(o);
  const DatasetSplit data = load_data(cfg);
  std::string prefix = "student";
  std::optional<Checkpoint> ckpt;
  if (!checkpoint.empty()) {
    ckpt = load_checkpoint(checkpoint);
    prefix = checkpoint_prefix(*ckpt);
  }
  std::string name = o.preset;
  if (name.empty()) name = prefix == "teacher" ? cfg.teacher_preset : cfg.student_preset;
  Network net = build_network(network_for(name, data.test), mix_seed(cfg.init_seed, 8), prefix);
  if (ckpt) restore_parameters(*ckpt, net.parameters());
  std::printf("%s accuracy %.4f on %zu test examples\n", name.c_str(), evaluate_accuracy(net, data.test),
              data.test.size());
  return 0;
}

int cmd_distort(const CommonOptions& o) {
  RunConfig cfg = resolve_config(o);
  if (o.seed) cfg.distortion.seed = *o.seed;
  const DatasetSplit data = load_data(cfg);
  DistortionSpec train_spec = cfg.distortion, test_spec = cfg.distortion;
  train_spec.seed = mix_seed(cfg.distortion.seed, 1);
  test_spec.seed = mix_seed(cfg.distortion.seed, 2);
  const Dataset train = distort_dataset(data.train, train_spec);
  const Dataset test = distort_dataset(data.test, test_spec);
  const fs::path out(o.out_dir);
  fs::create_directories(out);
  if (train.image_shape.size() == 3 && train.image_shape[0] == 3 && train.image_shape[1] == 32) {
    write_cifar10(train, out / "data_batch_1.bin");
    write_cifar10(test, out / "test_batch.bin");
  } else if (train.image_shape.size() == 3 && train.image_shape[0] == 1) {
    write_mnist(train, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte");
    write_mnist(test, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte");
  } else {
    throw UsageError("distort-dataset writes single-channel (IDX) or 3x32x32 (CIFAR) images only");
  }
  std::printf("wrote distorted set (sigma %g) to %s\n", cfg.distortion.sigma, out.string().c_str());
  return 0;
}

int cmd_gradcheck(const CommonOptions& o) {
  const GradcheckReport report = run_gradcheck_suite(o.seed.value_or(1));
  for (const GradcheckCase& c : report.cases) {
    std::printf("%-24s %s  max rel error %.3e over %zu instances\n", c.name.c_str(), c.passed ? "ok  " : "FAIL",
                c.max_error, c.instances);
  }
  return report.ok() ? 0 : 1;
}

int cmd_report(const CommonOptions& o, const std::string& metrics_path) {
  const fs::path path = metrics_path.empty() ? fs::path(o.out_dir) / "metrics.csv" : fs::path(metrics_path);
  const auto rows = read_metrics(path);
  std::printf("%8s %12s %12s %12s %9s %9s %12s %9s\n", "iter", "stage1", "prior", "kd", "train", "test", "mean_eps",
              "sparsity");
  for (const MetricsRow& r : rows) {
    std::printf("%8zu %12.6f %12.6f %12.6f %9.4f %9.4f %12.4e %9.4f\n", r.iter, r.stage1_loss, r.prior_loss,
                r.kd_loss, r.train_acc, r.test_acc, r.mean_epsilon, r.weight_sparsity_fraction);
  }
  std::printf("%zu rows\n", rows.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student distillation toolkit"};
  app.require_subcommand(1);
  CommonOptions opts;
  bool resume = false;
  std::string checkpoint, metrics_path;

  auto* train = app.add_subcommand("train-teacher", "Train a teacher preset and checkpoint it");
  add_common(train, opts);
  auto* distill = app.add_subcommand("distill", "Run joint two-stage distillation");
  add_common(distill, opts);
  distill->add_flag("--resume", resume, "Continue from <out-dir>/student.ckpt");
  auto* eval = app.add_subcommand("eval", "Report test accuracy of a network");
  add_common(eval, opts);
  eval->add_option("--checkpoint", checkpoint, "Network checkpoint (default: untrained)");
  auto* distort = app.add_subcommand("distort-dataset", "Write a Gaussian-distorted copy of the dataset");
  add_common(distort, opts);
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(gradcheck, opts);
  auto* report = app.add_subcommand("report", "Render a metrics CSV");
  add_common(report, opts);
  report->add_option("--metrics", metrics_path, "Metrics CSV (default: <out-dir>/metrics.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train_teacher(opts);
    if (distill->parsed()) return cmd_distill(opts, resume);
    if (eval->parsed()) return cmd_eval(opts, checkpoint);
    if (distort->parsed()) return cmd_distort(opts);
    if (gradcheck->parsed()) return cmd_gradcheck(opts);
    if (report->parsed()) return cmd_report(opts, metrics_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
