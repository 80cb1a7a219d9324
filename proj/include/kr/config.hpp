#pragma once

// Run configuration files.
//
// Grammar (one entry per line):
//   # comment            ; comment
//   [section]            prefixes following keys with "section."
//   key = value          value may be double-quoted
// Keys are dotted ("distill.gamma"). Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "kr/data.hpp"
#include "kr/distill.hpp"

namespace kr {

struct TeacherTrainConfig {
  std::size_t max_iter = 3000;
  double lr = 0.05;
  std::size_t batch_size = 32;
};

struct RunConfig {
  DistillConfig distill;
  DatasetSource data;
  DistortionSpec distortion;
  std::string teacher_preset = "T6";
  std::string student_preset = "S2";
  std::uint64_t init_seed = 1;  // network initialization
  std::filesystem::path teacher_checkpoint;
  TeacherTrainConfig teacher;
};

// Raw key/value view of a config file, keys fully qualified.
std::map<std::string, std::string> parse_config_entries(std::string_view text);

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

// Canonical text form: every key, sorted, parseable by parse_run_config.
std::string config_snapshot(const RunConfig& config);

// "30000:0.01,48000:0.001"
std::vector<LrStep> parse_steps(std::string_view text);
std::string format_steps(std::span<const LrStep> steps);

}  // namespace kr
