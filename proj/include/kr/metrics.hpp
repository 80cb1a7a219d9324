#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kr/distill.hpp"

namespace kr {

inline constexpr const char* kMetricsVersionLine = "# kr-metrics v1";
inline constexpr const char* kMetricsHeader =
    "iter,stage1_loss,prior_loss,kd_loss,train_acc,test_acc,mean_epsilon,weight_sparsity_fraction,"
    "stage1_steps,stage2_steps";

std::string format_metrics_row(const MetricsRow& row);
MetricsRow parse_metrics_row(const std::string& line);

// Append-only CSV. A new file gets the version line and header; an existing
// file is validated and appended to.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path, bool append = false);

  void write(const MetricsRow& row);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

}  // namespace kr
