#include "kr/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "kr/errors.hpp"

namespace kr {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_num(const std::string& field, std::size_t line_no) {
  if (field.empty()) return std::nan("");
  char* end = nullptr;
  const double v = std::strtod(field.c_str(), &end);
  if (end != field.c_str() + field.size()) {
    throw FormatError("metrics line " + std::to_string(line_no) + ": bad number '" + field + "'");
  }
  return v;
}

void check_header(std::istream& in, const std::filesystem::path& path) {
  std::string version, header;
  if (!std::getline(in, version) || version != kMetricsVersionLine) {
    throw FormatError(path.string() + ": missing '" + kMetricsVersionLine + "' line");
  }
  if (!std::getline(in, header) || header != kMetricsHeader) {
    throw FormatError(path.string() + ": unexpected metrics header");
  }
}

}  // namespace

std::string format_metrics_row(const MetricsRow& r) {
  return std::to_string(r.iter) + "," + num(r.stage1_loss) + "," + num(r.prior_loss) + "," + num(r.kd_loss) + "," +
         num(r.train_acc) + "," + num(r.test_acc) + "," + num(r.mean_epsilon) + "," +
         num(r.weight_sparsity_fraction) + "," + std::to_string(r.stage1_steps) + "," +
         std::to_string(r.stage2_steps);
}

MetricsRow parse_metrics_row(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream in(line);
  std::string f;
  while (std::getline(in, f, ',')) fields.push_back(f);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  if (fields.size() != 10) throw FormatError("metrics row has " + std::to_string(fields.size()) + " fields");
  MetricsRow r;
  r.iter = static_cast<std::size_t>(parse_num(fields[0], 0));
  r.stage1_loss = parse_num(fields[1], 0);
  r.prior_loss = parse_num(fields[2], 0);
  r.kd_loss = parse_num(fields[3], 0);
  r.train_acc = parse_num(fields[4], 0);
  r.test_acc = parse_num(fields[5], 0);
  r.mean_epsilon = parse_num(fields[6], 0);
  r.weight_sparsity_fraction = parse_num(fields[7], 0);
  r.stage1_steps = static_cast<std::size_t>(parse_num(fields[8], 0));
  r.stage2_steps = static_cast<std::size_t>(parse_num(fields[9], 0));
  return r;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool append) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const bool existing = append && std::filesystem::exists(path) && std::filesystem::file_size(path) > 0;
  if (existing) {
    std::ifstream in(path);
    check_header(in, path);
  }
  out_.open(path, existing ? std::ios::app : std::ios::trunc);
  if (!out_) throw Error("cannot open metrics file " + path.string());
  if (!existing) {
    out_ << kMetricsVersionLine << '\n' << kMetricsHeader << '\n';
    out_.flush();
  }
}

void MetricsWriter::write(const MetricsRow& row) {
  out_ << format_metrics_row(row) << '\n';
  out_.flush();
  if (!out_) throw Error("failed writing metrics file " + path_.string());
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open metrics file " + path.string());
  check_header(in, path);
  std::vector<MetricsRow> rows;
  std::string line;
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(parse_metrics_row(line));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (rows.size() > 1 && rows.back().iter <= rows[rows.size() - 2].iter) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": iterations not increasing");
    }
  }
  return rows;
}

}  // namespace kr
