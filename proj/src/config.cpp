#include "kr/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "kr/errors.hpp"

namespace kr {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, std::string_view text) {
  const std::string s(text);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
  return v;
}

std::uint64_t to_uint(const std::string& key, std::string_view text) {
  const std::string s(text);
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
  errno = 0;
  const unsigned long long v = std::strtoull(s.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ConfigError(key + ": integer out of range");
  return v;
}

bool to_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + std::string(text) + "'");
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field size_field(std::string key, T RunConfig::*group, std::size_t T::*member) {
  return {std::move(key),
          [group, member](RunConfig& c, const std::string& k, std::string_view v) {
            c.*group.*member = static_cast<std::size_t>(to_uint(k, v));
          },
          [group, member](const RunConfig& c) { return std::to_string(c.*group.*member); }};
}

template <typename T>
Field double_field(std::string key, T RunConfig::*group, double T::*member) {
  return {std::move(key),
          [group, member](RunConfig& c, const std::string& k, std::string_view v) { c.*group.*member = to_double(k, v); },
          [group, member](const RunConfig& c) { return fmt_double(c.*group.*member); }};
}

template <typename T>
Field bool_field(std::string key, T RunConfig::*group, bool T::*member) {
  return {std::move(key),
          [group, member](RunConfig& c, const std::string& k, std::string_view v) { c.*group.*member = to_bool(k, v); },
          [group, member](const RunConfig& c) { return std::string(c.*group.*member ? "true" : "false"); }};
}

const std::vector<Field>& fields() {
  using D = DistillConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"seed",
                 [](RunConfig& c, const std::string& k, std::string_view v) { c.distill.seed = to_uint(k, v); },
                 [](const RunConfig& c) { return std::to_string(c.distill.seed); }});
    f.push_back({"model.teacher", [](RunConfig& c, const std::string&, std::string_view v) { c.teacher_preset = v; },
                 [](const RunConfig& c) { return c.teacher_preset; }});
    f.push_back({"model.student", [](RunConfig& c, const std::string&, std::string_view v) { c.student_preset = v; },
                 [](const RunConfig& c) { return c.student_preset; }});
    f.push_back({"model.init_seed",
                 [](RunConfig& c, const std::string& k, std::string_view v) { c.init_seed = to_uint(k, v); },
                 [](const RunConfig& c) { return std::to_string(c.init_seed); }});

    f.push_back(double_field("distill.gamma", &RunConfig::distill, &D::gamma));
    f.push_back(double_field("distill.lambda", &RunConfig::distill, &D::lambda));
    f.push_back(double_field("distill.temperature", &RunConfig::distill, &D::temperature));
    f.push_back(size_field("distill.max_iter", &RunConfig::distill, &D::max_iter));
    f.push_back({"distill.interleave",
                 [](RunConfig& c, const std::string& k, std::string_view v) {
                   const auto colon = v.find(':');
                   if (colon == std::string_view::npos) {
                     c.distill.interleave_stage1 = c.distill.interleave_stage2 = to_uint(k, v);
                   } else {
                     c.distill.interleave_stage1 = to_uint(k, trim(v.substr(0, colon)));
                     c.distill.interleave_stage2 = to_uint(k, trim(v.substr(colon + 1)));
                   }
                 },
                 [](const RunConfig& c) {
                   return std::to_string(c.distill.interleave_stage1) + ":" +
                          std::to_string(c.distill.interleave_stage2);
                 }});
    f.push_back(size_field("distill.batch_size", &RunConfig::distill, &D::batch_size));
    f.push_back(size_field("distill.log_interval", &RunConfig::distill, &D::log_interval));
    f.push_back(size_field("distill.eval_interval", &RunConfig::distill, &D::eval_interval));
    f.push_back(bool_field("distill.hard_labels", &RunConfig::distill, &D::hard_labels));

    f.push_back(double_field("optim.lr1", &RunConfig::distill, &D::lr1));
    f.push_back(double_field("optim.lr2", &RunConfig::distill, &D::lr2));
    f.push_back(double_field("optim.momentum", &RunConfig::distill, &D::momentum));
    f.push_back(double_field("optim.weight_decay", &RunConfig::distill, &D::weight_decay));

    // Breakpoints shared by both stages; rates are multipliers of each
    // stage's base rate. Empty means the reference steps scaled to max_iter.
    f.push_back({"schedule.steps",
                 [](RunConfig& c, const std::string&, std::string_view v) {
                   if (trim(v).empty()) {
                     c.distill.steps1.reset();
                     c.distill.steps2.reset();
                     return;
                   }
                   auto rel = parse_steps(v);
                   auto s1 = rel, s2 = rel;
                   for (auto& s : s1) s.rate *= c.distill.lr1;
                   for (auto& s : s2) s.rate *= c.distill.lr2;
                   c.distill.steps1 = s1;
                   c.distill.steps2 = s2;
                 },
                 [](const RunConfig& c) {
                   if (!c.distill.steps1) return std::string();
                   auto rel = *c.distill.steps1;
                   for (auto& s : rel) s.rate /= c.distill.lr1;
                   return format_steps(rel);
                 }});

    f.push_back({"penalty.kind",
                 [](RunConfig& c, const std::string&, std::string_view v) { c.distill.penalty = parse_penalty_kind(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.distill.penalty)); }});
    f.push_back(double_field("penalty.lambda", &RunConfig::distill, &D::lambda));
    f.push_back(double_field("penalty.ema_beta", &RunConfig::distill, &D::ema_beta));
    f.push_back(bool_field("penalty.additive", &RunConfig::distill, &D::additive));
    f.push_back(double_field("penalty.baseline_weight", &RunConfig::distill, &D::baseline_weight));

    f.push_back(size_field("aggregation.c", &RunConfig::distill, &D::c));
    f.push_back(double_field("aggregation.gamma", &RunConfig::distill, &D::gamma));
    f.push_back(bool_field("aggregation.shared_init", &RunConfig::distill, &D::shared_init));

    f.push_back({"data.kind",
                 [](RunConfig& c, const std::string&, std::string_view v) { c.data.kind = parse_dataset_kind(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.data.kind)); }});
    f.push_back({"data.root", [](RunConfig& c, const std::string&, std::string_view v) { c.data.root = std::string(v); },
                 [](const RunConfig& c) { return c.data.root.string(); }});
    f.push_back(size_field("data.subset", &RunConfig::data, &DatasetSource::subset));
    f.push_back(size_field("data.test_subset", &RunConfig::data, &DatasetSource::test_subset));
    f.push_back({"data.seed",
                 [](RunConfig& c, const std::string& k, std::string_view v) { c.data.seed = to_uint(k, v); },
                 [](const RunConfig& c) { return std::to_string(c.data.seed); }});
    f.push_back(size_field("data.synthetic_train", &RunConfig::data, &DatasetSource::synthetic_train));
    f.push_back(size_field("data.synthetic_test", &RunConfig::data, &DatasetSource::synthetic_test));
    f.push_back(size_field("data.synthetic_classes", &RunConfig::data, &DatasetSource::synthetic_classes));

    f.push_back(double_field("distort.sigma", &RunConfig::distortion, &DistortionSpec::sigma));
    f.push_back({"distort.seed",
                 [](RunConfig& c, const std::string& k, std::string_view v) { c.distortion.seed = to_uint(k, v); },
                 [](const RunConfig& c) { return std::to_string(c.distortion.seed); }});

    f.push_back({"teacher.checkpoint",
                 [](RunConfig& c, const std::string&, std::string_view v) { c.teacher_checkpoint = std::string(v); },
                 [](const RunConfig& c) { return c.teacher_checkpoint.string(); }});
    f.push_back(size_field("teacher.max_iter", &RunConfig::teacher, &TeacherTrainConfig::max_iter));
    f.push_back(double_field("teacher.lr", &RunConfig::teacher, &TeacherTrainConfig::lr));
    f.push_back(size_field("teacher.batch_size", &RunConfig::teacher, &TeacherTrainConfig::batch_size));
    return f;
  }();
  return table;
}

// Keys that alias another key; skipped in snapshots.
bool is_alias(std::string_view key) { return key == "penalty.lambda" || key == "aggregation.gamma"; }

const Field* find_field(std::string_view key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

}  // namespace

std::vector<LrStep> parse_steps(std::string_view text) {
  std::vector<LrStep> steps;
  std::string s(text);
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    const std::string_view t = trim(item);
    if (t.empty()) continue;
    const auto colon = t.find(':');
    if (colon == std::string_view::npos) throw ConfigError("schedule step '" + std::string(t) + "' lacks ':'");
    steps.push_back({static_cast<std::size_t>(to_uint("schedule.steps", trim(t.substr(0, colon)))),
                     to_double("schedule.steps", trim(t.substr(colon + 1)))});
  }
  for (std::size_t i = 1; i < steps.size(); ++i) {
    if (steps[i].iter < steps[i - 1].iter) throw ConfigError("schedule.steps must be sorted by iteration");
  }
  return steps;
}

std::string format_steps(std::span<const LrStep> steps) {
  std::string out;
  for (const LrStep& s : steps) {
    if (!out.empty()) out += ',';
    out += std::to_string(s.iter) + ":" + fmt_double(s.rate);
  }
  return out;
}

std::map<std::string, std::string> parse_config_entries(std::string_view text) {
  std::map<std::string, std::string> entries;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    const std::string where = "config line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
    std::string key(trim(line.substr(0, eq)));
    std::string_view value = trim(line.substr(eq + 1));
    if (!value.empty() && value.front() == '"') {
      const auto close = value.find('"', 1);
      if (close == std::string_view::npos) throw ConfigError(where + ": unterminated string");
      const std::string_view rest = trim(value.substr(close + 1));
      if (!rest.empty() && rest.front() != '#') throw ConfigError(where + ": trailing text after string");
      value = value.substr(1, close - 1);
    } else {
      const auto hash = value.find('#');
      if (hash != std::string_view::npos) value = trim(value.substr(0, hash));
    }
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!section.empty()) key = section + "." + key;
    if (entries.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    entries.emplace(std::move(key), std::string(value));
  }
  return entries;
}

RunConfig parse_run_config(std::string_view text) {
  const auto entries = parse_config_entries(text);
  RunConfig config;
  for (const auto& [key, value] : entries) {
    if (!find_field(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  // schedule.steps scales by the base rates, so it is applied last.
  for (const auto& [key, value] : entries) {
    if (key != "schedule.steps") find_field(key)->set(config, key, value);
  }
  if (auto it = entries.find("schedule.steps"); it != entries.end()) {
    find_field(it->first)->set(config, it->first, it->second);
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string config_snapshot(const RunConfig& config) {
  std::vector<std::pair<std::string, std::string>> lines;
  for (const Field& f : fields()) {
    if (!is_alias(f.key)) lines.emplace_back(f.key, f.get(config));
  }
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& [k, v] : lines) out += k + " = \"" + v + "\"\n";
  return out;
}

}  // namespace kr
