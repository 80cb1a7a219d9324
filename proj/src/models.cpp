#include "kr/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "kr/errors.hpp"
#include "kr/ops.hpp"

namespace kr {

void NetworkConfig::validate() const {
  if (blocks.empty()) throw ConfigError(name + ": network needs at least one block");
  if (input_shape.size() != 3) throw ConfigError(name + ": input_shape must be C x H x W");
  if (class_count < 2) throw ConfigError(name + ": class_count must be at least 2");
  std::size_t convs = 0;
  std::size_t h = input_shape[1], w = input_shape[2];
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const BlockSpec& spec = blocks[b];
    if (spec.width == 0 || spec.convs == 0 || spec.stride == 0) {
      throw ConfigError(name + ": block " + std::to_string(b) + " has a zero width, conv count or stride");
    }
    if (h % spec.stride != 0 || w % spec.stride != 0) {
      throw ConfigError(name + ": block " + std::to_string(b) + " stride " + std::to_string(spec.stride) +
                        " does not divide spatial extent " + std::to_string(h) + "x" + std::to_string(w));
    }
    h /= spec.stride;
    w /= spec.stride;
    convs += spec.convs;
  }
  if (convs != conv_layer_count) {
    throw ConfigError(name + ": conv_layer_count " + std::to_string(conv_layer_count) +
                      " but blocks hold " + std::to_string(convs));
  }
  const std::size_t features = blocks.back().width * h * w;
  if (classifier_width != features) {
    throw ConfigError(name + ": classifier_width " + std::to_string(classifier_width) +
                      " must equal the flattened final map size " + std::to_string(features));
  }
}

std::size_t NetworkConfig::flattened_width() const {
  std::size_t h = input_shape.at(1), w = input_shape.at(2);
  for (const BlockSpec& b : blocks) {
    if (b.stride == 0) throw ConfigError(name + ": zero stride");
    h /= b.stride;
    w /= b.stride;
  }
  return blocks.empty() ? 0 : blocks.back().width * h * w;
}

NetworkConfig preset(std::string_view name, const Shape& input_shape, std::size_t class_count) {
  NetworkConfig cfg;
  cfg.name = std::string(name);
  cfg.input_shape = input_shape;
  cfg.class_count = class_count;
  if (name == "T6") {
    cfg.blocks = {{12, 2, 3}, {24, 2, 3}};
  } else if (name == "S2") {
    cfg.blocks = {{4, 2, 1}, {8, 2, 1}};
  } else if (name == "T9") {
    cfg.blocks = {{12, 1, 3}, {24, 2, 3}, {48, 2, 3}};
  } else if (name == "S3") {
    cfg.blocks = {{4, 1, 1}, {8, 2, 1}, {16, 2, 1}};
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected T6, S2, T9 or S3)");
  }
  for (const auto& b : cfg.blocks) cfg.conv_layer_count += b.convs;
  if (input_shape.size() != 3) throw ConfigError(cfg.name + ": input_shape must be C x H x W");
  cfg.classifier_width = cfg.flattened_width();
  cfg.validate();
  return cfg;
}

Tensor IdentityMapping::apply(const Tensor& x) const {
  Tensor pooled = stride > 1 ? avgpool2d(x, stride) : x;
  return conv2d(pooled, weight.tensor, 1, 0);
}

Tensor residual_block_forward(const Tensor& x, const BlockGeometry& geometry,
                              std::span<const Parameter> convs, const Parameter* projection) {
  if (convs.size() != geometry.convs) throw UsageError("residual block: conv parameter count mismatch");
  if (geometry.has_projection() != (projection != nullptr)) {
    throw UsageError("residual block: projection presence does not match geometry");
  }
  Tensor in = geometry.stride > 1 ? avgpool2d(x, geometry.stride) : x;
  Tensor h = in;
  for (std::size_t j = 0; j < convs.size(); ++j) {
    h = conv2d(h, convs[j].tensor, 1, 1);
    if (j + 1 < convs.size()) h = relu(h);
  }
  Tensor skip = projection ? conv2d(in, projection->tensor, 1, 0) : in;
  return relu(add(skip, scale(h, kBranchScale)));
}

std::vector<BlockGeometry> block_geometries(const NetworkConfig& config) {
  std::vector<BlockGeometry> out;
  std::size_t in = config.input_shape.at(0);
  for (const BlockSpec& spec : config.blocks) {
    out.push_back({in, spec.width, spec.stride, spec.convs});
    in = spec.width;
  }
  return out;
}

std::span<const Parameter> Network::block_convs(std::size_t b) const {
  const BlockLayout& layout = blocks_.at(b);
  return std::span<const Parameter>(params_).subspan(layout.first_conv, layout.geometry.convs);
}

const Parameter* Network::block_projection(std::size_t b) const {
  const BlockLayout& layout = blocks_.at(b);
  return layout.projection ? &params_[*layout.projection] : nullptr;
}

std::vector<const Parameter*> Network::block_parameters(std::size_t b) const {
  std::vector<const Parameter*> out;
  for (const Parameter& p : block_convs(b)) out.push_back(&p);
  if (const Parameter* proj = block_projection(b)) out.push_back(proj);
  return out;
}

std::vector<const Parameter*> Network::conv_parameters() const {
  std::vector<const Parameter*> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (const Parameter& p : block_convs(b)) out.push_back(&p);
  }
  return out;
}

Shape Network::tap_shape(std::size_t b, std::size_t batch) const {
  std::size_t h = config_.input_shape[1], w = config_.input_shape[2];
  for (std::size_t i = 0; i <= b; ++i) {
    h /= blocks_.at(i).geometry.stride;
    w /= blocks_[i].geometry.stride;
  }
  return {batch, blocks_[b].geometry.out_channels, h, w};
}

std::vector<std::string> Network::tap_names() const {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) out.push_back("block" + std::to_string(b));
  return out;
}

ForwardResult Network::forward_with_taps(const Tensor& x) const {
  const Shape& in = config_.input_shape;
  if (x.rank() != 4 || x.dim(1) != in[0] || x.dim(2) != in[1] || x.dim(3) != in[2]) {
    throw DimensionError(config_.name + ": input " + shape_str(x.shape()) + " does not match N x " +
                         shape_str(in));
  }
  ForwardResult out;
  Tensor h = x;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    h = residual_block_forward(h, blocks_[b].geometry, block_convs(b), block_projection(b));
    out.taps.push_back({"block" + std::to_string(b), h});
  }
  out.logits = add_bias(matmul(flatten(h), params_[fc_weight_].tensor), params_[fc_bias_].tensor);
  return out;
}

const Parameter& Network::find(std::string_view name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) return p;
  }
  throw UsageError("no parameter named '" + std::string(name) + "'");
}

Parameter& Network::find(std::string_view name) {
  return const_cast<Parameter&>(static_cast<const Network&>(*this).find(name));
}

std::size_t Network::scalar_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t Network::expected_parameter_count(const NetworkConfig& config) {
  std::size_t total = 0;
  for (const BlockGeometry& g : block_geometries(config)) {
    total += 9 * g.in_channels * g.out_channels + (g.convs - 1) * 9 * g.out_channels * g.out_channels;
    if (g.has_projection()) total += g.in_channels * g.out_channels;
  }
  return total + config.classifier_width * config.class_count + config.class_count;
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

}  // namespace

Network build_network(const NetworkConfig& config, std::uint64_t init_seed, std::string_view prefix,
                      bool zero_classifier) {
  config.validate();
  Network net;
  net.config_ = config;
  std::mt19937_64 rng(init_seed);
  const std::string pre(prefix);
  int conv_index = 0;
  const auto geometries = block_geometries(config);
  for (std::size_t b = 0; b < geometries.size(); ++b) {
    const BlockGeometry& g = geometries[b];
    Network::BlockLayout layout;
    layout.geometry = g;
    layout.first_conv = net.params_.size();
    const std::string base = pre + ".block" + std::to_string(b);
    for (std::size_t j = 0; j < g.convs; ++j) {
      const std::size_t cin = j == 0 ? g.in_channels : g.out_channels;
      net.params_.push_back({he_normal({g.out_channels, cin, 3, 3}, cin * 9, rng),
                             base + ".conv" + std::to_string(j) + ".weight", conv_index++});
    }
    if (g.has_projection()) {
      layout.projection = net.params_.size();
      net.params_.push_back({he_normal({g.out_channels, g.in_channels, 1, 1}, g.in_channels, rng),
                             base + ".proj.weight", -1});
    }
    net.blocks_.push_back(layout);
  }
  const std::size_t width = config.classifier_width, classes = config.class_count;
  net.fc_weight_ = net.params_.size();
  if (zero_classifier) {
    net.params_.push_back({Tensor::zeros({width, classes}, true), pre + ".fc.weight", -1});
  } else {
    // Unit-gain fan-in scaling for the linear head.
    Tensor w = he_normal({width, classes}, width, rng);
    for (double& v : w.mutable_data()) v *= std::sqrt(0.5);
    net.params_.push_back({w, pre + ".fc.weight", -1});
  }
  net.fc_bias_ = net.params_.size();
  net.params_.push_back({Tensor::zeros({classes}, true), pre + ".fc.bias", -1});
  return net;
}

namespace {

ParamStats stats_over(const std::vector<std::span<const double>>& chunks) {
  std::size_t count = 0;
  double total = 0.0;
  for (auto c : chunks) {
    for (double v : c) total += v;
    count += c.size();
  }
  if (count == 0) throw UsageError("param_stats: empty parameter list");
  const double mean = total / static_cast<double>(count);
  // A constant group has zero spread; the rounded mean would leave a residue.
  const double first = chunks.front().empty() ? mean : chunks.front().front();
  bool constant = true;
  for (auto c : chunks) constant = constant && std::all_of(c.begin(), c.end(), [&](double v) { return v == first; });
  if (constant) return {first, 0.0};
  double ss = 0.0;
  for (auto c : chunks) {
    for (double v : c) ss += (v - mean) * (v - mean);
  }
  return {mean, std::sqrt(ss / static_cast<double>(count))};
}

}  // namespace

ParamStats param_stats(std::span<const Parameter> params) {
  std::vector<std::span<const double>> chunks;
  for (const Parameter& p : params) chunks.push_back(p.tensor.data());
  return stats_over(chunks);
}

ParamStats param_stats(std::span<const Parameter* const> params) {
  std::vector<std::span<const double>> chunks;
  for (const Parameter* p : params) chunks.push_back(p->tensor.data());
  return stats_over(chunks);
}

void copy_parameter_values(std::span<const Parameter> src, std::span<Parameter> dst) {
  if (src.size() != dst.size()) throw UsageError("copy_parameter_values: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw DimensionError("copy_parameter_values: " + src[i].name + " " + shape_str(src[i].tensor.shape()) +
                           " vs " + dst[i].name + " " + shape_str(dst[i].tensor.shape()));
    }
    auto s = src[i].tensor.data();
    auto d = dst[i].tensor.mutable_data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace kr
