#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kr/tensor.hpp"

namespace kr {

// Residual branch outputs are multiplied by this before the skip sum. Stands in
// for batch normalization.
inline constexpr double kBranchScale = 0.5;

struct BlockSpec {
  std::size_t width = 0;
  std::size_t stride = 1;
  std::size_t convs = 1;
};

struct NetworkConfig {
  std::string name;
  std::size_t conv_layer_count = 0;
  std::vector<BlockSpec> blocks;
  std::size_t classifier_width = 0;  // flattened final feature map
  Shape input_shape;  // C x H x W
  std::size_t class_count = 0;

  // Throws ConfigError on inconsistency.
  void validate() const;
  // Final block width times its spatial extent.
  std::size_t flattened_width() const;
};

// Desk-scale presets: "T6", "S2", "T9", "S3".
NetworkConfig preset(std::string_view name, const Shape& input_shape = {1, 28, 28},
                     std::size_t class_count = 10);

// Average pooling by `stride` followed by a 1x1 convolution, reconciling
// channel count and spatial scale between two feature maps.
struct IdentityMapping {
  Parameter weight;  // out x in x 1 x 1
  std::size_t stride = 1;

  Tensor apply(const Tensor& x) const;
};

// One residual block. A stride > 1 is realized as average pooling at block
// entry, followed by a chain of 3x3 convolutions (pad 1, ReLU between them).
// The skip path is the pooled input, projected by a 1x1 convolution when the
// channel count changes.
struct BlockGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::size_t convs = 1;
  bool has_projection() const { return in_channels != out_channels; }
};

// relu(skip(x) + kBranchScale * branch(x))
Tensor residual_block_forward(const Tensor& x, const BlockGeometry& geometry,
                              std::span<const Parameter> convs, const Parameter* projection);

struct Tap {
  std::string name;
  Tensor features;
};

struct ForwardResult {
  Tensor logits;
  std::vector<Tap> taps;  // one per block, post residual sum
};

class Network;

// He (fan-in) initialization from a seeded stream. Parameters are named
// "<prefix>.block<b>.conv<j>.weight", "<prefix>.block<b>.proj.weight",
// "<prefix>.fc.weight" and "<prefix>.fc.bias".
Network build_network(const NetworkConfig& config, std::uint64_t init_seed,
                      std::string_view prefix = "net", bool zero_classifier = false);

class Network {
 public:
  Network() = default;

  const NetworkConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t block_count() const { return blocks_.size(); }
  const BlockGeometry& block_geometry(std::size_t b) const { return blocks_.at(b).geometry; }

  // Conv parameters of block b, then its projection when present.
  std::span<const Parameter> block_convs(std::size_t b) const;
  const Parameter* block_projection(std::size_t b) const;
  // Every parameter belonging to block b (convs and projection).
  std::vector<const Parameter*> block_parameters(std::size_t b) const;
  // Conv weight tensors in depth order (projections and classifier excluded).
  std::vector<const Parameter*> conv_parameters() const;

  Shape tap_shape(std::size_t b, std::size_t batch) const;
  std::vector<std::string> tap_names() const;

  ForwardResult forward_with_taps(const Tensor& x) const;
  Tensor forward(const Tensor& x) const { return forward_with_taps(x).logits; }

  const Parameter& find(std::string_view name) const;
  Parameter& find(std::string_view name);

  std::size_t scalar_count() const;

  // Closed form: per block 9*in*out + (convs-1)*9*out*out (+ in*out for a
  // projection), plus classifier weight and bias.
  static std::size_t expected_parameter_count(const NetworkConfig& config);

 private:
  friend Network build_network(const NetworkConfig&, std::uint64_t, std::string_view, bool);

  struct BlockLayout {
    BlockGeometry geometry;
    std::size_t first_conv = 0;
    std::optional<std::size_t> projection;
  };

  NetworkConfig config_;
  std::vector<Parameter> params_;
  std::vector<BlockLayout> blocks_;
  std::size_t fc_weight_ = 0;
  std::size_t fc_bias_ = 0;
};

// Block geometries implied by a config, in order.
std::vector<BlockGeometry> block_geometries(const NetworkConfig& config);

struct ParamStats {
  double mean = 0.0;
  double std = 0.0;
};

// Mean and population standard deviation over every scalar entry.
ParamStats param_stats(std::span<const Parameter> params);
ParamStats param_stats(std::span<const Parameter* const> params);

// Copies parameter values from `src` into `dst`; names may differ but shapes
// must agree pairwise.
void copy_parameter_values(std::span<const Parameter> src, std::span<Parameter> dst);

}  // namespace kr
