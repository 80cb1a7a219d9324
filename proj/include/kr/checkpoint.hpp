#pragma once

// Binary checkpoint, little-endian throughout:
//   "KRCKPT01" | u32 version | u64 seed | u64 iteration
//   | u64 len + config snapshot bytes
//   | u64 tensor count, then per tensor:
//       u64 len + name | u32 rank | u64 dims[rank] | f64 values[numel]
//   | u64 FNV-1a hash of every preceding byte

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kr/distill.hpp"
#include "kr/tensor.hpp"

namespace kr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
  std::string config;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
  void add(std::string name, const Shape& shape, std::span<const double> values);
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void add_parameters(Checkpoint& ckpt, std::span<const Parameter> params);
// Every parameter must be present with a matching shape.
void restore_parameters(const Checkpoint& ckpt, std::span<Parameter> params);

// Student, aggregated blocks, both optimizers and the thresholds: everything
// needed to resume a distillation run at its iteration.
Checkpoint capture_distiller(Distiller& distiller, const Network& student, const std::string& config_snapshot);
void restore_distiller(const Checkpoint& ckpt, Distiller& distiller, Network& student);

}  // namespace kr
