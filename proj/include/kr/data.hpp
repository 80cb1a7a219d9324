#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kr/tensor.hpp"

namespace kr {

// Images normalized to [0, 1], stored N x C x H x W row-major.
struct Dataset {
  Shape image_shape;  // C x H x W
  std::size_t class_count = 0;
  std::vector<double> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return shape_numel(image_shape); }
  std::span<const double> image(std::size_t i) const;
  void validate() const;
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

enum class DatasetKind { mnist, cifar10, synthetic };

DatasetKind parse_dataset_kind(std::string_view text);
std::string_view to_string(DatasetKind kind);

struct DatasetSource {
  DatasetKind kind = DatasetKind::synthetic;
  std::filesystem::path root;
  std::size_t subset = 0;       // train examples kept; 0 keeps all
  std::size_t test_subset = 0;  // test examples kept; 0 keeps all
  std::uint64_t seed = 0;
  // Synthetic generator only.
  std::size_t synthetic_train = 1000;
  std::size_t synthetic_test = 500;
  std::size_t synthetic_classes = 10;
  Shape synthetic_shape = {1, 28, 28};
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

DatasetSplit load_dataset(const DatasetSource& source);

// IDX (big-endian): images magic 0x00000803, labels magic 0x00000801.
Dataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_mnist(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes per record.
Dataset load_cifar10(std::span<const std::filesystem::path> files);
void write_cifar10(const Dataset& data, const std::filesystem::path& file);

// Seeded Gaussian blobs around per-class prototype images.
DatasetSplit make_synthetic(std::size_t train_count, std::size_t test_count, std::size_t classes,
                            const Shape& image_shape, std::uint64_t seed);

// Deterministic subsample of n examples (order of the seeded shuffle).
Dataset subset(const Dataset& data, std::size_t n, std::uint64_t seed);

struct DistortionSpec {
  double sigma = 1.0;
  std::uint64_t seed = 0;
  double clip_lo = 0.0;
  double clip_hi = 1.0;
};

// Additive per-pixel Gaussian noise, clipped to [clip_lo, clip_hi].
Dataset distort_dataset(const Dataset& data, const DistortionSpec& spec);

// Pure function of (seed, stream, batch index): batch b covers positions
// [b*B, (b+1)*B) of an endless sequence of per-epoch seeded permutations.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed, std::uint64_t stream);

  std::vector<std::size_t> indices(std::size_t batch_index);
  std::size_t batch_size() const { return batch_size_; }

 private:
  const std::vector<std::size_t>& epoch_permutation(std::size_t epoch);

  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm_;
};

// splitmix64 finalizer, used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace kr
