#include "kr/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "kr/errors.hpp"

namespace kr {

namespace fs = std::filesystem;

std::span<const double> Dataset::image(std::size_t i) const {
  const std::size_t n = image_size();
  return std::span<const double>(images).subspan(i * n, n);
}

void Dataset::validate() const {
  if (image_shape.size() != 3) throw ValidationError("dataset image shape must be C x H x W");
  if (images.size() != labels.size() * image_size()) throw ValidationError("dataset image buffer size mismatch");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= class_count) {
      throw ValidationError("dataset label " + std::to_string(l) + " outside [0, " +
                            std::to_string(class_count) + ")");
    }
  }
  for (double v : images) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("dataset pixel outside [0, 1]");
  }
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw UsageError("make_batch: empty index list");
  const std::size_t n = data.image_size();
  std::vector<double> values(indices.size() * n);
  Batch batch;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= data.size()) throw UsageError("make_batch: index out of range");
    auto img = data.image(indices[i]);
    std::copy(img.begin(), img.end(), values.begin() + static_cast<std::ptrdiff_t>(i * n));
    batch.labels.push_back(data.labels[indices[i]]);
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), data.image_shape.begin(), data.image_shape.end());
  batch.images = Tensor::from(std::move(shape), std::move(values));
  batch.indices.assign(indices.begin(), indices.end());
  return batch;
}

DatasetKind parse_dataset_kind(std::string_view text) {
  if (text == "mnist") return DatasetKind::mnist;
  if (text == "cifar10") return DatasetKind::cifar10;
  if (text == "synthetic") return DatasetKind::synthetic;
  throw ConfigError("unknown dataset kind '" + std::string(text) + "' (expected mnist, cifar10 or synthetic)");
}

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "synthetic";
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const fs::path& path) {
  if (offset + 4 > buf.size()) throw FormatError(path.string() + ": truncated header");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> bytes{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                                  static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes.data(), 4);
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Dataset load_mnist(const fs::path& images, const fs::path& labels) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  if (read_be32(ib, 0, images) != 0x00000803) throw FormatError(images.string() + ": bad IDX image magic");
  if (read_be32(lb, 0, labels) != 0x00000801) throw FormatError(labels.string() + ": bad IDX label magic");
  const std::size_t count = read_be32(ib, 4, images);
  const std::size_t rows = read_be32(ib, 8, images), cols = read_be32(ib, 12, images);
  const std::size_t label_count = read_be32(lb, 4, labels);
  if (count != label_count) {
    throw FormatError("image count " + std::to_string(count) + " != label count " + std::to_string(label_count));
  }
  if (rows == 0 || cols == 0) throw FormatError(images.string() + ": zero image extent");
  const std::size_t pixels = rows * cols;
  if (ib.size() < 16 + count * pixels) throw FormatError(images.string() + ": truncated pixel data");
  if (lb.size() < 8 + count) throw FormatError(labels.string() + ": truncated label data");
  Dataset d;
  d.image_shape = {1, rows, cols};
  d.class_count = 10;
  d.images.resize(count * pixels);
  for (std::size_t i = 0; i < count * pixels; ++i) d.images[i] = ib[16 + i] / 255.0;
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (lb[8 + i] > 9) throw FormatError(labels.string() + ": label out of range");
    d.labels[i] = lb[8 + i];
  }
  return d;
}

void write_mnist(const Dataset& data, const fs::path& images, const fs::path& labels) {
  if (data.image_shape.size() != 3 || data.image_shape[0] != 1) {
    throw UsageError("write_mnist: single-channel images required");
  }
  std::ofstream io(images, std::ios::binary);
  std::ofstream lo(labels, std::ios::binary);
  if (!io || !lo) throw FormatError("cannot write IDX output");
  write_be32(io, 0x00000803);
  write_be32(io, static_cast<std::uint32_t>(data.size()));
  write_be32(io, static_cast<std::uint32_t>(data.image_shape[1]));
  write_be32(io, static_cast<std::uint32_t>(data.image_shape[2]));
  for (double v : data.images) io.put(static_cast<char>(to_byte(v)));
  write_be32(lo, 0x00000801);
  write_be32(lo, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lo.put(static_cast<char>(l));
}

Dataset load_cifar10(std::span<const fs::path> files) {
  constexpr std::size_t kPixels = 3072, kRecord = 1 + kPixels;
  Dataset d;
  d.image_shape = {3, 32, 32};
  d.class_count = 10;
  for (const auto& file : files) {
    const auto buf = read_file(file);
    if (buf.empty() || buf.size() % kRecord != 0) {
      throw FormatError(file.string() + ": size " + std::to_string(buf.size()) +
                        " is not a whole number of 3073-byte records");
    }
    for (std::size_t off = 0; off < buf.size(); off += kRecord) {
      if (buf[off] > 9) throw FormatError(file.string() + ": label byte out of range");
      d.labels.push_back(buf[off]);
      for (std::size_t p = 0; p < kPixels; ++p) d.images.push_back(buf[off + 1 + p] / 255.0);
    }
  }
  return d;
}

void write_cifar10(const Dataset& data, const fs::path& file) {
  if (data.image_shape != Shape{3, 32, 32}) throw UsageError("write_cifar10: 3x32x32 images required");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw FormatError("cannot write " + file.string());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.put(static_cast<char>(data.labels[i]));
    for (double v : data.image(i)) out.put(static_cast<char>(to_byte(v)));
  }
}

DatasetSplit make_synthetic(std::size_t train_count, std::size_t test_count, std::size_t classes,
                            const Shape& image_shape, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (image_shape.size() != 3) throw ConfigError("synthetic image shape must be C x H x W");
  const std::size_t n = shape_numel(image_shape);
  std::mt19937_64 proto_rng(mix_seed(seed, 0));
  std::uniform_real_distribution<double> uni(0.2, 0.8);
  std::vector<std::vector<double>> prototypes(classes, std::vector<double>(n));
  for (auto& p : prototypes) {
    for (double& v : p) v = uni(proto_rng);
  }
  auto sample = [&](std::size_t count, std::uint64_t stream) {
    Dataset d;
    d.image_shape = image_shape;
    d.class_count = classes;
    std::mt19937_64 rng(mix_seed(seed, stream));
    std::normal_distribution<double> noise(0.0, 0.15);
    for (std::size_t i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % classes);
      d.labels.push_back(label);
      for (double v : prototypes[static_cast<std::size_t>(label)]) d.images.push_back(std::clamp(v + noise(rng), 0.0, 1.0));
    }
    return d;
  };
  return {sample(train_count, 1), sample(test_count, 2)};
}

Dataset subset(const Dataset& data, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= data.size()) return data;
  const auto perm = seeded_permutation(data.size(), seed);
  Dataset out;
  out.image_shape = data.image_shape;
  out.class_count = data.class_count;
  const std::size_t sz = data.image_size();
  out.images.reserve(n * sz);
  for (std::size_t i = 0; i < n; ++i) {
    auto img = data.image(perm[i]);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(data.labels[perm[i]]);
  }
  return out;
}

Dataset distort_dataset(const Dataset& data, const DistortionSpec& spec) {
  if (!(spec.sigma >= 0.0)) throw ConfigError("distortion sigma must be non-negative");
  if (!(spec.clip_lo < spec.clip_hi)) throw ConfigError("distortion clip range is empty");
  Dataset out = data;
  if (spec.sigma == 0.0) return out;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.sigma);
  for (double& v : out.images) v = std::clamp(v + noise(rng), spec.clip_lo, spec.clip_hi);
  return out;
}

DatasetSplit load_dataset(const DatasetSource& source) {
  DatasetSplit split;
  switch (source.kind) {
    case DatasetKind::mnist:
      split.train = load_mnist(source.root / "train-images-idx3-ubyte", source.root / "train-labels-idx1-ubyte");
      split.test = load_mnist(source.root / "t10k-images-idx3-ubyte", source.root / "t10k-labels-idx1-ubyte");
      break;
    case DatasetKind::cifar10: {
      std::vector<fs::path> train_files;
      for (int i = 1; i <= 5; ++i) train_files.push_back(source.root / ("data_batch_" + std::to_string(i) + ".bin"));
      const std::array<fs::path, 1> test_files{source.root / "test_batch.bin"};
      split.train = load_cifar10(train_files);
      split.test = load_cifar10(test_files);
      break;
    }
    case DatasetKind::synthetic:
      split = make_synthetic(source.synthetic_train, source.synthetic_test, source.synthetic_classes,
                             source.synthetic_shape, source.seed);
      break;
  }
  split.train = subset(split.train, source.subset, mix_seed(source.seed, 11));
  split.test = subset(split.test, source.test_subset, mix_seed(source.seed, 12));
  return split;
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t stream)
    : n_(dataset_size), batch_size_(batch_size), seed_(seed), stream_(stream) {
  if (n_ == 0 || batch_size_ == 0) throw UsageError("BatchSampler: empty dataset or zero batch size");
}

const std::vector<std::size_t>& BatchSampler::epoch_permutation(std::size_t epoch) {
  if (epoch != cached_epoch_) {
    perm_ = seeded_permutation(n_, mix_seed(mix_seed(seed_, stream_), epoch));
    cached_epoch_ = epoch;
  }
  return perm_;
}

std::vector<std::size_t> BatchSampler::indices(std::size_t batch_index) {
  std::vector<std::size_t> out;
  out.reserve(batch_size_);
  for (std::size_t j = batch_index * batch_size_; j < (batch_index + 1) * batch_size_; ++j) {
    out.push_back(epoch_permutation(j / n_)[j % n_]);
  }
  return out;
}

}  // namespace kr
