#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "kr/data.hpp"
#include "kr/errors.hpp"

using namespace kr;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / ("kr_test_data_" + std::string(name));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Dataset small_set() {
  return make_synthetic(12, 4, 3, {1, 5, 4}, 3).train;
}

}  // namespace

TEST_CASE("IDX round trip") {
  const auto dir = scratch_dir("idx");
  const Dataset d = small_set();
  write_mnist(d, dir / "img", dir / "lbl");
  const Dataset back = load_mnist(dir / "img", dir / "lbl");
  CHECK(back.image_shape == d.image_shape);
  CHECK(back.labels == d.labels);
  for (std::size_t i = 0; i < d.images.size(); ++i) CHECK(std::abs(back.images[i] - d.images[i]) <= 0.5 / 255 + 1e-12);
}

TEST_CASE("IDX rejects bad magic and truncation") {
  const auto dir = scratch_dir("idx_bad");
  write_mnist(small_set(), dir / "img", dir / "lbl");
  CHECK_THROWS_AS(load_mnist(dir / "lbl", dir / "lbl"), FormatError);
  CHECK_THROWS_AS(load_mnist(dir / "img", dir / "img"), FormatError);
  fs::resize_file(dir / "img", fs::file_size(dir / "img") - 7);
  CHECK_THROWS_AS(load_mnist(dir / "img", dir / "lbl"), FormatError);
  std::ofstream(dir / "tiny", std::ios::binary) << "ab";
  CHECK_THROWS_AS(load_mnist(dir / "tiny", dir / "lbl"), FormatError);
  CHECK_THROWS_AS(load_mnist(dir / "missing", dir / "lbl"), FormatError);
}

TEST_CASE("CIFAR binary round trip and record-size check") {
  const auto dir = scratch_dir("cifar");
  const Dataset d = make_synthetic(5, 1, 10, {3, 32, 32}, 4).train;
  write_cifar10(d, dir / "b.bin");
  const std::array<fs::path, 1> files{dir / "b.bin"};
  const Dataset back = load_cifar10(files);
  CHECK(back.size() == 5);
  CHECK(back.labels == d.labels);
  fs::resize_file(dir / "b.bin", 3073 * 2 + 5);
  CHECK_THROWS_AS(load_cifar10(files), FormatError);
}

TEST_CASE("synthetic data is seeded and covers every class") {
  const auto a = make_synthetic(100, 40, 7, {1, 6, 6}, 9);
  const auto b = make_synthetic(100, 40, 7, {1, 6, 6}, 9);
  CHECK(a.train.images == b.train.images);
  CHECK(std::set<int>(a.train.labels.begin(), a.train.labels.end()).size() == 7);
  CHECK(a.train.class_count == 7);
  CHECK(a.test.size() == 40);
  CHECK(make_synthetic(100, 40, 7, {1, 6, 6}, 10).train.images != a.train.images);
  CHECK_THROWS_AS(make_synthetic(10, 10, 1, {1, 6, 6}, 9), ConfigError);
}

TEST_CASE("subset is deterministic and keeps all when n is zero") {
  const Dataset d = make_synthetic(50, 1, 5, {1, 3, 3}, 2).train;
  const Dataset a = subset(d, 20, 5), b = subset(d, 20, 5);
  CHECK(a.size() == 20);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(subset(d, 0, 5).size() == 50);
  CHECK(subset(d, 20, 6).labels != a.labels);
}

TEST_CASE("distortion") {
  const Dataset d = make_synthetic(4, 1, 2, {3, 32, 32}, 1).train;
  SUBCASE("sigma zero is the identity") {
    const Dataset out = distort_dataset(d, {0.0, 3});
    CHECK(std::memcmp(out.images.data(), d.images.data(), d.images.size() * sizeof(double)) == 0);
  }
  SUBCASE("fixed seed is bitwise reproducible and stays in range") {
    const Dataset a = distort_dataset(d, {1.0, 8}), b = distort_dataset(d, {1.0, 8});
    CHECK(std::memcmp(a.images.data(), b.images.data(), a.images.size() * sizeof(double)) == 0);
    for (double v : a.images) CHECK((v >= 0.0 && v <= 1.0));
    CHECK(distort_dataset(d, {1.0, 9}).images != a.images);
  }
  SUBCASE("unit sigma noise has unit per-image std before clipping") {
    DistortionSpec spec{1.0, 21, -1e9, 1e9};
    const Dataset out = distort_dataset(d, spec);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto x = d.image(i), y = out.image(i);
      double s = 0, s2 = 0;
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double e = y[k] - x[k];
        s += e;
        s2 += e * e;
      }
      const double n = static_cast<double>(x.size());
      const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
      CHECK(std::abs(sd - 1.0) < 0.1);
    }
  }
  CHECK_THROWS_AS(distort_dataset(d, {-1.0, 1}), ConfigError);
}

TEST_CASE("batch sampler is a pure function of its coordinates") {
  BatchSampler a(10, 4, 3, 1), b(10, 4, 3, 1), other(10, 4, 3, 2);
  // Out-of-order queries agree with in-order ones.
  const auto late = b.indices(7);
  std::vector<std::vector<std::size_t>> seq;
  for (std::size_t i = 0; i < 8; ++i) seq.push_back(a.indices(i));
  CHECK(seq[7] == late);
  CHECK(b.indices(0) == seq[0]);
  // Every epoch of 10 positions is a permutation.
  std::vector<std::size_t> first_epoch;
  for (std::size_t i = 0; i < 3; ++i) first_epoch.insert(first_epoch.end(), seq[i].begin(), seq[i].end());
  first_epoch.resize(10);
  CHECK(std::set<std::size_t>(first_epoch.begin(), first_epoch.end()).size() == 10);
  CHECK(other.indices(0) != seq[0]);
  CHECK_THROWS_AS(BatchSampler(0, 4, 1, 1), UsageError);
}

TEST_CASE("make_batch gathers images and labels") {
  const Dataset d = small_set();
  const std::vector<std::size_t> idx{3, 0};
  const Batch b = make_batch(d, idx);
  CHECK(b.images.shape() == Shape{2, 1, 5, 4});
  CHECK(b.labels == std::vector<int>{d.labels[3], d.labels[0]});
  CHECK(std::memcmp(b.images.data().data(), d.image(3).data(), 20 * sizeof(double)) == 0);
}
