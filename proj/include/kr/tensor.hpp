#pragma once

// Dense float64 tensors with a tape-based reverse-mode autodiff.
//
// Operations executed while grad mode is on, with at least one input that
// requires a gradient, append a record to the thread's active Tape. backward()
// walks the records in reverse execution order. Leaf gradients accumulate
// across backward calls until zero_grad(); intermediate gradients are reset at
// the start of every backward pass.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  bool is_leaf = true;
  bool reached = false;  // scratch flag for backward

  // Allocates the gradient buffer on demand.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Gradient view; an all-zero buffer is allocated if none exists yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // New leaf sharing nothing with this tensor and carrying no gradient.
  Tensor detach() const;
  // Deep copy keeping requires_grad, without the gradient.
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TapeRecord {
  const char* op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  std::function<void()> backward;
};

class Tape {
 public:
  void record(TapeRecord rec) { records_.push_back(std::move(rec)); }
  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }
  const std::vector<TapeRecord>& records() const { return records_; }

  void backward(const Tensor& loss);

 private:
  std::vector<TapeRecord> records_;
};

// Active tape of the calling thread.
Tape& active_tape();

bool grad_enabled();

// Disables recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Backpropagates from a scalar loss recorded on the active tape.
void backward(const Tensor& loss);

struct Parameter {
  Tensor tensor;
  std::string name;
  int layer_index = -1;
};

// Throws if any data (and gradient, when present) entry is NaN or infinite.
void check_finite(const Tensor& t, const char* what);

}  // namespace kr
