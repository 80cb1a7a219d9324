#include "kr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kr/errors.hpp"

namespace kr {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("access to undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  shape();
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

std::span<const double> Tensor::grad() const {
  shape();
  return impl_->grad_buffer();
}

std::span<double> Tensor::mutable_grad() {
  shape();
  return impl_->grad_buffer();
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(make_impl(shape(), impl_->data, false)); }

Tensor Tensor::clone() const { return Tensor(make_impl(shape(), impl_->data, impl_->requires_grad)); }

Tape& active_tape() { return g_tape; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  TensorImpl* root = loss.impl();
  if (!root->requires_grad) throw UsageError("loss does not depend on any tensor requiring grad");

  for (auto& rec : records_) {
    rec.output->reached = false;
    std::fill(rec.output->grad.begin(), rec.output->grad.end(), 0.0);
    for (auto& in : rec.inputs) in->reached = false;
  }

  root->grad_buffer()[0] += 1.0;
  root->reached = true;

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output->reached) continue;
    it->backward();
    for (auto& in : it->inputs) {
      if (in->requires_grad) in->reached = true;
    }
  }
}

void backward(const Tensor& loss) { active_tape().backward(loss); }

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite value in ") + what);
  }
  if (t.has_grad()) {
    for (double v : t.impl()->grad) {
      if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite gradient in ") + what);
    }
  }
}

}  // namespace kr
