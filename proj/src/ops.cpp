#include "kr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kr/errors.hpp"

namespace kr {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_output(Shape shape, std::vector<double> values, bool tracked) {
  Tensor out = Tensor::from(std::move(shape), std::move(values), tracked);
  if (tracked) out.impl()->is_leaf = false;
  return out;
}

void record(const char* op, std::vector<ImplPtr> inputs, const Tensor& out, std::function<void()> fn) {
  active_tape().record(TapeRecord{op, std::move(inputs), out.impl_ptr(), std::move(fn)});
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined input");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// C[MxN] += A[MxK] * B[KxN]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[MxN] += A^T * B with A stored [KxM], B [KxN]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[p * m + i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[MxN] += A * B^T with A [MxK], B stored [NxK]. B is transposed into a
// scratch buffer so the inner loop runs over contiguous output columns.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(m, n, k, a, bt.data(), c);
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, k, stride, pad, oh, ow;
  std::size_t patch() const { return c * k * k; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t pad) {
  require_defined(input, "conv2d");
  require_defined(weight, "conv2d");
  if (input.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected 4-d input and weight, got " + shape_str(input.shape()) +
                         " and " + shape_str(weight.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (weight.dim(1) != g.c || weight.dim(3) != g.k) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
  }
  const std::size_t ph = g.h + 2 * pad, pw = g.w + 2 * pad;
  if (g.k > ph || g.k > pw) throw DimensionError("conv2d: kernel larger than padded input");
  if ((ph - g.k) % stride != 0 || (pw - g.k) % stride != 0) {
    throw DimensionError("conv2d: non-integral output extent for input " + shape_str(input.shape()) +
                         ", kernel " + std::to_string(g.k) + ", stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
  }
  g.oh = (ph - g.k) / stride + 1;
  g.ow = (pw - g.k) / stride + 1;
  return g;
}

// col[(c*k+ki)*k+kj][oh*ow]
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* xc = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = col + ((c * g.k + ki) * g.k + kj) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    double* dxc = dx + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = col + ((c * g.k + ki) * g.k + kj) * positions;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = dxc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  const bool tracked = needs_grad({&a, &b});
  Tensor result = make_output({m, n}, std::move(out), tracked);
  if (tracked) {
    ImplPtr A = a.impl_ptr(), B = b.impl_ptr(), O = result.impl_ptr();
    record("matmul", {A, B}, result, [A, B, O, m, n, k] {
      const double* g = O->grad.data();
      if (A->requires_grad) gemm_nt(m, k, n, g, B->data.data(), A->grad_buffer().data());
      if (B->requires_grad) gemm_tn(k, n, m, A->data.data(), g, B->grad_buffer().data());
    });
  }
  return result;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input, weight, stride, pad);
  const std::size_t positions = g.positions(), patch = g.patch();
  const std::size_t in_plane = g.c * g.h * g.w, out_plane = g.f * positions;
  std::vector<double> out(g.n * out_plane, 0.0);
  const bool pointwise = is_pointwise(g);
  std::vector<double> col(pointwise ? 0 : patch * positions);
  const double* x = input.data().data();
  const double* w = weight.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* cols = x + n * in_plane;
    if (!pointwise) {
      im2col(g, cols, col.data());
      cols = col.data();
    }
    gemm_nn(g.f, positions, patch, w, cols, out.data() + n * out_plane);
  }
  const bool tracked = needs_grad({&input, &weight});
  Tensor result = make_output({g.n, g.f, g.oh, g.ow}, std::move(out), tracked);
  if (tracked) {
    ImplPtr X = input.impl_ptr(), W = weight.impl_ptr(), O = result.impl_ptr();
    record("conv2d", {X, W}, result, [X, W, O, g, pointwise] {
      const std::size_t positions = g.positions(), patch = g.patch();
      const std::size_t in_plane = g.c * g.h * g.w, out_plane = g.f * positions;
      std::vector<double> col(pointwise ? 0 : patch * positions);
      std::vector<double> dcol(pointwise ? 0 : patch * positions);
      double* dw = W->requires_grad ? W->grad_buffer().data() : nullptr;
      double* dx = X->requires_grad ? X->grad_buffer().data() : nullptr;
      for (std::size_t n = 0; n < g.n; ++n) {
        const double* gout = O->grad.data() + n * out_plane;
        if (dw) {
          const double* cols = X->data.data() + n * in_plane;
          if (!pointwise) {
            im2col(g, cols, col.data());
            cols = col.data();
          }
          gemm_nt(g.f, patch, positions, gout, cols, dw);
        }
        if (dx) {
          if (pointwise) {
            gemm_tn(patch, positions, g.f, W->data.data(), gout, dx + n * in_plane);
          } else {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            gemm_tn(patch, positions, g.f, W->data.data(), gout, dcol.data());
            col2im_add(g, dcol.data(), dx + n * in_plane);
          }
        }
      }
    });
  }
  return result;
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  const bool tracked = needs_grad({&x});
  Tensor result = make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    ImplPtr X = x.impl_ptr(), O = result.impl_ptr();
    record("relu", {X}, result, [X, O] {
      auto& gx = X->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (X->data[i] > 0.0) gx[i] += O->grad[i];
      }
    });
  }
  return result;
}

namespace {

Tensor linear_combine(const Tensor& a, const Tensor& b, double sb, const char* op) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + sb * bd[i];
  const bool tracked = needs_grad({&a, &b});
  Tensor result = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    ImplPtr A = a.impl_ptr(), B = b.impl_ptr(), O = result.impl_ptr();
    record(op, {A, B}, result, [A, B, O, sb] {
      if (A->requires_grad) {
        auto& ga = A->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += O->grad[i];
      }
      if (B->requires_grad) {
        auto& gb = B->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += sb * O->grad[i];
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return linear_combine(a, b, 1.0, "add"); }

Tensor sub(const Tensor& a, const Tensor& b) { return linear_combine(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  const bool tracked = needs_grad({&a, &b});
  Tensor result = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    ImplPtr A = a.impl_ptr(), B = b.impl_ptr(), O = result.impl_ptr();
    record("mul", {A, B}, result, [A, B, O] {
      if (A->requires_grad) {
        auto& ga = A->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += O->grad[i] * B->data[i];
      }
      if (B->requires_grad) {
        auto& gb = B->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += O->grad[i] * A->data[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  const bool tracked = needs_grad({&x});
  Tensor result = make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    ImplPtr X = x.impl_ptr(), O = result.impl_ptr();
    record("scale", {X}, result, [X, O, factor] {
      auto& gx = X->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * O->grad[i];
    });
  }
  return result;
}

Tensor avgpool2d(const Tensor& x, std::size_t kernel) {
  require_defined(x, "avgpool2d");
  if (x.rank() != 4) throw DimensionError("avgpool2d: expected 4-d input, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel == 0 || h % kernel != 0 || w % kernel != 0) {
    throw DimensionError("avgpool2d: kernel " + std::to_string(kernel) + " does not tile " +
                         shape_str(x.shape()));
  }
  const std::size_t oh = h / kernel, ow = w / kernel;
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  std::vector<double> out(n * c * oh * ow, 0.0);
  auto xd = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xd.data() + plane * h * w;
    double* dst = out.data() + plane * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) acc += src[(oy * kernel + ky) * w + ox * kernel + kx];
        }
        dst[oy * ow + ox] = acc * inv;
      }
    }
  }
  const bool tracked = needs_grad({&x});
  Tensor result = make_output({n, c, oh, ow}, std::move(out), tracked);
  if (tracked) {
    ImplPtr X = x.impl_ptr(), O = result.impl_ptr();
    record("avgpool2d", {X}, result, [X, O, n, c, h, w, kernel, oh, ow, inv] {
      auto& gx = X->grad_buffer();
      for (std::size_t plane = 0; plane < n * c; ++plane) {
        double* dst = gx.data() + plane * h * w;
        const double* src = O->grad.data() + plane * oh * ow;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) dst[y * w + x] += src[(y / kernel) * ow + x / kernel] * inv;
        }
      }
    });
  }
  return result;
}

Tensor flatten(const Tensor& x) {
  require_defined(x, "flatten");
  if (x.rank() < 2) throw DimensionError("flatten: expected at least 2-d input");
  const std::size_t n = x.dim(0), rest = x.numel() / n;
  const bool tracked = needs_grad({&x});
  Tensor result = make_output({n, rest}, std::vector<double>(x.data().begin(), x.data().end()), tracked);
  if (tracked) {
    ImplPtr X = x.impl_ptr(), O = result.impl_ptr();
    record("flatten", {X}, result, [X, O] {
      auto& gx = X->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += O->grad[i];
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_bias: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] += bd[j];
  }
  const bool tracked = needs_grad({&x, &bias});
  Tensor result = make_output({n, k}, std::move(out), tracked);
  if (tracked) {
    ImplPtr X = x.impl_ptr(), B = bias.impl_ptr(), O = result.impl_ptr();
    record("add_bias", {X, B}, result, [X, B, O, n, k] {
      if (X->requires_grad) {
        auto& gx = X->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += O->grad[i];
      }
      if (B->requires_grad) {
        auto& gb = B->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) gb[j] += O->grad[i * k + j];
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool tracked = needs_grad({&x});
  Tensor result = make_output({1}, {acc}, tracked);
  if (tracked) {
    ImplPtr X = x.impl_ptr(), O = result.impl_ptr();
    record("sum", {X}, result, [X, O] {
      auto& gx = X->grad_buffer();
      const double g = O->grad[0];
      for (double& v : gx) v += g;
    });
  }
  return result;
}

Tensor softmax_cross_entropy(const Tensor& student_logits, const Tensor& teacher_probs, double temperature) {
  require_same_shape(student_logits, teacher_probs, "softmax_cross_entropy");
  if (student_logits.rank() != 2) {
    throw DimensionError("softmax_cross_entropy: expected [N x K] logits, got " +
                         shape_str(student_logits.shape()));
  }
  if (!(temperature > 0.0)) throw UsageError("softmax_cross_entropy: temperature must be positive");
  const std::size_t n = student_logits.dim(0), k = student_logits.dim(1);
  if (k < 2) throw DimensionError("softmax_cross_entropy: need at least 2 classes");
  auto p = teacher_probs.data();
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = p[i * k + j];
      if (!(v >= 0.0)) throw ValidationError("softmax_cross_entropy: negative or NaN teacher probability");
      row += v;
    }
    if (std::abs(row - 1.0) > 1e-9) {
      throw ValidationError("softmax_cross_entropy: teacher row " + std::to_string(i) + " sums to " +
                            std::to_string(row));
    }
  }
  Tensor probs = softmax(student_logits, temperature);
  auto z = student_logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = z.data() + i * k;
    double mx = zi[0] / temperature;
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, zi[j] / temperature);
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(zi[j] / temperature - mx);
    const double lse = mx + std::log(se);
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = p[i * k + j];
      if (pj != 0.0) row -= pj * (zi[j] / temperature - lse);
    }
    total += row;
  }
  const double loss = total / static_cast<double>(n);
  const bool tracked = needs_grad({&student_logits});
  Tensor result = make_output({1}, {loss}, tracked);
  if (tracked) {
    ImplPtr Z = student_logits.impl_ptr(), P = teacher_probs.impl_ptr(), O = result.impl_ptr();
    ImplPtr Q = probs.impl_ptr();
    record("softmax_cross_entropy", {Z}, result, [Z, P, Q, O, n, temperature] {
      auto& gz = Z->grad_buffer();
      const double g = O->grad[0] / (temperature * static_cast<double>(n));
      for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += g * (Q->data[i] - P->data[i]);
    });
  }
  return result;
}

Tensor l2_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "l2_distance");
  auto ad = a.data(), bd = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = ad[i] - bd[i];
    acc += d * d;
  }
  const double dist = std::sqrt(acc);
  const bool tracked = needs_grad({&a, &b});
  Tensor result = make_output({1}, {dist}, tracked);
  if (tracked) {
    ImplPtr A = a.impl_ptr(), B = b.impl_ptr(), O = result.impl_ptr();
    record("l2_distance", {A, B}, result, [A, B, O, dist] {
      if (dist == 0.0) return;
      const double g = O->grad[0] / dist;
      if (A->requires_grad) {
        auto& ga = A->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (A->data[i] - B->data[i]);
      }
      if (B->requires_grad) {
        auto& gb = B->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (A->data[i] - B->data[i]);
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& logits, double temperature) {
  require_defined(logits, "softmax");
  if (logits.rank() != 2) throw DimensionError("softmax: expected [N x K], got " + shape_str(logits.shape()));
  if (!(temperature > 0.0)) throw UsageError("softmax: temperature must be positive");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  auto z = logits.data();
  std::vector<double> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const double* zi = z.data() + i * k;
    double mx = zi[0] / temperature;
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, zi[j] / temperature);
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = std::exp(zi[j] / temperature - mx);
      se += out[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= se;
  }
  return Tensor::from({n, k}, std::move(out));
}

Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  if (labels.empty()) throw UsageError("one_hot: empty label list");
  std::vector<double> out(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ValidationError("one_hot: label " + std::to_string(labels[i]) + " out of range");
    }
    out[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::from({labels.size(), classes}, std::move(out));
}

}  // namespace kr
