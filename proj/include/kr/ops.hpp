#pragma once

#include <cstddef>

#include "kr/tensor.hpp"

namespace kr {

// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation. input [N x C x H x W], weight [F x C x k x k].
Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t pad);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// Non-overlapping average pooling, kernel == stride. H and W must be multiples.
Tensor avgpool2d(const Tensor& x, std::size_t kernel);

// [N x ...] -> [N x rest]
Tensor flatten(const Tensor& x);

// x [N x K] plus bias [K] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);

// Mean over rows of -sum_k p_k log softmax(logits / T)_k. Differentiable in
// the logits only.
Tensor softmax_cross_entropy(const Tensor& student_logits, const Tensor& teacher_probs,
                             double temperature);

// Euclidean norm of a - b over all elements. Gradient at a == b is zero.
Tensor l2_distance(const Tensor& a, const Tensor& b);

// Row-wise softmax(logits / T); not recorded.
Tensor softmax(const Tensor& logits, double temperature);

// One-hot rows from integer labels.
Tensor one_hot(std::span<const int> labels, std::size_t classes);

}  // namespace kr
