#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "uql/rng.hpp"
#include "uql/tensor.hpp"

// Differentiable operations. Shape errors throw std::invalid_argument with
// the op name and the offending shapes.
namespace uql::ops {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: [N,Cin,H,W], weight: [Cout,Cin,kh,kw], bias: [Cout] or empty.
Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
              Conv2dParams params = {});

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
// Natural log. Inputs must be strictly positive.
Tensor log(const Tensor& x);
// ln(1 + e^x), computed without overflow.
Tensor softplus(const Tensor& x);

// x: [N,C,H,W]. Windows that extend past the border are not allowed.
Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor mean_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

// Row-wise softmax over the last axis of a rank-2 tensor.
Tensor softmax(const Tensor& logits);
// Mean over rows of -log softmax(logits)[row, label]. Returns a scalar.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Row-wise Shannon entropy (nats) of a rank-2 probability tensor, 0 ln 0 = 0.
// Returns shape [rows].
Tensor entropy(const Tensor& probs);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
Tensor sum_axis(const Tensor& x, std::size_t axis);  // removes axis

Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor reshape(const Tensor& x, const Shape& shape);
// Half-open range [begin, end) along axis.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

Shape broadcast_shape(const Shape& a, const Shape& b);

// Standard normal draws as a fresh leaf. Shape [0] gives an empty tensor.
Tensor sample_gaussian(Rng& rng, const Shape& shape);

}  // namespace uql::ops
