#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fadelab/tensor.hpp"

// Differentiable dense kernels. Every op validates shapes and finiteness of
// its inputs and records itself for backward() when any input requires grad.
namespace fadelab::ops {

// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);

// Candidate-stacked dense layer. w is [G,in,out]; x is either [B,in] (one
// input shared by every group) or [B,G*in]. Output is [B,G*out], group-major
// within each row.
Tensor grouped_matmul(const Tensor& x, const Tensor& w);

// x [B,G*Ci,H,W], w [G*Co,Ci,k,k], bias [G*Co] or undefined.
Tensor grouped_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                      std::size_t stride, std::size_t pad, std::size_t groups);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t pad);

// Elementwise with trailing broadcast: b.shape() must equal a.shape(), a
// suffix of it, or hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);

Tensor relu(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& shape);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor max(const Tensor& x, std::size_t axis);
Tensor min(const Tensor& x, std::size_t axis);

// Over the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor logsumexp(const Tensor& x);

// Mean negative log-likelihood of integer labels under logits [B,K].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);
// Sum of squares, as a scalar.
Tensor l2_norm_sq(const Tensor& x);
Tensor clip(const Tensor& x, float lo, float hi);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t end);
// Rows of x along axis 0, repeats allowed.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// x [B,...,K] -> [B,...]: picks entry labels[b] of the last axis.
Tensor select_class(const Tensor& x, std::span<const std::int32_t> labels);
// [...,M,N] -> [...,N,M]
Tensor swap_last_axes(const Tensor& x);
// Nearest-neighbour resize of [B,C,H,W] to (out_h,out_w), then zero-pad back
// to HxW with the resized image placed at (top,left).
Tensor resize_pad(const Tensor& x, std::size_t out_h, std::size_t out_w,
                  std::size_t top, std::size_t left);

// Attribute bag for the name-dispatched entry point.
struct OpAttrs {
  std::optional<std::size_t> axis;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
  float lo = 0.0f;
  float hi = 0.0f;
  std::size_t start = 0;
  std::size_t end = 0;
  Shape shape;
  std::vector<std::int32_t> labels;
};

Tensor forward_op(std::string_view op_name, std::span<const Tensor> inputs,
                  const OpAttrs& attrs = {});

}  // namespace fadelab::ops
