#pragma once

// Differentiable tensor ops. Every op records its backward rule on the active
// tape when any input requires gradients.
//
// Broadcasting is limited to the leading axes: for binary elementwise ops the
// second operand's shape must equal a suffix of the first operand's shape.

#include <span>
#include <vector>

#include "volagg/tensor.hpp"

namespace volagg::ad {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x: [in] or [n,in]; weight: [out,in]; bias: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten(const Tensor& a);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor softmax(const Tensor& a, std::size_t axis);

// x: [C,H,W]; weight: [O,C,k,k] with odd k; zero "same" padding of k/2.
// Output spatial size is ceil(H/stride) x ceil(W/stride).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}, std::size_t stride = 1);
// x: [C,D,H,W]; weight: [O,C,k,k,k] with odd k; stride 1, "same" padding.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias = {});
// x: [C,D,H,W] with even spatial dims; non-overlapping 2x2x2 mean.
Tensor avg_pool3d(const Tensor& x, std::size_t window = 2);
// x: [C, ...]; C divisible by groups. Normalizes each group to zero mean and
// unit variance (biased estimator), no affine transform.
Tensor group_norm(const Tensor& x, std::size_t groups, double eps = 1e-5);

}  // namespace volagg::ad
