#pragma once

#include <cstddef>
#include <optional>

#include "viewdelta/tensor.hpp"

namespace viewdelta::ops {

template <typename Real>
using T = Tensor<Real>;

// --- linear algebra -------------------------------------------------------

/// [m,k] x [k,n] -> [m,n].
template <typename Real> T<Real> matmul(const T<Real>& a, const T<Real>& b);
/// x[n,in] * w[in,out] + bias[out].
template <typename Real> T<Real> linear(const T<Real>& x, const T<Real>& w, const T<Real>& bias);
/// 2-D transpose.
template <typename Real> T<Real> transpose(const T<Real>& x);

// --- elementwise ----------------------------------------------------------

template <typename Real> T<Real> add(const T<Real>& a, const T<Real>& b);
template <typename Real> T<Real> sub(const T<Real>& a, const T<Real>& b);
template <typename Real> T<Real> mul(const T<Real>& a, const T<Real>& b);
template <typename Real> T<Real> scale(const T<Real>& a, Real s);
/// x[n,d] + bias[d], bias broadcast over rows.
template <typename Real> T<Real> add_row_bias(const T<Real>& x, const T<Real>& bias);
template <typename Real> T<Real> relu(const T<Real>& x);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename Real> T<Real> gelu(const T<Real>& x);
template <typename Real> T<Real> sigmoid(const T<Real>& x);

// --- reductions -----------------------------------------------------------

template <typename Real> T<Real> sum(const T<Real>& x);
template <typename Real> T<Real> mean(const T<Real>& x);

// --- normalisation and attention -----------------------------------------

/// Numerically stable softmax along `axis`.
template <typename Real> T<Real> softmax(const T<Real>& x, std::size_t axis);
/// Normalises each vector along the last axis, then gain * x + bias.
template <typename Real>
T<Real> layer_norm(const T<Real>& x, const T<Real>& gain, const T<Real>& bias, Real eps);
/// Multi-head scaled dot-product attention over full (unmasked) sequences.
/// q, k, v are [n, d]; head h uses columns [h*d/heads, (h+1)*d/heads).
template <typename Real>
T<Real> attention(const T<Real>& q, const T<Real>& k, const T<Real>& v, std::size_t heads);

// --- spatial ---------------------------------------------------------------

/// x[c_in,h,w], kernel[c_out,c_in,kh,kw], bias[c_out] (optional).
/// Cross-correlation; out extent (h + 2p - kh) / s + 1 must be integral.
template <typename Real>
T<Real> conv2d(const T<Real>& x, const T<Real>& kernel, const std::optional<T<Real>>& bias,
               std::size_t stride, std::size_t padding);
/// Adjoint of conv2d with the same kernel layout: x[c_out,h,w] -> [c_in, h', w']
/// with h' = (h - 1) s - 2p + kh. bias is [c_in].
template <typename Real>
T<Real> conv_transpose2d(const T<Real>& x, const T<Real>& kernel,
                         const std::optional<T<Real>>& bias, std::size_t stride,
                         std::size_t padding);
/// Bilinear resize of x[c,h,w] by an integer factor, align_corners = false.
template <typename Real> T<Real> bilinear_upsample(const T<Real>& x, std::size_t factor);

// --- shape plumbing ---------------------------------------------------------

template <typename Real> T<Real> reshape(const T<Real>& x, Shape shape);
/// Concatenation along axis 0; trailing extents must agree.
template <typename Real> T<Real> concat(const std::vector<T<Real>>& parts);
/// Rows [begin, end) along axis 0.
template <typename Real> T<Real> slice(const T<Real>& x, std::size_t begin, std::size_t end);

}  // namespace viewdelta::ops
