#pragma once

#include <cstddef>
#include <vector>

#include "viewdelta/image.hpp"
#include "viewdelta/metrics.hpp"
#include "viewdelta/scenegen.hpp"

/// Brute-force reference implementations. Written as plain loops over the
/// textbook definitions and sharing no code with the library kernels.
namespace viewdelta::oracle {

using Vec = std::vector<double>;

/// a[m,k] b[k,n] -> [m,n]
Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n);

/// x[ci,h,w], k[co,ci,kh,kw], bias[co] or empty.
Vec conv2d(const Vec& x, std::size_t ci, std::size_t h, std::size_t w, const Vec& k, std::size_t co,
           std::size_t kh, std::size_t kw, const Vec& bias, std::size_t stride, std::size_t pad);

/// Scatter form: x[co,h,w] spreads through k[co,ci,kh,kw] into [ci,h',w'].
Vec conv_transpose2d(const Vec& x, std::size_t co, std::size_t h, std::size_t w, const Vec& k, std::size_t ci,
                     std::size_t kh, std::size_t kw, const Vec& bias, std::size_t stride, std::size_t pad);

/// q,k,v [n,d]; softmax(q_h k_h^T / sqrt(d/heads)) v_h per head, heads concatenated.
Vec attention(const Vec& q, const Vec& k, const Vec& v, std::size_t n, std::size_t d, std::size_t heads);

/// Separable resampling matrices U [h*f, h] applied as U X U^T per channel.
Vec bilinear_upsample(const Vec& x, std::size_t c, std::size_t h, std::size_t w, std::size_t factor);

double dot(const Vec& a, const Vec& b);

/// Nested-loop pixel counts.
ConfusionCounts confusion(const Mask& pred, const Mask& label);

/// Metrics straight from the definitions with the empty/empty rule.
Metrics metrics(const ConfusionCounts& counts);

/// Warps a mask through the 3x3 homogeneous forward matrix, inverted by
/// cofactors, sampling the nearest source pixel.
Mask warp_mask(const Mask& mask, const AffineParams& affine);

/// Per-object warp-and-threshold recomputation of a post-affine label from
/// the pre-affine pair.
Mask pruned_label(const SamplePair& before, const AffineParams& affine, double tau_vis);

/// Per-pixel BCE with logits, summed then divided by n.
double bce(const Vec& z, const Mask& label);

}  // namespace viewdelta::oracle
