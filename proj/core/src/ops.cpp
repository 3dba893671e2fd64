#include "viewdelta/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "kernels.hpp"
#include "viewdelta/engine.hpp"

namespace viewdelta::ops {

namespace {

template <typename Real>
void require_same_shape(const T<Real>& a, const T<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename Real>
void require_rank(const T<Real>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

template <typename Real>
void accumulate(std::vector<Real>* dst, std::span<const Real> src) {
  if (dst == nullptr) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// Perturbation applied by fault injection: a 1% error in one backward rule.
template <typename Real>
Real fault_factor(std::string_view op) {
  return fault_injected(op) ? Real(1.01) : Real(1);
}

struct ConvGeometry {
  std::size_t channels, h, w, kh, kw, stride, padding, out_h, out_w;
};

// cols[(c*kh + ky)*kw + kx][oy*out_w + ox] = x[c][oy*s + ky - p][ox*s + kx - p]
template <typename Real>
void im2col(const Real* x, const ConvGeometry& g, Real* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        Real* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.out_w + ox] =
                inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                       : Real(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into x.
template <typename Real>
void col2im(const Real* cols, const ConvGeometry& g, Real* x) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const Real* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

template <typename Real>
void check_bias(const std::optional<T<Real>>& bias, std::size_t channels, const char* op) {
  if (bias && (bias->rank() != 1 || bias->dim(0) != channels)) {
    throw DimensionError(std::string(op) + ": bias shape " + shape_str(bias->shape()) +
                         " does not match " + std::to_string(channels) + " channels");
  }
}

template <typename Real>
void add_channel_bias(std::vector<Real>& out, std::span<const Real> bias, std::size_t plane) {
  for (std::size_t c = 0; c < bias.size(); ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += bias[c];
  }
}

template <typename Real>
void channel_bias_grad(std::vector<Real>* dst, std::span<const Real> g, std::size_t plane) {
  if (dst == nullptr) return;
  for (std::size_t c = 0; c < dst->size(); ++c) {
    Real s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += g[c * plane + i];
    (*dst)[c] += s;
  }
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct Lerp {
  std::size_t lo, hi;
  double frac;
};

std::vector<Lerp> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<Lerp> taps(in * factor);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : lo;
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

// --- linear algebra -------------------------------------------------------

template <typename Real>
T<Real> matmul(const T<Real>& a, const T<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return T<Real>::make_result(
      {m, n}, std::move(out), {a, b}, "matmul",
      [a, b, m, k, n](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        const Real f = fault_factor<Real>("matmul");
        if (grads[0]) {
          std::vector<Real> da(m * k);
          kernels::gemm_nt(g.data(), b.data().data(), da.data(), m, n, k, false);
          for (std::size_t i = 0; i < da.size(); ++i) (*grads[0])[i] += f * da[i];
        }
        if (grads[1]) kernels::gemm_tn(a.data().data(), g.data(), grads[1]->data(), k, m, n, true);
      });
}

template <typename Real>
T<Real> linear(const T<Real>& x, const T<Real>& w, const T<Real>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != w.dim(1)) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(bias.data().begin(), bias.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  kernels::gemm(x.data().data(), w.data().data(), out.data(), m, k, n, true);
  return T<Real>::make_result(
      {m, n}, std::move(out), {x, w, bias}, "linear",
      [x, w, m, k, n](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        if (grads[0]) kernels::gemm_nt(g.data(), w.data().data(), grads[0]->data(), m, n, k, true);
        if (grads[1]) kernels::gemm_tn(x.data().data(), g.data(), grads[1]->data(), k, m, n, true);
        if (grads[2]) {
          auto& db = *grads[2];
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
          }
        }
      });
}

template <typename Real>
T<Real> transpose(const T<Real>& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto out = kernels::transposed(x.data().data(), r, c);
  return T<Real>::make_result({c, r}, std::move(out), {x}, "transpose",
                              [r, c](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                const auto gt = kernels::transposed(g.data(), c, r);
                                accumulate<Real>(grads[0], gt);
                              });
}

// --- elementwise ----------------------------------------------------------

template <typename Real>
T<Real> add(const T<Real>& a, const T<Real>& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return T<Real>::make_result(a.shape(), std::move(out), {a, b}, "add",
                              [](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                accumulate<Real>(grads[0], g);
                                accumulate<Real>(grads[1], g);
                              });
}

template <typename Real>
T<Real> sub(const T<Real>& a, const T<Real>& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return T<Real>::make_result(a.shape(), std::move(out), {a, b}, "sub",
                              [](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                accumulate<Real>(grads[0], g);
                                if (grads[1]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) (*grads[1])[i] -= g[i];
                                }
                              });
}

template <typename Real>
T<Real> mul(const T<Real>& a, const T<Real>& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return T<Real>::make_result(a.shape(), std::move(out), {a, b}, "mul",
                              [a, b](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                if (grads[0]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * b.data()[i];
                                }
                                if (grads[1]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) (*grads[1])[i] += g[i] * a.data()[i];
                                }
                              });
}

template <typename Real>
T<Real> scale(const T<Real>& a, Real s) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return T<Real>::make_result(a.shape(), std::move(out), {a}, "scale",
                              [s](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * s;
                              });
}

template <typename Real>
T<Real> add_row_bias(const T<Real>& x, const T<Real>& bias) {
  require_rank(x, 2, "add_row_bias");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] + bias.data()[j];
  }
  return T<Real>::make_result(x.shape(), std::move(out), {x, bias}, "add_row_bias",
                              [n, d](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                accumulate<Real>(grads[0], g);
                                if (grads[1]) {
                                  for (std::size_t i = 0; i < n; ++i) {
                                    for (std::size_t j = 0; j < d; ++j) (*grads[1])[j] += g[i * d + j];
                                  }
                                }
                              });
}

template <typename Real>
T<Real> relu(const T<Real>& x) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] <= Real(0) ? Real(0) : x.data()[i];  // NaN passes through
  return T<Real>::make_result(x.shape(), std::move(out), {x}, "relu",
                              [x](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  if (x.data()[i] > Real(0)) (*grads[0])[i] += g[i];
                                }
                              });
}

template <typename Real>
T<Real> gelu(const T<Real>& x) {
  constexpr Real kC = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real kA = static_cast<Real>(0.044715);
  const std::size_t n = x.numel();
  std::vector<Real> out(n);
  std::vector<Real> th(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = x.data()[i];
    th[i] = std::tanh(kC * (v + kA * v * v * v));
    out[i] = Real(0.5) * v * (Real(1) + th[i]);
  }
  return T<Real>::make_result(
      x.shape(), std::move(out), {x}, "gelu",
      [x, th = std::move(th)](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        const Real f = fault_factor<Real>("gelu");
        for (std::size_t i = 0; i < g.size(); ++i) {
          const Real v = x.data()[i];
          const Real t = th[i];
          const Real d = Real(0.5) * (Real(1) + t) +
                         Real(0.5) * v * (Real(1) - t * t) * kC * (Real(1) + Real(3) * kA * v * v);
          (*grads[0])[i] += f * g[i] * d;
        }
      });
}

template <typename Real>
T<Real> sigmoid(const T<Real>& x) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = x.data()[i];
    out[i] = v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
  }
  std::vector<Real> saved = out;
  return T<Real>::make_result(
      x.shape(), std::move(out), {x}, "sigmoid",
      [y = std::move(saved)](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * y[i] * (Real(1) - y[i]);
      });
}

// --- reductions -----------------------------------------------------------

template <typename Real>
T<Real> sum(const T<Real>& x) {
  Real s = 0;
  for (Real v : x.data()) s += v;
  return T<Real>::make_result({1}, {s}, {x}, "sum",
                              [](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                for (auto& v : *grads[0]) v += g[0];
                              });
}

template <typename Real>
T<Real> mean(const T<Real>& x) {
  Real s = 0;
  for (Real v : x.data()) s += v;
  const Real inv = Real(1) / static_cast<Real>(x.numel());
  return T<Real>::make_result({1}, {s * inv}, {x}, "mean",
                              [inv](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                for (auto& v : *grads[0]) v += g[0] * inv;
                              });
}

// --- normalisation and attention -----------------------------------------

template <typename Real>
T<Real> softmax(const T<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<Real> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.len * s.inner + j;
      Real mx = in[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, in[base + i * s.inner]);
      Real z = 0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const Real e = std::exp(in[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= z;
    }
  }
  std::vector<Real> y = out;
  return T<Real>::make_result(
      x.shape(), std::move(out), {x}, "softmax",
      [s, y = std::move(y)](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        auto& dx = *grads[0];
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t j = 0; j < s.inner; ++j) {
            const std::size_t base = o * s.len * s.inner + j;
            Real dot = 0;
            for (std::size_t i = 0; i < s.len; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
            for (std::size_t i = 0; i < s.len; ++i) {
              const std::size_t at = base + i * s.inner;
              dx[at] += y[at] * (g[at] - dot);
            }
          }
        }
      });
}

template <typename Real>
T<Real> layer_norm(const T<Real>& x, const T<Real>& gain, const T<Real>& bias, Real eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
    throw DimensionError("layer_norm: last extent " + std::to_string(d) + " vs gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<Real> out(x.numel());
  std::vector<Real> xhat(x.numel());
  std::vector<Real> rstd(rows);
  const auto in = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = in.data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Real>(d);
    rstd[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return T<Real>::make_result(
      x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
      [gain, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
          std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        const auto gv = gain.data();
        const Real f = fault_factor<Real>("layer_norm");
        if (grads[0]) {
          auto& dx = *grads[0];
          std::vector<Real> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            Real m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g[r * d + j] * gv[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat[r * d + j];
            }
            m1 /= static_cast<Real>(d);
            m2 /= static_cast<Real>(d);
            for (std::size_t j = 0; j < d; ++j) {
              dx[r * d + j] += f * rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
            }
          }
        }
        if (grads[1]) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) (*grads[1])[j] += g[r * d + j] * xhat[r * d + j];
          }
        }
        if (grads[2]) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) (*grads[2])[j] += g[r * d + j];
          }
        }
      });
}

template <typename Real>
T<Real> attention(const T<Real>& q, const T<Real>& k, const T<Real>& v, std::size_t heads) {
  require_rank(q, 2, "attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: model width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  const Real scale_factor = Real(1) / std::sqrt(static_cast<Real>(dh));

  auto gather = [n, d, dh](std::span<const Real> src, std::size_t h) {
    std::vector<Real> out(n * dh);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(src.data() + i * d + h * dh, dh, out.data() + i * dh);
    }
    return out;
  };

  std::vector<Real> out(n * d);
  std::vector<Real> probs(heads * n * n);
  std::vector<Real> oh(n * dh);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = gather(q.data(), h);
    const auto kh = gather(k.data(), h);
    const auto vh = gather(v.data(), h);
    Real* p = probs.data() + h * n * n;
    kernels::gemm_nt(qh.data(), kh.data(), p, n, dh, n, false);
    for (std::size_t i = 0; i < n; ++i) {
      Real* row = p + i * n;
      Real mx = row[0] * scale_factor;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] *= scale_factor;
        mx = std::max(mx, row[j]);
      }
      Real z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < n; ++j) row[j] /= z;
    }
    kernels::gemm(p, vh.data(), oh.data(), n, n, dh, false);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(oh.data() + i * dh, dh, out.data() + i * d + h * dh);
  }

  return T<Real>::make_result(
      {n, d}, std::move(out), {q, k, v}, "attention",
      [q, k, v, n, d, dh, heads, scale_factor, gather, probs = std::move(probs)](
          std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        std::vector<Real> dp(n * n);
        std::vector<Real> dq(n * dh), dk(n * dh), dv(n * dh);
        auto scatter = [n, d, dh](std::vector<Real>* dst, const std::vector<Real>& src, std::size_t h) {
          if (dst == nullptr) return;
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < dh; ++j) (*dst)[i * d + h * dh + j] += src[i * dh + j];
          }
        };
        for (std::size_t h = 0; h < heads; ++h) {
          const Real* p = probs.data() + h * n * n;
          const auto go = gather(g, h);
          const auto qh = gather(q.data(), h);
          const auto kh = gather(k.data(), h);
          const auto vh = gather(v.data(), h);
          kernels::gemm_nt(go.data(), vh.data(), dp.data(), n, dh, n, false);
          for (std::size_t i = 0; i < n; ++i) {
            Real dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
              dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * scale_factor;
            }
          }
          kernels::gemm(dp.data(), kh.data(), dq.data(), n, n, dh, false);
          kernels::gemm_tn(dp.data(), qh.data(), dk.data(), n, n, dh, false);
          kernels::gemm_tn(p, go.data(), dv.data(), n, n, dh, false);
          scatter(grads[0], dq, h);
          scatter(grads[1], dk, h);
          scatter(grads[2], dv, h);
        }
      });
}

// --- spatial ---------------------------------------------------------------

template <typename Real>
T<Real> conv2d(const T<Real>& x, const T<Real>& kernel, const std::optional<T<Real>>& bias,
               std::size_t stride, std::size_t padding) {
  require_rank(x, 3, "conv2d");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c_in) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(1)) + " input channels, input is " +
                         shape_str(x.shape()));
  }
  check_bias(bias, c_out, "conv2d");
  if (h + 2 * padding < kh || w + 2 * padding < kw || (h + 2 * padding - kh) % stride != 0 ||
      (w + 2 * padding - kw) % stride != 0) {
    throw DimensionError("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(kernel.shape()) + ", stride " +
                         std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const ConvGeometry geo{c_in, h, w, kh, kw, stride, padding,
                         (h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1};
  const std::size_t plane = geo.out_h * geo.out_w;
  const std::size_t patch = c_in * kh * kw;
  std::vector<Real> cols(patch * plane);
  im2col(x.data().data(), geo, cols.data());
  std::vector<Real> out(c_out * plane);
  kernels::gemm(kernel.data().data(), cols.data(), out.data(), c_out, patch, plane, false);
  if (bias) add_channel_bias<Real>(out, bias->data(), plane);

  std::vector<T<Real>> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return T<Real>::make_result(
      {c_out, geo.out_h, geo.out_w}, std::move(out), std::move(inputs), "conv2d",
      [kernel, geo, c_out, patch, plane, cols = std::move(cols)](
          std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        if (grads[1]) kernels::gemm_nt(g.data(), cols.data(), grads[1]->data(), c_out, plane, patch, true);
        if (grads[0]) {
          std::vector<Real> dcols(patch * plane);
          kernels::gemm_tn(kernel.data().data(), g.data(), dcols.data(), patch, c_out, plane, false);
          col2im(dcols.data(), geo, grads[0]->data());
        }
        if (grads.size() > 2) channel_bias_grad<Real>(grads[2], g, plane);
      });
}

template <typename Real>
T<Real> conv_transpose2d(const T<Real>& x, const T<Real>& kernel,
                         const std::optional<T<Real>>& bias, std::size_t stride,
                         std::size_t padding) {
  require_rank(x, 3, "conv_transpose2d");
  require_rank(kernel, 4, "conv_transpose2d kernel");
  if (stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
  const std::size_t c_src = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (kernel.dim(0) != c_src) {
    throw DimensionError("conv_transpose2d: kernel " + shape_str(kernel.shape()) +
                         " expects " + std::to_string(kernel.dim(0)) +
                         " input channels, input is " + shape_str(x.shape()));
  }
  const std::size_t c_dst = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  check_bias(bias, c_dst, "conv_transpose2d");
  const std::size_t span_h = (h - 1) * stride + kh;
  const std::size_t span_w = (w - 1) * stride + kw;
  if (span_h <= 2 * padding || span_w <= 2 * padding) {
    throw DimensionError("conv_transpose2d: invalid geometry for input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(kernel.shape()) + ", padding " +
                         std::to_string(padding));
  }
  // The output is the image space of a conv2d that maps it back onto x.
  const ConvGeometry geo{c_dst, span_h - 2 * padding, span_w - 2 * padding, kh, kw,
                         stride, padding, h, w};
  const std::size_t plane_in = h * w;
  const std::size_t plane_out = geo.h * geo.w;
  const std::size_t patch = c_dst * kh * kw;
  std::vector<Real> cols(patch * plane_in);
  kernels::gemm_tn(kernel.data().data(), x.data().data(), cols.data(), patch, c_src, plane_in, false);
  std::vector<Real> out(c_dst * plane_out, Real(0));
  col2im(cols.data(), geo, out.data());
  if (bias) add_channel_bias<Real>(out, bias->data(), plane_out);

  std::vector<T<Real>> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return T<Real>::make_result(
      {c_dst, geo.h, geo.w}, std::move(out), std::move(inputs), "conv_transpose2d",
      [x, kernel, geo, c_src, patch, plane_in, plane_out](std::span<const Real> g,
                                                          std::span<std::vector<Real>*> grads) {
        std::vector<Real> gcols(patch * plane_in);
        im2col(g.data(), geo, gcols.data());
        if (grads[0]) {
          kernels::gemm(kernel.data().data(), gcols.data(), grads[0]->data(), c_src, patch, plane_in, true);
        }
        if (grads[1]) {
          kernels::gemm_nt(x.data().data(), gcols.data(), grads[1]->data(), c_src, plane_in, patch, true);
        }
        if (grads.size() > 2) channel_bias_grad<Real>(grads[2], g, plane_out);
      });
}

template <typename Real>
T<Real> bilinear_upsample(const T<Real>& x, std::size_t factor) {
  require_rank(x, 3, "bilinear_upsample");
  if (factor < 1) throw DimensionError("bilinear_upsample: factor must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
  std::vector<Real> out(c * oh * ow);
  const auto in = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const Real* src = in.data() + ch * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      const Real fy = static_cast<Real>(ty[i].frac);
      for (std::size_t j = 0; j < ow; ++j) {
        const Real fx = static_cast<Real>(tx[j].frac);
        const Real top = (Real(1) - fx) * src[ty[i].lo * w + tx[j].lo] + fx * src[ty[i].lo * w + tx[j].hi];
        const Real bot = (Real(1) - fx) * src[ty[i].hi * w + tx[j].lo] + fx * src[ty[i].hi * w + tx[j].hi];
        out[(ch * oh + i) * ow + j] = (Real(1) - fy) * top + fy * bot;
      }
    }
  }
  return T<Real>::make_result(
      {c, oh, ow}, std::move(out), {x}, "bilinear_upsample",
      [c, h, w, oh, ow, ty, tx](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        auto& dx = *grads[0];
        for (std::size_t ch = 0; ch < c; ++ch) {
          Real* dst = dx.data() + ch * h * w;
          for (std::size_t i = 0; i < oh; ++i) {
            const Real fy = static_cast<Real>(ty[i].frac);
            for (std::size_t j = 0; j < ow; ++j) {
              const Real fx = static_cast<Real>(tx[j].frac);
              const Real gv = g[(ch * oh + i) * ow + j];
              dst[ty[i].lo * w + tx[j].lo] += (Real(1) - fy) * (Real(1) - fx) * gv;
              dst[ty[i].lo * w + tx[j].hi] += (Real(1) - fy) * fx * gv;
              dst[ty[i].hi * w + tx[j].lo] += fy * (Real(1) - fx) * gv;
              dst[ty[i].hi * w + tx[j].hi] += fy * fx * gv;
            }
          }
        }
      });
}

// --- shape plumbing ---------------------------------------------------------

template <typename Real>
T<Real> reshape(const T<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<Real> out(x.data().begin(), x.data().end());
  return T<Real>::make_result(std::move(shape), std::move(out), {x}, "reshape",
                              [](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                accumulate<Real>(grads[0], g);
                              });
}

template <typename Real>
T<Real> concat(const std::vector<T<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts.front().shape();
  Shape tail(shape.begin() + 1, shape.end());
  std::size_t rows = 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw DimensionError("concat: trailing extents differ: " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    total += p.numel();
  }
  shape[0] = rows;
  std::vector<Real> out;
  out.reserve(total);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.numel());
  return T<Real>::make_result(
      std::move(shape), std::move(out), parts, "concat",
      [offsets, sizes](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
        for (std::size_t i = 0; i < grads.size(); ++i) {
          accumulate<Real>(grads[i], g.subspan(offsets[i], sizes[i]));
        }
      });
}

template <typename Real>
T<Real> slice(const T<Real>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin >= end || end > x.dim(0)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + shape_str(x.shape()));
  }
  const std::size_t row = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<Real> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                        x.data().begin() + static_cast<std::ptrdiff_t>(end * row));
  const std::size_t offset = begin * row;
  return T<Real>::make_result(std::move(shape), std::move(out), {x}, "slice",
                              [offset](std::span<const Real> g, std::span<std::vector<Real>*> grads) {
                                auto& dx = *grads[0];
                                for (std::size_t i = 0; i < g.size(); ++i) dx[offset + i] += g[i];
                              });
}

#define VIEWDELTA_INSTANTIATE(Real)                                                              \
  template T<Real> matmul(const T<Real>&, const T<Real>&);                                       \
  template T<Real> linear(const T<Real>&, const T<Real>&, const T<Real>&);                       \
  template T<Real> transpose(const T<Real>&);                                                    \
  template T<Real> add(const T<Real>&, const T<Real>&);                                          \
  template T<Real> sub(const T<Real>&, const T<Real>&);                                          \
  template T<Real> mul(const T<Real>&, const T<Real>&);                                          \
  template T<Real> scale(const T<Real>&, Real);                                                  \
  template T<Real> add_row_bias(const T<Real>&, const T<Real>&);                                 \
  template T<Real> relu(const T<Real>&);                                                         \
  template T<Real> gelu(const T<Real>&);                                                         \
  template T<Real> sigmoid(const T<Real>&);                                                      \
  template T<Real> sum(const T<Real>&);                                                          \
  template T<Real> mean(const T<Real>&);                                                         \
  template T<Real> softmax(const T<Real>&, std::size_t);                                         \
  template T<Real> layer_norm(const T<Real>&, const T<Real>&, const T<Real>&, Real);             \
  template T<Real> attention(const T<Real>&, const T<Real>&, const T<Real>&, std::size_t);       \
  template T<Real> conv2d(const T<Real>&, const T<Real>&, const std::optional<T<Real>>&,         \
                          std::size_t, std::size_t);                                             \
  template T<Real> conv_transpose2d(const T<Real>&, const T<Real>&,                              \
                                    const std::optional<T<Real>>&, std::size_t, std::size_t);    \
  template T<Real> bilinear_upsample(const T<Real>&, std::size_t);                               \
  template T<Real> reshape(const T<Real>&, Shape);                                               \
  template T<Real> concat(const std::vector<T<Real>>&);                                          \
  template T<Real> slice(const T<Real>&, std::size_t, std::size_t);

VIEWDELTA_INSTANTIATE(float)
VIEWDELTA_INSTANTIATE(double)

#undef VIEWDELTA_INSTANTIATE

}  // namespace viewdelta::ops
