#include "viewdelta/verify/oracles.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace viewdelta::oracle {

Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
  return c;
}

Vec conv2d(const Vec& x, std::size_t ci, std::size_t h, std::size_t w, const Vec& k, std::size_t co,
           std::size_t kh, std::size_t kw, const Vec& bias, std::size_t stride, std::size_t pad) {
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Vec out(co * oh * ow, 0.0);
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double s = bias.empty() ? 0.0 : bias[o];
        for (std::size_t c = 0; c < ci; ++c) {
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              s += x[(c * h + iy) * w + ix] * k[((o * ci + c) * kh + i) * kw + j];
            }
          }
        }
        out[(o * oh + y) * ow + xx] = s;
      }
    }
  }
  return out;
}

Vec conv_transpose2d(const Vec& x, std::size_t co, std::size_t h, std::size_t w, const Vec& k, std::size_t ci,
                     std::size_t kh, std::size_t kw, const Vec& bias, std::size_t stride, std::size_t pad) {
  const std::size_t oh = (h - 1) * stride + kh - 2 * pad;
  const std::size_t ow = (w - 1) * stride + kw - 2 * pad;
  Vec out(ci * oh * ow, 0.0);
  for (std::size_t a = 0; a < co; ++a) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        for (std::size_t b = 0; b < ci; ++b) {
          for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
              const long oy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long ox = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
              if (oy < 0 || ox < 0 || oy >= static_cast<long>(oh) || ox >= static_cast<long>(ow)) continue;
              out[(b * oh + oy) * ow + ox] += x[(a * h + y) * w + xx] * k[((a * ci + b) * kh + i) * kw + j];
            }
          }
        }
      }
    }
  }
  if (!bias.empty()) {
    for (std::size_t b = 0; b < ci; ++b) {
      for (std::size_t p = 0; p < oh * ow; ++p) out[b * oh * ow + p] += bias[b];
    }
  }
  return out;
}

Vec attention(const Vec& q, const Vec& k, const Vec& v, std::size_t n, std::size_t d, std::size_t heads) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Vec out(n * d, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const std::size_t off = hd * dh;
    for (std::size_t i = 0; i < n; ++i) {
      Vec score(n);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * d + off + c] * k[j * d + off + c];
        score[j] = s * scale;
        mx = std::max(mx, score[j]);
      }
      double z = 0.0;
      for (double& s : score) z += (s = std::exp(s - mx));
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += score[j] / z * v[j * d + off + c];
      }
    }
  }
  return out;
}

namespace {

// Row i of the 1-D resampler holds the two taps of output sample i.
Vec resampler(std::size_t n, std::size_t factor) {
  const std::size_t m = n * factor;
  Vec u(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > n - 1) lo = n - 1;
    const std::size_t hi = lo + 1 < n ? lo + 1 : n - 1;
    const double t = src - static_cast<double>(lo);
    u[i * n + lo] += 1.0 - t;
    u[i * n + hi] += t;
  }
  return u;
}

}  // namespace

Vec bilinear_upsample(const Vec& x, std::size_t c, std::size_t h, std::size_t w, std::size_t factor) {
  const Vec uy = resampler(h, factor);
  const Vec ux = resampler(w, factor);
  const std::size_t oh = h * factor, ow = w * factor;
  Vec out;
  out.reserve(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const Vec plane(x.begin() + static_cast<long>(ch * h * w), x.begin() + static_cast<long>((ch + 1) * h * w));
    Vec uxt(w * ow);
    for (std::size_t i = 0; i < ow; ++i) {
      for (std::size_t j = 0; j < w; ++j) uxt[j * ow + i] = ux[i * w + j];
    }
    const Vec tmp = matmul(uy, plane, oh, h, w);
    const Vec res = matmul(tmp, uxt, oh, w, ow);
    out.insert(out.end(), res.begin(), res.end());
  }
  return out;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

ConfusionCounts confusion(const Mask& pred, const Mask& label) {
  if (pred.width != label.width || pred.height != label.height) throw std::invalid_argument("shape mismatch");
  ConfusionCounts c;
  for (std::size_t y = 0; y < pred.height; ++y) {
    for (std::size_t x = 0; x < pred.width; ++x) {
      const bool p = pred.at(x, y) != 0;
      const bool l = label.at(x, y) != 0;
      if (p && l) {
        c.tp += 1;
      } else if (p && !l) {
        c.fp += 1;
      } else if (!p && l) {
        c.fn += 1;
      } else {
        c.tn += 1;
      }
    }
  }
  return c;
}

Metrics metrics(const ConfusionCounts& c) {
  Metrics m;
  if (c.tp + c.fp + c.fn == 0) return {1.0, 1.0, 1.0, 1.0};
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  m.iou = tp / (tp + fp + fn);
  m.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
    }
  }
  return c;
}

Mat3 invert(const Mat3& m) {
  Mat3 cof{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const int r0 = (i + 1) % 3, r1 = (i + 2) % 3, c0 = (j + 1) % 3, c1 = (j + 2) % 3;
      cof[i][j] = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    }
  }
  const double det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
  Mat3 inv{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) inv[i][j] = cof[j][i] / det;
  }
  return inv;
}

Mat3 forward_matrix(const AffineParams& a, double cx, double cy) {
  const double th = a.rotation_deg * std::numbers::pi / 180.0;
  const Mat3 to_origin{{{1, 0, -cx}, {0, 1, -cy}, {0, 0, 1}}};
  const Mat3 rot_scale{{{a.scale * std::cos(th), -a.scale * std::sin(th), 0},
                        {a.scale * std::sin(th), a.scale * std::cos(th), 0},
                        {0, 0, 1}}};
  const Mat3 back{{{1, 0, cx + a.tx}, {0, 1, cy + a.ty}, {0, 0, 1}}};
  return multiply(back, multiply(rot_scale, to_origin));
}

}  // namespace

Mask warp_mask(const Mask& mask, const AffineParams& affine) {
  const double w = static_cast<double>(mask.width), h = static_cast<double>(mask.height);
  const Mat3 inv = invert(forward_matrix(affine, w / 2, h / 2));
  Mask out(mask.width, mask.height);
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      const double qx = x + 0.5, qy = y + 0.5;
      const double sx = inv[0][0] * qx + inv[0][1] * qy + inv[0][2];
      const double sy = inv[1][0] * qx + inv[1][1] * qy + inv[1][2];
      if (sx < 0 || sy < 0 || sx >= w || sy >= h) continue;
      out.at(x, y) = mask.at(static_cast<std::size_t>(std::floor(sx)), static_cast<std::size_t>(std::floor(sy)));
    }
  }
  return out;
}

Mask pruned_label(const SamplePair& before, const AffineParams& affine, double tau_vis) {
  Mask label(before.label.width, before.label.height);
  for (const auto& obj : before.meta.removed) {
    if (obj.role == RemovalRole::red_herring) continue;
    const Mask warped = oracle::warp_mask(obj.mask, affine);
    std::size_t orig = 0, kept = 0;
    for (auto v : obj.mask.values) orig += v;
    for (auto v : warped.values) kept += v;
    const double visible = static_cast<double>(kept) / (static_cast<double>(orig) * affine.scale * affine.scale);
    if (visible < tau_vis) continue;
    const Mask& frame = affine.applied_to_b ? warped : obj.mask;
    for (std::size_t i = 0; i < label.values.size(); ++i) {
      if (frame.values[i]) label.values[i] = 1;
    }
  }
  return label;
}

double bce(const Vec& z, const Mask& label) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double y = label.values[i];
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    s += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  return s / static_cast<double>(z.size());
}

}  // namespace viewdelta::oracle
