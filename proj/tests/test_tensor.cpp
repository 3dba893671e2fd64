#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "viewdelta/engine.hpp"
#include "viewdelta/ops.hpp"
#include "viewdelta/rng.hpp"
#include "viewdelta/verify/oracles.hpp"

namespace vd = viewdelta;
namespace ops = viewdelta::ops;
using T = vd::Tensor<double>;
using TF = vd::Tensor<float>;

namespace {

T rand_t(vd::Rng& rng, vd::Shape shape, bool grad = true) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return T::from(std::move(shape), v, grad);
}

std::vector<double> vals(const T& t) { return {t.data().begin(), t.data().end()}; }

// Central-difference check of every leaf entry of `inputs` for loss = f(inputs).
void expect_fd(std::vector<T> inputs, const std::function<T(const std::vector<T>&)>& f, double tol = 1e-6) {
  T loss = f(inputs);
  loss.backward();
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::vector<double> analytic(inputs[i].grad().begin(), inputs[i].grad().end());
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      auto x = inputs[i].mutable_data();
      const double keep = x[j];
      x[j] = keep + h;
      const double up = f(inputs).item();
      x[j] = keep - h;
      const double down = f(inputs).item();
      x[j] = keep;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(analytic[j], numeric, tol * std::max(1.0, std::abs(numeric))) << "input " << i << " entry " << j;
    }
  }
}

}  // namespace

TEST(Tensor, ShapeAndDataInvariants) {
  const T t = T::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(T::from({2, 2}, {1, 2, 3}), vd::DimensionError);
  const T g = T::full({3}, 1.5, true);
  EXPECT_EQ(g.grad().size(), 3u);
}

TEST(Tensor, MatmulExamples) {
  const T eye = T::from({2, 2}, {1, 0, 0, 1});
  const T m = T::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vals(ops::matmul(eye, m)), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(vals(ops::matmul(m, T::from({2, 1}, {5, 6}))), (std::vector<double>{17, 39}));
  vd::Rng rng(1);
  const T a = rand_t(rng, {4, 5}, false), b = rand_t(rng, {5, 3}, false);
  const auto want = vd::oracle::matmul(vals(a), vals(b), 4, 5, 3);
  const auto got = ops::matmul(a, b);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data()[i], want[i], 1e-12);
}

TEST(Tensor, MatmulShapeErrorNamesShapes) {
  try {
    ops::matmul(T::zeros({2, 3}), T::zeros({4, 5}));
    FAIL();
  } catch (const vd::DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("4"), std::string::npos);
  }
}

TEST(Tensor, SoftmaxExamples) {
  auto s = ops::softmax(T::from({3}, {0, 0, 0}), 0);
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
  s = ops::softmax(T::from({2}, {0, std::log(2.0)}), 0);
  EXPECT_NEAR(s.data()[0], 1.0 / 3, 1e-15);
  EXPECT_NEAR(s.data()[1], 2.0 / 3, 1e-15);
  vd::Rng rng(2);
  const T x = rand_t(rng, {4, 7}, false);
  const auto a = ops::softmax(x, 1);
  const auto b = ops::softmax(ops::add(x, T::full({4, 7}, 12.5)), 1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 7; ++c) sum += a.at({r, c});
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  // Along axis 0 as well.
  const auto c = ops::softmax(x, 0);
  for (std::size_t col = 0; col < 7; ++col) {
    double sum = 0;
    for (std::size_t r = 0; r < 4; ++r) sum += c.at({r, col});
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Tensor, LayerNormExamples) {
  const T one = T::full({4}, 1.0), zero = T::zeros({4});
  const auto flat = ops::layer_norm(T::full({4}, 3.0), one, zero, 1e-5);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  const auto two = ops::layer_norm(T::from({2}, {1, 3}), T::full({2}, 1.0), T::zeros({2}), 1e-12);
  EXPECT_NEAR(two.data()[0], -1.0, 1e-9);
  EXPECT_NEAR(two.data()[1], 1.0, 1e-9);
  vd::Rng rng(3);
  const auto y = ops::layer_norm(rand_t(rng, {5, 64}, false), T::full({64}, 1.0), T::zeros({64}), 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 64; ++c) m += y.at({r, c});
    m /= 64;
    for (std::size_t c = 0; c < 64; ++c) v += (y.at({r, c}) - m) * (y.at({r, c}) - m);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(v / 64), 1.0, 1e-6);
  }
  EXPECT_THROW(ops::layer_norm(T::zeros({2, 3}), T::zeros({4}), T::zeros({4}), 1e-5), vd::DimensionError);
}

TEST(Tensor, AttentionExamples) {
  vd::Rng rng(4);
  const T q1 = rand_t(rng, {1, 8}, false), k1 = rand_t(rng, {1, 8}, false), v1 = rand_t(rng, {1, 8}, false);
  EXPECT_EQ(vals(ops::attention(q1, k1, v1, 2)), vals(v1));

  const T q = rand_t(rng, {5, 4}, false), v = rand_t(rng, {5, 4}, false);
  std::vector<double> same(20);
  for (std::size_t i = 0; i < 20; ++i) same[i] = static_cast<double>(i % 4);
  const auto out = ops::attention(q, T::from({5, 4}, same), v, 2);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (std::size_t r = 0; r < 5; ++r) mean += v.at({r, c});
    mean /= 5;
    for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(out.at({r, c}), mean, 1e-12);
  }

  const T a = rand_t(rng, {6, 8}, false), b = rand_t(rng, {6, 8}, false), c = rand_t(rng, {6, 8}, false);
  const auto want = vd::oracle::attention(vals(a), vals(b), vals(c), 6, 8, 2);
  const auto got = ops::attention(a, b, c, 2);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data()[i], want[i], 1e-10);
  EXPECT_THROW(ops::attention(a, b, c, 3), vd::DimensionError);
}

TEST(Tensor, AttentionIsConvexCombinationOfValues) {
  vd::Rng rng(5);
  const T q = rand_t(rng, {7, 6}, false), k = rand_t(rng, {7, 6}, false), v = rand_t(rng, {7, 6}, false);
  const auto out = ops::attention(q, k, v, 3);
  for (std::size_t col = 0; col < 6; ++col) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t r = 0; r < 7; ++r) {
      lo = std::min(lo, v.at({r, col}));
      hi = std::max(hi, v.at({r, col}));
    }
    for (std::size_t r = 0; r < 7; ++r) {
      EXPECT_GE(out.at({r, col}), lo - 1e-12);
      EXPECT_LE(out.at({r, col}), hi + 1e-12);
    }
  }
}

TEST(Tensor, ConvExamples) {
  const T x = T::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(vals(ops::conv2d(x, T::from({1, 1, 1, 1}, {1}), std::optional<T>{}, 1, 0)), vals(x));
  const auto nine = ops::conv2d(T::full({1, 3, 3}, 1.0), T::full({1, 1, 3, 3}, 1.0), std::optional<T>{}, 1, 0);
  EXPECT_EQ(nine.shape(), (vd::Shape{1, 1, 1}));
  EXPECT_EQ(nine.item(), 9.0);
  EXPECT_THROW(ops::conv2d(T::zeros({1, 4, 4}), T::zeros({1, 1, 3, 3}), std::optional<T>{}, 2, 0), vd::DimensionError);

  const T k = T::from({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto up = ops::conv_transpose2d(T::from({1, 1, 1}, {1}), k, std::optional<T>{}, 2, 0);
  EXPECT_EQ(vals(up), (std::vector<double>{1, 2, 3, 4}));
  const auto big = ops::conv_transpose2d(T::zeros({3, 8, 8}), T::zeros({3, 2, 2, 2}), std::optional<T>{}, 2, 0);
  EXPECT_EQ(big.shape(), (vd::Shape{2, 16, 16}));
}

TEST(Tensor, ConvAdjointIdentity) {
  vd::Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const T x = rand_t(rng, {3, 9, 9}, false), kk = rand_t(rng, {2, 3, 3, 3}, false);
    const auto cx = ops::conv2d(x, kk, std::optional<T>{}, 2, 1);
    const T y = rand_t(rng, {2, cx.dim(1), cx.dim(2)}, false);
    const auto ty = ops::conv_transpose2d(y, kk, std::optional<T>{}, 2, 1);
    ASSERT_EQ(ty.shape(), x.shape());
    const double lhs = vd::oracle::dot(vals(cx), vals(y)), rhs = vd::oracle::dot(vals(x), vals(ty));
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST(Tensor, BilinearExamples) {
  vd::Rng rng(7);
  const T x = rand_t(rng, {2, 3, 4}, false);
  EXPECT_EQ(vals(ops::bilinear_upsample(x, 1)), vals(x));
  const auto constant = ops::bilinear_upsample(T::full({1, 3, 3}, 2.5), 3);
  for (double v : constant.data()) EXPECT_NEAR(v, 2.5, 1e-15);
  EXPECT_THROW(ops::bilinear_upsample(x, 0), vd::DimensionError);

  // Per-pixel formula: source = (i + 0.5) / f - 0.5, clamped, two taps per axis.
  const auto out = ops::bilinear_upsample(T::from({1, 2, 2}, {0, 1, 2, 3}), 2);
  auto coord = [](std::size_t i) { return std::clamp((i + 0.5) / 2 - 0.5, 0.0, 1.0); };
  const double in[2][2] = {{0, 1}, {2, 3}};
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t xx = 0; xx < 4; ++xx) {
      const double sy = coord(y), sx = coord(xx);
      const double v = (1 - sy) * ((1 - sx) * in[0][0] + sx * in[0][1]) + sy * ((1 - sx) * in[1][0] + sx * in[1][1]);
      EXPECT_NEAR(out.at({0, y, xx}), v, 1e-15);
    }
  }
}

TEST(Tensor, ElementwiseExamples) {
  EXPECT_EQ(vals(ops::relu(T::from({2}, {-1, 2}))), (std::vector<double>{0, 2}));
  EXPECT_EQ(ops::gelu(T::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(ops::sigmoid(T::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(ops::mean(T::from({4}, {1, 2, 3, 6})).item(), 3.0);
  EXPECT_EQ(ops::sum(T::from({4}, {1, 2, 3, 6})).item(), 12.0);
}

TEST(Autodiff, SimpleGradients) {
  vd::Rng rng(8);
  T x = rand_t(rng, {3, 4});
  ops::sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  T y = rand_t(rng, {5});
  ops::sum(ops::mul(y, y)).backward();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(y.grad()[i], 2 * y.data()[i]);
}

TEST(Autodiff, BackwardErrors) {
  T x = T::full({3}, 1.0, true);
  EXPECT_THROW(ops::scale(x, 2.0).backward(), vd::GraphError);  // not scalar
  T loss = ops::sum(x);
  loss.backward();
  EXPECT_THROW(loss.backward(), vd::GraphError);
}

TEST(Autodiff, GradientsAccumulateUntilReset) {
  T x = T::full({2}, 1.0, true);
  ops::sum(x).backward();
  ops::sum(x).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Autodiff, SharedSubexpressionVisitedOnce) {
  T x = T::from({1}, {3.0}, true);
  const T y = ops::mul(x, x);
  ops::sum(ops::add(y, y)).backward();  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, FiniteDifferencePerOp) {
  vd::Rng rng(9);
  expect_fd({rand_t(rng, {3, 4}), rand_t(rng, {4, 2})}, [](const auto& in) { return ops::sum(ops::matmul(in[0], in[1])); });
  expect_fd({rand_t(rng, {3, 4}), rand_t(rng, {4, 5}), rand_t(rng, {5})}, [](const auto& in) {
    return ops::sum(ops::gelu(ops::linear(in[0], in[1], in[2])));
  });
  expect_fd({rand_t(rng, {3, 5}), rand_t(rng, {3, 5})}, [](const auto& in) {
    return ops::sum(ops::mul(ops::softmax(in[0], 1), in[1]));
  });
  expect_fd({rand_t(rng, {2, 6}), rand_t(rng, {6}), rand_t(rng, {6}), rand_t(rng, {2, 6})}, [](const auto& in) {
    return ops::sum(ops::mul(ops::layer_norm(in[0], in[1], in[2], 1e-5), in[3]));
  });
  expect_fd({rand_t(rng, {4, 6}), rand_t(rng, {4, 6}), rand_t(rng, {4, 6}), rand_t(rng, {4, 6})}, [](const auto& in) {
    return ops::sum(ops::mul(ops::attention(in[0], in[1], in[2], 2), in[3]));
  });
  expect_fd({rand_t(rng, {2, 5, 5}), rand_t(rng, {3, 2, 3, 3}), rand_t(rng, {3})}, [](const auto& in) {
    return ops::sum(ops::sigmoid(ops::conv2d(in[0], in[1], std::optional<T>(in[2]), 2, 1)));
  });
  expect_fd({rand_t(rng, {3, 3, 3}), rand_t(rng, {3, 2, 2, 2}), rand_t(rng, {2})}, [](const auto& in) {
    return ops::sum(ops::sigmoid(ops::conv_transpose2d(in[0], in[1], std::optional<T>(in[2]), 2, 0)));
  });
  expect_fd({rand_t(rng, {2, 3, 3}), rand_t(rng, {2, 6, 6})}, [](const auto& in) {
    return ops::sum(ops::mul(ops::bilinear_upsample(in[0], 2), in[1]));
  });
  expect_fd({rand_t(rng, {4, 3}), rand_t(rng, {2, 3})}, [](const auto& in) {
    const auto cat = ops::concat<double>({in[0], in[1]});
    return ops::mean(ops::mul(ops::slice(ops::transpose(cat), 1, 3), ops::slice(ops::transpose(cat), 0, 2)));
  });
}

TEST(Autodiff, DeterministicAcrossRuns) {
  auto run = [] {
    vd::Rng rng(10);
    T a = rand_t(rng, {16, 32}), b = rand_t(rng, {32, 16});
    T loss = ops::mean(ops::gelu(ops::matmul(a, b)));
    loss.backward();
    return std::make_pair(std::vector<double>(a.grad().begin(), a.grad().end()), loss.item());
  };
  EXPECT_EQ(run(), run());
}

TEST(Engine, PrecisionDispatch) {
  EXPECT_EQ(vd::parse_precision("f64"), vd::Precision::f64);
  EXPECT_EQ(vd::parse_precision("f32"), vd::Precision::f32);
  EXPECT_THROW(vd::parse_precision("f16"), std::invalid_argument);
  const std::size_t bytes = vd::dispatch_precision(vd::Precision::f64, []<typename Real>() { return sizeof(Real); });
  EXPECT_EQ(bytes, sizeof(double));
  EXPECT_EQ(vd::dispatch_precision(vd::Precision::f32, []<typename Real>() { return sizeof(Real); }), sizeof(float));
}

TEST(Engine, FloatPathAgreesWithDouble) {
  vd::Rng rng(11);
  const T a = rand_t(rng, {5, 7}, false), b = rand_t(rng, {7, 3}, false);
  const auto af = TF::from({5, 7}, std::vector<float>(a.data().begin(), a.data().end()));
  const auto bf = TF::from({7, 3}, std::vector<float>(b.data().begin(), b.data().end()));
  const auto d = ops::matmul(a, b);
  const auto f = ops::matmul(af, bf);
  for (std::size_t i = 0; i < d.numel(); ++i) EXPECT_NEAR(f.data()[i], d.data()[i], 1e-4);
}
