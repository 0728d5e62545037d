#include <gtest/gtest.h>

#include "test_util.hpp"
#include "virda/ops.hpp"

using namespace virda;
using virda::testing::numeric_gradient;
using virda::testing::random_map;
using virda::testing::random_matrix;
using virda::testing::relative_error;

namespace {

// Direct convolution, the brute-force reference for the im2col path.
FeatureMap<double> naive_conv(const FeatureMap<double>& x, const RowMatrix<double>& w,
                              const RowMatrix<double>& b, const ops::ConvGeometry& g) {
  const int oc = static_cast<int>(w.rows()), ic = x.channels();
  const int oh = g.out_size(x.h), ow = g.out_size(x.w);
  FeatureMap<double> y(x.n, oc, oh, ow);
  for (int o = 0; o < oc; ++o)
    for (int i = 0; i < x.n; ++i)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          double s = b(0, o);
          for (int c = 0; c < ic; ++c)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int sy = yy * g.stride - g.pad + ky, sx = xx * g.stride - g.pad + kx;
                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                s += w(o, (c * g.kernel + ky) * g.kernel + kx) * x.at(c, i, sy, sx);
              }
          y.at(o, i, yy, xx) = s;
        }
  return y;
}

}  // namespace

class ConvGeometries : public ::testing::TestWithParam<ops::ConvGeometry> {};

TEST_P(ConvGeometries, MatchesDirectConvolution) {
  const auto g = GetParam();
  const auto x = random_map(2, 3, 9, 7, 1);
  const RowMatrix<double> w = random_matrix(4, 3 * g.kernel * g.kernel, 2);
  const RowMatrix<double> b = random_matrix(1, 4, 3);
  EXPECT_LT((ops::conv2d(x, w, &b, g).data - naive_conv(x, w, b, g).data).norm(), 1e-12);
}

TEST_P(ConvGeometries, GradientsMatchFiniteDifferences) {
  const auto g = GetParam();
  FeatureMap<double> x = random_map(2, 3, 6, 5, 4);
  RowMatrix<double> w = random_matrix(4, 3 * g.kernel * g.kernel, 5);
  RowMatrix<double> b = random_matrix(1, 4, 6);
  const int oh = g.out_size(x.h), ow = g.out_size(x.w);
  FeatureMap<double> r(2, 4, oh, ow);
  r.data = random_matrix(4, 2 * oh * ow, 7);
  auto loss = [&] { return (ops::conv2d(x, w, &b, g).data.array() * r.data.array()).sum(); };
  RowMatrix<double> dw = RowMatrix<double>::Zero(w.rows(), w.cols());
  RowMatrix<double> db = RowMatrix<double>::Zero(1, 4);
  ops::conv2d_backward_params(x, r, g, dw, &db);
  const auto dx = ops::conv2d_backward_input(w, r, g, 3, x.h, x.w);
  EXPECT_LT(relative_error(dw, numeric_gradient(w, loss)), 1e-6);
  EXPECT_LT(relative_error(db, numeric_gradient(b, loss)), 1e-6);
  EXPECT_LT(relative_error(dx.data, numeric_gradient(x.data, loss)), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(KernelStridePad, ConvGeometries,
                         ::testing::Values(ops::ConvGeometry{3, 1, 1}, ops::ConvGeometry{3, 2, 1},
                                           ops::ConvGeometry{1, 1, 0}, ops::ConvGeometry{1, 2, 0},
                                           ops::ConvGeometry{7, 2, 3}, ops::ConvGeometry{2, 2, 0}));

TEST(Pooling, GlobalAverageAndBackward) {
  FeatureMap<double> x = random_map(3, 2, 4, 5, 1);
  const RowMatrix<double> r = random_matrix(3, 2, 2);
  const RowMatrix<double> z = ops::global_avg_pool(x);
  EXPECT_NEAR(z(1, 0), x.data.middleCols(20, 20).row(0).mean(), 1e-14);
  auto loss = [&] { return (ops::global_avg_pool(x).array() * r.array()).sum(); };
  const auto dx = ops::global_avg_pool_backward(r, 4, 5);
  EXPECT_LT(relative_error(dx.data, numeric_gradient(x.data, loss)), 1e-8);
}

TEST(Pooling, MaxPoolBackward) {
  FeatureMap<double> x = random_map(2, 2, 6, 6, 3);
  const ops::ConvGeometry g{3, 2, 1};
  std::vector<Index> arg;
  const auto y = ops::max_pool(x, g, &arg);
  FeatureMap<double> r(2, 2, y.h, y.w);
  r.data = random_matrix(2, 2 * y.h * y.w, 4);
  auto loss = [&] { return (ops::max_pool(x, g, nullptr).data.array() * r.data.array()).sum(); };
  const auto dx = ops::max_pool_backward(r, arg, 6, 6);
  EXPECT_LT(relative_error(dx.data, numeric_gradient(x.data, loss)), 1e-8);
}

TEST(Pooling, PatchAverageIsPiecewiseConstantAndSelfAdjoint) {
  const auto x = random_map(1, 2, 8, 8, 5);
  const auto p = ops::patch_average(x, 4);
  EXPECT_NEAR(p.at(1, 0, 5, 6), x.data.row(1).reshaped<Eigen::RowMajor>(8, 8).block(4, 4, 4, 4).mean(),
              1e-14);
  const auto y = random_map(1, 2, 8, 8, 6);
  EXPECT_NEAR((p.data.array() * y.data.array()).sum(),
              (x.data.array() * ops::patch_average(y, 4).data.array()).sum(), 1e-12);
  EXPECT_EQ(ops::patch_average(x, 1).data, x.data);
}

TEST(Dropout, KeepRateAndScaling) {
  Rng rng(1);
  const auto m = ops::dropout_mask<double>(200, 500, 0.3, rng);
  const double kept = (m.array() > 0).cast<double>().mean();
  EXPECT_NEAR(kept, 0.7, 0.01);
  EXPECT_NEAR(m.maxCoeff(), 1.0 / 0.7, 1e-12);
  EXPECT_NEAR(m.mean(), 1.0, 0.02);
  EXPECT_THROW(ops::dropout_mask<double>(2, 2, 1.0, rng), ConfigError);
}

TEST(Activations, SoftmaxBackward) {
  RowMatrix<double> logits = random_matrix(3, 5, 1, -3, 3);
  const RowMatrix<double> r = random_matrix(3, 5, 2);
  auto loss = [&] { return (ops::softmax_rows(logits).array() * r.array()).sum(); };
  const auto d = ops::softmax_backward<double>(ops::softmax_rows(logits), r);
  EXPECT_LT(relative_error(d, numeric_gradient(logits, loss)), 1e-8);
}

TEST(Activations, LayerNormBackward) {
  RowMatrix<double> x = random_matrix(4, 6, 1);
  const RowMatrix<double> gamma = random_matrix(1, 6, 2, 0.5, 1.5);
  const RowMatrix<double> beta = random_matrix(1, 6, 3);
  const RowMatrix<double> r = random_matrix(4, 6, 4);
  auto loss = [&] {
    return (ops::layer_norm<double>(x, gamma, beta, 1e-6, nullptr, nullptr).array() * r.array())
        .sum();
  };
  RowMatrix<double> hat;
  Vector<double> rstd;
  ops::layer_norm<double>(x, gamma, beta, 1e-6, &hat, &rstd);
  const auto dx = ops::layer_norm_backward<double>(hat, rstd, gamma, r);
  EXPECT_LT(relative_error(dx, numeric_gradient(x, loss)), 1e-7);
}

TEST(Activations, GeluBackward) {
  RowMatrix<double> x = random_matrix(3, 7, 1, -3, 3);
  const RowMatrix<double> r = random_matrix(3, 7, 2);
  auto loss = [&] { return (ops::gelu<double>(x).array() * r.array()).sum(); };
  EXPECT_LT(relative_error(ops::gelu_backward<double>(x, r), numeric_gradient(x, loss)), 1e-8);
  EXPECT_NEAR(ops::gelu<double>(RowMatrix<double>::Constant(1, 1, 1.0))(0, 0), 0.8413447460685429,
              1e-12);
}

TEST(Axes, MeansOverWidthAndHeight) {
  const auto x = random_map(2, 1, 3, 4, 9);
  const auto mh = ops::mean_over_width(x);
  const auto mw = ops::mean_over_height(x);
  EXPECT_NEAR(mh(0, 3 + 1), (x.at(0, 1, 1, 0) + x.at(0, 1, 1, 1) + x.at(0, 1, 1, 2) + x.at(0, 1, 1, 3)) / 4,
              1e-14);
  EXPECT_NEAR(mw(0, 4 + 2), (x.at(0, 1, 0, 2) + x.at(0, 1, 1, 2) + x.at(0, 1, 2, 2)) / 3, 1e-14);
}
