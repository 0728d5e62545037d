#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"
#include "virda/reprogram.hpp"

using namespace virda;
using virda::testing::numeric_gradient;
using virda::testing::random_map;
using virda::testing::random_matrix;
using virda::testing::relative_error;
using virda::testing::worst_param_error;

namespace {

VRConfig small_config(int patch_exponent = 1) {
  VRConfig c;
  c.height = 8;
  c.width = 8;
  c.depth = 3;
  c.hidden_width = 4;
  c.patch_exponent = patch_exponent;
  c.mask_dropout = 0.5;
  return c;
}

VRLayer<double> randomized_layer(const VRConfig& c, std::uint64_t seed) {
  VRLayer<double> layer(Domain::target, c, seed);
  layer.pattern.value = random_matrix(c.channels, Index(c.height) * c.width, seed + 1);
  // Move the attention maps away from saturation so their gradients are not tiny.
  layer.coord.proj_h_bias.value.setConstant(0.3);
  layer.coord.proj_w_bias.value.setConstant(-0.2);
  return layer;
}

}  // namespace

TEST(CoordAttention, WorkedTwoByTwoExample) {
  FeatureMap<double> x(1, 1, 2, 2);
  x.at(0, 0, 0, 0) = 1;
  x.at(0, 0, 0, 1) = 2;
  x.at(0, 0, 1, 0) = 3;
  x.at(0, 0, 1, 1) = 4;
  RowMatrix<double> a_h(1, 2), a_w(1, 2);
  a_h << 0.5, 1.0;
  a_w << 1.0, 0.5;
  const auto y = coord_modulate(x, a_h, a_w);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 0), 3.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), 2.0);
}

TEST(CoordAttention, UnitMapsAreIdentity) {
  const auto x = random_map(2, 3, 4, 5, 7);
  const RowMatrix<double> ones_h = RowMatrix<double>::Ones(3, 2 * 4);
  const RowMatrix<double> ones_w = RowMatrix<double>::Ones(3, 2 * 5);
  EXPECT_EQ(coord_modulate(x, ones_h, ones_w).data, x.data);
}

TEST(CoordAttention, MapsLieInOpenUnitInterval) {
  Rng rng(3);
  CoordAttention<double> ca(3, 8, 8, 8, rng);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto maps = ca.attention(random_map(2, 3, 8, 8, s, -5, 5));
    EXPECT_GT(maps.a_h.minCoeff(), 0.0);
    EXPECT_LT(maps.a_h.maxCoeff(), 1.0);
    EXPECT_GT(maps.a_w.minCoeff(), 0.0);
    EXPECT_LT(maps.a_w.maxCoeff(), 1.0);
  }
}

TEST(CoordAttention, RejectsWrongShape) {
  Rng rng(3);
  CoordAttention<double> ca(3, 8, 8, 8, rng);
  EXPECT_THROW(ca.attention(random_map(1, 3, 8, 6, 1)), ConfigError);
}

TEST(MaskProducer, ValuesInUnitIntervalAndPatchConstant) {
  for (int e = 1; e <= 5; ++e) {
    VRConfig c;
    c.height = 32;
    c.width = 32;
    c.depth = 2;
    c.hidden_width = 4;
    c.patch_exponent = e;
    Rng init(static_cast<std::uint64_t>(e));
    MaskProducer<double> mp(c, init);
    Rng rng(11);
    const auto m = mp.produce(random_map(2, 3, 32, 32, 100 + e), true, &rng);
    ASSERT_GE(m.data.minCoeff(), 0.0);
    ASSERT_LE(m.data.maxCoeff(), 1.0);
    const int p = 1 << e;
    for (int ch = 0; ch < 3; ++ch)
      for (int i = 0; i < 2; ++i)
        for (int y = 0; y < 32; ++y)
          for (int x = 0; x < 32; ++x)
            ASSERT_EQ(m.at(ch, i, y, x), m.at(ch, i, y / p * p, x / p * p))
                << "patch exponent " << e;
  }
}

TEST(MaskProducer, RejectsIndivisibleImage) {
  VRConfig c = small_config(2);
  Rng init(1);
  MaskProducer<double> mp(c, init);
  EXPECT_THROW(mp.produce(random_map(1, 3, 6, 6, 1), false, nullptr), ConfigError);
}

TEST(MaskProducer, StochasticNeedsGenerator) {
  VRConfig c = small_config();
  Rng init(1);
  MaskProducer<double> mp(c, init);
  EXPECT_THROW(mp.produce(random_map(1, 3, 8, 8, 1), true, nullptr), ConfigError);
}

TEST(VRLayer, DeterministicWhenNotStochastic) {
  const VRConfig c = small_config();
  const auto layer = randomized_layer(c, 5);
  const auto x = random_map(3, 3, 8, 8, 9);
  Rng a(1), b(2);
  EXPECT_EQ(layer.apply(x, false, &a).data, layer.apply(x, false, &b).data);
  EXPECT_EQ(layer.apply(x, false, nullptr).data, layer.apply(x, false, &a).data);
}

TEST(VRLayer, StochasticPassesDiffer) {
  const VRConfig c = small_config();
  const auto layer = randomized_layer(c, 5);
  const auto x = random_map(1, 3, 8, 8, 9);
  Rng rng(4);
  int differ = 0;
  for (int t = 0; t < 100; ++t)
    if (layer.apply(x, true, &rng).data != layer.apply(x, true, &rng).data) ++differ;
  EXPECT_GE(differ, 95);
}

TEST(VRLayer, ZeroPatternAndUnitMapsGiveIdentity) {
  VRConfig c = small_config();
  c.use_coord = false;
  VRLayer<double> layer(Domain::source, c, 3);
  const auto x = random_map(2, 3, 8, 8, 1);
  EXPECT_EQ(layer.apply(x, false, nullptr).data, x.data);
}

TEST(VRLayer, ParameterCountMatchesEnumeration) {
  VRConfig c;
  c.height = 32;
  c.width = 32;
  c.depth = 4;
  c.hidden_width = 16;
  VRLayer<float> layer(Domain::source, c, 0);
  const Index pattern = 3 * 32 * 32;
  const Index mask = (3 * 9 * 16 + 16) + 2 * (16 * 9 * 16 + 16) + (16 * 9 * 3 + 3);
  const Index coord = (8 * 3 + 8) + 2 * (3 * 8 + 3);
  EXPECT_EQ(vr_param_count(layer), pattern + mask + coord);
  c.use_coord = false;
  VRLayer<float> plain(Domain::source, c, 0);
  EXPECT_EQ(vr_param_count(plain), pattern + mask);
}

TEST(VRLayer, SeedsReproduceParameters) {
  const VRConfig c = small_config();
  VRLayer<float> a(Domain::source, c, 42), b(Domain::source, c, 42), d(Domain::source, c, 43);
  EXPECT_EQ(a.mask.weights[0].value, b.mask.weights[0].value);
  EXPECT_NE(a.mask.weights[0].value, d.mask.weights[0].value);
}

TEST(VRLayer, ParameterNamesAreUnique) {
  const VRLayer<float> layer(Domain::source, small_config(), 0);
  std::set<std::string> names;
  for (const auto* p : layer.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
}

class VRGradient : public ::testing::TestWithParam<bool> {};

TEST_P(VRGradient, MatchesFiniteDifferences) {
  VRConfig c = small_config();
  c.use_coord = GetParam();
  auto layer = randomized_layer(c, 21);
  FeatureMap<double> x = random_map(2, 3, 8, 8, 22);
  const RowMatrix<double> r = random_matrix(3, 2 * 64, 23);
  auto loss = [&]() {
    Rng rng(99);
    return (layer.apply(x, true, &rng).data.array() * r.array()).sum();
  };
  typename VRLayer<double>::Trace trace;
  Rng rng(99);
  layer.apply(x, true, &rng, &trace);
  zero_grads(layer.parameters());
  FeatureMap<double> dout(2, 3, 8, 8);
  dout.data = r;
  const FeatureMap<double> dx = layer.backward(trace, dout);

  EXPECT_LT(worst_param_error(layer.parameters(), loss), 1e-4);
  EXPECT_LT(relative_error(dx.data, numeric_gradient(x.data, loss)), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(WithAndWithoutCoord, VRGradient, ::testing::Bool());

TEST(VRLayer, ParameterGradientsAccumulate) {
  auto layer = randomized_layer(small_config(), 2);
  const auto x = random_map(1, 3, 8, 8, 3);
  FeatureMap<double> dout(1, 3, 8, 8);
  dout.data = random_matrix(3, 64, 4);
  typename VRLayer<double>::Trace trace;
  layer.apply(x, false, nullptr, &trace);
  zero_grads(layer.parameters());
  layer.backward(trace, dout);
  const RowMatrix<double> once = layer.pattern.grad;
  layer.backward(trace, dout);
  EXPECT_LT((layer.pattern.grad - 2 * once).norm(), 1e-12);
}
