#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"
#include "virda/backbone.hpp"
#include "virda/safetensors.hpp"

using namespace virda;
using virda::testing::random_map;
using virda::testing::random_matrix;

namespace {

// <dL/dx, v> from backward_input against a central difference along v, with
// L = sum(features * r).
double directional_error(const FrozenBackbone<double>& net, const FeatureMap<double>& x,
                         std::uint64_t seed) {
  const RowMatrix<double> r = random_matrix(x.n, net.feature_dim(), seed);
  FeatureMap<double> v = random_map(x.n, x.channels(), x.h, x.w, seed + 1);
  typename FrozenBackbone<double>::Trace trace;
  net.extract_features(x, trace);
  const FeatureMap<double> dx = net.backward_input(trace, r);
  const double analytic = (dx.data.array() * v.data.array()).sum();
  // Small step: ReLU and max-pool kinks sit within 1e-5 of random inputs.
  const double h = 1e-7;
  FeatureMap<double> up = x, down = x;
  up.data += h * v.data;
  down.data -= h * v.data;
  const double numeric = ((net.extract_features(up).array() * r.array()).sum() -
                          (net.extract_features(down).array() * r.array()).sum()) /
                         (2 * h);
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-10});
}

}  // namespace

TEST(Backbone, FrozenParameterCounts) {
  EXPECT_EQ(describe_backbone(Arch::tiny).param_count, 60512);
  EXPECT_EQ(describe_backbone(Arch::resnet18).param_count, 11176512);
  EXPECT_EQ(describe_backbone(Arch::resnet50).param_count, 23508032);
  EXPECT_EQ(describe_backbone(Arch::vit_b32).param_count, 87455232);
  EXPECT_EQ(describe_backbone(Arch::resnet18).feature_dim, 512);
  EXPECT_EQ(describe_backbone(Arch::resnet50).feature_dim, 2048);
  EXPECT_EQ(describe_backbone(Arch::vit_b32).feature_dim, 768);
}

TEST(Backbone, ReportsNoTrainableParameters) {
  const auto net = make_backbone<float>(Arch::tiny, 0);
  EXPECT_TRUE(net.frozen());
  EXPECT_EQ(net.trainable_count(), 0);
}

TEST(Backbone, SeededBuildsShareChecksum) {
  const auto a = make_backbone<float>(Arch::tiny, 3);
  const auto b = make_backbone<float>(Arch::tiny, 3);
  const auto c = make_backbone<float>(Arch::tiny, 4);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
  EXPECT_EQ(a.checksum(), a.recompute_checksum());
}

TEST(Backbone, ArchNamesRoundTrip) {
  for (Arch a : {Arch::tiny, Arch::resnet18, Arch::resnet50, Arch::vit_b32})
    EXPECT_EQ(parse_arch(to_string(a)), a);
  EXPECT_THROW(parse_arch("vgg16"), ConfigError);
}

TEST(Backbone, RejectsWrongInputShape) {
  const auto net = make_backbone<double>(Arch::tiny, 0);
  EXPECT_THROW(net.extract_features(random_map(1, 3, 16, 16, 1)), ConfigError);
  EXPECT_THROW(net.extract_features(random_map(1, 1, 32, 32, 1)), ConfigError);
}

TEST(Backbone, WeightFileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "virda_backbone_test";
  std::filesystem::create_directories(dir);
  const auto net = make_backbone<float>(Arch::tiny, 9);
  save_backbone_weights(net, dir / "tiny.safetensors");
  const auto back = load_backbone<float>(Arch::tiny, dir / "tiny.safetensors");
  EXPECT_EQ(back.checksum(), net.checksum());
  EXPECT_THROW(load_backbone<float>(Arch::resnet18, dir / "tiny.safetensors"), ConfigError);
  EXPECT_THROW(load_backbone<float>(Arch::tiny, dir / "missing.safetensors"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(Backbone, MissingTensorIsReported) {
  TensorArchive archive;
  archive.metadata["arch"] = "tiny";
  archive.add<float>("features.0.weight", RowMatrix<float>::Zero(16, 27), {16, 3, 3, 3});
  EXPECT_THROW(backbone_from_archive<float>(Arch::tiny, archive), ConfigError);
}

TEST(Backbone, FloatAndDoubleAgree) {
  const auto f = make_backbone<float>(Arch::tiny, 2);
  const auto d = make_backbone<double>(Arch::tiny, 2);
  const auto x = random_map(2, 3, 32, 32, 5);
  const RowMatrix<double> zf = f.extract_features(x.cast<float>()).cast<double>();
  const RowMatrix<double> zd = d.extract_features(x);
  EXPECT_LT((zf - zd).norm() / zd.norm(), 1e-5);
}

TEST(BackboneGradient, TinyInput) {
  const auto net = make_backbone<double>(Arch::tiny, 1);
  const auto x = random_map(2, 3, 32, 32, 2);
  for (std::uint64_t s = 0; s < 3; ++s) EXPECT_LT(directional_error(net, x, 10 * s), 1e-5);
}

TEST(BackboneGradient, ResNet18Input) {
  const auto net = make_backbone<double>(Arch::resnet18, 1);
  const auto x = random_map(1, 3, 32, 32, 3);
  for (std::uint64_t s = 0; s < 2; ++s) EXPECT_LT(directional_error(net, x, 10 * s), 1e-5);
}

TEST(BackboneGradient, ResNet50Input) {
  const auto net = make_backbone<double>(Arch::resnet50, 1);
  EXPECT_LT(directional_error(net, random_map(1, 3, 32, 32, 4), 7), 1e-5);
}

TEST(BackboneGradient, VitB32Input) {
  const auto net = make_backbone<double>(Arch::vit_b32, 1);
  EXPECT_LT(directional_error(net, random_map(1, 3, 224, 224, 5), 8), 1e-5);
}
