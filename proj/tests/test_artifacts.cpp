#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <opencv2/imgcodecs.hpp>

#include "param_oracle.hpp"
#include "test_util.hpp"
#include "virda/artifacts.hpp"
#include "virda/safetensors.hpp"
#include "virda/trainer.hpp"

using namespace virda;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

TrainConfig small_config() {
  TrainConfig c;
  c.passes = 2;
  c.mask_hidden = 4;
  c.vr_depth = 3;
  c.patch_exponent = 2;
  c.disc_hidden = {16};
  c.classifier_hidden = {12};
  return c;
}

const SyntheticPair& pair() {
  static const SyntheticPair p = make_synthetic_pair(2, {}, 32, 60);
  return p;
}

Predictor<float> slice_predictor(const DomainSlice<float>& slice, const FrozenBackbone<float>& bb) {
  return [&](const FeatureMap<float>& x, const std::vector<std::size_t>&) {
    return slice.predict(x, bb);
  };
}

}  // namespace

TEST(Artifact, RoundTripIsExact) {
  TempDir dir("virda_artifact_rt");
  const auto backbone = make_backbone<float>(Arch::tiny, 4);
  TrainConfig cfg = small_config();
  auto model = build_model(cfg, backbone, 10);
  auto opt = make_optimizer(model, cfg);
  // move the parameters off their initial values
  const Normalization norm = normalization_for(Arch::tiny);
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  StepBatch<float> b{load_batch<float>(pair().source_train, idx, norm),
                     gather_labels(pair().source_train, idx),
                     load_batch<float>(pair().target_train, idx, norm),
                     load_batch<float>(pair().target_train, idx, norm, View::strong, 1)};
  for (int s = 0; s < 3; ++s) train_step(model, opt, b, cfg, s);

  for (Domain d : {Domain::source, Domain::target}) {
    const fs::path file = dir.path / (to_string(d) + kArtifactExtension);
    save_artifact(model, d, file, "epochs = 1\n", R"({"acc": 0.5})");
    const auto slice = load_artifact(file, backbone);
    EXPECT_EQ(slice.domain, d);
    EXPECT_EQ(slice.metadata.at("config"), "epochs = 1\n");
    const auto a = model.vr(d).parameters();
    const auto c = slice.vr.parameters();
    ASSERT_EQ(a.size(), c.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, c[i]->value) << a[i]->name;

    const EvalRoute route{d == Domain::source ? EvalRoute::Vr::source : EvalRoute::Vr::target, d};
    const double before = evaluate(model, pair().target_test, route);
    const double after = evaluate(slice_predictor(slice, backbone), pair().target_test, norm);
    EXPECT_EQ(before, after);
    const auto x = load_batch<float>(pair().target_test, idx, norm);
    EXPECT_EQ(model.predict(x, route), slice.predict(x, backbone));
  }
}

TEST(Artifact, RefusesAnotherBackbone) {
  TempDir dir("virda_artifact_refuse");
  const auto backbone = make_backbone<float>(Arch::tiny, 4);
  const auto other = make_backbone<float>(Arch::tiny, 5);
  auto model = build_model(small_config(), backbone, 10);
  const fs::path file = dir.path / "t.virda";
  save_artifact(model, Domain::target, file);
  EXPECT_NO_THROW(load_artifact(file, backbone));
  try {
    load_artifact(file, other);
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_artifact(dir.path / "missing.virda", backbone), ArtifactError);
}

TEST(Artifact, RejectsForeignFiles) {
  TempDir dir("virda_artifact_foreign");
  const auto backbone = make_backbone<float>(Arch::tiny, 4);
  TensorArchive weights;
  for (const auto& w : backbone.weights()) weights.add(w.name, w.value);
  write_safetensors(dir.path / "w.safetensors", weights);
  EXPECT_THROW(load_artifact(dir.path / "w.safetensors", backbone), ArtifactError);
  std::ofstream(dir.path / "junk.virda") << "not an archive";
  EXPECT_THROW(load_artifact(dir.path / "junk.virda", backbone), ArtifactError);
}

TEST(Artifact, HeadOnlyArtifactHasNoVr) {
  TempDir dir("virda_artifact_head");
  const auto backbone = make_backbone<float>(Arch::tiny, 4);
  auto model = build_model(small_config(), backbone, 10);
  const fs::path full = dir.path / "full.virda", head = dir.path / "head.virda";
  save_artifact(model, Domain::source, full);
  save_artifact(model, Domain::source, head, "", "{}", false);
  EXPECT_FALSE(load_artifact(head, backbone).has_vr);
  EXPECT_LT(fs::file_size(head), fs::file_size(full));
}

TEST(ParamCount, MatchesClosedFormEnumeration) {
  for (Arch arch : {Arch::tiny, Arch::resnet18, Arch::resnet50, Arch::vit_b32}) {
    for (bool coord : {true, false}) {
      TrainConfig cfg;
      cfg.use_coord = coord;
      if (arch == Arch::tiny) cfg.classifier_hidden = {64, 32};
      const BackboneInfo info = describe_backbone(arch);
      const auto model = build_model<float>(cfg, info, 31);
      const ParamReport r = count_trainable(model);
      const auto o = virda::testing::oracle_counts(cfg, info, 31);
      EXPECT_EQ(r.total, o.total()) << to_string(arch) << " coord " << coord;
      EXPECT_EQ(r.get("source.pattern"), o.pattern);
      EXPECT_EQ(r.get("target.mask_producer"), o.mask);
      EXPECT_EQ(r.get("discriminator"), o.discriminator);
      EXPECT_EQ(r.backbone_trainable, 0);
      EXPECT_EQ(r.backbone_frozen, info.param_count);
    }
  }
}

TEST(ParamCount, VitDefaultsInPublishedRange) {
  TrainConfig cfg;
  cfg.vr_depth = 6;
  cfg.patch_exponent = 5;
  const auto model = build_model<float>(cfg, describe_backbone(Arch::vit_b32), 31);
  const Index total = count_trainable(model).total;
  EXPECT_GE(total, 1000000);
  EXPECT_LE(total, 2000000);
}

TEST(MaskExport, WritesGrid) {
  TempDir dir("virda_masks");
  const auto backbone = make_backbone<float>(Arch::tiny, 4);
  auto model = build_model(small_config(), backbone, 10);
  const auto before = model;
  model.vr_target.pattern.value.setConstant(0.4f);
  std::vector<MaskSample> samples;
  for (std::size_t i = 0; i < 3; ++i) {
    samples.push_back({Domain::source, pair().source_test.image(i)});
    samples.push_back({Domain::target, pair().target_test.image(i)});
  }
  const fs::path png = dir.path / "masks.png";
  const MaskGrid g = export_masks(model, samples, png, normalization_for(Arch::tiny), &before);
  EXPECT_EQ(g.rows, 12);
  EXPECT_EQ(g.cols, 3);
  const cv::Mat img = cv::imread(png.string());
  ASSERT_FALSE(img.empty());
  EXPECT_EQ(img.rows, g.rows * g.cell);
  EXPECT_EQ(img.cols, g.cols * g.cell);
  EXPECT_THROW(export_masks(model, {}, png, Normalization{}), ConfigError);
}
