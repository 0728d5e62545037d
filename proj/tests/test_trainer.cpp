#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "test_util.hpp"
#include "virda/artifacts.hpp"
#include "virda/trainer.hpp"

using namespace virda;
using virda::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.passes = 3;
  c.mask_hidden = 4;
  c.vr_depth = 2;
  c.patch_exponent = 3;
  c.disc_hidden = {16};
  c.batch_size = 16;
  c.epochs = 2;
  c.lr_heads = 1e-3;
  c.lr_vr = 1e-3;
  c.eval_batch = 50;
  return c;
}

const SyntheticPair& pair() {
  static const SyntheticPair p = make_synthetic_pair(0, {}, 64, 50);
  return p;
}

FitData fit_data() { return {&pair().source_train, &pair().target_train, &pair().target_test}; }

template <typename S>
StepBatch<S> step_batch(int k, std::uint64_t seed) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), std::size_t{3});
  const Normalization norm = normalization_for(Arch::tiny);
  StepBatch<S> b;
  b.source = load_batch<S>(pair().source_train, idx, norm);
  b.labels = gather_labels(pair().source_train, idx);
  b.target = load_batch<S>(pair().target_train, idx, norm, View::train, seed);
  b.target_strong = load_batch<S>(pair().target_train, idx, norm, View::strong, seed);
  return b;
}

template <typename S>
void randomize_patterns(Model<S>& m, std::uint64_t seed) {
  m.vr_source.pattern.value = random_matrix(3, 32 * 32, seed).cast<S>() * S(0.3);
  m.vr_target.pattern.value = random_matrix(3, 32 * 32, seed + 1).cast<S>() * S(0.3);
}

// Worst relative error of <grad, v> against a central difference along v,
// one random direction per parameter tensor.
double composite_error(Model<double>& model, const ParamList<double>& params,
                       const StepBatch<double>& batch, const TrainConfig& cfg,
                       const LossMask& mask) {
  // lambda = -1 turns the reversal gate into a plain pass-through, so the
  // analytic result is the true gradient of the reported total.
  compute_gradients(model, batch, cfg, mask, 77, -1.0);
  std::vector<RowMatrix<double>> grads;
  for (auto* p : params) grads.push_back(p->grad);
  double worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    const RowMatrix<double> v = random_matrix(p->value.rows(), p->value.cols(), 1000 + i);
    const double analytic = (grads[i].array() * v.array()).sum();
    const RowMatrix<double> keep = p->value;
    const double h = 1e-7;
    p->value = keep + h * v;
    const double up = compute_gradients(model, batch, cfg, mask, 77, -1.0).total;
    p->value = keep - h * v;
    const double down = compute_gradients(model, batch, cfg, mask, 77, -1.0).total;
    p->value = keep;
    const double numeric = (up - down) / (2 * h);
    const double err =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    EXPECT_LT(err, 1e-4) << p->name << " analytic " << analytic << " numeric " << numeric;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST(CompositeGradient, InterDomainObjectivesAllParameters) {
  const auto backbone = make_backbone<double>(Arch::tiny, 1);
  TrainConfig cfg = small_config();
  auto model = build_model(cfg, backbone, 10);
  randomize_patterns(model, 5);
  const auto batch = step_batch<double>(2, 3);
  composite_error(model, model.trainable_parameters(), batch, cfg, LossMask::parse("inter"));
}

TEST(CompositeGradient, FullObjectiveOutsideTheTeacher) {
  const auto backbone = make_backbone<double>(Arch::tiny, 1);
  TrainConfig cfg = small_config();
  cfg.tau = 0.0;  // every row passes the confidence gate
  auto model = build_model(cfg, backbone, 10);
  randomize_patterns(model, 6);
  const auto batch = step_batch<double>(2, 4);
  ParamList<double> params = model.vr_source.parameters();
  for (auto* p : model.cls_target.parameters()) params.push_back(p);
  for (auto* p : model.discriminator.parameters()) params.push_back(p);
  const LossReport r = compute_gradients(model, batch, cfg, LossMask::full(), 77, -1.0);
  EXPECT_EQ(r.kept, 2);
  composite_error(model, params, batch, cfg, LossMask::full());
}

TEST(CompositeGradient, ReversalGateNegatesFeatureSideOnly) {
  const auto backbone = make_backbone<double>(Arch::tiny, 1);
  TrainConfig cfg = small_config();
  auto model = build_model(cfg, backbone, 10);
  randomize_patterns(model, 7);
  const auto batch = step_batch<double>(2, 5);
  const LossMask adv = LossMask::parse("adv");
  compute_gradients(model, batch, cfg, adv, 9, 1.0);
  const RowMatrix<double> vr_pos = model.vr_target.pattern.grad;
  const RowMatrix<double> d_pos = model.discriminator.net.weights[0].grad;
  compute_gradients(model, batch, cfg, adv, 9, 0.5);
  EXPECT_LT((model.vr_target.pattern.grad - 0.5 * vr_pos).norm(), 1e-12 * (1 + vr_pos.norm()));
  EXPECT_EQ(model.discriminator.net.weights[0].grad, d_pos);
  compute_gradients(model, batch, cfg, adv, 9, -1.0);
  EXPECT_LT((model.vr_target.pattern.grad + vr_pos).norm(), 1e-12 * (1 + vr_pos.norm()));
}

TEST(TrainStep, BackboneStaysFrozen) {
  const auto backbone = make_backbone<float>(Arch::tiny, 2);
  const std::string before = backbone.recompute_checksum();
  TrainConfig cfg = small_config();
  auto model = build_model(cfg, backbone, 10);
  auto opt = make_optimizer(model, cfg);
  for (int s = 0; s < 10; ++s) train_step(model, opt, step_batch<float>(8, s), cfg, s);
  EXPECT_EQ(backbone.recompute_checksum(), before);
  EXPECT_EQ(backbone.checksum(), before);
}

TEST(TrainStep, OptimizerHoldsExactlyTheTrainableParameters) {
  const auto backbone = make_backbone<float>(Arch::tiny, 2);
  TrainConfig cfg = small_config();
  auto model = build_model(cfg, backbone, 10);
  auto opt = make_optimizer(model, cfg);
  std::set<const float*> frozen;
  for (const auto& w : backbone.weights()) frozen.insert(w.value.data());
  Index total = 0;
  for (const auto& g : opt.groups())
    for (const auto* p : g.params) {
      EXPECT_EQ(frozen.count(p->value.data()), 0u) << p->name;
      total += p->size();
    }
  EXPECT_EQ(total, count_trainable(model).total);
}

TEST(TrainStep, SupervisedOnlyLeavesTargetSideUntouched) {
  const auto backbone = make_backbone<float>(Arch::tiny, 2);
  TrainConfig cfg = small_config();
  cfg.losses = LossMask::parse("sup");
  auto model = build_model(cfg, backbone, 10);
  auto opt = make_optimizer(model, cfg);
  const auto vr_t = model.vr_target.parameters();
  std::vector<RowMatrix<float>> vr_before, cls_before;
  for (const auto* p : vr_t) vr_before.push_back(p->value);
  for (const auto* p : model.cls_target.parameters()) cls_before.push_back(p->value);
  const RowMatrix<float> src_before = model.cls_source.net.weights[0].value;
  train_step(model, opt, step_batch<float>(8, 1), cfg, 0);
  for (std::size_t i = 0; i < vr_t.size(); ++i) EXPECT_EQ(vr_t[i]->value, vr_before[i]) << vr_t[i]->name;
  const auto cls_t = model.cls_target.parameters();
  for (std::size_t i = 0; i < cls_t.size(); ++i) EXPECT_EQ(cls_t[i]->value, cls_before[i]);
  EXPECT_NE(model.cls_source.net.weights[0].value, src_before);
}

TEST(TrainStep, LossesStayFiniteForHundredSteps) {
  const auto backbone = make_backbone<float>(Arch::tiny, 3);
  TrainConfig cfg = small_config();
  auto model = build_model(cfg, backbone, 10);
  auto opt = make_optimizer(model, cfg);
  for (int s = 0; s < 100; ++s) {
    const LossReport r = train_step(model, opt, step_batch<float>(4, s), cfg, s);
    for (double v : {r.sup, r.adv, r.unc, r.unsup, r.distrib, r.inter, r.intra, r.total})
      ASSERT_TRUE(std::isfinite(v)) << "step " << s;
  }
}

TEST(Model, SameSeedSameInitialParameters) {
  const auto backbone = make_backbone<float>(Arch::tiny, 0);
  TrainConfig cfg = small_config();
  const auto a = build_model(cfg, backbone, 10);
  const auto b = build_model(cfg, backbone, 10);
  EXPECT_EQ(parameter_checksum(a), parameter_checksum(b));
  cfg.seed = 1;
  EXPECT_NE(parameter_checksum(build_model(cfg, backbone, 10)), parameter_checksum(a));
}

TEST(Model, TinyDigitsTrainableBudget) {
  TrainConfig cfg;  // method defaults: depth 6, patch 2^5, hidden 32
  const auto model = build_model<float>(cfg, describe_backbone(Arch::tiny), 10);
  EXPECT_LT(count_trainable(model).total, 500000);
}

TEST(Model, UncertaintyPassesVary) {
  const auto backbone = make_backbone<float>(Arch::tiny, 0);
  TrainConfig cfg;
  auto model = build_model(cfg, backbone, 10);
  model.vr_target.pattern.value.setConstant(0.5f);
  const auto batch = step_batch<float>(4, 0);
  auto pass = [&](Rng& rng) {
    const auto z = backbone.extract_features(model.vr_target.apply(batch.target, true, &rng));
    return model.cls_source.classify(z, true, &rng);
  };
  const auto q = estimate_uncertainty<float>(pass, 8, 3);
  EXPECT_GT(q.var.maxCoeff(), 0.0f);
  for (Index i = 0; i < q.mean.rows(); ++i) EXPECT_NEAR(q.mean.row(i).sum(), 1.0f, 1e-5f);
}

TEST(Schedule, WarmupAndRamp) {
  TrainConfig cfg;
  cfg.intra_warmup_epochs = 2;
  EXPECT_FALSE(effective_mask(cfg, 1).unsup);
  EXPECT_FALSE(effective_mask(cfg, 1).distrib);
  EXPECT_TRUE(effective_mask(cfg, 1).adv);
  EXPECT_TRUE(effective_mask(cfg, 2).unsup);
  EXPECT_DOUBLE_EQ(gate_lambda(cfg, 0.3), 1.0);
  cfg.lambda_ramp = true;
  EXPECT_DOUBLE_EQ(gate_lambda(cfg, 0.0), 0.0);
  EXPECT_NEAR(gate_lambda(cfg, 1.0), grl_ramp(1.0), 1e-15);
}

TEST(Evaluate, RiggedPerfectAndChance) {
  const DomainDataset& ds = pair().target_test;
  const Normalization norm;
  const Predictor<double> perfect = [&](const FeatureMap<double>&,
                                        const std::vector<std::size_t>& idx) {
    RowMatrix<double> p = RowMatrix<double>::Zero(Index(idx.size()), 10);
    for (std::size_t i = 0; i < idx.size(); ++i) p(Index(i), ds.labels[idx[i]]) = 1;
    return p;
  };
  EXPECT_EQ(evaluate(perfect, ds, norm, 7), 1.0);
  const Predictor<double> constant = [](const FeatureMap<double>& x,
                                        const std::vector<std::size_t>&) {
    return RowMatrix<double>(RowMatrix<double>::Constant(x.n, 10, 0.1));
  };
  const double acc = evaluate(constant, ds, norm);
  EXPECT_NEAR(acc, double(ds.class_histogram()[0]) / ds.size(), 1e-12);
}

TEST(Evaluate, InvariantToDatasetOrder) {
  const auto backbone = make_backbone<float>(Arch::tiny, 0);
  TrainConfig cfg = small_config();
  auto model = build_model(cfg, backbone, 10);
  randomize_patterns(model, 3);
  const DomainDataset& ds = pair().target_test;
  DomainDataset shuffled = ds;
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(4);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t per = 32 * 32 * 3;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    shuffled.labels[i] = ds.labels[perm[i]];
    std::copy_n(ds.pixels.begin() + long(perm[i] * per), per, shuffled.pixels.begin() + long(i * per));
  }
  EXPECT_EQ(evaluate(model, ds), evaluate(model, shuffled));
  EXPECT_EQ(evaluate(model, ds), evaluate(model, ds));
}

TEST(Fit, WritesRunDirectoryAndIsReproducible) {
  const auto backbone = make_backbone<float>(Arch::tiny, 0);
  TrainConfig cfg = small_config();
  const fs::path dir = fs::temp_directory_path() / "virda_fit_test";
  fs::remove_all(dir);
  FitOptions opts;
  opts.run_dir = dir;
  opts.run_text = "epochs = 2\n";
  const auto a = fit(cfg, backbone, fit_data(), opts);
  const auto b = fit(cfg, backbone, fit_data());

  EXPECT_EQ(a.steps_per_epoch, 4);
  EXPECT_EQ(a.steps.size(), std::size_t(a.steps_per_epoch * cfg.epochs));
  std::ifstream metrics(dir / "metrics.jsonl");
  int rows = 0;
  for (std::string line; std::getline(metrics, line);) rows += !line.empty();
  EXPECT_EQ(rows, a.steps_per_epoch * cfg.epochs);
  for (const char* f : {"eval.csv", "config.cfg", "summary.json", "source.virda", "target.virda"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  EXPECT_EQ(a.backbone_checksum_before, a.backbone_checksum_after);
  EXPECT_EQ(a.epoch_accuracy, b.epoch_accuracy);
  EXPECT_EQ(parameter_checksum(a.model), parameter_checksum(b.model));
  for (std::size_t s = 0; s < a.steps.size(); ++s) EXPECT_EQ(a.steps[s].total, b.steps[s].total);
  fs::remove_all(dir);
}

TEST(Fit, RejectsMismatchedInputs) {
  const auto backbone = make_backbone<float>(Arch::tiny, 0);
  TrainConfig cfg = small_config();
  cfg.backbone = Arch::resnet18;
  EXPECT_THROW(fit(cfg, backbone, fit_data()), ConfigError);
  cfg.backbone = Arch::tiny;
  FitData missing = fit_data();
  missing.target_train = nullptr;
  EXPECT_THROW(fit(cfg, backbone, missing), ConfigError);
}

TEST(Ablation, GridRowsAndMasks) {
  const auto grid = ablation_grid();
  ASSERT_EQ(grid.size(), 7u);
  EXPECT_EQ(grid.front().second, LossMask::source_only());
  EXPECT_EQ(grid.back().second, LossMask::full());
  EXPECT_EQ(grid[3].second, LossMask::parse("inter"));
  EXPECT_EQ(grid[4].second, LossMask::parse("inter,unsup"));
  EXPECT_EQ(grid[5].second, LossMask::parse("inter,distrib"));
}
