#include "virda/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "virda/artifacts.hpp"

namespace virda {

LossMask effective_mask(const TrainConfig& cfg, int epoch) {
  LossMask m = cfg.losses;
  if (epoch < cfg.intra_warmup_epochs) {
    m.unsup = false;
    m.distrib = false;
  }
  return m;
}

double gate_lambda(const TrainConfig& cfg, double progress) {
  return cfg.lambda_ramp ? cfg.lambda * grl_ramp(progress) : cfg.lambda;
}

namespace {

// One stochastic trip through VR -> backbone -> (classifier).
template <typename Scalar>
struct Pass {
  Domain vr_domain = Domain::source;
  typename VRLayer<Scalar>::Trace vr;
  typename FrozenBackbone<Scalar>::Trace backbone;
  RowMatrix<Scalar> z;
  Domain head = Domain::source;
  bool classified = false;
  typename Classifier<Scalar>::Trace cls;
  RowMatrix<Scalar> dprobs;  // accumulated dL/dprobs
  RowMatrix<Scalar> dz;      // accumulated dL/dz from outside the classifier
};

template <typename Scalar>
void run_pass(Model<Scalar>& model, const FeatureMap<Scalar>& x, Pass<Scalar>& pass, Rng& rng,
              bool classify) {
  const FeatureMap<Scalar> reprogrammed = model.vr(pass.vr_domain).apply(x, true, &rng, &pass.vr);
  pass.z = model.backbone->extract_features(reprogrammed, pass.backbone);
  pass.dz = RowMatrix<Scalar>::Zero(pass.z.rows(), pass.z.cols());
  if (classify) {
    model.classifier(pass.head).classify(pass.z, true, &rng, &pass.cls);
    pass.classified = true;
    pass.dprobs = RowMatrix<Scalar>::Zero(pass.cls.probs.rows(), pass.cls.probs.cols());
  }
}

template <typename Scalar>
void backprop_pass(Model<Scalar>& model, Pass<Scalar>& pass) {
  RowMatrix<Scalar> dz = pass.dz;
  if (pass.classified) dz += model.classifier(pass.head).backward(pass.cls, pass.dprobs);
  const FeatureMap<Scalar> dx = model.backbone->backward_input(pass.backbone, dz);
  model.vr(pass.vr_domain).backward(pass.vr, dx);
}

template <typename Scalar>
std::vector<RowMatrix<Scalar>> pass_probs(const std::vector<Pass<Scalar>>& passes) {
  std::vector<RowMatrix<Scalar>> out;
  out.reserve(passes.size());
  for (const auto& p : passes) out.push_back(p.cls.probs);
  return out;
}

}  // namespace

template <typename Scalar>
LossReport compute_gradients(Model<Scalar>& model, const StepBatch<Scalar>& batch,
                             const TrainConfig& cfg, const LossMask& mask,
                             std::uint64_t step_seed, double lambda) {
  if (model.backbone == nullptr) throw ConfigError("model was built without a backbone");
  zero_grads(model.trainable_parameters());
  const LossWeights& w = cfg.weights;
  const auto sw = [](double v) { return static_cast<Scalar>(v); };
  LossParts parts;

  if (!mask.use_vr) {
    if (mask.any_target() || !mask.sup)
      throw ConfigError("without reprogramming only the supervised objective applies");
    Rng rng(derive_seed(step_seed, 0, 0));
    const RowMatrix<Scalar> z = model.backbone->extract_features(batch.source);
    typename Classifier<Scalar>::Trace trace;
    model.cls_source.classify(z, true, &rng, &trace);
    RowMatrix<Scalar> dprobs;
    parts.sup = static_cast<double>(loss_sup(trace.probs, batch.labels, &dprobs));
    LossReport report = total_losses(parts, mask, w);
    model.cls_source.backward(trace, dprobs * sw(w.sup));
    return report;
  }

  const int m = cfg.passes;
  const int n_source = mask.unc ? m : ((mask.sup || mask.adv) ? 1 : 0);
  const int n_target = mask.unc ? m : (mask.adv ? 1 : 0);
  if (mask.any_target() && batch.target.n == 0)
    throw ConfigError("target objectives need a target batch");

  std::vector<Pass<Scalar>> source(static_cast<std::size_t>(n_source));
  std::vector<Pass<Scalar>> target(static_cast<std::size_t>(n_target));
  for (int i = 0; i < n_source; ++i) {
    auto& p = source[static_cast<std::size_t>(i)];
    p.vr_domain = Domain::source;
    p.head = Domain::source;
    Rng rng(derive_seed(step_seed, 0, static_cast<std::uint64_t>(i)));
    run_pass(model, batch.source, p, rng, mask.sup || mask.unc);
  }
  for (int i = 0; i < n_target; ++i) {
    auto& p = target[static_cast<std::size_t>(i)];
    p.vr_domain = Domain::target;
    p.head = Domain::source;
    Rng rng(derive_seed(step_seed, 1, static_cast<std::uint64_t>(i)));
    run_pass(model, batch.target, p, rng, mask.unc);
  }

  if (mask.sup) {
    RowMatrix<Scalar> d;
    parts.sup = static_cast<double>(loss_sup(source[0].cls.probs, batch.labels, &d));
    source[0].dprobs += d * sw(w.sup);
  }

  typename DomainDiscriminator<Scalar>::Trace disc_s, disc_t;
  Vector<Scalar> dd_s, dd_t;
  if (mask.adv) {
    const Vector<Scalar> d_s = model.discriminator.discriminate(model.grl.forward(source[0].z), &disc_s);
    const Vector<Scalar> d_t = model.discriminator.discriminate(model.grl.forward(target[0].z), &disc_t);
    parts.adv = static_cast<double>(loss_adv(d_s, d_t, &dd_s, &dd_t));
  }

  if (mask.unc) {
    const auto ps = pass_probs(source);
    const auto pt = pass_probs(target);
    const auto qs = summarize_passes(ps);
    const auto qt = summarize_passes(pt);
    UncertaintyGrad<Scalar> gs, gt;
    parts.unc = static_cast<double>(loss_unc(qs, qt, &gs, &gt, cfg.aggregate_unc));
    gs.dmean *= sw(w.unc);
    gs.dvar *= sw(w.unc);
    gt.dmean *= sw(w.unc);
    gt.dvar *= sw(w.unc);
    const auto ds = summarize_passes_backward(ps, qs, gs);
    const auto dt = summarize_passes_backward(pt, qt, gt);
    for (std::size_t i = 0; i < source.size(); ++i) source[i].dprobs += ds[i];
    for (std::size_t i = 0; i < target.size(); ++i) target[i].dprobs += dt[i];
  }

  Pass<Scalar> strong;
  RowMatrix<Scalar> dstrong;
  if (mask.any_intra()) {
    if (batch.target_strong.n == 0)
      throw ConfigError("intra-domain objectives need a strongly augmented target batch");
    // Teacher: deterministic target reprogramming through the source head.
    const RowMatrix<Scalar> z_weak =
        model.backbone->extract_features(model.vr_target.apply(batch.target, false, nullptr));
    const RowMatrix<Scalar> p_weak = model.cls_source.classify(z_weak, false);

    strong.vr_domain = Domain::target;
    strong.head = Domain::target;
    Rng rng(derive_seed(step_seed, 2, 0));
    run_pass(model, batch.target_strong, strong, rng, true);
    if (mask.distrib) {
      RowMatrix<Scalar> d;
      parts.distrib = static_cast<double>(loss_distrib(p_weak, strong.cls.probs, &d));
      strong.dprobs += d * sw(w.distrib);
    }
    if (mask.unsup) {
      RowMatrix<Scalar> d;
      const auto r = loss_unsup(p_weak, strong.cls.probs, cfg.tau, &d);
      parts.unsup = static_cast<double>(r.value);
      parts.kept = r.kept;
      strong.dprobs += d * sw(w.unsup);
    }
  }

  // Fails before any parameter gradient is written.
  LossReport report = total_losses(parts, mask, w);

  if (mask.adv) {
    const RowMatrix<Scalar> dz_s = model.discriminator.backward(disc_s, dd_s * sw(w.adv));
    const RowMatrix<Scalar> dz_t = model.discriminator.backward(disc_t, dd_t * sw(w.adv));
    model.grl.lambda = lambda;
    source[0].dz += model.grl.backward(dz_s);
    target[0].dz += model.grl.backward(dz_t);
  }
  for (auto& p : source) backprop_pass(model, p);
  for (auto& p : target) backprop_pass(model, p);
  if (mask.any_intra()) backprop_pass(model, strong);
  return report;
}

template <typename Scalar>
LossReport train_step(Model<Scalar>& model, AdamW<Scalar>& optimizer,
                      const StepBatch<Scalar>& batch, const TrainConfig& cfg, int step, int epoch,
                      double progress) {
  const LossMask mask = effective_mask(cfg, epoch);
  const std::uint64_t step_seed = derive_seed(cfg.seed, 101, static_cast<std::uint64_t>(step));
  LossReport report =
      compute_gradients(model, batch, cfg, mask, step_seed, gate_lambda(cfg, progress));
  const auto active = model.active_parameters(mask);
  optimizer.step(&active);
  return report;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
RowMatrix<Scalar> predict_dataset(const Predictor<Scalar>& predictor, const DomainDataset& ds,
                                  const Normalization& norm, int batch) {
  if (batch <= 0) throw ConfigError("evaluation batch size must be positive");
  RowMatrix<Scalar> out;
  const std::size_t n = ds.size();
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + static_cast<std::size_t>(batch)); ++i)
      idx.push_back(i);
    const RowMatrix<Scalar> p = predictor(load_batch<Scalar>(ds, idx, norm), idx);
    if (p.rows() != static_cast<Index>(idx.size()))
      throw ConfigError("predictor returned the wrong number of rows");
    if (out.size() == 0) out.resize(static_cast<Index>(n), p.cols());
    out.middleRows(static_cast<Index>(start), p.rows()) = p;
  }
  return out;
}

template <typename Scalar>
double evaluate(const Predictor<Scalar>& predictor, const DomainDataset& ds,
                const Normalization& norm, int batch) {
  if (!ds.has_labels()) throw DataError("cannot evaluate on unlabelled dataset '" + ds.name + "'");
  if (ds.size() == 0) throw DataError("cannot evaluate on empty dataset '" + ds.name + "'");
  const RowMatrix<Scalar> probs = predict_dataset(predictor, ds, norm, batch);
  std::size_t correct = 0;
  for (Index i = 0; i < probs.rows(); ++i)
    if (argmax_row(probs.row(i)) == ds.labels[static_cast<std::size_t>(i)]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

template <typename Scalar>
double evaluate(const Model<Scalar>& model, const DomainDataset& ds, const EvalRoute& route,
                int batch) {
  const Predictor<Scalar> predictor = [&](const FeatureMap<Scalar>& x,
                                          const std::vector<std::size_t>&) {
    return model.predict(x, route);
  };
  return evaluate(predictor, ds, normalization_for(model.backbone_info.arch), batch);
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json step_json(int step, int epoch, const LossReport& r) {
  const auto part = [&](bool on, double v) { return on ? nlohmann::json(v) : nlohmann::json(); };
  return {{"step", step},
          {"epoch", epoch},
          {"sup", part(r.mask.sup, r.sup)},
          {"adv", part(r.mask.adv, r.adv)},
          {"unc", part(r.mask.unc, r.unc)},
          {"unsup", part(r.mask.unsup, r.unsup)},
          {"distrib", part(r.mask.distrib, r.distrib)},
          {"inter", r.inter},
          {"intra", r.intra},
          {"total", r.total},
          {"kept", r.kept}};
}

}  // namespace

template <typename Scalar>
AdaptationRun<Scalar> fit(const TrainConfig& cfg, const FrozenBackbone<Scalar>& backbone,
                          const FitData& data, const FitOptions& options) {
  cfg.validate();
  if (cfg.backbone != backbone.arch())
    throw ConfigError("configured backbone " + to_string(cfg.backbone) + " but got " +
                      to_string(backbone.arch()));
  if (data.source_train == nullptr) throw ConfigError("fit needs a labelled source dataset");
  const DomainDataset& src = *data.source_train;
  if (!src.has_labels()) throw DataError("source dataset '" + src.name + "' is unlabelled");
  const bool needs_target = cfg.losses.any_target();
  if (needs_target && data.target_train == nullptr)
    throw ConfigError("target objectives need a target training set");
  if (data.target_test == nullptr) throw ConfigError("fit needs a labelled target test set");
  if (needs_target) require_shared_label_space(src, *data.target_train);
  require_shared_label_space(src, *data.target_test);

  const auto t0 = std::chrono::steady_clock::now();
  AdaptationRun<Scalar> run;
  run.config = cfg;
  run.seed = cfg.seed;
  run.backbone_checksum_before = backbone.recompute_checksum();

  Model<Scalar> model = build_model(cfg, backbone, src.num_classes());
  AdamW<Scalar> optimizer = make_optimizer(model, cfg);
  const Normalization norm = normalization_for(backbone.arch());
  const EvalRoute route = eval_route(cfg.losses);

  const std::size_t nt = needs_target ? data.target_train->size() : src.size();
  PairedBatchStream stream(src.size(), nt, cfg.batch_size, derive_seed(cfg.seed, 21));
  run.steps_per_epoch = stream.steps_per_epoch();
  const int total_steps = cfg.epochs * run.steps_per_epoch;

  std::ofstream metrics, eval_csv;
  if (options.run_dir) {
    std::filesystem::create_directories(*options.run_dir);
    metrics.open(*options.run_dir / "metrics.jsonl");
    eval_csv.open(*options.run_dir / "eval.csv");
    eval_csv << "epoch,accuracy\n";
    std::ofstream(*options.run_dir / "config.cfg") << options.run_text;
  }

  for (int step = 0; step < total_steps; ++step) {
    const int epoch = step / run.steps_per_epoch;
    const auto pair = stream.next();
    StepBatch<Scalar> batch;
    batch.source = load_batch<Scalar>(src, pair.source, norm,
                                      cfg.source_train_aug ? View::train : View::plain,
                                      derive_seed(cfg.seed, 31, static_cast<std::uint64_t>(step)),
                                      cfg.augment);
    batch.labels = gather_labels(src, pair.source);
    const LossMask mask = effective_mask(cfg, epoch);
    if (mask.any_target()) {
      // Weak and strong views share the crop drawn from the same seed.
      const std::uint64_t tseed = derive_seed(cfg.seed, 32, static_cast<std::uint64_t>(step));
      batch.target = load_batch<Scalar>(*data.target_train, pair.target, norm, View::train, tseed,
                                        cfg.augment);
      if (mask.any_intra())
        batch.target_strong = load_batch<Scalar>(*data.target_train, pair.target, norm,
                                                 View::strong, tseed, cfg.augment);
    }
    const double progress = total_steps > 1 ? double(step) / double(total_steps - 1) : 0.0;
    run.steps.push_back(train_step(model, optimizer, batch, cfg, step, epoch, progress));
    if (metrics.is_open()) metrics << step_json(step, epoch, run.steps.back()).dump() << "\n";

    const bool epoch_end = (step + 1) % run.steps_per_epoch == 0;
    const bool last = step + 1 == total_steps;
    if (epoch_end && (options.evaluate_each_epoch || last)) {
      const double acc = evaluate(model, *data.target_test, route, cfg.eval_batch);
      run.epoch_accuracy.push_back(acc);
      if (eval_csv.is_open()) eval_csv << epoch << "," << acc << "\n" << std::flush;
      if (options.on_epoch) options.on_epoch(epoch, acc);
    }
  }
  if (run.epoch_accuracy.empty())
    run.epoch_accuracy.push_back(evaluate(model, *data.target_test, route, cfg.eval_batch));
  run.final_accuracy = run.epoch_accuracy.back();
  run.backbone_checksum_after = backbone.recompute_checksum();

  if (options.run_dir) {
    const nlohmann::json summary = {{"final_accuracy", run.final_accuracy},
                                    {"epochs", cfg.epochs},
                                    {"steps", total_steps},
                                    {"losses", cfg.losses.str()},
                                    {"seed", cfg.seed}};
    for (Domain d : {Domain::source, Domain::target}) {
      const auto path = *options.run_dir / (to_string(d) + kArtifactExtension);
      save_artifact(model, d, path, options.run_text, summary.dump(), cfg.losses.use_vr);
      run.artifacts.push_back(path);
    }
    std::ofstream(*options.run_dir / "summary.json") << summary.dump(2) << "\n";
  }
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  run.model = std::move(model);
  return run;
}

std::vector<std::pair<std::string, LossMask>> ablation_grid() {
  LossMask sup{true, false, false, false, false, true};
  LossMask adv = sup;
  adv.adv = true;
  LossMask inter = adv;
  inter.unc = true;
  LossMask unsup = inter;
  unsup.unsup = true;
  LossMask distrib = inter;
  distrib.distrib = true;
  return {{"Source-only", LossMask::source_only()},
          {"+L_sup", sup},
          {"+L_adv", adv},
          {"L_inter", inter},
          {"L_inter+L_unsup", unsup},
          {"L_inter+L_distrib", distrib},
          {"L_inter+L_intra", LossMask::full()}};
}

template <typename Scalar>
std::vector<AblationRow> run_ablation(
    const TrainConfig& cfg, const FrozenBackbone<Scalar>& backbone, const FitData& data,
    const std::vector<std::pair<std::string, LossMask>>& grid,
    const std::vector<std::uint64_t>& seeds,
    const std::function<void(const std::string&, std::uint64_t, double)>& on_run) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (const auto& [name, mask] : grid) {
    AblationRow row{name, mask, {}, 0.0, 0.0};
    for (std::uint64_t seed : seeds) {
      TrainConfig c = cfg;
      c.losses = mask;
      c.seed = seed;
      FitOptions opts;
      opts.evaluate_each_epoch = false;
      const double acc = fit(c, backbone, data, opts).final_accuracy;
      row.accuracies.push_back(acc);
      if (on_run) on_run(name, seed, acc);
    }
    double sum = 0;
    for (double a : row.accuracies) sum += a;
    row.mean = sum / static_cast<double>(row.accuracies.size());
    double ss = 0;
    for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
    row.stddev = row.accuracies.size() > 1
                     ? std::sqrt(ss / static_cast<double>(row.accuracies.size() - 1))
                     : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

#define VIRDA_INSTANTIATE_TRAINER(S)                                                           \
  template LossReport compute_gradients(Model<S>&, const StepBatch<S>&, const TrainConfig&,    \
                                        const LossMask&, std::uint64_t, double);               \
  template LossReport train_step(Model<S>&, AdamW<S>&, const StepBatch<S>&, const TrainConfig&, \
                                 int, int, double);                                            \
  template RowMatrix<S> predict_dataset(const Predictor<S>&, const DomainDataset&,             \
                                        const Normalization&, int);                            \
  template double evaluate(const Predictor<S>&, const DomainDataset&, const Normalization&,     \
                           int);                                                               \
  template double evaluate(const Model<S>&, const DomainDataset&, const EvalRoute&, int);      \
  template AdaptationRun<S> fit(const TrainConfig&, const FrozenBackbone<S>&, const FitData&,    \
                                const FitOptions&);                                            \
  template std::vector<AblationRow> run_ablation(                                              \
      const TrainConfig&, const FrozenBackbone<S>&, const FitData&,                            \
      const std::vector<std::pair<std::string, LossMask>>&, const std::vector<std::uint64_t>&, \
      const std::function<void(const std::string&, std::uint64_t, double)>&);

VIRDA_INSTANTIATE_TRAINER(float)
VIRDA_INSTANTIATE_TRAINER(double)

#undef VIRDA_INSTANTIATE_TRAINER

}  // namespace virda
