#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "virda/artifacts.hpp"
#include "virda/pareto.hpp"
#include "virda/pretrain.hpp"
#include "virda/runner.hpp"
#include "virda/safetensors.hpp"

namespace fs = std::filesystem;
using namespace virda;

namespace {

// Exit codes: 0 success, 1 runtime failure, 2 invalid usage or configuration.
constexpr int kRuntimeFailure = 1;
constexpr int kUsage = 2;

struct SpecOptions {
  std::string config;
  std::vector<std::string> set;
  std::string data_root;
  std::optional<std::uint64_t> seed;
  std::string losses;
  std::string backbone;
  std::string backbone_weights;
};

void add_spec_options(CLI::App* cmd, SpecOptions& o) {
  cmd->add_option("-c,--config", o.config, "run config file (key = value lines)");
  cmd->add_option("--set", o.set, "override a setting, key=value (repeatable)");
  cmd->add_option("--data-root", o.data_root, "dataset root (else config, else $VIRDA_DATA_ROOT)");
  cmd->add_option("--seed", o.seed, "training seed");
  cmd->add_option("--losses", o.losses, "loss mask: all, source_only, inter, or a list like sup,adv,unc");
  cmd->add_option("--backbone", o.backbone, "tiny, resnet18, resnet50 or vit_b32");
  cmd->add_option("--backbone-weights", o.backbone_weights, "safetensors weight file");
}

RunSpec resolve_spec(const SpecOptions& o) {
  RunSpec spec = o.config.empty() ? RunSpec{} : load_run_spec(o.config);
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(spec, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) spec.train.seed = *o.seed;
  if (!o.losses.empty()) spec.train.losses = LossMask::parse(o.losses);
  if (!o.backbone.empty()) spec.train.backbone = parse_arch(o.backbone);
  if (!o.backbone_weights.empty()) spec.train.backbone_weights = o.backbone_weights;
  if (!o.data_root.empty()) {
    spec.data.root = o.data_root;
  } else if (spec.data.root.empty()) {
    if (const char* env = std::getenv("VIRDA_DATA_ROOT")) spec.data.root = env;
  }
  if (spec.data.dataset != "synthetic" && spec.data.root.empty())
    throw ConfigError("dataset '" + spec.data.dataset +
                      "' needs a data root (--data-root, data_root or $VIRDA_DATA_ROOT)");
  spec.train.validate();
  return spec;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + item + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("no seeds given");
  return seeds;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// ---------------------------------------------------------------------------

int cmd_train(const SpecOptions& so, const std::string& out) {
  const RunSpec spec = resolve_spec(so);
  log_line("loading data (" + spec.data.dataset + ")");
  const RunData data = load_run_data(spec.data);
  log_line("preparing backbone " + to_string(spec.train.backbone));
  const auto backbone = make_run_backbone<float>(spec.train);
  FitOptions opts;
  opts.run_dir = fs::path(out);
  opts.run_text = to_text(spec);
  opts.on_epoch = [](int epoch, double acc) {
    std::ostringstream s;
    s << "epoch " << epoch << " target accuracy " << std::fixed << std::setprecision(4) << acc;
    log_line(s.str());
  };
  const auto run = fit(spec.train, backbone, data.fit_data(), opts);
  nlohmann::json j = {{"final_accuracy", run.final_accuracy},
                      {"seconds", run.seconds},
                      {"steps", run.steps.size()},
                      {"backbone_unchanged",
                       run.backbone_checksum_before == run.backbone_checksum_after},
                      {"run_dir", out}};
  if (data.source_test) {
    j["source_accuracy"] =
        evaluate(run.model, *data.source_test, EvalRoute{spec.train.losses.use_vr
                                                             ? EvalRoute::Vr::source
                                                             : EvalRoute::Vr::none,
                                                         Domain::source});
  }
  std::cout << j.dump(2) << std::endl;
  return 0;
}

int cmd_eval(const SpecOptions& so, const std::string& artifact, const std::string& split) {
  const RunSpec spec = resolve_spec(so);
  const RunData data = load_run_data(spec.data);
  const auto backbone = make_run_backbone<float>(spec.train);
  const auto slice = load_artifact<float>(artifact, backbone);
  const DomainDataset* ds = nullptr;
  if (split == "target") {
    ds = &data.target_test;
  } else if (split == "source") {
    if (!data.source_test) throw ConfigError("this dataset has no source test split");
    ds = &*data.source_test;
  } else {
    throw ConfigError("--split must be target or source");
  }
  const Predictor<float> predictor = [&](const FeatureMap<float>& x,
                                         const std::vector<std::size_t>&) {
    return slice.predict(x, backbone);
  };
  const double acc = evaluate(predictor, *ds, normalization_for(backbone.arch()),
                              spec.train.eval_batch);
  std::cout << nlohmann::json({{"artifact", artifact},
                               {"domain", to_string(slice.domain)},
                               {"split", split},
                               {"samples", ds->size()},
                               {"accuracy", acc}})
                   .dump(2)
            << std::endl;
  return 0;
}

int cmd_ablate(const SpecOptions& so, const std::string& seeds_text, const std::string& rows,
               const std::string& out) {
  const RunSpec spec = resolve_spec(so);
  const auto seeds = parse_seeds(seeds_text);
  auto grid = ablation_grid();
  if (rows != "all") {
    std::vector<std::pair<std::string, LossMask>> picked;
    std::stringstream ss(rows);
    std::string name;
    while (std::getline(ss, name, ',')) {
      bool found = false;
      for (const auto& row : grid)
        if (row.first == name) {
          picked.push_back(row);
          found = true;
        }
      if (!found) throw ConfigError("unknown ablation row '" + name + "'");
    }
    grid = picked;
  }
  const RunData data = load_run_data(spec.data);
  const auto backbone = make_run_backbone<float>(spec.train);
  const auto table = run_ablation(spec.train, backbone, data.fit_data(), grid, seeds,
                                  [](const std::string& row, std::uint64_t seed, double acc) {
                                    std::ostringstream s;
                                    s << row << " seed " << seed << " accuracy " << std::fixed
                                      << std::setprecision(4) << acc;
                                    log_line(s.str());
                                  });
  std::ostringstream md, csv;
  md << "| losses | mask | mean acc (%) | std |\n|---|---|---:|---:|\n";
  csv << "row,mask,seed,accuracy\n";
  md << std::fixed << std::setprecision(2);
  for (const auto& r : table) {
    md << "| " << r.name << " | " << r.mask.str() << " | " << 100 * r.mean << " | "
       << 100 * r.stddev << " |\n";
    for (std::size_t i = 0; i < seeds.size(); ++i)
      csv << r.name << ",\"" << r.mask.str() << "\"," << seeds[i] << "," << r.accuracies[i]
          << "\n";
  }
  std::cout << md.str();
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "ablation.md") << md.str();
    std::ofstream(fs::path(out) / "ablation.csv") << csv.str();
    std::ofstream(fs::path(out) / "config.cfg") << to_text(spec);
  }
  return 0;
}

int cmd_count(const SpecOptions& so, bool json, const std::string& artifact_out) {
  const RunSpec spec = resolve_spec(so);
  const BackboneInfo info = describe_backbone(spec.train.backbone);
  const int classes = spec.data.dataset == "synthetic" || spec.data.dataset == "digits" ? 10
                      : spec.data.root.empty()
                          ? 31
                          : load_run_data(spec.data).source_train.num_classes();
  auto model = build_model<float>(spec.train, info, classes);
  const ParamReport r = count_trainable(model);
  if (!artifact_out.empty()) {
    // Artifacts record the backbone checksum, so a backbone instance is needed.
    const auto backbone = spec.train.backbone_weights
                              ? load_backbone<float>(spec.train.backbone, spec.train.backbone_weights)
                              : make_backbone<float>(spec.train.backbone, spec.train.backbone_seed);
    model.backbone = &backbone;
    save_artifact(model, Domain::target, artifact_out, to_text(spec));
    log_line("wrote " + artifact_out + " (" + std::to_string(fs::file_size(artifact_out)) +
             " bytes)");
  }
  if (json) {
    nlohmann::json j;
    for (const auto& [name, count] : r.components) j["components"][name] = count;
    j["total_trainable"] = r.total;
    j["backbone_frozen"] = r.backbone_frozen;
    j["backbone_trainable"] = r.backbone_trainable;
    j["classes"] = classes;
    std::cout << j.dump(2) << std::endl;
  } else {
    std::cout << "backbone " << to_string(spec.train.backbone) << ", " << classes
              << " classes\n"
              << r.str();
  }
  return 0;
}

int cmd_export_masks(const SpecOptions& so, const std::string& run_dir, const std::string& out,
                     int count) {
  SpecOptions o = so;
  if (o.config.empty()) o.config = (fs::path(run_dir) / "config.cfg").string();
  const RunSpec spec = resolve_spec(o);
  const RunData data = load_run_data(spec.data);
  const auto backbone = make_run_backbone<float>(spec.train);
  const int classes = data.source_train.num_classes();
  const Model<float> before = build_model(spec.train, backbone, classes);
  Model<float> after = before;
  for (Domain d : {Domain::source, Domain::target}) {
    const auto slice =
        load_artifact<float>(fs::path(run_dir) / (to_string(d) + kArtifactExtension), backbone);
    if (!slice.has_vr) throw ConfigError("run has no reprogramming layers (source-only)");
    after.vr(d) = slice.vr;
  }
  std::vector<MaskSample> samples;
  const DomainDataset& src = data.source_test ? *data.source_test : data.source_train;
  for (int i = 0; i < count; ++i) {
    samples.push_back({Domain::source, src.image(static_cast<std::size_t>(i) % src.size())});
    samples.push_back({Domain::target, data.target_test.image(static_cast<std::size_t>(i) %
                                                              data.target_test.size())});
  }
  const MaskGrid grid =
      export_masks(after, samples, out, normalization_for(backbone.arch()), &before);
  std::cout << nlohmann::json({{"out", out}, {"rows", grid.rows}, {"cols", grid.cols}}).dump()
            << std::endl;
  return 0;
}

int cmd_make_synth(const std::string& out, std::uint64_t seed, int train, int test,
                   const SpecOptions& so) {
  const RunSpec spec = resolve_spec(so);
  const SyntheticPair pair = make_synthetic_pair(seed, spec.data.shift, train, test);
  const std::pair<const char*, const DomainDataset*> parts[] = {
      {"source_train", &pair.source_train},
      {"source_test", &pair.source_test},
      {"target_train", &pair.target_train},
      {"target_test", &pair.target_test}};
  for (const auto& [name, ds] : parts) {
    for (std::size_t i = 0; i < ds->size(); ++i) {
      const fs::path dir = fs::path(out) / name / ds->class_names[std::size_t(ds->labels[i])];
      fs::create_directories(dir);
      std::ostringstream file;
      file << std::setw(5) << std::setfill('0') << i << ".png";
      cv::Mat bgr;
      cv::cvtColor(ds->image_u8(i), bgr, cv::COLOR_RGB2BGR);
      if (!cv::imwrite((dir / file.str()).string(), bgr))
        throw std::runtime_error("cannot write " + (dir / file.str()).string());
    }
  }
  std::cout << "wrote " << out << " (" << train << " train / " << test
            << " test images per domain)" << std::endl;
  return 0;
}

int cmd_pretrain(const std::string& out, std::uint64_t seed, int epochs, int count) {
  PretrainOptions o;
  o.seed = seed;
  o.epochs = epochs;
  const auto r = pretrain_tiny(make_pretraining_set(seed, count), o);
  write_safetensors(out, r.weights);
  std::cout << nlohmann::json({{"out", out},
                               {"train_accuracy", r.train_accuracy},
                               {"final_loss", r.epoch_loss.back()}})
                   .dump(2)
            << std::endl;
  return 0;
}

int cmd_pareto(const std::string& table, const std::string& column,
               const std::vector<std::string>& extra, const std::string& out) {
  auto points = read_baselines(table, column);
  for (const auto& e : extra) {
    std::stringstream ss(e);
    std::string name, params, acc;
    if (!std::getline(ss, name, ',') || !std::getline(ss, params, ',') ||
        !std::getline(ss, acc, ','))
      throw ConfigError("--add expects name,params_m,accuracy");
    points.push_back({name, "this run", std::stod(params), std::stod(acc)});
  }
  const auto frontier = pareto_frontier(points);
  const std::string md = pareto_table(points, frontier);
  std::cout << md;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "pareto.md") << md;
    std::ofstream(fs::path(out) / "pareto.svg")
        << pareto_svg(points, frontier, "accuracy vs trainable parameters (" + column + ")");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual reprogramming for unsupervised domain adaptation"};
  app.require_subcommand(1);

  SpecOptions so;
  std::string out, artifact, split = "target", seeds = "0,1,2", rows = "all", run_dir,
                   table = "data/office31.csv", column = "mean";
  std::vector<std::string> extra;
  bool json = false;
  int count = 4, synth_train = 2000, synth_test = 500, epochs = 6;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train one adaptation run");
  add_spec_options(train, so);
  train->add_option("-o,--out", out, "run directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a saved domain artifact");
  add_spec_options(eval, so);
  eval->add_option("-a,--artifact", artifact, "artifact file")->required();
  eval->add_option("--split", split, "target (default) or source");

  auto* ablate = app.add_subcommand("ablate", "loss-ablation grid over seeds");
  add_spec_options(ablate, so);
  ablate->add_option("--seeds", seeds, "comma-separated seeds");
  ablate->add_option("--grid", rows, "comma-separated row names or 'all'");
  ablate->add_option("-o,--out", out, "output directory");

  auto* countp = app.add_subcommand("count-params", "trainable-parameter ledger");
  add_spec_options(countp, so);
  countp->add_flag("--json", json, "machine-readable output");
  countp->add_option("--artifact-out", artifact, "also write a target artifact here");

  auto* masks = app.add_subcommand("export-masks", "mask grid before/after training");
  add_spec_options(masks, so);
  masks->add_option("-r,--run", run_dir, "run directory from 'train'")->required();
  masks->add_option("-o,--out", out, "output PNG")->required();
  masks->add_option("-n,--count", count, "samples per domain");

  auto* synth = app.add_subcommand("make-synth", "write the synthetic pair as PNG folders");
  add_spec_options(synth, so);
  synth->add_option("-o,--out", out, "output directory")->required();
  synth->add_option("--synth-seed", seed, "generator seed");
  synth->add_option("--train", synth_train, "training images per domain");
  synth->add_option("--test", synth_test, "test images per domain");

  auto* pretrain = app.add_subcommand("pretrain-tiny", "pretrain and save the tiny backbone");
  pretrain->add_option("-o,--out", out, "safetensors output")->required();
  pretrain->add_option("--seed", seed, "pretraining seed");
  pretrain->add_option("--epochs", epochs, "pretraining epochs");
  pretrain->add_option("--count", synth_train, "pretraining images");

  auto* pareto = app.add_subcommand("pareto", "accuracy-vs-parameters frontier report");
  pareto->add_option("-t,--table", table, "baseline CSV");
  pareto->add_option("--column", column, "accuracy column");
  pareto->add_option("--add", extra, "extra point name,params_m,accuracy (repeatable)");
  pareto->add_option("-o,--out", out, "output directory for pareto.md and pareto.svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*train) return cmd_train(so, out);
    if (*eval) return cmd_eval(so, artifact, split);
    if (*ablate) return cmd_ablate(so, seeds, rows, out);
    if (*countp) return cmd_count(so, json, artifact);
    if (*masks) return cmd_export_masks(so, run_dir, out, count);
    if (*synth) return cmd_make_synth(out, seed, synth_train, synth_test, so);
    if (*pretrain) return cmd_pretrain(out, seed, epochs, synth_train);
    if (*pareto) return cmd_pareto(table, column, extra, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntimeFailure;
  }
  return kUsage;
}
