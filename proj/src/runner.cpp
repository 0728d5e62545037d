#include "virda/runner.hpp"

#include "virda/pretrain.hpp"

namespace virda {

RunData load_run_data(const DataSpec& spec) {
  RunData d;
  if (spec.dataset == "synthetic") {
    SyntheticPair pair =
        make_synthetic_pair(spec.synth_seed, spec.shift, spec.synth_train, spec.synth_test);
    d.source_train = std::move(pair.source_train);
    d.source_test = std::move(pair.source_test);
    d.target_train = std::move(pair.target_train);
    d.target_test = std::move(pair.target_test);
  } else if (spec.dataset == "digits") {
    d.source_train = load_digits(spec.source, "train", spec.root, Domain::source);
    d.source_test = load_digits(spec.source, "test", spec.root, Domain::source);
    d.target_train = load_digits(spec.target, "train", spec.root, Domain::target);
    d.target_test = load_digits(spec.target, "test", spec.root, Domain::target);
  } else if (spec.dataset == "office") {
    d.source_train = load_office(spec.root, spec.source, Domain::source, spec.image_size);
    d.target_train = load_office(spec.root, spec.target, Domain::target, spec.image_size);
    d.target_test = d.target_train;
    d.target_test.split = "test";
  } else {
    throw ConfigError("unknown dataset '" + spec.dataset + "' (synthetic, digits or office)");
  }
  require_shared_label_space(d.source_train, d.target_train);
  return d;
}

template <typename Scalar>
FrozenBackbone<Scalar> make_run_backbone(const TrainConfig& cfg) {
  if (cfg.backbone_weights) return load_backbone<Scalar>(cfg.backbone, cfg.backbone_weights);
  if (cfg.backbone != Arch::tiny) {
    throw ConfigError("backbone " + to_string(cfg.backbone) +
                      " requires pretrained weights (set backbone_weights)");
  }
  PretrainOptions o;
  o.epochs = cfg.pretrain_epochs;
  return pretrained_tiny_backbone<Scalar>(cfg.backbone_seed, cfg.pretrain_count, o);
}

template FrozenBackbone<float> make_run_backbone<float>(const TrainConfig&);
template FrozenBackbone<double> make_run_backbone<double>(const TrainConfig&);

}  // namespace virda
