#ifndef VIRDA_CONFIG_HPP_
#define VIRDA_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "virda/augment.hpp"
#include "virda/backbone.hpp"
#include "virda/data.hpp"
#include "virda/objectives.hpp"
#include "virda/reprogram.hpp"

namespace virda {

struct TrainConfig {
  double lr_heads = 3e-4;
  double lr_vr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-5;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int epochs = 50;
  int passes = 8;  // M stochastic passes for the uncertainty estimate
  double p_mask = 0.5;
  double p_cls = 0.3;
  int vr_depth = 6;
  int patch_exponent = 5;
  int mask_hidden = 32;
  int coord_reduction = 8;
  bool use_coord = true;
  double tau = 0.95;
  double lambda = 1.0;
  bool lambda_ramp = false;
  LossMask losses;
  LossWeights weights;
  bool aggregate_unc = false;
  int intra_warmup_epochs = 0;
  std::vector<int> classifier_hidden;
  std::vector<int> disc_hidden{1024};
  Arch backbone = Arch::tiny;
  std::optional<std::filesystem::path> backbone_weights;
  // Without weights the tiny backbone is pretrained on clean shape renderings.
  std::uint64_t backbone_seed = 0;
  int pretrain_epochs = 6;
  int pretrain_count = 2000;
  AugmentPolicy augment;
  bool source_train_aug = true;  // random crop and flip for file-backed source images
  int eval_batch = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DataSpec {
  std::string dataset = "synthetic";  // synthetic | digits | office
  std::string source = "source";
  std::string target = "target";
  std::filesystem::path root;
  std::uint64_t synth_seed = 0;
  int synth_train = 2000;
  int synth_test = 500;
  ShiftSpec shift;
  int image_size = 224;  // office images
};

struct RunSpec {
  TrainConfig train;
  DataSpec data;
};

/// Parses "key = value" lines ('#' starts a comment). Unknown keys are errors.
RunSpec parse_run_spec(const std::string& text, const std::string& origin = "<string>");
RunSpec load_run_spec(const std::filesystem::path& path);
/// Sets one key; throws ConfigError for unknown keys or malformed values.
void apply_setting(RunSpec& spec, const std::string& key, const std::string& value);
/// Canonical text form; parse_run_spec(to_text(s)) reproduces s.
std::string to_text(const RunSpec& spec);
std::vector<std::string> setting_keys();

}  // namespace virda

#endif  // VIRDA_CONFIG_HPP_
