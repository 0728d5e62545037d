#ifndef VIRDA_TRAINER_HPP_
#define VIRDA_TRAINER_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "virda/data.hpp"
#include "virda/model.hpp"
#include "virda/objectives.hpp"

namespace virda {

template <typename Scalar>
struct StepBatch {
  FeatureMap<Scalar> source;
  std::vector<int> labels;
  FeatureMap<Scalar> target;         // weak view
  FeatureMap<Scalar> target_strong;  // needed by the intra-domain objectives
};

/// Mask in force at `epoch` (intra-domain terms are held back during warm-up).
LossMask effective_mask(const TrainConfig& cfg, int epoch);
/// Gate coefficient at training progress p in [0, 1].
double gate_lambda(const TrainConfig& cfg, double progress);

/// Zeroes all trainable gradients and accumulates those of the masked
/// objectives for one batch. Stochastic passes draw from generators derived
/// from `step_seed`. Throws NonFiniteLoss before touching any gradient when a
/// loss is not finite.
template <typename Scalar>
LossReport compute_gradients(Model<Scalar>& model, const StepBatch<Scalar>& batch,
                             const TrainConfig& cfg, const LossMask& mask,
                             std::uint64_t step_seed, double lambda);

/// compute_gradients followed by one AdamW update of the parameters the mask
/// reaches. The backbone is never touched.
template <typename Scalar>
LossReport train_step(Model<Scalar>& model, AdamW<Scalar>& optimizer,
                      const StepBatch<Scalar>& batch, const TrainConfig& cfg, int step,
                      int epoch = 0, double progress = 0.0);

/// Maps a batch (and the dataset indices it came from) to probabilities.
template <typename Scalar>
using Predictor =
    std::function<RowMatrix<Scalar>(const FeatureMap<Scalar>&, const std::vector<std::size_t>&)>;

/// N x |Y| probabilities over the whole dataset, in dataset order.
template <typename Scalar>
RowMatrix<Scalar> predict_dataset(const Predictor<Scalar>& predictor, const DomainDataset& ds,
                                  const Normalization& norm, int batch = 100);

template <typename Scalar>
double evaluate(const Predictor<Scalar>& predictor, const DomainDataset& ds,
                const Normalization& norm, int batch = 100);

/// Accuracy of argmax predictions along `route`, dropout off.
template <typename Scalar>
double evaluate(const Model<Scalar>& model, const DomainDataset& ds, const EvalRoute& route,
                int batch = 100);

/// Target classifier on target-reprogrammed inputs.
template <typename Scalar>
double evaluate(const Model<Scalar>& model, const DomainDataset& ds, int batch = 100) {
  return evaluate(model, ds, EvalRoute{}, batch);
}

struct FitData {
  const DomainDataset* source_train = nullptr;
  const DomainDataset* target_train = nullptr;
  const DomainDataset* target_test = nullptr;
};

struct FitOptions {
  std::optional<std::filesystem::path> run_dir;  // config, metrics, eval table, artifacts
  std::string run_text;                          // config snapshot written into the run
  bool evaluate_each_epoch = true;
  std::function<void(int epoch, double accuracy)> on_epoch;
};

template <typename Scalar>
struct AdaptationRun {
  TrainConfig config;
  std::vector<LossReport> steps;
  std::vector<double> epoch_accuracy;
  double final_accuracy = 0.0;
  double seconds = 0.0;
  std::uint64_t seed = 0;
  int steps_per_epoch = 0;
  std::string backbone_checksum_before, backbone_checksum_after;
  std::vector<std::filesystem::path> artifacts;
  Model<Scalar> model;
};

template <typename Scalar>
AdaptationRun<Scalar> fit(const TrainConfig& cfg, const FrozenBackbone<Scalar>& backbone,
                          const FitData& data, const FitOptions& options = {});

struct AblationRow {
  std::string name;
  LossMask mask;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;
};

/// The seven loss configurations of the ablation table, in order.
std::vector<std::pair<std::string, LossMask>> ablation_grid();

template <typename Scalar>
std::vector<AblationRow> run_ablation(
    const TrainConfig& cfg, const FrozenBackbone<Scalar>& backbone, const FitData& data,
    const std::vector<std::pair<std::string, LossMask>>& grid,
    const std::vector<std::uint64_t>& seeds,
    const std::function<void(const std::string&, std::uint64_t, double)>& on_run = {});

}  // namespace virda

#endif  // VIRDA_TRAINER_HPP_
