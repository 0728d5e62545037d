#ifndef VIRDA_RUNNER_HPP_
#define VIRDA_RUNNER_HPP_

#include <optional>

#include "virda/backbone.hpp"
#include "virda/config.hpp"
#include "virda/data.hpp"
#include "virda/trainer.hpp"

namespace virda {

/// Datasets named by a run spec. Office domains have no split, so the whole
/// target domain serves as both the unlabelled training set and the test set.
struct RunData {
  DomainDataset source_train;
  DomainDataset target_train;
  DomainDataset target_test;
  std::optional<DomainDataset> source_test;

  FitData fit_data() const { return {&source_train, &target_train, &target_test}; }
};

RunData load_run_data(const DataSpec& spec);

/// The configured backbone: weights from backbone_weights when given,
/// otherwise (tiny only) pretrained on make_pretraining_set(backbone_seed).
template <typename Scalar>
FrozenBackbone<Scalar> make_run_backbone(const TrainConfig& cfg);

}  // namespace virda

#endif  // VIRDA_RUNNER_HPP_
