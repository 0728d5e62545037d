#ifndef VIRDA_PRETRAIN_HPP_
#define VIRDA_PRETRAIN_HPP_

#include <cstdint>
#include <vector>

#include "virda/backbone.hpp"
#include "virda/data.hpp"
#include "virda/safetensors.hpp"

namespace virda {

struct PretrainOptions {
  int epochs = 6;
  int batch_size = 64;
  double lr = 3e-3;
  bool augment = true;  // strong views on alternate epochs
  std::uint64_t seed = 0;
};

struct PretrainResult {
  TensorArchive weights;  // tiny-backbone tensors, loadable by backbone_from_archive
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

/// Supervised training of the tiny conv stack with a temporary linear head.
/// The head is discarded; only the feature extractor is kept.
PretrainResult pretrain_tiny(const DomainDataset& ds, const PretrainOptions& options = {});

/// Tiny backbone pretrained on make_pretraining_set(seed, count).
template <typename Scalar>
FrozenBackbone<Scalar> pretrained_tiny_backbone(std::uint64_t seed, int count = 2000,
                                                const PretrainOptions& options = {});

}  // namespace virda

#endif  // VIRDA_PRETRAIN_HPP_
