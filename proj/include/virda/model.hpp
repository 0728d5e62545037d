#ifndef VIRDA_MODEL_HPP_
#define VIRDA_MODEL_HPP_

#include <unordered_set>

#include "virda/backbone.hpp"
#include "virda/config.hpp"
#include "virda/heads.hpp"
#include "virda/optim.hpp"
#include "virda/reprogram.hpp"

namespace virda {

VRConfig vr_config_for(const TrainConfig& cfg, const BackboneInfo& info);
ClassifierConfig classifier_config_for(const TrainConfig& cfg, const BackboneInfo& info,
                                       int num_classes);

/// Which reprogramming layer and classifier produce predictions.
struct EvalRoute {
  enum class Vr { none, source, target } vr = Vr::target;
  Domain head = Domain::target;
};

/// Target VR whenever a target objective trains it, the target classifier
/// whenever an intra-domain objective trains it; the full mask gives
/// f_C^(t) o f_backbone o f_pre^(t).
EvalRoute eval_route(const LossMask& mask);

/// The cascade: two reprogramming layers, two classifiers, a discriminator
/// behind a gradient-reversal gate, and a non-owning frozen backbone.
template <typename Scalar>
struct Model {
  BackboneInfo backbone_info;
  const FrozenBackbone<Scalar>* backbone = nullptr;
  VRConfig vr_config;
  VRLayer<Scalar> vr_source, vr_target;
  Classifier<Scalar> cls_source, cls_target;
  DomainDiscriminator<Scalar> discriminator;
  GradientReversalGate grl;
  int num_classes = 0;

  VRLayer<Scalar>& vr(Domain d) { return d == Domain::source ? vr_source : vr_target; }
  const VRLayer<Scalar>& vr(Domain d) const { return d == Domain::source ? vr_source : vr_target; }
  Classifier<Scalar>& classifier(Domain d) {
    return d == Domain::source ? cls_source : cls_target;
  }
  const Classifier<Scalar>& classifier(Domain d) const {
    return d == Domain::source ? cls_source : cls_target;
  }

  ParamList<Scalar> vr_parameters();
  ParamList<Scalar> head_parameters();
  ParamList<Scalar> trainable_parameters();
  ConstParamList<Scalar> trainable_parameters() const;

  /// Parameters that receive gradient under `mask`.
  std::unordered_set<const Parameter<Scalar>*> active_parameters(const LossMask& mask);

  /// Probabilities along `route` with dropout off.
  RowMatrix<Scalar> predict(const FeatureMap<Scalar>& x, const EvalRoute& route) const;
};

/// Builds the model for a backbone (feature extraction available).
template <typename Scalar>
Model<Scalar> build_model(const TrainConfig& cfg, const FrozenBackbone<Scalar>& backbone,
                          int num_classes);
/// Architecture-only build for parameter accounting.
template <typename Scalar>
Model<Scalar> build_model(const TrainConfig& cfg, const BackboneInfo& info, int num_classes);

/// Two groups: "vr" at lr_vr and "heads" (classifiers + discriminator) at lr_heads.
template <typename Scalar>
AdamW<Scalar> make_optimizer(Model<Scalar>& model, const TrainConfig& cfg);

/// SHA-256 over all trainable parameter names and values.
template <typename Scalar>
std::string parameter_checksum(const Model<Scalar>& model);

}  // namespace virda

#endif  // VIRDA_MODEL_HPP_
