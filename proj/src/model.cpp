#include "virda/model.hpp"

#include "virda/hash.hpp"

namespace virda {

VRConfig vr_config_for(const TrainConfig& cfg, const BackboneInfo& info) {
  VRConfig v;
  v.channels = info.channels;
  v.height = info.height;
  v.width = info.width;
  v.depth = cfg.vr_depth;
  v.patch_exponent = cfg.patch_exponent;
  v.hidden_width = cfg.mask_hidden;
  v.mask_dropout = cfg.p_mask;
  v.reduction = cfg.coord_reduction;
  v.use_coord = cfg.use_coord;
  v.validate();
  return v;
}

ClassifierConfig classifier_config_for(const TrainConfig& cfg, const BackboneInfo& info,
                                       int num_classes) {
  ClassifierConfig c;
  c.input_dim = info.feature_dim;
  c.num_classes = num_classes;
  c.hidden = cfg.classifier_hidden;
  c.dropout = cfg.p_cls;
  return c;
}

EvalRoute eval_route(const LossMask& mask) {
  EvalRoute r;
  if (!mask.use_vr) {
    r.vr = EvalRoute::Vr::none;
  } else {
    r.vr = mask.any_target() ? EvalRoute::Vr::target : EvalRoute::Vr::source;
  }
  r.head = mask.any_intra() ? Domain::target : Domain::source;
  return r;
}

template <typename Scalar>
ParamList<Scalar> Model<Scalar>::vr_parameters() {
  ParamList<Scalar> out = vr_source.parameters();
  for (auto* p : vr_target.parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
ParamList<Scalar> Model<Scalar>::head_parameters() {
  ParamList<Scalar> out = cls_source.parameters();
  for (auto* p : cls_target.parameters()) out.push_back(p);
  for (auto* p : discriminator.parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
ParamList<Scalar> Model<Scalar>::trainable_parameters() {
  ParamList<Scalar> out = vr_parameters();
  for (auto* p : head_parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
ConstParamList<Scalar> Model<Scalar>::trainable_parameters() const {
  auto& self = const_cast<Model<Scalar>&>(*this);
  ConstParamList<Scalar> out;
  for (auto* p : self.trainable_parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
std::unordered_set<const Parameter<Scalar>*> Model<Scalar>::active_parameters(
    const LossMask& mask) {
  std::unordered_set<const Parameter<Scalar>*> out;
  auto add = [&](const ParamList<Scalar>& ps) {
    for (auto* p : ps) out.insert(p);
  };
  if (mask.use_vr && (mask.sup || mask.adv || mask.unc)) add(vr_source.parameters());
  if (mask.use_vr && mask.any_target()) add(vr_target.parameters());
  if (mask.sup || mask.unc) add(cls_source.parameters());
  if (mask.any_intra()) add(cls_target.parameters());
  if (mask.adv) add(discriminator.parameters());
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> Model<Scalar>::predict(const FeatureMap<Scalar>& x,
                                         const EvalRoute& route) const {
  if (backbone == nullptr) throw ConfigError("model was built without a backbone");
  RowMatrix<Scalar> z;
  switch (route.vr) {
    case EvalRoute::Vr::none: z = backbone->extract_features(x); break;
    case EvalRoute::Vr::source:
      z = backbone->extract_features(vr_source.apply(x, false, nullptr));
      break;
    case EvalRoute::Vr::target:
      z = backbone->extract_features(vr_target.apply(x, false, nullptr));
      break;
  }
  return classifier(route.head).classify(z, false);
}

namespace {

template <typename Scalar>
Model<Scalar> assemble(const TrainConfig& cfg, const BackboneInfo& info, int num_classes) {
  cfg.validate();
  Model<Scalar> m;
  m.backbone_info = info;
  m.num_classes = num_classes;
  m.vr_config = vr_config_for(cfg, info);
  m.vr_source = VRLayer<Scalar>(Domain::source, m.vr_config, derive_seed(cfg.seed, 11));
  m.vr_target = VRLayer<Scalar>(Domain::target, m.vr_config, derive_seed(cfg.seed, 12));
  Rng head_rng(derive_seed(cfg.seed, 13));
  m.cls_source = Classifier<Scalar>(Domain::source,
                                    classifier_config_for(cfg, info, num_classes), head_rng);
  // The target head starts from the same initial weights as the source head.
  m.cls_target = m.cls_source;
  m.cls_target.domain = Domain::target;
  Rng disc_rng(derive_seed(cfg.seed, 14));
  m.discriminator = DomainDiscriminator<Scalar>(info.feature_dim, cfg.disc_hidden, disc_rng);
  m.grl.lambda = cfg.lambda;
  return m;
}

}  // namespace

template <typename Scalar>
Model<Scalar> build_model(const TrainConfig& cfg, const FrozenBackbone<Scalar>& backbone,
                          int num_classes) {
  Model<Scalar> m = assemble<Scalar>(cfg, backbone.info(), num_classes);
  m.backbone = &backbone;
  return m;
}

template <typename Scalar>
Model<Scalar> build_model(const TrainConfig& cfg, const BackboneInfo& info, int num_classes) {
  return assemble<Scalar>(cfg, info, num_classes);
}

template <typename Scalar>
AdamW<Scalar> make_optimizer(Model<Scalar>& model, const TrainConfig& cfg) {
  std::vector<typename AdamW<Scalar>::Group> groups;
  groups.push_back({"vr", cfg.lr_vr, model.vr_parameters()});
  groups.push_back({"heads", cfg.lr_heads, model.head_parameters()});
  return AdamW<Scalar>(std::move(groups), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
}

template <typename Scalar>
std::string parameter_checksum(const Model<Scalar>& model) {
  Sha256 h;
  auto feed = [&](const std::string& prefix, const ConstParamList<Scalar>& ps) {
    for (const auto* p : ps) {
      h.update(prefix + p->name);
      h.update(p->value.data(), static_cast<std::size_t>(p->value.size()) * sizeof(Scalar));
    }
  };
  feed("vr_source.", model.vr_source.parameters());
  feed("vr_target.", model.vr_target.parameters());
  feed("cls_source.", model.cls_source.parameters());
  feed("cls_target.", model.cls_target.parameters());
  feed("discriminator.", model.discriminator.parameters());
  return h.hex_digest();
}

template struct Model<float>;
template struct Model<double>;
template Model<float> build_model(const TrainConfig&, const FrozenBackbone<float>&, int);
template Model<double> build_model(const TrainConfig&, const FrozenBackbone<double>&, int);
template Model<float> build_model<float>(const TrainConfig&, const BackboneInfo&, int);
template Model<double> build_model<double>(const TrainConfig&, const BackboneInfo&, int);
template AdamW<float> make_optimizer(Model<float>&, const TrainConfig&);
template AdamW<double> make_optimizer(Model<double>&, const TrainConfig&);
template std::string parameter_checksum(const Model<float>&);
template std::string parameter_checksum(const Model<double>&);

}  // namespace virda
