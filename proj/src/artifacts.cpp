#include "virda/artifacts.hpp"

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "virda/safetensors.hpp"

namespace virda {

namespace {

using json = nlohmann::json;

json vr_json(const VRConfig& v) {
  return {{"channels", v.channels},         {"height", v.height},
          {"width", v.width},               {"depth", v.depth},
          {"patch_exponent", v.patch_exponent}, {"hidden_width", v.hidden_width},
          {"mask_dropout", v.mask_dropout}, {"reduction", v.reduction},
          {"use_coord", v.use_coord}};
}

VRConfig vr_from_json(const json& j) {
  VRConfig v;
  v.channels = j.at("channels");
  v.height = j.at("height");
  v.width = j.at("width");
  v.depth = j.at("depth");
  v.patch_exponent = j.at("patch_exponent");
  v.hidden_width = j.at("hidden_width");
  v.mask_dropout = j.at("mask_dropout");
  v.reduction = j.at("reduction");
  v.use_coord = j.at("use_coord");
  v.validate();
  return v;
}

json classifier_json(const ClassifierConfig& c) {
  return {{"input_dim", c.input_dim},
          {"num_classes", c.num_classes},
          {"hidden", c.hidden},
          {"dropout", c.dropout}};
}

ClassifierConfig classifier_from_json(const json& j) {
  ClassifierConfig c;
  c.input_dim = j.at("input_dim");
  c.num_classes = j.at("num_classes");
  c.hidden = j.at("hidden").get<std::vector<int>>();
  c.dropout = j.at("dropout");
  return c;
}

template <typename Scalar>
void fill_from(const TensorArchive& archive, const std::string& prefix, ParamList<Scalar> params,
               const std::string& path) {
  for (auto* p : params) {
    const std::string name = prefix + p->name;
    if (!archive.contains(name))
      throw ArtifactError("artifact '" + path + "' lacks tensor '" + name + "'");
    RowMatrix<Scalar> v = archive.get<Scalar>(name);
    if (v.size() != p->value.size())
      throw ArtifactError("artifact tensor '" + name + "' has the wrong size");
    p->value = Eigen::Map<const RowMatrix<Scalar>>(v.data(), p->value.rows(), p->value.cols());
    p->zero_grad();
  }
}

std::string meta_at(const std::map<std::string, std::string>& meta, const std::string& key,
                    const std::string& path) {
  auto it = meta.find(key);
  if (it == meta.end()) throw ArtifactError("artifact '" + path + "' lacks metadata '" + key + "'");
  return it->second;
}

}  // namespace

template <typename Scalar>
RowMatrix<Scalar> DomainSlice<Scalar>::predict(const FeatureMap<Scalar>& x,
                                               const FrozenBackbone<Scalar>& backbone) const {
  const RowMatrix<Scalar> z =
      has_vr ? backbone.extract_features(vr.apply(x, false, nullptr)) : backbone.extract_features(x);
  return classifier.classify(z, false);
}

template <typename Scalar>
void save_artifact(const Model<Scalar>& model, Domain domain, const std::filesystem::path& path,
                   const std::string& config_text, const std::string& metrics_json,
                   bool include_vr) {
  if (model.backbone == nullptr)
    throw ArtifactError("cannot save an artifact for a model without a backbone");
  TensorArchive archive;
  archive.metadata["format"] = kArtifactFormat;
  archive.metadata["version"] = std::to_string(kArtifactVersion);
  archive.metadata["domain"] = to_string(domain);
  archive.metadata["backbone_arch"] = to_string(model.backbone->arch());
  archive.metadata["backbone_checksum"] = model.backbone->checksum();
  archive.metadata["has_vr"] = include_vr ? "true" : "false";
  archive.metadata["vr_config"] = vr_json(model.vr_config).dump();
  archive.metadata["classifier_config"] = classifier_json(model.classifier(domain).config).dump();
  archive.metadata["config"] = config_text;
  archive.metadata["metrics"] = metrics_json;
  if (include_vr) {
    for (const auto* p : model.vr(domain).parameters()) archive.add("vr." + p->name, p->value);
  }
  for (const auto* p : model.classifier(domain).parameters()) archive.add(p->name, p->value);
  write_safetensors(path, archive);
}

template <typename Scalar>
DomainSlice<Scalar> load_artifact(const std::filesystem::path& path,
                                  const FrozenBackbone<Scalar>& backbone) {
  TensorArchive archive;
  try {
    archive = read_safetensors(path);
  } catch (const ArchiveError& e) {
    throw ArtifactError(e.what());
  }
  const std::string p = path.string();
  const auto& meta = archive.metadata;
  if (meta_at(meta, "format", p) != kArtifactFormat)
    throw ArtifactError("'" + p + "' is not a domain artifact");
  if (meta_at(meta, "version", p) != std::to_string(kArtifactVersion)) {
    throw ArtifactError("artifact '" + p + "' has format version " + meta.at("version") +
                        ", this build reads version " + std::to_string(kArtifactVersion));
  }
  if (meta_at(meta, "backbone_arch", p) != to_string(backbone.arch())) {
    throw ArtifactError("artifact '" + p + "' was trained on backbone " + meta.at("backbone_arch") +
                        ", got " + to_string(backbone.arch()));
  }
  if (meta_at(meta, "backbone_checksum", p) != backbone.checksum()) {
    throw ArtifactError("backbone checksum mismatch for '" + p + "': recorded " +
                        meta.at("backbone_checksum") + ", supplied " + backbone.checksum());
  }
  DomainSlice<Scalar> slice;
  slice.domain = parse_domain(meta_at(meta, "domain", p));
  slice.metadata = meta;
  slice.has_vr = meta_at(meta, "has_vr", p) == "true";
  try {
    const VRConfig vc = vr_from_json(json::parse(meta_at(meta, "vr_config", p)));
    const ClassifierConfig cc = classifier_from_json(json::parse(meta_at(meta, "classifier_config", p)));
    if (cc.input_dim != backbone.feature_dim())
      throw ArtifactError("artifact classifier expects " + std::to_string(cc.input_dim) + " features");
    if (slice.has_vr) {
      slice.vr = VRLayer<Scalar>(slice.domain, vc, 0);
      fill_from(archive, "vr.", slice.vr.parameters(), p);
    }
    Rng rng(0);
    slice.classifier = Classifier<Scalar>(slice.domain, cc, rng);
    fill_from(archive, "", slice.classifier.parameters(), p);
  } catch (const json::exception& e) {
    throw ArtifactError("artifact '" + p + "' has malformed metadata: " + e.what());
  }
  return slice;
}

// ---------------------------------------------------------------------------

Index ParamReport::get(const std::string& component) const {
  for (const auto& [name, count] : components)
    if (name == component) return count;
  throw ConfigError("no parameter component '" + component + "'");
}

std::string ParamReport::str() const {
  std::ostringstream out;
  for (const auto& [name, count] : components) out << name << "\t" << count << "\n";
  out << "total_trainable\t" << total << "\n";
  out << "backbone_frozen\t" << backbone_frozen << "\n";
  out << "backbone_trainable\t" << backbone_trainable << "\n";
  return out.str();
}

template <typename Scalar>
ParamReport count_trainable(const Model<Scalar>& model) {
  ParamReport r;
  for (Domain d : {Domain::source, Domain::target}) {
    const auto& vr = model.vr(d);
    const std::string prefix = to_string(d) + ".";
    r.components.emplace_back(prefix + "pattern", vr.pattern.size());
    r.components.emplace_back(prefix + "mask_producer", count_scalars(vr.mask.parameters()));
    r.components.emplace_back(prefix + "coord_attention",
                              vr.config.use_coord ? count_scalars(vr.coord.parameters()) : 0);
    r.components.emplace_back(prefix + "classifier",
                              count_scalars(model.classifier(d).parameters()));
  }
  r.components.emplace_back("discriminator", count_scalars(model.discriminator.parameters()));
  for (const auto& c : r.components) r.total += c.second;
  r.backbone_frozen = model.backbone_info.param_count;
  r.backbone_trainable = model.backbone != nullptr ? model.backbone->trainable_count() : 0;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

cv::Mat to_u8_rgb(const cv::Mat& f) {
  cv::Mat u8;
  f.convertTo(u8, CV_8U, 255.0);
  return u8;
}

template <typename Scalar>
cv::Mat unnormalize(const FeatureMap<Scalar>& x, const Normalization& norm) {
  cv::Mat out(x.h, x.w, CV_32FC3);
  for (int y = 0; y < x.h; ++y)
    for (int q = 0; q < x.w; ++q)
      for (int c = 0; c < 3; ++c) {
        const auto k = static_cast<std::size_t>(c);
        const double v = static_cast<double>(x.at(c, 0, y, q)) * norm.std[k] + norm.mean[k];
        out.at<cv::Vec3f>(y, q)[c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return out;
}

}  // namespace

template <typename Scalar>
std::vector<cv::Mat> render_mask_panels(const VRLayer<Scalar>& vr, const cv::Mat& image,
                                        const Normalization& norm) {
  const FeatureMap<Scalar> x = to_feature_map<Scalar>({image}, norm);
  const FeatureMap<Scalar> attended = vr.attend(x);
  const FeatureMap<Scalar> mask = vr.mask.produce(attended, false, nullptr);
  const FeatureMap<Scalar> out = reprogram_combine(attended, vr.pattern.value, mask);
  cv::Mat gray(x.h, x.w, CV_32F);
  for (int y = 0; y < x.h; ++y)
    for (int q = 0; q < x.w; ++q) {
      double s = 0;
      for (int c = 0; c < mask.channels(); ++c) s += static_cast<double>(mask.at(c, 0, y, q));
      gray.at<float>(y, q) = static_cast<float>(s / mask.channels());
    }
  cv::Mat gray_u8;
  gray.convertTo(gray_u8, CV_8U, 255.0);
  cv::Mat original;
  image.convertTo(original, CV_8U, 255.0);
  return {original, gray_u8, to_u8_rgb(unnormalize(out, norm))};
}

template <typename Scalar>
MaskGrid export_masks(const Model<Scalar>& model, const std::vector<MaskSample>& samples,
                      const std::filesystem::path& path, const Normalization& norm,
                      const Model<Scalar>* before) {
  if (samples.empty()) throw ConfigError("export_masks needs at least one sample");
  std::vector<const Model<Scalar>*> checkpoints;
  if (before != nullptr) checkpoints.push_back(before);
  checkpoints.push_back(&model);
  MaskGrid grid;
  grid.rows = static_cast<int>(samples.size() * checkpoints.size());
  grid.cols = 3;
  const int h = model.vr_config.height;
  grid.cell = h < 96 ? h * (96 / h) : h;
  cv::Mat canvas(grid.rows * grid.cell, grid.cols * grid.cell, CV_8UC3, cv::Scalar::all(0));
  int row = 0;
  for (const auto* m : checkpoints) {
    for (const auto& s : samples) {
      const auto panels = render_mask_panels(m->vr(s.domain), s.image, norm);
      for (int c = 0; c < 3; ++c) {
        cv::Mat panel = panels[static_cast<std::size_t>(c)];
        if (panel.channels() == 1) cv::cvtColor(panel, panel, cv::COLOR_GRAY2RGB);
        cv::resize(panel, panel, cv::Size(grid.cell, grid.cell), 0, 0, cv::INTER_NEAREST);
        panel.copyTo(canvas(cv::Rect(c * grid.cell, row * grid.cell, grid.cell, grid.cell)));
      }
      ++row;
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  cv::Mat bgr;
  cv::cvtColor(canvas, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr))
    throw std::runtime_error("cannot write mask grid to '" + path.string() + "'");
  return grid;
}

#define VIRDA_INSTANTIATE_ARTIFACTS(S)                                                          \
  template struct DomainSlice<S>;                                                               \
  template void save_artifact(const Model<S>&, Domain, const std::filesystem::path&,            \
                              const std::string&, const std::string&, bool);                    \
  template DomainSlice<S> load_artifact(const std::filesystem::path&, const FrozenBackbone<S>&); \
  template ParamReport count_trainable(const Model<S>&);                                        \
  template std::vector<cv::Mat> render_mask_panels(const VRLayer<S>&, const cv::Mat&,           \
                                                   const Normalization&);                       \
  template MaskGrid export_masks(const Model<S>&, const std::vector<MaskSample>&,               \
                                 const std::filesystem::path&, const Normalization&,            \
                                 const Model<S>*);

VIRDA_INSTANTIATE_ARTIFACTS(float)
VIRDA_INSTANTIATE_ARTIFACTS(double)

#undef VIRDA_INSTANTIATE_ARTIFACTS

}  // namespace virda
