#ifndef VIRDA_ARTIFACTS_HPP_
#define VIRDA_ARTIFACTS_HPP_

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "virda/data.hpp"
#include "virda/model.hpp"

namespace virda {

inline constexpr const char* kArtifactFormat = "virda-domain-artifact";
inline constexpr int kArtifactVersion = 1;
inline constexpr const char* kArtifactExtension = ".virda";

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The trainable state of one domain loaded back from disk.
template <typename Scalar>
struct DomainSlice {
  Domain domain = Domain::target;
  bool has_vr = true;
  VRLayer<Scalar> vr;
  Classifier<Scalar> classifier;
  std::map<std::string, std::string> metadata;

  RowMatrix<Scalar> predict(const FeatureMap<Scalar>& x,
                            const FrozenBackbone<Scalar>& backbone) const;
};

/// Writes the domain's reprogramming layer and classifier (no backbone
/// weights) plus metadata: format, version, domain, backbone id and checksum,
/// VR and classifier shapes, `config_text` and `metrics_json`.
template <typename Scalar>
void save_artifact(const Model<Scalar>& model, Domain domain, const std::filesystem::path& path,
                   const std::string& config_text = "", const std::string& metrics_json = "{}",
                   bool include_vr = true);

/// Refuses files of another format or version, and backbones whose checksum
/// or architecture differ from the recorded ones.
template <typename Scalar>
DomainSlice<Scalar> load_artifact(const std::filesystem::path& path,
                                  const FrozenBackbone<Scalar>& backbone);

struct ParamReport {
  std::vector<std::pair<std::string, Index>> components;
  Index total = 0;
  Index backbone_frozen = 0;
  Index backbone_trainable = 0;

  Index get(const std::string& component) const;
  std::string str() const;
};

template <typename Scalar>
ParamReport count_trainable(const Model<Scalar>& model);

struct MaskSample {
  Domain domain = Domain::source;
  cv::Mat image;  // float RGB in [0, 1] at the model input size
};

struct MaskGrid {
  int rows = 0;
  int cols = 0;
  int cell = 0;
};

/// Writes a lossless image grid with one row per sample (per checkpoint when
/// `before` is given): original | mask | reprogrammed. Masks are averaged
/// over channels and drawn 0 -> black, 1 -> white.
template <typename Scalar>
MaskGrid export_masks(const Model<Scalar>& model, const std::vector<MaskSample>& samples,
                      const std::filesystem::path& path, const Normalization& norm,
                      const Model<Scalar>* before = nullptr);

/// The three panels of one grid row as 8-bit images (RGB, gray, RGB).
template <typename Scalar>
std::vector<cv::Mat> render_mask_panels(const VRLayer<Scalar>& vr, const cv::Mat& image,
                                        const Normalization& norm);

}  // namespace virda

#endif  // VIRDA_ARTIFACTS_HPP_
