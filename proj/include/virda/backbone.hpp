#ifndef VIRDA_BACKBONE_HPP_
#define VIRDA_BACKBONE_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "virda/safetensors.hpp"
#include "virda/tensor.hpp"

namespace virda {

enum class Arch { tiny, resnet18, resnet50, vit_b32 };

std::string to_string(Arch arch);
Arch parse_arch(const std::string& name);

/// Architecture facts that do not require instantiating weights.
struct BackboneInfo {
  Arch arch = Arch::tiny;
  int channels = 3;
  int height = 32;
  int width = 32;
  int feature_dim = 64;
  /// Learnable scalars of the architecture (normalization running statistics excluded).
  Index param_count = 0;
};

BackboneInfo describe_backbone(Arch arch);

/// A named frozen tensor. `shape` follows the serialized (PyTorch) layout;
/// `value` holds shape[0] rows.
template <typename Scalar>
struct Weight {
  std::string name;
  std::vector<std::int64_t> shape;
  RowMatrix<Scalar> value;
  bool buffer = false;  // running statistics, not a learnable parameter
};

namespace detail {
template <typename Scalar>
struct NetTrace {
  virtual ~NetTrace() = default;
};
template <typename Scalar>
class Network;
}  // namespace detail

/// Reusable feature extractor with immutable parameters. Gradients propagate
/// through it to its input; it never exposes mutable parameters, so no
/// optimizer can reach its weights.
template <typename Scalar>
class FrozenBackbone {
 public:
  struct Trace {
    std::unique_ptr<detail::NetTrace<Scalar>> state;
    int in_h = 0;
    int in_w = 0;
  };

  FrozenBackbone(FrozenBackbone&&) noexcept;
  FrozenBackbone& operator=(FrozenBackbone&&) noexcept;
  ~FrozenBackbone();

  const BackboneInfo& info() const { return info_; }
  Arch arch() const { return info_.arch; }
  int feature_dim() const { return info_.feature_dim; }
  bool frozen() const { return true; }

  /// k x D features for a normalized batch.
  RowMatrix<Scalar> extract_features(const FeatureMap<Scalar>& x) const;
  RowMatrix<Scalar> extract_features(const FeatureMap<Scalar>& x, Trace& trace) const;

  /// dL/dx given dL/dz for the batch recorded in `trace`.
  FeatureMap<Scalar> backward_input(const Trace& trace, const RowMatrix<Scalar>& dz) const;

  const std::vector<Weight<Scalar>>& weights() const;
  Index param_count() const;
  Index trainable_count() const { return 0; }
  /// SHA-256 over every tensor name, shape and float32 value.
  const std::string& checksum() const { return checksum_; }
  /// Recomputes the hash from the current weight storage.
  std::string recompute_checksum() const;

  template <typename S>
  friend FrozenBackbone<S> make_backbone(Arch, std::uint64_t);
  template <typename S>
  friend FrozenBackbone<S> backbone_from_archive(Arch, const TensorArchive&, const std::string&);
  template <typename S>
  friend FrozenBackbone<S> load_backbone(Arch, const std::optional<std::filesystem::path>&,
                                         std::uint64_t);

 private:
  FrozenBackbone(BackboneInfo info, std::unique_ptr<detail::Network<Scalar>> net);
  void check_input(const FeatureMap<Scalar>& x) const;

  BackboneInfo info_;
  std::unique_ptr<detail::Network<Scalar>> net_;
  std::string checksum_;
};

/// Randomly initialized backbone of the given architecture (seeded). The tiny
/// backbone is always built this way; the others are used for structure tests.
template <typename Scalar>
FrozenBackbone<Scalar> make_backbone(Arch arch, std::uint64_t seed = 0);

/// Loads pretrained weights from a safetensors file (torchvision naming).
/// Without a locator only the tiny backbone is available.
template <typename Scalar>
FrozenBackbone<Scalar> load_backbone(Arch arch,
                                     const std::optional<std::filesystem::path>& weights,
                                     std::uint64_t seed = 0);

/// Builds a backbone from in-memory tensors (same naming and checks as load_backbone).
template <typename Scalar>
FrozenBackbone<Scalar> backbone_from_archive(Arch arch, const TensorArchive& archive,
                                             const std::string& origin = "<memory>");

/// Writes backbone weights to a safetensors file loadable by load_backbone.
template <typename Scalar>
void save_backbone_weights(const FrozenBackbone<Scalar>& backbone,
                           const std::filesystem::path& path);

}  // namespace virda

#endif  // VIRDA_BACKBONE_HPP_
