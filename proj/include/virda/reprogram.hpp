#ifndef VIRDA_REPROGRAM_HPP_
#define VIRDA_REPROGRAM_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "virda/parameter.hpp"
#include "virda/rng.hpp"
#include "virda/tensor.hpp"

namespace virda {

enum class Domain { source, target };

std::string to_string(Domain d);
Domain parse_domain(const std::string& name);

/// Shape and hyper-parameters shared by every part of one reprogramming layer.
struct VRConfig {
  int channels = 3;
  int height = 32;
  int width = 32;
  int depth = 5;           // number of 3x3 conv layers in the mask producer
  int patch_exponent = 4;  // mask patches are 2^patch_exponent pixels wide
  int hidden_width = 32;
  double mask_dropout = 0.5;
  int reduction = 8;
  bool use_coord = true;

  int patch_size() const { return 1 << patch_exponent; }
  /// Channel widths of the mask producer: channels -> hidden ... -> channels.
  std::vector<int> widths() const;
  void validate() const;
};

/// Coordinate attention producing row-wise (A_h) and column-wise (A_w)
/// multiplicative maps from axis-wise average-pooled features through a shared
/// bottleneck with reduction ratio r.
template <typename Scalar>
class CoordAttention {
 public:
  CoordAttention() = default;
  CoordAttention(int channels, int height, int width, int reduction, Rng& rng);

  struct Maps {
    RowMatrix<Scalar> a_h;  // channels x (n * h)
    RowMatrix<Scalar> a_w;  // channels x (n * w)
  };

  struct Trace {
    FeatureMap<Scalar> input;
    RowMatrix<Scalar> hidden_h;
    RowMatrix<Scalar> hidden_w;
    Maps maps;
  };

  Maps attention(const FeatureMap<Scalar>& x, Trace* trace = nullptr) const;

  /// Accumulates parameter gradients; returns dL/dx.
  FeatureMap<Scalar> backward(const Trace& trace, const FeatureMap<Scalar>& dout);

  void check_input(const FeatureMap<Scalar>& x) const;

  ParamList<Scalar> parameters();
  ConstParamList<Scalar> parameters() const;

  int channels = 0;
  int height = 0;
  int width = 0;
  int hidden = 0;
  Parameter<Scalar> squeeze_weight;
  Parameter<Scalar> squeeze_bias;
  Parameter<Scalar> proj_h_weight;
  Parameter<Scalar> proj_h_bias;
  Parameter<Scalar> proj_w_weight;
  Parameter<Scalar> proj_w_bias;
};

/// Fully convolutional mask producer: depth 3x3 convolutions (padding 1), ReLU
/// and dropout between layers, patch-wise averaging and a logistic squash.
template <typename Scalar>
class MaskProducer {
 public:
  MaskProducer() = default;
  MaskProducer(const VRConfig& config, Rng& rng);

  struct Trace {
    std::vector<FeatureMap<Scalar>> layer_inputs;
    std::vector<RowMatrix<Scalar>> activations;  // post-ReLU, pre-dropout
    std::vector<RowMatrix<Scalar>> dropout;
    FeatureMap<Scalar> mask;
  };

  FeatureMap<Scalar> produce(const FeatureMap<Scalar>& x, bool stochastic, Rng* rng,
                             Trace* trace = nullptr) const;

  FeatureMap<Scalar> backward(const Trace& trace, const FeatureMap<Scalar>& dmask);

  ParamList<Scalar> parameters();
  ConstParamList<Scalar> parameters() const;

  int patch = 1;
  double dropout_p = 0.0;
  std::vector<Parameter<Scalar>> weights;
  std::vector<Parameter<Scalar>> biases;
};

/// Per-domain visual reprogramming layer:
///   out = coord(x) + pattern * mask(coord(x)).
template <typename Scalar>
class VRLayer {
 public:
  VRLayer() = default;
  VRLayer(Domain domain, const VRConfig& config, std::uint64_t seed);

  struct Trace {
    typename CoordAttention<Scalar>::Trace coord;
    FeatureMap<Scalar> attended;
    typename MaskProducer<Scalar>::Trace mask;
  };

  FeatureMap<Scalar> apply(const FeatureMap<Scalar>& x, bool stochastic, Rng* rng,
                           Trace* trace = nullptr) const;

  /// Accumulates gradients of every layer parameter; returns dL/dx.
  FeatureMap<Scalar> backward(const Trace& trace, const FeatureMap<Scalar>& dout);

  FeatureMap<Scalar> attend(const FeatureMap<Scalar>& x,
                            typename CoordAttention<Scalar>::Trace* trace = nullptr) const;

  ParamList<Scalar> parameters();
  ConstParamList<Scalar> parameters() const;

  Domain domain = Domain::source;
  VRConfig config;
  CoordAttention<Scalar> coord;
  MaskProducer<Scalar> mask;
  Parameter<Scalar> pattern;  // channels x (h * w), broadcast over the batch
};

/// x * A_h * A_w with each map broadcast along its missing spatial axis.
template <typename Scalar>
FeatureMap<Scalar> coord_modulate(const FeatureMap<Scalar>& x, const RowMatrix<Scalar>& a_h,
                                  const RowMatrix<Scalar>& a_w);

/// attended + pattern * mask, with the pattern broadcast over the batch.
template <typename Scalar>
FeatureMap<Scalar> reprogram_combine(const FeatureMap<Scalar>& attended,
                                     const RowMatrix<Scalar>& pattern,
                                     const FeatureMap<Scalar>& mask);

template <typename Scalar>
FeatureMap<Scalar> apply_coord(const FeatureMap<Scalar>& x, const CoordAttention<Scalar>& ca) {
  ca.check_input(x);
  auto maps = ca.attention(x);
  return coord_modulate(x, maps.a_h, maps.a_w);
}

template <typename Scalar>
FeatureMap<Scalar> produce_mask(const FeatureMap<Scalar>& x, const MaskProducer<Scalar>& mp,
                                bool stochastic, Rng* rng = nullptr) {
  return mp.produce(x, stochastic, rng);
}

template <typename Scalar>
FeatureMap<Scalar> apply_vr(const FeatureMap<Scalar>& x, const VRLayer<Scalar>& layer,
                            bool stochastic, Rng* rng = nullptr) {
  return layer.apply(x, stochastic, rng);
}

template <typename Scalar>
Index vr_param_count(const VRLayer<Scalar>& layer) {
  return count_scalars(layer.parameters());
}

}  // namespace virda

#endif  // VIRDA_REPROGRAM_HPP_
