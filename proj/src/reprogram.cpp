#include "virda/reprogram.hpp"

#include <algorithm>

#include "virda/ops.hpp"

namespace virda {

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& name) {
  if (name == "source") return Domain::source;
  if (name == "target") return Domain::target;
  throw ConfigError("unknown domain '" + name + "' (expected source|target)");
}

std::vector<int> VRConfig::widths() const {
  std::vector<int> w(static_cast<std::size_t>(depth) + 1, hidden_width);
  w.front() = channels;
  w.back() = channels;
  return w;
}

void VRConfig::validate() const {
  if (channels <= 0 || height <= 0 || width <= 0) throw ConfigError("VRConfig: empty image shape");
  if (depth < 1) throw ConfigError("VRConfig: mask producer depth must be >= 1");
  if (hidden_width < 1) throw ConfigError("VRConfig: hidden width must be >= 1");
  if (patch_exponent < 0) throw ConfigError("VRConfig: patch exponent must be >= 0");
  if (reduction < 1) throw ConfigError("VRConfig: reduction ratio must be >= 1");
  if (mask_dropout < 0.0 || mask_dropout >= 1.0)
    throw ConfigError("VRConfig: mask dropout must lie in [0, 1)");
  const int p = patch_size();
  if (height % p != 0 || width % p != 0) {
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by the mask patch size " + std::to_string(p) +
                      "; resize the input images in the data pipeline");
  }
}

// ---------------------------------------------------------------------------
// CoordAttention

template <typename Scalar>
CoordAttention<Scalar>::CoordAttention(int c, int h, int w, int reduction, Rng& rng)
    : channels(c),
      height(h),
      width(w),
      hidden(std::max(8, c / reduction)),
      squeeze_weight("coord.squeeze.weight", hidden, c),
      squeeze_bias("coord.squeeze.bias", 1, hidden),
      proj_h_weight("coord.proj_h.weight", c, hidden),
      proj_h_bias("coord.proj_h.bias", 1, c),
      proj_w_weight("coord.proj_w.weight", c, hidden),
      proj_w_bias("coord.proj_w.bias", 1, c) {
  he_normal(squeeze_weight, c, rng);
  // Both maps start near sigmoid(3) ~ 0.95 so the layer begins close to the
  // identity and the frozen backbone sees inputs at their usual scale.
  fan_in_uniform(proj_h_weight, hidden, rng, 0.1);
  fan_in_uniform(proj_w_weight, hidden, rng, 0.1);
  proj_h_bias.value.setConstant(Scalar(3));
  proj_w_bias.value.setConstant(Scalar(3));
}

template <typename Scalar>
void CoordAttention<Scalar>::check_input(const FeatureMap<Scalar>& x) const {
  if (x.channels() != channels || x.h != height || x.w != width) {
    throw ConfigError("coordinate attention configured for " + std::to_string(channels) + "x" +
                      std::to_string(height) + "x" + std::to_string(width) + ", got input " +
                      x.shape_string());
  }
}

template <typename Scalar>
typename CoordAttention<Scalar>::Maps CoordAttention<Scalar>::attention(
    const FeatureMap<Scalar>& x, Trace* trace) const {
  check_input(x);
  const RowMatrix<Scalar> pooled_h = ops::mean_over_width(x);
  const RowMatrix<Scalar> pooled_w = ops::mean_over_height(x);

  RowMatrix<Scalar> hidden_h = squeeze_weight.value * pooled_h;
  hidden_h.colwise() += squeeze_bias.value.row(0).transpose();
  hidden_h = ops::relu(hidden_h);
  RowMatrix<Scalar> hidden_w = squeeze_weight.value * pooled_w;
  hidden_w.colwise() += squeeze_bias.value.row(0).transpose();
  hidden_w = ops::relu(hidden_w);

  RowMatrix<Scalar> logit_h = proj_h_weight.value * hidden_h;
  logit_h.colwise() += proj_h_bias.value.row(0).transpose();
  RowMatrix<Scalar> logit_w = proj_w_weight.value * hidden_w;
  logit_w.colwise() += proj_w_bias.value.row(0).transpose();

  Maps maps{ops::sigmoid(logit_h), ops::sigmoid(logit_w)};
  if (trace != nullptr) {
    trace->input = x;
    trace->hidden_h = std::move(hidden_h);
    trace->hidden_w = std::move(hidden_w);
    trace->maps = maps;
  }
  return maps;
}

template <typename Scalar>
FeatureMap<Scalar> CoordAttention<Scalar>::backward(const Trace& trace,
                                                    const FeatureMap<Scalar>& dout) {
  const FeatureMap<Scalar>& x = trace.input;
  const RowMatrix<Scalar>& a_h = trace.maps.a_h;
  const RowMatrix<Scalar>& a_w = trace.maps.a_w;
  const int n = x.n, h = x.h, w = x.w;

  FeatureMap<Scalar> dx(n, channels, h, w);
  RowMatrix<Scalar> da_h = RowMatrix<Scalar>::Zero(channels, Index(n) * h);
  RowMatrix<Scalar> da_w = RowMatrix<Scalar>::Zero(channels, Index(n) * w);
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < n; ++i) {
      for (int y = 0; y < h; ++y) {
        const Scalar ah = a_h(c, Index(i) * h + y);
        for (int xx = 0; xx < w; ++xx) {
          const Scalar aw = a_w(c, Index(i) * w + xx);
          const Scalar g = dout.at(c, i, y, xx);
          const Scalar v = x.at(c, i, y, xx);
          dx.at(c, i, y, xx) = g * ah * aw;
          da_h(c, Index(i) * h + y) += g * v * aw;
          da_w(c, Index(i) * w + xx) += g * v * ah;
        }
      }
    }
  }

  const RowMatrix<Scalar> pooled_h = ops::mean_over_width(x);
  const RowMatrix<Scalar> pooled_w = ops::mean_over_height(x);

  auto branch = [&](const RowMatrix<Scalar>& da, const RowMatrix<Scalar>& a,
                    const RowMatrix<Scalar>& hidden_act, const RowMatrix<Scalar>& pooled,
                    Parameter<Scalar>& proj_w, Parameter<Scalar>& proj_b) {
    RowMatrix<Scalar> dlogit = (da.array() * a.array() * (Scalar(1) - a.array())).matrix();
    proj_w.grad.noalias() += dlogit * hidden_act.transpose();
    proj_b.grad.row(0) += dlogit.rowwise().sum().transpose();
    RowMatrix<Scalar> dhidden =
        ops::relu_backward<Scalar>(hidden_act, proj_w.value.transpose() * dlogit);
    squeeze_weight.grad.noalias() += dhidden * pooled.transpose();
    squeeze_bias.grad.row(0) += dhidden.rowwise().sum().transpose();
    return RowMatrix<Scalar>(squeeze_weight.value.transpose() * dhidden);
  };
  const RowMatrix<Scalar> dpool_h =
      branch(da_h, a_h, trace.hidden_h, pooled_h, proj_h_weight, proj_h_bias);
  const RowMatrix<Scalar> dpool_w =
      branch(da_w, a_w, trace.hidden_w, pooled_w, proj_w_weight, proj_w_bias);

  const Scalar inv_w = Scalar(1) / static_cast<Scalar>(w);
  const Scalar inv_h = Scalar(1) / static_cast<Scalar>(h);
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < n; ++i) {
      for (int y = 0; y < h; ++y) {
        const Scalar gh = dpool_h(c, Index(i) * h + y) * inv_w;
        for (int xx = 0; xx < w; ++xx) {
          dx.at(c, i, y, xx) += gh + dpool_w(c, Index(i) * w + xx) * inv_h;
        }
      }
    }
  }
  return dx;
}

template <typename Scalar>
ParamList<Scalar> CoordAttention<Scalar>::parameters() {
  return {&squeeze_weight, &squeeze_bias, &proj_h_weight,
          &proj_h_bias,    &proj_w_weight, &proj_w_bias};
}

template <typename Scalar>
ConstParamList<Scalar> CoordAttention<Scalar>::parameters() const {
  return {&squeeze_weight, &squeeze_bias, &proj_h_weight,
          &proj_h_bias,    &proj_w_weight, &proj_w_bias};
}

template <typename Scalar>
FeatureMap<Scalar> coord_modulate(const FeatureMap<Scalar>& x, const RowMatrix<Scalar>& a_h,
                                  const RowMatrix<Scalar>& a_w) {
  const int c = x.channels();
  if (a_h.rows() != c || a_w.rows() != c || a_h.cols() != Index(x.n) * x.h ||
      a_w.cols() != Index(x.n) * x.w) {
    throw ConfigError("coord_modulate: attention maps do not match input " + x.shape_string());
  }
  FeatureMap<Scalar> out(x.n, c, x.h, x.w);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < x.n; ++i) {
      for (int y = 0; y < x.h; ++y) {
        const Scalar ah = a_h(ch, Index(i) * x.h + y);
        for (int xx = 0; xx < x.w; ++xx) {
          out.at(ch, i, y, xx) = x.at(ch, i, y, xx) * ah * a_w(ch, Index(i) * x.w + xx);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MaskProducer

template <typename Scalar>
MaskProducer<Scalar>::MaskProducer(const VRConfig& config, Rng& rng)
    : patch(config.patch_size()), dropout_p(config.mask_dropout) {
  const std::vector<int> widths = config.widths();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l] * 9;
    Parameter<Scalar> wt("mask.conv" + std::to_string(l) + ".weight", widths[l + 1], fan_in);
    Parameter<Scalar> b("mask.conv" + std::to_string(l) + ".bias", 1, widths[l + 1]);
    if (l + 2 < widths.size()) {
      he_normal(wt, fan_in, rng);
    } else {
      fan_in_uniform(wt, fan_in, rng);
    }
    weights.push_back(std::move(wt));
    biases.push_back(std::move(b));
  }
}

template <typename Scalar>
FeatureMap<Scalar> MaskProducer<Scalar>::produce(const FeatureMap<Scalar>& x, bool stochastic,
                                                 Rng* rng, Trace* trace) const {
  if (x.h % patch != 0 || x.w % patch != 0) {
    throw ConfigError("mask producer: image size " + std::to_string(x.h) + "x" +
                      std::to_string(x.w) + " is not divisible by patch size " +
                      std::to_string(patch) + "; resize the images before reprogramming");
  }
  if (stochastic && dropout_p > 0.0 && rng == nullptr) {
    throw ConfigError("mask producer: stochastic pass requires a random generator");
  }
  const ops::ConvGeometry g{3, 1, 1};
  const std::size_t depth = weights.size();
  if (trace != nullptr) {
    trace->layer_inputs.clear();
    trace->activations.clear();
    trace->dropout.clear();
  }
  FeatureMap<Scalar> h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    FeatureMap<Scalar> a = ops::conv2d(h, weights[l].value, &biases[l].value, g);
    if (trace != nullptr) trace->layer_inputs.push_back(std::move(h));
    if (l + 1 == depth) {
      h = std::move(a);
      break;
    }
    a.data = ops::relu(a.data);
    if (stochastic && dropout_p > 0.0) {
      RowMatrix<Scalar> keep =
          ops::dropout_mask<Scalar>(a.data.rows(), a.data.cols(), dropout_p, *rng);
      h = a;
      h.data.array() *= keep.array();
      if (trace != nullptr) trace->dropout.push_back(std::move(keep));
    } else {
      h = a;
      if (trace != nullptr) trace->dropout.emplace_back();
    }
    if (trace != nullptr) trace->activations.push_back(std::move(a.data));
  }
  FeatureMap<Scalar> mask = ops::patch_average(h, patch);
  mask.data = ops::sigmoid(mask.data);
  if (trace != nullptr) trace->mask = mask;
  return mask;
}

template <typename Scalar>
FeatureMap<Scalar> MaskProducer<Scalar>::backward(const Trace& trace,
                                                  const FeatureMap<Scalar>& dmask) {
  const ops::ConvGeometry g{3, 1, 1};
  const auto& m = trace.mask.data.array();
  FeatureMap<Scalar> dpooled = dmask;
  dpooled.data = (dmask.data.array() * m * (Scalar(1) - m)).matrix();
  FeatureMap<Scalar> dh = ops::patch_average(dpooled, patch);
  for (std::size_t l = weights.size(); l-- > 0;) {
    if (l + 1 < weights.size()) {
      RowMatrix<Scalar> dr = dh.data;
      if (trace.dropout[l].size() > 0) dr.array() *= trace.dropout[l].array();
      dh.data = ops::relu_backward(trace.activations[l], dr);
    }
    const FeatureMap<Scalar>& in = trace.layer_inputs[l];
    ops::conv2d_backward_params(in, dh, g, weights[l].grad, &biases[l].grad);
    dh = ops::conv2d_backward_input(weights[l].value, dh, g, in.channels(), in.h, in.w);
  }
  return dh;
}

template <typename Scalar>
ParamList<Scalar> MaskProducer<Scalar>::parameters() {
  ParamList<Scalar> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

template <typename Scalar>
ConstParamList<Scalar> MaskProducer<Scalar>::parameters() const {
  ConstParamList<Scalar> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// VRLayer

template <typename Scalar>
VRLayer<Scalar>::VRLayer(Domain d, const VRConfig& cfg, std::uint64_t seed)
    : domain(d), config(cfg) {
  config.validate();
  Rng rng(seed);
  coord = CoordAttention<Scalar>(cfg.channels, cfg.height, cfg.width, cfg.reduction, rng);
  mask = MaskProducer<Scalar>(cfg, rng);
  pattern = Parameter<Scalar>("pattern", cfg.channels, Index(cfg.height) * cfg.width);
}

template <typename Scalar>
FeatureMap<Scalar> VRLayer<Scalar>::attend(const FeatureMap<Scalar>& x,
                                           typename CoordAttention<Scalar>::Trace* trace) const {
  coord.check_input(x);
  if (!config.use_coord) return x;
  auto maps = coord.attention(x, trace);
  return coord_modulate(x, maps.a_h, maps.a_w);
}

template <typename Scalar>
FeatureMap<Scalar> VRLayer<Scalar>::apply(const FeatureMap<Scalar>& x, bool stochastic, Rng* rng,
                                          Trace* trace) const {
  if (trace == nullptr) {
    FeatureMap<Scalar> attended = attend(x);
    return reprogram_combine(attended, pattern.value, mask.produce(attended, stochastic, rng));
  }
  trace->attended = attend(x, &trace->coord);
  FeatureMap<Scalar> m = mask.produce(trace->attended, stochastic, rng, &trace->mask);
  return reprogram_combine(trace->attended, pattern.value, m);
}

template <typename Scalar>
FeatureMap<Scalar> VRLayer<Scalar>::backward(const Trace& trace, const FeatureMap<Scalar>& dout) {
  const FeatureMap<Scalar>& m = trace.mask.mask;
  const Index plane = dout.plane();
  FeatureMap<Scalar> dmask(dout.n, dout.channels(), dout.h, dout.w);
  for (int i = 0; i < dout.n; ++i) {
    auto g = dout.data.middleCols(Index(i) * plane, plane);
    pattern.grad.array() += g.array() * m.data.middleCols(Index(i) * plane, plane).array();
    dmask.data.middleCols(Index(i) * plane, plane) = (g.array() * pattern.value.array()).matrix();
  }
  FeatureMap<Scalar> dattended = mask.backward(trace.mask, dmask);
  dattended.data += dout.data;
  if (!config.use_coord) return dattended;
  return coord.backward(trace.coord, dattended);
}

template <typename Scalar>
ParamList<Scalar> VRLayer<Scalar>::parameters() {
  ParamList<Scalar> out{&pattern};
  for (auto* p : mask.parameters()) out.push_back(p);
  if (config.use_coord)
    for (auto* p : coord.parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
ConstParamList<Scalar> VRLayer<Scalar>::parameters() const {
  ConstParamList<Scalar> out{&pattern};
  for (const auto* p : mask.parameters()) out.push_back(p);
  if (config.use_coord)
    for (const auto* p : coord.parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> reprogram_combine(const FeatureMap<Scalar>& attended,
                                     const RowMatrix<Scalar>& pattern,
                                     const FeatureMap<Scalar>& mask) {
  require_same_shape(attended, mask, "reprogram_combine");
  const Index plane = attended.plane();
  if (pattern.rows() != attended.channels() || pattern.cols() != plane) {
    throw ConfigError("reprogram_combine: pattern shape does not match image " +
                      attended.shape_string());
  }
  FeatureMap<Scalar> out = attended;
  for (int i = 0; i < attended.n; ++i) {
    out.data.middleCols(Index(i) * plane, plane).array() +=
        pattern.array() * mask.data.middleCols(Index(i) * plane, plane).array();
  }
  return out;
}

template class CoordAttention<float>;
template class CoordAttention<double>;
template class MaskProducer<float>;
template class MaskProducer<double>;
template class VRLayer<float>;
template class VRLayer<double>;
template FeatureMap<float> coord_modulate(const FeatureMap<float>&, const RowMatrix<float>&,
                                          const RowMatrix<float>&);
template FeatureMap<double> coord_modulate(const FeatureMap<double>&, const RowMatrix<double>&,
                                           const RowMatrix<double>&);
template FeatureMap<float> reprogram_combine(const FeatureMap<float>&, const RowMatrix<float>&,
                                             const FeatureMap<float>&);
template FeatureMap<double> reprogram_combine(const FeatureMap<double>&, const RowMatrix<double>&,
                                              const FeatureMap<double>&);

}  // namespace virda
