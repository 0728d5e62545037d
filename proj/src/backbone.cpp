#include "virda/backbone.hpp"

#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "virda/hash.hpp"
#include "virda/ops.hpp"
#include "virda/rng.hpp"
#include "virda/safetensors.hpp"

namespace virda {

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::tiny: return "tiny";
    case Arch::resnet18: return "resnet18";
    case Arch::resnet50: return "resnet50";
    case Arch::vit_b32: return "vit_b32";
  }
  return "unknown";
}

Arch parse_arch(const std::string& name) {
  if (name == "tiny") return Arch::tiny;
  if (name == "resnet18") return Arch::resnet18;
  if (name == "resnet50") return Arch::resnet50;
  if (name == "vit_b32") return Arch::vit_b32;
  throw ConfigError("unknown backbone architecture '" + name +
                    "' (expected tiny|resnet18|resnet50|vit_b32)");
}

namespace detail {

template <typename Scalar>
class Network {
 public:
  explicit Network(bool allocate) : allocate_(allocate) {}
  virtual ~Network() = default;

  virtual RowMatrix<Scalar> forward(const FeatureMap<Scalar>& x,
                                    std::unique_ptr<NetTrace<Scalar>>* trace) const = 0;
  virtual FeatureMap<Scalar> backward(const NetTrace<Scalar>& trace, const RowMatrix<Scalar>& dz,
                                      int in_h, int in_w) const = 0;
  /// Called once all weights hold their final values.
  virtual void finalize() {}
  /// Seeded random initialization of every weight.
  virtual void randomize(Rng& rng) = 0;

  std::vector<Weight<Scalar>> weights;

 protected:
  int add(const std::string& name, std::vector<std::int64_t> shape, bool buffer = false) {
    Weight<Scalar> w;
    w.name = name;
    w.shape = std::move(shape);
    w.buffer = buffer;
    if (allocate_) {
      const std::int64_t rows = w.shape.front();
      const std::int64_t total = std::accumulate(w.shape.begin(), w.shape.end(), std::int64_t{1},
                                                 std::multiplies<>());
      w.value = RowMatrix<Scalar>::Zero(rows, total / rows);
    }
    weights.push_back(std::move(w));
    return static_cast<int>(weights.size()) - 1;
  }
  const RowMatrix<Scalar>& value(int idx) const {
    return weights[static_cast<std::size_t>(idx)].value;
  }
  RowMatrix<Scalar>& value(int idx) { return weights[static_cast<std::size_t>(idx)].value; }

  void fill_normal(int idx, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto& v = value(idx);
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(dist(rng));
  }

  bool allocate_;
};

namespace {

std::int64_t fan_in_of(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin() + 1, shape.end(), std::int64_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tiny: four stride-2 3x3 conv + ReLU blocks and global average pooling.

constexpr std::array<int, 5> kTinyWidths = {3, 16, 32, 64, 64};

template <typename Scalar>
struct TinyTrace : NetTrace<Scalar> {
  std::vector<FeatureMap<Scalar>> activations;
};

template <typename Scalar>
class TinyNet : public Network<Scalar> {
 public:
  explicit TinyNet(bool allocate) : Network<Scalar>(allocate) {
    for (std::size_t l = 0; l + 1 < kTinyWidths.size(); ++l) {
      const std::string base = "features." + std::to_string(l);
      w_.push_back(this->add(base + ".weight", {kTinyWidths[l + 1], kTinyWidths[l], 3, 3}));
      b_.push_back(this->add(base + ".bias", {kTinyWidths[l + 1]}));
    }
  }

  void randomize(Rng& rng) override {
    for (std::size_t l = 0; l < w_.size(); ++l) {
      this->fill_normal(w_[l], std::sqrt(2.0 / (kTinyWidths[l] * 9)), rng);
      this->value(b_[l]).setZero();
    }
  }

  RowMatrix<Scalar> forward(const FeatureMap<Scalar>& x,
                            std::unique_ptr<NetTrace<Scalar>>* trace) const override {
    const ops::ConvGeometry g{3, 2, 1};
    auto state = std::make_unique<TinyTrace<Scalar>>();
    FeatureMap<Scalar> h = x;
    for (std::size_t l = 0; l < w_.size(); ++l) {
      RowMatrix<Scalar> bias = this->value(b_[l]).transpose();
      h = ops::conv2d(h, this->value(w_[l]), &bias, g);
      h.data = ops::relu(h.data);
      if (trace != nullptr) state->activations.push_back(h);
    }
    RowMatrix<Scalar> z = ops::global_avg_pool(h);
    if (trace != nullptr) *trace = std::move(state);
    return z;
  }

  FeatureMap<Scalar> backward(const NetTrace<Scalar>& base, const RowMatrix<Scalar>& dz,
                              int in_h, int in_w) const override {
    const auto& trace = static_cast<const TinyTrace<Scalar>&>(base);
    const ops::ConvGeometry g{3, 2, 1};
    const auto& last = trace.activations.back();
    FeatureMap<Scalar> d = ops::global_avg_pool_backward(dz, last.h, last.w);
    for (std::size_t l = w_.size(); l-- > 0;) {
      d.data = ops::relu_backward(trace.activations[l].data, d.data);
      const int h = l == 0 ? in_h : trace.activations[l - 1].h;
      const int w = l == 0 ? in_w : trace.activations[l - 1].w;
      d = ops::conv2d_backward_input(this->value(w_[l]), d, g, kTinyWidths[l], h, w);
    }
    return d;
  }

 private:
  std::vector<int> w_, b_;
};

// ---------------------------------------------------------------------------
// ResNet (torchvision layout, frozen batch-norm statistics folded into an
// affine transform).

template <typename Scalar>
struct ConvBN {
  int weight = -1;
  int bn = -1;  // index of bn.weight; bias, running_mean, running_var follow
  ops::ConvGeometry geometry;
  int in_channels = 0;
  Vector<Scalar> scale;
  Vector<Scalar> shift;
};

template <typename Scalar>
struct BlockTrace {
  int in_h = 0, in_w = 0;
  std::vector<FeatureMap<Scalar>> inner;  // post-ReLU maps inside the block
  FeatureMap<Scalar> out;                 // post-ReLU block output
};

template <typename Scalar>
struct ResNetTrace : NetTrace<Scalar> {
  FeatureMap<Scalar> stem;
  std::vector<Index> pool_argmax;
  std::vector<BlockTrace<Scalar>> blocks;
};

template <typename Scalar>
class ResNet : public Network<Scalar> {
 public:
  ResNet(bool allocate, bool bottleneck, std::array<int, 4> depths)
      : Network<Scalar>(allocate), bottleneck_(bottleneck) {
    stem_ = conv_bn("conv1", "bn1", 3, 64, {7, 2, 3});
    const int expansion = bottleneck ? 4 : 1;
    int in = 64;
    for (int stage = 0; stage < 4; ++stage) {
      const int planes = 64 << stage;
      for (int b = 0; b < depths[static_cast<std::size_t>(stage)]; ++b) {
        const int stride = (stage > 0 && b == 0) ? 2 : 1;
        const std::string base = "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
        Block blk;
        if (bottleneck) {
          blk.convs.push_back(conv_bn(base + ".conv1", base + ".bn1", in, planes, {1, 1, 0}));
          blk.convs.push_back(
              conv_bn(base + ".conv2", base + ".bn2", planes, planes, {3, stride, 1}));
          blk.convs.push_back(
              conv_bn(base + ".conv3", base + ".bn3", planes, planes * expansion, {1, 1, 0}));
        } else {
          blk.convs.push_back(conv_bn(base + ".conv1", base + ".bn1", in, planes, {3, stride, 1}));
          blk.convs.push_back(conv_bn(base + ".conv2", base + ".bn2", planes, planes, {3, 1, 1}));
        }
        if (stride != 1 || in != planes * expansion) {
          blk.downsample = conv_bn(base + ".downsample.0", base + ".downsample.1", in,
                                   planes * expansion, {1, stride, 0});
          blk.has_downsample = true;
        }
        blocks_.push_back(std::move(blk));
        in = planes * expansion;
      }
    }
  }

  void randomize(Rng& rng) override {
    for (auto& w : this->weights) {
      const std::string& n = w.name;
      if (n.ends_with("running_var") || (n.find("bn") != std::string::npos && n.ends_with("weight")) ||
          n.ends_with(".1.weight")) {
        w.value.setOnes();
      } else if (w.shape.size() == 4) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in_of(w.shape)));
        for (Index i = 0; i < w.value.size(); ++i)
          w.value.data()[i] = static_cast<Scalar>(dist(rng));
      } else {
        w.value.setZero();
      }
    }
  }

  void finalize() override {
    auto fold = [this](ConvBN<Scalar>& c) {
      const auto& gamma = this->value(c.bn);
      const auto& beta = this->value(c.bn + 1);
      const auto& mean = this->value(c.bn + 2);
      const auto& var = this->value(c.bn + 3);
      const Index ch = gamma.size();
      c.scale.resize(ch);
      c.shift.resize(ch);
      for (Index i = 0; i < ch; ++i) {
        c.scale(i) = gamma(i, 0) / std::sqrt(var(i, 0) + Scalar(1e-5));
        c.shift(i) = beta(i, 0) - mean(i, 0) * c.scale(i);
      }
    };
    fold(stem_);
    for (auto& b : blocks_) {
      for (auto& c : b.convs) fold(c);
      if (b.has_downsample) fold(b.downsample);
    }
  }

  RowMatrix<Scalar> forward(const FeatureMap<Scalar>& x,
                            std::unique_ptr<NetTrace<Scalar>>* trace) const override {
    auto state = std::make_unique<ResNetTrace<Scalar>>();
    FeatureMap<Scalar> h = apply(stem_, x);
    h.data = ops::relu(h.data);
    std::vector<Index> argmax;
    FeatureMap<Scalar> pooled = ops::max_pool(h, {3, 2, 1}, trace ? &argmax : nullptr);
    if (trace != nullptr) {
      state->stem = std::move(h);
      state->pool_argmax = std::move(argmax);
    }
    h = std::move(pooled);
    for (const auto& blk : blocks_) {
      BlockTrace<Scalar> bt;
      bt.in_h = h.h;
      bt.in_w = h.w;
      FeatureMap<Scalar> y = h;
      for (std::size_t i = 0; i < blk.convs.size(); ++i) {
        y = apply(blk.convs[i], y);
        if (i + 1 < blk.convs.size()) {
          y.data = ops::relu(y.data);
          if (trace != nullptr) bt.inner.push_back(y);
        }
      }
      if (blk.has_downsample) {
        y.data += apply(blk.downsample, h).data;
      } else {
        y.data += h.data;
      }
      y.data = ops::relu(y.data);
      if (trace != nullptr) {
        bt.out = y;
        state->blocks.push_back(std::move(bt));
      }
      h = std::move(y);
    }
    RowMatrix<Scalar> z = ops::global_avg_pool(h);
    if (trace != nullptr) *trace = std::move(state);
    return z;
  }

  FeatureMap<Scalar> backward(const NetTrace<Scalar>& base, const RowMatrix<Scalar>& dz,
                              int in_h, int in_w) const override {
    const auto& trace = static_cast<const ResNetTrace<Scalar>&>(base);
    const auto& last = trace.blocks.back().out;
    FeatureMap<Scalar> d = ops::global_avg_pool_backward(dz, last.h, last.w);
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      const Block& blk = blocks_[b];
      const BlockTrace<Scalar>& bt = trace.blocks[b];
      d.data = ops::relu_backward(bt.out.data, d.data);
      FeatureMap<Scalar> skip;
      if (blk.has_downsample) {
        skip = apply_backward(blk.downsample, d, bt.in_h, bt.in_w);
      } else {
        skip = d;
      }
      FeatureMap<Scalar> g = d;
      for (std::size_t i = blk.convs.size(); i-- > 0;) {
        const int h = i == 0 ? bt.in_h : bt.inner[i - 1].h;
        const int w = i == 0 ? bt.in_w : bt.inner[i - 1].w;
        g = apply_backward(blk.convs[i], g, h, w);
        if (i > 0) g.data = ops::relu_backward(bt.inner[i - 1].data, g.data);
      }
      g.data += skip.data;
      d = std::move(g);
    }
    d = ops::max_pool_backward(d, trace.pool_argmax, trace.stem.h, trace.stem.w);
    d.data = ops::relu_backward(trace.stem.data, d.data);
    return apply_backward(stem_, d, in_h, in_w);
  }

 private:
  struct Block {
    std::vector<ConvBN<Scalar>> convs;
    ConvBN<Scalar> downsample;
    bool has_downsample = false;
  };

  ConvBN<Scalar> conv_bn(const std::string& conv, const std::string& bn, int in, int out,
                         ops::ConvGeometry g) {
    ConvBN<Scalar> c;
    c.weight = this->add(conv + ".weight", {out, in, g.kernel, g.kernel});
    c.bn = this->add(bn + ".weight", {out});
    this->add(bn + ".bias", {out});
    this->add(bn + ".running_mean", {out}, true);
    this->add(bn + ".running_var", {out}, true);
    c.geometry = g;
    c.in_channels = in;
    return c;
  }

  FeatureMap<Scalar> apply(const ConvBN<Scalar>& c, const FeatureMap<Scalar>& x) const {
    FeatureMap<Scalar> y = ops::conv2d(x, this->value(c.weight), static_cast<const RowMatrix<Scalar>*>(nullptr), c.geometry);
    y.data = c.scale.asDiagonal() * y.data;
    y.data.colwise() += c.shift;
    return y;
  }

  FeatureMap<Scalar> apply_backward(const ConvBN<Scalar>& c, const FeatureMap<Scalar>& dy,
                                    int in_h, int in_w) const {
    FeatureMap<Scalar> scaled = dy;
    scaled.data = c.scale.asDiagonal() * dy.data;
    return ops::conv2d_backward_input(this->value(c.weight), scaled, c.geometry, c.in_channels,
                                      in_h, in_w);
  }

  bool bottleneck_;
  ConvBN<Scalar> stem_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// ViT-B/32 (torchvision layout): 32x32 patch embedding, class token, 12
// pre-norm encoder layers with 12-head self-attention and a GELU MLP.

constexpr int kVitDim = 768;
constexpr int kVitHeads = 12;
constexpr int kVitLayers = 12;
constexpr int kVitMlp = 3072;
constexpr int kVitPatch = 32;
constexpr int kVitImage = 224;
constexpr int kVitGrid = kVitImage / kVitPatch;
constexpr int kVitTokens = kVitGrid * kVitGrid + 1;

template <typename Scalar>
struct VitLayerTrace {
  RowMatrix<Scalar> ln1_hat, ln2_hat;
  Vector<Scalar> ln1_rstd, ln2_rstd;
  RowMatrix<Scalar> qkv;
  std::vector<RowMatrix<Scalar>> attn;  // per (sample, head), tokens x tokens
  RowMatrix<Scalar> mlp_pre;
};

template <typename Scalar>
struct VitTrace : NetTrace<Scalar> {
  int n = 0;
  std::vector<VitLayerTrace<Scalar>> layers;
  RowMatrix<Scalar> final_hat;
  Vector<Scalar> final_rstd;
};

template <typename Scalar>
class VisionTransformer : public Network<Scalar> {
 public:
  explicit VisionTransformer(bool allocate) : Network<Scalar>(allocate) {
    conv_w_ = this->add("conv_proj.weight", {kVitDim, 3, kVitPatch, kVitPatch});
    conv_b_ = this->add("conv_proj.bias", {kVitDim});
    cls_ = this->add("class_token", {1, 1, kVitDim});
    pos_ = this->add("encoder.pos_embedding", {1, kVitTokens, kVitDim});
    for (int l = 0; l < kVitLayers; ++l) {
      const std::string base = "encoder.layers.encoder_layer_" + std::to_string(l);
      Layer layer;
      layer.ln1_w = this->add(base + ".ln_1.weight", {kVitDim});
      layer.ln1_b = this->add(base + ".ln_1.bias", {kVitDim});
      layer.in_w = this->add(base + ".self_attention.in_proj_weight", {3 * kVitDim, kVitDim});
      layer.in_b = this->add(base + ".self_attention.in_proj_bias", {3 * kVitDim});
      layer.out_w = this->add(base + ".self_attention.out_proj.weight", {kVitDim, kVitDim});
      layer.out_b = this->add(base + ".self_attention.out_proj.bias", {kVitDim});
      layer.ln2_w = this->add(base + ".ln_2.weight", {kVitDim});
      layer.ln2_b = this->add(base + ".ln_2.bias", {kVitDim});
      layer.fc1_w = this->add(base + ".mlp.0.weight", {kVitMlp, kVitDim});
      layer.fc1_b = this->add(base + ".mlp.0.bias", {kVitMlp});
      layer.fc2_w = this->add(base + ".mlp.3.weight", {kVitDim, kVitMlp});
      layer.fc2_b = this->add(base + ".mlp.3.bias", {kVitDim});
      layers_.push_back(layer);
    }
    ln_w_ = this->add("encoder.ln.weight", {kVitDim});
    ln_b_ = this->add("encoder.ln.bias", {kVitDim});
  }

  void randomize(Rng& rng) override {
    for (auto& w : this->weights) {
      if (w.name.find("ln") != std::string::npos && w.name.ends_with("weight")) {
        w.value.setOnes();
      } else if (w.name.ends_with("bias")) {
        w.value.setZero();
      } else if (w.shape.size() == 4) {
        std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / fan_in_of(w.shape)));
        for (Index i = 0; i < w.value.size(); ++i)
          w.value.data()[i] = static_cast<Scalar>(dist(rng));
      } else {
        std::normal_distribution<double> dist(0.0, 0.02);
        for (Index i = 0; i < w.value.size(); ++i)
          w.value.data()[i] = static_cast<Scalar>(dist(rng));
      }
    }
  }

  void finalize() override {
    for (auto& l : layers_) {
      // Row vectors are stored as (d x 1); keep 1 x d copies for row broadcasting.
      l.rows.clear();
      for (int idx : {l.ln1_w, l.ln1_b, l.in_b, l.out_b, l.ln2_w, l.ln2_b, l.fc1_b, l.fc2_b})
        l.rows.push_back(this->value(idx).transpose());
    }
    conv_bias_row_ = this->value(conv_b_).transpose();
    ln_rows_ = {this->value(ln_w_).transpose(), this->value(ln_b_).transpose()};
  }

  RowMatrix<Scalar> forward(const FeatureMap<Scalar>& x,
                            std::unique_ptr<NetTrace<Scalar>>* trace) const override {
    const int n = x.n;
    auto state = std::make_unique<VitTrace<Scalar>>();
    state->n = n;
    const ops::ConvGeometry g{kVitPatch, kVitPatch, 0};
    FeatureMap<Scalar> patches = ops::conv2d(x, this->value(conv_w_), &conv_bias_row_, g);
    const int grid = kVitGrid * kVitGrid;
    const auto& pos = this->value(pos_);  // 1 x (tokens * dim)
    const auto& cls = this->value(cls_);
    RowMatrix<Scalar> tokens(Index(n) * kVitTokens, kVitDim);
    for (int i = 0; i < n; ++i) {
      for (int t = 0; t < kVitTokens; ++t) {
        auto row = tokens.row(Index(i) * kVitTokens + t);
        row = pos.block(0, Index(t) * kVitDim, 1, kVitDim);
        if (t == 0) {
          row += cls.block(0, 0, 1, kVitDim);
        } else {
          row += patches.data.col(Index(i) * grid + t - 1).transpose();
        }
      }
    }
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(kVitDim / kVitHeads));
    const int hd = kVitDim / kVitHeads;
    for (const auto& layer : layers_) {
      VitLayerTrace<Scalar> lt;
      RowMatrix<Scalar> y = ops::layer_norm(tokens, layer.rows[0], layer.rows[1], 1e-6,
                                            &lt.ln1_hat, &lt.ln1_rstd);
      RowMatrix<Scalar> qkv = ops::linear(y, this->value(layer.in_w), &layer.rows[2]);
      RowMatrix<Scalar> ctx(tokens.rows(), kVitDim);
      for (int i = 0; i < n; ++i) {
        for (int h = 0; h < kVitHeads; ++h) {
          const Index r0 = Index(i) * kVitTokens;
          auto q = qkv.block(r0, Index(h) * hd, kVitTokens, hd);
          auto k = qkv.block(r0, kVitDim + Index(h) * hd, kVitTokens, hd);
          auto v = qkv.block(r0, 2 * kVitDim + Index(h) * hd, kVitTokens, hd);
          RowMatrix<Scalar> p = ops::softmax_rows<Scalar>((q * k.transpose()) * scale);
          ctx.block(r0, Index(h) * hd, kVitTokens, hd).noalias() = p * v;
          if (trace != nullptr) lt.attn.push_back(std::move(p));
        }
      }
      tokens += ops::linear(ctx, this->value(layer.out_w), &layer.rows[3]);
      RowMatrix<Scalar> y2 = ops::layer_norm(tokens, layer.rows[4], layer.rows[5], 1e-6,
                                             &lt.ln2_hat, &lt.ln2_rstd);
      RowMatrix<Scalar> pre = ops::linear(y2, this->value(layer.fc1_w), &layer.rows[6]);
      tokens += ops::linear(ops::gelu(pre), this->value(layer.fc2_w), &layer.rows[7]);
      if (trace != nullptr) {
        lt.qkv = std::move(qkv);
        lt.mlp_pre = std::move(pre);
        state->layers.push_back(std::move(lt));
      }
    }
    RowMatrix<Scalar> hat;
    Vector<Scalar> rstd;
    RowMatrix<Scalar> out = ops::layer_norm(tokens, ln_rows_[0], ln_rows_[1], 1e-6, &hat, &rstd);
    RowMatrix<Scalar> z(n, kVitDim);
    for (int i = 0; i < n; ++i) z.row(i) = out.row(Index(i) * kVitTokens);
    if (trace != nullptr) {
      state->final_hat = std::move(hat);
      state->final_rstd = std::move(rstd);
      *trace = std::move(state);
    }
    return z;
  }

  FeatureMap<Scalar> backward(const NetTrace<Scalar>& base, const RowMatrix<Scalar>& dz,
                              int in_h, int in_w) const override {
    const auto& trace = static_cast<const VitTrace<Scalar>&>(base);
    const int n = trace.n;
    const int hd = kVitDim / kVitHeads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(hd));
    RowMatrix<Scalar> dout = RowMatrix<Scalar>::Zero(Index(n) * kVitTokens, kVitDim);
    for (int i = 0; i < n; ++i) dout.row(Index(i) * kVitTokens) = dz.row(i);
    RowMatrix<Scalar> d =
        ops::layer_norm_backward(trace.final_hat, trace.final_rstd, ln_rows_[0], dout);

    for (std::size_t li = layers_.size(); li-- > 0;) {
      const Layer& layer = layers_[li];
      const VitLayerTrace<Scalar>& lt = trace.layers[li];
      // MLP residual branch.
      RowMatrix<Scalar> dg = ops::linear_backward_input(this->value(layer.fc2_w), d);
      RowMatrix<Scalar> dpre = ops::gelu_backward(lt.mlp_pre, dg);
      RowMatrix<Scalar> dy2 = ops::linear_backward_input(this->value(layer.fc1_w), dpre);
      d += ops::layer_norm_backward(lt.ln2_hat, lt.ln2_rstd, layer.rows[4], dy2);
      // Attention residual branch.
      RowMatrix<Scalar> dctx = ops::linear_backward_input(this->value(layer.out_w), d);
      RowMatrix<Scalar> dqkv(dctx.rows(), 3 * kVitDim);
      std::size_t a = 0;
      for (int i = 0; i < n; ++i) {
        for (int h = 0; h < kVitHeads; ++h, ++a) {
          const Index r0 = Index(i) * kVitTokens;
          auto q = lt.qkv.block(r0, Index(h) * hd, kVitTokens, hd);
          auto k = lt.qkv.block(r0, kVitDim + Index(h) * hd, kVitTokens, hd);
          auto v = lt.qkv.block(r0, 2 * kVitDim + Index(h) * hd, kVitTokens, hd);
          const RowMatrix<Scalar>& p = lt.attn[a];
          RowMatrix<Scalar> dctx_h = dctx.block(r0, Index(h) * hd, kVitTokens, hd);
          RowMatrix<Scalar> dp = dctx_h * v.transpose();
          RowMatrix<Scalar> ds = ops::softmax_backward(p, dp) * scale;
          dqkv.block(r0, Index(h) * hd, kVitTokens, hd).noalias() = ds * k;
          dqkv.block(r0, kVitDim + Index(h) * hd, kVitTokens, hd).noalias() = ds.transpose() * q;
          dqkv.block(r0, 2 * kVitDim + Index(h) * hd, kVitTokens, hd).noalias() =
              p.transpose() * dctx_h;
        }
      }
      RowMatrix<Scalar> dy = ops::linear_backward_input(this->value(layer.in_w), dqkv);
      d += ops::layer_norm_backward(lt.ln1_hat, lt.ln1_rstd, layer.rows[0], dy);
    }

    const int grid = kVitGrid * kVitGrid;
    FeatureMap<Scalar> dpatch(n, kVitDim, kVitGrid, kVitGrid);
    for (int i = 0; i < n; ++i)
      for (int t = 1; t < kVitTokens; ++t)
        dpatch.data.col(Index(i) * grid + t - 1) = d.row(Index(i) * kVitTokens + t).transpose();
    return ops::conv2d_backward_input(this->value(conv_w_), dpatch,
                                      {kVitPatch, kVitPatch, 0}, 3, in_h, in_w);
  }

 private:
  struct Layer {
    int ln1_w, ln1_b, in_w, in_b, out_w, out_b, ln2_w, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    std::vector<RowMatrix<Scalar>> rows;
  };

  int conv_w_, conv_b_, cls_, pos_, ln_w_, ln_b_;
  std::vector<Layer> layers_;
  RowMatrix<Scalar> conv_bias_row_;
  std::vector<RowMatrix<Scalar>> ln_rows_;
};

template <typename Scalar>
std::unique_ptr<Network<Scalar>> make_network(Arch arch, bool allocate) {
  switch (arch) {
    case Arch::tiny: return std::make_unique<TinyNet<Scalar>>(allocate);
    case Arch::resnet18:
      return std::make_unique<ResNet<Scalar>>(allocate, false, std::array<int, 4>{2, 2, 2, 2});
    case Arch::resnet50:
      return std::make_unique<ResNet<Scalar>>(allocate, true, std::array<int, 4>{3, 4, 6, 3});
    case Arch::vit_b32: return std::make_unique<VisionTransformer<Scalar>>(allocate);
  }
  throw ConfigError("unknown architecture");
}

}  // namespace
}  // namespace detail

namespace {

template <typename Scalar>
Index learnable_count(const std::vector<Weight<Scalar>>& weights) {
  Index total = 0;
  for (const auto& w : weights) {
    if (w.buffer) continue;
    total += std::accumulate(w.shape.begin(), w.shape.end(), Index{1}, std::multiplies<>());
  }
  return total;
}

template <typename Scalar>
std::string sha256_of(const std::vector<Weight<Scalar>>& weights) {
  Sha256 h;
  for (const auto& w : weights) {
    h.update(w.name);
    for (std::int64_t s : w.shape) h.update_value(s);
    std::vector<float> values(static_cast<std::size_t>(w.value.size()));
    for (Index i = 0; i < w.value.size(); ++i)
      values[static_cast<std::size_t>(i)] = static_cast<float>(w.value.data()[i]);
    h.update(values.data(), values.size() * sizeof(float));
  }
  return h.hex_digest();
}

BackboneInfo base_info(Arch arch) {
  BackboneInfo info;
  info.arch = arch;
  switch (arch) {
    case Arch::tiny:
      info.height = info.width = 32;
      info.feature_dim = detail::kTinyWidths.back();
      break;
    case Arch::resnet18:
      info.height = info.width = 224;
      info.feature_dim = 512;
      break;
    case Arch::resnet50:
      info.height = info.width = 224;
      info.feature_dim = 2048;
      break;
    case Arch::vit_b32:
      info.height = info.width = detail::kVitImage;
      info.feature_dim = detail::kVitDim;
      break;
  }
  return info;
}

}  // namespace

BackboneInfo describe_backbone(Arch arch) {
  BackboneInfo info = base_info(arch);
  auto net = detail::make_network<float>(arch, false);
  info.param_count = learnable_count(net->weights);
  return info;
}

template <typename Scalar>
FrozenBackbone<Scalar>::FrozenBackbone(BackboneInfo info,
                                       std::unique_ptr<detail::Network<Scalar>> net)
    : info_(info), net_(std::move(net)) {
  net_->finalize();
  info_.param_count = learnable_count(net_->weights);
  checksum_ = sha256_of(net_->weights);
}

template <typename Scalar>
FrozenBackbone<Scalar>::FrozenBackbone(FrozenBackbone&&) noexcept = default;
template <typename Scalar>
FrozenBackbone<Scalar>& FrozenBackbone<Scalar>::operator=(FrozenBackbone&&) noexcept = default;
template <typename Scalar>
FrozenBackbone<Scalar>::~FrozenBackbone() = default;

template <typename Scalar>
void FrozenBackbone<Scalar>::check_input(const FeatureMap<Scalar>& x) const {
  if (x.channels() != info_.channels) {
    throw ConfigError("backbone " + to_string(info_.arch) + " expects " +
                      std::to_string(info_.channels) + " channels, got " + x.shape_string());
  }
  const bool fixed_size = info_.arch == Arch::vit_b32 || info_.arch == Arch::tiny;
  if (fixed_size && (x.h != info_.height || x.w != info_.width)) {
    throw ConfigError("backbone " + to_string(info_.arch) + " expects " +
                      std::to_string(info_.height) + "x" + std::to_string(info_.width) +
                      " inputs, got " + x.shape_string());
  }
}

template <typename Scalar>
RowMatrix<Scalar> FrozenBackbone<Scalar>::extract_features(const FeatureMap<Scalar>& x) const {
  check_input(x);
  return net_->forward(x, nullptr);
}

template <typename Scalar>
RowMatrix<Scalar> FrozenBackbone<Scalar>::extract_features(const FeatureMap<Scalar>& x,
                                                           Trace& trace) const {
  check_input(x);
  trace.in_h = x.h;
  trace.in_w = x.w;
  return net_->forward(x, &trace.state);
}

template <typename Scalar>
FeatureMap<Scalar> FrozenBackbone<Scalar>::backward_input(const Trace& trace,
                                                          const RowMatrix<Scalar>& dz) const {
  if (!trace.state) throw ConfigError("backbone backward called without a recorded trace");
  if (dz.cols() != info_.feature_dim) throw ConfigError("backbone backward: feature dim mismatch");
  return net_->backward(*trace.state, dz, trace.in_h, trace.in_w);
}

template <typename Scalar>
const std::vector<Weight<Scalar>>& FrozenBackbone<Scalar>::weights() const {
  return net_->weights;
}

template <typename Scalar>
std::string FrozenBackbone<Scalar>::recompute_checksum() const {
  return sha256_of(net_->weights);
}

template <typename Scalar>
Index FrozenBackbone<Scalar>::param_count() const {
  return info_.param_count;
}

template <typename Scalar>
FrozenBackbone<Scalar> make_backbone(Arch arch, std::uint64_t seed) {
  auto net = detail::make_network<Scalar>(arch, true);
  Rng rng(derive_seed(seed, 0xBAC4B0E));
  net->randomize(rng);
  return FrozenBackbone<Scalar>(base_info(arch), std::move(net));
}

template <typename Scalar>
FrozenBackbone<Scalar> load_backbone(Arch arch,
                                     const std::optional<std::filesystem::path>& weights,
                                     std::uint64_t seed) {
  if (!weights) {
    if (arch == Arch::tiny) return make_backbone<Scalar>(arch, seed);
    throw ConfigError("backbone " + to_string(arch) +
                      " requires pretrained weights (pass a safetensors weight file)");
  }
  if (!std::filesystem::exists(*weights)) {
    throw ConfigError("backbone weight file '" + weights->string() + "' does not exist");
  }
  return backbone_from_archive<Scalar>(arch, read_safetensors(*weights), weights->string());
}

template <typename Scalar>
FrozenBackbone<Scalar> backbone_from_archive(Arch arch, const TensorArchive& archive,
                                             const std::string& origin) {
  auto net = detail::make_network<Scalar>(arch, true);
  for (auto& w : net->weights) {
    std::string name = w.name;
    if (!archive.contains(name)) {
      // Older torchvision releases name the ViT MLP layers linear_1 / linear_2.
      std::string alt = name;
      if (auto p = alt.find("mlp.0."); p != std::string::npos) alt.replace(p, 6, "mlp.linear_1.");
      if (auto p = alt.find("mlp.3."); p != std::string::npos) alt.replace(p, 6, "mlp.linear_2.");
      if (!archive.contains(alt)) {
        throw ConfigError("weight file '" + origin + "' lacks tensor '" + name + "'");
      }
      name = alt;
    }
    const TensorRecord& rec = archive.record(name);
    if (rec.shape != w.shape) {
      std::ostringstream msg;
      msg << "weight-shape mismatch for '" << w.name << "': expected [";
      for (auto s : w.shape) msg << s << ' ';
      msg << "], file has [";
      for (auto s : rec.shape) msg << s << ' ';
      msg << "]";
      throw ConfigError(msg.str());
    }
    w.value = archive.get<Scalar>(name);
  }
  return FrozenBackbone<Scalar>(base_info(arch), std::move(net));
}

template <typename Scalar>
void save_backbone_weights(const FrozenBackbone<Scalar>& backbone,
                           const std::filesystem::path& path) {
  TensorArchive archive;
  archive.metadata["arch"] = to_string(backbone.arch());
  for (const auto& w : backbone.weights()) {
    archive.add(w.name, RowMatrix<float>(w.value.template cast<float>()), w.shape);
  }
  write_safetensors(path, archive);
}

template class FrozenBackbone<float>;
template class FrozenBackbone<double>;
template FrozenBackbone<float> make_backbone<float>(Arch, std::uint64_t);
template FrozenBackbone<double> make_backbone<double>(Arch, std::uint64_t);
template FrozenBackbone<float> load_backbone<float>(Arch,
                                                    const std::optional<std::filesystem::path>&,
                                                    std::uint64_t);
template FrozenBackbone<double> load_backbone<double>(
    Arch, const std::optional<std::filesystem::path>&, std::uint64_t);
template FrozenBackbone<float> backbone_from_archive<float>(Arch, const TensorArchive&,
                                                            const std::string&);
template FrozenBackbone<double> backbone_from_archive<double>(Arch, const TensorArchive&,
                                                              const std::string&);
template void save_backbone_weights(const FrozenBackbone<float>&, const std::filesystem::path&);
template void save_backbone_weights(const FrozenBackbone<double>&, const std::filesystem::path&);

}  // namespace virda
