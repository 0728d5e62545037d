#include "virda/pretrain.hpp"

#include <algorithm>
#include <numeric>

#include "virda/objectives.hpp"
#include "virda/ops.hpp"
#include "virda/optim.hpp"

namespace virda {

namespace {

// Mirrors the tiny backbone: stride-2 3x3 conv + ReLU blocks, global average pool.
constexpr int kWidths[] = {3, 16, 32, 64, 64};
constexpr int kLayers = 4;

}  // namespace

PretrainResult pretrain_tiny(const DomainDataset& ds, const PretrainOptions& options) {
  if (!ds.has_labels()) throw DataError("pretraining needs labels");
  if (ds.height != 32 || ds.width != 32) throw ConfigError("the tiny backbone takes 32x32 inputs");
  if (options.epochs < 1 || options.batch_size < 1) throw ConfigError("invalid pretraining schedule");
  const int classes = ds.num_classes();
  Rng rng(derive_seed(options.seed, 0x9E7));

  std::vector<Parameter<float>> weights, biases;
  for (int l = 0; l < kLayers; ++l) {
    weights.emplace_back("features." + std::to_string(l) + ".weight", kWidths[l + 1],
                         kWidths[l] * 9);
    he_normal(weights.back(), kWidths[l] * 9, rng);
    biases.emplace_back("features." + std::to_string(l) + ".bias", 1, kWidths[l + 1]);
  }
  Parameter<float> head_w("head.weight", classes, kWidths[kLayers]);
  Parameter<float> head_b("head.bias", 1, classes);
  fan_in_uniform(head_w, kWidths[kLayers], rng);

  ParamList<float> params;
  for (int l = 0; l < kLayers; ++l) {
    params.push_back(&weights[static_cast<std::size_t>(l)]);
    params.push_back(&biases[static_cast<std::size_t>(l)]);
  }
  params.push_back(&head_w);
  params.push_back(&head_b);
  AdamW<float> opt({{"pretrain", options.lr, params}}, 0.9, 0.999, 1e-8, 1e-4);

  const Normalization norm = normalization_for(Arch::tiny);
  const ops::ConvGeometry g{3, 2, 1};
  PretrainResult result;
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t correct = 0, seen = 0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const bool strong = options.augment && epoch % 2 == 1;
    const bool last_epoch = epoch + 1 == options.epochs;
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(options.batch_size)) {
      const std::vector<std::size_t> idx(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(
                              std::min(order.size(), start + std::size_t(options.batch_size))));
      FeatureMap<float> h = load_batch<float>(
          ds, idx, norm, strong ? View::strong : View::plain,
          derive_seed(options.seed, static_cast<std::uint64_t>(epoch), start));
      const std::vector<int> labels = gather_labels(ds, idx);

      std::vector<FeatureMap<float>> inputs, acts;
      for (int l = 0; l < kLayers; ++l) {
        inputs.push_back(h);
        const auto& lw = weights[static_cast<std::size_t>(l)];
        const auto& lb = biases[static_cast<std::size_t>(l)];
        h = ops::conv2d(h, lw.value, &lb.value, g);
        h.data = ops::relu(h.data);
        acts.push_back(h);
      }
      const RowMatrix<float> z = ops::global_avg_pool(h);
      const RowMatrix<float> probs =
          ops::softmax_rows(ops::linear(z, head_w.value, &head_b.value));
      RowMatrix<float> dprobs;
      loss_sum += static_cast<double>(loss_sup(probs, labels, &dprobs));
      ++batches;
      if (last_epoch) {
        for (Index i = 0; i < probs.rows(); ++i)
          if (argmax_row(probs.row(i)) == labels[static_cast<std::size_t>(i)]) ++correct;
        seen += idx.size();
      }

      zero_grads(params);
      const RowMatrix<float> dlogits = ops::softmax_backward(probs, dprobs);
      ops::linear_backward_params(z, dlogits, head_w.grad, &head_b.grad);
      FeatureMap<float> d =
          ops::global_avg_pool_backward(ops::linear_backward_input(head_w.value, dlogits),
                                        h.h, h.w);
      for (int l = kLayers; l-- > 0;) {
        const auto li = static_cast<std::size_t>(l);
        d.data = ops::relu_backward(acts[li].data, d.data);
        ops::conv2d_backward_params(inputs[li], d, g, weights[li].grad, &biases[li].grad);
        if (l > 0)
          d = ops::conv2d_backward_input(weights[li].value, d, g, kWidths[l], inputs[li].h,
                                         inputs[li].w);
      }
      opt.step();
    }
    result.epoch_loss.push_back(loss_sum / batches);
  }
  result.train_accuracy = seen > 0 ? double(correct) / double(seen) : 0.0;

  result.weights.metadata["arch"] = "tiny";
  for (int l = 0; l < kLayers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    result.weights.add(weights[li].name, weights[li].value,
                       {kWidths[l + 1], kWidths[l], 3, 3});
    result.weights.add(biases[li].name, biases[li].value, {kWidths[l + 1]});
  }
  return result;
}

template <typename Scalar>
FrozenBackbone<Scalar> pretrained_tiny_backbone(std::uint64_t seed, int count,
                                                const PretrainOptions& options) {
  PretrainOptions o = options;
  o.seed = seed;
  const PretrainResult r = pretrain_tiny(make_pretraining_set(seed, count), o);
  return backbone_from_archive<Scalar>(Arch::tiny, r.weights, "pretrained tiny backbone");
}

template FrozenBackbone<float> pretrained_tiny_backbone<float>(std::uint64_t, int,
                                                               const PretrainOptions&);
template FrozenBackbone<double> pretrained_tiny_backbone<double>(std::uint64_t, int,
                                                                const PretrainOptions&);

}  // namespace virda
