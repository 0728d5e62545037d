#include "virda/heads.hpp"

#include <cmath>

#include "virda/ops.hpp"

namespace virda {

template <typename Scalar>
Mlp<Scalar>::Mlp(const std::string& prefix, std::vector<int> widths, double dropout, Rng& rng)
    : dropout_p(dropout), widths_(std::move(widths)) {
  if (widths_.size() < 2) throw ConfigError(prefix + ": an MLP needs at least one layer");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError(prefix + ": dropout must lie in [0, 1)");
  const std::size_t layers = widths_.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string base = prefix + ".fc" + std::to_string(l);
    weights.emplace_back(base + ".weight", widths_[l + 1], widths_[l]);
    biases.emplace_back(base + ".bias", 1, widths_[l + 1]);
    if (l + 1 < layers) {
      he_normal(weights.back(), widths_[l], rng);
    } else {
      fan_in_uniform(weights.back(), widths_[l], rng);
    }
  }
}

template <typename Scalar>
RowMatrix<Scalar> Mlp<Scalar>::forward(const RowMatrix<Scalar>& x, bool stochastic, Rng* rng,
                                       Trace* trace) const {
  if (x.cols() != input_dim()) {
    throw ConfigError("layer expects " + std::to_string(input_dim()) + " features, got " +
                      std::to_string(x.cols()));
  }
  const bool drop = stochastic && dropout_p > 0.0;
  if (drop && rng == nullptr) throw ConfigError("stochastic pass requires a random generator");
  RowMatrix<Scalar> h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (drop) {
      RowMatrix<Scalar> m = ops::dropout_mask<Scalar>(h.rows(), h.cols(), dropout_p, *rng);
      h = h.cwiseProduct(m);
      if (trace != nullptr) trace->dropout.push_back(std::move(m));
    }
    if (trace != nullptr) trace->inputs.push_back(h);
    h = ops::linear(h, weights[l].value, &biases[l].value);
    if (l + 1 < weights.size()) {
      h = ops::relu(h);
      if (trace != nullptr) trace->hidden.push_back(h);
    }
  }
  return h;
}

template <typename Scalar>
RowMatrix<Scalar> Mlp<Scalar>::backward(const Trace& trace, const RowMatrix<Scalar>& dout) {
  RowMatrix<Scalar> d = dout;
  for (std::size_t l = weights.size(); l-- > 0;) {
    ops::linear_backward_params(trace.inputs[l], d, weights[l].grad, &biases[l].grad);
    d = ops::linear_backward_input(weights[l].value, d);
    if (!trace.dropout.empty()) d = d.cwiseProduct(trace.dropout[l]);
    if (l > 0) d = ops::relu_backward(trace.hidden[l - 1], d);
  }
  return d;
}

template <typename Scalar>
ParamList<Scalar> Mlp<Scalar>::parameters() {
  ParamList<Scalar> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

template <typename Scalar>
ConstParamList<Scalar> Mlp<Scalar>::parameters() const {
  ConstParamList<Scalar> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
std::vector<int> stack_widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}
}  // namespace

template <typename Scalar>
Classifier<Scalar>::Classifier(Domain d, const ClassifierConfig& cfg, Rng& rng)
    : domain(d),
      config(cfg),
      net("classifier", stack_widths(cfg.input_dim, cfg.hidden, cfg.num_classes), cfg.dropout,
          rng) {
  if (cfg.num_classes < 2) throw ConfigError("classifier needs at least two classes");
}

template <typename Scalar>
RowMatrix<Scalar> Classifier<Scalar>::logits(const RowMatrix<Scalar>& z, bool stochastic, Rng* rng,
                                             typename Mlp<Scalar>::Trace* trace) const {
  return net.forward(z, stochastic, rng, trace);
}

template <typename Scalar>
RowMatrix<Scalar> Classifier<Scalar>::classify(const RowMatrix<Scalar>& z, bool stochastic,
                                               Rng* rng, Trace* trace) const {
  RowMatrix<Scalar> p = ops::softmax_rows<Scalar>(
      net.forward(z, stochastic, rng, trace != nullptr ? &trace->net : nullptr));
  if (trace != nullptr) trace->probs = p;
  return p;
}

template <typename Scalar>
RowMatrix<Scalar> Classifier<Scalar>::backward(const Trace& trace,
                                               const RowMatrix<Scalar>& dprobs) {
  return net.backward(trace.net, ops::softmax_backward(trace.probs, dprobs));
}

template <typename Scalar>
DomainDiscriminator<Scalar>::DomainDiscriminator(int input_dim, std::vector<int> hidden, Rng& rng)
    : net("discriminator", stack_widths(input_dim, hidden, 1), 0.0, rng) {}

template <typename Scalar>
Vector<Scalar> DomainDiscriminator<Scalar>::discriminate(const RowMatrix<Scalar>& z,
                                                         Trace* trace) const {
  RowMatrix<Scalar> logit = net.forward(z, false, nullptr, trace ? &trace->net : nullptr);
  Vector<Scalar> out = ops::sigmoid(logit.col(0));
  if (trace != nullptr) trace->out = out;
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> DomainDiscriminator<Scalar>::backward(const Trace& trace,
                                                        const Vector<Scalar>& dout) {
  RowMatrix<Scalar> dlogit =
      (dout.array() * trace.out.array() * (Scalar(1) - trace.out.array())).matrix();
  return net.backward(trace.net, dlogit);
}

double grl_ramp(double progress, double gamma) {
  return 2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0;
}

template class Mlp<float>;
template class Mlp<double>;
template class Classifier<float>;
template class Classifier<double>;
template class DomainDiscriminator<float>;
template class DomainDiscriminator<double>;

}  // namespace virda
