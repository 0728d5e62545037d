#ifndef VIRDA_HEADS_HPP_
#define VIRDA_HEADS_HPP_

#include <string>
#include <vector>

#include "virda/parameter.hpp"
#include "virda/reprogram.hpp"
#include "virda/rng.hpp"
#include "virda/tensor.hpp"

namespace virda {

/// Stack of linear layers with ReLU between them and dropout(p) in front of
/// every linear layer.
template <typename Scalar>
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& prefix, std::vector<int> widths, double dropout, Rng& rng);

  struct Trace {
    std::vector<RowMatrix<Scalar>> inputs;   // input of each linear layer (after dropout)
    std::vector<RowMatrix<Scalar>> dropout;  // dropout multipliers, empty when inactive
    std::vector<RowMatrix<Scalar>> hidden;   // post-ReLU activations
  };

  RowMatrix<Scalar> forward(const RowMatrix<Scalar>& x, bool stochastic, Rng* rng,
                            Trace* trace = nullptr) const;
  RowMatrix<Scalar> backward(const Trace& trace, const RowMatrix<Scalar>& dout);

  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  const std::vector<int>& widths() const { return widths_; }

  ParamList<Scalar> parameters();
  ConstParamList<Scalar> parameters() const;

  double dropout_p = 0.0;
  std::vector<Parameter<Scalar>> weights;
  std::vector<Parameter<Scalar>> biases;

 private:
  std::vector<int> widths_;
};

struct ClassifierConfig {
  int input_dim = 64;
  int num_classes = 10;
  std::vector<int> hidden;  // empty: a single linear layer
  double dropout = 0.3;
};

/// f_C: dropout -> linear (-> ReLU -> dropout -> linear) -> softmax.
template <typename Scalar>
class Classifier {
 public:
  Classifier() = default;
  Classifier(Domain domain, const ClassifierConfig& config, Rng& rng);

  struct Trace {
    typename Mlp<Scalar>::Trace net;
    RowMatrix<Scalar> probs;
  };

  RowMatrix<Scalar> logits(const RowMatrix<Scalar>& z, bool stochastic, Rng* rng = nullptr,
                           typename Mlp<Scalar>::Trace* trace = nullptr) const;
  /// Row-stochastic k x |Y| probabilities.
  RowMatrix<Scalar> classify(const RowMatrix<Scalar>& z, bool stochastic, Rng* rng = nullptr,
                             Trace* trace = nullptr) const;
  /// Accumulates gradients from dL/dprobs; returns dL/dz.
  RowMatrix<Scalar> backward(const Trace& trace, const RowMatrix<Scalar>& dprobs);

  int num_classes() const { return config.num_classes; }
  ParamList<Scalar> parameters() { return net.parameters(); }
  ConstParamList<Scalar> parameters() const { return net.parameters(); }

  Domain domain = Domain::source;
  ClassifierConfig config;
  Mlp<Scalar> net;
};

/// f_domain: MLP with a logistic output, the probability that z is a source feature.
template <typename Scalar>
class DomainDiscriminator {
 public:
  DomainDiscriminator() = default;
  DomainDiscriminator(int input_dim, std::vector<int> hidden, Rng& rng);

  struct Trace {
    typename Mlp<Scalar>::Trace net;
    Vector<Scalar> out;
  };

  /// k outputs in (0, 1).
  Vector<Scalar> discriminate(const RowMatrix<Scalar>& z, Trace* trace = nullptr) const;
  RowMatrix<Scalar> backward(const Trace& trace, const Vector<Scalar>& dout);

  ParamList<Scalar> parameters() { return net.parameters(); }
  ConstParamList<Scalar> parameters() const { return net.parameters(); }

  Mlp<Scalar> net;
};

/// Identity forward; backward multiplies the upstream gradient by -lambda.
struct GradientReversalGate {
  double lambda = 1.0;

  template <typename Derived>
  const Derived& forward(const Derived& z) const {
    return z;
  }
  template <typename Derived>
  auto backward(const Eigen::MatrixBase<Derived>& upstream) const {
    return (upstream * static_cast<typename Derived::Scalar>(-lambda)).eval();
  }
};

/// Progress-dependent gate coefficient 2 / (1 + exp(-gamma p)) - 1, p in [0, 1].
double grl_ramp(double progress, double gamma = 10.0);

}  // namespace virda

#endif  // VIRDA_HEADS_HPP_
