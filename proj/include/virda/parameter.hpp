#ifndef VIRDA_PARAMETER_HPP_
#define VIRDA_PARAMETER_HPP_

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "virda/rng.hpp"
#include "virda/tensor.hpp"

namespace virda {

/// A named trainable (or frozen) tensor with its gradient accumulator.
/// Values are stored as a row-major matrix; vectors are single-row matrices.
template <typename Scalar>
struct Parameter {
  std::string name;
  RowMatrix<Scalar> value;
  RowMatrix<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Index rows, Index cols)
      : name(std::move(n)),
        value(RowMatrix<Scalar>::Zero(rows, cols)),
        grad(RowMatrix<Scalar>::Zero(rows, cols)) {}

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }

  auto as_vector() { return Eigen::Map<Vector<Scalar>>(value.data(), value.size()); }
  auto as_vector() const { return Eigen::Map<const Vector<Scalar>>(value.data(), value.size()); }
  auto grad_vector() { return Eigen::Map<Vector<Scalar>>(grad.data(), grad.size()); }
};

template <typename Scalar>
using ParamList = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
using ConstParamList = std::vector<const Parameter<Scalar>*>;

template <typename Scalar>
Index count_scalars(const ConstParamList<Scalar>& params) {
  Index total = 0;
  for (const auto* p : params) total += p->size();
  return total;
}

/// Uniform(-bound, bound) with bound = gain / sqrt(fan_in).
template <typename Scalar>
void fan_in_uniform(Parameter<Scalar>& p, int fan_in, Rng& rng, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(dist(rng));
}

/// He-normal init for ReLU stacks: N(0, 2 / fan_in).
template <typename Scalar>
void he_normal(Parameter<Scalar>& p, int fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
void zero_grads(const ParamList<Scalar>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace virda

#endif  // VIRDA_PARAMETER_HPP_
