#ifndef VIRDA_OPS_HPP_
#define VIRDA_OPS_HPP_

#include <cmath>
#include <vector>

#include "virda/rng.hpp"
#include "virda/tensor.hpp"

// Functional building blocks with explicit backward rules. Every forward op is
// pure; backward ops either return an input gradient or accumulate (+=) into
// caller-owned parameter gradients.
namespace virda::ops {

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

template <typename Scalar>
RowMatrix<Scalar> im2col(const FeatureMap<Scalar>& x, const ConvGeometry& g);

template <typename Scalar>
FeatureMap<Scalar> col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, int n, int c,
                          int h, int w);

/// weight: out x (in * k * k) in [out][in][ky][kx] order; bias: 1 x out or nullptr.
template <typename Scalar>
FeatureMap<Scalar> conv2d(const FeatureMap<Scalar>& x, const RowMatrix<Scalar>& weight,
                          const RowMatrix<Scalar>* bias, const ConvGeometry& g);

template <typename Scalar>
FeatureMap<Scalar> conv2d_backward_input(const RowMatrix<Scalar>& weight,
                                         const FeatureMap<Scalar>& dy, const ConvGeometry& g,
                                         int in_channels, int in_h, int in_w);

template <typename Scalar>
void conv2d_backward_params(const FeatureMap<Scalar>& x, const FeatureMap<Scalar>& dy,
                            const ConvGeometry& g, RowMatrix<Scalar>& dweight,
                            RowMatrix<Scalar>* dbias);

template <typename Scalar>
FeatureMap<Scalar> max_pool(const FeatureMap<Scalar>& x, const ConvGeometry& g,
                            std::vector<Index>* argmax);

template <typename Scalar>
FeatureMap<Scalar> max_pool_backward(const FeatureMap<Scalar>& dy,
                                     const std::vector<Index>& argmax, int in_h, int in_w);

/// (c x n*h*w) -> (n x c)
template <typename Scalar>
RowMatrix<Scalar> global_avg_pool(const FeatureMap<Scalar>& x);

template <typename Scalar>
FeatureMap<Scalar> global_avg_pool_backward(const RowMatrix<Scalar>& dz, int h, int w);

/// Averages each non-overlapping patch x patch block and writes the mean back to
/// every pixel of the block (downsample + nearest upsample). The operator is
/// self-adjoint, so the same call implements its backward pass.
template <typename Scalar>
FeatureMap<Scalar> patch_average(const FeatureMap<Scalar>& x, int patch);

/// Row-wise mean over x (width) for every (channel, sample, row): c x (n*h).
template <typename Scalar>
RowMatrix<Scalar> mean_over_width(const FeatureMap<Scalar>& x);

/// Row-wise mean over y (height) for every (channel, sample, column): c x (n*w).
template <typename Scalar>
RowMatrix<Scalar> mean_over_height(const FeatureMap<Scalar>& x);

/// Inverted-dropout keep mask: entries are 0 or 1/(1-p).
template <typename Scalar>
RowMatrix<Scalar> dropout_mask(Index rows, Index cols, double p, Rng& rng);

/// x: k x in, weight: out x in, bias: 1 x out.
template <typename Scalar>
RowMatrix<Scalar> linear(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& weight,
                         const RowMatrix<Scalar>* bias) {
  RowMatrix<Scalar> y = x * weight.transpose();
  if (bias != nullptr) y.rowwise() += bias->row(0);
  return y;
}

template <typename Scalar>
void linear_backward_params(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& dy,
                            RowMatrix<Scalar>& dweight, RowMatrix<Scalar>* dbias) {
  dweight.noalias() += dy.transpose() * x;
  if (dbias != nullptr) dbias->row(0) += dy.colwise().sum();
}

template <typename Scalar>
RowMatrix<Scalar> linear_backward_input(const RowMatrix<Scalar>& weight,
                                        const RowMatrix<Scalar>& dy) {
  return dy * weight;
}

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  return x.cwiseMax(typename Derived::Scalar(0));
}

/// dy masked where the forward output was not positive.
template <typename Scalar>
RowMatrix<Scalar> relu_backward(const RowMatrix<Scalar>& y, const RowMatrix<Scalar>& dy) {
  return (y.array() > Scalar(0)).select(dy, RowMatrix<Scalar>::Zero(dy.rows(), dy.cols()));
}

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return (S(1) / (S(1) + (-x.array()).exp())).matrix();
}

template <typename Scalar>
RowMatrix<Scalar> softmax_rows(const RowMatrix<Scalar>& logits) {
  RowMatrix<Scalar> p = logits;
  for (Index i = 0; i < p.rows(); ++i) {
    p.row(i).array() -= p.row(i).maxCoeff();
    p.row(i) = p.row(i).array().exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// Vector-Jacobian product of row-wise softmax: dlogit = p * (dp - <dp, p>).
template <typename Scalar>
RowMatrix<Scalar> softmax_backward(const RowMatrix<Scalar>& p, const RowMatrix<Scalar>& dp) {
  Vector<Scalar> dot = (p.array() * dp.array()).rowwise().sum().matrix();
  RowMatrix<Scalar> dlogit = dp;
  dlogit.colwise() -= dot;
  return (dlogit.array() * p.array()).matrix();
}

/// Row-wise layer norm; saves normalized rows and inverse std for backward.
template <typename Scalar>
RowMatrix<Scalar> layer_norm(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& gamma,
                             const RowMatrix<Scalar>& beta, double eps,
                             RowMatrix<Scalar>* normalized, Vector<Scalar>* inv_std);

template <typename Scalar>
RowMatrix<Scalar> layer_norm_backward(const RowMatrix<Scalar>& normalized,
                                      const Vector<Scalar>& inv_std,
                                      const RowMatrix<Scalar>& gamma,
                                      const RowMatrix<Scalar>& dy);

/// Exact (erf-based) GELU.
template <typename Scalar>
RowMatrix<Scalar> gelu(const RowMatrix<Scalar>& x);

template <typename Scalar>
RowMatrix<Scalar> gelu_backward(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& dy);

}  // namespace virda::ops

#endif  // VIRDA_OPS_HPP_
