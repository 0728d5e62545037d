#ifndef VIRDA_TENSOR_HPP_
#define VIRDA_TENSOR_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace virda {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Raised when tensor shapes or module configurations do not line up.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A batch of feature maps stored channel-major: row `ch` holds every
/// (sample, y, x) value of that channel, sample-major then row-major.
/// Convolutions become a single GEMM against an im2col matrix in this layout.
template <typename Scalar>
struct FeatureMap {
  int n = 0;
  int h = 0;
  int w = 0;
  RowMatrix<Scalar> data;

  FeatureMap() = default;
  FeatureMap(int batch, int channels, int height, int width)
      : n(batch), h(height), w(width),
        data(RowMatrix<Scalar>::Zero(channels, Index(batch) * height * width)) {}

  int channels() const { return static_cast<int>(data.rows()); }
  Index plane() const { return Index(h) * w; }
  Index columns() const { return Index(n) * h * w; }

  Scalar& at(int ch, int i, int y, int x) { return data(ch, (Index(i) * h + y) * w + x); }
  Scalar at(int ch, int i, int y, int x) const { return data(ch, (Index(i) * h + y) * w + x); }

  bool same_shape(const FeatureMap& other) const {
    return n == other.n && h == other.h && w == other.w && channels() == other.channels();
  }

  std::string shape_string() const {
    return std::to_string(n) + "x" + std::to_string(channels()) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }

  template <typename Other>
  FeatureMap<Other> cast() const {
    FeatureMap<Other> out;
    out.n = n;
    out.h = h;
    out.w = w;
    out.data = data.template cast<Other>();
    return out;
  }
};

template <typename Scalar>
inline void require_same_shape(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b,
                               const char* what) {
  if (!a.same_shape(b)) {
    throw ConfigError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                      b.shape_string());
  }
}

}  // namespace virda

#endif  // VIRDA_TENSOR_HPP_
