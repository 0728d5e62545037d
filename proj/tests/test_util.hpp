#ifndef VIRDA_TESTS_TEST_UTIL_HPP_
#define VIRDA_TESTS_TEST_UTIL_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "virda/parameter.hpp"
#include "virda/rng.hpp"
#include "virda/tensor.hpp"

namespace virda::testing {

// Central differences over every entry of `values`; `loss` is re-evaluated
// after each perturbation.
inline RowMatrix<double> numeric_gradient(RowMatrix<double>& values,
                                          const std::function<double()>& loss,
                                          double h = 1e-6) {
  RowMatrix<double> g(values.rows(), values.cols());
  for (Index i = 0; i < values.size(); ++i) {
    const double keep = values.data()[i];
    values.data()[i] = keep + h;
    const double up = loss();
    values.data()[i] = keep - h;
    const double down = loss();
    values.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), with a floor so all-zero gradients compare as equal.
inline double relative_error(const RowMatrix<double>& a, const RowMatrix<double>& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-10});
  return (a - b).norm() / scale;
}

inline RowMatrix<double> random_matrix(Index rows, Index cols, std::uint64_t seed,
                                       double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  RowMatrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline FeatureMap<double> random_map(int n, int c, int h, int w, std::uint64_t seed,
                                     double lo = -1.0, double hi = 1.0) {
  FeatureMap<double> x(n, c, h, w);
  x.data = random_matrix(c, Index(n) * h * w, seed, lo, hi);
  return x;
}

// Rows on the probability simplex, bounded away from zero.
inline RowMatrix<double> random_probs(Index rows, Index cols, std::uint64_t seed) {
  RowMatrix<double> p = random_matrix(rows, cols, seed, 0.05, 1.0);
  for (Index i = 0; i < rows; ++i) p.row(i) /= p.row(i).sum();
  return p;
}

// Worst relative error over every parameter in `params`.
inline double worst_param_error(const ParamList<double>& params,
                                const std::function<double()>& loss) {
  double worst = 0.0;
  for (auto* p : params) {
    const RowMatrix<double> num = numeric_gradient(p->value, loss);
    worst = std::max(worst, relative_error(p->grad, num));
  }
  return worst;
}

}  // namespace virda::testing

#endif  // VIRDA_TESTS_TEST_UTIL_HPP_
