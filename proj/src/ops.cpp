#include "virda/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace virda::ops {

namespace {

// Output columns [lo, hi) whose input column ox * stride - pad + kx is in range.
inline void valid_span(int out, int in, int stride, int pad, int kx, int& lo, int& hi) {
  lo = 0;
  while (lo < out && lo * stride - pad + kx < 0) ++lo;
  hi = out;
  while (hi > lo && (hi - 1) * stride - pad + kx >= in) --hi;
}

}  // namespace

template <typename Scalar>
RowMatrix<Scalar> im2col(const FeatureMap<Scalar>& x, const ConvGeometry& g) {
  const int c = x.channels();
  const int k = g.kernel;
  const int oh = g.out_size(x.h);
  const int ow = g.out_size(x.w);
  RowMatrix<Scalar> cols(Index(c) * k * k, Index(x.n) * oh * ow);
  for (int ci = 0; ci < c; ++ci) {
    const Scalar* src_channel = x.data.row(ci).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        int lo = 0, hi = 0;
        valid_span(ow, x.w, g.stride, g.pad, kx, lo, hi);
        const int shift = kx - g.pad;
        Scalar* dst = cols.row((Index(ci) * k + ky) * k + kx).data();
        for (int i = 0; i < x.n; ++i) {
          const Scalar* src = src_channel + Index(i) * x.plane();
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            Scalar* row_dst = dst + (Index(i) * oh + oy) * ow;
            if (iy < 0 || iy >= x.h) {
              std::fill(row_dst, row_dst + ow, Scalar(0));
              continue;
            }
            const Scalar* row_src = src + Index(iy) * x.w + shift;
            std::fill(row_dst, row_dst + lo, Scalar(0));
            if (g.stride == 1) {
              std::copy(row_src + lo, row_src + hi, row_dst + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) row_dst[ox] = row_src[ox * g.stride];
            }
            std::fill(row_dst + hi, row_dst + ow, Scalar(0));
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
FeatureMap<Scalar> col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, int n, int c,
                          int h, int w) {
  FeatureMap<Scalar> x(n, c, h, w);
  const int k = g.kernel;
  const int oh = g.out_size(h);
  const int ow = g.out_size(w);
  for (int ci = 0; ci < c; ++ci) {
    Scalar* dst_channel = x.data.row(ci).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        int lo = 0, hi = 0;
        valid_span(ow, w, g.stride, g.pad, kx, lo, hi);
        const int shift = kx - g.pad;
        const Scalar* src = cols.row((Index(ci) * k + ky) * k + kx).data();
        for (int i = 0; i < n; ++i) {
          Scalar* dst = dst_channel + Index(i) * h * w;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= h) continue;
            const Scalar* row_src = src + (Index(i) * oh + oy) * ow;
            Scalar* row_dst = dst + Index(iy) * w + shift;
            if (g.stride == 1) {
              for (int ox = lo; ox < hi; ++ox) row_dst[ox] += row_src[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) row_dst[ox * g.stride] += row_src[ox];
            }
          }
        }
      }
    }
  }
  return x;
}

namespace {

template <typename Scalar>
bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

template <typename Scalar>
FeatureMap<Scalar> conv2d(const FeatureMap<Scalar>& x, const RowMatrix<Scalar>& weight,
                          const RowMatrix<Scalar>* bias, const ConvGeometry& g) {
  const Index fan_in = Index(x.channels()) * g.kernel * g.kernel;
  if (weight.cols() != fan_in) {
    throw ConfigError("conv2d: weight expects " + std::to_string(weight.cols()) +
                      " inputs per output, input provides " + std::to_string(fan_in));
  }
  FeatureMap<Scalar> y;
  y.n = x.n;
  y.h = g.out_size(x.h);
  y.w = g.out_size(x.w);
  if (is_pointwise<Scalar>(g)) {
    y.data.noalias() = weight * x.data;
  } else {
    y.data.noalias() = weight * im2col(x, g);
  }
  if (bias != nullptr) y.data.colwise() += bias->row(0).transpose();
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> conv2d_backward_input(const RowMatrix<Scalar>& weight,
                                         const FeatureMap<Scalar>& dy, const ConvGeometry& g,
                                         int in_channels, int in_h, int in_w) {
  RowMatrix<Scalar> dcols = weight.transpose() * dy.data;
  if (is_pointwise<Scalar>(g)) {
    FeatureMap<Scalar> dx;
    dx.n = dy.n;
    dx.h = in_h;
    dx.w = in_w;
    dx.data = std::move(dcols);
    return dx;
  }
  return col2im(dcols, g, dy.n, in_channels, in_h, in_w);
}

template <typename Scalar>
void conv2d_backward_params(const FeatureMap<Scalar>& x, const FeatureMap<Scalar>& dy,
                            const ConvGeometry& g, RowMatrix<Scalar>& dweight,
                            RowMatrix<Scalar>* dbias) {
  if (is_pointwise<Scalar>(g)) {
    dweight.noalias() += dy.data * x.data.transpose();
  } else {
    dweight.noalias() += dy.data * im2col(x, g).transpose();
  }
  if (dbias != nullptr) dbias->row(0) += dy.data.rowwise().sum().transpose();
}

template <typename Scalar>
FeatureMap<Scalar> max_pool(const FeatureMap<Scalar>& x, const ConvGeometry& g,
                            std::vector<Index>* argmax) {
  FeatureMap<Scalar> y(x.n, x.channels(), g.out_size(x.h), g.out_size(x.w));
  if (argmax != nullptr) argmax->assign(static_cast<std::size_t>(y.data.size()), 0);
  Index out = 0;
  for (int c = 0; c < x.channels(); ++c) {
    for (int i = 0; i < x.n; ++i) {
      for (int oy = 0; oy < y.h; ++oy) {
        for (int ox = 0; ox < y.w; ++ox, ++out) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Index best_col = 0;
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= x.h) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= x.w) continue;
              const Index col = (Index(i) * x.h + iy) * x.w + ix;
              if (x.data(c, col) > best) {
                best = x.data(c, col);
                best_col = col;
              }
            }
          }
          y.data(c, (Index(i) * y.h + oy) * y.w + ox) = best;
          if (argmax != nullptr) (*argmax)[static_cast<std::size_t>(out)] = best_col;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> max_pool_backward(const FeatureMap<Scalar>& dy,
                                     const std::vector<Index>& argmax, int in_h, int in_w) {
  FeatureMap<Scalar> dx(dy.n, dy.channels(), in_h, in_w);
  const Index per_channel = dy.columns();
  for (int c = 0; c < dy.channels(); ++c) {
    for (Index j = 0; j < per_channel; ++j) {
      dx.data(c, argmax[static_cast<std::size_t>(c * per_channel + j)]) += dy.data(c, j);
    }
  }
  return dx;
}

template <typename Scalar>
RowMatrix<Scalar> global_avg_pool(const FeatureMap<Scalar>& x) {
  RowMatrix<Scalar> z(x.n, x.channels());
  const Index plane = x.plane();
  for (int c = 0; c < x.channels(); ++c) {
    for (int i = 0; i < x.n; ++i) {
      z(i, c) = x.data.row(c).segment(Index(i) * plane, plane).mean();
    }
  }
  return z;
}

template <typename Scalar>
FeatureMap<Scalar> global_avg_pool_backward(const RowMatrix<Scalar>& dz, int h, int w) {
  FeatureMap<Scalar> dx(static_cast<int>(dz.rows()), static_cast<int>(dz.cols()), h, w);
  const Index plane = dx.plane();
  const Scalar scale = Scalar(1) / static_cast<Scalar>(plane);
  for (int c = 0; c < dx.channels(); ++c) {
    for (int i = 0; i < dx.n; ++i) {
      dx.data.row(c).segment(Index(i) * plane, plane).setConstant(dz(i, c) * scale);
    }
  }
  return dx;
}

template <typename Scalar>
FeatureMap<Scalar> patch_average(const FeatureMap<Scalar>& x, int patch) {
  if (patch <= 0 || x.h % patch != 0 || x.w % patch != 0) {
    throw ConfigError("patch_average: spatial size " + std::to_string(x.h) + "x" +
                      std::to_string(x.w) + " is not divisible by patch " +
                      std::to_string(patch));
  }
  FeatureMap<Scalar> y(x.n, x.channels(), x.h, x.w);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(patch * patch);
  for (int c = 0; c < x.channels(); ++c) {
    for (int i = 0; i < x.n; ++i) {
      for (int py = 0; py < x.h; py += patch) {
        for (int px = 0; px < x.w; px += patch) {
          Scalar sum = 0;
          for (int y0 = py; y0 < py + patch; ++y0)
            for (int x0 = px; x0 < px + patch; ++x0) sum += x.at(c, i, y0, x0);
          const Scalar mean = sum * scale;
          for (int y0 = py; y0 < py + patch; ++y0)
            for (int x0 = px; x0 < px + patch; ++x0) y.at(c, i, y0, x0) = mean;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
RowMatrix<Scalar> mean_over_width(const FeatureMap<Scalar>& x) {
  RowMatrix<Scalar> out(x.channels(), Index(x.n) * x.h);
  for (int c = 0; c < x.channels(); ++c) {
    for (Index r = 0; r < out.cols(); ++r) {
      out(c, r) = x.data.row(c).segment(r * x.w, x.w).mean();
    }
  }
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> mean_over_height(const FeatureMap<Scalar>& x) {
  RowMatrix<Scalar> out = RowMatrix<Scalar>::Zero(x.channels(), Index(x.n) * x.w);
  const Scalar scale = Scalar(1) / static_cast<Scalar>(x.h);
  for (int c = 0; c < x.channels(); ++c) {
    for (int i = 0; i < x.n; ++i) {
      auto dst = out.row(c).segment(Index(i) * x.w, x.w);
      for (int y = 0; y < x.h; ++y) {
        dst += x.data.row(c).segment((Index(i) * x.h + y) * x.w, x.w);
      }
      dst *= scale;
    }
  }
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> dropout_mask(Index rows, Index cols, double p, Rng& rng) {
  if (p <= 0.0) return RowMatrix<Scalar>::Ones(rows, cols);
  if (p >= 1.0) throw ConfigError("dropout probability must be below 1");
  // Two 32-bit uniforms per draw; keep when u >= p * 2^32.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(p, 32));
  const Scalar scale = static_cast<Scalar>(1.0 / (1.0 - p));
  RowMatrix<Scalar> mask(rows, cols);
  Scalar* out = mask.data();
  const Index n = mask.size();
  for (Index i = 0; i < n; i += 2) {
    const std::uint64_t r = rng();
    out[i] = (r & 0xffffffffULL) >= threshold ? scale : Scalar(0);
    if (i + 1 < n) out[i + 1] = (r >> 32) >= threshold ? scale : Scalar(0);
  }
  return mask;
}

template <typename Scalar>
RowMatrix<Scalar> layer_norm(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& gamma,
                             const RowMatrix<Scalar>& beta, double eps,
                             RowMatrix<Scalar>* normalized, Vector<Scalar>* inv_std) {
  const Index d = x.cols();
  RowMatrix<Scalar> xhat(x.rows(), d);
  Vector<Scalar> rstd(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().mean();
    rstd(r) = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  RowMatrix<Scalar> y = (xhat.array().rowwise() * gamma.row(0).array()).matrix();
  y.rowwise() += beta.row(0);
  if (normalized != nullptr) *normalized = std::move(xhat);
  if (inv_std != nullptr) *inv_std = std::move(rstd);
  return y;
}

template <typename Scalar>
RowMatrix<Scalar> layer_norm_backward(const RowMatrix<Scalar>& normalized,
                                      const Vector<Scalar>& inv_std,
                                      const RowMatrix<Scalar>& gamma,
                                      const RowMatrix<Scalar>& dy) {
  const Scalar d = static_cast<Scalar>(normalized.cols());
  RowMatrix<Scalar> g = (dy.array().rowwise() * gamma.row(0).array()).matrix();
  RowMatrix<Scalar> dx(g.rows(), g.cols());
  for (Index r = 0; r < g.rows(); ++r) {
    const Scalar mean_g = g.row(r).sum() / d;
    const Scalar mean_gx = g.row(r).dot(normalized.row(r)) / d;
    dx.row(r) = ((g.row(r).array() - mean_g) - normalized.row(r).array() * mean_gx) * inv_std(r);
  }
  return dx;
}

template <typename Scalar>
RowMatrix<Scalar> gelu(const RowMatrix<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  return x.unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
}

template <typename Scalar>
RowMatrix<Scalar> gelu_backward(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& dy) {
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  const Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
  RowMatrix<Scalar> d = x.unaryExpr([=](Scalar v) {
    return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) +
           v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
  });
  return (d.array() * dy.array()).matrix();
}

#define VIRDA_INSTANTIATE_OPS(S)                                                                 \
  template RowMatrix<S> im2col(const FeatureMap<S>&, const ConvGeometry&);                       \
  template FeatureMap<S> col2im(const RowMatrix<S>&, const ConvGeometry&, int, int, int, int);   \
  template FeatureMap<S> conv2d(const FeatureMap<S>&, const RowMatrix<S>&, const RowMatrix<S>*,  \
                                const ConvGeometry&);                                            \
  template FeatureMap<S> conv2d_backward_input(const RowMatrix<S>&, const FeatureMap<S>&,        \
                                               const ConvGeometry&, int, int, int);              \
  template void conv2d_backward_params(const FeatureMap<S>&, const FeatureMap<S>&,               \
                                       const ConvGeometry&, RowMatrix<S>&, RowMatrix<S>*);       \
  template FeatureMap<S> max_pool(const FeatureMap<S>&, const ConvGeometry&,                     \
                                  std::vector<Index>*);                                          \
  template FeatureMap<S> max_pool_backward(const FeatureMap<S>&, const std::vector<Index>&, int, \
                                           int);                                                 \
  template RowMatrix<S> global_avg_pool(const FeatureMap<S>&);                                   \
  template FeatureMap<S> global_avg_pool_backward(const RowMatrix<S>&, int, int);                \
  template FeatureMap<S> patch_average(const FeatureMap<S>&, int);                               \
  template RowMatrix<S> mean_over_width(const FeatureMap<S>&);                                   \
  template RowMatrix<S> mean_over_height(const FeatureMap<S>&);                                  \
  template RowMatrix<S> dropout_mask<S>(Index, Index, double, Rng&);                             \
  template RowMatrix<S> layer_norm(const RowMatrix<S>&, const RowMatrix<S>&,                     \
                                   const RowMatrix<S>&, double, RowMatrix<S>*, Vector<S>*);      \
  template RowMatrix<S> layer_norm_backward(const RowMatrix<S>&, const Vector<S>&,               \
                                            const RowMatrix<S>&, const RowMatrix<S>&);           \
  template RowMatrix<S> gelu(const RowMatrix<S>&);                                               \
  template RowMatrix<S> gelu_backward(const RowMatrix<S>&, const RowMatrix<S>&);

VIRDA_INSTANTIATE_OPS(float)
VIRDA_INSTANTIATE_OPS(double)

#undef VIRDA_INSTANTIATE_OPS

}  // namespace virda::ops
