// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "dmf/autodiff.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

inline std::vector<double> buffer(index_t n) { return std::vector<double>(static_cast<std::size_t>(n)); }

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvParams {
  index_t stride = 1;
  index_t padding = 0;
  index_t groups = 1;
};

namespace detail {

struct ConvGeometry {
  index_t n, cin, h, w;
  index_t cout, kh, kw;
  index_t ho, wo;
  index_t stride, pad, groups;
  index_t cin_g, cout_g;

  index_t patch() const { return cin_g * kh * kw; }
  index_t out_plane() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight,
                                  const std::optional<Tensor>& bias, const ConvParams& p) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (p.stride < 1) shape_fail("conv2d: stride must be >= 1, got ", p.stride);
  if (p.padding < 0) shape_fail("conv2d: padding must be >= 0, got ", p.padding);
  if (p.groups < 1) shape_fail("conv2d: groups must be >= 1, got ", p.groups);
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = p.stride;
  g.pad = p.padding;
  g.groups = p.groups;
  if (g.cin % g.groups != 0) {
    shape_fail("conv2d: input channels (dimension 1) ", g.cin, " not divisible by groups ",
               g.groups);
  }
  if (g.cout % g.groups != 0) {
    shape_fail("conv2d: output channels (weight dimension 0) ", g.cout,
               " not divisible by groups ", g.groups);
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (weight.dim(1) != g.cin_g) {
    shape_fail("conv2d: weight dimension 1 is ", weight.dim(1), " but input channels / groups = ",
               g.cin_g);
  }
  if (bias) {
    if (bias->rank() != 1 || bias->dim(0) != g.cout) {
      shape_fail("conv2d: bias dimension 0 must equal output channels ", g.cout, ", got shape ",
                 bias->shape().str());
    }
  }
  const index_t hspan = g.h + 2 * g.pad - g.kh;
  const index_t wspan = g.w + 2 * g.pad - g.kw;
  if (hspan < 0) shape_fail("conv2d: kernel height ", g.kh, " exceeds padded input height");
  if (wspan < 0) shape_fail("conv2d: kernel width ", g.kw, " exceeds padded input width");
  g.ho = hspan / g.stride + 1;
  g.wo = wspan / g.stride + 1;
  return g;
}

// Lowers one (sample, group) slice of the input into a [patch, ho*wo] matrix.
inline void im2col(const double* in, const ConvGeometry& g, double* cols) {
  const index_t plane = g.out_plane();
  for (index_t ci = 0; ci < g.cin_g; ++ci) {
    const double* src = in + ci * g.h * g.w;
    for (index_t u = 0; u < g.kh; ++u) {
      for (index_t v = 0; v < g.kw; ++v) {
        double* row = cols + ((ci * g.kh + u) * g.kw + v) * plane;
        for (index_t oy = 0; oy < g.ho; ++oy) {
          const index_t iy = oy * g.stride - g.pad + u;
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          for (index_t ox = 0; ox < g.wo; ++ox) {
            const index_t ix = ox * g.stride - g.pad + v;
            dst[ox] = (ix < 0 || ix >= g.w) ? 0.0 : src[iy * g.w + ix];
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, const ConvGeometry& g, double* grad_in) {
  const index_t plane = g.out_plane();
  for (index_t ci = 0; ci < g.cin_g; ++ci) {
    double* dst = grad_in + ci * g.h * g.w;
    for (index_t u = 0; u < g.kh; ++u) {
      for (index_t v = 0; v < g.kw; ++v) {
        const double* row = cols + ((ci * g.kh + u) * g.kw + v) * plane;
        for (index_t oy = 0; oy < g.ho; ++oy) {
          const index_t iy = oy * g.stride - g.pad + u;
          if (iy < 0 || iy >= g.h) continue;
          for (index_t ox = 0; ox < g.wo; ++ox) {
            const index_t ix = ox * g.stride - g.pad + v;
            if (ix >= 0 && ix < g.w) dst[iy * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding over [n, c_in, h, w] input and
/// [c_out, c_in/groups, kh, kw] weight.
inline Tensor conv2d(const Tensor& input, const Tensor& weight,
                     const std::optional<Tensor>& bias = std::nullopt, ConvParams params = {}) {
  using namespace detail;
  const ConvGeometry g = conv_geometry(input, weight, bias, params);
  const index_t plane = g.out_plane();
  const index_t patch = g.patch();
  auto out = buffer(g.n * g.cout * plane);
  std::vector<double> cols(static_cast<std::size_t>(patch * plane));
  const double* x = input.data().data();
  const double* wt = weight.data().data();
  for (index_t b = 0; b < g.n; ++b) {
    for (index_t gi = 0; gi < g.groups; ++gi) {
      im2col(x + (b * g.cin + gi * g.cin_g) * g.h * g.w, g, cols.data());
      ConstMatrixView wmat(wt + gi * g.cout_g * patch, g.cout_g, patch);
      ConstMatrixView cmat(cols.data(), patch, plane);
      MatrixView omat(out.data() + (b * g.cout + gi * g.cout_g) * plane, g.cout_g, plane);
      omat.noalias() = wmat * cmat;
      if (bias) {
        for (index_t o = 0; o < g.cout_g; ++o) omat.row(o).array() += (*bias)[gi * g.cout_g + o];
      }
    }
  }
  Tensor result(Shape{g.n, g.cout, g.ho, g.wo}, std::move(out));
  if (auto* rec = bias ? tracking(input, weight, *bias) : tracking(input, weight)) {
    rec->record(result, [input, weight, bias, g](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(input);
      auto gw = sink(weight);
      std::span<double> gb = bias ? sink(*bias) : std::span<double>{};
      const index_t plane = g.out_plane();
      const index_t patch = g.patch();
      std::vector<double> cols(static_cast<std::size_t>(patch * plane));
      const double* x = input.data().data();
      const double* wt = weight.data().data();
      for (index_t b = 0; b < g.n; ++b) {
        for (index_t gi = 0; gi < g.groups; ++gi) {
          ConstMatrixView gmat(gout.data() + (b * g.cout + gi * g.cout_g) * plane, g.cout_g, plane);
          if (!gb.empty()) {
            for (index_t o = 0; o < g.cout_g; ++o) {
              gb[static_cast<std::size_t>(gi * g.cout_g + o)] += gmat.row(o).sum();
            }
          }
          if (!gw.empty()) {
            im2col(x + (b * g.cin + gi * g.cin_g) * g.h * g.w, g, cols.data());
            ConstMatrixView cmat(cols.data(), patch, plane);
            MatrixView gwmat(gw.data() + gi * g.cout_g * patch, g.cout_g, patch);
            gwmat.noalias() += gmat * cmat.transpose();
          }
          if (!gx.empty()) {
            ConstMatrixView wmat(wt + gi * g.cout_g * patch, g.cout_g, patch);
            MatrixView dcols(cols.data(), patch, plane);
            dcols.noalias() = wmat.transpose() * gmat;
            col2im(cols.data(), g, gx.data() + (b * g.cin + gi * g.cin_g) * g.h * g.w);
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Pointwise
// ---------------------------------------------------------------------------

namespace detail {

// y = f(x) elementwise, dy/dx expressed through (x, y).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  auto out = buffer(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  Tensor y(x.shape(), std::move(out));
  if (auto* rec = tracking(x)) {
    rec->record(y, [x, y, deriv](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      if (gx.empty()) return;
      const auto xs = x.data();
      const auto ys = y.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i] * deriv(xs[i], ys[i]);
    });
  }
  return y;
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return detail::stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = detail::buffer(a.numel());
  const auto as = a.data();
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  Tensor y(a.shape(), std::move(out));
  if (auto* rec = detail::tracking(a, b)) {
    rec->record(y, [a, b](std::span<const double> gout, GradSink& sink) {
      for (const Tensor* t : {&a, &b}) {
        auto g = sink(*t);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = detail::buffer(a.numel());
  const auto as = a.data();
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  Tensor y(a.shape(), std::move(out));
  if (auto* rec = detail::tracking(a, b)) {
    rec->record(y, [a, b](std::span<const double> gout, GradSink& sink) {
      const auto as = a.data();
      const auto bs = b.data();
      auto ga = sink(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * bs[i];
      auto gb = sink(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * as[i];
    });
  }
  return y;
}

/// Σ coeffs[i] · terms[i]; all terms share one shape.
inline Tensor linear_combination(std::span<const Tensor> terms, std::span<const double> coeffs) {
  if (terms.empty()) detail::shape_fail("linear_combination: no terms");
  if (terms.size() != coeffs.size()) {
    detail::shape_fail("linear_combination: ", terms.size(), " terms but ", coeffs.size(),
                       " coefficients");
  }
  for (const auto& t : terms) require_same_shape(terms[0], t, "linear_combination");
  auto out = detail::buffer(terms[0].numel());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double c = coeffs[k];
    if (c == 0.0) continue;
    const auto ts = terms[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * ts[i];
  }
  Tensor y(terms[0].shape(), std::move(out));
  if (auto* rec = detail::tracking_any(terms)) {
    std::vector<Tensor> ts(terms.begin(), terms.end());
    std::vector<double> cs(coeffs.begin(), coeffs.end());
    rec->record(y, [ts, cs](std::span<const double> gout, GradSink& sink) {
      for (std::size_t k = 0; k < ts.size(); ++k) {
        if (cs[k] == 0.0) continue;
        auto g = sink(ts[k]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cs[k] * gout[i];
      }
    });
  }
  return y;
}

inline Tensor linear_combination(std::initializer_list<Tensor> terms,
                                 std::initializer_list<double> coeffs) {
  return linear_combination(std::span<const Tensor>(terms.begin(), terms.size()),
                            std::span<const double>(coeffs.begin(), coeffs.size()));
}

/// Concatenates rank-4 tensors along the channel axis, order preserved.
inline Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) detail::shape_fail("concat_channels: no operands");
  index_t channels = 0;
  for (const auto& p : parts) {
    require_rank(p, 4, "concat_channels");
    for (int axis : {0, 2, 3}) {
      if (p.dim(axis) != parts[0].dim(axis)) {
        detail::shape_fail("concat_channels: dimension ", axis, " differs (", p.dim(axis), " vs ",
                           parts[0].dim(axis), ")");
      }
    }
    channels += p.dim(1);
  }
  const index_t n = parts[0].dim(0);
  const index_t plane = parts[0].dim(2) * parts[0].dim(3);
  auto out = detail::buffer(n * channels * plane);
  index_t c0 = 0;
  for (const auto& p : parts) {
    const index_t pc = p.dim(1);
    for (index_t b = 0; b < n; ++b) {
      std::copy_n(p.data().data() + b * pc * plane, pc * plane,
                  out.data() + (b * channels + c0) * plane);
    }
    c0 += pc;
  }
  Tensor y(Shape{n, channels, parts[0].dim(2), parts[0].dim(3)}, std::move(out));
  if (auto* rec = detail::tracking_any(parts)) {
    std::vector<Tensor> ps(parts.begin(), parts.end());
    rec->record(y, [ps, n, channels, plane](std::span<const double> gout, GradSink& sink) {
      index_t c0 = 0;
      for (const auto& p : ps) {
        const index_t pc = p.dim(1);
        auto g = sink(p);
        if (!g.empty()) {
          for (index_t b = 0; b < n; ++b) {
            const double* src = gout.data() + (b * channels + c0) * plane;
            double* dst = g.data() + b * pc * plane;
            for (index_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
          }
        }
        c0 += pc;
      }
    });
  }
  return y;
}

inline Tensor concat_channels(std::initializer_list<Tensor> parts) {
  return concat_channels(std::span<const Tensor>(parts.begin(), parts.size()));
}

/// Concatenates two tensors along axis 0; all other dimensions must agree.
inline Tensor concat_batch(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) detail::shape_fail("concat_batch: ranks differ (", a.rank(), " vs ", b.rank(), ")");
  for (int axis = 1; axis < a.rank(); ++axis) {
    if (a.dim(axis) != b.dim(axis)) {
      detail::shape_fail("concat_batch: dimension ", axis, " differs (", a.dim(axis), " vs ", b.dim(axis), ")");
    }
  }
  std::vector<index_t> dims(a.shape().dims().begin(), a.shape().dims().end());
  dims[0] += b.dim(0);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(a.numel() + b.numel()));
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  Tensor y(Shape(dims), std::move(out));
  if (auto* rec = detail::tracking(a, b)) {
    rec->record(y, [a, b](std::span<const double> gout, GradSink& sink) {
      auto ga = sink(a);
      auto gb = sink(b);
      const auto na = static_cast<std::size_t>(a.numel());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[na + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Neighbourhood extraction
// ---------------------------------------------------------------------------

/// k×k patch extraction with zero borders: output channel ch·k·k + u·k + v at
/// (i, j) holds input[ch, i+u-r, j+v-r], r = (k-1)/2.
inline Tensor unfold(const Tensor& input, index_t k, index_t padding) {
  require_rank(input, 4, "unfold");
  if (k < 1 || k % 2 == 0) detail::shape_fail("unfold: kernel size must be odd, got ", k);
  if (padding != (k - 1) / 2) {
    detail::shape_fail("unfold: padding must be (k-1)/2 = ", (k - 1) / 2, ", got ", padding);
  }
  const index_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const index_t kk = k * k;
  auto out = detail::buffer(n * c * kk * h * w);
  const double* x = input.data().data();
  for (index_t b = 0; b < n; ++b) {
    for (index_t ch = 0; ch < c; ++ch) {
      const double* src = x + (b * c + ch) * h * w;
      for (index_t u = 0; u < k; ++u) {
        for (index_t v = 0; v < k; ++v) {
          double* dst = out.data() + ((b * c + ch) * kk + u * k + v) * h * w;
          for (index_t i = 0; i < h; ++i) {
            const index_t y = i + u - padding;
            if (y < 0 || y >= h) continue;
            for (index_t j = 0; j < w; ++j) {
              const index_t xx = j + v - padding;
              if (xx >= 0 && xx < w) dst[i * w + j] = src[y * w + xx];
            }
          }
        }
      }
    }
  }
  Tensor y(Shape{n, c * kk, h, w}, std::move(out));
  if (auto* rec = detail::tracking(input)) {
    rec->record(y, [input, k, padding, n, c, h, w](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(input);
      if (gx.empty()) return;
      const index_t kk = k * k;
      for (index_t b = 0; b < n; ++b) {
        for (index_t ch = 0; ch < c; ++ch) {
          double* dst = gx.data() + (b * c + ch) * h * w;
          for (index_t u = 0; u < k; ++u) {
            for (index_t v = 0; v < k; ++v) {
              const double* src = gout.data() + ((b * c + ch) * kk + u * k + v) * h * w;
              for (index_t i = 0; i < h; ++i) {
                const index_t yy = i + u - padding;
                if (yy < 0 || yy >= h) continue;
                for (index_t j = 0; j < w; ++j) {
                  const index_t xx = j + v - padding;
                  if (xx >= 0 && xx < w) dst[yy * w + xx] += src[i * w + j];
                }
              }
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline void require_spatial(const Tensor& x, const char* what) {
  require_rank(x, 4, what);
}

// Per-(sample, channel) spatial mean; `out_shape` decides rank-2 or rank-4 result.
inline Tensor plane_mean(const Tensor& x, Shape out_shape) {
  const index_t rows = x.dim(0) * x.dim(1);
  const index_t plane = x.dim(2) * x.dim(3);
  auto out = buffer(rows);
  const double* xs = x.data().data();
  for (index_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (index_t i = 0; i < plane; ++i) s += xs[r * plane + i];
    out[static_cast<std::size_t>(r)] = s / static_cast<double>(plane);
  }
  Tensor y(out_shape, std::move(out));
  if (auto* rec = tracking(x)) {
    rec->record(y, [x, rows, plane](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      if (gx.empty()) return;
      const double inv = 1.0 / static_cast<double>(plane);
      for (index_t r = 0; r < rows; ++r) {
        const double g = gout[static_cast<std::size_t>(r)] * inv;
        for (index_t i = 0; i < plane; ++i) gx[static_cast<std::size_t>(r * plane + i)] += g;
      }
    });
  }
  return y;
}

}  // namespace detail

/// [n, c, h, w] -> [n, c, 1, 1] channel means.
inline Tensor global_avg_pool(const Tensor& x) {
  detail::require_spatial(x, "global_avg_pool");
  return detail::plane_mean(x, Shape{x.dim(0), x.dim(1), 1, 1});
}

/// [n, c, h, w] -> [n, c] channel means, the input layout of `dense`.
inline Tensor spatial_mean(const Tensor& x) {
  detail::require_spatial(x, "spatial_mean");
  return detail::plane_mean(x, Shape{x.dim(0), x.dim(1)});
}

/// Window-2 stride-2 max pooling; odd trailing rows/columns are dropped.
inline Tensor max_pool2(const Tensor& x) {
  detail::require_spatial(x, "max_pool2");
  const index_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const index_t ho = h / 2, wo = w / 2;
  if (ho == 0) detail::shape_fail("max_pool2: height (dimension 2) ", h, " too small");
  if (wo == 0) detail::shape_fail("max_pool2: width (dimension 3) ", w, " too small");
  auto out = detail::buffer(n * c * ho * wo);
  std::vector<index_t> argmax(out.size());
  const double* xs = x.data().data();
  for (index_t p = 0; p < n * c; ++p) {
    const double* src = xs + p * h * w;
    for (index_t i = 0; i < ho; ++i) {
      for (index_t j = 0; j < wo; ++j) {
        index_t best = (2 * i) * w + 2 * j;
        for (index_t di = 0; di < 2; ++di) {
          for (index_t dj = 0; dj < 2; ++dj) {
            const index_t idx = (2 * i + di) * w + 2 * j + dj;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const auto o = static_cast<std::size_t>((p * ho + i) * wo + j);
        out[o] = src[best];
        argmax[o] = p * h * w + best;
      }
    }
  }
  Tensor y(Shape{n, c, ho, wo}, std::move(out));
  if (auto* rec = detail::tracking(x)) {
    rec->record(y, [x, argmax = std::move(argmax)](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      if (gx.empty()) return;
      for (std::size_t o = 0; o < argmax.size(); ++o) {
        gx[static_cast<std::size_t>(argmax[o])] += gout[o];
      }
    });
  }
  return y;
}

/// Sum of all elements as a shape-[1] tensor.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (auto* rec = detail::tracking(x)) {
    rec->record(y, [x](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      for (auto& g : gx) g += gout[0];
    });
  }
  return y;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Dense head
// ---------------------------------------------------------------------------

/// [n, d] x [m, d]^T + [m] -> [n, m].
inline Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  using namespace detail;
  require_rank(input, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  require_rank(bias, 1, "dense bias");
  const index_t n = input.dim(0), d = input.dim(1), m = weight.dim(0);
  if (weight.dim(1) != d) {
    shape_fail("dense: input dimension 1 is ", d, " but weight dimension 1 is ", weight.dim(1));
  }
  if (bias.dim(0) != m) {
    shape_fail("dense: bias dimension 0 is ", bias.dim(0), " but weight dimension 0 is ", m);
  }
  auto out = buffer(n * m);
  ConstMatrixView x(input.data().data(), n, d);
  ConstMatrixView wmat(weight.data().data(), m, d);
  MatrixView y(out.data(), n, m);
  y.noalias() = x * wmat.transpose();
  for (index_t r = 0; r < n; ++r) {
    for (index_t j = 0; j < m; ++j) y(r, j) += bias[j];
  }
  Tensor result(Shape{n, m}, std::move(out));
  if (auto* rec = tracking(input, weight, bias)) {
    rec->record(result, [input, weight, bias, n, d, m](std::span<const double> gout, GradSink& sink) {
      ConstMatrixView g(gout.data(), n, m);
      if (auto gx = sink(input); !gx.empty()) {
        MatrixView(gx.data(), n, d).noalias() += g * ConstMatrixView(weight.data().data(), m, d);
      }
      if (auto gw = sink(weight); !gw.empty()) {
        MatrixView(gw.data(), m, d).noalias() +=
            g.transpose() * ConstMatrixView(input.data().data(), n, d);
      }
      if (auto gb = sink(bias); !gb.empty()) {
        for (index_t j = 0; j < m; ++j) gb[static_cast<std::size_t>(j)] += g.col(j).sum();
      }
    });
  }
  return result;
}

/// Row-wise log-softmax of an [n, m] tensor, max-shifted for stability.
inline Tensor log_softmax(const Tensor& x) {
  require_rank(x, 2, "log_softmax");
  const index_t n = x.dim(0), m = x.dim(1);
  auto out = detail::buffer(n * m);
  const double* xs = x.data().data();
  for (index_t r = 0; r < n; ++r) {
    const double* row = xs + r * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (index_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (index_t j = 0; j < m; ++j) out[static_cast<std::size_t>(r * m + j)] = row[j] - lse;
  }
  Tensor y(x.shape(), std::move(out));
  if (auto* rec = detail::tracking(x)) {
    rec->record(y, [x, y, n, m](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      if (gx.empty()) return;
      const double* ys = y.data().data();
      for (index_t r = 0; r < n; ++r) {
        double gsum = 0.0;
        for (index_t j = 0; j < m; ++j) gsum += gout[static_cast<std::size_t>(r * m + j)];
        for (index_t j = 0; j < m; ++j) {
          const auto i = static_cast<std::size_t>(r * m + j);
          gx[i] += gout[i] - std::exp(ys[i]) * gsum;
        }
      }
    });
  }
  return y;
}

/// −mean_r logp[r, labels[r]] for an [n, m] log-probability tensor.
inline Tensor nll_loss(const Tensor& log_probs, std::span<const index_t> labels) {
  require_rank(log_probs, 2, "nll_loss");
  const index_t n = log_probs.dim(0), m = log_probs.dim(1);
  if (static_cast<index_t>(labels.size()) != n) {
    detail::shape_fail("nll_loss: ", labels.size(), " labels for ", n, " rows");
  }
  double s = 0.0;
  for (index_t r = 0; r < n; ++r) {
    const index_t y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= m) {
      throw std::out_of_range(detail::concat("nll_loss: label ", y, " outside [0, ", m, ")"));
    }
    s -= log_probs[r * m + y];
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  if (auto* rec = detail::tracking(log_probs)) {
    std::vector<index_t> ys(labels.begin(), labels.end());
    rec->record(out, [log_probs, ys, n, m](std::span<const double> gout, GradSink& sink) {
      auto g = sink(log_probs);
      if (g.empty()) return;
      const double coeff = -gout[0] / static_cast<double>(n);
      for (index_t r = 0; r < n; ++r) g[static_cast<std::size_t>(r * m + ys[static_cast<std::size_t>(r)])] += coeff;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    detail::shape_fail("reshape: ", x.shape().str(), " has ", x.numel(), " elements, target ",
                       shape.str(), " has ", shape.numel());
  }
  Tensor y(shape, x.values());
  if (auto* rec = detail::tracking(x)) {
    rec->record(y, [x](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i];
    });
  }
  return y;
}

/// [a, b] -> [b, a].
inline Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const index_t a = x.dim(0), b = x.dim(1);
  auto out = detail::buffer(a * b);
  for (index_t i = 0; i < a; ++i) {
    for (index_t j = 0; j < b; ++j) out[static_cast<std::size_t>(j * a + i)] = x[i * b + j];
  }
  Tensor y(Shape{b, a}, std::move(out));
  if (auto* rec = detail::tracking(x)) {
    rec->record(y, [x, a, b](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      if (gx.empty()) return;
      for (index_t i = 0; i < a; ++i) {
        for (index_t j = 0; j < b; ++j) gx[static_cast<std::size_t>(i * b + j)] += gout[static_cast<std::size_t>(j * a + i)];
      }
    });
  }
  return y;
}

/// Slice [index, index+1) along axis 0, keeping the rank.
inline Tensor select(const Tensor& x, index_t index) {
  if (index < 0 || index >= x.dim(0)) {
    throw std::out_of_range(detail::concat("select: index ", index, " outside dimension 0 of ",
                                           x.shape().str()));
  }
  const index_t stride = x.numel() / x.dim(0);
  std::vector<index_t> dims(x.shape().dims().begin(), x.shape().dims().end());
  dims[0] = 1;
  std::vector<double> out(x.data().begin() + index * stride, x.data().begin() + (index + 1) * stride);
  Tensor y(Shape(dims), std::move(out));
  if (auto* rec = detail::tracking(x)) {
    rec->record(y, [x, index, stride](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      if (gx.empty()) return;
      for (index_t i = 0; i < stride; ++i) gx[static_cast<std::size_t>(index * stride + i)] += gout[static_cast<std::size_t>(i)];
    });
  }
  return y;
}

/// Channels [begin, end) of a rank-4 tensor.
inline Tensor slice_channels(const Tensor& x, index_t begin, index_t end) {
  require_rank(x, 4, "slice_channels");
  const index_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (begin < 0 || end > c || begin >= end) {
    detail::shape_fail("slice_channels: range [", begin, ", ", end, ") invalid for dimension 1 = ", c);
  }
  const index_t cs = end - begin;
  auto out = detail::buffer(n * cs * plane);
  for (index_t b = 0; b < n; ++b) {
    std::copy_n(x.data().data() + (b * c + begin) * plane, cs * plane, out.data() + b * cs * plane);
  }
  Tensor y(Shape{n, cs, x.dim(2), x.dim(3)}, std::move(out));
  if (auto* rec = detail::tracking(x)) {
    rec->record(y, [x, n, c, cs, begin, plane](std::span<const double> gout, GradSink& sink) {
      auto gx = sink(x);
      if (gx.empty()) return;
      for (index_t b = 0; b < n; ++b) {
        for (index_t i = 0; i < cs * plane; ++i) {
          gx[static_cast<std::size_t>((b * c + begin) * plane + i)] += gout[static_cast<std::size_t>(b * cs * plane + i)];
        }
      }
    });
  }
  return y;
}

}  // namespace dmf
