// SPDX-License-Identifier: Apache-2.0
#pragma once

// Direct-loop reference implementations. Written for clarity, not speed, and
// sharing no code with the production kernels (no im2col, no GEMM, no tape).

#include <cmath>
#include <optional>
#include <vector>

#include "dmf/tensor.hpp"

namespace dmf::reference {

inline Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, index_t stride,
                     index_t padding, index_t groups) {
  const index_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const index_t cout = w.dim(0), cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const index_t ho = (h + 2 * padding - kh) / stride + 1;
  const index_t wo = (wd + 2 * padding - kw) / stride + 1;
  const index_t cout_g = cout / groups;
  std::vector<double> out(static_cast<std::size_t>(n * cout * ho * wo), 0.0);
  for (index_t b = 0; b < n; ++b)
    for (index_t o = 0; o < cout; ++o) {
      const index_t grp = o / cout_g;
      for (index_t i = 0; i < ho; ++i)
        for (index_t j = 0; j < wo; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (index_t ci = 0; ci < cin_g; ++ci)
            for (index_t u = 0; u < kh; ++u)
              for (index_t v = 0; v < kw; ++v) {
                const index_t y = i * stride + u - padding;
                const index_t xx = j * stride + v - padding;
                if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
                acc += w.at(o, ci, u, v) * x.at(b, grp * cin_g + ci, y, xx);
              }
          out[static_cast<std::size_t>(((b * cout + o) * ho + i) * wo + j)] = acc;
        }
    }
  (void)cin;
  return Tensor(Shape{n, cout, ho, wo}, std::move(out));
}

inline Tensor unfold(const Tensor& x, index_t k, index_t padding) {
  const index_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(static_cast<std::size_t>(n * c * k * k * h * w), 0.0);
  for (index_t b = 0; b < n; ++b)
    for (index_t ch = 0; ch < c; ++ch)
      for (index_t u = 0; u < k; ++u)
        for (index_t v = 0; v < k; ++v)
          for (index_t i = 0; i < h; ++i)
            for (index_t j = 0; j < w; ++j) {
              const index_t y = i + u - padding, xx = j + v - padding;
              const double val = (y >= 0 && y < h && xx >= 0 && xx < w) ? x.at(b, ch, y, xx) : 0.0;
              out[static_cast<std::size_t>((((b * c + ch) * k * k + u * k + v) * h + i) * w + j)] = val;
            }
  return Tensor(Shape{n, c * k * k, h, w}, std::move(out));
}

/// Bilinear sampling written as a tent-kernel sum over every pixel:
/// v(py, px) = Σ_{y,x} max(0, 1-|py-y|) · max(0, 1-|px-x|) · f[y, x].
inline Tensor bilinear_gather(const Tensor& f, const Tensor& offsets) {
  const index_t n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  std::vector<double> out(static_cast<std::size_t>(n * c * 9 * h * w), 0.0);
  for (index_t b = 0; b < n; ++b)
    for (index_t p = 0; p < 9; ++p)
      for (index_t i = 0; i < h; ++i)
        for (index_t j = 0; j < w; ++j) {
          const double py = static_cast<double>(i + p / 3 - 1) + offsets.at(b, 2 * p, i, j);
          const double px = static_cast<double>(j + p % 3 - 1) + offsets.at(b, 2 * p + 1, i, j);
          for (index_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (index_t y = 0; y < h; ++y)
              for (index_t xx = 0; xx < w; ++xx) {
                const double ky = std::max(0.0, 1.0 - std::abs(py - static_cast<double>(y)));
                const double kx = std::max(0.0, 1.0 - std::abs(px - static_cast<double>(xx)));
                acc += ky * kx * f.at(b, ch, y, xx);
              }
            out[static_cast<std::size_t>((((b * c + ch) * 9 + p) * h + i) * w + j)] = acc;
          }
        }
  return Tensor(Shape{n, c * 9, h, w}, std::move(out));
}

/// σ(b_o + Σ_{ch,u,v} ψ[o,ch,u,v] · patch[ch, u, v]) per position, where
/// patch[ch, u, v] is sampled point u*3+v of channel ch.
inline Tensor generate_filter(const Tensor& patches, const Tensor& psi, const Tensor& bias) {
  const index_t n = patches.dim(0), h = patches.dim(2), w = patches.dim(3);
  const index_t out_ch = psi.dim(0), c = psi.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * out_ch * h * w), 0.0);
  for (index_t b = 0; b < n; ++b)
    for (index_t o = 0; o < out_ch; ++o)
      for (index_t i = 0; i < h; ++i)
        for (index_t j = 0; j < w; ++j) {
          double z = bias[o];
          for (index_t ch = 0; ch < c; ++ch)
            for (index_t u = 0; u < 3; ++u)
              for (index_t v = 0; v < 3; ++v) z += psi.at(o, ch, u, v) * patches.at(b, ch * 9 + u * 3 + v, i, j);
          out[static_cast<std::size_t>(((b * out_ch + o) * h + i) * w + j)] = 1.0 / (1.0 + std::exp(-z));
        }
  return Tensor(Shape{n, out_ch, h, w}, std::move(out));
}

/// out[ch,i,j] = Σ_{u,v} f[grp(ch)·k² + u·k + v, i, j] · q[ch, i+u-r, j+v-r],
/// grp(ch) = ⌊ch / (c/g)⌋.
inline Tensor grouped_dynamic_conv(const Tensor& q, const Tensor& f, index_t g, index_t k) {
  const index_t n = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3), r = (k - 1) / 2;
  std::vector<double> out(static_cast<std::size_t>(n * c * h * w), 0.0);
  for (index_t b = 0; b < n; ++b)
    for (index_t ch = 0; ch < c; ++ch) {
      const index_t grp = ch / (c / g);
      for (index_t i = 0; i < h; ++i)
        for (index_t j = 0; j < w; ++j) {
          double acc = 0.0;
          for (index_t u = 0; u < k; ++u)
            for (index_t v = 0; v < k; ++v) {
              const index_t y = i + u - r, xx = j + v - r;
              if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
              acc += f.at(b, grp * k * k + u * k + v, i, j) * q.at(b, ch, y, xx);
            }
          out[static_cast<std::size_t>(((b * c + ch) * h + i) * w + j)] = acc;
        }
    }
  return Tensor(Shape{n, c, h, w}, std::move(out));
}

/// map[i,j] = Σ_ch mean(prototype[ch]) · query[ch, i, j].
inline Tensor meta_classify(const Tensor& proto, const Tensor& query) {
  const index_t c = proto.dim(1), h = proto.dim(2), w = proto.dim(3);
  std::vector<double> gap(static_cast<std::size_t>(c), 0.0);
  for (index_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (index_t i = 0; i < h; ++i)
      for (index_t j = 0; j < w; ++j) s += proto.at(0, ch, i, j);
    gap[static_cast<std::size_t>(ch)] = s / static_cast<double>(h * w);
  }
  std::vector<double> out(static_cast<std::size_t>(h * w), 0.0);
  for (index_t i = 0; i < h; ++i)
    for (index_t j = 0; j < w; ++j) {
      double acc = 0.0;
      for (index_t ch = 0; ch < c; ++ch) acc += gap[static_cast<std::size_t>(ch)] * query.at(0, ch, i, j);
      out[static_cast<std::size_t>(i * w + j)] = acc;
    }
  return Tensor(Shape{1, 1, h, w}, std::move(out));
}

}  // namespace dmf::reference
