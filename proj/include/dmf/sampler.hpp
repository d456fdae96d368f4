// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dmf/ops.hpp"
#include "dmf/params.hpp"

namespace dmf {

inline constexpr index_t kSamplePoints = 9;
inline constexpr index_t kOffsetChannels = 2 * kSamplePoints;
inline constexpr index_t kOffsetKernel = 5;

inline const std::string kEtaWeight = "sampler.eta.weight";
inline const std::string kEtaBias = "sampler.eta.bias";

/// Canonical 3x3 grid, row-major: point p sits at (p / 3 - 1, p % 3 - 1).
constexpr std::array<index_t, 2> grid_offset(index_t p) { return {p / 3 - 1, p % 3 - 1}; }

/// Per-position (dy, dx) pairs for the 9 sampling points, in feature-grid
/// pixels. Channel 2p holds dy of point p, channel 2p+1 holds dx.
struct OffsetField {
  Tensor offsets;  // [n, 18, h, w]

  static OffsetField zeros(index_t n, index_t h, index_t w) {
    return {Tensor::zeros(Shape{n, kOffsetChannels, h, w})};
  }

  index_t height() const { return offsets.dim(2); }
  index_t width() const { return offsets.dim(3); }
};

/// Sampled support values, channel ch * 9 + p for point p of channel ch.
struct Neighborhood {
  Tensor patches;  // [n, c * 9, h, w]

  index_t source_channels() const { return patches.dim(1) / kSamplePoints; }
};

/// Offset predictor weights: 5x5 conv from concat(support, query) to 18
/// channels. Zero-initialised so training starts from the regular grid.
inline void init_sampler(index_t feature_channels, ParamStore& params) {
  params.add(kEtaWeight,
             Tensor::zeros(Shape{kOffsetChannels, 2 * feature_channels, kOffsetKernel, kOffsetKernel}));
  params.add(kEtaBias, Tensor::zeros(Shape{kOffsetChannels}));
}

inline OffsetField predict_offsets(const Tensor& support, const Tensor& query, const ParamStore& params) {
  require_rank(support, 4, "predict_offsets support");
  require_same_shape(support, query, "predict_offsets");
  const Tensor both = concat_channels({support, query});
  return {conv2d(both, params.get(kEtaWeight), params.get(kEtaBias),
                 ConvParams{.stride = 1, .padding = kOffsetKernel / 2, .groups = 1})};
}

/// The offset conv is linear in its concatenated input, so it splits into a
/// support-only and a query-only term. An episode computes each term once per
/// feature map and adds them per (class, query) pair.
inline Tensor offset_support_term(const Tensor& support, const ParamStore& params) {
  const Tensor& w = params.get(kEtaWeight);
  const index_t c = support.dim(1);
  if (w.dim(1) != 2 * c) {
    detail::shape_fail("offset_support_term: eta expects ", w.dim(1) / 2, " channels, got ", c);
  }
  return conv2d(support, slice_channels(w, 0, c), std::nullopt,
                ConvParams{.stride = 1, .padding = kOffsetKernel / 2, .groups = 1});
}

inline Tensor offset_query_term(const Tensor& query, const ParamStore& params) {
  const Tensor& w = params.get(kEtaWeight);
  const index_t c = query.dim(1);
  if (w.dim(1) != 2 * c) {
    detail::shape_fail("offset_query_term: eta expects ", w.dim(1) / 2, " channels, got ", c);
  }
  return conv2d(query, slice_channels(w, c, 2 * c), params.get(kEtaBias),
                ConvParams{.stride = 1, .padding = kOffsetKernel / 2, .groups = 1});
}

namespace detail {

// Bilinear corner weights and validity for sampling coordinate (y, x).
struct BilinearTap {
  index_t y0, x0;
  double ly, lx;
  bool valid[2][2];

  BilinearTap(double y, double x, index_t h, index_t w) {
    const double fy = std::floor(y);
    const double fx = std::floor(x);
    y0 = static_cast<index_t>(fy);
    x0 = static_cast<index_t>(fx);
    ly = y - fy;
    lx = x - fx;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        const index_t yy = y0 + a, xx = x0 + b;
        valid[a][b] = yy >= 0 && yy < h && xx >= 0 && xx < w;
      }
    }
  }

  double weight(int a, int b) const { return (a ? ly : 1.0 - ly) * (b ? lx : 1.0 - lx); }

  double corner(const double* plane, index_t w, int a, int b) const {
    return valid[a][b] ? plane[(y0 + a) * w + x0 + b] : 0.0;
  }

  double value(const double* plane, index_t w) const {
    double v = 0.0;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        if (valid[a][b]) v += weight(a, b) * plane[(y0 + a) * w + x0 + b];
      }
    }
    return v;
  }
};

}  // namespace detail

/// Deformable 9-point gather. Point p of position (i, j) reads
/// (i + dy_p + Δy, j + dx_p + Δx) by bilinear interpolation; pixels outside
/// the map read as zero. Differentiable w.r.t. both the feature and the
/// offsets.
inline Neighborhood bilinear_gather(const Tensor& feature, const OffsetField& field) {
  require_rank(feature, 4, "bilinear_gather feature");
  const Tensor& off = field.offsets;
  require_rank(off, 4, "bilinear_gather offsets");
  if (off.dim(1) != kOffsetChannels) {
    detail::shape_fail("bilinear_gather: offset dimension 1 must be 18, got ", off.dim(1));
  }
  for (int axis : {0, 2, 3}) {
    if (off.dim(axis) != feature.dim(axis)) {
      detail::shape_fail("bilinear_gather: dimension ", axis, " differs between offsets (",
                         off.dim(axis), ") and feature (", feature.dim(axis), ")");
    }
  }
  if (!off.all_finite()) throw std::invalid_argument("bilinear_gather: non-finite offsets");
  const index_t n = feature.dim(0), c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  const index_t plane = h * w;
  auto out = detail::buffer(n * c * kSamplePoints * plane);
  const double* fs = feature.data().data();
  const double* os = off.data().data();
  for (index_t b = 0; b < n; ++b) {
    for (index_t p = 0; p < kSamplePoints; ++p) {
      const auto [gy, gx] = grid_offset(p);
      const double* oy = os + (b * kOffsetChannels + 2 * p) * plane;
      const double* ox = oy + plane;
      for (index_t i = 0; i < h; ++i) {
        for (index_t j = 0; j < w; ++j) {
          const index_t pos = i * w + j;
          const detail::BilinearTap tap(static_cast<double>(i + gy) + oy[pos],
                                        static_cast<double>(j + gx) + ox[pos], h, w);
          for (index_t ch = 0; ch < c; ++ch) {
            out[static_cast<std::size_t>(((b * c + ch) * kSamplePoints + p) * plane + pos)] =
                tap.value(fs + (b * c + ch) * plane, w);
          }
        }
      }
    }
  }
  Tensor patches(Shape{n, c * kSamplePoints, h, w}, std::move(out));
  if (auto* rec = detail::tracking(feature, off)) {
    rec->record(patches, [feature, off, n, c, h, w](std::span<const double> gout, GradSink& sink) {
      auto gf = sink(feature);
      auto go = sink(off);
      const index_t plane = h * w;
      const double* fs = feature.data().data();
      const double* os = off.data().data();
      for (index_t b = 0; b < n; ++b) {
        for (index_t p = 0; p < kSamplePoints; ++p) {
          const auto [gy, gx] = grid_offset(p);
          const index_t oy_base = (b * kOffsetChannels + 2 * p) * plane;
          const index_t ox_base = oy_base + plane;
          for (index_t i = 0; i < h; ++i) {
            for (index_t j = 0; j < w; ++j) {
              const index_t pos = i * w + j;
              const detail::BilinearTap tap(static_cast<double>(i + gy) + os[oy_base + pos],
                                            static_cast<double>(j + gx) + os[ox_base + pos], h, w);
              double dy = 0.0, dx = 0.0;
              for (index_t ch = 0; ch < c; ++ch) {
                const double g = gout[static_cast<std::size_t>(((b * c + ch) * kSamplePoints + p) * plane + pos)];
                if (g == 0.0) continue;
                const index_t fbase = (b * c + ch) * plane;
                if (!gf.empty()) {
                  for (int a = 0; a < 2; ++a) {
                    for (int bb = 0; bb < 2; ++bb) {
                      if (tap.valid[a][bb]) {
                        gf[static_cast<std::size_t>(fbase + (tap.y0 + a) * w + tap.x0 + bb)] += g * tap.weight(a, bb);
                      }
                    }
                  }
                }
                if (!go.empty()) {
                  const double* fp = fs + fbase;
                  const double v00 = tap.corner(fp, w, 0, 0), v01 = tap.corner(fp, w, 0, 1);
                  const double v10 = tap.corner(fp, w, 1, 0), v11 = tap.corner(fp, w, 1, 1);
                  dy += g * ((1.0 - tap.lx) * (v10 - v00) + tap.lx * (v11 - v01));
                  dx += g * ((1.0 - tap.ly) * (v01 - v00) + tap.ly * (v11 - v10));
                }
              }
              if (!go.empty()) {
                go[static_cast<std::size_t>(oy_base + pos)] += dy;
                go[static_cast<std::size_t>(ox_base + pos)] += dx;
              }
            }
          }
        }
      }
    });
  }
  return {patches};
}

/// Writes one JSON line per position of sample `b`:
/// {"pos":[i,j],"points":[[y0,x0],...,[y8,x8]]} in absolute support-feature
/// coordinates.
inline void dump_offsets(std::ostream& os, const OffsetField& field, index_t b = 0) {
  const Tensor& off = field.offsets;
  const index_t h = off.dim(2), w = off.dim(3);
  for (index_t i = 0; i < h; ++i) {
    for (index_t j = 0; j < w; ++j) {
      nlohmann::json rec;
      rec["pos"] = {i, j};
      auto points = nlohmann::json::array();
      for (index_t p = 0; p < kSamplePoints; ++p) {
        const auto [gy, gx] = grid_offset(p);
        const double y = static_cast<double>(i + gy) + off.at(b, 2 * p, i, j);
        const double x = static_cast<double>(j + gx) + off.at(b, 2 * p + 1, i, j);
        points.push_back({y, x});
      }
      rec["points"] = std::move(points);
      os << rec.dump() << '\n';
    }
  }
}

}  // namespace dmf
