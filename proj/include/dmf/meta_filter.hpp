// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <stdexcept>
#include <string>

#include "dmf/backbone.hpp"
#include "dmf/ops.hpp"
#include "dmf/params.hpp"
#include "dmf/sampler.hpp"

namespace dmf {

inline const std::string kPsiWeight = "filter.psi.weight";
inline const std::string kPsiBias = "filter.psi.bias";

/// Alignment hyperparameters: g channel groups share one filter weight per
/// position and kernel tap; k is the dynamic kernel size.
struct AlignConfig {
  index_t groups = 8;
  index_t kernel = 1;
  bool dynamic_sampling = true;

  void validate(index_t channels) const {
    if (groups < 1 || channels % groups != 0) {
      throw std::invalid_argument(detail::concat("align: groups ", groups,
                                                 " must divide feature channels ", channels));
    }
    if (kernel < 1 || kernel % 2 == 0) {
      throw std::invalid_argument(detail::concat("align: kernel ", kernel, " must be odd"));
    }
  }
};

/// Position- and group-specific filter weights in (0, 1).
struct MetaFilter {
  Tensor weights;  // [n, g*k*k, h, w]
  index_t groups = 1;
  index_t kernel = 1;
};

/// ψ maps each sampled c x 3 x 3 patch to g*k*k raw filter values.
inline void init_meta_filter(index_t channels, const AlignConfig& config, ParamStore& params,
                             std::mt19937_64& rng) {
  config.validate(channels);
  const index_t out = config.groups * config.kernel * config.kernel;
  const index_t fan_in = channels * kSamplePoints;
  params.add(kPsiWeight, uniform_init(Shape{out, channels, 3, 3}, fan_in, rng));
  params.add(kPsiBias, uniform_init(Shape{out}, fan_in, rng));
}

/// σ(ψ ∗ B̃₃): the 3x3 kernel of ψ is applied "valid" over each position's
/// sampled 3x3 patch, i.e. a dense map from c*9 inputs, realised as a 1x1
/// convolution over the neighbourhood channels.
inline MetaFilter generate_filter(const Neighborhood& neighborhood, index_t groups, index_t kernel,
                                  const ParamStore& params) {
  const Tensor& patches = neighborhood.patches;
  require_rank(patches, 4, "generate_filter");
  if (patches.dim(1) % kSamplePoints != 0) {
    detail::shape_fail("generate_filter: neighbourhood dimension 1 (", patches.dim(1),
                       ") is not a multiple of 9");
  }
  const index_t c = patches.dim(1) / kSamplePoints;
  AlignConfig{groups, kernel, true}.validate(c);
  const Tensor& psi = params.get(kPsiWeight);
  const index_t out = groups * kernel * kernel;
  if (!(psi.shape() == Shape{out, c, 3, 3})) {
    detail::shape_fail("generate_filter: psi has shape ", psi.shape().str(), ", expected ",
                       Shape{out, c, 3, 3}.str());
  }
  const Tensor flat = reshape(psi, Shape{out, c * kSamplePoints, 1, 1});
  const Tensor raw = conv2d(patches, flat, params.get(kPsiBias));
  return {sigmoid(raw), groups, kernel};
}

/// Alignment increment F: out[ch,i,j] = Σ_{u,v} f[group(ch), u, v, i, j] ·
/// q[ch, i+u-r, j+v-r] with zero padding, group(ch) = ch·g/c over contiguous
/// channel blocks.
inline Tensor grouped_dynamic_conv(const Tensor& query, const MetaFilter& filter) {
  require_rank(query, 4, "grouped_dynamic_conv query");
  const Tensor& f = filter.weights;
  require_rank(f, 4, "grouped_dynamic_conv filter");
  const index_t n = query.dim(0), c = query.dim(1), h = query.dim(2), w = query.dim(3);
  const index_t g = filter.groups, k = filter.kernel, kk = k * k, r = (k - 1) / 2;
  if (g < 1 || c % g != 0) {
    detail::shape_fail("grouped_dynamic_conv: groups ", g, " do not divide query channels ", c);
  }
  if (k < 1 || k % 2 == 0) detail::shape_fail("grouped_dynamic_conv: kernel ", k, " must be odd");
  if (f.dim(1) != g * kk) {
    detail::shape_fail("grouped_dynamic_conv: filter dimension 1 is ", f.dim(1), ", expected g*k*k = ",
                       g * kk);
  }
  for (int axis : {0, 2, 3}) {
    if (f.dim(axis) != query.dim(axis)) {
      detail::shape_fail("grouped_dynamic_conv: dimension ", axis, " differs between filter (",
                         f.dim(axis), ") and query (", query.dim(axis), ")");
    }
  }
  const index_t plane = h * w;
  const index_t per_group = c / g;
  auto out = detail::buffer(n * c * plane);
  const double* qs = query.data().data();
  const double* fs = f.data().data();
  for (index_t b = 0; b < n; ++b) {
    for (index_t ch = 0; ch < c; ++ch) {
      const index_t grp = ch / per_group;
      const double* qp = qs + (b * c + ch) * plane;
      double* op = out.data() + (b * c + ch) * plane;
      for (index_t t = 0; t < kk; ++t) {
        const index_t du = t / k - r, dv = t % k - r;
        const double* fp = fs + (b * g * kk + grp * kk + t) * plane;
        for (index_t i = 0; i < h; ++i) {
          const index_t y = i + du;
          if (y < 0 || y >= h) continue;
          for (index_t j = 0; j < w; ++j) {
            const index_t x = j + dv;
            if (x >= 0 && x < w) op[i * w + j] += fp[i * w + j] * qp[y * w + x];
          }
        }
      }
    }
  }
  Tensor result(query.shape(), std::move(out));
  if (auto* rec = detail::tracking(query, f)) {
    rec->record(result, [query, f, n, c, h, w, g, k](std::span<const double> gout, GradSink& sink) {
      auto gq = sink(query);
      auto gf = sink(f);
      const index_t kk = k * k, r = (k - 1) / 2, plane = h * w, per_group = c / g;
      const double* qs = query.data().data();
      const double* fs = f.data().data();
      for (index_t b = 0; b < n; ++b) {
        for (index_t ch = 0; ch < c; ++ch) {
          const index_t grp = ch / per_group;
          const index_t qbase = (b * c + ch) * plane;
          const double* go = gout.data() + qbase;
          for (index_t t = 0; t < kk; ++t) {
            const index_t du = t / k - r, dv = t % k - r;
            const index_t fbase = (b * g * kk + grp * kk + t) * plane;
            for (index_t i = 0; i < h; ++i) {
              const index_t y = i + du;
              if (y < 0 || y >= h) continue;
              for (index_t j = 0; j < w; ++j) {
                const index_t x = j + dv;
                if (x < 0 || x >= w) continue;
                const double gv = go[i * w + j];
                if (!gq.empty()) gq[static_cast<std::size_t>(qbase + y * w + x)] += gv * fs[fbase + i * w + j];
                if (!gf.empty()) gf[static_cast<std::size_t>(fbase + i * w + j)] += gv * qs[qbase + y * w + x];
              }
            }
          }
        }
      }
    });
  }
  return result;
}

/// Offsets (live or frozen at zero) -> deformable gather of the support ->
/// filter.
inline MetaFilter make_filter(const Tensor& support, const Tensor& query, const AlignConfig& config,
                              const ParamStore& params) {
  require_same_shape(support, query, "make_filter");
  config.validate(support.dim(1));
  const OffsetField field = config.dynamic_sampling
                                ? predict_offsets(support, query, params)
                                : OffsetField::zeros(support.dim(0), support.dim(2), support.dim(3));
  return generate_filter(bilinear_gather(support, field), config.groups, config.kernel, params);
}

/// X̂ = X + F(X) for a single alignment pass.
inline Tensor align_once(const Tensor& support, const Tensor& query, const AlignConfig& config,
                         const ParamStore& params) {
  const MetaFilter filter = make_filter(support, query, config, params);
  return add(query, grouped_dynamic_conv(query, filter));
}

}  // namespace dmf
