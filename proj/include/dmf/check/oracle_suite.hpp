// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dmf/check/reference.hpp"
#include "dmf/finite_diff.hpp"
#include "dmf/heads.hpp"
#include "dmf/meta_filter.hpp"
#include "dmf/sampler.hpp"

namespace dmf::check {

struct OracleResult {
  std::string op;
  index_t instances = 0;
  double max_rel_error = 0.0;
  double tolerance = 1e-12;
  bool passed() const { return max_rel_error <= tolerance; }
};

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = d(rng);
  return Tensor(shape, std::move(v));
}

inline index_t rand_int(std::mt19937_64& rng, index_t lo, index_t hi) {
  return std::uniform_int_distribution<index_t>(lo, hi)(rng);
}

namespace detail {

inline OracleResult run_oracle(const std::string& op, index_t instances, std::uint64_t seed,
                               const std::function<double(std::mt19937_64&)>& one) {
  std::mt19937_64 rng(seed);
  OracleResult r{op, instances, 0.0};
  for (index_t i = 0; i < instances; ++i) r.max_rel_error = std::max(r.max_rel_error, one(rng));
  return r;
}

}  // namespace detail

/// Each production kernel against its direct-loop reference on random small
/// instances with randomised geometry.
inline std::vector<OracleResult> run_oracle_suite(index_t instances = 25, std::uint64_t seed = 7) {
  std::vector<OracleResult> out;

  out.push_back(detail::run_oracle("conv2d", instances, seed, [](std::mt19937_64& rng) {
    const index_t groups = rand_int(rng, 1, 3);
    const index_t cin = groups * rand_int(rng, 1, 3), cout = groups * rand_int(rng, 1, 3);
    const index_t k = rand_int(rng, 1, 3) * 2 - 1 + rand_int(rng, 0, 1);  // 1..6
    const index_t stride = rand_int(rng, 1, 2), padding = rand_int(rng, 0, 2);
    const index_t h = rand_int(rng, k, k + 6), w = rand_int(rng, k, k + 6);
    const Tensor x = random_tensor(Shape{rand_int(rng, 1, 2), cin, h, w}, rng);
    const Tensor wt = random_tensor(Shape{cout, cin / groups, k, k}, rng);
    const bool with_bias = rand_int(rng, 0, 1) == 1;
    const std::optional<Tensor> b = with_bias ? std::optional<Tensor>(random_tensor(Shape{cout}, rng)) : std::nullopt;
    const Tensor fast = dmf::conv2d(x, wt, b, ConvParams{stride, padding, groups});
    return relative_error(fast, reference::conv2d(x, wt, b, stride, padding, groups));
  }));

  out.push_back(detail::run_oracle("unfold", instances, seed + 1, [](std::mt19937_64& rng) {
    const index_t k = 2 * rand_int(rng, 0, 2) + 1;
    const Tensor x = random_tensor(Shape{rand_int(rng, 1, 2), rand_int(rng, 1, 4), rand_int(rng, 1, 7),
                                         rand_int(rng, 1, 7)},
                                   rng);
    return relative_error(dmf::unfold(x, k, (k - 1) / 2), reference::unfold(x, k, (k - 1) / 2));
  }));

  out.push_back(detail::run_oracle("bilinear_gather", instances, seed + 2, [](std::mt19937_64& rng) {
    const index_t n = rand_int(rng, 1, 2), c = rand_int(rng, 1, 4), h = rand_int(rng, 2, 6), w = rand_int(rng, 2, 6);
    const Tensor f = random_tensor(Shape{n, c, h, w}, rng);
    // Offsets large enough to leave the map on some points.
    const Tensor off = random_tensor(Shape{n, kOffsetChannels, h, w}, rng, -2.5, 2.5);
    return relative_error(dmf::bilinear_gather(f, OffsetField{off}).patches, reference::bilinear_gather(f, off));
  }));

  out.push_back(detail::run_oracle("generate_filter", instances, seed + 3, [](std::mt19937_64& rng) {
    const index_t per = rand_int(rng, 1, 3), g = rand_int(rng, 1, 3), k = 2 * rand_int(rng, 0, 1) + 1;
    const index_t c = g * per, h = rand_int(rng, 1, 5), w = rand_int(rng, 1, 5);
    const Tensor patches = random_tensor(Shape{rand_int(rng, 1, 2), c * kSamplePoints, h, w}, rng);
    ParamStore p;
    p.add(kPsiWeight, random_tensor(Shape{g * k * k, c, 3, 3}, rng));
    p.add(kPsiBias, random_tensor(Shape{g * k * k}, rng));
    const MetaFilter f = dmf::generate_filter(Neighborhood{patches}, g, k, p);
    return relative_error(f.weights, reference::generate_filter(patches, p.get(kPsiWeight), p.get(kPsiBias)));
  }));

  out.push_back(detail::run_oracle("grouped_dynamic_conv", instances, seed + 4, [](std::mt19937_64& rng) {
    const index_t g = rand_int(rng, 1, 4), per = rand_int(rng, 1, 3), k = 2 * rand_int(rng, 0, 2) + 1;
    const index_t n = rand_int(rng, 1, 2), c = g * per, h = rand_int(rng, 1, 6), w = rand_int(rng, 1, 6);
    const Tensor q = random_tensor(Shape{n, c, h, w}, rng);
    const Tensor f = random_tensor(Shape{n, g * k * k, h, w}, rng, 0.0, 1.0);
    return relative_error(dmf::grouped_dynamic_conv(q, MetaFilter{f, g, k}), reference::grouped_dynamic_conv(q, f, g, k));
  }));

  out.push_back(detail::run_oracle("meta_classify", instances, seed + 5, [](std::mt19937_64& rng) {
    const Shape s{1, rand_int(rng, 1, 8), rand_int(rng, 1, 6), rand_int(rng, 1, 6)};
    const Tensor proto = random_tensor(s, rng), query = random_tensor(s, rng);
    return relative_error(dmf::meta_classify(proto, query).values, reference::meta_classify(proto, query));
  }));

  return out;
}

}  // namespace dmf::check
