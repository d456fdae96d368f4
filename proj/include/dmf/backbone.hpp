// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmf/ops.hpp"
#include "dmf/params.hpp"

namespace dmf {

/// Plain CNN encoder: per stage conv3x3(pad 1) -> relu -> max_pool2. The last
/// stage's pooling is skipped unless keep_last_pool is set, which doubles the
/// output feature map's spatial size.
struct BackboneConfig {
  index_t in_channels = 1;
  std::vector<index_t> stage_channels{16, 32, 64};
  bool keep_last_pool = false;
  index_t image_size = 32;

  int pools_applied() const {
    const auto stages = static_cast<int>(stage_channels.size());
    return keep_last_pool ? stages : stages - 1;
  }

  index_t feature_channels() const { return stage_channels.back(); }
  index_t feature_size() const { return image_size >> pools_applied(); }

  void validate() const {
    if (stage_channels.empty()) throw std::invalid_argument("backbone: stage_channels is empty");
    if (in_channels < 1) throw std::invalid_argument("backbone: in_channels must be >= 1");
    for (index_t c : stage_channels) {
      if (c < 1) throw std::invalid_argument("backbone: stage channel counts must be >= 1");
    }
    const index_t divisor = index_t{1} << pools_applied();
    if (image_size < divisor || image_size % divisor != 0) {
      throw std::invalid_argument(detail::concat("backbone: image_size ", image_size,
                                                 " not divisible by 2^", pools_applied()));
    }
  }
};

inline std::string backbone_weight_name(std::size_t stage) {
  return "backbone.stage" + std::to_string(stage) + ".weight";
}
inline std::string backbone_bias_name(std::size_t stage) {
  return "backbone.stage" + std::to_string(stage) + ".bias";
}

/// Uniform(-b, b) with b = 1/sqrt(fan_in).
inline Tensor uniform_init(Shape shape, index_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

inline void init_backbone(const BackboneConfig& config, ParamStore& params, std::mt19937_64& rng) {
  config.validate();
  index_t cin = config.in_channels;
  for (std::size_t s = 0; s < config.stage_channels.size(); ++s) {
    const index_t cout = config.stage_channels[s];
    const index_t fan_in = cin * 9;
    params.add(backbone_weight_name(s), uniform_init(Shape{cout, cin, 3, 3}, fan_in, rng));
    params.add(backbone_bias_name(s), uniform_init(Shape{cout}, fan_in, rng));
    cin = cout;
  }
}

inline Tensor embed(const Tensor& images, const BackboneConfig& config, const ParamStore& params) {
  config.validate();
  require_rank(images, 4, "embed");
  if (images.dim(1) != config.in_channels) {
    detail::shape_fail("embed: image channels (dimension 1) ", images.dim(1), " but backbone expects ",
                       config.in_channels);
  }
  if (images.dim(2) != config.image_size || images.dim(3) != config.image_size) {
    detail::shape_fail("embed: image size ", images.dim(2), "x", images.dim(3),
                       " incompatible with configured image_size ", config.image_size);
  }
  Tensor x = images;
  const std::size_t stages = config.stage_channels.size();
  for (std::size_t s = 0; s < stages; ++s) {
    x = conv2d(x, params.get(backbone_weight_name(s)), params.get(backbone_bias_name(s)),
               ConvParams{.stride = 1, .padding = 1, .groups = 1});
    x = relu(x);
    if (s + 1 < stages || config.keep_last_pool) x = max_pool2(x);
  }
  return x;
}

}  // namespace dmf
