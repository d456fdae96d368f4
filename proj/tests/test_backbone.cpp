// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace dmf;

namespace {

ParamStore init(const BackboneConfig& c, std::uint64_t seed) {
  ParamStore p;
  std::mt19937_64 rng(seed);
  init_backbone(c, p, rng);
  return p;
}

}  // namespace

TEST(Backbone, LastPoolDoublesFeatureSize) {
  BackboneConfig c;
  std::mt19937_64 rng(1);
  const Tensor img = dmf::testing::random_tensor(Shape{2, 1, 32, 32}, rng);
  const Tensor f = embed(img, c, init(c, 3));
  EXPECT_EQ(f.shape(), (Shape{2, 64, 8, 8}));
  c.keep_last_pool = true;
  const Tensor g = embed(img, c, init(c, 3));
  EXPECT_EQ(g.shape(), (Shape{2, 64, 4, 4}));
  EXPECT_EQ(c.feature_size() * 2, 8);
}

TEST(Backbone, ZeroParametersGiveZeroFeatures) {
  const BackboneConfig c;
  ParamStore p;
  for (const auto& [name, value] : init(c, 1)) p.add(name, Tensor::zeros(value.shape()));
  std::mt19937_64 rng(2);
  const Tensor f = embed(dmf::testing::random_tensor(Shape{1, 1, 32, 32}, rng), c, p);
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, DeterministicAcrossRuns) {
  const BackboneConfig c;
  std::mt19937_64 rng(4);
  const Tensor img = dmf::testing::random_tensor(Shape{1, 1, 32, 32}, rng);
  const Tensor a = embed(img, c, init(c, 9));
  const Tensor b = embed(img, c, init(c, 9));
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), embed(img, c, init(c, 10)).values());
}

TEST(Backbone, InitBoundsFollowFanIn) {
  const BackboneConfig c;
  const ParamStore p = init(c, 5);
  index_t cin = 1;
  for (std::size_t s = 0; s < c.stage_channels.size(); ++s) {
    const double bound = 1.0 / std::sqrt(9.0 * static_cast<double>(cin));
    for (double v : p.get(backbone_weight_name(s)).data()) EXPECT_LE(std::abs(v), bound);
    cin = c.stage_channels[s];
  }
}

TEST(Backbone, RejectsIncompatibleImages) {
  BackboneConfig c;
  const ParamStore p = init(c, 1);
  EXPECT_THROW(embed(Tensor::zeros(Shape{1, 1, 30, 30}), c, p), ShapeError);
  EXPECT_THROW(embed(Tensor::zeros(Shape{1, 3, 32, 32}), c, p), ShapeError);
  c.image_size = 30;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.image_size = 32;
  c.stage_channels.clear();
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
