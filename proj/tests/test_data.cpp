// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace dmf;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec(index_t classes = 12, index_t train = 7) {
  SyntheticSpec s;
  s.num_classes = classes;
  s.num_train = train;
  s.image_size = 16;
  s.samples_per_class = 20;
  return s;
}

// 5-way 1-shot nearest centroid on raw pixels, squared Euclidean distance.
double nearest_centroid_accuracy(const Dataset& ds, index_t episodes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  index_t correct = 0, total = 0;
  for (index_t e = 0; e < episodes; ++e) {
    const Episode ep = sample_episode(ds, Split::meta_test, 5, 1, 3, rng);
    for (const auto& q : ep.query) {
      const Tensor x = ds.image(q.class_id, q.sample);
      index_t best = -1;
      double best_d = 0.0;
      for (const auto& s : ep.support) {
        const Tensor c = ds.image(s.class_id, s.sample);
        double d = 0.0;
        for (index_t i = 0; i < x.numel(); ++i) d += (x[i] - c[i]) * (x[i] - c[i]);
        if (best < 0 || d < best_d) best = s.slot, best_d = d;
      }
      correct += best == q.slot;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST(Synthetic, DeterministicPerSeed) {
  const Dataset a = generate_synthetic(small_spec()), b = generate_synthetic(small_spec());
  ASSERT_EQ(a.classes.size(), b.classes.size());
  for (std::size_t c = 0; c < a.classes.size(); ++c) EXPECT_EQ(a.classes[c].images.values(), b.classes[c].images.values());
  EXPECT_EQ(a.meta_train, b.meta_train);
  EXPECT_EQ(a.meta_test, b.meta_test);
  SyntheticSpec other = small_spec();
  other.seed = 2;
  EXPECT_NE(generate_synthetic(other).classes[0].images.values(), a.classes[0].images.values());
}

TEST(Synthetic, PixelRangeAndDisjointSplits) {
  SyntheticSpec spec = small_spec(24, 14);
  spec.num_val = 3;
  const Dataset ds = generate_synthetic(spec);
  for (const auto& c : ds.classes) {
    EXPECT_EQ(c.images.shape(), (Shape{20, 1, 16, 16}));
    for (double v : c.images.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  std::set<index_t> all;
  for (auto split : {Split::meta_train, Split::meta_val, Split::meta_test}) all.insert(ds.split(split).begin(), ds.split(split).end());
  EXPECT_EQ(all.size(), 24u);
  EXPECT_EQ(ds.meta_train.size(), 14u);
  EXPECT_EQ(ds.meta_val.size(), 3u);
  EXPECT_EQ(ds.meta_test.size(), 7u);
  for (std::size_t i = 0; i < ds.meta_train.size(); ++i) EXPECT_EQ(ds.global_label(ds.meta_train[i]), static_cast<index_t>(i));
  EXPECT_EQ(ds.global_label(ds.meta_test[0]), -1);
}

TEST(Synthetic, NoiselessExemplarsAreShapesOnly) {
  SyntheticSpec spec = small_spec();
  spec.noise_sigma = 0.0;
  spec.jitter = 0.0;
  spec.scale_min = spec.scale_max = 0.3;
  const Dataset ds = generate_synthetic(spec);
  // Without noise, jitter or scale spread every exemplar of a class is the same picture.
  for (const auto& c : ds.classes) {
    const Tensor first = select(c.images, 0);
    for (index_t n = 1; n < c.size(); ++n) EXPECT_EQ(select(c.images, n).values(), first.values());
  }
}

TEST(Synthetic, FamiliesAreDistinct) {
  SyntheticSpec spec = small_spec(32, 16);
  spec.noise_sigma = 0.0;
  spec.jitter = 0.0;
  const Dataset ds = generate_synthetic(spec);
  for (std::size_t a = 0; a < ds.classes.size(); ++a)
    for (std::size_t b = a + 1; b < ds.classes.size(); ++b)
      EXPECT_NE(select(ds.classes[a].images, 0).values(), select(ds.classes[b].images, 0).values()) << a << " " << b;
}

TEST(Synthetic, ValidationErrors) {
  SyntheticSpec s = small_spec();
  s.num_classes = 33;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.num_train = 12;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.channels = 3;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Synthetic, NearestCentroidBeatsChance) {
  const Dataset ds = generate_synthetic(small_spec());
  EXPECT_GT(nearest_centroid_accuracy(ds, 300, 5), 0.20);
}

TEST(SampleEpisode, Counting) {
  const Dataset ds = generate_synthetic(small_spec(12, 2));
  std::mt19937_64 rng(1);
  const Episode ep = sample_episode(ds, Split::meta_test, 5, 1, 3, rng);
  EXPECT_EQ(ep.support.size(), 5u);
  EXPECT_EQ(ep.query.size(), 15u);
  std::set<std::pair<index_t, index_t>> s, q;
  for (const auto& it : ep.support) s.insert({it.class_id, it.sample});
  for (const auto& it : ep.query) q.insert({it.class_id, it.sample});
  EXPECT_EQ(s.size(), 5u);
  EXPECT_EQ(q.size(), 15u);
  for (const auto& x : s) EXPECT_FALSE(q.contains(x));
  std::vector<int> per_slot(5, 0);
  for (const auto& it : ep.query) {
    ++per_slot[static_cast<std::size_t>(it.slot)];
    EXPECT_EQ(ep.slot_map[static_cast<std::size_t>(it.slot)], it.class_id);
  }
  for (int n : per_slot) EXPECT_EQ(n, 3);
}

TEST(SampleEpisode, ExhaustiveDrawUsesEveryClassOnce) {
  const Dataset ds = generate_synthetic(small_spec(12, 7));
  std::mt19937_64 rng(2);
  const Episode ep = sample_episode(ds, Split::meta_test, 5, 2, 2, rng);
  const std::set<index_t> drawn(ep.slot_map.begin(), ep.slot_map.end());
  EXPECT_EQ(drawn, std::set<index_t>(ds.meta_test.begin(), ds.meta_test.end()));
}

TEST(SampleEpisode, DeterministicGivenRngState) {
  const Dataset ds = generate_synthetic(small_spec());
  std::mt19937_64 a(9), b(9);
  const Episode x = sample_episode(ds, Split::meta_train, 5, 1, 4, a);
  const Episode y = sample_episode(ds, Split::meta_train, 5, 1, 4, b);
  EXPECT_EQ(x.slot_map, y.slot_map);
  for (std::size_t i = 0; i < x.query.size(); ++i) EXPECT_EQ(x.query[i].sample, y.query[i].sample);
}

TEST(SampleEpisode, UniformClassFrequency) {
  const Dataset ds = generate_synthetic(small_spec(12, 2));
  ASSERT_EQ(ds.meta_test.size(), 10u);
  std::mt19937_64 rng(3);
  std::map<index_t, int> counts;
  const int episodes = 10000;
  for (int e = 0; e < episodes; ++e) {
    for (index_t c : sample_episode(ds, Split::meta_test, 5, 1, 1, rng).slot_map) ++counts[c];
  }
  // Each class is included with probability 1/2 per episode.
  const double mean = episodes * 0.5, sigma = std::sqrt(episodes * 0.5 * 0.5);
  ASSERT_EQ(counts.size(), 10u);
  for (const auto& [c, n] : counts) EXPECT_NEAR(n, mean, 3.0 * sigma) << "class " << c;
}

TEST(SampleEpisode, Errors) {
  const Dataset ds = generate_synthetic(small_spec(12, 8));
  std::mt19937_64 rng(4);
  EXPECT_THROW(sample_episode(ds, Split::meta_test, 5, 1, 1, rng), std::invalid_argument);
  EXPECT_THROW(sample_episode(ds, Split::meta_train, 5, 10, 11, rng), std::invalid_argument);
  EXPECT_THROW(sample_episode(ds, Split::meta_train, 5, 0, 1, rng), std::invalid_argument);
}

TEST(Prototypes, MeanOfSupportFeatures) {
  std::mt19937_64 rng(5);
  const Tensor x = dmf::testing::random_tensor(Shape{1, 3, 2, 2}, rng);
  EXPECT_EQ(prototypes({{x}})[0].values(), x.values());
  const Tensor cancelled = prototypes({{x, scale(x, -1.0)}})[0];
  for (double v : cancelled.data()) EXPECT_EQ(v, 0.0);
  std::vector<Tensor> five;
  for (int i = 0; i < 5; ++i) five.push_back(dmf::testing::random_tensor(Shape{1, 3, 2, 2}, rng));
  const Tensor p = prototypes({five})[0];
  for (index_t i = 0; i < p.numel(); ++i) {
    double s = 0.0;
    for (const auto& f : five) s += f[i];
    EXPECT_NEAR(p[i], s / 5.0, 1e-12 * std::max(1.0, std::abs(s)));
  }
  EXPECT_THROW(prototypes({{x}, {}}), std::invalid_argument);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const Dataset ds = generate_synthetic(small_spec());
  const fs::path dir = fs::temp_directory_path() / "dmf_test_dataset";
  fs::remove_all(dir);
  save_dataset(dir, ds);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.image_size, ds.image_size);
  EXPECT_EQ(back.meta_train, ds.meta_train);
  EXPECT_EQ(back.meta_test, ds.meta_test);
  ASSERT_EQ(back.classes.size(), ds.classes.size());
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    EXPECT_EQ(back.classes[c].images.values(), ds.classes[c].images.values());
    EXPECT_EQ(back.classes[c].family, ds.classes[c].family);
  }
  fs::remove_all(dir);
}

TEST(DeriveSeed, DistinctPerIndex) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(7, i));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
  EXPECT_NE(derive_seed(7, 3), derive_seed(8, 3));
}
