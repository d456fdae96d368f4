// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmf/ops.hpp"
#include "dmf/serialize.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

/// splitmix64 finaliser; derives independent stream seeds from (seed, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(index + 0x632be59bd9b4e019ull));
}

enum class ShapeFamily {
  square,
  disk,
  triangle,
  cross,
  ring,
  hbars,
  vbars,
  diamond,
  xshape,
  frame,
  checker,
  tshape,
  lshape,
  hollow_diamond,
  half_disk,
  dots,
};

inline constexpr int kShapeFamilies = 16;

inline const char* family_name(ShapeFamily f) {
  static constexpr const char* names[kShapeFamilies] = {
      "square", "disk",    "triangle", "cross",  "ring",   "hbars",          "vbars",     "diamond",
      "xshape", "frame",   "checker",  "tshape", "lshape", "hollow_diamond", "half_disk", "dots"};
  return names[static_cast<int>(f)];
}

/// Inside test in shape-local coordinates (u, v) ∈ [-1, 1]², u right, v down.
inline bool family_contains(ShapeFamily f, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double m = std::max(au, av);
  const double d = std::sqrt(u * u + v * v);
  switch (f) {
    case ShapeFamily::square: return m <= 0.8;
    case ShapeFamily::disk: return d <= 0.9;
    case ShapeFamily::triangle: return v <= 0.8 && v >= -0.9 && au <= (v + 0.9) * 0.55;
    case ShapeFamily::cross: return (au <= 0.25 && av <= 0.95) || (av <= 0.25 && au <= 0.95);
    case ShapeFamily::ring: return d <= 0.95 && d >= 0.55;
    case ShapeFamily::hbars: return m <= 0.9 && static_cast<int>(std::floor((v + 0.9) / 0.36)) % 2 == 0;
    case ShapeFamily::vbars: return m <= 0.9 && static_cast<int>(std::floor((u + 0.9) / 0.36)) % 2 == 0;
    case ShapeFamily::diamond: return au + av <= 0.95;
    case ShapeFamily::xshape: return m <= 0.9 && std::abs(au - av) <= 0.28;
    case ShapeFamily::frame: return m <= 0.9 && m >= 0.55;
    case ShapeFamily::checker: return m <= 0.9 && (u * v > 0.0);
    case ShapeFamily::tshape: return (v <= -0.5 && v >= -0.9 && au <= 0.9) || (au <= 0.22 && v >= -0.9 && v <= 0.9);
    case ShapeFamily::lshape: return (u <= -0.5 && u >= -0.9 && av <= 0.9) || (v >= 0.5 && v <= 0.9 && au <= 0.9);
    case ShapeFamily::hollow_diamond: return au + av <= 0.95 && au + av >= 0.55;
    case ShapeFamily::half_disk: return d <= 0.9 && v >= -0.1;
    case ShapeFamily::dots: {
      const double du = au - 0.55, dv = av - 0.55;
      return du * du + dv * dv <= 0.3 * 0.3;
    }
  }
  return false;
}

/// Desk-scale stand-in for a natural-image few-shot benchmark: one shape
/// family per class, random position/scale jitter, optional distractor
/// shapes from other families, additive Gaussian noise.
struct SyntheticSpec {
  index_t num_classes = 12;
  index_t image_size = 32;
  index_t channels = 1;
  index_t samples_per_class = 60;
  double jitter = 0.15;        // centre jitter, fraction of image size
  double scale_min = 0.22;     // shape half-extent, fraction of image size
  double scale_max = 0.32;
  index_t distractors = 0;     // extra shapes per image from non-class families
  double distractor_scale = 0.12;
  double noise_sigma = 0.05;
  index_t num_train = 8;
  index_t num_val = 0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("synthetic: need at least 2 classes");
    if (num_classes > kShapeFamilies * 2) {
      throw std::invalid_argument("synthetic: at most 32 distinct classes available");
    }
    if (channels != 1) throw std::invalid_argument("synthetic: only single-channel images");
    if (image_size < 4) throw std::invalid_argument("synthetic: image_size too small");
    if (samples_per_class < 2) throw std::invalid_argument("synthetic: samples_per_class < 2");
    if (num_train < 1 || num_train + num_val >= num_classes) {
      throw std::invalid_argument("synthetic: split sizes leave no meta-test classes");
    }
    if (!(scale_min > 0.0) || scale_max < scale_min) throw std::invalid_argument("synthetic: bad scale band");
    if (noise_sigma < 0.0 || jitter < 0.0) throw std::invalid_argument("synthetic: negative jitter/noise");
  }
};

struct ClassData {
  index_t id = 0;
  std::string family;
  Tensor images;  // [samples, channels, size, size]

  index_t size() const { return images.dim(0); }
};

enum class Split { meta_train, meta_val, meta_test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::meta_train: return "meta_train";
    case Split::meta_val: return "meta_val";
    case Split::meta_test: return "meta_test";
  }
  return "?";
}

struct Dataset {
  std::vector<ClassData> classes;  // indexed by class id
  std::vector<index_t> meta_train;
  std::vector<index_t> meta_val;
  std::vector<index_t> meta_test;
  index_t image_size = 0;
  index_t channels = 1;

  const std::vector<index_t>& split(Split s) const {
    switch (s) {
      case Split::meta_train: return meta_train;
      case Split::meta_val: return meta_val;
      case Split::meta_test: return meta_test;
    }
    throw std::logic_error("bad split");
  }

  /// Position of `class_id` inside the meta-train split, or -1.
  index_t global_label(index_t class_id) const {
    auto it = std::find(meta_train.begin(), meta_train.end(), class_id);
    return it == meta_train.end() ? -1 : static_cast<index_t>(it - meta_train.begin());
  }

  Tensor image(index_t class_id, index_t sample) const {
    return select(classes.at(static_cast<std::size_t>(class_id)).images, sample);
  }
};

namespace detail {

// 4x4 supersampled coverage of a shape centred at (cy, cx) with half-extent r,
// max-composited into `img`.
inline void draw_shape(std::vector<double>& img, index_t size, ShapeFamily f, double cy, double cx,
                       double r) {
  constexpr int ss = 4;
  const index_t y_lo = std::max<index_t>(0, static_cast<index_t>(std::floor(cy - r - 1)));
  const index_t y_hi = std::min<index_t>(size - 1, static_cast<index_t>(std::ceil(cy + r + 1)));
  const index_t x_lo = std::max<index_t>(0, static_cast<index_t>(std::floor(cx - r - 1)));
  const index_t x_hi = std::min<index_t>(size - 1, static_cast<index_t>(std::ceil(cx + r + 1)));
  for (index_t y = y_lo; y <= y_hi; ++y) {
    for (index_t x = x_lo; x <= x_hi; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double py = static_cast<double>(y) + (sy + 0.5) / ss;
          const double px = static_cast<double>(x) + (sx + 0.5) / ss;
          if (family_contains(f, (px - cx) / r, (py - cy) / r)) ++hits;
        }
      }
      auto& pix = img[static_cast<std::size_t>(y * size + x)];
      pix = std::max(pix, static_cast<double>(hits) / (ss * ss));
    }
  }
}

}  // namespace detail

/// Deterministic per seed. Classes 0..num_classes-1 map to families
/// 0..15 and then, for ids ≥ 16, to the same families in a smaller scale band.
/// The class order is shuffled before the split so the split does not depend
/// on family order.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const index_t s = spec.image_size;
  const double size = static_cast<double>(s);

  Dataset ds;
  ds.image_size = s;
  ds.channels = spec.channels;
  for (index_t id = 0; id < spec.num_classes; ++id) {
    const auto family = static_cast<ShapeFamily>(id % kShapeFamilies);
    const bool small_band = id >= kShapeFamilies;
    std::vector<double> all(static_cast<std::size_t>(spec.samples_per_class * s * s), 0.0);
    for (index_t n = 0; n < spec.samples_per_class; ++n) {
      std::vector<double> img(static_cast<std::size_t>(s * s), 0.0);
      double lo = spec.scale_min, hi = spec.scale_max;
      if (small_band) {
        hi = lo;
        lo = lo * 0.6;
      }
      const double r = size * (lo + (hi - lo) * unit(rng));
      const double cy = size * (0.5 + spec.jitter * (2.0 * unit(rng) - 1.0));
      const double cx = size * (0.5 + spec.jitter * (2.0 * unit(rng) - 1.0));
      detail::draw_shape(img, s, family, cy, cx, r);
      for (index_t d = 0; d < spec.distractors; ++d) {
        auto other = static_cast<ShapeFamily>(
            (static_cast<int>(family) + 1 + static_cast<int>(unit(rng) * (kShapeFamilies - 1))) %
            kShapeFamilies);
        const double dr = size * spec.distractor_scale * (0.8 + 0.4 * unit(rng));
        const double dy = dr + (size - 2 * dr) * unit(rng);
        const double dx = dr + (size - 2 * dr) * unit(rng);
        detail::draw_shape(img, s, other, dy, dx, dr);
      }
      for (auto& v : img) v = std::clamp(v + spec.noise_sigma * gauss(rng), 0.0, 1.0);
      std::copy(img.begin(), img.end(), all.begin() + n * s * s);
    }
    ds.classes.push_back({id, family_name(family) + std::string(small_band ? "_small" : ""),
                          Tensor(Shape{spec.samples_per_class, 1, s, s}, std::move(all))});
  }
  std::vector<index_t> order(static_cast<std::size_t>(spec.num_classes));
  for (index_t i = 0; i < spec.num_classes; ++i) order[static_cast<std::size_t>(i)] = i;
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const auto ntr = static_cast<std::size_t>(spec.num_train);
  const auto nva = static_cast<std::size_t>(spec.num_val);
  ds.meta_train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(ntr));
  ds.meta_val.assign(order.begin() + static_cast<std::ptrdiff_t>(ntr),
                     order.begin() + static_cast<std::ptrdiff_t>(ntr + nva));
  ds.meta_test.assign(order.begin() + static_cast<std::ptrdiff_t>(ntr + nva), order.end());
  return ds;
}

/// One directory per class holding samples.tensor, plus manifest.json with
/// the split lists.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["image_size"] = ds.image_size;
  manifest["channels"] = ds.channels;
  manifest["classes"] = nlohmann::json::array();
  for (const auto& c : ds.classes) {
    const std::string sub = "class_" + std::to_string(c.id);
    std::filesystem::create_directories(dir / sub);
    save_tensor(dir / sub / "samples.tensor", c.images);
    manifest["classes"].push_back({{"id", c.id}, {"dir", sub}, {"family", c.family}, {"samples", c.size()}});
  }
  manifest["splits"] = {{"meta_train", ds.meta_train}, {"meta_val", ds.meta_val}, {"meta_test", ds.meta_test}};
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("no manifest.json in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  Dataset ds;
  ds.image_size = manifest.at("image_size").get<index_t>();
  ds.channels = manifest.at("channels").get<index_t>();
  for (const auto& c : manifest.at("classes")) {
    const auto id = c.at("id").get<index_t>();
    if (id != static_cast<index_t>(ds.classes.size())) throw FormatError("class ids must be 0..n-1 in order");
    Tensor images = load_tensor(dir / c.at("dir").get<std::string>() / "samples.tensor");
    ds.classes.push_back({id, c.value("family", ""), std::move(images)});
  }
  const auto& splits = manifest.at("splits");
  ds.meta_train = splits.at("meta_train").get<std::vector<index_t>>();
  ds.meta_val = splits.value("meta_val", std::vector<index_t>{});
  ds.meta_test = splits.at("meta_test").get<std::vector<index_t>>();
  return ds;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

struct EpisodeItem {
  index_t class_id = 0;
  index_t sample = 0;
  index_t slot = 0;          // position of the class within the episode
  index_t global_label = -1; // meta-train label, -1 outside meta-train
};

/// One N-way K-shot task. Support items are ordered slot-major (the K shots
/// of slot 0 first), queries likewise with Q per slot.
struct Episode {
  index_t n_way = 0, k_shot = 0, q_query = 0;
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> query;
  std::vector<index_t> slot_map;  // slot -> class id
};

inline Episode sample_episode(const Dataset& ds, Split split, index_t n_way, index_t k_shot, index_t q_query,
                              std::mt19937_64& rng) {
  const auto& pool = ds.split(split);
  if (n_way < 1 || k_shot < 1 || q_query < 1) {
    throw std::invalid_argument("sample_episode: N, K, Q must be >= 1");
  }
  if (static_cast<index_t>(pool.size()) < n_way) {
    throw std::invalid_argument(detail::concat("sample_episode: split ", split_name(split), " has ",
                                               pool.size(), " classes, need ", n_way));
  }
  std::vector<index_t> classes = pool;
  for (index_t i = 0; i < n_way; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), classes.size() - 1);
    std::swap(classes[static_cast<std::size_t>(i)], classes[pick(rng)]);
  }
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_query = q_query;
  ep.slot_map.assign(classes.begin(), classes.begin() + n_way);
  for (index_t slot = 0; slot < n_way; ++slot) {
    const index_t cid = ep.slot_map[static_cast<std::size_t>(slot)];
    const index_t avail = ds.classes.at(static_cast<std::size_t>(cid)).size();
    if (avail < k_shot + q_query) {
      throw std::invalid_argument(detail::concat("sample_episode: class ", cid, " has ", avail,
                                                 " samples, need K+Q = ", k_shot + q_query));
    }
    std::vector<index_t> idx(static_cast<std::size_t>(avail));
    for (index_t i = 0; i < avail; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (index_t i = 0; i < k_shot + q_query; ++i) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[pick(rng)]);
    }
    const index_t glabel = ds.global_label(cid);
    for (index_t i = 0; i < k_shot; ++i) ep.support.push_back({cid, idx[static_cast<std::size_t>(i)], slot, glabel});
    for (index_t i = k_shot; i < k_shot + q_query; ++i) {
      ep.query.push_back({cid, idx[static_cast<std::size_t>(i)], slot, glabel});
    }
  }
  return ep;
}

/// Elementwise mean of each slot's support features.
inline std::vector<Tensor> prototypes(const std::vector<std::vector<Tensor>>& by_slot) {
  std::vector<Tensor> out;
  out.reserve(by_slot.size());
  for (std::size_t s = 0; s < by_slot.size(); ++s) {
    const auto& feats = by_slot[s];
    if (feats.empty()) throw std::invalid_argument(detail::concat("prototypes: slot ", s, " is empty"));
    if (feats.size() == 1) {
      out.push_back(feats[0]);
      continue;
    }
    const std::vector<double> w(feats.size(), 1.0 / static_cast<double>(feats.size()));
    out.push_back(linear_combination(feats, w));
  }
  return out;
}

}  // namespace dmf
