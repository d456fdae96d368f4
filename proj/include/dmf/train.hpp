// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmf/model.hpp"
#include "dmf/serialize.hpp"

namespace dmf {

enum class Augment { none, flip_crop };

struct TrainConfig {
  double lr0 = 0.05;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  index_t epochs = 30;
  index_t episodes_per_epoch = 100;
  index_t N = 5, K = 1, Q = 6;
  index_t g = 8, k = 1;
  bool dynamic_sampling = true;
  OdeConfig ode;
  BackboneConfig backbone;
  std::uint64_t seed = 0;
  Augment augment = Augment::none;

  void validate() const {
    if (!(lr0 >= 0.0)) throw std::invalid_argument("train: lr0 must be >= 0");
    if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train: momentum must be in [0, 1)");
    if (epochs < 0 || episodes_per_epoch < 1) throw std::invalid_argument("train: bad epoch counts");
    if (N < 2) throw std::invalid_argument("train: N must be >= 2");
    if (K < 1 || Q < 1) throw std::invalid_argument("train: K and Q must be >= 1");
    ode.validate();
    backbone.validate();
  }

  ModelConfig model(index_t num_global_classes) const {
    ModelConfig m;
    m.backbone = backbone;
    m.align = AlignConfig{g, k, dynamic_sampling};
    m.ode = ode;
    m.num_global_classes = num_global_classes;
    return m;
  }
};

/// lr0 · ½(1 + cos(π t / total)).
inline double cosine_lr(double lr0, index_t t, index_t total) {
  if (total <= 0) return lr0;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

/// SGD with heavy-ball momentum and decoupled weight decay:
///   v ← μ v + ∇,  θ ← θ − lr (v + λ θ).
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParamStore& params, const GradientMap& grads, double lr) {
    for (const auto& [name, value] : params) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const auto g = it->second.data();
      const auto x = value.data();
      auto& v = velocity_[name];
      if (v.empty()) v.assign(g.size(), 0.0);
      std::vector<double> next(x.begin(), x.end());
      for (std::size_t i = 0; i < next.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        next[i] -= lr * (v[i] + weight_decay_ * x[i]);
      }
      params.set(name, Tensor(value.shape(), std::move(next)));
    }
  }

 private:
  double momentum_, weight_decay_;
  std::map<std::string, std::vector<double>> velocity_;
};

/// Horizontal flip with probability ½, then a random crop from the image
/// zero-padded by 2 pixels on every side.
inline ImageTransform flip_crop(std::mt19937_64& rng) {
  return [&rng](std::span<double> img, index_t channels, index_t size) {
    constexpr index_t pad = 2;
    std::uniform_int_distribution<index_t> shift(0, 2 * pad);
    std::bernoulli_distribution flip(0.5);
    const bool f = flip(rng);
    const index_t oy = shift(rng) - pad, ox = shift(rng) - pad;
    std::vector<double> src(img.begin(), img.end());
    for (index_t c = 0; c < channels; ++c) {
      const double* sp = src.data() + c * size * size;
      double* dp = img.data() + c * size * size;
      for (index_t y = 0; y < size; ++y) {
        for (index_t x = 0; x < size; ++x) {
          const index_t sy = y + oy;
          index_t sx = x + ox;
          if (f) sx = size - 1 - sx;
          dp[y * size + x] = (sy >= 0 && sy < size && sx >= 0 && sx < size) ? sp[sy * size + sx] : 0.0;
        }
      }
    }
  };
}

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::uint64_t episode_seed)
      : std::runtime_error(what), episode_seed_(episode_seed) {}
  std::uint64_t episode_seed() const { return episode_seed_; }

 private:
  std::uint64_t episode_seed_;
};

struct EpochMetrics {
  index_t epoch = 0;
  double loss = 0.0;
  double acc = 0.0;
  double lr = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"loss", m.loss}, {"acc", m.acc}, {"lr", m.lr}};
}

struct TrainResult {
  ModelConfig model;
  ParamStore params;
  std::vector<EpochMetrics> epochs;
};

/// Seed of training episode `t`, reported on divergence so the episode can be
/// replayed.
inline std::uint64_t train_episode_seed(std::uint64_t seed, index_t t) {
  return derive_seed(seed, static_cast<std::uint64_t>(t));
}

/// Episodic meta-training on the meta-train split. One SGD step per episode.
/// `on_epoch` receives each epoch's metrics as soon as it completes.
inline TrainResult train(const TrainConfig& config, const Dataset& ds,
                         const std::function<void(const EpochMetrics&)>& on_epoch = nullptr) {
  config.validate();
  if (ds.image_size != config.backbone.image_size || ds.channels != config.backbone.in_channels) {
    throw std::invalid_argument("train: dataset image geometry does not match backbone config");
  }
  TrainResult result;
  result.model = config.model(static_cast<index_t>(ds.meta_train.size()));
  result.params = init_model(result.model, config.seed);
  Sgd opt(config.momentum, config.weight_decay);
  const index_t total = config.epochs * config.episodes_per_epoch;
  index_t t = 0;
  for (index_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0, acc_sum = 0.0, lr_sum = 0.0;
    for (index_t e = 0; e < config.episodes_per_epoch; ++e, ++t) {
      const std::uint64_t eseed = train_episode_seed(config.seed, t);
      std::mt19937_64 rng(eseed);
      const Episode ep = sample_episode(ds, Split::meta_train, config.N, config.K, config.Q, rng);
      const EpisodeInput in =
          episode_input(ds, ep, config.augment == Augment::flip_crop ? flip_crop(rng) : ImageTransform{});

      DiffRecord record;
      result.params.watch_all(record);
      EpisodeOutput out;
      {
        RecordScope scope(record);
        out = run_episode(result.model, result.params, in);
      }
      const double loss = out.loss.item();
      if (!std::isfinite(loss)) {
        throw DivergenceError(detail::concat("train: non-finite loss at episode ", t, " (episode seed ", eseed, ")"),
                              eseed);
      }
      const GradientMap grads = backward(out.loss, record, result.params);
      const double lr = cosine_lr(config.lr0, t, total);
      opt.step(result.params, grads, lr);
      loss_sum += loss;
      acc_sum += out.accuracy;
      lr_sum += lr;
    }
    const auto n = static_cast<double>(config.episodes_per_epoch);
    EpochMetrics m{epoch, loss_sum / n, acc_sum / n, lr_sum / n};
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct AccuracySummary {
  double mean = 0.0;
  double ci95 = 0.0;
  index_t episodes = 0;
};

/// Mean and 1.96 · sample-std / √n.
inline AccuracySummary summarize_accuracies(std::span<const double> acc) {
  if (acc.empty()) throw std::invalid_argument("summarize_accuracies: no episodes");
  const auto n = static_cast<double>(acc.size());
  double mean = 0.0;
  for (double a : acc) mean += a;
  mean /= n;
  double ss = 0.0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  const double sd = acc.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return {mean, 1.96 * sd / std::sqrt(n), static_cast<index_t>(acc.size())};
}

inline nlohmann::json to_json(const AccuracySummary& s) {
  return {{"mean_acc", s.mean}, {"ci95", s.ci95}, {"episodes", s.episodes}};
}

struct EvalConfig {
  index_t episodes = 500;
  index_t N = 5, K = 1, Q = 6;
  std::uint64_t seed = 0;
  Split split = Split::meta_test;
  unsigned threads = 1;
};

inline std::uint64_t eval_episode_seed(std::uint64_t seed, index_t i) {
  return derive_seed(seed ^ 0x5eedf00dull, static_cast<std::uint64_t>(i));
}

/// Per-episode accuracies; episode i uses its own RNG derived from
/// (seed, i), so the result does not depend on the thread count.
inline std::vector<double> episode_accuracies(const ModelConfig& model, const ParamStore& params,
                                              const Dataset& ds, const EvalConfig& ec) {
  if (ec.episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  std::vector<double> acc(static_cast<std::size_t>(ec.episodes), 0.0);
  // Sampling errors surface before any worker starts.
  {
    std::mt19937_64 rng(eval_episode_seed(ec.seed, 0));
    (void)sample_episode(ds, ec.split, ec.N, ec.K, ec.Q, rng);
  }
  std::atomic<index_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    NoRecordScope no_record;
    while (true) {
      const index_t i = next.fetch_add(1);
      if (i >= ec.episodes) return;
      try {
        std::mt19937_64 rng(eval_episode_seed(ec.seed, i));
        const Episode ep = sample_episode(ds, ec.split, ec.N, ec.K, ec.Q, rng);
        EpisodeOptions opt;
        opt.global_loss = false;
        acc[static_cast<std::size_t>(i)] = run_episode(model, params, episode_input(ds, ep), opt).accuracy;
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = ec.episodes;
      }
    }
  };
  const unsigned threads = std::max(1u, ec.threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return acc;
}

inline AccuracySummary evaluate(const ModelConfig& model, const ParamStore& params, const Dataset& ds,
                                const EvalConfig& ec) {
  const auto acc = episode_accuracies(model, params, ds, ec);
  return summarize_accuracies(acc);
}

}  // namespace dmf
