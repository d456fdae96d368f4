// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "dmf/backbone.hpp"
#include "dmf/data.hpp"
#include "dmf/heads.hpp"
#include "dmf/meta_filter.hpp"
#include "dmf/ode.hpp"
#include "dmf/sampler.hpp"

namespace dmf {

struct ModelConfig {
  BackboneConfig backbone;
  AlignConfig align;
  OdeConfig ode;
  index_t num_global_classes = 8;

  /// Euler with T = 0 is the unaligned baseline; it carries no ψ / η.
  bool aligns() const { return !(ode.method == OdeMethod::euler_fixed && ode.depth_T == 0); }

  void validate() const {
    backbone.validate();
    ode.validate();
    if (aligns()) align.validate(backbone.feature_channels());
    if (num_global_classes < 1) throw std::invalid_argument("model: num_global_classes must be >= 1");
  }
};

/// Initialisation order is fixed (backbone, global head, then alignment
/// parameters) so that configurations differing only in alignment share
/// identical backbone and head weights for the same seed.
inline ParamStore init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamStore params;
  init_backbone(config.backbone, params, rng);
  const index_t c = config.backbone.feature_channels();
  init_global_head(c, config.num_global_classes, params, rng);
  if (config.aligns()) {
    init_meta_filter(c, config.align, params, rng);
    if (config.align.dynamic_sampling) init_sampler(c, params);
  }
  return params;
}

/// Images of one episode, slot-major, plus query labels.
struct EpisodeInput {
  index_t n_way = 0, k_shot = 0;
  Tensor support;                    // [N*K, ch, s, s]
  Tensor query;                      // [N*Q, ch, s, s]
  std::vector<index_t> query_slot;   // per query, true slot
  std::vector<index_t> query_global; // per query, meta-train label or -1
};

using ImageTransform = std::function<void(std::span<double> image, index_t channels, index_t size)>;

inline Tensor stack_images(const Dataset& ds, const std::vector<EpisodeItem>& items,
                           const ImageTransform& transform = nullptr) {
  const index_t s = ds.image_size, ch = ds.channels, per = ch * s * s;
  std::vector<double> v(static_cast<std::size_t>(per) * items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& images = ds.classes.at(static_cast<std::size_t>(items[i].class_id)).images;
    const auto src = images.data().subspan(static_cast<std::size_t>(items[i].sample * per),
                                           static_cast<std::size_t>(per));
    std::span<double> dst(v.data() + i * static_cast<std::size_t>(per), static_cast<std::size_t>(per));
    std::copy(src.begin(), src.end(), dst.begin());
    if (transform) transform(dst, ch, s);
  }
  return Tensor(Shape{static_cast<index_t>(items.size()), ch, s, s}, std::move(v));
}

inline EpisodeInput episode_input(const Dataset& ds, const Episode& ep, const ImageTransform& transform = nullptr) {
  EpisodeInput in;
  in.n_way = ep.n_way;
  in.k_shot = ep.k_shot;
  in.support = stack_images(ds, ep.support, transform);
  in.query = stack_images(ds, ep.query, transform);
  for (const auto& q : ep.query) {
    in.query_slot.push_back(q.slot);
    in.query_global.push_back(q.global_label);
  }
  return in;
}

struct EpisodeOutput {
  Tensor fewshot;  // ℓ_f
  Tensor global;   // ℓ_g, undefined when no query carries a global label
  Tensor loss;     // ℓ_f + ½ℓ_g
  std::vector<EpisodeScores> scores;
  std::vector<index_t> predictions;
  double accuracy = 0.0;
  SolveStats solver;                             // summed over all pairs
  std::vector<std::vector<double>> step_sizes;   // per (query, slot) pair, q*N + n
};

struct EpisodeOptions {
  bool global_loss = true;
  /// Per-pair step sequences for the adaptive solver (q*N + n); error
  /// control is skipped and the given steps are taken verbatim.
  const std::vector<std::vector<double>>* replay = nullptr;
};

namespace detail {

inline void accumulate(SolveStats& total, const SolveStats& s) {
  total.accepted_steps += s.accepted_steps;
  total.rejected_steps += s.rejected_steps;
  total.function_evals += s.function_evals;
}

}  // namespace detail

/// Full forward pass of one episode: shared embedding, class prototypes, one
/// alignment per (class, query) pair, meta-classifier maps, losses and
/// predictions. Recorded on the active tape if any.
inline EpisodeOutput run_episode(const ModelConfig& config, const ParamStore& params, const EpisodeInput& in,
                                 const EpisodeOptions& options = {}) {
  const index_t N = in.n_way, K = in.k_shot;
  const index_t nq = in.query.dim(0);
  if (N < 2) throw std::invalid_argument("run_episode: N must be >= 2");
  if (in.support.dim(0) != N * K) {
    throw std::invalid_argument(detail::concat("run_episode: ", in.support.dim(0), " support images for N*K = ", N * K));
  }
  if (static_cast<index_t>(in.query_slot.size()) != nq) {
    throw std::invalid_argument("run_episode: one slot label per query required");
  }

  const Tensor feats = embed(concat_batch(in.support, in.query), config.backbone, params);

  std::vector<std::vector<Tensor>> by_slot(static_cast<std::size_t>(N));
  for (index_t i = 0; i < N * K; ++i) by_slot[static_cast<std::size_t>(i / K)].push_back(select(feats, i));
  const std::vector<Tensor> protos = prototypes(by_slot);
  std::vector<Tensor> queries;
  for (index_t q = 0; q < nq; ++q) queries.push_back(select(feats, N * K + q));

  const bool aligns = config.aligns();
  const AlignConfig& ac = config.align;
  const OdeConfig& ode = config.ode;
  const bool fast_offsets = aligns && ac.dynamic_sampling && ode.filter_refresh == FilterRefresh::frozen;
  const bool fixed_filter = aligns && !ac.dynamic_sampling && ode.filter_refresh == FilterRefresh::frozen;

  // Precomputed pieces that depend on one side of the pair only.
  std::vector<Tensor> support_terms, query_terms;
  std::vector<MetaFilter> class_filters;
  if (fast_offsets) {
    for (const auto& p : protos) support_terms.push_back(offset_support_term(p, params));
    for (const auto& x : queries) query_terms.push_back(offset_query_term(x, params));
  }
  if (fixed_filter) {
    // Zero offsets: the filter depends on the prototype alone.
    for (const auto& p : protos) class_filters.push_back(make_filter(p, p, ac, params));
  }

  EpisodeOutput out;
  out.scores.resize(static_cast<std::size_t>(nq));
  std::vector<Tensor> global_terms;
  for (index_t q = 0; q < nq; ++q) {
    auto& sc = out.scores[static_cast<std::size_t>(q)];
    for (index_t n = 0; n < N; ++n) {
      const auto pair = static_cast<std::size_t>(q * N + n);
      const Tensor& proto = protos[static_cast<std::size_t>(n)];
      const Tensor& xq = queries[static_cast<std::size_t>(q)];
      Tensor aligned = xq;
      if (aligns) {
        VectorField field;
        if (fast_offsets || fixed_filter) {
          MetaFilter filter;
          if (fast_offsets) {
            const OffsetField off{add(support_terms[static_cast<std::size_t>(n)], query_terms[static_cast<std::size_t>(q)])};
            filter = generate_filter(bilinear_gather(proto, off), ac.groups, ac.kernel, params);
          } else {
            filter = class_filters[static_cast<std::size_t>(n)];
          }
          field = [filter](const Tensor& x) { return grouped_dynamic_conv(x, filter); };
        } else {
          field = alignment_field(proto, xq, ac, ode.filter_refresh, params);
        }
        SolveStats stats;
        if (ode.method == OdeMethod::euler_fixed) {
          std::tie(aligned, stats) = solve_euler(xq, field, ode.depth_T, 1.0);
        } else {
          const std::vector<double>* replay = options.replay ? &options.replay->at(pair) : nullptr;
          std::tie(aligned, stats) = solve_dopri5(xq, field, ode, replay);
        }
        detail::accumulate(out.solver, stats);
        out.step_sizes.push_back(std::move(stats.step_sizes));
      } else {
        out.step_sizes.emplace_back();
      }
      sc.maps.push_back(meta_classify(proto, aligned));
      const index_t label = in.query_global.empty() ? -1 : in.query_global[static_cast<std::size_t>(q)];
      if (options.global_loss && n == in.query_slot[static_cast<std::size_t>(q)] && label >= 0) {
        global_terms.push_back(global_loss(aligned, label, params));
      }
    }
  }

  out.fewshot = fewshot_loss(out.scores, in.query_slot);
  if (!global_terms.empty()) {
    const std::vector<double> w(global_terms.size(), 1.0 / static_cast<double>(global_terms.size()));
    out.global = linear_combination(global_terms, w);
    out.loss = total_loss(out.fewshot, out.global);
  } else {
    out.loss = out.fewshot;
  }
  index_t correct = 0;
  for (index_t q = 0; q < nq; ++q) {
    const index_t p = predict(out.scores[static_cast<std::size_t>(q)]);
    out.predictions.push_back(p);
    if (p == in.query_slot[static_cast<std::size_t>(q)]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(nq);
  return out;
}

/// Offset field predicted for prototype `slot` against query `query_index`.
inline OffsetField episode_offsets(const ModelConfig& config, const ParamStore& params, const EpisodeInput& in,
                                   index_t slot, index_t query_index) {
  if (!config.aligns() || !config.align.dynamic_sampling) {
    throw std::invalid_argument("episode_offsets: model has no offset predictor");
  }
  const index_t N = in.n_way, K = in.k_shot;
  const Tensor feats = embed(concat_batch(in.support, in.query), config.backbone, params);
  std::vector<std::vector<Tensor>> by_slot(static_cast<std::size_t>(N));
  for (index_t i = 0; i < N * K; ++i) by_slot[static_cast<std::size_t>(i / K)].push_back(select(feats, i));
  const auto protos = prototypes(by_slot);
  return predict_offsets(protos.at(static_cast<std::size_t>(slot)), select(feats, N * K + query_index), params);
}

}  // namespace dmf
