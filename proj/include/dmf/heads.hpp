// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmf/backbone.hpp"
#include "dmf/ops.hpp"
#include "dmf/params.hpp"

namespace dmf {

inline const std::string kGlobalWeight = "head.gc.weight";
inline const std::string kGlobalBias = "head.gc.bias";

/// Per-position similarity of one aligned query against one class.
struct ScoreMap {
  Tensor values;  // [1, 1, h, w]
};

/// The N score maps of one query, plus their spatial means.
struct EpisodeScores {
  std::vector<ScoreMap> maps;

  std::vector<double> logits() const {
    std::vector<double> out;
    out.reserve(maps.size());
    for (const auto& m : maps) {
      double s = 0.0;
      for (double v : m.values.data()) s += v;
      out.push_back(s / static_cast<double>(m.values.numel()));
    }
    return out;
  }
};

/// Parameter-free classifier: the prototype's channel means act as a 1x1
/// convolution filter over the aligned query.
inline ScoreMap meta_classify(const Tensor& prototype, const Tensor& aligned_query) {
  require_rank(prototype, 4, "meta_classify prototype");
  require_same_shape(prototype, aligned_query, "meta_classify");
  if (prototype.dim(0) != 1) {
    detail::shape_fail("meta_classify: expects one sample (dimension 0), got ", prototype.dim(0));
  }
  return {conv2d(aligned_query, global_avg_pool(prototype))};
}

/// Per-position N-way cross-entropy averaged over positions, then queries.
inline Tensor fewshot_loss(std::span<const EpisodeScores> queries, std::span<const index_t> true_class) {
  if (queries.empty()) throw std::invalid_argument("fewshot_loss: no queries");
  if (queries.size() != true_class.size()) {
    throw std::invalid_argument("fewshot_loss: one label per query required");
  }
  std::vector<Tensor> per_query;
  per_query.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& maps = queries[q].maps;
    const auto n = static_cast<index_t>(maps.size());
    if (n < 2) throw std::invalid_argument("fewshot_loss: at least 2 class maps required");
    const index_t label = true_class[q];
    if (label < 0 || label >= n) {
      throw std::out_of_range(detail::concat("fewshot_loss: class ", label, " outside [0, ", n, ")"));
    }
    std::vector<Tensor> parts;
    parts.reserve(maps.size());
    for (const auto& m : maps) parts.push_back(m.values);
    const Tensor stacked = concat_channels(parts);  // [1, N, h, w]
    const index_t positions = stacked.dim(2) * stacked.dim(3);
    const Tensor by_position = transpose(reshape(stacked, Shape{n, positions}));  // [hw, N]
    const std::vector<index_t> labels(static_cast<std::size_t>(positions), label);
    per_query.push_back(nll_loss(log_softmax(by_position), labels));
  }
  const std::vector<double> w(per_query.size(), 1.0 / static_cast<double>(per_query.size()));
  return linear_combination(per_query, w);
}

inline void init_global_head(index_t channels, index_t num_classes, ParamStore& params,
                             std::mt19937_64& rng) {
  if (num_classes < 1) throw std::invalid_argument("global head: needs at least one class");
  params.add(kGlobalWeight, uniform_init(Shape{num_classes, channels}, channels, rng));
  params.add(kGlobalBias, uniform_init(Shape{num_classes}, channels, rng));
}

/// Log-probabilities of the global many-class head: dense(GAP(x)).
inline Tensor global_log_probs(const Tensor& aligned_query, const ParamStore& params) {
  return log_softmax(dense(spatial_mean(aligned_query), params.get(kGlobalWeight), params.get(kGlobalBias)));
}

inline Tensor global_loss(const Tensor& aligned_query, index_t true_global_label, const ParamStore& params) {
  const Tensor logp = global_log_probs(aligned_query, params);
  if (true_global_label < 0 || true_global_label >= logp.dim(1)) {
    throw std::out_of_range(detail::concat("global_loss: label ", true_global_label,
                                           " outside [0, ", logp.dim(1), ")"));
  }
  const std::vector<index_t> labels(static_cast<std::size_t>(logp.dim(0)), true_global_label);
  return nll_loss(logp, labels);
}

inline Tensor total_loss(const Tensor& fewshot, const Tensor& global) {
  return linear_combination({fewshot, global}, {1.0, 0.5});
}

/// Argmax of the pooled logits, ties to the lowest class index.
inline index_t predict(const EpisodeScores& scores) {
  if (scores.maps.empty()) throw std::invalid_argument("predict: no score maps");
  const auto logits = scores.logits();
  index_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<index_t>(i);
  }
  return best;
}

}  // namespace dmf
