// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dmf/autodiff.hpp"
#include "dmf/check/oracle_suite.hpp"
#include "dmf/finite_diff.hpp"
#include "dmf/model.hpp"

namespace dmf::check {

/// Builds the scalar under test from the (watched) inputs.
using ScalarBuilder = std::function<Tensor(const ParamStore&)>;

struct GradcheckCase {
  std::string name;
  double tolerance = 1e-4;
  /// Fresh inputs and builder for a given seed.
  std::function<std::pair<ParamStore, ScalarBuilder>(std::uint64_t)> make;
};

struct GradcheckResult {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;
  std::string worst;  // input with the largest error
  index_t coordinates = 0;
  bool passed() const { return rel_error <= tolerance; }
};

inline constexpr double kFdStep = 1e-5;

/// Tape gradient vs central differences for every input coordinate.
inline GradcheckResult gradcheck(const std::string& name, const ParamStore& inputs, const ScalarBuilder& f,
                                 double tolerance, double step = kFdStep) {
  DiffRecord record;
  inputs.watch_all(record);
  Tensor y;
  {
    RecordScope scope(record);
    y = f(inputs);
  }
  const GradientMap analytic = backward(y, record, inputs);
  const GradientMap numeric = finite_diff_grad(
      [&](const ParamStore& p) {
        NoRecordScope off;
        return f(p).item();
      },
      inputs, step);
  GradcheckResult r{name, 0.0, tolerance, {}, inputs.total_elements()};
  r.rel_error = max_relative_error(analytic, numeric, &r.worst);
  return r;
}

namespace detail {

// Σ R ⊙ out with a fixed random R, so every output coordinate carries a
// distinct weight.
inline ScalarBuilder projected(std::function<Tensor(const ParamStore&)> op, Shape out_shape, std::mt19937_64& rng) {
  auto r = std::make_shared<Tensor>(random_tensor(out_shape, rng));
  return [op = std::move(op), r](const ParamStore& p) { return sum(mul(op(p), *r)); };
}

// Values bounded away from zero, so ReLU and max-pool have no kink within a
// finite-difference step.
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(shape, std::move(v));
}

// Offsets whose sampling coordinates stay at least 0.2 from integers.
inline Tensor generic_offsets(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  std::uniform_int_distribution<int> whole(-2, 1);
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = whole(rng) + frac(rng);
  return Tensor(shape, std::move(v));
}

/// Tiny end-to-end configuration: 8x8 images, two stages, 4x4 features.
inline ModelConfig toy_model(OdeMethod method, index_t depth, bool dynamic_sampling = true) {
  ModelConfig m;
  m.backbone = BackboneConfig{1, {3, 4}, false, 8};
  m.align = AlignConfig{2, 1, dynamic_sampling};
  m.ode.method = method;
  m.ode.depth_T = depth;
  m.num_global_classes = 4;
  return m;
}

inline EpisodeInput toy_episode(std::mt19937_64& rng, index_t n_way = 3, index_t k_shot = 2, index_t q_per = 1) {
  EpisodeInput in;
  in.n_way = n_way;
  in.k_shot = k_shot;
  in.support = random_tensor(Shape{n_way * k_shot, 1, 8, 8}, rng, 0.0, 1.0);
  in.query = random_tensor(Shape{n_way * q_per, 1, 8, 8}, rng, 0.0, 1.0);
  for (index_t s = 0; s < n_way; ++s) {
    for (index_t q = 0; q < q_per; ++q) {
      in.query_slot.push_back(s);
      in.query_global.push_back(s);
    }
  }
  return in;
}

// Toy parameters with η and ψ given non-trivial random values, so the offsets
// are generic and the filter is far from constant.
inline ParamStore toy_params(const ModelConfig& m, std::mt19937_64& rng) {
  ParamStore p = init_model(m, rng());
  for (const auto& name : p.names()) {
    if (name == kEtaWeight) p.set(name, random_tensor(p.get(name).shape(), rng, -0.15, 0.15));
    if (name == kEtaBias) p.set(name, generic_offsets(p.get(name).shape(), rng));
  }
  return p;
}

}  // namespace detail

/// Named registry of gradient checks: every differentiable op, the pipeline
/// stages, and the full episode loss.
inline std::vector<GradcheckCase> gradcheck_cases() {
  using detail::projected;
  std::vector<GradcheckCase> cases;
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op, bool kinked) {
    cases.push_back({name, 1e-4, [op, kinked](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       ParamStore p;
                       const Shape s{2, 3, 4, 5};
                       p.add("x", kinked ? detail::away_from_zero(s, rng) : random_tensor(s, rng, -2.0, 2.0));
                       const Shape os = op(p.get("x")).shape();
                       return std::pair{p, projected([op](const ParamStore& q) { return op(q.get("x")); }, os, rng)};
                     }});
  };

  cases.push_back({"conv2d", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     p.add("x", random_tensor(Shape{2, 4, 7, 6}, rng));
                     p.add("w", random_tensor(Shape{6, 2, 3, 3}, rng));
                     p.add("b", random_tensor(Shape{6}, rng));
                     auto op = [](const ParamStore& q) {
                       return conv2d(q.get("x"), q.get("w"), q.get("b"), ConvParams{2, 1, 2});
                     };
                     return std::pair{p, projected(op, op(p).shape(), rng)};
                   }});
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, false);
  unary("relu", [](const Tensor& x) { return relu(x); }, true);
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); }, false);
  unary("max_pool2", [](const Tensor& x) { return max_pool2(x); }, true);
  unary("global_avg_pool", [](const Tensor& x) { return global_avg_pool(x); }, false);
  unary("spatial_mean", [](const Tensor& x) { return spatial_mean(x); }, false);
  unary("unfold", [](const Tensor& x) { return unfold(x, 3, 1); }, false);
  unary("sum", [](const Tensor& x) { return sum(x); }, false);
  unary("mean", [](const Tensor& x) { return mean(x); }, false);
  unary("reshape", [](const Tensor& x) { return reshape(x, Shape{6, 20}); }, false);
  unary("transpose", [](const Tensor& x) { return transpose(reshape(x, Shape{6, 20})); }, false);
  unary("select", [](const Tensor& x) { return select(x, 1); }, false);
  unary("slice_channels", [](const Tensor& x) { return slice_channels(x, 1, 3); }, false);
  unary("log_softmax", [](const Tensor& x) { return log_softmax(reshape(x, Shape{6, 20})); }, false);

  cases.push_back({"add_mul_linear_combination", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     const Shape s{2, 3, 3, 2};
                     p.add("a", random_tensor(s, rng));
                     p.add("b", random_tensor(s, rng));
                     p.add("c", random_tensor(s, rng));
                     auto op = [](const ParamStore& q) {
                       const Tensor& a = q.get("a");
                       const Tensor& b = q.get("b");
                       return linear_combination({add(a, b), mul(a, q.get("c")), b}, {0.3, -1.2, 2.0});
                     };
                     return std::pair{p, projected(op, s, rng)};
                   }});
  cases.push_back({"concat", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     p.add("a", random_tensor(Shape{2, 3, 3, 2}, rng));
                     p.add("b", random_tensor(Shape{2, 1, 3, 2}, rng));
                     auto op = [](const ParamStore& q) {
                       const Tensor c = concat_channels({q.get("a"), q.get("b")});
                       return concat_batch(c, c);
                     };
                     return std::pair{p, projected(op, op(p).shape(), rng)};
                   }});
  cases.push_back({"dense_nll", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     p.add("x", random_tensor(Shape{4, 5}, rng));
                     p.add("w", random_tensor(Shape{3, 5}, rng));
                     p.add("b", random_tensor(Shape{3}, rng));
                     return std::pair{p, ScalarBuilder([](const ParamStore& q) {
                                        const std::vector<index_t> labels{0, 2, 1, 2};
                                        return nll_loss(log_softmax(dense(q.get("x"), q.get("w"), q.get("b"))), labels);
                                      })};
                   }});
  cases.push_back({"bilinear_gather", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     p.add("f", random_tensor(Shape{2, 3, 4, 5}, rng));
                     p.add("off", detail::generic_offsets(Shape{2, kOffsetChannels, 4, 5}, rng));
                     auto op = [](const ParamStore& q) {
                       return bilinear_gather(q.get("f"), OffsetField{q.get("off")}).patches;
                     };
                     return std::pair{p, projected(op, op(p).shape(), rng)};
                   }});
  cases.push_back({"generate_filter", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     p.add("patches", random_tensor(Shape{1, 4 * kSamplePoints, 3, 3}, rng));
                     p.add(kPsiWeight, random_tensor(Shape{2 * 9, 4, 3, 3}, rng, -0.5, 0.5));
                     p.add(kPsiBias, random_tensor(Shape{2 * 9}, rng));
                     auto op = [](const ParamStore& q) {
                       return generate_filter(Neighborhood{q.get("patches")}, 2, 3, q).weights;
                     };
                     return std::pair{p, projected(op, op(p).shape(), rng)};
                   }});
  for (index_t k : {1, 3}) {
    cases.push_back({"grouped_dynamic_conv_k" + std::to_string(k), 1e-4, [k](std::uint64_t seed) {
                       std::mt19937_64 rng(seed);
                       ParamStore p;
                       p.add("q", random_tensor(Shape{2, 6, 4, 5}, rng));
                       p.add("f", random_tensor(Shape{2, 3 * k * k, 4, 5}, rng, 0.0, 1.0));
                       auto op = [k](const ParamStore& q) {
                         return grouped_dynamic_conv(q.get("q"), MetaFilter{q.get("f"), 3, k});
                       };
                       return std::pair{p, projected(op, Shape{2, 6, 4, 5}, rng)};
                     }});
  }
  cases.push_back({"meta_classify_fewshot_loss", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     const Shape s{1, 4, 3, 3};
                     for (int n = 0; n < 3; ++n) p.add("proto" + std::to_string(n), random_tensor(s, rng));
                     for (int q = 0; q < 2; ++q) p.add("query" + std::to_string(q), random_tensor(s, rng));
                     return std::pair{p, ScalarBuilder([](const ParamStore& ps) {
                                        std::vector<EpisodeScores> scores(2);
                                        for (int q = 0; q < 2; ++q) {
                                          for (int n = 0; n < 3; ++n) {
                                            scores[static_cast<std::size_t>(q)].maps.push_back(meta_classify(
                                                ps.get("proto" + std::to_string(n)), ps.get("query" + std::to_string(q))));
                                          }
                                        }
                                        const std::vector<index_t> labels{2, 0};
                                        return fewshot_loss(scores, labels);
                                      })};
                   }});
  cases.push_back({"global_loss", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     p.add("x", random_tensor(Shape{1, 4, 3, 3}, rng));
                     init_global_head(4, 5, p, rng);
                     return std::pair{p, ScalarBuilder([](const ParamStore& q) { return global_loss(q.get("x"), 3, q); })};
                   }});
  cases.push_back({"embed", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const BackboneConfig bc{1, {3, 4}, false, 8};
                     ParamStore p;
                     init_backbone(bc, p, rng);
                     p.add("images", random_tensor(Shape{2, 1, 8, 8}, rng, 0.0, 1.0));
                     auto op = [bc](const ParamStore& q) { return embed(q.get("images"), bc, q); };
                     return std::pair{p, projected(op, op(p).shape(), rng)};
                   }});
  cases.push_back({"offset_terms", 1e-4, [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ParamStore p;
                     p.add("s", random_tensor(Shape{1, 3, 5, 5}, rng));
                     p.add("q", random_tensor(Shape{1, 3, 5, 5}, rng));
                     p.add(kEtaWeight, random_tensor(Shape{kOffsetChannels, 6, 5, 5}, rng));
                     p.add(kEtaBias, random_tensor(Shape{kOffsetChannels}, rng));
                     auto op = [](const ParamStore& q) {
                       return add(offset_support_term(q.get("s"), q), offset_query_term(q.get("q"), q));
                     };
                     return std::pair{p, projected(op, op(p).shape(), rng)};
                   }});

  // Alignment stages on a fixed feature pair; parameters ψ and η plus both
  // feature maps are checked.
  auto align_case = [](OdeConfig ode, std::uint64_t seed, bool replay) {
    std::mt19937_64 rng(seed);
    ParamStore p;
    const index_t c = 4;
    p.add("support", random_tensor(Shape{1, c, 4, 4}, rng));
    p.add("query", random_tensor(Shape{1, c, 4, 4}, rng));
    init_meta_filter(c, AlignConfig{2, 3, true}, p, rng);
    p.add(kEtaWeight, random_tensor(Shape{kOffsetChannels, 2 * c, 5, 5}, rng, -0.1, 0.1));
    p.add(kEtaBias, detail::generic_offsets(Shape{kOffsetChannels}, rng));
    const AlignConfig ac{2, 3, true};
    std::shared_ptr<std::vector<double>> steps;
    if (replay) {
      NoRecordScope off;
      steps = std::make_shared<std::vector<double>>(
          dopri5_align(p.get("support"), p.get("query"), ac, ode, p).stats.step_sizes);
    }
    auto op = [ode, ac, steps](const ParamStore& q) {
      return align(q.get("support"), q.get("query"), ac, ode, q).aligned;
    };
    auto op_replay = [ode, ac, steps](const ParamStore& q) {
      return dopri5_align(q.get("support"), q.get("query"), ac, ode, q, steps.get()).aligned;
    };
    std::function<Tensor(const ParamStore&)> f = replay ? std::function<Tensor(const ParamStore&)>(op_replay)
                                                        : std::function<Tensor(const ParamStore&)>(op);
    return std::pair{p, projected(f, Shape{1, c, 4, 4}, rng)};
  };
  cases.push_back({"euler_align_T3", 1e-4, [align_case](std::uint64_t seed) {
                     OdeConfig ode;
                     ode.method = OdeMethod::euler_fixed;
                     ode.depth_T = 3;
                     return align_case(ode, seed, false);
                   }});
  cases.push_back({"euler_align_per_eval", 1e-4, [align_case](std::uint64_t seed) {
                     OdeConfig ode;
                     ode.method = OdeMethod::euler_fixed;
                     ode.depth_T = 2;
                     ode.filter_refresh = FilterRefresh::per_eval;
                     return align_case(ode, seed, false);
                   }});
  cases.push_back({"dopri5_align", 1e-3, [align_case](std::uint64_t seed) {
                     OdeConfig ode;
                     ode.rtol = 1e-5;
                     ode.atol = 1e-6;
                     return align_case(ode, seed, true);
                   }});

  // Full episode loss (ℓ_f + ½ℓ_g) w.r.t. every model parameter.
  auto episode_case = [](ModelConfig m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamStore p = detail::toy_params(m, rng);
    const auto in = std::make_shared<EpisodeInput>(detail::toy_episode(rng));
    std::shared_ptr<std::vector<std::vector<double>>> steps;
    if (m.ode.method == OdeMethod::dopri5) {
      NoRecordScope off;
      steps = std::make_shared<std::vector<std::vector<double>>>(run_episode(m, p, *in).step_sizes);
    }
    return std::pair{p, ScalarBuilder([m, in, steps](const ParamStore& q) {
                       EpisodeOptions opt;
                       opt.replay = steps.get();
                       return run_episode(m, q, *in, opt).loss;
                     })};
  };
  cases.push_back({"episode_loss_euler", 1e-4, [episode_case](std::uint64_t seed) {
                     return episode_case(detail::toy_model(OdeMethod::euler_fixed, 2), seed);
                   }});
  cases.push_back({"episode_loss_zero_offsets", 1e-4, [episode_case](std::uint64_t seed) {
                     return episode_case(detail::toy_model(OdeMethod::euler_fixed, 1, false), seed);
                   }});
  cases.push_back({"episode_loss_dopri5", 1e-3, [episode_case](std::uint64_t seed) {
                     return episode_case(detail::toy_model(OdeMethod::dopri5, 1), seed);
                   }});
  return cases;
}

inline std::vector<GradcheckResult> run_gradcheck_suite(const std::string& only = "", std::uint64_t seed = 11) {
  std::vector<GradcheckResult> out;
  for (const auto& c : gradcheck_cases()) {
    if (!only.empty() && c.name != only) continue;
    auto [inputs, f] = c.make(seed);
    out.push_back(gradcheck(c.name, inputs, f, c.tolerance));
  }
  return out;
}

}  // namespace dmf::check
