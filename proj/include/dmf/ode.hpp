// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmf/meta_filter.hpp"
#include "dmf/ops.hpp"

namespace dmf {

enum class OdeMethod { euler_fixed, dopri5 };

/// frozen: the filter is generated once from the initial query and held
/// fixed. per_eval: it is regenerated from the current state at every
/// right-hand-side evaluation.
enum class FilterRefresh { frozen, per_eval };

struct OdeConfig {
  OdeMethod method = OdeMethod::dopri5;
  index_t depth_T = 1;
  double rtol = 1e-3;
  double atol = 1e-4;
  index_t max_evals = 1000;
  double t_start = 0.0;
  double t_end = 1.0;
  FilterRefresh filter_refresh = FilterRefresh::frozen;

  void validate() const {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw std::invalid_argument("ode: rtol and atol must be > 0");
    if (depth_T < 0) throw std::invalid_argument("ode: depth_T must be >= 0");
    if (!(t_start < t_end)) throw std::invalid_argument("ode: t_span start must precede end");
    if (max_evals < 1) throw std::invalid_argument("ode: max_evals must be >= 1");
  }
};

struct SolveStats {
  index_t accepted_steps = 0;
  index_t rejected_steps = 0;
  index_t function_evals = 0;
  std::vector<double> step_sizes;  // accepted steps, in order
};

class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, SolveStats stats)
      : std::runtime_error(what), stats_(std::move(stats)) {}
  const SolveStats& stats() const { return stats_; }

 private:
  SolveStats stats_;
};

using VectorField = std::function<Tensor(const Tensor&)>;

namespace dopri5_tableau {
// Dormand & Prince (1980) 5(4) pair; row i holds a_{i+1, j}.
inline constexpr std::array<std::array<double, 6>, 6> a{{
    {1.0 / 5, 0, 0, 0, 0, 0},
    {3.0 / 40, 9.0 / 40, 0, 0, 0, 0},
    {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0},
    {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
}};
inline constexpr std::array<double, 7> b5{35.0 / 384, 0, 500.0 / 1113, 125.0 / 192,
                                          -2187.0 / 6784, 11.0 / 84, 0};
inline constexpr std::array<double, 7> b4{5179.0 / 57600, 0, 7571.0 / 16695, 393.0 / 640,
                                          -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};
inline constexpr double kSafety = 0.9;
inline constexpr double kMinFactor = 0.2;
inline constexpr double kMaxFactor = 5.0;
}  // namespace dopri5_tableau

namespace detail {

inline Tensor checked_eval(const VectorField& field, const Tensor& x, SolveStats& stats,
                           index_t max_evals) {
  if (stats.function_evals >= max_evals) {
    throw SolverError(concat("ode: max_evals (", max_evals, ") exceeded"), stats);
  }
  ++stats.function_evals;
  Tensor dx = field(x);
  require_same_shape(x, dx, "ode vector field");
  return dx;
}

}  // namespace detail

/// Integrates dx/dt = field(x) over the configured t_span with the
/// Dormand–Prince 5(4) embedded pair. Every operation of the accepted steps is
/// recorded on the active tape, so gradients flow through the solver; step
/// sizes are plain numbers and carry no gradient.
///
/// With `replay`, the given step sizes are taken verbatim and error control is
/// skipped. Used to differentiate a fixed step sequence.
inline std::pair<Tensor, SolveStats> solve_dopri5(const Tensor& x0, const VectorField& field,
                                                  const OdeConfig& config,
                                                  const std::vector<double>* replay = nullptr) {
  namespace tab = dopri5_tableau;
  config.validate();
  SolveStats stats;
  Tensor x = x0;
  double t = config.t_start;
  const double span = config.t_end - config.t_start;
  double h = 0.1 * span;
  std::size_t replay_at = 0;

  Tensor k1 = detail::checked_eval(field, x, stats, config.max_evals);
  while (true) {
    if (replay) {
      if (replay_at == replay->size()) break;
      h = (*replay)[replay_at];
    } else {
      if (t >= config.t_end - 1e-12 * span) break;
      h = std::min(h, config.t_end - t);
    }

    // b5 coincides with the last row of a, so the 7th stage input is the
    // 5th-order solution and k[6] is the next step's first stage (FSAL).
    std::array<Tensor, 7> k;
    k[0] = k1;
    Tensor x_new;
    for (std::size_t s = 1; s < 7; ++s) {
      std::vector<Tensor> terms{x};
      std::vector<double> coeffs{1.0};
      for (std::size_t j = 0; j < s; ++j) {
        if (tab::a[s - 1][j] == 0.0) continue;
        terms.push_back(k[j]);
        coeffs.push_back(h * tab::a[s - 1][j]);
      }
      const Tensor stage = linear_combination(terms, coeffs);
      if (s == 6) x_new = stage;
      k[s] = detail::checked_eval(field, stage, stats, config.max_evals);
    }
    if (!x_new.all_finite()) throw SolverError("ode: non-finite state", stats);

    double err = 0.0;
    {
      const auto xs = x.data();
      const auto ns = x_new.data();
      for (index_t i = 0; i < x.numel(); ++i) {
        const auto at = static_cast<std::size_t>(i);
        double e = 0.0;
        for (std::size_t j = 0; j < 7; ++j) e += (tab::b5[j] - tab::b4[j]) * k[j][i];
        e *= h;
        const double tol = config.atol + config.rtol * std::max(std::abs(xs[at]), std::abs(ns[at]));
        err = std::max(err, std::abs(e) / tol);
      }
    }

    const bool accept = replay != nullptr || err <= 1.0;
    if (accept) {
      ++stats.accepted_steps;
      stats.step_sizes.push_back(h);
      t += h;
      x = x_new;
      k1 = k[6];
      ++replay_at;
    } else {
      ++stats.rejected_steps;
    }
    if (!replay) {
      const double factor =
          err == 0.0 ? tab::kMaxFactor
                     : std::clamp(tab::kSafety * std::pow(err, -0.2), tab::kMinFactor, tab::kMaxFactor);
      h *= factor;
    }
  }
  return {x, stats};
}

/// Forward Euler with `steps` steps of size `h`: x ← x + h·field(x).
inline std::pair<Tensor, SolveStats> solve_euler(const Tensor& x0, const VectorField& field,
                                                 index_t steps, double h) {
  if (steps < 0) throw std::invalid_argument("euler: negative step count");
  SolveStats stats;
  Tensor x = x0;
  for (index_t s = 0; s < steps; ++s) {
    ++stats.function_evals;
    const Tensor dx = field(x);
    x = h == 1.0 ? add(x, dx) : linear_combination({x, dx}, {1.0, h});
    ++stats.accepted_steps;
    stats.step_sizes.push_back(h);
  }
  return {x, stats};
}

/// Vector field F(X) of the alignment flow for one (support, query) pair.
/// With a frozen filter the filter is built once from the initial query.
inline VectorField alignment_field(const Tensor& support, const Tensor& query, const AlignConfig& align,
                                   FilterRefresh refresh, const ParamStore& params) {
  if (refresh == FilterRefresh::frozen) {
    MetaFilter filter = make_filter(support, query, align, params);
    return [filter](const Tensor& x) { return grouped_dynamic_conv(x, filter); };
  }
  return [support, align, &params](const Tensor& x) {
    return grouped_dynamic_conv(x, make_filter(support, x, align, params));
  };
}

struct AlignResult {
  Tensor aligned;
  SolveStats stats;
};

/// Recursive residual alignment X_{t+1} = X_t + F(X_t), t < T. T = 0 returns
/// the query untouched.
inline AlignResult euler_align(const Tensor& support, const Tensor& query, const AlignConfig& align,
                               index_t depth, const ParamStore& params,
                               FilterRefresh refresh = FilterRefresh::frozen) {
  if (depth < 0) throw std::invalid_argument("euler_align: depth must be >= 0");
  if (depth == 0) return {query, {}};
  auto [x, stats] = solve_euler(query, alignment_field(support, query, align, refresh, params), depth, 1.0);
  return {x, stats};
}

/// Neural-ODE alignment: X̂ = X(t_end) of dX/dt = F(X), X(t_start) = query.
inline AlignResult dopri5_align(const Tensor& support, const Tensor& query, const AlignConfig& align,
                                const OdeConfig& ode, const ParamStore& params,
                                const std::vector<double>* replay = nullptr) {
  auto [x, stats] = solve_dopri5(query, alignment_field(support, query, align, ode.filter_refresh, params),
                                 ode, replay);
  return {x, stats};
}

inline AlignResult align(const Tensor& support, const Tensor& query, const AlignConfig& align_cfg,
                         const OdeConfig& ode, const ParamStore& params) {
  if (ode.method == OdeMethod::euler_fixed) {
    return euler_align(support, query, align_cfg, ode.depth_T, params, ode.filter_refresh);
  }
  return dopri5_align(support, query, align_cfg, ode, params);
}

}  // namespace dmf
