// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace dmf;
using dmf::testing::random_tensor;

namespace {

// dX/dt = w ⊙ X with w broadcast over each group's channels.
struct DiagonalProblem {
  Tensor x0;
  MetaFilter filter;

  VectorField field() const {
    return [f = filter](const Tensor& x) { return grouped_dynamic_conv(x, f); };
  }

  double weight(index_t ch, index_t i, index_t j) const {
    const index_t per = x0.dim(1) / filter.groups;
    return filter.weights.at(0, ch / per, i, j);
  }

  // max_e |got - closed| / |closed| where closed = x0 · growth(w).
  template <class G>
  double error(const Tensor& got, G growth) const {
    double worst = 0.0;
    for (index_t ch = 0; ch < x0.dim(1); ++ch)
      for (index_t i = 0; i < x0.dim(2); ++i)
        for (index_t j = 0; j < x0.dim(3); ++j) {
          const double want = x0.at(0, ch, i, j) * growth(weight(ch, i, j));
          worst = std::max(worst, std::abs(got.at(0, ch, i, j) - want) / std::abs(want));
        }
    return worst;
  }
};

DiagonalProblem diagonal(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return {random_tensor(Shape{1, 4, 3, 3}, rng, 0.5, 1.5) , {random_tensor(Shape{1, 2, 3, 3}, rng, lo, hi), 2, 1}};
}

OdeConfig dopri(double rtol, double atol = 1e-4) {
  OdeConfig c;
  c.rtol = rtol;
  c.atol = atol;
  return c;
}

ParamStore align_params(std::mt19937_64& rng, index_t c, index_t g, bool live) {
  ParamStore p;
  init_meta_filter(c, AlignConfig{g, 1, live}, p, rng);
  init_sampler(c, p);
  if (live) p.set(kEtaWeight, random_tensor(p.get(kEtaWeight).shape(), rng, -0.1, 0.1));
  return p;
}

double exp_growth(double w) { return std::exp(w); }

}  // namespace

TEST(Dopri5, DiagonalFieldMatchesExponential) {
  std::mt19937_64 rng(1);
  for (double rtol : {1e-3, 1e-5}) {
    const auto prob = diagonal(rng);
    const auto [x1, stats] = solve_dopri5(prob.x0, prob.field(), dopri(rtol));
    EXPECT_LE(prob.error(x1, exp_growth), 10.0 * rtol) << "rtol " << rtol;
    EXPECT_GE(stats.function_evals, stats.accepted_steps);
    EXPECT_EQ(static_cast<index_t>(stats.step_sizes.size()), stats.accepted_steps);
  }
}

TEST(Dopri5, ScalarDecay) {
  const VectorField decay = [](const Tensor& x) { return scale(x, -1.0); };
  const auto [x1, stats] = solve_dopri5(Tensor::scalar(1.0), decay, dopri(1e-3));
  EXPECT_NEAR(x1.item(), std::exp(-1.0), 10.0 * 1e-3 * std::exp(-1.0));
  EXPECT_NEAR(x1.item(), 0.367879, 4e-3);
  double t = 0.0;
  for (double h : stats.step_sizes) t += h;
  EXPECT_NEAR(t, 1.0, 1e-12);
}

// h0 = 0.1 and the x5 growth cap put a floor of 3 steps under any smooth
// problem, so loose tolerances tie; the count never drops as rtol tightens and
// the end points differ.
TEST(Dopri5, TighterToleranceTakesMoreSteps) {
  const VectorField decay = [](const Tensor& x) { return scale(x, -1.0); };
  std::vector<index_t> steps;
  for (double rtol : {1e-2, 1e-3, 1e-4, 1e-5, 1e-6}) {
    const auto [x1, stats] = solve_dopri5(Tensor::scalar(1.0), decay, dopri(rtol, 1e-12));
    EXPECT_NEAR(x1.item(), std::exp(-1.0), 10.0 * rtol);
    if (!steps.empty()) {
      EXPECT_GE(stats.accepted_steps, steps.back()) << "rtol " << rtol;
    }
    steps.push_back(stats.accepted_steps);
  }
  EXPECT_GT(steps.back(), steps.front());
}

TEST(Dopri5, StationaryFieldKeepsState) {
  std::mt19937_64 rng(2);
  const Tensor x0 = random_tensor(Shape{1, 2, 3, 3}, rng);
  const VectorField zero = [](const Tensor& x) { return Tensor::zeros(x.shape()); };
  const auto [x1, stats] = solve_dopri5(x0, zero, OdeConfig{});
  EXPECT_EQ(x1.values(), x0.values());
  EXPECT_EQ(stats.rejected_steps, 0);
  // Zero error estimate grows the step by the maximum factor until t_end.
  EXPECT_EQ(stats.step_sizes, (std::vector<double>{0.1, 0.5, 1.0 - 0.1 - 0.5}));
}

TEST(Dopri5, StepCountDependsOnData) {
  std::mt19937_64 rng(3);
  const auto weak = diagonal(rng, 0.0, 0.02);
  const auto strong = diagonal(rng, 0.97, 1.0);
  const auto a = solve_dopri5(weak.x0, weak.field(), dopri(1e-5, 1e-8)).second;
  const auto b = solve_dopri5(strong.x0, strong.field(), dopri(1e-5, 1e-8)).second;
  EXPECT_NE(a.accepted_steps, b.accepted_steps);
  EXPECT_LT(a.accepted_steps, b.accepted_steps);
}

TEST(Dopri5, MaxEvalsAbortsWithStats) {
  const VectorField decay = [](const Tensor& x) { return scale(x, -1.0); };
  OdeConfig c = dopri(1e-8, 1e-12);
  c.max_evals = 20;
  try {
    solve_dopri5(Tensor::scalar(1.0), decay, c);
    FAIL() << "expected SolverError";
  } catch (const SolverError& e) {
    EXPECT_EQ(e.stats().function_evals, 20);
    EXPECT_GE(e.stats().accepted_steps, 0);
  }
}

TEST(Dopri5, NonFiniteStateAborts) {
  const VectorField blowup = [](const Tensor& x) {
    return Tensor::full(x.shape(), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(solve_dopri5(Tensor::scalar(1.0), blowup, OdeConfig{}), SolverError);
}

TEST(Dopri5, ReplayReproducesAdaptiveSolve) {
  std::mt19937_64 rng(4);
  const auto prob = diagonal(rng);
  const auto [x1, stats] = solve_dopri5(prob.x0, prob.field(), dopri(1e-4));
  const auto [x2, replayed] = solve_dopri5(prob.x0, prob.field(), dopri(1e-4), &stats.step_sizes);
  EXPECT_EQ(x1.values(), x2.values());
  EXPECT_EQ(replayed.step_sizes, stats.step_sizes);
}

TEST(OdeConfig, Validation) {
  OdeConfig c;
  c.rtol = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = OdeConfig{};
  c.depth_T = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = OdeConfig{};
  c.t_end = c.t_start;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(EulerAlign, ZeroDepthReturnsQuery) {
  std::mt19937_64 rng(5);
  const ParamStore p = align_params(rng, 4, 2, true);
  const Tensor s = random_tensor(Shape{1, 4, 3, 3}, rng), q = random_tensor(Shape{1, 4, 3, 3}, rng);
  const auto r = euler_align(s, q, AlignConfig{2, 1, true}, 0, p);
  EXPECT_EQ(r.aligned.values(), q.values());
  EXPECT_EQ(r.stats.function_evals, 0);
}

TEST(EulerAlign, DepthOneIsAlignOnce) {
  std::mt19937_64 rng(6);
  const ParamStore p = align_params(rng, 4, 2, true);
  const Tensor s = random_tensor(Shape{1, 4, 3, 3}, rng), q = random_tensor(Shape{1, 4, 3, 3}, rng);
  const AlignConfig cfg{2, 1, true};
  const Tensor once = align_once(s, q, cfg, p);
  EXPECT_EQ(euler_align(s, q, cfg, 1, p).aligned.values(), once.values());
  EXPECT_EQ(euler_align(s, q, cfg, 1, p, FilterRefresh::per_eval).aligned.values(), once.values());
}

TEST(EulerAlign, FrozenDepthThreeIsCubicGrowth) {
  std::mt19937_64 rng(7);
  const ParamStore p = align_params(rng, 4, 2, true);
  const Tensor s = random_tensor(Shape{1, 4, 3, 3}, rng), q = random_tensor(Shape{1, 4, 3, 3}, rng, 0.5, 1.5);
  const AlignConfig cfg{2, 1, true};
  const DiagonalProblem prob{q, make_filter(s, q, cfg, p)};
  const Tensor x3 = euler_align(s, q, cfg, 3, p).aligned;
  EXPECT_LE(prob.error(x3, [](double w) { return (1.0 + w) * (1.0 + w) * (1.0 + w); }), 1e-12);
}

TEST(EulerAlign, PerEvalRefreshDiffersFromFrozenWithLiveOffsets) {
  std::mt19937_64 rng(8);
  const ParamStore p = align_params(rng, 4, 2, true);
  const Tensor s = random_tensor(Shape{1, 4, 4, 4}, rng), q = random_tensor(Shape{1, 4, 4, 4}, rng);
  const AlignConfig cfg{2, 1, true};
  const Tensor frozen = euler_align(s, q, cfg, 2, p).aligned;
  const Tensor refreshed = euler_align(s, q, cfg, 2, p, FilterRefresh::per_eval).aligned;
  EXPECT_GT(dmf::testing::max_abs_diff(frozen, refreshed), 1e-9);
}

TEST(Euler, ConvergesToExponentialAsStepShrinks) {
  std::mt19937_64 rng(9);
  const auto prob = diagonal(rng);
  const Tensor reference = solve_dopri5(prob.x0, prob.field(), dopri(1e-10, 1e-12)).first;
  double previous = std::numeric_limits<double>::infinity();
  for (index_t T : {1, 2, 4, 8, 16}) {
    const Tensor xT = solve_euler(prob.x0, prob.field(), T, 1.0 / static_cast<double>(T)).first;
    const double err = dmf::testing::max_abs_diff(xT, reference);
    EXPECT_LT(err, previous) << "T " << T;
    previous = err;
  }
}

TEST(Align, DispatchesOnMethod) {
  std::mt19937_64 rng(10);
  const ParamStore p = align_params(rng, 4, 4, false);
  const Tensor s = random_tensor(Shape{1, 4, 3, 3}, rng), q = random_tensor(Shape{1, 4, 3, 3}, rng, 0.5, 1.5);
  const AlignConfig cfg{4, 1, false};
  OdeConfig ode;
  const auto r = align(s, q, cfg, ode, p);
  const DiagonalProblem prob{q, make_filter(s, q, cfg, p)};
  EXPECT_LE(prob.error(r.aligned, exp_growth), 10.0 * ode.rtol);
  ode.method = OdeMethod::euler_fixed;
  ode.depth_T = 2;
  EXPECT_EQ(align(s, q, cfg, ode, p).aligned.values(), euler_align(s, q, cfg, 2, p).aligned.values());
}
