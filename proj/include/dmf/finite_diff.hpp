// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmf/params.hpp"

namespace dmf {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ScalarFn = std::function<double(const ParamStore&)>;

/// Central-difference gradient of `fn` w.r.t. every coordinate of every
/// parameter: (fn(p + step) - fn(p - step)) / (2 step).
inline GradientMap finite_diff_grad(const ScalarFn& fn, const ParamStore& params, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  ParamStore probe = params;
  auto eval = [&](const std::string& name, index_t coord) {
    const double v = fn(probe);
    if (!std::isfinite(v)) {
      throw NonFiniteError(detail::concat("finite_diff_grad: non-finite value ", v,
                                          " while perturbing ", name, "[", coord, "]"));
    }
    return v;
  };
  GradientMap grads;
  for (const auto& [name, value] : params) {
    std::vector<double> g(static_cast<std::size_t>(value.numel()));
    std::vector<double> work = value.values();
    for (index_t i = 0; i < value.numel(); ++i) {
      const auto at = static_cast<std::size_t>(i);
      const double orig = work[at];
      work[at] = orig + step;
      probe.set(name, Tensor(value.shape(), work));
      const double up = eval(name, i);
      work[at] = orig - step;
      probe.set(name, Tensor(value.shape(), work));
      const double down = eval(name, i);
      work[at] = orig;
      g[at] = (up - down) / (2.0 * step);
    }
    probe.set(name, value);
    grads.emplace(name, Tensor(value.shape(), std::move(g)));
  }
  return grads;
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂); zero when both are below `floor`.
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-12) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom < floor) return std::sqrt(diff) < floor ? 0.0 : std::sqrt(diff) / floor;
  return std::sqrt(diff) / denom;
}

inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  require_same_shape(a, b, "relative_error");
  return relative_error(a.data(), b.data(), floor);
}

/// Worst per-parameter relative error between two gradient maps with the
/// same keys.
inline double max_relative_error(const GradientMap& a, const GradientMap& b,
                                 std::string* worst = nullptr, double floor = 1e-12) {
  double err = 0.0;
  for (const auto& [name, ga] : a) {
    auto it = b.find(name);
    if (it == b.end()) throw std::invalid_argument("gradient maps differ in key '" + name + "'");
    const double e = relative_error(ga, it->second, floor);
    if (e > err) {
      err = e;
      if (worst) *worst = name;
    }
  }
  return err;
}

}  // namespace dmf
