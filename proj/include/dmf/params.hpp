// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmf/autodiff.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

using GradientMap = std::map<std::string, Tensor>;

/// Named parameter tensors. Names are unique and iteration order is sorted by
/// name, which keeps checkpoints and optimizer sweeps deterministic.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value) {
    if (!value.defined()) throw std::invalid_argument("parameter '" + name + "' is undefined");
    auto [it, inserted] = params_.emplace(name, std::move(value));
    if (!inserted) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  }

  /// Replaces a parameter's value; the shape must not change.
  void set(const std::string& name, Tensor value) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    require_same_shape(it->second, value, name.c_str());
    it->second = std::move(value);
  }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.contains(name); }
  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void watch_all(DiffRecord& record) const {
    for (const auto& [_, value] : params_) record.watch(value);
  }

  index_t total_elements() const {
    index_t n = 0;
    for (const auto& [_, value] : params_) n += value.numel();
    return n;
  }

 private:
  std::map<std::string, Tensor> params_;
};

/// Runs the reverse sweep and collects d(root)/d(param) for every parameter
/// in `params`. Parameters the root does not depend on get zeros.
inline GradientMap backward(const Tensor& root, DiffRecord& record, const ParamStore& params) {
  record.backward(root);
  GradientMap grads;
  for (const auto& [name, value] : params) grads.emplace(name, record.gradient(value));
  return grads;
}

}  // namespace dmf
