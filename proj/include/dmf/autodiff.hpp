// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmf/tensor.hpp"

namespace dmf {

class DiffRecord;

/// Hands out gradient buffers for the inputs of a node during the reverse
/// sweep. Inputs that do not lead back to a watched tensor get an empty span,
/// so backward rules can skip work they do not need.
class GradSink {
 public:
  explicit GradSink(DiffRecord& record) : record_(record) {}
  std::span<double> operator()(const Tensor& input);

 private:
  DiffRecord& record_;
};

/// Tape of executed operations. Nodes are appended in execution order, which
/// is a topological order of the computation; the reverse sweep visits them
/// back to front so every node sees its fully accumulated output gradient
/// exactly once.
///
/// A record is single-writer. Parameters may be shared read-only between
/// records on different threads because gradients live in the record, not in
/// the tensors.
class DiffRecord {
 public:
  enum class Mode { recording, inert };

  using BackwardFn = std::function<void(std::span<const double> grad_out, GradSink& sink)>;

  explicit DiffRecord(Mode mode = Mode::recording) : mode_(mode) {}

  DiffRecord(const DiffRecord&) = delete;
  DiffRecord& operator=(const DiffRecord&) = delete;

  Mode mode() const { return mode_; }

  void watch(const Tensor& leaf) {
    watched_.push_back(leaf);
    live_.insert(leaf.id());
  }

  bool tracks(const Tensor& t) const { return t.defined() && live_.contains(t.id()); }

  void record(const Tensor& output, BackwardFn fn) {
    live_.insert(output.id());
    nodes_.push_back(Node{output, std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    watched_.clear();
    live_.clear();
    grads_.clear();
  }

  /// Reverse sweep from a scalar root. Afterwards gradient(t) is available
  /// for every tracked tensor the root depends on.
  void backward(const Tensor& root) {
    if (mode_ == Mode::inert) throw std::logic_error("backward on an inert record");
    if (root.numel() != 1) {
      detail::shape_fail("backward root must be scalar, got shape ", root.shape().str());
    }
    grads_.clear();
    if (!tracks(root)) return;
    grads_[root.id()] = {1.0};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto found = grads_.find(it->output.id());
      if (found == grads_.end()) continue;
      // unordered_map never relocates its elements, so this span stays valid
      // while the sink inserts input buffers.
      std::span<const double> grad_out = found->second;
      GradSink sink(*this);
      it->fn(grad_out, sink);
    }
  }

  /// Gradient of the last backward root w.r.t. t; zeros when t did not
  /// participate.
  Tensor gradient(const Tensor& t) const {
    auto found = grads_.find(t.id());
    if (found == grads_.end()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), found->second);
  }

 private:
  friend class GradSink;

  struct Node {
    Tensor output;
    BackwardFn fn;
  };

  std::span<double> grad_buffer(const Tensor& input) {
    if (!tracks(input)) return {};
    auto [it, inserted] = grads_.try_emplace(input.id());
    if (inserted) it->second.assign(static_cast<std::size_t>(input.numel()), 0.0);
    return it->second;
  }

  Mode mode_;
  std::vector<Node> nodes_;
  std::vector<Tensor> watched_;  // pins leaf storage so ids stay unique
  std::unordered_set<const void*> live_;
  std::unordered_map<const void*, std::vector<double>> grads_;
};

inline std::span<double> GradSink::operator()(const Tensor& input) {
  return record_.grad_buffer(input);
}

namespace detail {
inline thread_local DiffRecord* active_record = nullptr;
}  // namespace detail

/// Makes `record` the active tape of the calling thread for the scope's
/// lifetime. Operations executed meanwhile append backward rules to it when
/// any operand is tracked.
class RecordScope {
 public:
  explicit RecordScope(DiffRecord& record) : previous_(detail::active_record) {
    detail::active_record = &record;
  }
  ~RecordScope() { detail::active_record = previous_; }

  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;

 private:
  DiffRecord* previous_;
};

/// Suspends recording on the calling thread (evaluation, solver control).
class NoRecordScope {
 public:
  NoRecordScope() : previous_(detail::active_record) { detail::active_record = nullptr; }
  ~NoRecordScope() { detail::active_record = previous_; }

  NoRecordScope(const NoRecordScope&) = delete;
  NoRecordScope& operator=(const NoRecordScope&) = delete;

 private:
  DiffRecord* previous_;
};

namespace detail {

template <typename... Ts>
DiffRecord* tracking(const Ts&... inputs) {
  DiffRecord* rec = active_record;
  if (rec == nullptr || rec->mode() == DiffRecord::Mode::inert) return nullptr;
  return (rec->tracks(inputs) || ...) ? rec : nullptr;
}

inline DiffRecord* tracking_any(std::span<const Tensor> inputs) {
  DiffRecord* rec = active_record;
  if (rec == nullptr || rec->mode() == DiffRecord::Mode::inert) return nullptr;
  for (const auto& t : inputs) {
    if (rec->tracks(t)) return rec;
  }
  return nullptr;
}

}  // namespace detail

}  // namespace dmf
