/* Copyright 2026 The FTFD Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ftfd/common.hpp"

namespace ftfd {

/// Dense N-dimensional array of f64 values in row-major order, with an
/// optional same-shape gradient buffer. A Tensor is a cheap handle onto
/// shared storage; ops produce fresh tensors and never mutate their inputs,
/// so values are safe to read from any thread once created.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    s_->numel = checked_numel(shape);
    s_->shape = std::move(shape);
    s_->value.assign(static_cast<std::size_t>(s_->numel), 0.0);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(std::vector<int> shape, double v,
                     bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.s_->value.begin(), t.s_->value.end(), v);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false) {
    const std::int64_t n = checked_numel(shape);
    detail::check_arg(n == static_cast<std::int64_t>(data.size()),
                      "Tensor: data length " + std::to_string(data.size()) +
                          " does not match shape product " + std::to_string(n));
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->numel = n;
    t.s_->value = std::move(data);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return s_ != nullptr; }

  const std::vector<int>& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return s_->numel; }

  double* data() { return s_->value.data(); }
  const double* data() const { return s_->value.data(); }
  std::vector<double>& values() { return s_->value; }
  const std::vector<double>& values() const { return s_->value; }

  double item() const {
    detail::check_arg(s_ && s_->numel == 1,
                      "Tensor::item: tensor is not scalar");
    return s_->value[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool b) { s_->requires_grad = b; }

  bool has_grad() const { return s_ && !s_->grad.empty(); }

  /// Gradient buffer, allocated (zero-filled) on first use.
  double* ensure_grad() {
    if (s_->grad.empty()) {
      s_->grad.assign(static_cast<std::size_t>(s_->numel), 0.0);
    }
    return s_->grad.data();
  }

  const double* grad_data() const {
    return s_->grad.empty() ? nullptr : s_->grad.data();
  }

  std::vector<double>& grad_values() { return s_->grad; }

  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
  }

  /// Deep copy of values only (no gradient, no shared storage).
  Tensor clone() const {
    return from_data(s_->shape, s_->value, s_->requires_grad);
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  std::string shape_str() const {
    if (!s_) return "(undefined)";
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s_->shape.size(); ++i) {
      if (i) os << ",";
      os << s_->shape[i];
    }
    os << "]";
    return os.str();
  }

 private:
  struct Storage {
    std::vector<int> shape;
    std::int64_t numel = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  static std::int64_t checked_numel(const std::vector<int>& shape) {
    detail::check_arg(!shape.empty(), "Tensor: shape must have rank >= 1");
    std::int64_t n = 1;
    for (int e : shape) {
      detail::check_arg(e > 0, "Tensor: all extents must be positive, got " +
                                   std::to_string(e));
      n *= e;
    }
    return n;
  }

  std::shared_ptr<Storage> s_;
};

/// Reverse-mode record of one forward computation. Ops append a backward
/// step per recorded operation; backward() replays them last-to-first.
/// A tape is confined to one logical thread of execution.
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return steps_.size(); }

  void clear() {
    steps_.clear();
    consumed_ = false;
  }

  /// Populates grad = d(loss)/d(leaf) for every requires_grad tensor
  /// reachable from the scalar loss. A second call without a fresh forward
  /// pass is an error.
  void backward(Tensor loss) {
    detail::check_arg(loss.defined() && loss.numel() == 1,
                      "backward: loss must be a scalar tensor, got " +
                          loss.shape_str());
    if (consumed_) {
      throw std::logic_error(
          "backward: tape already consumed; run a new forward pass first");
    }
    consumed_ = true;
    loss.ensure_grad()[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

}  // namespace ftfd
