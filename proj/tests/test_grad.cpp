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

// Finite-difference checks for every op. The loss is sum(sigmoid(out)),
// which makes d(loss)/d(out) vary per element so axis mix-ups cannot cancel.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "ftfd/ops.hpp"
#include "oracles.hpp"

using ftfd::Mode;
using ftfd::Tape;
using ftfd::Tensor;
using ftfd_test::max_fd_error;
using ftfd_test::random_tensor;

namespace {

constexpr double kOpTol = 1e-5;

std::vector<std::int64_t> pick_coords(ftfd::Rng& rng, const Tensor& t, int n) {
  std::vector<std::int64_t> coords;
  for (int i = 0; i < n; ++i) coords.push_back(rng.uniform_int(t.numel()));
  return coords;
}

// Runs forward via `fwd`, reduces with sum(sigmoid(.)), backpropagates.
template <class Fwd>
auto make_run(std::vector<Tensor> leaves, Fwd fwd) {
  return [leaves, fwd]() mutable {
    for (auto& leaf : leaves) leaf.zero_grad();
    Tape tape;
    Tensor out = fwd(&tape);
    Tensor loss = ftfd::sum(&tape, ftfd::sigmoid(&tape, out));
    tape.backward(loss);
    return loss.item();
  };
}

template <class Fwd>
void check_leaves(ftfd::Rng& rng, std::vector<Tensor> leaves, Fwd fwd,
                  int coords_per_leaf = 5, double tol = kOpTol) {
  auto run = make_run(leaves, fwd);
  for (Tensor& leaf : leaves) {
    const double err =
        max_fd_error(run, leaf, pick_coords(rng, leaf, coords_per_leaf));
    INFO("leaf " << leaf.shape_str());
    CHECK(err < tol);
  }
}

}  // namespace

TEST_CASE("conv2d gradients") {
  ftfd::Rng rng(101);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Tensor in = random_tensor({2, 2, 5, 6}, rng, -1, 1, true);
      Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.6, 0.6, true);
      Tensor b = random_tensor({3}, rng, -0.3, 0.3, true);
      check_leaves(rng, {in, w, b}, [=](Tape* t) {
        return ftfd::conv2d(t, in, w, b, stride, pad);
      });
    }
  }
}

TEST_CASE("channel pooling gradients") {
  ftfd::Rng rng(102);
  Tensor in = random_tensor({2, 5, 4, 4}, rng, -1, 1, true);
  check_leaves(rng, {in},
               [=](Tape* t) { return ftfd::channel_avg_pool(t, in); });
  // Max pool: keep inputs away from ties so the derivative is defined.
  Tensor mx({2, 4, 3, 3}, true);
  for (std::int64_t i = 0; i < mx.numel(); ++i) {
    mx.data()[i] = 0.05 * double(i % 37) + rng.uniform(0.0, 0.02);
  }
  check_leaves(rng, {mx}, [=](Tape* t) { return ftfd::channel_max_pool(t, mx); });
}

TEST_CASE("concat and broadcast-multiply gradients") {
  ftfd::Rng rng(103);
  Tensor a = random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
  Tensor b = random_tensor({2, 2, 4, 4}, rng, -1, 1, true);
  check_leaves(rng, {a, b},
               [=](Tape* t) { return ftfd::concat_channels(t, a, b); });

  Tensor f = random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
  Tensor m = random_tensor({2, 1, 4, 4}, rng, -0.9, 0.9, true);
  check_leaves(rng, {f, m},
               [=](Tape* t) { return ftfd::mul_broadcast(t, f, m); });
}

TEST_CASE("activation gradients") {
  ftfd::Rng rng(104);
  Tensor x = random_tensor({3, 7}, rng, -2, 2, true);
  check_leaves(rng, {x}, [=](Tape* t) { return ftfd::sigmoid(t, x); });

  // ReLU: sample magnitudes in [0.1, 2] so no kink lies within h.
  Tensor r({3, 7}, true);
  for (std::int64_t i = 0; i < r.numel(); ++i) {
    const double mag = rng.uniform(0.1, 2.0);
    r.data()[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  check_leaves(rng, {r}, [=](Tape* t) { return ftfd::relu(t, r); });
}

TEST_CASE("fully_connected and global_avg_pool gradients") {
  ftfd::Rng rng(105);
  Tensor x = random_tensor({3, 6}, rng, -1, 1, true);
  Tensor w = random_tensor({4, 6}, rng, -0.7, 0.7, true);
  Tensor b = random_tensor({4}, rng, -0.3, 0.3, true);
  check_leaves(rng, {x, w, b},
               [=](Tape* t) { return ftfd::fully_connected(t, x, w, b); });

  Tensor g = random_tensor({2, 3, 5, 5}, rng, -1, 1, true);
  check_leaves(rng, {g}, [=](Tape* t) { return ftfd::global_avg_pool(t, g); });
}

TEST_CASE("add, sum, mul_scalar, concat_features gradients") {
  ftfd::Rng rng(106);
  Tensor a = random_tensor({2, 3, 3, 3}, rng, -1, 1, true);
  Tensor b = random_tensor({2, 3, 3, 3}, rng, -1, 1, true);
  check_leaves(rng, {a, b}, [=](Tape* t) { return ftfd::add(t, a, b); });

  Tensor x = random_tensor({2, 5}, rng, -1, 1, true);
  check_leaves(rng, {x}, [=](Tape* t) { return ftfd::mul_scalar(t, x, -1.7); });

  Tensor p = random_tensor({2, 3}, rng, -1, 1, true);
  Tensor q = random_tensor({2, 4}, rng, -1, 1, true);
  check_leaves(rng, {p, q}, [=](Tape* t) {
    return ftfd::concat_features(t, {p, q});
  });
}

TEST_CASE("batch_norm gradients vs finite differences") {
  ftfd::Rng rng(107);

  SECTION("train mode") {
    Tensor x = random_tensor({3, 2, 4, 4}, rng, -1.5, 1.5, true);
    auto bn = std::make_shared<ftfd::BatchNorm>(ftfd::BatchNorm::create(2));
    bn->gamma.data()[0] = 1.3;
    bn->gamma.data()[1] = 0.8;
    bn->beta.data()[0] = -0.2;
    check_leaves(rng, {x, bn->gamma, bn->beta}, [=](Tape* t) {
      return ftfd::batch_norm(t, x, *bn, Mode::kTrain);
    });
  }

  SECTION("eval mode") {
    Tensor x = random_tensor({2, 2, 3, 3}, rng, -1.5, 1.5, true);
    auto bn = std::make_shared<ftfd::BatchNorm>(ftfd::BatchNorm::create(2));
    bn->running_mean.data()[0] = 0.2;
    bn->running_var.data()[1] = 1.7;
    check_leaves(rng, {x, bn->gamma, bn->beta}, [=](Tape* t) {
      return ftfd::batch_norm(t, x, *bn, Mode::kEval);
    });
  }
}

TEST_CASE("dropout gradient through a frozen mask") {
  ftfd::Rng rng(108);
  Tensor x = random_tensor({4, 8}, rng, -1, 1, true);
  // Re-seed the mask RNG identically on every run so the mask is a constant
  // and the composite stays differentiable for the FD probe.
  auto run = [&]() {
    x.zero_grad();
    ftfd::Rng mask_rng(999);
    Tape tape;
    Tensor out = ftfd::dropout(&tape, x, 0.4, Mode::kTrain, mask_rng);
    Tensor loss = ftfd::sum(&tape, ftfd::sigmoid(&tape, out));
    tape.backward(loss);
    return loss.item();
  };
  std::vector<std::int64_t> coords = pick_coords(rng, x, 8);
  CHECK(max_fd_error(run, x, coords) < kOpTol);
}
