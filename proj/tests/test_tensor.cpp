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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

#include "ftfd/checkpoint.hpp"
#include "ftfd/ops.hpp"
#include "ftfd/tensor.hpp"
#include "oracles.hpp"

using ftfd::Mode;
using ftfd::Tape;
using ftfd::Tensor;
using ftfd_test::random_tensor;

TEST_CASE("tensor shape and data invariants") {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.shape() == std::vector<int>{2, 3});
  CHECK_THROWS_AS(Tensor({2, 0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor(std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("conv2d identity kernel") {
  Tensor in = Tensor::from_data({1, 1, 1, 1}, {2.0});
  Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor b = Tensor::zeros({1});
  Tensor out = ftfd::conv2d(nullptr, in, w, b, 1, 0);
  CHECK(out.data()[0] == 2.0);
}

TEST_CASE("conv2d all-ones 3x3 with padding counts overlap") {
  Tensor in = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tensor out = ftfd::conv2d(nullptr, in, w, b, 1, 1);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 3, 3});
  CHECK(out.data()[4] == 9.0);  // center
  CHECK(out.data()[0] == 4.0);  // corners
  CHECK(out.data()[2] == 4.0);
  CHECK(out.data()[6] == 4.0);
  CHECK(out.data()[8] == 4.0);
  CHECK(out.data()[1] == 6.0);  // edges
}

TEST_CASE("conv2d matches the direct nested-loop reference") {
  ftfd::Rng rng(11);
  for (int trial = 0; trial < 12; ++trial) {
    const int b = 1 + int(rng.uniform_int(2));
    const int cin = 1 + int(rng.uniform_int(3));
    const int cout = 1 + int(rng.uniform_int(3));
    const int h = 3 + int(rng.uniform_int(6));
    const int w = 3 + int(rng.uniform_int(6));
    const int k = 1 + 2 * int(rng.uniform_int(2));  // 1 or 3
    const int stride = 1 + int(rng.uniform_int(2));
    const int pad = int(rng.uniform_int(2));
    Tensor in = random_tensor({b, cin, h, w}, rng);
    Tensor wt = random_tensor({cout, cin, k, k}, rng);
    Tensor bs = random_tensor({cout}, rng);
    Tensor got = ftfd::conv2d(nullptr, in, wt, bs, stride, pad);
    Tensor want = ftfd_test::reference_conv2d(in, wt, bs, stride, pad);
    REQUIRE(got.shape() == want.shape());
    for (std::int64_t i = 0; i < got.numel(); ++i) {
      REQUIRE(std::fabs(got.data()[i] - want.data()[i]) < 1e-12);
    }
  }
}

TEST_CASE("conv2d rejects inconsistent shapes") {
  Tensor in = Tensor::zeros({1, 2, 4, 4});
  Tensor w = Tensor::zeros({3, 3, 3, 3});  // wrong input channels
  Tensor b = Tensor::zeros({3});
  CHECK_THROWS_AS(ftfd::conv2d(nullptr, in, w, b, 1, 1),
                  std::invalid_argument);
  Tensor w_big = Tensor::zeros({1, 2, 7, 7});
  Tensor b1 = Tensor::zeros({1});
  CHECK_THROWS_AS(ftfd::conv2d(nullptr, in, w_big, b1, 1, 0),
                  std::invalid_argument);
}

TEST_CASE("conv2d is bit-identical across thread counts") {
  ftfd::Rng rng(7);
  Tensor in = random_tensor({2, 3, 16, 16}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  ftfd::set_thread_count(1);
  Tensor serial = ftfd::conv2d(nullptr, in, w, b, 1, 1);
  ftfd::set_thread_count(4);
  Tensor parallel = ftfd::conv2d(nullptr, in, w, b, 1, 1);
  ftfd::set_thread_count(0);  // back to default
  for (std::int64_t i = 0; i < serial.numel(); ++i) {
    REQUIRE(serial.data()[i] == parallel.data()[i]);
  }
}

TEST_CASE("channel pooling") {
  // channels {[[1,2],[3,4]], [[5,6],[7,8]]}
  Tensor in = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor avg = ftfd::channel_avg_pool(nullptr, in);
  Tensor mx = ftfd::channel_max_pool(nullptr, in);
  const double want_avg[4] = {3, 4, 5, 6};
  const double want_max[4] = {5, 6, 7, 8};
  for (int i = 0; i < 4; ++i) {
    CHECK(avg.data()[i] == want_avg[i]);
    CHECK(mx.data()[i] == want_max[i]);
  }
  REQUIRE(avg.shape() == std::vector<int>{1, 1, 2, 2});

  SECTION("single channel is the identity") {
    Tensor one = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor out = ftfd::channel_avg_pool(nullptr, one);
    for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == one.data()[i]);
  }

  SECTION("random input matches per-position loop") {
    ftfd::Rng rng(3);
    Tensor x = random_tensor({1, 7, 4, 4}, rng);
    Tensor a = ftfd::channel_avg_pool(nullptr, x);
    Tensor m = ftfd::channel_max_pool(nullptr, x);
    for (int i = 0; i < 16; ++i) {
      double s = 0, best = x.data()[i];
      for (int c = 0; c < 7; ++c) {
        s += x.data()[c * 16 + i];
        best = std::max(best, x.data()[c * 16 + i]);
      }
      CHECK(std::fabs(a.data()[i] - s / 7) < 1e-12);
      CHECK(m.data()[i] == best);
    }
  }

  SECTION("max-pool ties send gradient to channel 0 only") {
    Tape tape;
    Tensor x = Tensor::full({1, 3, 1, 1}, 2.5, true);
    Tensor out = ftfd::channel_max_pool(&tape, x);
    CHECK(out.data()[0] == 2.5);
    tape.backward(ftfd::sum(&tape, out));
    CHECK(x.grad_data()[0] == 1.0);
    CHECK(x.grad_data()[1] == 0.0);
    CHECK(x.grad_data()[2] == 0.0);
  }
}

TEST_CASE("concat_channels layout and split recovery") {
  Tensor a = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor b = Tensor::from_data({1, 1, 1, 1}, {2.0});
  Tensor out = ftfd::concat_channels(nullptr, a, b);
  CHECK(out.data()[0] == 1.0);
  CHECK(out.data()[1] == 2.0);

  SECTION("zero-channel inputs cannot be constructed") {
    CHECK_THROWS_AS(Tensor({1, 0, 1, 1}), std::invalid_argument);
  }

  SECTION("spatial mismatch is rejected") {
    Tensor c = Tensor::zeros({1, 1, 2, 1});
    CHECK_THROWS_AS(ftfd::concat_channels(nullptr, a, c),
                    std::invalid_argument);
  }

  SECTION("gradient of sum splits into all-ones") {
    Tape tape;
    ftfd::Rng rng(5);
    Tensor x = random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
    Tensor y = random_tensor({2, 2, 4, 4}, rng, -1, 1, true);
    Tensor cat = ftfd::concat_channels(&tape, x, y);
    tape.backward(ftfd::sum(&tape, cat));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      REQUIRE(x.grad_data()[i] == 1.0);
    }
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      REQUIRE(y.grad_data()[i] == 1.0);
    }
  }

  SECTION("concat then split recovers both inputs bitwise") {
    ftfd::Rng rng(9);
    Tensor x = random_tensor({2, 3, 5, 4}, rng);
    Tensor y = random_tensor({2, 4, 5, 4}, rng);
    Tensor cat = ftfd::concat_channels(nullptr, x, y);
    const std::int64_t plane = 5 * 4;
    for (int bi = 0; bi < 2; ++bi) {
      for (std::int64_t i = 0; i < 3 * plane; ++i) {
        REQUIRE(cat.data()[bi * 7 * plane + i] == x.data()[bi * 3 * plane + i]);
      }
      for (std::int64_t i = 0; i < 4 * plane; ++i) {
        REQUIRE(cat.data()[bi * 7 * plane + 3 * plane + i] ==
                y.data()[bi * 4 * plane + i]);
      }
    }
  }
}

TEST_CASE("sigmoid values, symmetry, and extreme-input stability") {
  Tensor zero = Tensor::scalar(0.0);
  CHECK(ftfd::sigmoid(nullptr, zero).item() == 0.5);

  ftfd::Rng rng(21);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-30, 30);
    const double a = ftfd::sigmoid_value(x);
    const double b = 1.0 - ftfd::sigmoid_value(-x);
    CHECK(std::fabs(a - b) < 1e-15);
  }

  const double tiny = ftfd::sigmoid_value(-1000.0);
  CHECK(tiny > 0.0);
  CHECK(tiny <= 1e-300);
  CHECK(std::isfinite(tiny));

  // strictly inside (0,1) even for huge logits
  CHECK(ftfd::sigmoid_value(1e6) < 1.0);
  CHECK(ftfd::sigmoid_value(-1e6) > 0.0);
}

TEST_CASE("relu and mul_broadcast basics") {
  Tensor x = Tensor::from_data({2}, {-3.0, 3.0});
  Tensor y = ftfd::relu(nullptr, x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 3.0);

  ftfd::Rng rng(2);
  Tensor f = random_tensor({2, 3, 4, 4}, rng);
  Tensor m = Tensor::full({2, 1, 4, 4}, 0.5);
  Tensor out = ftfd::mul_broadcast(nullptr, f, m);
  for (std::int64_t i = 0; i < f.numel(); ++i) {
    CHECK(out.data()[i] == 0.5 * f.data()[i]);
  }
}

TEST_CASE("fully_connected matches loop oracle") {
  ftfd::Rng rng(31);
  Tensor x = random_tensor({4, 8}, rng);
  Tensor w = random_tensor({5, 8}, rng);
  Tensor b = random_tensor({5}, rng);
  Tensor got = ftfd::fully_connected(nullptr, x, w, b);
  Tensor want = ftfd_test::reference_fc(x, w, b);
  for (std::int64_t i = 0; i < got.numel(); ++i) {
    CHECK(std::fabs(got.data()[i] - want.data()[i]) < 1e-12);
  }
}

TEST_CASE("batch_norm") {
  SECTION("constant-per-channel train input maps to zero") {
    ftfd::BatchNorm bn = ftfd::BatchNorm::create(2);
    Tensor x({2, 2, 2, 2});
    for (int bi = 0; bi < 2; ++bi)
      for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 4; ++i) x.data()[(bi * 2 + c) * 4 + i] = 3.0 + c;
    Tensor y = ftfd::batch_norm(nullptr, x, bn, Mode::kTrain);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
  }

  SECTION("eval mode closed form") {
    ftfd::BatchNorm bn = ftfd::BatchNorm::create(1);
    bn.gamma.data()[0] = 2.0;
    bn.beta.data()[0] = 1.0;
    Tensor x = Tensor::full({1, 1, 1, 1}, 3.0);
    Tensor y = ftfd::batch_norm(nullptr, x, bn, Mode::kEval);
    const double want = 2.0 * 3.0 / std::sqrt(1.0 + 1e-5) + 1.0;
    CHECK(std::fabs(y.item() - want) < 1e-12);
    CHECK(std::fabs(y.item() - 6.99997) < 1e-5);
  }

  SECTION("train mode normalizes per channel") {
    ftfd::Rng rng(17);
    Tensor x = random_tensor({4, 3, 5, 5}, rng, -2, 5);
    ftfd::BatchNorm bn = ftfd::BatchNorm::create(3);
    Tensor y = ftfd::batch_norm(nullptr, x, bn, Mode::kTrain);
    for (int c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (int bi = 0; bi < 4; ++bi)
        for (int i = 0; i < 25; ++i) m += y.data()[(bi * 3 + c) * 25 + i];
      m /= 100;
      for (int bi = 0; bi < 4; ++bi)
        for (int i = 0; i < 25; ++i) {
          const double d = y.data()[(bi * 3 + c) * 25 + i] - m;
          v += d * d;
        }
      v /= 100;
      CHECK(std::fabs(m) < 1e-6);
      CHECK(std::fabs(v - 1.0) < 1e-3);
    }
  }

  SECTION("train mode on single-element statistics is an error") {
    ftfd::BatchNorm bn = ftfd::BatchNorm::create(1);
    Tensor x = Tensor::full({1, 1, 1, 1}, 1.0);
    CHECK_THROWS_AS(ftfd::batch_norm(nullptr, x, bn, Mode::kTrain),
                    std::invalid_argument);
  }
}

TEST_CASE("dropout") {
  ftfd::Rng rng(41);
  Tensor x = Tensor::full({1000}, 1.0);

  SECTION("p=0 and eval mode are the identity") {
    Tensor a = ftfd::dropout(nullptr, x, 0.0, Mode::kTrain, rng);
    Tensor b = ftfd::dropout(nullptr, x, 0.7, Mode::kEval, rng);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK(a.data()[i] == 1.0);
      CHECK(b.data()[i] == 1.0);
    }
  }

  SECTION("inverted scaling keeps the mean (law of large numbers)") {
    Tensor big = Tensor::full({1000000}, 1.0);
    Tensor out = ftfd::dropout(nullptr, big, 0.5, Mode::kTrain, rng);
    double mean = 0;
    for (std::int64_t i = 0; i < out.numel(); ++i) mean += out.data()[i];
    mean /= out.numel();
    CHECK(std::fabs(mean - 1.0) < 0.01);
  }

  SECTION("fixed seed reproduces masks bitwise") {
    ftfd::Rng r1(123), r2(123);
    Tensor a = ftfd::dropout(nullptr, x, 0.3, Mode::kTrain, r1);
    Tensor b = ftfd::dropout(nullptr, x, 0.3, Mode::kTrain, r2);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      REQUIRE(a.data()[i] == b.data()[i]);
    }
  }

  SECTION("p outside [0,1) is rejected") {
    CHECK_THROWS_AS(ftfd::dropout(nullptr, x, 1.0, Mode::kTrain, rng),
                    std::invalid_argument);
  }
}

TEST_CASE("backward basics") {
  SECTION("loss = sum(2x) gives grad of all 2s") {
    Tape tape;
    ftfd::Rng rng(1);
    Tensor x = random_tensor({3, 4}, rng, -1, 1, true);
    Tensor loss = ftfd::sum(&tape, ftfd::mul_scalar(&tape, x, 2.0));
    tape.backward(loss);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      REQUIRE(x.grad_data()[i] == 2.0);
    }
  }

  SECTION("d sigmoid(w*x) / dw at w=0, x=1 is 0.25") {
    Tape tape;
    Tensor w = Tensor::from_data({1, 1}, {0.0}, true);
    Tensor x = Tensor::from_data({1, 1}, {1.0});
    Tensor wx = ftfd::fully_connected(&tape, x, w, Tensor::zeros({1}));
    Tensor loss = ftfd::sum(&tape, ftfd::sigmoid(&tape, wx));
    tape.backward(loss);
    CHECK(std::fabs(w.grad_data()[0] - 0.25) < 1e-14);
  }

  SECTION("non-scalar loss is an error") {
    Tape tape;
    Tensor x = Tensor::zeros({2}, true);
    Tensor y = ftfd::mul_scalar(&tape, x, 1.0);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }

  SECTION("second backward on a consumed tape is an error") {
    Tape tape;
    Tensor x = Tensor::zeros({2}, true);
    Tensor loss = ftfd::sum(&tape, x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
  }
}

TEST_CASE("checkpoint container round-trips bit-exactly") {
  ftfd::Rng rng(77);
  ftfd::NamedTensors tensors;
  tensors.emplace_back("conv.weight", random_tensor({4, 3, 3, 3}, rng, -10, 10));
  tensors.emplace_back("fc.bias", random_tensor({17}, rng, -1e300, 1e300));
  Tensor special = Tensor::from_data({4}, {0.0, -0.0, 1e-310, -1.5});
  tensors.emplace_back("special", special);

  const auto dir = std::filesystem::temp_directory_path() / "ftfd_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "roundtrip.ftfd";
  ftfd::save_tensors(path, tensors);
  ftfd::NamedTensors loaded = ftfd::load_tensors(path);
  REQUIRE(loaded.size() == tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    CHECK(loaded[i].first == tensors[i].first);
    REQUIRE(loaded[i].second.shape() == tensors[i].second.shape());
    for (std::int64_t j = 0; j < tensors[i].second.numel(); ++j) {
      REQUIRE(std::bit_cast<std::uint64_t>(loaded[i].second.data()[j]) ==
              std::bit_cast<std::uint64_t>(tensors[i].second.data()[j]));
    }
  }

  SECTION("bad magic is rejected") {
    const auto bad = dir / "bad.ftfd";
    std::ofstream f(bad, std::ios::binary);
    f << "NOPE1234";
    f.close();
    CHECK_THROWS_AS(ftfd::load_tensors(bad), ftfd::DataError);
  }
  std::filesystem::remove_all(dir);
}
