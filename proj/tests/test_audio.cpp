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
#include <fstream>

#include "ftfd/audio.hpp"
#include "ftfd/wav.hpp"
#include "oracles.hpp"

using ftfd::AudioWindow;
using ftfd::MelParams;
using ftfd::Tensor;

namespace {

AudioWindow window_of(std::vector<double> samples, int frames = 3) {
  AudioWindow w;
  w.samples = std::move(samples);
  w.sample_rate = 16000;
  w.first_frame = 0;
  w.num_frames = frames;
  return w;
}

}  // namespace

TEST_CASE("align_window arithmetic and bounds") {
  auto [s, e] = ftfd::align_window(25, 10, 3, 16000, 1 << 30);
  CHECK(s == 6400);
  CHECK(e == 8320);

  auto [s0, e0] = ftfd::align_window(25, 0, 3, 16000, 1 << 30);
  CHECK(s0 == 0);
  CHECK(e0 == 1920);

  SECTION("frame beyond stream end is an error") {
    CHECK_THROWS_AS(ftfd::align_window(25, 100, 3, 16000, 640 * 50),
                    ftfd::DataError);
  }

  SECTION("clamped window shorter than n_fft is an error") {
    // frame 49 of a 50-frame stream: only 640 samples remain.
    CHECK_THROWS_AS(ftfd::align_window(25, 49, 3, 16000, 640 * 50),
                    ftfd::DataError);
  }

  SECTION("clamping to stream length") {
    auto [s1, e1] = ftfd::align_window(25, 48, 3, 16000, 640 * 50);
    CHECK(s1 == 48 * 640);
    CHECK(e1 == 640 * 50);
  }
}

TEST_CASE("mel_spectrogram of digital silence is the exact log floor") {
  AudioWindow w = window_of(std::vector<double>(1920, 0.0));
  ftfd::Spectrogram spec = ftfd::mel_spectrogram(w);
  REQUIRE(spec.mels.shape() == std::vector<int>{1, 80, 6});
  for (std::int64_t i = 0; i < spec.mels.numel(); ++i) {
    REQUIRE(spec.mels.data()[i] == -10.0);
  }
}

TEST_CASE("440 Hz sine concentrates energy in its mel bin") {
  std::vector<double> s(3200);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = 0.9 * std::sin(2.0 * M_PI * 440.0 * double(i) / 16000.0);
  }
  ftfd::Spectrogram spec = ftfd::mel_spectrogram(window_of(s, 5));
  const int n_steps = spec.mels.dim(2);

  // Oracle: the mel filter with the largest weight at the 440 Hz DFT bin.
  const MelParams p;
  const double mel_lo = 2595.0 * std::log10(1.0 + p.fmin / 700.0);
  const double mel_hi = 2595.0 * std::log10(1.0 + p.fmax / 700.0);
  auto center_hz = [&](int i) {
    const double m = mel_lo + (mel_hi - mel_lo) * i / (p.n_mels + 1);
    return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
  };
  int expect = -1;
  double best_w = 0.0;
  for (int m = 0; m < p.n_mels; ++m) {
    const double lo = center_hz(m), mid = center_hz(m + 1),
                 hi = center_hz(m + 2);
    double w = 0.0;
    if (440.0 > lo && 440.0 < mid) w = (440.0 - lo) / (mid - lo);
    if (440.0 >= mid && 440.0 < hi) w = (hi - 440.0) / (hi - mid);
    if (w > best_w) {
      best_w = w;
      expect = m;
    }
  }
  REQUIRE(expect >= 0);

  for (int st = 0; st < n_steps; ++st) {
    int argmax = 0;
    double best = spec.mels.data()[st];
    for (int m = 1; m < 80; ++m) {
      const double v = spec.mels.data()[std::int64_t(m) * n_steps + st];
      if (v > best) {
        best = v;
        argmax = m;
      }
    }
    REQUIRE(argmax == expect);
  }
}

TEST_CASE("STFT satisfies per-frame Parseval within 1%") {
  ftfd::Rng rng(5);
  std::vector<double> s(4000);
  for (auto& v : s) v = rng.uniform(-0.8, 0.8);
  Tensor mag = ftfd::stft_magnitude(s, 800, 200);
  const int n_bins = mag.dim(0), n_steps = mag.dim(1);

  // Direct summation oracle: sum of squared windowed samples per frame.
  std::vector<double> hann(800);
  for (int i = 0; i < 800; ++i) {
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / 800);
  }
  for (int st = 0; st < n_steps; ++st) {
    double time_energy = 0.0;
    for (int i = 0; i < 800; ++i) {
      const double v = s[st * 200 + i] * hann[i];
      time_energy += v * v;
    }
    // One-sided spectrum: double the interior bins.
    double spec_energy = 0.0;
    for (int k = 0; k < n_bins; ++k) {
      const double m = mag.data()[std::int64_t(k) * n_steps + st];
      const double scale = (k == 0 || k == n_bins - 1) ? 1.0 : 2.0;
      spec_energy += scale * m * m;
    }
    spec_energy /= 800.0;
    REQUIRE(std::fabs(spec_energy - time_energy) <
            0.01 * std::max(time_energy, 1e-12));
  }
}

TEST_CASE("mel_spectrogram input validation") {
  CHECK_THROWS_AS(ftfd::mel_spectrogram(window_of({})), ftfd::DataError);
  CHECK_THROWS_AS(
      ftfd::mel_spectrogram(window_of(std::vector<double>(100, 0.0))),
      ftfd::DataError);
  std::vector<double> clipped(1920, 0.0);
  clipped[77] = 1.5;
  CHECK_THROWS_AS(ftfd::mel_spectrogram(window_of(clipped)), ftfd::DataError);
  AudioWindow wrong_rate = window_of(std::vector<double>(1920, 0.0));
  wrong_rate.sample_rate = 8000;
  CHECK_THROWS_AS(ftfd::mel_spectrogram(wrong_rate), std::invalid_argument);
}

TEST_CASE("mel_spectrogram is deterministic and shift-coherent") {
  ftfd::Rng rng(9);
  std::vector<double> s(2400);
  for (auto& v : s) v = rng.uniform(-0.5, 0.5);

  SECTION("identical audio gives bit-identical spectrograms") {
    ftfd::Spectrogram a = ftfd::mel_spectrogram(window_of(s));
    ftfd::Spectrogram b = ftfd::mel_spectrogram(window_of(s));
    for (std::int64_t i = 0; i < a.mels.numel(); ++i) {
      REQUIRE(a.mels.data()[i] == b.mels.data()[i]);
    }
  }

  SECTION("one-hop shift moves columns by one") {
    std::vector<double> shifted(s.begin() + 200, s.end());
    ftfd::Spectrogram a = ftfd::mel_spectrogram(window_of(s));
    ftfd::Spectrogram b = ftfd::mel_spectrogram(window_of(shifted));
    const int sa = a.mels.dim(2), sb = b.mels.dim(2);
    REQUIRE(sb == sa - 1);
    for (int m = 0; m < 80; ++m) {
      for (int st = 0; st < sb; ++st) {
        const double va = a.mels.data()[std::int64_t(m) * sa + st + 1];
        const double vb = b.mels.data()[std::int64_t(m) * sb + st];
        REQUIRE(std::fabs(va - vb) < 1e-9);
      }
    }
  }
}

TEST_CASE("resize_bilinear") {
  SECTION("constant field stays constant") {
    Tensor src = Tensor::full({1, 5, 7}, 3.7);
    Tensor out = ftfd::resize_bilinear(src, 96, 96);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      REQUIRE(out.data()[i] == 3.7);
    }
  }

  SECTION("2x2 gradient upsampled to 2x4 matches closed form") {
    Tensor src = Tensor::from_data({1, 2, 2}, {0, 1, 0, 1});
    Tensor out = ftfd::resize_bilinear(src, 2, 4);
    const double want[4] = {0.0, 0.25, 0.75, 1.0};
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < 4; ++c) {
        REQUIRE(std::fabs(out.data()[r * 4 + c] - want[c]) < 1e-15);
      }
    }
  }

  SECTION("identity target size is bit-equal") {
    ftfd::Rng rng(12);
    Tensor src = ftfd_test::random_tensor({1, 6, 9}, rng);
    Tensor out = ftfd::resize_bilinear(src, 6, 9);
    for (std::int64_t i = 0; i < src.numel(); ++i) {
      REQUIRE(out.data()[i] == src.data()[i]);
    }
  }

  SECTION("output values stay within the input range") {
    ftfd::Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
      Tensor src = ftfd_test::random_tensor(
          {1, 2 + int(rng.uniform_int(8)), 2 + int(rng.uniform_int(8))}, rng);
      double lo = src.data()[0], hi = src.data()[0];
      for (std::int64_t i = 0; i < src.numel(); ++i) {
        lo = std::min(lo, src.data()[i]);
        hi = std::max(hi, src.data()[i]);
      }
      Tensor out = ftfd::resize_bilinear(src, 1 + int(rng.uniform_int(20)),
                                         1 + int(rng.uniform_int(20)));
      for (std::int64_t i = 0; i < out.numel(); ++i) {
        REQUIRE(out.data()[i] >= lo - 1e-12);
        REQUIRE(out.data()[i] <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("mel grid padding and truncation") {
  Tensor mels = Tensor::full({1, 3, 4}, 1.5);
  Tensor grid = ftfd::mel_to_grid(mels, 6);
  REQUIRE(grid.shape() == std::vector<int>{1, 3, 6});
  for (int m = 0; m < 3; ++m) {
    for (int s = 0; s < 6; ++s) {
      CHECK(grid.data()[m * 6 + s] == (s < 4 ? 1.5 : -10.0));
    }
  }
  Tensor cut = ftfd::mel_to_grid(mels, 2);
  REQUIRE(cut.shape() == std::vector<int>{1, 3, 2});
  for (std::int64_t i = 0; i < cut.numel(); ++i) CHECK(cut.data()[i] == 1.5);
}

TEST_CASE("WAV round trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "ftfd_wav_test";
  std::filesystem::create_directories(dir);

  SECTION("write then read preserves length, rate and values") {
    ftfd::Rng rng(3);
    std::vector<double> s(5000);
    for (auto& v : s) v = rng.uniform(-0.99, 0.99);
    const auto path = dir / "t.wav";
    ftfd::write_wav(path, s, 16000);
    ftfd::WavData r = ftfd::read_wav(path);
    CHECK(r.sample_rate == 16000);
    REQUIRE(r.samples.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      // write scales by 32767, read divides by 32768: error <= 1.5/32768
      REQUIRE(std::fabs(r.samples[i] - s[i]) < 1.5 / 32768.0);
    }
  }

  SECTION("non-WAV file errors mention the file") {
    const auto path = dir / "bad.wav";
    std::ofstream f(path);
    f << "this is not audio";
    f.close();
    try {
      ftfd::read_wav(path);
      FAIL("expected DataError");
    } catch (const ftfd::DataError& e) {
      CHECK(std::string(e.what()).find("bad.wav") != std::string::npos);
    }
  }
  std::filesystem::remove_all(dir);
}
