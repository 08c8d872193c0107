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

#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "ftfd/common.hpp"
#include "ftfd/tensor.hpp"

// Audio frontend: PCM windows aligned to video frames, log-mel spectrograms,
// and the bilinear resize that matches the spectrogram to the face-crop
// size. Everything here is a pure function of its inputs.

namespace ftfd {

// Wav2Lip-compatible defaults: 16 kHz mono, 800-point Hann STFT with hop
// 200, 80 mel bins spanning 55-7600 Hz, natural log floored at -10.
struct MelParams {
  int sample_rate = 16000;
  int n_fft = 800;
  int hop = 200;
  int n_mels = 80;
  double fmin = 55.0;
  double fmax = 7600.0;
  double log_floor = -10.0;
};

inline constexpr int kVideoFps = 25;
inline constexpr int kMelGridSteps = 96;  // fixed time extent of the branch input

/// PCM slice covering video frames [first_frame, first_frame + num_frames).
struct AudioWindow {
  std::vector<double> samples;
  int sample_rate = 16000;
  int first_frame = 0;
  int num_frames = 0;
};

/// Log-mel energies [1, n_mels, n_steps] plus, when produced for a clip, the
/// variant resized to the face-crop extents.
struct Spectrogram {
  Tensor mels;
  Tensor resized;
};

/// Sample range [start, end) for frames [t, t+T), clamped to stream_len.
inline std::pair<std::int64_t, std::int64_t> align_window(
    int video_fps, int frame_index, int t_frames, int sample_rate,
    std::int64_t stream_len, int n_fft = 800) {
  detail::check_arg(video_fps > 0 && t_frames > 0 && sample_rate > 0,
                    "align_window: fps, T and sample_rate must be positive");
  detail::check_arg(frame_index >= 0, "align_window: negative frame index");
  const std::int64_t start =
      static_cast<std::int64_t>(frame_index) * sample_rate / video_fps;
  std::int64_t end = static_cast<std::int64_t>(frame_index + t_frames) *
                     sample_rate / video_fps;
  if (start >= stream_len) {
    throw DataError("align_window: frame " + std::to_string(frame_index) +
                    " starts at sample " + std::to_string(start) +
                    " beyond stream of " + std::to_string(stream_len) +
                    " samples");
  }
  end = std::min(end, stream_len);
  if (end - start < n_fft) {
    throw DataError("align_window: only " + std::to_string(end - start) +
                    " samples remain for frame " + std::to_string(frame_index) +
                    ", need at least " + std::to_string(n_fft));
  }
  return {start, end};
}

inline AudioWindow make_window(const std::vector<double>& stream,
                               int sample_rate, int frame_index, int t_frames,
                               int video_fps = kVideoFps, int n_fft = 800) {
  const auto [start, end] =
      align_window(video_fps, frame_index, t_frames, sample_rate,
                   static_cast<std::int64_t>(stream.size()), n_fft);
  AudioWindow w;
  w.samples.assign(stream.begin() + start, stream.begin() + end);
  w.sample_rate = sample_rate;
  w.first_frame = frame_index;
  w.num_frames = t_frames;
  return w;
}

namespace detail {

// Precomputed DFT tables for one (n_fft) size. n_fft=800 gives 401 one-sided
// bins; a table-driven direct transform is plenty at window scale.
struct DftTables {
  int n_fft;
  int n_bins;
  std::vector<double> window;  // periodic Hann
  std::vector<double> cos_t;   // [n_bins][n_fft]
  std::vector<double> sin_t;

  explicit DftTables(int n) : n_fft(n), n_bins(n / 2 + 1) {
    window.resize(n);
    for (int i = 0; i < n; ++i) {
      window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
    }
    cos_t.resize(static_cast<std::size_t>(n_bins) * n);
    sin_t.resize(static_cast<std::size_t>(n_bins) * n);
    for (int k = 0; k < n_bins; ++k) {
      for (int i = 0; i < n; ++i) {
        const double a = 2.0 * M_PI * k * i / n;
        cos_t[static_cast<std::size_t>(k) * n + i] = std::cos(a);
        sin_t[static_cast<std::size_t>(k) * n + i] = std::sin(a);
      }
    }
  }
};

inline const DftTables& dft_tables(int n_fft) {
  static const DftTables t800(800);
  if (n_fft == 800) return t800;
  thread_local std::unique_ptr<DftTables> other;
  if (!other || other->n_fft != n_fft) {
    other = std::make_unique<DftTables>(n_fft);
  }
  return *other;
}

}  // namespace detail

/// One-sided magnitude STFT with a periodic Hann window. Frames start at
/// multiples of `hop`; no center padding. Returns [n_bins, n_steps].
inline Tensor stft_magnitude(const std::vector<double>& samples, int n_fft,
                             int hop) {
  detail::check_arg(static_cast<int>(samples.size()) >= n_fft,
                    "stft: need at least n_fft samples, got " +
                        std::to_string(samples.size()));
  detail::check_arg(hop > 0, "stft: hop must be positive");
  const auto& tab = detail::dft_tables(n_fft);
  const int n_steps =
      static_cast<int>((samples.size() - n_fft) / hop) + 1;
  Tensor out({tab.n_bins, n_steps});
  std::vector<double> frame(n_fft);
  for (int s = 0; s < n_steps; ++s) {
    const double* src = samples.data() + static_cast<std::int64_t>(s) * hop;
    for (int i = 0; i < n_fft; ++i) frame[i] = src[i] * tab.window[i];
    for (int k = 0; k < tab.n_bins; ++k) {
      const double* ct = tab.cos_t.data() + static_cast<std::size_t>(k) * n_fft;
      const double* st = tab.sin_t.data() + static_cast<std::size_t>(k) * n_fft;
      double re = 0.0, im = 0.0;
      for (int i = 0; i < n_fft; ++i) {
        re += frame[i] * ct[i];
        im -= frame[i] * st[i];
      }
      out.data()[static_cast<std::int64_t>(k) * n_steps + s] =
          std::sqrt(re * re + im * im);
    }
  }
  return out;
}

namespace detail {

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) {
  return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
}

// Triangular filters evaluated at FFT bin center frequencies.
struct MelBank {
  int n_mels, n_bins;
  std::vector<double> weights;  // [n_mels][n_bins]

  MelBank(const MelParams& p, int n_bins_) : n_mels(p.n_mels), n_bins(n_bins_) {
    std::vector<double> centers(n_mels + 2);
    const double mel_lo = hz_to_mel(p.fmin);
    const double mel_hi = hz_to_mel(p.fmax);
    for (int i = 0; i < n_mels + 2; ++i) {
      centers[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
    }
    weights.assign(static_cast<std::size_t>(n_mels) * n_bins, 0.0);
    for (int m = 0; m < n_mels; ++m) {
      const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
      for (int k = 0; k < n_bins; ++k) {
        const double f = static_cast<double>(k) * p.sample_rate /
                         (2.0 * (n_bins - 1));
        double w = 0.0;
        if (f > lo && f < mid) {
          w = (f - lo) / (mid - lo);
        } else if (f >= mid && f < hi) {
          w = (hi - f) / (hi - mid);
        }
        weights[static_cast<std::size_t>(m) * n_bins + k] = w;
      }
    }
  }
};

}  // namespace detail

/// Magnitude STFT -> triangular mel filterbank -> natural log with an exact
/// floor: energies at or below e^log_floor map to exactly log_floor.
inline Spectrogram mel_spectrogram(const AudioWindow& window,
                                   const MelParams& p = MelParams{}) {
  detail::check_arg(window.sample_rate == p.sample_rate,
                    "mel_spectrogram: expected sample rate " +
                        std::to_string(p.sample_rate) + ", got " +
                        std::to_string(window.sample_rate));
  if (window.samples.empty()) {
    throw DataError("mel_spectrogram: empty audio window");
  }
  if (static_cast<int>(window.samples.size()) < p.n_fft) {
    throw DataError("mel_spectrogram: window of " +
                    std::to_string(window.samples.size()) +
                    " samples is shorter than n_fft " + std::to_string(p.n_fft));
  }
  for (std::size_t i = 0; i < window.samples.size(); ++i) {
    const double s = window.samples[i];
    if (!(s >= -1.0 && s <= 1.0)) {
      throw DataError("mel_spectrogram: sample " + std::to_string(i) +
                      " = " + std::to_string(s) + " outside [-1,1]");
    }
  }
  Tensor mag = stft_magnitude(window.samples, p.n_fft, p.hop);
  const int n_bins = mag.dim(0);
  const int n_steps = mag.dim(1);
  const detail::MelBank bank(p, n_bins);
  Spectrogram out;
  out.mels = Tensor({1, p.n_mels, n_steps});
  const double floor_energy = std::exp(p.log_floor);
  for (int m = 0; m < p.n_mels; ++m) {
    const double* w = bank.weights.data() + static_cast<std::size_t>(m) * n_bins;
    for (int s = 0; s < n_steps; ++s) {
      double e = 0.0;
      for (int k = 0; k < n_bins; ++k) {
        e += w[k] * mag.data()[static_cast<std::int64_t>(k) * n_steps + s];
      }
      out.mels.data()[static_cast<std::int64_t>(m) * n_steps + s] =
          e <= floor_energy ? p.log_floor : std::log(e);
    }
  }
  return out;
}

/// Bilinear resize of a [1,H,W] map (align_corners=false, edge clamped).
/// Constant inputs map to constant outputs and values never leave the input
/// range.
inline Tensor resize_bilinear(const Tensor& src, int target_h, int target_w) {
  detail::check_arg(src.defined() && src.rank() == 3 && src.dim(0) == 1,
                    "resize_bilinear: expected [1,H,W], got " + src.shape_str());
  detail::check_arg(target_h >= 1 && target_w >= 1,
                    "resize_bilinear: target extents must be positive");
  const int h = src.dim(1), w = src.dim(2);
  Tensor out({1, target_h, target_w});
  const double sy = static_cast<double>(h) / target_h;
  const double sx = static_cast<double>(w) / target_w;
  for (int ty = 0; ty < target_h; ++ty) {
    double fy = (ty + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double ry = fy - y0;
    if (y0 < 0) { y0 = 0; ry = 0.0; }
    if (y0 >= h - 1) { y0 = h - 1; ry = 0.0; }
    const int y1 = std::min(y0 + 1, h - 1);
    for (int tx = 0; tx < target_w; ++tx) {
      double fx = (tx + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double rx = fx - x0;
      if (x0 < 0) { x0 = 0; rx = 0.0; }
      if (x0 >= w - 1) { x0 = w - 1; rx = 0.0; }
      const int x1 = std::min(x0 + 1, w - 1);
      const double v00 = src.data()[static_cast<std::int64_t>(y0) * w + x0];
      const double v01 = src.data()[static_cast<std::int64_t>(y0) * w + x1];
      const double v10 = src.data()[static_cast<std::int64_t>(y1) * w + x0];
      const double v11 = src.data()[static_cast<std::int64_t>(y1) * w + x1];
      // lerp as a + t*(b-a): exact for equal endpoints, so constant fields
      // resize to exactly the same constant.
      const double top = v00 + rx * (v01 - v00);
      const double bot = v10 + rx * (v11 - v10);
      out.data()[static_cast<std::int64_t>(ty) * target_w + tx] =
          top + ry * (bot - top);
    }
  }
  return out;
}

/// Pads (with log_floor) or truncates the mel time axis to `steps` columns:
/// the fixed-size grid the audio branch consumes. [1,M,S] -> [1,M,steps].
inline Tensor mel_to_grid(const Tensor& mels, int steps,
                          double pad_value = -10.0) {
  detail::check_arg(mels.rank() == 3 && mels.dim(0) == 1,
                    "mel_to_grid: expected [1,M,S], got " + mels.shape_str());
  const int m = mels.dim(1), s = mels.dim(2);
  Tensor out = Tensor::full({1, m, steps}, pad_value);
  const int copy = std::min(s, steps);
  for (int mi = 0; mi < m; ++mi) {
    for (int si = 0; si < copy; ++si) {
      out.data()[static_cast<std::int64_t>(mi) * steps + si] =
          mels.data()[static_cast<std::int64_t>(mi) * s + si];
    }
  }
  return out;
}

}  // namespace ftfd
