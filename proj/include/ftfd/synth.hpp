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
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftfd/common.hpp"
#include "ftfd/dataset.hpp"
#include "ftfd/image.hpp"
#include "ftfd/wav.hpp"

// Synthetic audio-visual forgery generator. Every entry renders a schematic
// 96x96 face whose mouth aperture tracks a smoothed envelope; its audio is
// band-limited noise shaped by an envelope of the same kind. REAL entries
// store the audio whose envelope drove the mouth; FAKE entries render the
// same way but store a different entry's audio stream. The visual and audio
// marginal distributions of the two classes are therefore identical, and
// only audio-visual consistency separates them.

namespace ftfd {
namespace synth {

inline constexpr int kMaxFrames = 61;
inline constexpr int kMinFrames = 45;
inline constexpr int kSamplesPerFrame = 640;  // 16 kHz at 25 fps

struct Rect {
  int x0, y0, x1, y1;  // half-open
};

/// Fixed pixel region covering the rendered mouth at any aperture.
inline Rect mouth_region() { return Rect{36, 56, 61, 77}; }

/// Per-entry deterministic recipe: frame count, the full-length envelope
/// (mouth aperture per frame, in [0,1]) and face rendering parameters.
struct EntrySpec {
  int frame_count = 0;
  std::vector<double> envelope;  // kMaxFrames values
  // identity parameters
  double skin_r, skin_g, skin_b;
  double face_rx, face_ry;
  double eye_y, eye_dx, eye_r;
  double bg_r, bg_g, bg_b;
};

inline EntrySpec entry_spec(std::uint64_t seed, int index) {
  Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(index) * 4 + 0);
  EntrySpec s;
  s.frame_count = kMinFrames + static_cast<int>(rng.uniform_int(
                                   kMaxFrames - kMinFrames + 1));
  std::vector<double> raw(kMaxFrames);
  for (auto& v : raw) v = rng.uniform();
  // two smoothing passes with a [0.25, 0.5, 0.25] kernel, reflected ends
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<double> next(kMaxFrames);
    for (int i = 0; i < kMaxFrames; ++i) {
      const double l = raw[i == 0 ? 1 : i - 1];
      const double r = raw[i == kMaxFrames - 1 ? kMaxFrames - 2 : i + 1];
      next[i] = 0.25 * l + 0.5 * raw[i] + 0.25 * r;
    }
    raw.swap(next);
  }
  double lo = raw[0], hi = raw[0];
  for (double v : raw) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  s.envelope.resize(kMaxFrames);
  for (int i = 0; i < kMaxFrames; ++i) {
    s.envelope[i] = (raw[i] - lo) / (hi - lo + 1e-12);
  }
  s.skin_r = rng.uniform(150, 220);
  s.skin_g = rng.uniform(110, 180);
  s.skin_b = rng.uniform(90, 160);
  s.face_rx = rng.uniform(27, 33);
  s.face_ry = rng.uniform(35, 41);
  s.eye_y = rng.uniform(36, 40);
  s.eye_dx = rng.uniform(11, 15);
  s.eye_r = rng.uniform(2.5, 4.0);
  s.bg_r = rng.uniform(25, 60);
  s.bg_g = rng.uniform(25, 60);
  s.bg_b = rng.uniform(35, 75);
  return s;
}

/// Band-limited noise shaped by `spec`'s envelope, cut to `frames` video
/// frames and peak-normalized to 0.89. Deterministic per (seed, index,
/// frames).
inline std::vector<double> entry_audio(std::uint64_t seed, int index,
                                       const EntrySpec& spec, int frames) {
  Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(index) * 4 + 1);
  const std::int64_t n = static_cast<std::int64_t>(frames) * kSamplesPerFrame;
  std::vector<double> out(n);
  double lp = 0.0, prev = 0.0;
  double peak = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    // one-pole lowpass then first difference: a rough speech-band shape
    lp = 0.75 * lp + 0.25 * rng.normal();
    const double band = lp - prev;
    prev = lp;
    const double pos = static_cast<double>(i) / kSamplesPerFrame;
    const int f0 = std::min(static_cast<int>(pos), frames - 1);
    const int f1 = std::min(f0 + 1, frames - 1);
    const double frac = pos - f0;
    const double env =
        spec.envelope[f0] + frac * (spec.envelope[f1] - spec.envelope[f0]);
    out[i] = band * env;
    peak = std::max(peak, std::fabs(out[i]));
  }
  const double scale = peak > 0.0 ? 0.89 / peak : 0.0;
  for (auto& v : out) v *= scale;
  return out;
}

namespace detail_render {

// Soft-edged ellipse coverage in [0,1]; ~1px feather.
inline double ellipse_cov(double x, double y, double cx, double cy, double rx,
                          double ry) {
  const double dx = (x - cx) / rx;
  const double dy = (y - cy) / ry;
  const double d = std::sqrt(dx * dx + dy * dy);
  const double edge = (1.0 - d) * std::min(rx, ry);
  return std::min(1.0, std::max(0.0, edge + 0.5));
}

inline void blend(double* px, double cov, double r, double g, double b) {
  px[0] += cov * (r - px[0]);
  px[1] += cov * (g - px[1]);
  px[2] += cov * (b - px[2]);
}

}  // namespace detail_render

/// Renders one 96x96 frame of the schematic face at mouth aperture
/// `a` in [0,1]. Pure function of (spec, a).
inline ImageU8 render_frame(const EntrySpec& spec, double a) {
  using detail_render::blend;
  using detail_render::ellipse_cov;
  const int n = kCropSize;
  std::vector<double> buf(static_cast<std::size_t>(n) * n * 3);
  const double mouth_ry = 1.0 + 8.5 * a;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double* px = &buf[(static_cast<std::size_t>(y) * n + x) * 3];
      px[0] = spec.bg_r;
      px[1] = spec.bg_g;
      px[2] = spec.bg_b;
      const double fx = x + 0.5, fy = y + 0.5;
      // face
      blend(px, ellipse_cov(fx, fy, 48, 48, spec.face_rx, spec.face_ry),
            spec.skin_r, spec.skin_g, spec.skin_b);
      // eyes: sclera then pupil
      for (int side = -1; side <= 1; side += 2) {
        const double ex = 48 + side * spec.eye_dx;
        blend(px, ellipse_cov(fx, fy, ex, spec.eye_y, spec.eye_r + 1.2,
                              spec.eye_r),
              235, 235, 235);
        blend(px, ellipse_cov(fx, fy, ex, spec.eye_y, 1.4, 1.4), 40, 35, 35);
      }
      // nose
      blend(px, ellipse_cov(fx, fy, 48, 52, 2.0, 4.5), spec.skin_r * 0.85,
            spec.skin_g * 0.85, spec.skin_b * 0.85);
      // lips ring then mouth opening driven by the aperture
      blend(px, ellipse_cov(fx, fy, 48, 66, 10.5, mouth_ry + 1.8), 150, 70,
            70);
      blend(px, ellipse_cov(fx, fy, 48, 66, 9.0, mouth_ry), 55, 20, 22);
    }
  }
  ImageU8 img;
  img.width = n;
  img.height = n;
  img.rgb.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    img.rgb[i] = static_cast<unsigned char>(
        std::lrint(std::min(255.0, std::max(0.0, buf[i]))));
  }
  return img;
}

/// Donor index for fake entry i: uniform over the other entries.
inline int donor_index(Rng& pair_rng, int i, int count) {
  return static_cast<int>((i + 1 + pair_rng.uniform_int(count - 1)) % count);
}

/// Generates `count` entries under `out_root`, one directory per entry with
/// frames/, audio.wav and meta.json. Even indices are real, odd are fake
/// (balance floor/ceil of count/2). Bit-identical for a given seed.
inline std::vector<std::string> synth_generate(
    const std::filesystem::path& out_root, int count, std::uint64_t seed,
    int fps = kVideoFps) {
  namespace fs = std::filesystem;
  detail::check_arg(count >= 2,
                    "synth_generate: need at least 2 entries to cross-pair");
  detail::check_arg(fps == kVideoFps,
                    "synth_generate: only 25 fps material is produced");
  fs::create_directories(out_root);
  Rng pair_rng = Rng(seed).fork(0xFACEFEEDULL);
  std::vector<std::string> ids;
  ids.reserve(count);
  for (int i = 0; i < count; ++i) {
    const EntrySpec spec = entry_spec(seed, i);
    const bool fake = (i % 2) == 1;
    char name[16];
    std::snprintf(name, sizeof(name), "v%06d", i);
    const fs::path dir = out_root / name;
    fs::create_directories(dir / "frames");

    for (int f = 0; f < spec.frame_count; ++f) {
      write_png_rgb(dir / "frames" / detail::frame_file_name(f),
                    render_frame(spec, spec.envelope[f]));
    }

    std::vector<double> audio;
    int donor = i;
    if (fake) {
      donor = donor_index(pair_rng, i, count);
      const EntrySpec donor_spec = entry_spec(seed, donor);
      audio = entry_audio(seed, donor, donor_spec, spec.frame_count);
    } else {
      audio = entry_audio(seed, i, spec, spec.frame_count);
    }
    write_wav(dir / "audio.wav", audio, 16000);

    nlohmann::json meta{{"id", name},
                        {"label", fake ? 1 : 0},
                        {"generator", fake ? "synthetic" : "none"},
                        {"fps", fps},
                        {"frame_count", spec.frame_count}};
    if (fake) meta["audio_donor"] = donor;
    std::ofstream mf(dir / "meta.json", std::ios::trunc);
    if (!mf) throw DataError((dir / "meta.json").string() + ": cannot write");
    mf << meta.dump(2) << "\n";
    ids.push_back(name);
  }
  return ids;
}

/// Per-frame RMS of an audio stream: the envelope estimate used by the
/// generator's consistency checks.
inline std::vector<double> frame_rms(const std::vector<double>& samples,
                                     int frames) {
  std::vector<double> out(frames, 0.0);
  for (int f = 0; f < frames; ++f) {
    double acc = 0.0;
    int n = 0;
    for (int i = f * kSamplesPerFrame;
         i < (f + 1) * kSamplesPerFrame &&
         i < static_cast<int>(samples.size());
         ++i) {
      acc += samples[i] * samples[i];
      ++n;
    }
    out[f] = n > 0 ? std::sqrt(acc / n) : 0.0;
  }
  return out;
}

}  // namespace synth
}  // namespace ftfd
