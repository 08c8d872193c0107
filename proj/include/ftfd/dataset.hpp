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

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftfd/audio.hpp"
#include "ftfd/checkpoint.hpp"
#include "ftfd/common.hpp"
#include "ftfd/image.hpp"
#include "ftfd/tensor.hpp"
#include "ftfd/wav.hpp"

// Dataset bookkeeping: per-video manifest entries with a stratified
// train/val/test assignment, and clip loading (T consecutive pre-cropped
// face frames plus the aligned audio spectrogram pair).

namespace ftfd {

inline constexpr int kCropSize = 96;

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}

enum class GeneratorTag { kNone, kWav2lip, kMakeittalk, kPcavs, kSynthetic };

inline const char* generator_name(GeneratorTag g) {
  switch (g) {
    case GeneratorTag::kNone: return "none";
    case GeneratorTag::kWav2lip: return "wav2lip";
    case GeneratorTag::kMakeittalk: return "makeittalk";
    case GeneratorTag::kPcavs: return "pcavs";
    case GeneratorTag::kSynthetic: return "synthetic";
  }
  return "none";
}

inline GeneratorTag generator_from_name(const std::string& s) {
  if (s == "none") return GeneratorTag::kNone;
  if (s == "wav2lip") return GeneratorTag::kWav2lip;
  if (s == "makeittalk") return GeneratorTag::kMakeittalk;
  if (s == "pcavs") return GeneratorTag::kPcavs;
  if (s == "synthetic") return GeneratorTag::kSynthetic;
  throw DataError("unknown generator tag '" + s + "'");
}

struct VideoEntry {
  std::string id;
  std::string frames_dir;  // relative to the manifest directory
  std::string audio_path;  // relative to the manifest directory
  int label = 0;           // 0 real, 1 fake
  GeneratorTag generator = GeneratorTag::kNone;
  double duration_s = 0.0;
  int frame_count = 0;
  Split split = Split::kTrain;
};

struct Manifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::vector<VideoEntry> entries;
  std::filesystem::path base_dir;  // resolved at load/build time

  std::vector<const VideoEntry*> split_entries(Split s) const {
    std::vector<const VideoEntry*> out;
    for (const auto& e : entries) {
      if (e.split == s) out.push_back(&e);
    }
    return out;
  }
};

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["ratios"] = m.ratios;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"id", e.id},
                       {"frames", e.frames_dir},
                       {"audio", e.audio_path},
                       {"label", e.label},
                       {"generator", generator_name(e.generator)},
                       {"duration_s", e.duration_s},
                       {"frame_count", e.frame_count},
                       {"split", split_name(e.split)}});
  }
  j["entries"] = std::move(entries);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(path.string() + ": cannot write manifest");
  f << j.dump(2) << "\n";
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError(path.string() + ": cannot open manifest");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad JSON: " + e.what());
  }
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    j.at("ratios").get_to(m.ratios);
    for (const auto& je : j.at("entries")) {
      VideoEntry e;
      e.id = je.at("id").get<std::string>();
      e.frames_dir = je.at("frames").get<std::string>();
      e.audio_path = je.at("audio").get<std::string>();
      e.label = je.at("label").get<int>();
      e.generator = generator_from_name(je.at("generator").get<std::string>());
      e.duration_s = je.at("duration_s").get<double>();
      e.frame_count = je.at("frame_count").get<int>();
      e.split = split_from_name(je.at("split").get<std::string>());
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad manifest: " + e.what());
  }
  m.base_dir = path.parent_path();
  return m;
}

namespace detail {

inline std::string frame_file_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return std::string(buf);
}

}  // namespace detail

/// Assigns splits stratified by label (optionally label x generator): each
/// group is shuffled under the seed and cut at the cumulative ratio floors,
/// so class balance is preserved within one element per split.
inline void assign_splits(std::vector<VideoEntry>& entries,
                          const std::array<double, 3>& ratios,
                          std::uint64_t seed, bool stratify_by_generator) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  detail::check_arg(std::fabs(sum - 1.0) < 1e-9,
                    "split ratios must sum to 1");
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const int g = stratify_by_generator
                      ? static_cast<int>(entries[i].generator)
                      : 0;
    groups[{entries[i].label, g}].push_back(i);
  }
  Rng rng(seed);
  for (auto& [key, idx] : groups) {
    rng.shuffle(idx);
    const std::size_t n = idx.size();
    const std::size_t n_train = static_cast<std::size_t>(n * ratios[0]);
    const std::size_t n_train_val =
        static_cast<std::size_t>(n * (ratios[0] + ratios[1]));
    for (std::size_t i = 0; i < n; ++i) {
      entries[idx[i]].split = i < n_train          ? Split::kTrain
                              : i < n_train_val    ? Split::kVal
                                                   : Split::kTest;
    }
  }
}

/// Scans `root` for per-video directories (meta.json + frames/ + audio.wav),
/// validates each entry and assigns stratified splits. Invalid entries are
/// skipped; their reasons are appended to `rejects` when given.
inline Manifest build_manifest(const std::filesystem::path& root,
                               const std::array<double, 3>& ratios,
                               std::uint64_t seed,
                               bool stratify_by_generator = false,
                               std::vector<std::string>* rejects = nullptr,
                               int fps = kVideoFps) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) {
    throw DataError(root.string() + ": dataset root is not a directory");
  }
  std::vector<fs::path> dirs;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory()) dirs.push_back(d.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) {
    throw DataError(root.string() + ": no video directories found");
  }

  Manifest m;
  m.seed = seed;
  m.ratios = ratios;
  m.base_dir = root;
  auto reject = [&](const fs::path& dir, const std::string& why) {
    if (rejects) rejects->push_back(dir.filename().string() + ": " + why);
  };

  for (const fs::path& dir : dirs) {
    const fs::path meta_path = dir / "meta.json";
    if (!fs::exists(meta_path)) {
      reject(dir, "missing meta.json");
      continue;
    }
    nlohmann::json meta;
    try {
      std::ifstream f(meta_path);
      f >> meta;
    } catch (const std::exception& e) {
      reject(dir, std::string("unreadable meta.json: ") + e.what());
      continue;
    }
    VideoEntry e;
    try {
      e.id = meta.value("id", dir.filename().string());
      e.label = meta.at("label").get<int>();
      e.generator = generator_from_name(meta.at("generator").get<std::string>());
    } catch (const std::exception& ex) {
      reject(dir, std::string("bad meta.json: ") + ex.what());
      continue;
    }
    if (e.label != 0 && e.label != 1) {
      reject(dir, "label must be 0 or 1");
      continue;
    }
    if ((e.label == 0) != (e.generator == GeneratorTag::kNone)) {
      reject(dir, "label/generator mismatch: real entries must have "
                  "generator 'none' and fake entries must not");
      continue;
    }
    const fs::path frames = dir / "frames";
    const fs::path audio = dir / "audio.wav";
    if (!fs::is_directory(frames)) {
      reject(dir, "missing frames directory");
      continue;
    }
    if (!fs::exists(audio)) {
      reject(dir, "missing audio.wav");
      continue;
    }
    int frame_count = 0;
    while (fs::exists(frames / detail::frame_file_name(frame_count))) {
      ++frame_count;
    }
    if (frame_count == 0) {
      reject(dir, "no frames named 000000.png...");
      continue;
    }
    double audio_secs = 0.0;
    try {
      WavData w = read_wav(audio);
      if (w.sample_rate <= 0) {
        reject(dir, "audio has no sample rate");
        continue;
      }
      audio_secs = static_cast<double>(w.samples.size()) / w.sample_rate;
    } catch (const DataError& ex) {
      reject(dir, ex.what());
      continue;
    }
    e.frame_count = frame_count;
    e.duration_s = static_cast<double>(frame_count) / fps;
    if (e.duration_s < 1.68) {
      reject(dir, "duration " + std::to_string(e.duration_s) +
                      "s below the 1.68s minimum");
      continue;
    }
    if (std::fabs(e.duration_s - audio_secs) > 1.0 / fps) {
      reject(dir, "frame count and audio length differ by more than one "
                  "frame (" + std::to_string(e.duration_s) + "s video vs " +
                  std::to_string(audio_secs) + "s audio)");
      continue;
    }
    e.frames_dir =
        fs::relative(frames, root).generic_string();
    e.audio_path = fs::relative(audio, root).generic_string();
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) {
    throw DataError(root.string() + ": no valid entries survived validation");
  }
  assign_splits(m.entries, ratios, seed, stratify_by_generator);
  return m;
}

// ---------------------------------------------------------------------------
// Clip loading
// ---------------------------------------------------------------------------

/// Which modalities a loader should actually materialize.
struct ClipParts {
  bool visual = true;
  bool mel = true;
  bool resized = true;
};

/// One training/eval unit: T stacked face crops, the aligned spectrogram
/// pair, the label and where it came from.
struct SampleClip {
  Tensor visual;      // [3T, crop, crop]
  Tensor audio_mel;   // [1, n_mels, mel_steps]
  Tensor audio_attn;  // [1, crop, crop]
  int label = 0;
  std::string video_id;
  int start_frame = 0;
};

/// Clip selection scheme. Random draws a start frame from the given RNG;
/// definite always starts at frame n.
struct SampleSpec {
  enum Kind { kRandom, kDefinite } kind = kDefinite;
  int n = 10;
  Rng* rng = nullptr;
};

inline int choose_start(const VideoEntry& entry, const SampleSpec& spec,
                        int t_frames) {
  if (entry.frame_count < t_frames) {
    throw DataError(entry.id + ": needs " + std::to_string(t_frames) +
                    " frames but has only " + std::to_string(entry.frame_count));
  }
  if (spec.kind == SampleSpec::kDefinite) {
    if (entry.frame_count < spec.n + t_frames) {
      throw DataError(entry.id + ": definite(" + std::to_string(spec.n) +
                      ") needs " + std::to_string(spec.n + t_frames) +
                      " frames but has only " +
                      std::to_string(entry.frame_count));
    }
    return spec.n;
  }
  detail::check_arg(spec.rng != nullptr, "random sampling needs an RNG");
  return static_cast<int>(
      spec.rng->uniform_int(entry.frame_count - t_frames + 1));
}

/// Loads the clip starting at `start`: stacks T frames along channels in
/// temporal order and builds the aligned audio window's spectrogram pair.
inline SampleClip load_clip_at(const Manifest& manifest,
                               const VideoEntry& entry, int start, int t_frames,
                               const ClipParts& parts = ClipParts{},
                               int crop = kCropSize) {
  namespace fs = std::filesystem;
  if (start < 0 || start + t_frames > entry.frame_count) {
    throw DataError(entry.id + ": clip [" + std::to_string(start) + "," +
                    std::to_string(start + t_frames) + ") outside " +
                    std::to_string(entry.frame_count) + " frames");
  }
  SampleClip clip;
  clip.label = entry.label;
  clip.video_id = entry.id;
  clip.start_frame = start;

  if (parts.visual) {
    clip.visual = Tensor({3 * t_frames, crop, crop});
    for (int f = 0; f < t_frames; ++f) {
      const fs::path p = manifest.base_dir / entry.frames_dir /
                         detail::frame_file_name(start + f);
      ImageU8 img = read_png_rgb(p);
      if (img.width != crop || img.height != crop) {
        throw DataError(p.string() + ": expected " + std::to_string(crop) +
                        "x" + std::to_string(crop) + " crop, got " +
                        std::to_string(img.width) + "x" +
                        std::to_string(img.height));
      }
      double* dst = clip.visual.data() +
                    static_cast<std::int64_t>(3 * f) * crop * crop;
      for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < crop * crop; ++i) {
          dst[static_cast<std::int64_t>(c) * crop * crop + i] =
              img.rgb[static_cast<std::size_t>(i) * 3 + c] / 255.0;
        }
      }
    }
  }

  if (parts.mel || parts.resized) {
    WavData wav = read_wav(manifest.base_dir / entry.audio_path);
    AudioWindow window =
        make_window(wav.samples, wav.sample_rate, start, t_frames);
    Spectrogram spec = mel_spectrogram(window);
    if (parts.mel) {
      clip.audio_mel = mel_to_grid(spec.mels, kMelGridSteps);
    }
    if (parts.resized) {
      clip.audio_attn = resize_bilinear(spec.mels, crop, crop);
    }
  }
  return clip;
}

inline SampleClip sample_clip(const Manifest& manifest, const VideoEntry& entry,
                              const SampleSpec& spec, int t_frames,
                              const ClipParts& parts = ClipParts{},
                              int crop = kCropSize) {
  return load_clip_at(manifest, entry, choose_start(entry, spec, t_frames),
                      t_frames, parts, crop);
}

// Binary clip serialization: "FTFC" magic, u32 version, u32 label,
// u32 start_frame, u32 id length + id bytes, then the standard tensor
// container holding whichever of visual/audio_mel/audio_attn are present.

inline void save_clip(const std::filesystem::path& path,
                      const SampleClip& clip) {
  std::vector<unsigned char> out;
  out.insert(out.end(), {'F', 'T', 'F', 'C'});
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(clip.label));
  detail::put_u32(out, static_cast<std::uint32_t>(clip.start_frame));
  detail::put_u32(out, static_cast<std::uint32_t>(clip.video_id.size()));
  out.insert(out.end(), clip.video_id.begin(), clip.video_id.end());
  NamedTensors tensors;
  if (clip.visual.defined()) tensors.emplace_back("visual", clip.visual);
  if (clip.audio_mel.defined()) tensors.emplace_back("audio_mel", clip.audio_mel);
  if (clip.audio_attn.defined()) {
    tensors.emplace_back("audio_attn", clip.audio_attn);
  }
  const std::vector<unsigned char> payload = encode_tensors(tensors);
  out.insert(out.end(), payload.begin(), payload.end());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(path.string() + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError(path.string() + ": write failed");
}

inline SampleClip load_clip(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path.string() + ": cannot open clip file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  detail::ByteReader r(bytes.data(), bytes.size(), path.string());
  if (r.str(4) != "FTFC") throw DataError(path.string() + ": bad clip magic");
  const std::uint32_t version = r.u32();
  if (version != 1) {
    throw DataError(path.string() + ": unsupported clip version");
  }
  SampleClip clip;
  clip.label = static_cast<int>(r.u32());
  clip.start_frame = static_cast<int>(r.u32());
  clip.video_id = r.str(r.u32());
  const std::size_t header = 4 + 4 + 4 + 4 + 4 + clip.video_id.size();
  NamedTensors tensors = decode_tensors(bytes.data() + header,
                                        bytes.size() - header, path.string());
  for (auto& [name, t] : tensors) {
    if (name == "visual") {
      clip.visual = t;
    } else if (name == "audio_mel") {
      clip.audio_mel = t;
    } else if (name == "audio_attn") {
      clip.audio_attn = t;
    } else {
      throw DataError(path.string() + ": unexpected tensor '" + name + "'");
    }
  }
  return clip;
}

/// Stacks per-clip tensors into batch tensors (adds the leading batch axis).
struct ClipBatch {
  Tensor visual;
  Tensor audio_mel;
  Tensor audio_attn;
  Tensor labels;  // [B,1]
};

inline ClipBatch stack_clips(const std::vector<SampleClip>& clips) {
  detail::check_arg(!clips.empty(), "stack_clips: empty batch");
  const int b = static_cast<int>(clips.size());
  ClipBatch batch;
  batch.labels = Tensor({b, 1});
  for (int i = 0; i < b; ++i) {
    batch.labels.data()[i] = clips[i].label;
  }
  auto stack = [&](auto get) -> Tensor {
    const Tensor& first = get(clips[0]);
    if (!first.defined()) return Tensor();
    std::vector<int> shape = first.shape();
    shape.insert(shape.begin(), b);
    Tensor out(shape);
    const std::int64_t n = first.numel();
    for (int i = 0; i < b; ++i) {
      const Tensor& t = get(clips[i]);
      detail::check_arg(t.defined() && t.numel() == n,
                        "stack_clips: inconsistent clip shapes");
      std::copy(t.data(), t.data() + n, out.data() + std::int64_t(i) * n);
    }
    return out;
  };
  batch.visual = stack([](const SampleClip& c) -> const Tensor& { return c.visual; });
  batch.audio_mel =
      stack([](const SampleClip& c) -> const Tensor& { return c.audio_mel; });
  batch.audio_attn =
      stack([](const SampleClip& c) -> const Tensor& { return c.audio_attn; });
  return batch;
}

}  // namespace ftfd
