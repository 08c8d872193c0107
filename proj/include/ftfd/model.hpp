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

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ftfd/audio.hpp"
#include "ftfd/checkpoint.hpp"
#include "ftfd/common.hpp"
#include "ftfd/ops.hpp"
#include "ftfd/tensor.hpp"

// The FTFDNet family: a visual branch and an audio branch of five residual
// stages each, optional per-stage spatial attention (audio-visual or
// visual-only), late fusion of the last three stages, and a three-layer
// fully connected head emitting one real/fake logit.

namespace ftfd {

enum class Attention { kNone, kAvam, kCbamSpatial };

inline std::string attention_name(Attention a) {
  switch (a) {
    case Attention::kNone: return "none";
    case Attention::kAvam: return "avam";
    case Attention::kCbamSpatial: return "cbam_spatial";
  }
  return "none";
}

inline Attention attention_from_name(const std::string& s) {
  if (s == "none") return Attention::kNone;
  if (s == "avam") return Attention::kAvam;
  if (s == "cbam_spatial") return Attention::kCbamSpatial;
  throw std::invalid_argument("unknown attention variant '" + s + "'");
}

struct ModelConfig {
  int t = 3;       // frames per clip
  int crop = 96;   // face crop extent
  std::array<int, 5> stage_channels{32, 64, 128, 256, 512};
  std::array<int, 5> stage_strides{1, 2, 2, 2, 2};
  Attention attention = Attention::kNone;
  double dropout_p = 0.5;
  std::array<int, 3> fc_dims{512, 128, 1};
  bool use_visual = true;
  bool use_audio = true;
  int n_mels = 80;
  int mel_steps = kMelGridSteps;

  void validate() const {
    detail::check_arg(t >= 1, "ModelConfig: t must be >= 1");
    detail::check_arg(crop >= 8, "ModelConfig: crop must be >= 8");
    for (int c : stage_channels) {
      detail::check_arg(c >= 1, "ModelConfig: stage channels must be >= 1");
    }
    for (int s : stage_strides) {
      detail::check_arg(s >= 1, "ModelConfig: stage strides must be >= 1");
    }
    detail::check_arg(fc_dims[2] == 1,
                      "ModelConfig: the FC chain must end in a single logit");
    detail::check_arg(dropout_p >= 0.0 && dropout_p < 1.0,
                      "ModelConfig: dropout_p must be in [0,1)");
    detail::check_arg(use_visual || use_audio,
                      "ModelConfig: at least one branch must be enabled");
    if (attention != Attention::kNone) {
      detail::check_arg(use_visual && use_audio,
                        "ModelConfig: attention variants need both branches");
    }
  }

  /// Width of the fused feature vector entering the FC head: global-average
  /// pooled stages 3..5 of every enabled branch.
  int fused_dim() const {
    const int per_branch =
        stage_channels[2] + stage_channels[3] + stage_channels[4];
    return per_branch * (static_cast<int>(use_visual) + static_cast<int>(use_audio));
  }
};

/// Maps a CLI variant name onto a branch/attention configuration.
inline ModelConfig config_for_variant(const std::string& variant,
                                      ModelConfig base = ModelConfig{}) {
  if (variant == "audio") {
    base.use_visual = false;
    base.use_audio = true;
    base.attention = Attention::kNone;
  } else if (variant == "visual") {
    base.use_visual = true;
    base.use_audio = false;
    base.attention = Attention::kNone;
  } else if (variant == "ftfdnet") {
    base.use_visual = base.use_audio = true;
    base.attention = Attention::kNone;
  } else if (variant == "ftfdnet-avam") {
    base.use_visual = base.use_audio = true;
    base.attention = Attention::kAvam;
  } else if (variant == "ftfdnet-cbam") {
    base.use_visual = base.use_audio = true;
    base.attention = Attention::kCbamSpatial;
  } else {
    throw std::invalid_argument("unknown variant '" + variant + "'");
  }
  return base;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"t", c.t},
                     {"crop", c.crop},
                     {"stage_channels", c.stage_channels},
                     {"stage_strides", c.stage_strides},
                     {"attention", attention_name(c.attention)},
                     {"dropout_p", c.dropout_p},
                     {"fc_dims", c.fc_dims},
                     {"use_visual", c.use_visual},
                     {"use_audio", c.use_audio},
                     {"n_mels", c.n_mels},
                     {"mel_steps", c.mel_steps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.t = j.value("t", c.t);
  c.crop = j.value("crop", c.crop);
  if (j.contains("stage_channels")) {
    j.at("stage_channels").get_to(c.stage_channels);
  }
  if (j.contains("stage_strides")) j.at("stage_strides").get_to(c.stage_strides);
  if (j.contains("attention")) {
    c.attention = attention_from_name(j.at("attention").get<std::string>());
  }
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  if (j.contains("fc_dims")) j.at("fc_dims").get_to(c.fc_dims);
  c.use_visual = j.value("use_visual", c.use_visual);
  c.use_audio = j.value("use_audio", c.use_audio);
  c.n_mels = j.value("n_mels", c.n_mels);
  c.mel_steps = j.value("mel_steps", c.mel_steps);
}

struct ConvLayer {
  Tensor w, b;
  bool defined() const { return w.defined(); }
};

/// Two 3x3 conv+BN+ReLU layers with an identity (or 1x1 projected) shortcut.
/// The first conv carries the stage stride.
struct ResidualStage {
  ConvLayer conv1, conv2;
  BatchNorm bn1, bn2;
  ConvLayer proj;  // undefined tensors when the shortcut is the identity
  int stride = 1;
};

using Branch = std::array<ResidualStage, 5>;

/// The three 7x7 convolutions of one attention instance. The CBAM-spatial
/// variant only uses the fusing conv; avg/max stay undefined there.
struct AttentionParams {
  ConvLayer avg, max, fuse;
};

struct FcLayer {
  Tensor w, b;
};

struct FTFDModel {
  ModelConfig config;
  std::optional<Branch> visual;
  std::optional<Branch> audio;
  std::optional<Branch> siamese;  // audio-attention path, visual-shaped input
  std::vector<AttentionParams> attention;  // one per stage when enabled
  std::array<FcLayer, 3> fc;

  /// Trainable tensors in a fixed order (drives init, Adam and checkpoints).
  std::vector<std::pair<std::string, Tensor>> named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add_branch = [&](const char* prefix, std::optional<Branch>& br) {
      if (!br) return;
      for (int s = 0; s < 5; ++s) {
        ResidualStage& st = (*br)[s];
        const std::string p = std::string(prefix) + ".s" + std::to_string(s);
        out.emplace_back(p + ".conv1.w", st.conv1.w);
        out.emplace_back(p + ".conv1.b", st.conv1.b);
        out.emplace_back(p + ".bn1.gamma", st.bn1.gamma);
        out.emplace_back(p + ".bn1.beta", st.bn1.beta);
        out.emplace_back(p + ".conv2.w", st.conv2.w);
        out.emplace_back(p + ".conv2.b", st.conv2.b);
        out.emplace_back(p + ".bn2.gamma", st.bn2.gamma);
        out.emplace_back(p + ".bn2.beta", st.bn2.beta);
        if (st.proj.defined()) {
          out.emplace_back(p + ".proj.w", st.proj.w);
          out.emplace_back(p + ".proj.b", st.proj.b);
        }
      }
    };
    add_branch("visual", visual);
    add_branch("siamese", siamese);
    add_branch("audio", audio);
    for (std::size_t s = 0; s < attention.size(); ++s) {
      const std::string p = "attn.s" + std::to_string(s);
      if (attention[s].avg.defined()) {
        out.emplace_back(p + ".avg.w", attention[s].avg.w);
        out.emplace_back(p + ".avg.b", attention[s].avg.b);
        out.emplace_back(p + ".max.w", attention[s].max.w);
        out.emplace_back(p + ".max.b", attention[s].max.b);
      }
      out.emplace_back(p + ".fuse.w", attention[s].fuse.w);
      out.emplace_back(p + ".fuse.b", attention[s].fuse.b);
    }
    for (int i = 0; i < 3; ++i) {
      out.emplace_back("fc." + std::to_string(i) + ".w", fc[i].w);
      out.emplace_back("fc." + std::to_string(i) + ".b", fc[i].b);
    }
    return out;
  }

  /// Parameters plus batch-norm running statistics (checkpoint contents).
  std::vector<std::pair<std::string, Tensor>> named_state() {
    auto out = named_parameters();
    auto add_branch = [&](const char* prefix, std::optional<Branch>& br) {
      if (!br) return;
      for (int s = 0; s < 5; ++s) {
        ResidualStage& st = (*br)[s];
        const std::string p = std::string(prefix) + ".s" + std::to_string(s);
        out.emplace_back(p + ".bn1.running_mean", st.bn1.running_mean);
        out.emplace_back(p + ".bn1.running_var", st.bn1.running_var);
        out.emplace_back(p + ".bn2.running_mean", st.bn2.running_mean);
        out.emplace_back(p + ".bn2.running_var", st.bn2.running_var);
      }
    };
    add_branch("visual", visual);
    add_branch("siamese", siamese);
    add_branch("audio", audio);
    return out;
  }
};

namespace detail {

inline ResidualStage make_stage(int in_ch, int out_ch, int stride) {
  ResidualStage st;
  st.stride = stride;
  st.conv1.w = Tensor::zeros({out_ch, in_ch, 3, 3}, true);
  st.conv1.b = Tensor::zeros({out_ch}, true);
  st.bn1 = BatchNorm::create(out_ch);
  st.conv2.w = Tensor::zeros({out_ch, out_ch, 3, 3}, true);
  st.conv2.b = Tensor::zeros({out_ch}, true);
  st.bn2 = BatchNorm::create(out_ch);
  if (in_ch != out_ch || stride != 1) {
    st.proj.w = Tensor::zeros({out_ch, in_ch, 1, 1}, true);
    st.proj.b = Tensor::zeros({out_ch}, true);
  }
  return st;
}

inline Branch make_branch(const ModelConfig& c, int input_channels) {
  Branch br;
  int in_ch = input_channels;
  for (int s = 0; s < 5; ++s) {
    br[s] = make_stage(in_ch, c.stage_channels[s], c.stage_strides[s]);
    in_ch = c.stage_channels[s];
  }
  return br;
}

}  // namespace detail

/// Builds the parameter skeleton (all weights zero) for a configuration.
inline FTFDModel make_model(const ModelConfig& config) {
  config.validate();
  FTFDModel m;
  m.config = config;
  if (config.use_visual) {
    m.visual = detail::make_branch(config, 3 * config.t);
  }
  if (config.use_audio) {
    m.audio = detail::make_branch(config, 1);
  }
  if (config.attention == Attention::kAvam) {
    m.siamese = detail::make_branch(config, 1);
  }
  if (config.attention != Attention::kNone) {
    m.attention.resize(5);
    for (int s = 0; s < 5; ++s) {
      if (config.attention == Attention::kAvam) {
        m.attention[s].avg.w = Tensor::zeros({1, 2, 7, 7}, true);
        m.attention[s].avg.b = Tensor::zeros({1}, true);
        m.attention[s].max.w = Tensor::zeros({1, 2, 7, 7}, true);
        m.attention[s].max.b = Tensor::zeros({1}, true);
      }
      m.attention[s].fuse.w = Tensor::zeros({1, 2, 7, 7}, true);
      m.attention[s].fuse.b = Tensor::zeros({1}, true);
    }
  }
  int in_dim = config.fused_dim();
  for (int i = 0; i < 3; ++i) {
    m.fc[i].w = Tensor::zeros({config.fc_dims[i], in_dim}, true);
    m.fc[i].b = Tensor::zeros({config.fc_dims[i]}, true);
    in_dim = config.fc_dims[i];
  }
  return m;
}

/// Kaiming-style uniform init: weights ~ U(-b, b) with b = sqrt(6/fan_in),
/// biases zero, BN gamma=1/beta=0. Deterministic under the seed.
inline FTFDModel init_parameters(const ModelConfig& config,
                                 std::uint64_t seed) {
  FTFDModel m = make_model(config);
  Rng rng(seed);
  for (auto& [name, t] : m.named_parameters()) {
    if (name.ends_with(".b") || name.ends_with(".beta")) continue;  // zero
    if (name.ends_with(".gamma")) continue;                         // one
    std::int64_t fan_in = 0;
    if (t.rank() == 4) {
      fan_in = static_cast<std::int64_t>(t.dim(1)) * t.dim(2) * t.dim(3);
    } else if (t.rank() == 2) {
      fan_in = t.dim(1);
    } else {
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      p[i] = rng.uniform(-bound, bound);
    }
  }
  return m;
}

/// One residual stage: conv-BN-ReLU-conv-BN plus shortcut, ReLU after add.
inline Tensor residual_stage(Tape* tape, const Tensor& x, ResidualStage& stage,
                             Mode mode) {
  Tensor y = conv2d(tape, x, stage.conv1.w, stage.conv1.b, stage.stride, 1);
  y = relu(tape, batch_norm(tape, y, stage.bn1, mode));
  y = conv2d(tape, y, stage.conv2.w, stage.conv2.b, 1, 1);
  y = batch_norm(tape, y, stage.bn2, mode);
  Tensor shortcut =
      stage.proj.defined()
          ? conv2d(tape, x, stage.proj.w, stage.proj.b, stage.stride, 0)
          : x;
  return relu(tape, add(tape, y, shortcut));
}

/// Audio-visual spatial attention: channel-pooled descriptors of both
/// feature maps, two 7x7 convs + sigmoid, concat, fusing 7x7 conv + sigmoid.
/// Returns the attended visual features and the [B,1,H,W] map.
inline std::pair<Tensor, Tensor> avam(Tape* tape, const Tensor& f_v,
                                      const Tensor& f_a,
                                      const AttentionParams& p) {
  detail::require_rank(f_v, 4, "avam visual features");
  detail::require_rank(f_a, 4, "avam audio features");
  detail::check_arg(f_v.dim(0) == f_a.dim(0) && f_v.dim(2) == f_a.dim(2) &&
                        f_v.dim(3) == f_a.dim(3),
                    "avam: spatial extents differ, visual " + f_v.shape_str() +
                        " vs audio " + f_a.shape_str());
  Tensor f_avg = concat_channels(tape, channel_avg_pool(tape, f_v),
                                 channel_avg_pool(tape, f_a));
  Tensor f_max = concat_channels(tape, channel_max_pool(tape, f_v),
                                 channel_max_pool(tape, f_a));
  Tensor d_avg = sigmoid(tape, conv2d(tape, f_avg, p.avg.w, p.avg.b, 1, 3));
  Tensor d_max = sigmoid(tape, conv2d(tape, f_max, p.max.w, p.max.b, 1, 3));
  Tensor fused = concat_channels(tape, d_avg, d_max);
  Tensor m = sigmoid(tape, conv2d(tape, fused, p.fuse.w, p.fuse.b, 1, 3));
  return {mul_broadcast(tape, f_v, m), m};
}

/// Spatial-only attention over the visual features alone: one 7x7 conv on
/// concat(avg-pool, max-pool) followed by sigmoid.
inline std::pair<Tensor, Tensor> cbam_spatial(Tape* tape, const Tensor& f_v,
                                              const AttentionParams& p) {
  detail::require_rank(f_v, 4, "cbam_spatial features");
  Tensor desc = concat_channels(tape, channel_avg_pool(tape, f_v),
                                channel_max_pool(tape, f_v));
  Tensor m = sigmoid(tape, conv2d(tape, desc, p.fuse.w, p.fuse.b, 1, 3));
  return {mul_broadcast(tape, f_v, m), m};
}

struct ForwardResult {
  Tensor logit;                   // [B,1]
  std::vector<Tensor> attn_maps;  // 5 maps when attention is enabled
};

/// Full forward pass. `visual` is T frames stacked along channels,
/// `audio_mel` the fixed-size log-mel grid, `audio_attn` the spectrogram
/// resized to crop size (AVAM only). Unused inputs may be undefined tensors
/// and are never touched.
inline ForwardResult forward(FTFDModel& model, Tape* tape, const Tensor& visual,
                             const Tensor& audio_mel, const Tensor& audio_attn,
                             Mode mode, Rng* dropout_rng) {
  const ModelConfig& cfg = model.config;
  int batch = -1;
  if (cfg.use_visual) {
    detail::check_arg(visual.defined() && visual.rank() == 4,
                      "forward: visual input required for this variant");
    detail::check_arg(
        visual.dim(1) == 3 * cfg.t && visual.dim(2) == cfg.crop &&
            visual.dim(3) == cfg.crop,
        "forward: visual input " + visual.shape_str() + " does not match T=" +
            std::to_string(cfg.t) + ", crop=" + std::to_string(cfg.crop));
    batch = visual.dim(0);
  }
  if (cfg.use_audio) {
    detail::check_arg(audio_mel.defined() && audio_mel.rank() == 4,
                      "forward: audio input required for this variant");
    detail::check_arg(audio_mel.dim(1) == 1 && audio_mel.dim(2) == cfg.n_mels &&
                          audio_mel.dim(3) == cfg.mel_steps,
                      "forward: audio input " + audio_mel.shape_str() +
                          " does not match the " + std::to_string(cfg.n_mels) +
                          "x" + std::to_string(cfg.mel_steps) + " mel grid");
    detail::check_arg(batch == -1 || audio_mel.dim(0) == batch,
                      "forward: batch mismatch between inputs");
    batch = audio_mel.dim(0);
  }
  if (cfg.attention == Attention::kAvam) {
    detail::check_arg(audio_attn.defined() && audio_attn.rank() == 4 &&
                          audio_attn.dim(1) == 1 &&
                          audio_attn.dim(2) == cfg.crop &&
                          audio_attn.dim(3) == cfg.crop &&
                          audio_attn.dim(0) == batch,
                      "forward: avam needs the crop-sized audio map");
  }
  if (mode == Mode::kTrain && cfg.dropout_p > 0.0) {
    detail::check_arg(dropout_rng != nullptr,
                      "forward: train mode needs a dropout RNG");
  }
  Rng unused_rng(0);
  Rng& rng = dropout_rng ? *dropout_rng : unused_rng;

  ForwardResult result;

  // Siamese audio path first: its per-stage features feed the attention at
  // the matching visual stage.
  std::array<Tensor, 5> siam_feats;
  if (cfg.attention == Attention::kAvam) {
    Tensor a = audio_attn;
    for (int s = 0; s < 5; ++s) {
      a = residual_stage(tape, a, (*model.siamese)[s], mode);
      siam_feats[s] = a;
    }
  }

  std::array<Tensor, 5> visual_stages;
  if (cfg.use_visual) {
    Tensor v = visual;
    for (int s = 0; s < 5; ++s) {
      v = residual_stage(tape, v, (*model.visual)[s], mode);
      if (cfg.attention == Attention::kAvam) {
        auto [attended, map] = avam(tape, v, siam_feats[s], model.attention[s]);
        v = attended;
        result.attn_maps.push_back(map);
      } else if (cfg.attention == Attention::kCbamSpatial) {
        auto [attended, map] = cbam_spatial(tape, v, model.attention[s]);
        v = attended;
        result.attn_maps.push_back(map);
      }
      visual_stages[s] = v;
    }
  }

  std::array<Tensor, 5> audio_stages;
  if (cfg.use_audio) {
    Tensor a = audio_mel;
    for (int s = 0; s < 5; ++s) {
      a = residual_stage(tape, a, (*model.audio)[s], mode);
      audio_stages[s] = a;
    }
  }

  // Late fusion: global-average-pooled stages 3..5 of each enabled branch.
  std::vector<Tensor> fused;
  for (int s = 2; s < 5; ++s) {
    if (cfg.use_visual) fused.push_back(global_avg_pool(tape, visual_stages[s]));
    if (cfg.use_audio) fused.push_back(global_avg_pool(tape, audio_stages[s]));
  }
  Tensor h = concat_features(tape, fused);

  h = relu(tape, fully_connected(tape, h, model.fc[0].w, model.fc[0].b));
  h = dropout(tape, h, cfg.dropout_p, mode, rng);
  h = relu(tape, fully_connected(tape, h, model.fc[1].w, model.fc[1].b));
  h = dropout(tape, h, cfg.dropout_p, mode, rng);
  result.logit = fully_connected(tape, h, model.fc[2].w, model.fc[2].b);
  return result;
}

/// Fake probability for one clip: sigmoid of the eval-mode logit.
inline double predict(FTFDModel& model, const Tensor& visual,
                      const Tensor& audio_mel, const Tensor& audio_attn) {
  ForwardResult r =
      forward(model, nullptr, visual, audio_mel, audio_attn, Mode::kEval,
              nullptr);
  return sigmoid_value(r.logit.data()[0]);
}

/// Decision rule: probability >= 0.5 is reported fake (ties break to fake).
inline int predicted_label(double probability) {
  return probability >= 0.5 ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: tensor container plus a JSON sidecar with the config.
// ---------------------------------------------------------------------------

inline void save_model(const std::filesystem::path& path, FTFDModel& model) {
  save_tensors(path, model.named_state());
  nlohmann::json j;
  j["format"] = 1;
  j["model"] = model.config;
  std::ofstream f(path.string() + ".json", std::ios::trunc);
  if (!f) throw DataError(path.string() + ".json: cannot write sidecar");
  f << j.dump(2) << "\n";
}

inline FTFDModel load_model(const std::filesystem::path& path) {
  const std::filesystem::path sidecar(path.string() + ".json");
  std::ifstream f(sidecar);
  if (!f) {
    throw DataError(sidecar.string() + ": missing model config sidecar");
  }
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(sidecar.string() + ": bad JSON: " + e.what());
  }
  ModelConfig cfg = j.at("model").get<ModelConfig>();
  FTFDModel model = make_model(cfg);
  NamedTensors stored = load_tensors(path);
  std::map<std::string, Tensor> by_name(stored.begin(), stored.end());
  for (auto& [name, t] : model.named_state()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw DataError(path.string() + ": checkpoint is missing tensor '" +
                      name + "'");
    }
    if (it->second.shape() != t.shape()) {
      throw DataError(path.string() + ": tensor '" + name + "' has shape " +
                      it->second.shape_str() + ", expected " + t.shape_str());
    }
    std::copy(it->second.data(), it->second.data() + t.numel(), t.data());
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw DataError(path.string() + ": checkpoint has unexpected tensor '" +
                    by_name.begin()->first + "'");
  }
  return model;
}

}  // namespace ftfd
