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
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ftfd/common.hpp"

// RIFF/WAVE PCM reader and writer, 16-bit mono only. Errors name the
// offending file and property.

namespace ftfd {

struct WavData {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 0;
};

namespace detail {

inline std::uint32_t rd_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline std::uint16_t rd_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

inline WavData read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path.string() + ": cannot open WAV file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError(name + ": not a RIFF/WAVE file");
  }
  int channels = 0, bits = 0, sample_rate = 0, format = 0;
  bool have_fmt = false;
  const unsigned char* data_chunk = nullptr;
  std::uint32_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const std::uint32_t len = detail::rd_u32le(bytes.data() + pos + 4);
    if (pos + 8 + len > bytes.size()) {
      throw DataError(name + ": truncated chunk '" + std::string(id, 4) + "'");
    }
    const unsigned char* body = bytes.data() + pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) throw DataError(name + ": fmt chunk too short");
      format = detail::rd_u16le(body);
      channels = detail::rd_u16le(body + 2);
      sample_rate = static_cast<int>(detail::rd_u32le(body + 4));
      bits = detail::rd_u16le(body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_chunk = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1);  // chunks are word-aligned
  }
  if (!have_fmt) throw DataError(name + ": missing fmt chunk");
  if (data_chunk == nullptr) throw DataError(name + ": missing data chunk");
  if (format != 1) throw DataError(name + ": not PCM (format tag " +
                                   std::to_string(format) + ")");
  if (channels != 1) throw DataError(name + ": expected mono, got " +
                                     std::to_string(channels) + " channels");
  if (bits != 16) throw DataError(name + ": expected 16-bit samples, got " +
                                  std::to_string(bits));
  WavData out;
  out.sample_rate = sample_rate;
  const std::size_t n = data_len / 2;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int16_t v = static_cast<std::int16_t>(
        detail::rd_u16le(data_chunk + 2 * i));
    out.samples[i] = static_cast<double>(v) / 32768.0;
  }
  return out;
}

inline void write_wav(const std::filesystem::path& path,
                      const std::vector<double>& samples, int sample_rate) {
  std::vector<unsigned char> out;
  const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 2);
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  };
  auto put_u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>(v >> 8));
  };
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E'});
  out.insert(out.end(), {'f', 'm', 't', ' '});
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(static_cast<std::uint32_t>(sample_rate));
  put_u32(static_cast<std::uint32_t>(sample_rate * 2));  // byte rate
  put_u16(2);   // block align
  put_u16(16);  // bits
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(data_len);
  for (double s : samples) {
    const double c = std::min(1.0, std::max(-1.0, s));
    const std::int16_t v = static_cast<std::int16_t>(std::lrint(c * 32767.0));
    put_u16(static_cast<std::uint16_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(path.string() + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError(path.string() + ": write failed");
}

}  // namespace ftfd
