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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ftfd/common.hpp"
#include "ftfd/tensor.hpp"

// Parameter container file.
//
//   magic   "FTFD" (4 bytes)
//   version u32 LE (currently 1)
//   count   u32 LE, number of named tensors
//   per tensor:
//     name_len u32 LE, then UTF-8 name bytes
//     rank     u32 LE
//     extents  rank x u64 LE
//     data     product(extents) x f64 LE (IEEE-754 bit pattern)
//
// Round-trips are bit-exact: doubles are serialized via their bit patterns.

namespace ftfd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n, std::string name)
      : p_(p), n_(n), name_(std::move(name)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string str(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }

  void f64_block(double* dst, std::size_t count) {
    need(count * 8);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int j = 0; j < 8; ++j) {
        bits |= std::uint64_t(p_[pos_ + 8 * i + j]) << (8 * j);
      }
      dst[i] = std::bit_cast<double>(bits);
    }
    pos_ += count * 8;
  }

  bool at_end() const { return pos_ == n_; }

 private:
  void need(std::size_t k) {
    if (pos_ + k > n_) {
      throw DataError(name_ + ": truncated checkpoint file");
    }
  }

  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string name_;
};

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline std::vector<unsigned char> encode_tensors(const NamedTensors& tensors) {
  std::vector<unsigned char> out;
  out.insert(out.end(), {'F', 'T', 'F', 'D'});
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) {
      detail::put_u64(out, static_cast<std::uint64_t>(t.dim(i)));
    }
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      detail::put_u64(out, std::bit_cast<std::uint64_t>(p[i]));
    }
  }
  return out;
}

inline void save_tensors(const std::filesystem::path& path,
                         const NamedTensors& tensors) {
  const std::vector<unsigned char> bytes = encode_tensors(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(path.string() + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError(path.string() + ": write failed");
}

inline NamedTensors decode_tensors(const unsigned char* data, std::size_t len,
                                   const std::string& origin) {
  detail::ByteReader r(data, len, origin);
  if (r.str(4) != "FTFD") {
    throw DataError(origin + ": bad magic, not a parameter file");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(origin + ": unsupported format version " +
                    std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) {
      throw DataError(origin + ": tensor '" + name + "' has invalid rank " +
                      std::to_string(rank));
    }
    std::vector<int> shape(rank);
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t e = r.u64();
      if (e == 0 || e > (1u << 30)) {
        throw DataError(origin + ": tensor '" + name + "' has invalid extent");
      }
      shape[d] = static_cast<int>(e);
      numel *= static_cast<std::int64_t>(e);
    }
    Tensor t(shape);
    r.f64_block(t.data(), static_cast<std::size_t>(numel));
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

inline NamedTensors load_tensors(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path.string() + ": cannot open parameter file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return decode_tensors(bytes.data(), bytes.size(), path.string());
}

inline std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path.string() + ": cannot open for hashing");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

}  // namespace ftfd
