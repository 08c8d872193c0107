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

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ftfd/common.hpp"

// PNG frame I/O (libpng simplified API) and binary PGM export for attention
// maps.

namespace ftfd {

struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;  // interleaved, row-major
};

inline ImageU8 read_png_rgb(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DataError(path.string() + ": cannot read PNG (" +
                    std::string(img.message) + ")");
  }
  img.format = PNG_FORMAT_RGB;
  ImageU8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.rgb.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError(path.string() + ": PNG decode failed (" +
                    std::string(img.message) + ")");
  }
  return out;
}

inline void write_png_rgb(const std::filesystem::path& path,
                          const ImageU8& image) {
  detail::check_arg(
      static_cast<std::size_t>(image.width) * image.height * 3 ==
          image.rgb.size(),
      "write_png_rgb: buffer size does not match extents");
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.rgb.data(),
                               0, nullptr)) {
    throw DataError(path.string() + ": PNG encode failed (" +
                    std::string(img.message) + ")");
  }
}

/// Binary PGM (P5), maxval 255.
inline void write_pgm(const std::filesystem::path& path, int width, int height,
                      const std::vector<unsigned char>& gray) {
  detail::check_arg(
      static_cast<std::size_t>(width) * height == gray.size(),
      "write_pgm: buffer size does not match extents");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(path.string() + ": cannot open for writing");
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(gray.data()),
          static_cast<std::streamsize>(gray.size()));
  if (!f) throw DataError(path.string() + ": write failed");
}

}  // namespace ftfd
