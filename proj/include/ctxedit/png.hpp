// Copyright 2026 The ctxedit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal 8-bit PNG encoder (gray or RGB, filter 0, no interlace) and a
// decoder for exactly that subset.

#pragma once

#include <zlib.h>

#include <filesystem>
#include <string>
#include <vector>

#include "ctxedit/checkpoint.hpp"
#include "ctxedit/scene.hpp"

namespace ctxedit {

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 gray, 3 RGB
  std::vector<uint8_t> pixels;  // row-major, interleaved
};

namespace png_detail {

inline constexpr char kSignature[8] = {'\x89', 'P', 'N', 'G', '\r', '\n', '\x1a', '\n'};

inline void put_be32(std::string& out, uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xFF));
}

inline uint32_t get_be32(const std::string& in, size_t at) {
  require(at + 4 <= in.size(), "png truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<uint8_t>(in[at + static_cast<size_t>(i)]);
  return v;
}

inline void chunk(std::string& out, const char type[4], const std::string& data) {
  put_be32(out, static_cast<uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_be32(out, static_cast<uint32_t>(crc32(0, reinterpret_cast<const Bytef*>(body.data()),
                                            static_cast<uInt>(body.size()))));
}

}  // namespace png_detail

inline std::string encode_png(const PngImage& img) {
  require(img.width > 0 && img.height > 0, "png: empty image");
  require(img.channels == 1 || img.channels == 3, "png: channels must be 1 or 3");
  const size_t stride = static_cast<size_t>(img.width) * static_cast<size_t>(img.channels);
  require(img.pixels.size() == stride * static_cast<size_t>(img.height), "png: pixel buffer size mismatch");

  std::string raw;
  raw.reserve((stride + 1) * static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(img.pixels.data()) + static_cast<size_t>(y) * stride, stride);
  }
  uLongf size = compressBound(static_cast<uLong>(raw.size()));
  std::string z(size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &size, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw NumericalError("png: deflate failed");
  z.resize(size);

  std::string out(png_detail::kSignature, 8), ihdr;
  png_detail::put_be32(ihdr, static_cast<uint32_t>(img.width));
  png_detail::put_be32(ihdr, static_cast<uint32_t>(img.height));
  ihdr += {8, static_cast<char>(img.channels == 3 ? 2 : 0), 0, 0, 0};
  png_detail::chunk(out, "IHDR", ihdr);
  png_detail::chunk(out, "IDAT", z);
  png_detail::chunk(out, "IEND", "");
  return out;
}

inline PngImage decode_png(const std::string& bytes) {
  require(bytes.size() >= 8 && bytes.compare(0, 8, std::string(png_detail::kSignature, 8)) == 0,
          "not a PNG file");
  PngImage img;
  std::string z;
  bool header = false, end = false;
  size_t at = 8;
  while (!end) {
    const uint32_t len = png_detail::get_be32(bytes, at);
    require(at + 12 + len <= bytes.size(), "png truncated");
    const std::string type = bytes.substr(at + 4, 4);
    const std::string data = bytes.substr(at + 8, len);
    const uint32_t crc = png_detail::get_be32(bytes, at + 8 + len);
    require(crc == crc32(0, reinterpret_cast<const Bytef*>(bytes.data() + at + 4), 4 + len), "png: bad chunk crc");
    if (type == "IHDR") {
      require(len == 13, "png: bad IHDR");
      img.width = static_cast<int>(png_detail::get_be32(data, 0));
      img.height = static_cast<int>(png_detail::get_be32(data, 4));
      require(data[8] == 8 && (data[9] == 0 || data[9] == 2) && data[12] == 0,
              "png: only 8-bit non-interlaced gray or RGB is supported");
      img.channels = data[9] == 2 ? 3 : 1;
      header = true;
    } else if (type == "IDAT") {
      z += data;
    } else if (type == "IEND") {
      end = true;
    }
    at += 12 + len;
  }
  require(header, "png: missing IHDR");
  const size_t stride = static_cast<size_t>(img.width) * static_cast<size_t>(img.channels);
  std::string raw((stride + 1) * static_cast<size_t>(img.height), '\0');
  uLongf size = static_cast<uLongf>(raw.size());
  require(uncompress(reinterpret_cast<Bytef*>(raw.data()), &size, reinterpret_cast<const Bytef*>(z.data()),
                     static_cast<uLong>(z.size())) == Z_OK &&
              size == raw.size(),
          "png: bad image data");
  img.pixels.resize(stride * static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    const size_t row = static_cast<size_t>(y) * (stride + 1);
    require(raw[row] == 0, "png: only filter type 0 is supported");
    std::memcpy(img.pixels.data() + static_cast<size_t>(y) * stride, raw.data() + row + 1, stride);
  }
  return img;
}

inline PngImage to_png(const Frame& f) {
  PngImage img{f.width, f.height, 3, {}};
  img.pixels.reserve(f.pixels.size());
  for (float v : f.pixels) img.pixels.push_back(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return img;
}

/// White where set.
inline PngImage to_png(const Bitmap& m) {
  PngImage img{m.width, m.height, 1, {}};
  for (auto b : m.bits) img.pixels.push_back(b ? 255 : 0);
  return img;
}

inline void write_png(const std::filesystem::path& path, const PngImage& img) {
  detail::write_file(path, encode_png(img));
}

inline PngImage read_png(const std::filesystem::path& path) { return decode_png(detail::read_file(path)); }

}  // namespace ctxedit
