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

// Parameter checkpoints ("VCKP").
//
//   "VCKP" | u32 version | string config (key=value) | u64 config hash
//   | u32 tensor count | per tensor, name-sorted:
//       string name | u32 rows | u32 cols | rows*cols f32
//   | u64 fnv1a of every preceding byte
//
// Strings are u32 length + bytes; everything is little-endian.

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ctxedit/common.hpp"
#include "ctxedit/model.hpp"

namespace ctxedit {

inline constexpr char kCheckpointMagic[4] = {'V', 'C', 'K', 'P'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

/// Name-sorted tensors with element type E on disk.
template <typename E, typename T>
void put_tensors(std::ostream& out, const std::map<std::string, Mat<T>>& tensors) {
  io::put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {  // std::map iterates in name order
    io::put_string(out, name);
    io::put<uint32_t>(out, static_cast<uint32_t>(m.rows()));
    io::put<uint32_t>(out, static_cast<uint32_t>(m.cols()));
    const Mat<E> e = m.template cast<E>();
    io::put_bytes(out, e.data(), sizeof(E) * static_cast<size_t>(e.size()));
  }
}

/// Reads tensors and checks them against `shapes` exactly.
template <typename E, typename T>
std::map<std::string, Mat<T>> get_tensors(std::istream& in, const std::map<std::string, std::pair<int, int>>& shapes) {
  const auto count = io::get<uint32_t>(in);
  require(count == shapes.size(), "tensor count " + std::to_string(count) + " does not match the config");
  std::map<std::string, Mat<T>> out;
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = io::get_string(in, 1024);
    const auto it = shapes.find(name);
    require(it != shapes.end(), "unexpected tensor '" + name + "'");
    const auto rows = io::get<uint32_t>(in);
    const auto cols = io::get<uint32_t>(in);
    require(static_cast<int>(rows) == it->second.first && static_cast<int>(cols) == it->second.second,
            "tensor '" + name + "' has the wrong shape");
    Mat<E> e(rows, cols);
    io::get_bytes(in, e.data(), sizeof(E) * static_cast<size_t>(e.size()));
    require(out.emplace(name, e.template cast<T>()).second, "duplicate tensor '" + name + "'");
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so a crash never leaves a half-written file in place.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), "cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(static_cast<bool>(out), "write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Appends the trailing checksum.
inline std::string seal(std::string body) {
  const uint64_t sum = fnv1a(body);
  body.append(reinterpret_cast<const char*>(&sum), sizeof(sum));
  return body;
}

/// Verifies and strips the trailing checksum.
inline std::string unseal(const std::string& bytes, const std::string& what) {
  require(bytes.size() >= 12, what + " is truncated");
  const std::string body = bytes.substr(0, bytes.size() - 8);
  uint64_t sum = 0;
  std::memcpy(&sum, bytes.data() + body.size(), 8);
  require(sum == fnv1a(body), what + " checksum mismatch (truncated or corrupt)");
  return body;
}

}  // namespace detail

template <typename T>
std::string serialize_params(const ModelParams<T>& params) {
  std::ostringstream out;
  io::put_bytes(out, kCheckpointMagic, 4);
  io::put<uint32_t>(out, kCheckpointVersion);
  io::put_string(out, params.config.to_text());
  io::put<uint64_t>(out, params.config.hash());
  detail::put_tensors<float>(out, params.tensors);
  return detail::seal(out.str());
}

/// `expected`, when given, must match the stored config hash.
template <typename T>
ModelParams<T> deserialize_params(const std::string& bytes, const ModelConfig* expected = nullptr) {
  std::istringstream in(detail::unseal(bytes, "checkpoint"));
  char magic[4];
  io::get_bytes(in, magic, 4);
  require(std::memcmp(magic, kCheckpointMagic, 4) == 0, "not a VCKP checkpoint");
  const auto version = io::get<uint32_t>(in);
  require(version == kCheckpointVersion, "unsupported checkpoint version " + std::to_string(version));
  ModelParams<T> params;
  params.config = ModelConfig::from_text(io::get_string(in, 1 << 16));
  const auto hash = io::get<uint64_t>(in);
  require(hash == params.config.hash(), "checkpoint config hash does not match its config text");
  if (expected) require(hash == expected->hash(), "checkpoint config hash mismatch");
  params.tensors = detail::get_tensors<float, T>(in, param_shapes(params.config));
  require(in.peek() == std::char_traits<char>::eof(), "trailing bytes in checkpoint");
  return params;
}

template <typename T>
void save_params(const std::filesystem::path& path, const ModelParams<T>& params) {
  detail::write_file(path, serialize_params(params));
}

template <typename T>
ModelParams<T> load_params(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  return deserialize_params<T>(detail::read_file(path), expected);
}

}  // namespace ctxedit
