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

#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace ctxedit {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

/// Bad input: out-of-range parameters, malformed files, unknown words.
/// Maps to CLI exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values or other failures discovered while computing.
/// Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
using MatD = Mat<double>;

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

// 64-bit FNV-1a.
/// Shortest text that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline uint64_t fnv1a(const void* data, size_t size, uint64_t hash = 0xcbf29ce484222325ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline uint64_t fnv1a(std::string_view text, uint64_t hash = 0xcbf29ce484222325ULL) {
  return fnv1a(text.data(), text.size(), hash);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tag.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
  return splitmix64(splitmix64(seed) ^ (tag * 0xd1b54a32d192ed03ULL + 1));
}

/// Deterministic random source. Distribution transforms are written out here
/// (instead of std::*_distribution) so that streams are identical across
/// standard library implementations and the full state is serializable.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(static_cast<int64_t>(hi) - lo) + 1;
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % span;
    uint64_t draw = engine_();
    while (draw >= limit) draw = engine_();
    return static_cast<int>(lo + static_cast<int64_t>(draw % span));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (two uniforms per sample, no caching).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::string save() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }

  void load(const std::string& state) {
    std::istringstream in(state);
    in >> engine_;
    if (!in) throw ValidationError("corrupt rng state");
  }

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

// Little-endian binary helpers shared by the file formats.
namespace io {

template <typename V>
void put(std::ostream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V get(std::istream& in) {
  V value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(V))) {
    throw ValidationError("unexpected end of file");
  }
  return value;
}

inline void put_bytes(std::ostream& out, const void* data, size_t size) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

inline void get_bytes(std::istream& in, void* data, size_t size) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  if (in.gcount() != static_cast<std::streamsize>(size)) {
    throw ValidationError("unexpected end of file");
  }
}

inline void put_string(std::ostream& out, std::string_view s) {
  put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

inline std::string get_string(std::istream& in, size_t max_size = 1u << 24) {
  const auto size = get<uint32_t>(in);
  if (size > max_size) throw ValidationError("string field too large");
  std::string s(size, '\0');
  get_bytes(in, s.data(), size);
  return s;
}

}  // namespace io

/// Runs body(i) for i in [0, n) on up to `workers` threads. Indices are
/// strided across threads; callers write results by index, so output does
/// not depend on the worker count. The first exception is rethrown.
inline void parallel_for(size_t n, int workers, const std::function<void(size_t)>& body) {
  require(workers >= 1, "workers must be >= 1");
  const size_t w = std::min(n, static_cast<size_t>(workers));
  if (w <= 1) {
    for (size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(w);
  std::vector<std::thread> pool;
  for (size_t t = 0; t < w; ++t)
    pool.emplace_back([&, t] {
      try {
        for (size_t i = t; i < n; i += w) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace ctxedit
