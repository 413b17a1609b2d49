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

// "VSES" session dataset files. Layout (all integers little-endian):
//
//   char[4]  magic "VSES"
//   u32      version (1)
//   u32      height, u32 width
//   u32      vocabulary size V, then V x (u16 byte length, UTF-8 bytes)
//   u64      vocabulary hash
//   u64      record count N
//   N x record: u64 payload length, payload
//
// Record payload:
//   u64 session id, u64 seed, u8 has_roe, u16 turn count T
//   (T + 1) scene states: u8 object count, then per object
//       i32 id, u8 kind, u8 color, u8 radius, f64 cx, f64 cy, f64 vx, f64 vy
//   (T + 1) frames: H*W*3 u8, row-major RGB, value = round(255 * v)
//   T turns: u16 token count, u16 token ids; when has_roe: source mask then
//       target mask, each ceil(H*W/8) bytes of row-major bits, LSB first

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ctxedit/common.hpp"
#include "ctxedit/synthworld.hpp"

namespace ctxedit {

inline constexpr char kDatasetMagic[4] = {'V', 'S', 'E', 'S'};
inline constexpr uint32_t kDatasetVersion = 1;

namespace detail {

inline uint8_t quantize(float v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_frame(std::ostream& out, const Frame& f) {
  std::vector<uint8_t> bytes(f.pixels.size());
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize(f.pixels[i]);
  io::put_bytes(out, bytes.data(), bytes.size());
}

inline Frame read_frame(std::istream& in, int h, int w) {
  Frame f(h, w);
  std::vector<uint8_t> bytes(f.pixels.size());
  io::get_bytes(in, bytes.data(), bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) f.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return f;
}

inline void write_bits(std::ostream& out, const Bitmap& m) {
  std::vector<uint8_t> packed((m.bits.size() + 7) / 8, 0);
  for (size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i]) packed[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
  io::put_bytes(out, packed.data(), packed.size());
}

inline Bitmap read_bits(std::istream& in, int h, int w) {
  Bitmap m(h, w);
  std::vector<uint8_t> packed((m.bits.size() + 7) / 8);
  io::get_bytes(in, packed.data(), packed.size());
  for (size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return m;
}

inline void write_state(std::ostream& out, const SceneState& s) {
  io::put<uint8_t>(out, static_cast<uint8_t>(s.objects.size()));
  for (const auto& o : s.objects) {
    io::put<int32_t>(out, o.id);
    io::put<uint8_t>(out, static_cast<uint8_t>(o.kind));
    io::put<uint8_t>(out, static_cast<uint8_t>(o.color));
    io::put<uint8_t>(out, static_cast<uint8_t>(o.radius));
    io::put<double>(out, o.center.x);
    io::put<double>(out, o.center.y);
    io::put<double>(out, o.velocity.x);
    io::put<double>(out, o.velocity.y);
  }
}

inline SceneState read_state(std::istream& in, int h, int w) {
  SceneState s;
  s.height = h;
  s.width = w;
  const auto n = io::get<uint8_t>(in);
  require(n <= kMaxObjects, "corrupt scene state: too many objects");
  for (int i = 0; i < n; ++i) {
    SceneObject o;
    o.id = io::get<int32_t>(in);
    const auto kind = io::get<uint8_t>(in);
    const auto color = io::get<uint8_t>(in);
    require(kind < kNumShapes && color < kNumColors, "corrupt scene state: bad kind or color");
    o.kind = static_cast<Shape>(kind);
    o.color = static_cast<Color>(color);
    o.radius = io::get<uint8_t>(in);
    o.center.x = io::get<double>(in);
    o.center.y = io::get<double>(in);
    o.velocity.x = io::get<double>(in);
    o.velocity.y = io::get<double>(in);
    s.objects.push_back(o);
  }
  return s;
}

}  // namespace detail

inline std::string encode_record(const SessionRecord& rec) {
  require(!rec.turns.empty() && rec.turns.size() <= 19, "session must hold 1..19 turns");
  std::ostringstream out(std::ios::binary);
  io::put<uint64_t>(out, rec.session_id);
  io::put<uint64_t>(out, rec.seed);
  io::put<uint8_t>(out, rec.has_roe ? 1 : 0);
  io::put<uint16_t>(out, static_cast<uint16_t>(rec.turns.size()));
  detail::write_state(out, rec.turns.front().source_state);
  for (const auto& t : rec.turns) detail::write_state(out, t.target_state);
  detail::write_frame(out, rec.turns.front().source_frame);
  for (const auto& t : rec.turns) detail::write_frame(out, t.target_frame);
  for (const auto& t : rec.turns) {
    io::put<uint16_t>(out, static_cast<uint16_t>(t.instruction_tokens.size()));
    for (TokenId id : t.instruction_tokens) io::put<uint16_t>(out, id);
    if (rec.has_roe) {
      detail::write_bits(out, t.roe_src);
      detail::write_bits(out, t.roe_tgt);
    }
  }
  return out.str();
}

inline SessionRecord decode_record(const std::string& payload, int h, int w, const Vocabulary& vocab) {
  std::istringstream in(payload, std::ios::binary);
  SessionRecord rec;
  rec.session_id = io::get<uint64_t>(in);
  rec.seed = io::get<uint64_t>(in);
  rec.has_roe = io::get<uint8_t>(in) != 0;
  const int turns = io::get<uint16_t>(in);
  require(turns >= 1 && turns <= 19, "corrupt record: turn count " + std::to_string(turns));
  std::vector<SceneState> states;
  for (int i = 0; i <= turns; ++i) states.push_back(detail::read_state(in, h, w));
  std::vector<Frame> frames;
  for (int i = 0; i <= turns; ++i) frames.push_back(detail::read_frame(in, h, w));
  for (int i = 0; i < turns; ++i) {
    TurnRecord t;
    t.source_state = states[static_cast<size_t>(i)];
    t.target_state = states[static_cast<size_t>(i + 1)];
    t.source_frame = frames[static_cast<size_t>(i)];
    t.target_frame = frames[static_cast<size_t>(i + 1)];
    const int n = io::get<uint16_t>(in);
    for (int k = 0; k < n; ++k) {
      const auto id = io::get<uint16_t>(in);
      require(id < vocab.size(), "corrupt record: token id out of range");
      t.instruction_tokens.push_back(id);
    }
    t.ops = parse_instruction(vocab.detokenize(t.instruction_tokens));
    t.has_roe = rec.has_roe;
    if (rec.has_roe) {
      t.roe_src = detail::read_bits(in, h, w);
      t.roe_tgt = detail::read_bits(in, h, w);
    } else {
      t.roe_src = RoEMask(h, w);
      t.roe_tgt = RoEMask(h, w);
    }
    rec.turns.push_back(std::move(t));
  }
  require(in.peek() == std::char_traits<char>::eof(), "corrupt record: trailing bytes");
  return rec;
}

/// Streams records to a VSES file; the record count is patched on close().
class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& path, const Vocabulary& vocab, int height = kCanvas,
                int width = kCanvas)
      : out_(path, std::ios::binary | std::ios::trunc), height_(height), width_(width) {
    if (!out_) throw ValidationError("cannot open " + path.string() + " for writing");
    io::put_bytes(out_, kDatasetMagic, 4);
    io::put<uint32_t>(out_, kDatasetVersion);
    io::put<uint32_t>(out_, static_cast<uint32_t>(height));
    io::put<uint32_t>(out_, static_cast<uint32_t>(width));
    io::put<uint32_t>(out_, static_cast<uint32_t>(vocab.size()));
    for (const auto& word : vocab.words()) {
      io::put<uint16_t>(out_, static_cast<uint16_t>(word.size()));
      io::put_bytes(out_, word.data(), word.size());
    }
    io::put<uint64_t>(out_, vocab.hash());
    count_pos_ = out_.tellp();
    io::put<uint64_t>(out_, 0);
  }

  ~DatasetWriter() {
    if (!closed_) {
      try {
        close();
      } catch (...) {
      }
    }
  }

  void append(const SessionRecord& rec) {
    for (const auto& t : rec.turns)
      require(t.target_frame.height == height_ && t.target_frame.width == width_, "frame size mismatch");
    const std::string payload = encode_record(rec);
    io::put<uint64_t>(out_, payload.size());
    io::put_bytes(out_, payload.data(), payload.size());
    ++count_;
  }

  void close() {
    out_.seekp(count_pos_);
    io::put<uint64_t>(out_, count_);
    out_.close();
    closed_ = true;
    if (out_.fail()) throw NumericalError("failed writing dataset");
  }

  uint64_t count() const { return count_; }

 private:
  std::ofstream out_;
  int height_;
  int width_;
  std::streampos count_pos_;
  uint64_t count_ = 0;
  bool closed_ = false;
};

/// Random access over a VSES file; holds only the record offset table.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw ValidationError("cannot open dataset " + path.string());
    char magic[4];
    io::get_bytes(in_, magic, 4);
    require(std::equal(magic, magic + 4, kDatasetMagic), path.string() + " is not a VSES dataset");
    const auto version = io::get<uint32_t>(in_);
    require(version == kDatasetVersion, "unsupported dataset version " + std::to_string(version));
    height_ = static_cast<int>(io::get<uint32_t>(in_));
    width_ = static_cast<int>(io::get<uint32_t>(in_));
    require(height_ > 0 && width_ > 0 && height_ <= 4096 && width_ <= 4096, "corrupt dataset header: size");
    const auto vocab_size = io::get<uint32_t>(in_);
    require(vocab_size >= 2 && vocab_size <= 65535, "corrupt dataset header: vocabulary size");
    std::vector<std::string> words;
    for (uint32_t i = 0; i < vocab_size; ++i) {
      const auto n = io::get<uint16_t>(in_);
      std::string w(n, '\0');
      io::get_bytes(in_, w.data(), n);
      words.push_back(std::move(w));
    }
    vocab_ = Vocabulary(std::move(words));
    const auto vocab_hash = io::get<uint64_t>(in_);
    require(vocab_hash == vocab_.hash(), "dataset vocabulary hash mismatch");
    const auto count = io::get<uint64_t>(in_);
    for (uint64_t i = 0; i < count; ++i) {
      const auto size = io::get<uint64_t>(in_);
      offsets_.push_back(in_.tellg());
      sizes_.push_back(size);
      in_.seekg(static_cast<std::streamoff>(size), std::ios::cur);
      require(static_cast<bool>(in_), "dataset truncated at record " + std::to_string(i));
    }
    in_.seekg(0, std::ios::end);
    require(offsets_.empty() || static_cast<uint64_t>(in_.tellg()) ==
                                    static_cast<uint64_t>(offsets_.back()) + sizes_.back(),
            "dataset truncated");
  }

  size_t size() const { return offsets_.size(); }
  const Vocabulary& vocab() const { return vocab_; }
  int height() const { return height_; }
  int width() const { return width_; }

  SessionRecord read(size_t index) {
    require(index < offsets_.size(), "record index out of range");
    in_.clear();
    in_.seekg(offsets_[index]);
    std::string payload(sizes_[index], '\0');
    io::get_bytes(in_, payload.data(), payload.size());
    return decode_record(payload, height_, width_, vocab_);
  }

 private:
  std::ifstream in_;
  int height_ = 0;
  int width_ = 0;
  Vocabulary vocab_{std::vector<std::string>{"<pad>", "<null>"}};
  std::vector<std::streampos> offsets_;
  std::vector<uint64_t> sizes_;
};

}  // namespace ctxedit
