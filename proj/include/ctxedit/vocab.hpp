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

// Closed vocabulary and the instruction grammar used for edit descriptions.
//
// Grammar (ops joined by "and"):
//   add a [small|large] <color> <shape> at the <row> <col>
//   remove the <color> <shape>
//   change the <color> <shape> to <color>
//   resize the <color> <shape> to <small|medium|large>
//   move the <color> <shape> to the <row> <col>
//   keep the scene unchanged                      (no ops)

#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctxedit/common.hpp"
#include "ctxedit/scene.hpp"

namespace ctxedit {

using TokenId = uint16_t;

inline constexpr std::string_view kIdentityInstruction = "keep the scene unchanged";
inline constexpr std::string_view kDummyInstruction = "generate the same image";
inline constexpr std::string_view kSourceMaskPrompt = "generate the mask of changing areas in the source image";
inline constexpr std::string_view kTargetMaskPrompt = "generate the mask of changing areas in the target image";

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kNull = 1;

  /// The built-in word list. Order is part of the dataset format.
  static Vocabulary standard() {
    std::vector<std::string> words = {"<pad>", "<null>"};
    for (const char* w : {"add", "remove", "change", "resize", "move", "keep", "generate", "a", "the", "to", "at",
                          "and", "of", "in", "scene", "unchanged", "same", "image", "mask", "changing", "areas",
                          "source", "target"})
      words.emplace_back(w);
    for (int c = 0; c < kNumColors; ++c) words.emplace_back(color_name(static_cast<Color>(c)));
    for (int s = 0; s < kNumShapes; ++s) words.emplace_back(shape_name(static_cast<Shape>(s)));
    for (const char* w : {"upper", "middle", "lower", "left", "center", "right", "small", "medium", "large"})
      words.emplace_back(w);
    return Vocabulary(std::move(words));
  }

  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    require(words_.size() >= 2 && words_[kPad] == "<pad>" && words_[kNull] == "<null>",
            "vocabulary must start with <pad> and <null>");
    require(words_.size() <= 65535, "vocabulary too large for u16 ids");
    for (size_t i = 0; i < words_.size(); ++i) {
      const bool fresh = index_.emplace(words_[i], static_cast<TokenId>(i)).second;
      require(fresh, "duplicate vocabulary word '" + words_[i] + "'");
    }
  }

  size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(TokenId id) const {
    require(id < words_.size(), "token id " + std::to_string(id) + " out of range");
    return words_[id];
  }

  TokenId id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw ValidationError("unknown word '" + std::string(word) + "'");
    return it->second;
  }
  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> ids;
    size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      if (j > i) ids.push_back(id(text.substr(i, j - i)));
      i = j;
    }
    return ids;
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

  uint64_t hash() const {
    uint64_t h = fnv1a("vocab");
    for (const auto& w : words_) h = fnv1a(w + "\n", h);
    return h;
  }

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::string render_op(const EditOp& op) {
  const std::string subject = describe(op.subject);
  const std::string place = std::string("the ") + region_row_word(op.region) + " " + region_col_word(op.region);
  switch (op.op) {
    case EditKind::kAdd: {
      std::string size = op.new_radius == kDefaultAddRadius ? "" : std::string(size_name(op.new_radius)) + " ";
      return "add a " + size + subject + " at " + place;
    }
    case EditKind::kRemove: return "remove the " + subject;
    case EditKind::kRecolor: return "change the " + subject + " to " + color_name(op.new_color);
    case EditKind::kResize: return "resize the " + subject + " to " + size_name(op.new_radius);
    case EditKind::kMoveJump: return "move the " + subject + " to " + place;
  }
  return {};
}

/// Deterministic template rendering of an op list.
inline std::string render_instruction(const std::vector<EditOp>& ops) {
  if (ops.empty()) return std::string(kIdentityInstruction);
  std::string out;
  for (size_t i = 0; i < ops.size(); ++i) {
    if (i) out += " and ";
    out += render_op(ops[i]);
  }
  return out;
}

namespace detail {

class InstructionParser {
 public:
  explicit InstructionParser(std::vector<std::string> words) : words_(std::move(words)) {}

  std::vector<EditOp> parse() {
    std::vector<EditOp> ops;
    if (join() == kIdentityInstruction) return ops;
    while (true) {
      ops.push_back(parse_op());
      if (pos_ == words_.size()) break;
      expect("and");
    }
    return ops;
  }

 private:
  std::string join() const {
    std::string s;
    for (size_t i = 0; i < words_.size(); ++i) s += (i ? " " : "") + words_[i];
    return s;
  }
  const std::string& next() {
    if (pos_ >= words_.size()) throw ValidationError("instruction ends early");
    return words_[pos_++];
  }
  void expect(std::string_view w) {
    const std::string& got = next();
    if (got != w) throw ValidationError("expected '" + std::string(w) + "' but found '" + got + "'");
  }
  bool peek(std::string_view w) const { return pos_ < words_.size() && words_[pos_] == w; }

  Color color() {
    const std::string& w = next();
    for (int c = 0; c < kNumColors; ++c)
      if (w == color_name(static_cast<Color>(c))) return static_cast<Color>(c);
    throw ValidationError("expected a color, found '" + w + "'");
  }
  Shape shape() {
    const std::string& w = next();
    for (int s = 0; s < kNumShapes; ++s)
      if (w == shape_name(static_cast<Shape>(s))) return static_cast<Shape>(s);
    throw ValidationError("expected a shape, found '" + w + "'");
  }
  static std::optional<int> size_word(std::string_view w) {
    for (int r : kRadii)
      if (w == size_name(r)) return r;
    return std::nullopt;
  }
  Region region() {
    expect("the");
    const std::string& row_word = next();
    const std::string& col_word = next();
    for (int r = 0; r < 9; ++r) {
      const auto reg = static_cast<Region>(r);
      if (row_word == region_row_word(reg) && col_word == region_col_word(reg)) return reg;
    }
    throw ValidationError("unknown region '" + row_word + " " + col_word + "'");
  }
  Descriptor subject() {
    Descriptor d;
    d.color = color();
    d.kind = shape();
    return d;
  }

  EditOp parse_op() {
    EditOp op;
    const std::string verb = next();
    if (verb == "add") {
      op.op = EditKind::kAdd;
      expect("a");
      if (pos_ < words_.size()) {
        if (auto r = size_word(words_[pos_])) {
          op.new_radius = *r;
          ++pos_;
        }
      }
      op.subject = subject();
      expect("at");
      op.region = region();
    } else if (verb == "remove") {
      op.op = EditKind::kRemove;
      expect("the");
      op.subject = subject();
    } else if (verb == "change") {
      op.op = EditKind::kRecolor;
      expect("the");
      op.subject = subject();
      expect("to");
      op.new_color = color();
    } else if (verb == "resize") {
      op.op = EditKind::kResize;
      expect("the");
      op.subject = subject();
      expect("to");
      auto r = size_word(next());
      if (!r) throw ValidationError("expected a size word");
      op.new_radius = *r;
    } else if (verb == "move") {
      op.op = EditKind::kMoveJump;
      expect("the");
      op.subject = subject();
      expect("to");
      op.region = region();
    } else {
      throw ValidationError("unknown edit verb '" + verb + "'");
    }
    return op;
  }

  std::vector<std::string> words_;
  size_t pos_ = 0;
};

}  // namespace detail

/// Inverse of render_instruction.
inline std::vector<EditOp> parse_instruction(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) words.push_back(w);
  return detail::InstructionParser(std::move(words)).parse();
}

}  // namespace ctxedit
