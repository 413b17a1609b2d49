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

// Packing of a session into one interleaved token sequence.
//
// Per turn k (1-based), after the leading [I0 CLEAN]:
//   [TURN_k] [T_k] [Tm0 Msrc CLEAN Msrc NOISY] [Tm1 Mtgt CLEAN Mtgt NOISY] [I_k CLEAN] [I_k NOISY]
// Mask groups appear only when the plan predicts them. Each block carries a
// `slot`: clean and noisy copies of the same content share one slot, every
// other block gets a fresh one. Attention is allowed inside a block and from
// a later slot to an earlier non-noisy block, so a noisy image never sees
// its own clean copy.

#pragma once

#include <array>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctxedit/common.hpp"
#include "ctxedit/synthworld.hpp"
#include "ctxedit/vocab.hpp"

namespace ctxedit {

inline constexpr int kDefaultPatch = 8;
inline constexpr int kMaxTurnMarks = 20;

// ---------------------------------------------------------------------------
// Patches and latents.

/// Space-to-depth. Row r*gw+c holds patch (r, c); element (dy*p+dx)*3+ch.
inline MatD patchify(const Frame& f, int p) {
  require(p > 0 && f.height % p == 0 && f.width % p == 0,
          "frame " + std::to_string(f.height) + "x" + std::to_string(f.width) + " not divisible by patch " +
              std::to_string(p));
  const int gh = f.height / p, gw = f.width / p;
  MatD out(gh * gw, 3 * p * p);
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < 3; ++ch) out(r * gw + c, (dy * p + dx) * 3 + ch) = f.at(r * p + dy, c * p + dx, ch);
  return out;
}

inline Frame unpatchify(const MatD& patches, int height, int width, int p) {
  require(p > 0 && height % p == 0 && width % p == 0, "size not divisible by patch");
  const int gh = height / p, gw = width / p;
  require(patches.rows() == gh * gw && patches.cols() == 3 * p * p, "patch grid shape mismatch");
  Frame f(height, width);
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < 3; ++ch)
            f.at(r * p + dy, c * p + dx, ch) = static_cast<float>(patches(r * gw + c, (dy * p + dx) * 3 + ch));
  return f;
}

/// Pixels in [0, 1] map to latents in [-1, 1].
inline MatD to_latent(const Frame& f, int p) { return (patchify(f, p).array() * 2.0 - 1.0).matrix(); }

inline Frame from_latent(const MatD& z, int height, int width, int p) {
  return unpatchify(((z.array() + 1.0) * 0.5).matrix(), height, width, p);
}

inline Frame encode_mask(const RoEMask& m) {
  Frame f(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (int c = 0; c < 3; ++c) f.at(y, x, c) = m.at(y, x) ? 1.0f : 0.0f;
  return f;
}

/// Channel mean thresholded at 0.5.
inline RoEMask decode_mask(const Frame& f) {
  RoEMask m(f.height, f.width);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      const float mean = (f.at(y, x, 0) + f.at(y, x, 1) + f.at(y, x, 2)) / 3.0f;
      m.at(y, x) = mean > 0.5f ? 1 : 0;
    }
  return m;
}

// ---------------------------------------------------------------------------
// Task plans.

enum class Keep : uint8_t { kAbsent, kRequired, kKept, kDropped };

inline bool present(Keep k) { return k == Keep::kRequired || k == Keep::kKept; }

struct TurnPlan {
  Keep current_frame = Keep::kRequired;  // clean copy of this turn's source image
  Keep cur_roe = Keep::kAbsent;          // source mask group (kept => CSP target)
  Keep next_roe = Keep::kAbsent;         // target mask group (kept => NSP target)
  bool null_text = false;                // instruction replaced by <null>

  bool csp() const { return present(cur_roe); }
  bool nsp() const { return present(next_roe); }
};

struct TaskPlan {
  std::vector<TurnPlan> turns;
};

/// Every context element kept, every available mask predicted.
inline TaskPlan full_plan(const SessionRecord& rec) {
  TaskPlan plan;
  for (size_t i = 0; i < rec.turns.size(); ++i) {
    TurnPlan t;
    t.current_frame = i == 0 ? Keep::kRequired : Keep::kKept;
    if (rec.has_roe) t.cur_roe = t.next_roe = Keep::kKept;
    plan.turns.push_back(t);
  }
  return plan;
}

/// The structural retention rule: the first image and the source image of
/// any turn predicting its source mask are never dropped; masks exist only
/// in RoE sessions.
inline void validate_plan(const SessionRecord& rec, const TaskPlan& plan) {
  require(plan.turns.size() == rec.turns.size(), "plan has " + std::to_string(plan.turns.size()) +
                                                     " turns but record has " + std::to_string(rec.turns.size()));
  for (size_t i = 0; i < plan.turns.size(); ++i) {
    const TurnPlan& t = plan.turns[i];
    const std::string where = "turn " + std::to_string(i + 1) + ": ";
    require(t.current_frame != Keep::kAbsent, where + "current frame cannot be absent");
    if (i == 0) require(present(t.current_frame), where + "the first image is always retained");
    if (t.csp()) require(present(t.current_frame), where + "source mask target needs the current frame");
    if (!rec.has_roe)
      require(t.cur_roe == Keep::kAbsent && t.next_roe == Keep::kAbsent, where + "masks planned without RoE");
  }
}

/// Prepends the (I0, "generate the same image", I0) turn used as dummy context.
inline SessionRecord with_dummy_turn(const SessionRecord& rec, const Vocabulary& vocab) {
  require(!rec.turns.empty(), "session has no turns");
  TurnRecord dummy;
  const TurnRecord& first = rec.turns.front();
  dummy.source_state = dummy.target_state = first.source_state;
  dummy.source_frame = dummy.target_frame = first.source_frame;
  dummy.instruction_tokens = vocab.tokenize(kDummyInstruction);
  dummy.roe_src = dummy.roe_tgt = RoEMask(first.source_frame.height, first.source_frame.width);
  dummy.has_roe = rec.has_roe;
  SessionRecord out = rec;
  out.turns.insert(out.turns.begin(), std::move(dummy));
  return out;
}

// ---------------------------------------------------------------------------
// Layout.

enum class BlockKind : uint8_t { kText, kTurnMark, kImage, kMask };
enum class Cleanliness : uint8_t { kClean, kNoisy, kNone };
enum class TokenKind : uint8_t { kWord, kTurn, kPatch };

inline const char* block_kind_name(BlockKind k) {
  static constexpr const char* names[] = {"TEXT", "TURN_MARK", "IMAGE", "MASK"};
  return names[static_cast<int>(k)];
}
inline const char* cleanliness_name(Cleanliness c) {
  static constexpr const char* names[] = {"CLEAN", "NOISY", "-"};
  return names[static_cast<int>(c)];
}

struct BlockDescriptor {
  BlockKind kind = BlockKind::kText;
  int turn = 0;
  Cleanliness cleanliness = Cleanliness::kNone;
  int start = 0;
  int end = 0;
  int slot = 0;
  std::string source;  // e.g. "I1", "T2", "Msrc1"
  double t = 0.0;

  int size() const { return end - start; }
  bool noisy() const { return cleanliness == Cleanliness::kNoisy; }
  bool image_pathway() const { return kind == BlockKind::kImage || kind == BlockKind::kMask; }
};

/// The attention rule between two blocks, with `q` and `k` their indices.
inline bool block_allowed(const std::vector<BlockDescriptor>& blocks, int q, int k) {
  if (q == k) return true;
  const BlockDescriptor& bk = blocks[static_cast<size_t>(k)];
  return bk.slot < blocks[static_cast<size_t>(q)].slot && !bk.noisy();
}

class AttentionMask {
 public:
  AttentionMask(std::vector<BlockDescriptor> blocks, std::vector<int> token_block)
      : blocks_(std::move(blocks)), token_block_(std::move(token_block)) {
    const size_t nb = blocks_.size();
    table_.assign(nb * nb, 0);
    for (size_t q = 0; q < nb; ++q)
      for (size_t k = 0; k < nb; ++k)
        table_[q * nb + k] = ctxedit::block_allowed(blocks_, static_cast<int>(q), static_cast<int>(k)) ? 1 : 0;
  }

  int size() const { return static_cast<int>(token_block_.size()); }
  bool allowed(int q, int k) const {
    return table_[static_cast<size_t>(token_block_[static_cast<size_t>(q)]) * blocks_.size() +
                  static_cast<size_t>(token_block_[static_cast<size_t>(k)])] != 0;
  }
  bool block_allowed(int qb, int kb) const {
    return table_[static_cast<size_t>(qb) * blocks_.size() + static_cast<size_t>(kb)] != 0;
  }
  /// Row-major N x N matrix of 0/1.
  std::vector<uint8_t> dense() const {
    const int n = size();
    std::vector<uint8_t> out(static_cast<size_t>(n) * static_cast<size_t>(n));
    for (int q = 0; q < n; ++q)
      for (int k = 0; k < n; ++k) out[static_cast<size_t>(q) * static_cast<size_t>(n) + static_cast<size_t>(k)] = allowed(q, k);
    return out;
  }

 private:
  std::vector<BlockDescriptor> blocks_;
  std::vector<int> token_block_;
  std::vector<uint8_t> table_;
};

using Position = std::array<int, 3>;

struct PackedSequence {
  int patch = kDefaultPatch;
  int height = kCanvas;
  int width = kCanvas;
  std::vector<BlockDescriptor> blocks;
  // Per token.
  std::vector<int> token_block;
  std::vector<TokenKind> token_kind;
  std::vector<int> token_code;  // vocab id, turn-mark index, or image row
  std::vector<Position> positions;
  std::vector<uint8_t> loss_mask;
  // Per image-pathway token, in sequence order.
  MatD image_inputs;
  MatD clean_latents;
  MatD noise;

  int size() const { return static_cast<int>(token_block.size()); }
  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int patch_dim() const { return 3 * patch * patch; }
  int loss_count() const {
    int n = 0;
    for (auto m : loss_mask) n += m;
    return n;
  }
  double token_t(int i) const { return blocks[static_cast<size_t>(token_block[static_cast<size_t>(i)])].t; }
  AttentionMask attention_mask() const { return AttentionMask(blocks, token_block); }

  /// Image rows of block `b` as a contiguous [first, first + count) range.
  std::pair<int, int> image_rows(int b) const {
    const auto& bd = blocks[static_cast<size_t>(b)];
    require(bd.image_pathway(), "block " + std::to_string(b) + " is not an image block");
    return {token_code[static_cast<size_t>(bd.start)], bd.size()};
  }
};

struct AssembleOptions {
  int patch = kDefaultPatch;
  uint64_t noise_seed = 0;
  std::optional<double> fixed_t;  // every noisy block uses this timestep when set
};

namespace detail {

class Packer {
 public:
  Packer(int height, int width, int patch) : patch_(patch) {
    seq_.patch = patch;
    seq_.height = height;
    seq_.width = width;
    require(patch > 0 && height % patch == 0 && width % patch == 0, "frame size not divisible by patch");
  }
  Packer(const SessionRecord& rec, int patch)
      : Packer(rec.turns.front().source_frame.height, rec.turns.front().source_frame.width, patch) {}

  void text(BlockKind kind, int turn, const std::string& source, const std::vector<int>& codes, TokenKind tk) {
    BlockDescriptor b = open(kind, turn, Cleanliness::kNone, source, next_slot_++);
    for (int code : codes) {
      push_token(tk, code, {text_pos_++, 0, 0}, false);
    }
    close(b);
  }

  /// Appends a clean block, and a noisy sibling when `noisy` is set.
  void image(BlockKind kind, int turn, const std::string& source, const MatD& latent, bool clean, bool noisy) {
    const int slot = next_slot_++;
    const int axis = frame_axis_++;
    if (clean) emit_image(kind, turn, source, latent, slot, axis, Cleanliness::kClean);
    if (noisy) emit_image(kind, turn, source, latent, slot, axis, Cleanliness::kNoisy);
  }

  PackedSequence finish(const AssembleOptions& opt) {
    const int dim = 3 * patch_ * patch_;
    const int n = static_cast<int>(rows_.size());
    seq_.image_inputs.resize(n, dim);
    seq_.clean_latents.resize(n, dim);
    seq_.noise = MatD::Zero(n, dim);
    for (int i = 0; i < n; ++i) seq_.clean_latents.row(i) = rows_[static_cast<size_t>(i)];
    seq_.image_inputs = seq_.clean_latents;
    Rng rng(opt.noise_seed);
    for (auto& b : seq_.blocks) {
      if (!b.noisy()) continue;
      b.t = opt.fixed_t ? *opt.fixed_t : rng.uniform();
      require(b.t >= 0.0 && b.t <= 1.0, "timestep must lie in [0, 1]");
      const int first = seq_.token_code[static_cast<size_t>(b.start)];
      for (int r = first; r < first + b.size(); ++r)
        for (int c = 0; c < dim; ++c) {
          const double eps = rng.normal();
          seq_.noise(r, c) = eps;
          seq_.image_inputs(r, c) = (1.0 - b.t) * seq_.clean_latents(r, c) + b.t * eps;
        }
    }
    return std::move(seq_);
  }

 private:
  BlockDescriptor open(BlockKind kind, int turn, Cleanliness c, const std::string& source, int slot) {
    BlockDescriptor b;
    b.kind = kind;
    b.turn = turn;
    b.cleanliness = c;
    b.source = source;
    b.slot = slot;
    b.start = seq_.size();
    return b;
  }
  void close(BlockDescriptor& b) {
    b.end = seq_.size();
    seq_.blocks.push_back(std::move(b));
  }
  void push_token(TokenKind kind, int code, Position pos, bool loss) {
    seq_.token_block.push_back(static_cast<int>(seq_.blocks.size()));
    seq_.token_kind.push_back(kind);
    seq_.token_code.push_back(code);
    seq_.positions.push_back(pos);
    seq_.loss_mask.push_back(loss ? 1 : 0);
  }
  void emit_image(BlockKind kind, int turn, const std::string& source, const MatD& latent, int slot, int axis,
                  Cleanliness c) {
    BlockDescriptor b = open(kind, turn, c, source, slot);
    const int gw = seq_.grid_w();
    for (int i = 0; i < latent.rows(); ++i) {
      push_token(TokenKind::kPatch, static_cast<int>(rows_.size()), {axis, i / gw, i % gw}, c == Cleanliness::kNoisy);
      rows_.push_back(latent.row(i));
    }
    close(b);
  }

  int patch_;
  PackedSequence seq_;
  std::vector<Eigen::RowVectorXd> rows_;
  int next_slot_ = 0;
  int frame_axis_ = 0;
  int text_pos_ = 0;
};

inline std::vector<int> as_codes(const std::vector<TokenId>& ids, bool null_text) {
  std::vector<int> out;
  for (TokenId id : ids) out.push_back(null_text ? Vocabulary::kNull : id);
  return out;
}

}  // namespace detail

/// Packs `rec` under `plan`; noise and timesteps come from `opt.noise_seed`.
inline PackedSequence assemble(const SessionRecord& rec, const TaskPlan& plan, const Vocabulary& vocab,
                               const AssembleOptions& opt = {}) {
  require(!rec.turns.empty(), "session has no turns");
  require(rec.turns.size() <= static_cast<size_t>(kMaxTurnMarks),
          "session has more than " + std::to_string(kMaxTurnMarks) + " turns");
  validate_plan(rec, plan);
  const int p = opt.patch;
  detail::Packer pk(rec, p);
  const std::vector<int> src_prompt = detail::as_codes(vocab.tokenize(kSourceMaskPrompt), false);
  const std::vector<int> tgt_prompt = detail::as_codes(vocab.tokenize(kTargetMaskPrompt), false);

  pk.image(BlockKind::kImage, 0, "I0", to_latent(rec.turns.front().source_frame, p), true, false);
  for (size_t i = 0; i < rec.turns.size(); ++i) {
    const TurnRecord& tr = rec.turns[i];
    const TurnPlan& tp = plan.turns[i];
    const int k = static_cast<int>(i) + 1;
    const std::string ks = std::to_string(k);
    pk.text(BlockKind::kTurnMark, k, "TURN" + ks, {k - 1}, TokenKind::kTurn);
    pk.text(BlockKind::kText, k, "T" + ks, detail::as_codes(tr.instruction_tokens, tp.null_text), TokenKind::kWord);
    if (tp.csp()) {
      pk.text(BlockKind::kText, k, "Tm0", src_prompt, TokenKind::kWord);
      pk.image(BlockKind::kMask, k, "Msrc" + ks, to_latent(encode_mask(tr.roe_src), p), true, true);
    }
    if (tp.nsp()) {
      pk.text(BlockKind::kText, k, "Tm1", tgt_prompt, TokenKind::kWord);
      pk.image(BlockKind::kMask, k, "Mtgt" + ks, to_latent(encode_mask(tr.roe_tgt), p), true, true);
    }
    // The clean copy serves later turns as their current frame; the last
    // image keeps it so every noisy image has a sibling.
    const bool last = i + 1 == rec.turns.size();
    const bool clean = last || present(plan.turns[i + 1].current_frame);
    pk.image(BlockKind::kImage, k, "I" + ks, to_latent(tr.target_frame, p), clean, true);
  }
  return pk.finish(opt);
}

/// Text table: block index, kind, turn, cleanliness, span, timestep.
inline std::string layout_table(const PackedSequence& seq) {
  std::ostringstream out;
  out << std::left << std::setw(6) << "block" << std::setw(11) << "kind" << std::setw(6) << "turn" << std::setw(7)
      << "clean" << std::setw(12) << "span" << std::setw(5) << "slot" << std::setw(8) << "source"
      << "t\n";
  for (size_t i = 0; i < seq.blocks.size(); ++i) {
    const auto& b = seq.blocks[i];
    std::ostringstream span;
    span << "[" << b.start << "," << b.end << ")";
    std::ostringstream t;
    t << std::fixed << std::setprecision(4) << b.t;
    out << std::left << std::setw(6) << i << std::setw(11) << block_kind_name(b.kind) << std::setw(6) << b.turn
        << std::setw(7) << cleanliness_name(b.cleanliness) << std::setw(12) << span.str() << std::setw(5) << b.slot
        << std::setw(8) << b.source << t.str() << "\n";
  }
  return out.str();
}

}  // namespace ctxedit
