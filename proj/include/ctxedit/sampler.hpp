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

// Flow-matching generation with classifier-free guidance, multi-turn
// sessions with mask-first chains, and mask-steered generation.

#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ctxedit/common.hpp"
#include "ctxedit/model.hpp"
#include "ctxedit/sequencer.hpp"
#include "json.hpp"

namespace ctxedit {

enum class ChainMode : uint8_t { kDirect, kCurSegFirst, kNextSegFirst, kCurThenNextSeg };

inline constexpr std::array<ChainMode, 4> kChainModes = {ChainMode::kDirect, ChainMode::kCurSegFirst,
                                                         ChainMode::kNextSegFirst, ChainMode::kCurThenNextSeg};

inline const char* chain_mode_name(ChainMode m) {
  static constexpr const char* names[] = {"direct", "cur_seg_first", "next_seg_first", "cur_then_next_seg"};
  return names[static_cast<int>(m)];
}

inline ChainMode parse_chain_mode(std::string_view s) {
  for (ChainMode m : kChainModes)
    if (s == chain_mode_name(m)) return m;
  throw ValidationError("unknown mode '" + std::string(s) +
                        "' (expected direct, cur_seg_first, next_seg_first or cur_then_next_seg)");
}

inline bool predicts_cur_mask(ChainMode m) { return m == ChainMode::kCurSegFirst || m == ChainMode::kCurThenNextSeg; }
inline bool predicts_next_mask(ChainMode m) {
  return m == ChainMode::kNextSegFirst || m == ChainMode::kCurThenNextSeg;
}

struct SampleConfig {
  int steps = 50;
  double cfg_scale = 10.0;
  ChainMode mode = ChainMode::kDirect;
  bool dummy_context = false;
  bool use_context = true;  // false keeps only the previous image and the current instruction
  uint64_t seed = 0;

  void validate() const {
    require(steps >= 1, "steps must be >= 1");
    require(cfg_scale >= 0.0 && std::isfinite(cfg_scale), "cfg_scale must be finite and >= 0");
  }
};

// ---------------------------------------------------------------------------
// Integration.

/// v_u + s (v_c - v_u). The endpoints return a branch untouched, so s = 0 is
/// the NULL-text sampler and s = 1 the purely conditional one.
template <typename T>
Mat<T> guide(const Mat<T>& cond, const Mat<T>& uncond, double s) {
  if (s == 0.0) return uncond;
  if (s == 1.0) return cond;
  return uncond + static_cast<T>(s) * (cond - uncond);
}

/// Euler from t = 1 to t = 0 in `steps` uniform increments, x <- x - dt v(x, t).
template <typename T, typename F>
Mat<T> euler_integrate(Mat<T> x, int steps, F&& velocity) {
  require(steps >= 1, "steps must be >= 1");
  for (int i = 0; i < steps; ++i) {
    const double t = static_cast<double>(steps - i) / steps;
    const double t_next = static_cast<double>(steps - i - 1) / steps;
    const Mat<T> v = velocity(static_cast<const Mat<T>&>(x), t);
    x -= static_cast<T>(t - t_next) * v;
    if (!x.allFinite()) throw NumericalError("non-finite sampler state at step " + std::to_string(i + 1));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Mask geometry.

struct MaskTransform {
  double dx = 0.0, dy = 0.0;  // pixels
  double scale = 1.0;         // about the mask centroid
  double theta = 0.0;         // radians, about the mask centroid

  static MaskTransform translate(double dx, double dy) { return {dx, dy, 1.0, 0.0}; }
  static MaskTransform scaled(double s) { return {0.0, 0.0, s, 0.0}; }
  static MaskTransform rotate(double theta) { return {0.0, 0.0, 1.0, theta}; }
  bool identity() const { return dx == 0.0 && dy == 0.0 && scale == 1.0 && theta == 0.0; }
};

/// Mean (x, y) of set pixel centers.
inline std::array<double, 2> mask_centroid(const RoEMask& m) {
  double sx = 0.0, sy = 0.0;
  size_t n = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) sx += x + 0.5, sy += y + 0.5, ++n;
  require(n > 0, "empty mask has no centroid");
  return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

/// Nearest-neighbour inverse mapping of pixel centers.
inline RoEMask transform_mask(const RoEMask& m, const MaskTransform& tf) {
  require(tf.scale > 0.0 && std::isfinite(tf.scale), "scale must be positive");
  const auto [cx, cy] = mask_centroid(m);
  const double c = std::cos(tf.theta), s = std::sin(tf.theta);
  RoEMask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const double px = x + 0.5 - cx - tf.dx, py = y + 0.5 - cy - tf.dy;
      const double qx = cx + (c * px + s * py) / tf.scale;
      const double qy = cy + (-s * px + c * py) / tf.scale;
      const int ix = static_cast<int>(std::floor(qx)), iy = static_cast<int>(std::floor(qy));
      if (ix >= 0 && iy >= 0 && ix < m.width && iy < m.height) out.at(y, x) = m.at(iy, ix);
    }
  require(!out.empty(), "transform moves the mask fully off the canvas");
  return out;
}

// ---------------------------------------------------------------------------
// Context.

/// One text or image-pathway unit of an inference context.
struct ContextItem {
  BlockKind kind = BlockKind::kText;
  int turn = 0;
  std::string source;
  std::vector<int> codes;  // text units
  bool instruction = false;
  MatD latent;             // image units
};

/// Every item clean; with `null_instructions` the edit instructions become <null>.
inline PackedSequence build_context(const std::vector<ContextItem>& items, int height, int width, int patch,
                                    bool null_instructions) {
  detail::Packer pk(height, width, patch);
  for (const auto& it : items) {
    if (it.kind == BlockKind::kImage || it.kind == BlockKind::kMask) {
      pk.image(it.kind, it.turn, it.source, it.latent, true, false);
    } else {
      std::vector<int> codes = it.codes;
      if (it.instruction && null_instructions) std::fill(codes.begin(), codes.end(), int{Vocabulary::kNull});
      pk.text(it.kind, it.turn, it.source, codes, it.kind == BlockKind::kTurnMark ? TokenKind::kTurn : TokenKind::kWord);
    }
  }
  return pk.finish({.patch = patch});
}

inline uint64_t context_hash(const PackedSequence& seq) {
  uint64_t h = fnv1a(seq.token_code.data(), seq.token_code.size() * sizeof(int));
  return fnv1a(seq.image_inputs.data(), sizeof(double) * static_cast<size_t>(seq.image_inputs.size()), h);
}

struct TurnTrace {
  std::string instruction;
  bool dummy = false;
  std::optional<RoEMask> cur_mask;
  std::optional<RoEMask> next_mask;
  Frame frame;
  uint64_t context_hash = 0;    // context the image was generated from
  int context_tokens = 0;
  std::vector<BlockKind> layout;  // block kinds of that context
  double wall_ms = 0.0;
};

struct SessionTrace {
  SampleConfig config;
  std::vector<TurnTrace> turns;

  /// Turns excluding the dummy one.
  std::vector<const TurnTrace*> edits() const {
    std::vector<const TurnTrace*> out;
    for (const auto& t : turns)
      if (!t.dummy) out.push_back(&t);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["steps"] = config.steps;
    j["cfg_scale"] = config.cfg_scale;
    j["mode"] = chain_mode_name(config.mode);
    j["dummy_context"] = config.dummy_context;
    j["use_context"] = config.use_context;
    j["seed"] = config.seed;
    j["turns"] = nlohmann::json::array();
    for (const auto& t : turns) {
      nlohmann::json jt;
      jt["instruction"] = t.instruction;
      jt["dummy"] = t.dummy;
      jt["cur_mask_pixels"] = t.cur_mask ? nlohmann::json(t.cur_mask->count()) : nlohmann::json(nullptr);
      jt["next_mask_pixels"] = t.next_mask ? nlohmann::json(t.next_mask->count()) : nlohmann::json(nullptr);
      std::ostringstream hash;
      hash << std::hex << t.context_hash;
      jt["context_hash"] = hash.str();
      jt["context_tokens"] = t.context_tokens;
      std::vector<std::string> layout;
      for (BlockKind k : t.layout) layout.emplace_back(block_kind_name(k));
      jt["layout"] = layout;
      jt["wall_ms"] = t.wall_ms;
      j["turns"].push_back(jt);
    }
    return j;
  }
};

// ---------------------------------------------------------------------------
// Sessions.

template <typename T>
class SessionRunner {
 public:
  SessionRunner(const ModelParams<T>& params, const Vocabulary& vocab, SampleConfig cfg)
      : params_(params), vocab_(vocab), cfg_(cfg), net_(params) {
    cfg_.validate();
    require(params.config.vocab_size == static_cast<int>(vocab.size()), "model and vocabulary sizes differ");
  }

  const SessionTrace& trace() const { return trace_; }
  const SampleConfig& config() const { return cfg_; }

  void begin(const Frame& source) {
    require(source.height % params_.config.patch == 0 && source.width % params_.config.patch == 0,
            "source size not divisible by the model patch");
    height_ = source.height;
    width_ = source.width;
    trace_ = {};
    trace_.config = cfg_;
    targets_ = 0;
    previous_ = source;
    reset_context(source);
    if (cfg_.dummy_context) {
      TurnTrace t;
      t.instruction = std::string(kDummyInstruction);
      t.dummy = true;
      t.frame = source;
      trace_.turns.push_back(std::move(t));
    }
  }

  /// One edit. Masks given here enter the context instead of generated ones.
  const TurnTrace& step(const std::vector<TokenId>& instruction, const std::optional<RoEMask>& given_cur = {},
                        const std::optional<RoEMask>& given_next = {}) {
    require(height_ > 0, "begin() must precede step()");
    const auto t0 = std::chrono::steady_clock::now();
    if (!cfg_.use_context) reset_context(previous_);
    const int k = ++turn_;
    require(k <= params_.config.turn_marks, "session exceeds the model's turn marks");
    const std::string ks = std::to_string(k);
    TurnTrace tt;
    tt.instruction = vocab_.detokenize(instruction);
    items_.push_back({BlockKind::kTurnMark, k, "TURN" + ks, {k - 1}, false, {}});
    items_.push_back({BlockKind::kText, k, "T" + ks, std::vector<int>(instruction.begin(), instruction.end()), true, {}});

    if (given_cur || predicts_cur_mask(cfg_.mode)) {
      push_prompt(k, "Tm0", kSourceMaskPrompt);
      tt.cur_mask = given_cur ? *given_cur : decode_mask(from_latent(generate(), height_, width_, patch()));
      items_.push_back({BlockKind::kMask, k, "Msrc" + ks, {}, false, to_latent(encode_mask(*tt.cur_mask), patch())});
    }
    if (given_next || predicts_next_mask(cfg_.mode)) {
      push_prompt(k, "Tm1", kTargetMaskPrompt);
      tt.next_mask = given_next ? *given_next : decode_mask(from_latent(generate(), height_, width_, patch()));
      items_.push_back({BlockKind::kMask, k, "Mtgt" + ks, {}, false, to_latent(encode_mask(*tt.next_mask), patch())});
    }
    const PackedSequence ctx = build_context(items_, height_, width_, patch(), false);
    tt.context_hash = context_hash(ctx);
    tt.context_tokens = ctx.size();
    for (const auto& b : ctx.blocks) tt.layout.push_back(b.kind);
    const MatD z = generate();
    tt.frame = from_latent(z, height_, width_, patch());
    for (float& v : tt.frame.pixels) v = std::clamp(v, 0.0f, 1.0f);
    items_.push_back({BlockKind::kImage, k, "I" + ks, {}, false, to_latent(tt.frame, patch())});
    previous_ = tt.frame;
    tt.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    trace_.turns.push_back(std::move(tt));
    return trace_.turns.back();
  }

 private:
  int patch() const { return params_.config.patch; }

  void reset_context(const Frame& first) {
    items_.clear();
    turn_ = 0;
    items_.push_back({BlockKind::kImage, 0, "I0", {}, false, to_latent(first, patch())});
    if (cfg_.dummy_context) {
      turn_ = 1;
      const auto ids = vocab_.tokenize(kDummyInstruction);
      items_.push_back({BlockKind::kTurnMark, 1, "TURN1", {0}, false, {}});
      // The dummy prompt is a task prompt, not an edit, so it survives NULL-ing.
      items_.push_back({BlockKind::kText, 1, "T1", std::vector<int>(ids.begin(), ids.end()), false, {}});
      items_.push_back({BlockKind::kImage, 1, "I1", {}, false, to_latent(first, patch())});
    }
  }

  void push_prompt(int k, const char* name, std::string_view prompt) {
    const auto ids = vocab_.tokenize(prompt);
    items_.push_back({BlockKind::kText, k, name, std::vector<int>(ids.begin(), ids.end()), false, {}});
  }

  /// Denoises one image-pathway block appended after the current context.
  MatD generate() {
    const PackedSequence cond = build_context(items_, height_, width_, patch(), false);
    const double s = cfg_.cfg_scale;
    std::optional<typename Transformer<T>::PrefixCache> pc_c, pc_u;
    if (s != 0.0) pc_c = net_.build_prefix(cond);
    if (s != 1.0) pc_u = net_.build_prefix(build_context(items_, height_, width_, patch(), true));
    const int axis = pc_c ? pc_c->next_frame_axis : pc_u->next_frame_axis;
    const int gh = height_ / patch(), gw = width_ / patch();
    std::vector<Position> pos;
    for (int i = 0; i < gh * gw; ++i) pos.push_back({axis, i / gw, i % gw});

    Rng rng(derive_seed(cfg_.seed, static_cast<uint64_t>(targets_++)));
    Mat<T> x(gh * gw, params_.config.patch_dim());
    for (int i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(rng.normal());
    auto velocity = [&](const Mat<T>& xt, double t) {
      Mat<T> vc, vu;
      if (pc_c) vc = net_.predict_block(*pc_c, xt, t, pos);
      if (pc_u) vu = net_.predict_block(*pc_u, xt, t, pos);
      return guide(vc, vu, s);
    };
    return euler_integrate(std::move(x), cfg_.steps, velocity).template cast<double>();
  }

  const ModelParams<T>& params_;
  const Vocabulary& vocab_;
  SampleConfig cfg_;
  Transformer<T> net_;
  SessionTrace trace_;
  std::vector<ContextItem> items_;
  Frame previous_;
  int height_ = 0, width_ = 0;
  int turn_ = 0;
  int targets_ = 0;
};

/// Tokenizes every instruction up front, then runs them in order.
template <typename T>
SessionTrace run_session(const ModelParams<T>& params, const Vocabulary& vocab, const Frame& source,
                         const std::vector<std::string>& instructions, const SampleConfig& cfg) {
  std::vector<std::vector<TokenId>> tokens;
  for (const auto& text : instructions) tokens.push_back(vocab.tokenize(text));
  SessionRunner<T> runner(params, vocab, cfg);
  runner.begin(source);
  for (const auto& ids : tokens) runner.step(ids);
  return runner.trace();
}

/// Transforms `roe`, feeds it as the target-mask context, then generates the image.
template <typename T>
Frame mask_steer(const ModelParams<T>& params, const Vocabulary& vocab, const Frame& source, const RoEMask& roe,
                 const MaskTransform& tf, const std::string& instruction, SampleConfig cfg) {
  const auto ids = vocab.tokenize(instruction);
  const RoEMask moved = tf.identity() ? roe : transform_mask(roe, tf);
  cfg.mode = ChainMode::kNextSegFirst;
  SessionRunner<T> runner(params, vocab, cfg);
  runner.begin(source);
  return runner.step(ids, std::nullopt, moved).frame;
}

}  // namespace ctxedit
