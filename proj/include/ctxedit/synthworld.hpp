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

// Procedural "video" generator: drifting shapes with discrete edit events,
// sparse frame sampling, transition descriptions and region-of-edit masks.

#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <variant>
#include <vector>

#include "ctxedit/common.hpp"
#include "ctxedit/scene.hpp"
#include "ctxedit/vocab.hpp"

namespace ctxedit {

/// Displacements below this many pixels count as drift, not as a MOVE edit.
inline constexpr double kDriftThreshold = 3.0;
/// Per-tick speed cap. With at most kMaxTicks ticks the accumulated drift of
/// any object stays below kDriftThreshold.
inline constexpr double kMaxSpeed = 0.04;
inline constexpr int kMaxTicks = 60;

struct TimedEdit {
  int tick = 0;
  EditOp op;
};

struct Trajectory {
  std::vector<SceneState> states;
  std::vector<TimedEdit> events;
};

namespace detail {

inline Vec2 random_velocity(Rng& rng, double max_speed) {
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double speed = rng.uniform(0.0, max_speed);
  return {speed * std::cos(angle), speed * std::sin(angle)};
}

inline bool descriptor_used(const SceneState& s, Descriptor d) {
  for (const auto& o : s.objects)
    if (o.descriptor() == d) return true;
  return false;
}

inline Descriptor random_free_descriptor(const SceneState& s, Rng& rng) {
  std::vector<Descriptor> free;
  for (int k = 0; k < kNumShapes; ++k)
    for (int c = 0; c < kNumColors; ++c) {
      Descriptor d{static_cast<Shape>(k), static_cast<Color>(c)};
      if (!descriptor_used(s, d)) free.push_back(d);
    }
  return free[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(free.size()) - 1))];
}

inline void drift(SceneState& s) {
  for (auto& o : s.objects) {
    o.center.x += o.velocity.x;
    o.center.y += o.velocity.y;
    const double lo = o.radius;
    const double hi_x = s.width - o.radius;
    const double hi_y = s.height - o.radius;
    if (o.center.x < lo) { o.center.x = 2 * lo - o.center.x; o.velocity.x = -o.velocity.x; }
    if (o.center.x > hi_x) { o.center.x = 2 * hi_x - o.center.x; o.velocity.x = -o.velocity.x; }
    if (o.center.y < lo) { o.center.y = 2 * lo - o.center.y; o.velocity.y = -o.velocity.y; }
    if (o.center.y > hi_y) { o.center.y = 2 * hi_y - o.center.y; o.velocity.y = -o.velocity.y; }
  }
}

inline std::vector<int> valid_radii_for(const SceneState& s, const SceneObject& o) {
  std::vector<int> out;
  for (int r : kRadii)
    if (r != o.radius && in_bounds(o.center, r, s.height, s.width)) out.push_back(r);
  return out;
}

/// Draws one valid edit for the current state. Keeps kind+color unique.
inline EditOp random_event(const SceneState& s, int& next_id, Rng& rng) {
  std::vector<EditKind> kinds;
  const int n = static_cast<int>(s.objects.size());
  if (n < kMaxObjects) kinds.push_back(EditKind::kAdd);
  if (n > 0) {
    kinds.push_back(EditKind::kRemove);
    kinds.push_back(EditKind::kRecolor);
    kinds.push_back(EditKind::kMoveJump);
    for (const auto& o : s.objects)
      if (!valid_radii_for(s, o).empty()) {
        kinds.push_back(EditKind::kResize);
        break;
      }
  }
  EditOp op;
  op.op = kinds[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(kinds.size()) - 1))];
  auto pick_object = [&]() -> const SceneObject& {
    return s.objects[static_cast<size_t>(rng.uniform_int(0, n - 1))];
  };
  switch (op.op) {
    case EditKind::kAdd:
      op.subject = random_free_descriptor(s, rng);
      op.new_radius = kRadii[static_cast<size_t>(rng.uniform_int(0, 2))];
      op.region = static_cast<Region>(rng.uniform_int(0, 8));
      op.object_id = next_id++;
      break;
    case EditKind::kRemove: {
      const auto& o = pick_object();
      op.subject = o.descriptor();
      op.object_id = o.id;
      break;
    }
    case EditKind::kRecolor: {
      const auto& o = pick_object();
      op.subject = o.descriptor();
      op.object_id = o.id;
      std::vector<Color> colors;
      for (int c = 0; c < kNumColors; ++c)
        if (!descriptor_used(s, {o.kind, static_cast<Color>(c)})) colors.push_back(static_cast<Color>(c));
      op.new_color = colors[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(colors.size()) - 1))];
      break;
    }
    case EditKind::kResize: {
      std::vector<const SceneObject*> eligible;
      for (const auto& o : s.objects)
        if (!valid_radii_for(s, o).empty()) eligible.push_back(&o);
      const auto& o = *eligible[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(eligible.size()) - 1))];
      const auto radii = valid_radii_for(s, o);
      op.subject = o.descriptor();
      op.object_id = o.id;
      op.new_radius = radii[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(radii.size()) - 1))];
      break;
    }
    case EditKind::kMoveJump: {
      const auto& o = pick_object();
      op.subject = o.descriptor();
      op.object_id = o.id;
      const int here = static_cast<int>(region_of(o.center, s.height, s.width));
      int target = rng.uniform_int(0, 7);
      if (target >= here) ++target;
      op.region = static_cast<Region>(target);
      break;
    }
  }
  return op;
}

}  // namespace detail

/// Random initial scene with 1..3 objects of distinct kind+color.
inline SceneState random_scene(Rng& rng, int min_objects = 1, int max_objects = 3, double max_speed = kMaxSpeed,
                               int height = kCanvas, int width = kCanvas) {
  SceneState s;
  s.height = height;
  s.width = width;
  const int count = rng.uniform_int(min_objects, max_objects);
  for (int i = 0; i < count; ++i) {
    SceneObject o;
    o.id = i;
    const Descriptor d = detail::random_free_descriptor(s, rng);
    o.kind = d.kind;
    o.color = d.color;
    o.radius = kRadii[static_cast<size_t>(rng.uniform_int(0, 2))];
    o.center = {rng.uniform(o.radius, width - o.radius), rng.uniform(o.radius, height - o.radius)};
    o.velocity = detail::random_velocity(rng, max_speed);
    s.objects.push_back(o);
  }
  return s;
}

/// Simulates `ticks` states. State 0 is the initial scene; at every later
/// tick objects drift and, with probability `event_rate`, one edit fires.
/// `max_speed` = 0 gives a drift-free trajectory.
inline Trajectory simulate_trajectory(uint64_t seed, int ticks, double event_rate, double max_speed = kMaxSpeed) {
  require(ticks >= 2, "ticks must be >= 2 (got " + std::to_string(ticks) + ")");
  require(ticks <= kMaxTicks, "ticks must be <= " + std::to_string(kMaxTicks));
  require(event_rate >= 0.0 && event_rate <= 1.0, "event_rate must lie in [0, 1]");
  Rng rng(seed);
  Trajectory traj;
  require(max_speed >= 0.0 && max_speed <= kMaxSpeed, "max_speed out of range");
  SceneState state = random_scene(rng, 1, 3, max_speed);
  int next_id = state.max_id() + 1;
  traj.states.push_back(state);
  for (int t = 1; t < ticks; ++t) {
    detail::drift(state);
    if (rng.bernoulli(event_rate)) {
      EditOp op = detail::random_event(state, next_id, rng);
      apply_op(state, op);
      if (op.op == EditKind::kAdd) state.find(op.object_id)->velocity = detail::random_velocity(rng, max_speed);
      traj.events.push_back({t, op});
    }
    traj.states.push_back(state);
  }
  return traj;
}

struct EqualInterval {
  int step = 1;
};
struct FixedFrame {
  int count = 2;
};
using SamplingStrategy = std::variant<EqualInterval, FixedFrame>;

/// Frame indices for a trajectory of length `ticks`.
inline std::vector<int> sample_frames(int ticks, const SamplingStrategy& strategy) {
  require(ticks >= 1, "empty trajectory");
  std::vector<int> idx;
  if (const auto* eq = std::get_if<EqualInterval>(&strategy)) {
    require(eq->step > 0, "equal-interval step must be positive");
    for (int i = 0; i < ticks; i += eq->step) idx.push_back(i);
    return idx;
  }
  const int n = std::get<FixedFrame>(strategy).count;
  require(n >= 2 && n <= 6, "fixed-frame count must lie in [2, 6]");
  require(n <= ticks, "fixed-frame count exceeds trajectory length");
  const double spacing = static_cast<double>(ticks - 1) / (n - 1);
  for (int k = 0; k < n; ++k) idx.push_back(static_cast<int>(std::lround(k * spacing)));
  // Rounding may collide only when spacing < 1; re-spread from the left.
  for (size_t k = 1; k < idx.size(); ++k)
    if (idx[k] <= idx[k - 1]) idx[k] = idx[k - 1] + 1;
  return idx;
}

inline std::vector<int> sample_frames(const Trajectory& traj, const SamplingStrategy& strategy) {
  return sample_frames(static_cast<int>(traj.states.size()), strategy);
}

struct Transition {
  std::vector<EditOp> ops;
  std::string instruction;
};

/// Describes how to get from `a` to `b`. Objects are tracked by id; ops are
/// ordered so that applying them by descriptor (as a reader of the
/// instruction would) reproduces `b` up to drift. Throws AmbiguousSubject
/// when that reading is not unique.
inline Transition diff_states(const SceneState& a, const SceneState& b) {
  Transition tr;
  for (const auto& oa : a.objects) {
    const SceneObject* ob = b.find(oa.id);
    EditOp base;
    base.subject = oa.descriptor();
    base.object_id = oa.id;
    if (ob == nullptr) {
      base.op = EditKind::kRemove;
      tr.ops.push_back(base);
      continue;
    }
    if (ob->kind != oa.kind) throw ValidationError("object " + std::to_string(oa.id) + " changed kind");
    if (ob->radius != oa.radius) {
      EditOp op = base;
      op.op = EditKind::kResize;
      op.new_radius = ob->radius;
      tr.ops.push_back(op);
    }
    if (std::hypot(ob->center.x - oa.center.x, ob->center.y - oa.center.y) >= kDriftThreshold) {
      EditOp op = base;
      op.op = EditKind::kMoveJump;
      op.region = region_of(ob->center, b.height, b.width);
      tr.ops.push_back(op);
    }
    if (ob->color != oa.color) {
      EditOp op = base;
      op.op = EditKind::kRecolor;
      op.new_color = ob->color;
      tr.ops.push_back(op);
    }
  }
  for (const auto& ob : b.objects) {
    if (a.find(ob.id) != nullptr) continue;
    EditOp op;
    op.op = EditKind::kAdd;
    op.subject = ob.descriptor();
    op.new_radius = ob.radius;
    op.region = region_of(ob.center, b.height, b.width);
    op.object_id = ob.id;
    tr.ops.push_back(op);
  }
  // Replay by descriptor to reject instructions whose subjects are ambiguous.
  SceneState replay = a;
  for (EditOp op : tr.ops) {
    const int id = op.object_id;
    if (op.op != EditKind::kAdd) {
      op.object_id = -1;
      const SceneObject* hit = resolve_subject(replay, op);
      if (hit->id != id) throw AmbiguousSubject("subject " + describe(op.subject) + " resolves to the wrong object");
    }
    apply_op(replay, op);
  }
  tr.instruction = render_instruction(tr.ops);
  return tr;
}

/// Region-of-edit masks: source = footprints in `a` of objects removed or
/// changed, target = footprints in `b` of objects added or changed.
inline std::pair<RoEMask, RoEMask> roe_masks(const SceneState& a, const SceneState& b,
                                             const std::vector<EditOp>& ops) {
  RoEMask src(a.height, a.width);
  RoEMask tgt(b.height, b.width);
  std::set<int> src_ids, tgt_ids;
  for (const auto& op : ops) {
    int id = op.object_id;
    if (op.op == EditKind::kAdd) {
      if (id < 0) {
        SceneState copy = b;
        EditOp probe = op;
        id = resolve_subject(copy, probe)->id;
      }
      tgt_ids.insert(id);
      continue;
    }
    if (id < 0) {
      SceneState copy = a;
      id = resolve_subject(copy, op)->id;
    }
    src_ids.insert(id);
    if (op.op != EditKind::kRemove) tgt_ids.insert(id);
  }
  for (int id : src_ids)
    if (const auto* o = a.find(id)) src |= footprint(*o, a.height, a.width);
  for (int id : tgt_ids)
    if (const auto* o = b.find(id)) tgt |= footprint(*o, b.height, b.width);
  return {src, tgt};
}

struct TurnRecord {
  SceneState source_state;
  SceneState target_state;
  Frame source_frame;
  Frame target_frame;
  std::vector<TokenId> instruction_tokens;
  std::vector<EditOp> ops;
  RoEMask roe_src;
  RoEMask roe_tgt;
  bool has_roe = false;
};

struct SessionRecord {
  uint64_t session_id = 0;
  uint64_t seed = 0;
  bool has_roe = false;
  std::vector<TurnRecord> turns;

  int image_count() const { return static_cast<int>(turns.size()) + 1; }
};

struct SessionConfig {
  int min_images = 2;
  int max_images = 6;
  double fixed_frame_prob = 0.5;
  double roe_prob = 0.8;
  double event_rate = 0.15;
  int min_step = 4;
  int max_step = 10;
  int max_ticks = 50;
  int max_retries = 16;

  void validate() const {
    require(min_images >= 2 && min_images <= max_images && max_images <= 20,
            "image count range must satisfy 2 <= min <= max <= 20");
    require(fixed_frame_prob >= 0 && fixed_frame_prob <= 1, "fixed_frame_prob must lie in [0, 1]");
    require(roe_prob >= 0 && roe_prob <= 1, "roe_prob must lie in [0, 1]");
    require(event_rate >= 0 && event_rate <= 1, "event_rate must lie in [0, 1]");
    require(min_step >= 1 && min_step <= max_step, "step range invalid");
    require(max_step * (max_images - 1) + 1 <= kMaxTicks, "step range too long for the drift budget");
    require(max_ticks >= max_images && max_ticks <= kMaxTicks, "max_ticks out of range");
    require(max_retries >= 1, "max_retries must be >= 1");
  }
};

/// The per-session RoE draw; the first thing build_session decides.
inline bool session_has_roe(uint64_t seed, double roe_prob) { return Rng(derive_seed(seed, 1)).bernoulli(roe_prob); }

/// One training session, deterministic in `seed`.
inline SessionRecord build_session(uint64_t seed, const SessionConfig& config, const Vocabulary& vocab,
                                   uint64_t session_id = 0) {
  config.validate();
  SessionRecord rec;
  rec.session_id = session_id;
  rec.seed = seed;
  rec.has_roe = session_has_roe(seed, config.roe_prob);
  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    Rng rng(derive_seed(seed, 100 + static_cast<uint64_t>(attempt)));
    const int images = rng.uniform_int(config.min_images, config.max_images);
    const bool fixed = images <= 6 && rng.bernoulli(config.fixed_frame_prob);
    int ticks = 0;
    SamplingStrategy strategy;
    if (fixed) {
      ticks = rng.uniform_int(std::max(images, 10), config.max_ticks);
      strategy = FixedFrame{images};
    } else {
      const int step = rng.uniform_int(config.min_step, config.max_step);
      ticks = step * (images - 1) + 1;
      strategy = EqualInterval{step};
    }
    const Trajectory traj =
        simulate_trajectory(derive_seed(seed, 200 + static_cast<uint64_t>(attempt)), ticks, config.event_rate);
    const std::vector<int> idx = sample_frames(traj, strategy);
    std::vector<TurnRecord> turns;
    bool ambiguous = false;
    for (size_t k = 0; k + 1 < idx.size(); ++k) {
      const SceneState& a = traj.states[static_cast<size_t>(idx[k])];
      const SceneState& b = traj.states[static_cast<size_t>(idx[k + 1])];
      Transition tr;
      try {
        tr = diff_states(a, b);
      } catch (const AmbiguousSubject&) {
        ambiguous = true;
        break;
      }
      TurnRecord turn;
      turn.source_state = a;
      turn.target_state = b;
      turn.source_frame = turns.empty() ? render(a) : turns.back().target_frame;
      turn.target_frame = render(b);
      turn.instruction_tokens = vocab.tokenize(tr.instruction);
      turn.has_roe = rec.has_roe;
      if (rec.has_roe) {
        auto [src, tgt] = roe_masks(a, b, tr.ops);
        turn.roe_src = std::move(src);
        turn.roe_tgt = std::move(tgt);
      } else {
        turn.roe_src = RoEMask(a.height, a.width);
        turn.roe_tgt = RoEMask(b.height, b.width);
      }
      turn.ops = std::move(tr.ops);
      turns.push_back(std::move(turn));
    }
    if (ambiguous) continue;
    rec.turns = std::move(turns);
    return rec;
  }
  throw ValidationError("session seed " + std::to_string(seed) + ": every attempt produced an ambiguous turn");
}

}  // namespace ctxedit
