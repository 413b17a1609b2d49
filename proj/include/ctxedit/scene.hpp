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

// Symbolic scene description of the shapes world, rasterization, and the
// edit operations that transform one scene into another.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctxedit/common.hpp"

namespace ctxedit {

enum class Shape : uint8_t { kCircle, kSquare, kTriangle };
inline constexpr int kNumShapes = 3;

enum class Color : uint8_t { kRed, kGreen, kBlue, kYellow, kCyan, kMagenta, kOrange, kPurple };
inline constexpr int kNumColors = 8;

struct Rgb {
  float r, g, b;
};

inline constexpr std::array<Rgb, kNumColors> kPalette = {{
    {0.90f, 0.10f, 0.10f},  // red
    {0.10f, 0.75f, 0.10f},  // green
    {0.10f, 0.20f, 0.90f},  // blue
    {0.95f, 0.90f, 0.10f},  // yellow
    {0.10f, 0.85f, 0.90f},  // cyan
    {0.90f, 0.10f, 0.85f},  // magenta
    {1.00f, 0.55f, 0.00f},  // orange
    {0.45f, 0.05f, 0.55f},  // purple
}};
inline constexpr Rgb kBackground = {0.5f, 0.5f, 0.5f};

inline constexpr std::array<int, 3> kRadii = {6, 10, 14};
inline constexpr int kDefaultAddRadius = 10;
inline constexpr int kMaxObjects = 4;
inline constexpr int kCanvas = 64;

inline const char* shape_name(Shape s) {
  static constexpr const char* names[] = {"circle", "square", "triangle"};
  return names[static_cast<int>(s)];
}

inline const char* color_name(Color c) {
  static constexpr const char* names[] = {"red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"};
  return names[static_cast<int>(c)];
}

inline const char* size_name(int radius) {
  switch (radius) {
    case 6: return "small";
    case 10: return "medium";
    case 14: return "large";
    default: throw ValidationError("radius " + std::to_string(radius) + " has no size word");
  }
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Vec2&) const = default;
};

struct Descriptor {
  Shape kind = Shape::kCircle;
  Color color = Color::kRed;
  bool operator==(const Descriptor&) const = default;
};

inline std::string describe(const Descriptor& d) {
  return std::string(color_name(d.color)) + " " + shape_name(d.kind);
}

struct SceneObject {
  int id = 0;
  Shape kind = Shape::kCircle;
  Color color = Color::kRed;
  Vec2 center;
  int radius = kDefaultAddRadius;
  Vec2 velocity;

  Descriptor descriptor() const { return {kind, color}; }
  bool operator==(const SceneObject&) const = default;
};

struct SceneState {
  std::vector<SceneObject> objects;  // kept sorted by id: draw order back-to-front
  int height = kCanvas;
  int width = kCanvas;

  bool operator==(const SceneState&) const = default;

  const SceneObject* find(int id) const {
    for (const auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }
  SceneObject* find(int id) {
    for (auto& o : objects)
      if (o.id == id) return &o;
    return nullptr;
  }
  int max_id() const {
    int m = -1;
    for (const auto& o : objects) m = std::max(m, o.id);
    return m;
  }
  void sort_by_id() {
    std::sort(objects.begin(), objects.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  }
};

/// 3x3 grid of named regions, row-major from upper-left.
enum class Region : uint8_t {
  kUpperLeft, kUpperCenter, kUpperRight,
  kMiddleLeft, kMiddleCenter, kMiddleRight,
  kLowerLeft, kLowerCenter, kLowerRight
};

inline const char* region_row_word(Region r) {
  static constexpr const char* rows[] = {"upper", "middle", "lower"};
  return rows[static_cast<int>(r) / 3];
}
inline const char* region_col_word(Region r) {
  static constexpr const char* cols[] = {"left", "center", "right"};
  return cols[static_cast<int>(r) % 3];
}

inline Region region_of(Vec2 p, int height, int width) {
  const int col = std::clamp(static_cast<int>(p.x / (width / 3.0)), 0, 2);
  const int row = std::clamp(static_cast<int>(p.y / (height / 3.0)), 0, 2);
  return static_cast<Region>(row * 3 + col);
}

inline Vec2 clamp_center(Vec2 p, int radius, int height, int width) {
  return {std::clamp(p.x, static_cast<double>(radius), static_cast<double>(width - radius)),
          std::clamp(p.y, static_cast<double>(radius), static_cast<double>(height - radius))};
}

/// Placement point of a region: the cell center pulled inside the canvas far
/// enough for the largest radius, so it is valid for every object size.
inline Vec2 region_anchor(Region r, int height, int width) {
  const int row = static_cast<int>(r) / 3;
  const int col = static_cast<int>(r) % 3;
  return clamp_center({(col + 0.5) * width / 3.0, (row + 0.5) * height / 3.0}, kRadii.back(), height, width);
}

inline bool in_bounds(Vec2 p, int radius, int height, int width) {
  return p.x >= radius && p.x <= width - radius && p.y >= radius && p.y <= height - radius;
}

/// Whether the pixel with center (px + 0.5, py + 0.5) lies inside the shape.
inline bool covers(const SceneObject& o, int px, int py) {
  const double dx = px + 0.5 - o.center.x;
  const double dy = py + 0.5 - o.center.y;
  const double r = o.radius;
  switch (o.kind) {
    case Shape::kCircle:
      return dx * dx + dy * dy < r * r;
    case Shape::kSquare:
      return std::abs(dx) < r && std::abs(dy) < r;
    case Shape::kTriangle: {
      // Apex at the top, base at center.y + r, base half-width r.
      if (dy <= -r || dy >= r) return false;
      return std::abs(dx) < r * (dy + r) / (2.0 * r);
    }
  }
  return false;
}

/// Binary H x W raster.
struct Bitmap {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> bits;

  Bitmap() = default;
  Bitmap(int h, int w) : height(h), width(w), bits(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int y, int x) { return bits[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return bits[static_cast<size_t>(y) * width + x]; }
  size_t count() const { return static_cast<size_t>(std::count(bits.begin(), bits.end(), uint8_t{1})); }
  bool empty() const { return count() == 0; }
  bool operator==(const Bitmap&) const = default;

  Bitmap& operator|=(const Bitmap& other) {
    require(height == other.height && width == other.width, "bitmap shape mismatch");
    for (size_t i = 0; i < bits.size(); ++i) bits[i] = bits[i] | other.bits[i];
    return *this;
  }
};

using RoEMask = Bitmap;

inline Bitmap footprint(const SceneObject& o, int height, int width) {
  Bitmap m(height, width);
  const int x0 = std::max(0, static_cast<int>(std::floor(o.center.x - o.radius - 1)));
  const int x1 = std::min(width - 1, static_cast<int>(std::ceil(o.center.x + o.radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(o.center.y - o.radius - 1)));
  const int y1 = std::min(height - 1, static_cast<int>(std::ceil(o.center.y + o.radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (covers(o, x, y)) m.at(y, x) = 1;
  return m;
}

/// H x W x 3 interleaved RGB in [0, 1].
struct Frame {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Frame() = default;
  Frame(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Frame&) const = default;
};

/// Deterministic rasterization; objects are painted in id order.
inline Frame render(const SceneState& state) {
  Frame f(state.height, state.width);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      f.at(y, x, 0) = kBackground.r;
      f.at(y, x, 1) = kBackground.g;
      f.at(y, x, 2) = kBackground.b;
    }
  std::vector<const SceneObject*> order;
  for (const auto& o : state.objects) order.push_back(&o);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });
  for (const auto* o : order) {
    const Bitmap m = footprint(*o, state.height, state.width);
    const Rgb c = kPalette[static_cast<int>(o->color)];
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x)
        if (m.at(y, x)) {
          f.at(y, x, 0) = c.r;
          f.at(y, x, 1) = c.g;
          f.at(y, x, 2) = c.b;
        }
  }
  return f;
}

/// Pixels where the object is the topmost painted shape.
inline Bitmap visible_footprint(const SceneState& state, int id) {
  const SceneObject* target = state.find(id);
  require(target != nullptr, "no object with id " + std::to_string(id));
  Bitmap m = footprint(*target, state.height, state.width);
  for (const auto& o : state.objects) {
    if (o.id <= id) continue;
    const Bitmap above = footprint(o, state.height, state.width);
    for (size_t i = 0; i < m.bits.size(); ++i)
      if (above.bits[i]) m.bits[i] = 0;
  }
  return m;
}

enum class EditKind : uint8_t { kAdd, kRemove, kRecolor, kResize, kMoveJump };
inline constexpr int kNumEditKinds = 5;

inline const char* edit_kind_name(EditKind k) {
  static constexpr const char* names[] = {"add", "remove", "recolor", "resize", "move"};
  return names[static_cast<int>(k)];
}

/// One discrete edit. `object_id` is tracking metadata (not part of the
/// instruction text); -1 means "resolve by descriptor".
struct EditOp {
  EditKind op = EditKind::kAdd;
  Descriptor subject;
  Color new_color = Color::kRed;           // RECOLOR
  int new_radius = kDefaultAddRadius;      // RESIZE, ADD
  Region region = Region::kMiddleCenter;   // ADD, MOVE_JUMP
  int object_id = -1;

  /// Equality of everything the instruction text expresses.
  bool same_edit(const EditOp& o) const {
    if (op != o.op || !(subject == o.subject)) return false;
    switch (op) {
      case EditKind::kAdd: return new_radius == o.new_radius && region == o.region;
      case EditKind::kRemove: return true;
      case EditKind::kRecolor: return new_color == o.new_color;
      case EditKind::kResize: return new_radius == o.new_radius;
      case EditKind::kMoveJump: return region == o.region;
    }
    return false;
  }
};

inline bool same_edits(const std::vector<EditOp>& a, const std::vector<EditOp>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (!a[i].same_edit(b[i])) return false;
  return true;
}

/// Raised when an edit's subject does not name exactly one object.
class AmbiguousSubject : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline SceneObject* resolve_subject(SceneState& state, const EditOp& op) {
  if (op.object_id >= 0) {
    SceneObject* o = state.find(op.object_id);
    if (o == nullptr) throw ValidationError("edit refers to missing object id " + std::to_string(op.object_id));
    return o;
  }
  SceneObject* match = nullptr;
  int count = 0;
  for (auto& o : state.objects)
    if (o.descriptor() == op.subject) {
      match = &o;
      ++count;
    }
  if (count == 0) throw ValidationError("no " + describe(op.subject) + " in scene");
  if (count > 1) throw AmbiguousSubject("more than one " + describe(op.subject) + " in scene");
  return match;
}

/// Applies one edit in place. ADD and MOVE_JUMP place the object at the
/// region anchor; velocity is preserved (new objects are static).
inline void apply_op(SceneState& state, const EditOp& op) {
  switch (op.op) {
    case EditKind::kAdd: {
      require(static_cast<int>(state.objects.size()) < kMaxObjects, "scene already holds the maximum object count");
      SceneObject o;
      o.id = op.object_id >= 0 ? op.object_id : state.max_id() + 1;
      require(state.find(o.id) == nullptr, "duplicate object id " + std::to_string(o.id));
      o.kind = op.subject.kind;
      o.color = op.subject.color;
      o.radius = op.new_radius;
      o.center = region_anchor(op.region, state.height, state.width);
      state.objects.push_back(o);
      state.sort_by_id();
      break;
    }
    case EditKind::kRemove: {
      SceneObject* o = resolve_subject(state, op);
      const int id = o->id;
      std::erase_if(state.objects, [id](const SceneObject& x) { return x.id == id; });
      break;
    }
    case EditKind::kRecolor:
      resolve_subject(state, op)->color = op.new_color;
      break;
    case EditKind::kResize: {
      SceneObject* o = resolve_subject(state, op);
      o->radius = op.new_radius;
      o->center = clamp_center(o->center, o->radius, state.height, state.width);
      break;
    }
    case EditKind::kMoveJump: {
      SceneObject* o = resolve_subject(state, op);
      o->center = region_anchor(op.region, state.height, state.width);
      break;
    }
  }
}

inline SceneState apply_ops(SceneState state, const std::vector<EditOp>& ops) {
  for (const auto& op : ops) apply_op(state, op);
  return state;
}

}  // namespace ctxedit
