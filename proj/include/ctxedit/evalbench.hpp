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

// Oracle judging of multi-turn edits, early-termination scoring, pixel
// metrics and the ablation grid.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctxedit/common.hpp"
#include "ctxedit/sampler.hpp"
#include "ctxedit/synthworld.hpp"
#include "json.hpp"

namespace ctxedit {

struct JudgeConfig {
  double detect_iou = 0.5;        // color-matched IoU for an expected object to count as present
  int blob_pixels = 20;           // smallest unexpected blob that fails prompt following
  double consistency_mae = 0.05;  // mean absolute error allowed outside the edit region
  double color_tolerance = 0.15;  // L-inf distance for a pixel to match a palette or background color
};

struct TurnReport {
  std::string reason;
  int prompt_following = 0;
  int consistency = 0;
  int all = 0;
};

namespace detail {

inline float linf(const Frame& f, int y, int x, const Rgb& c) {
  return std::max({std::abs(f.at(y, x, 0) - c.r), std::abs(f.at(y, x, 1) - c.g), std::abs(f.at(y, x, 2) - c.b)});
}

/// Sizes of 4-connected components of `m`.
inline std::vector<int> component_sizes(const Bitmap& m) {
  std::vector<int> sizes;
  std::vector<uint8_t> seen(m.bits.size(), 0);
  std::vector<int> stack;
  for (int start = 0; start < static_cast<int>(m.bits.size()); ++start) {
    if (!m.bits[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
    int size = 0;
    stack.assign(1, start);
    seen[static_cast<size_t>(start)] = 1;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      ++size;
      const int y = i / m.width, x = i % m.width;
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& p : nb) {
        if (p[0] < 0 || p[1] < 0 || p[0] >= m.height || p[1] >= m.width) continue;
        const int j = p[0] * m.width + p[1];
        if (m.bits[static_cast<size_t>(j)] && !seen[static_cast<size_t>(j)]) {
          seen[static_cast<size_t>(j)] = 1;
          stack.push_back(j);
        }
      }
    }
    sizes.push_back(size);
  }
  return sizes;
}

}  // namespace detail

inline double mask_iou(const Bitmap& a, const Bitmap& b) {
  require(a.height == b.height && a.width == b.width, "mask shape mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] && b.bits[i];
    uni += a.bits[i] || b.bits[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Exact stand-in for a vision-language judge on the synthetic world.
inline TurnReport oracle_judge(const Frame& generated, const Frame& reference, const SceneState& expected,
                               const RoEMask& roe_union, const JudgeConfig& cfg = {}) {
  require(generated.height == reference.height && generated.width == reference.width &&
              generated.height == expected.height && generated.width == expected.width &&
              roe_union.height == generated.height && roe_union.width == generated.width,
          "judge inputs differ in shape");
  const int h = generated.height, w = generated.width;
  TurnReport rep;
  std::ostringstream why;

  // Prompt following: every expected object present, nothing extra.
  bool follows = true;
  for (const auto& o : expected.objects) {
    const Bitmap fp = visible_footprint(expected, o.id);
    if (fp.empty()) continue;  // fully occluded: nothing to detect
    const Rgb c = kPalette[static_cast<int>(o.color)];
    Bitmap others(h, w);
    for (const auto& p : expected.objects)
      if (p.id != o.id && p.color == o.color) others |= visible_footprint(expected, p.id);
    Bitmap found(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        found.at(y, x) = !others.at(y, x) && detail::linf(generated, y, x, c) <= cfg.color_tolerance;
    const double iou = mask_iou(fp, found);
    if (iou < cfg.detect_iou) {
      follows = false;
      why << describe(o.descriptor()) << " not found (IoU " << iou << "); ";
    }
  }
  // A blob is any region whose color disagrees with the expected render;
  // outside the footprints that is exactly a non-background blob.
  const Frame want = render(expected);
  Bitmap stray(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Rgb e{want.at(y, x, 0), want.at(y, x, 1), want.at(y, x, 2)};
      stray.at(y, x) = detail::linf(generated, y, x, e) > cfg.color_tolerance;
    }
  int largest = 0;
  for (int s : detail::component_sizes(stray)) largest = std::max(largest, s);
  if (largest >= cfg.blob_pixels) {
    follows = false;
    why << "unexpected blob of " << largest << " px; ";
  }

  // Consistency outside the edit region.
  double err = 0.0;
  size_t n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (roe_union.at(y, x)) continue;
      for (int ch = 0; ch < 3; ++ch) err += std::abs(generated.at(y, x, ch) - reference.at(y, x, ch));
      n += 3;
    }
  const double mae = n ? err / static_cast<double>(n) : 0.0;
  const bool consistent = mae <= cfg.consistency_mae;
  if (!consistent) why << "unchanged region drifted (MAE " << mae << "); ";

  rep.prompt_following = follows ? 1 : 0;
  rep.consistency = consistent ? 1 : 0;
  rep.all = rep.prompt_following & rep.consistency;
  rep.reason = rep.all ? "ok" : why.str();
  return rep;
}

// ---------------------------------------------------------------------------
// Suite.

struct SuiteTurn {
  EditOp op;
  std::string instruction;
  SceneState expected;
  RoEMask roe_src;
  RoEMask roe_tgt;
  RoEMask roe_union;
};

struct SuiteSession {
  EditKind category = EditKind::kAdd;  // kind of the first edit
  SceneState source;
  std::vector<SuiteTurn> turns;
};

struct BenchmarkSuite {
  uint64_t seed = 0;
  std::vector<SuiteSession> sessions;
};

/// A suite session as a training record with exact masks, for overfit runs.
inline SessionRecord to_record(const SuiteSession& s, const Vocabulary& vocab, uint64_t id = 0) {
  SessionRecord rec;
  rec.session_id = id;
  rec.has_roe = true;
  SceneState prev = s.source;
  for (const auto& t : s.turns) {
    TurnRecord tr;
    tr.source_state = prev;
    tr.target_state = t.expected;
    tr.source_frame = rec.turns.empty() ? render(prev) : rec.turns.back().target_frame;
    tr.target_frame = render(t.expected);
    tr.instruction_tokens = vocab.tokenize(t.instruction);
    tr.ops = {t.op};
    tr.roe_src = t.roe_src;
    tr.roe_tgt = t.roe_tgt;
    tr.has_roe = true;
    rec.turns.push_back(std::move(tr));
    prev = t.expected;
  }
  return rec;
}

/// Edits hidden by occlusion cannot be judged from pixels; suite edits
/// change at least this many pixels.
inline constexpr int kMinVisibleChange = 20;

inline int changed_pixels(const Frame& a, const Frame& b) {
  require(a.height == b.height && a.width == b.width, "frame shape mismatch");
  int n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x)
      n += a.at(y, x, 0) != b.at(y, x, 0) || a.at(y, x, 1) != b.at(y, x, 1) || a.at(y, x, 2) != b.at(y, x, 2);
  return n;
}

namespace detail {

/// A single-op transition of kind `want` when one can be drawn, else any.
inline std::optional<std::pair<EditOp, SceneState>> draw_edit(const SceneState& s, int& next_id, Rng& rng,
                                                             std::optional<EditKind> want) {
  for (int attempt = 0; attempt < 256; ++attempt) {
    int id = next_id;
    const EditOp op = random_event(s, id, rng);
    if (want && op.op != *want && attempt < 192) continue;
    SceneState b = apply_ops(s, {op});
    if (changed_pixels(render(s), render(b)) < kMinVisibleChange) continue;
    try {
      const Transition tr = diff_states(s, b);
      if (tr.ops.size() != 1) continue;
    } catch (const AmbiguousSubject&) {
      continue;
    }
    next_id = id;
    return std::make_pair(op, std::move(b));
  }
  return std::nullopt;
}

}  // namespace detail

/// Drift-free sessions; session i starts with an edit of kind i mod 5.
inline BenchmarkSuite make_suite(int sessions, int turns, uint64_t seed, int height = kCanvas, int width = kCanvas) {
  require(sessions >= 1 && turns >= 1, "suite needs at least one session and one turn");
  BenchmarkSuite suite;
  suite.seed = seed;
  for (int i = 0; i < sessions; ++i) {
    const auto want = static_cast<EditKind>(i % kNumEditKinds);
    for (uint64_t attempt = 0;; ++attempt) {
      require(attempt < 1000, "could not build suite session " + std::to_string(i));
      Rng rng(derive_seed(seed, static_cast<uint64_t>(i) * 1000 + attempt));
      SuiteSession ss;
      ss.category = want;
      ss.source = random_scene(rng, 1, 3, 0.0, height, width);
      SceneState cur = ss.source;
      int next_id = cur.max_id() + 1;
      bool ok = true;
      for (int t = 0; t < turns && ok; ++t) {
        const auto e = detail::draw_edit(cur, next_id, rng, t == 0 ? std::optional(want) : std::nullopt);
        if (!e || (t == 0 && e->first.op != want)) {
          ok = false;
          break;
        }
        SuiteTurn st;
        st.op = e->first;
        st.instruction = render_instruction({st.op});
        st.expected = e->second;
        auto [src, tgt] = roe_masks(cur, st.expected, {st.op});
        st.roe_union = src;
        st.roe_union |= tgt;
        st.roe_src = std::move(src);
        st.roe_tgt = std::move(tgt);
        cur = st.expected;
        ss.turns.push_back(std::move(st));
      }
      if (!ok) continue;
      suite.sessions.push_back(std::move(ss));
      break;
    }
  }
  return suite;
}

// ---------------------------------------------------------------------------
// Scoring.

struct SessionReport {
  int turns = 0;                    // turns in the suite entry
  std::vector<TurnReport> reports;  // judged turns; later turns were not evaluated

  int evaluated() const { return static_cast<int>(reports.size()); }
  /// Consecutive successful turns from the start.
  int passed() const {
    int k = 0;
    while (k < evaluated() && reports[static_cast<size_t>(k)].all) ++k;
    return k;
  }
};

/// Judges turns in order and stops at the first failure. `frame(t)` yields
/// the generated frame of turn t (0-based) and is never called past a failure.
inline SessionReport eval_session_lazy(const SuiteSession& entry, const std::function<Frame(int)>& frame,
                                       const JudgeConfig& cfg = {}) {
  SessionReport rep;
  rep.turns = static_cast<int>(entry.turns.size());
  Frame reference = render(entry.source);
  for (int t = 0; t < rep.turns; ++t) {
    const SuiteTurn& st = entry.turns[static_cast<size_t>(t)];
    const Frame generated = frame(t);
    rep.reports.push_back(oracle_judge(generated, reference, st.expected, st.roe_union, cfg));
    if (!rep.reports.back().all) break;
    reference = generated;
  }
  return rep;
}

inline SessionReport eval_session(const std::vector<Frame>& frames, const SuiteSession& entry,
                                  const JudgeConfig& cfg = {}) {
  require(frames.size() == entry.turns.size(), "trace and suite entry differ in turn count");
  return eval_session_lazy(entry, [&](int t) { return frames[static_cast<size_t>(t)]; }, cfg);
}

inline SessionReport eval_session(const SessionTrace& trace, const SuiteSession& entry, const JudgeConfig& cfg = {}) {
  std::vector<Frame> frames;
  for (const auto* t : trace.edits()) frames.push_back(t->frame);
  return eval_session(frames, entry, cfg);
}

/// rate(k): fraction of sessions whose turns 1..k all succeeded; turns never
/// evaluated count as failures.
inline std::vector<double> success_rates(const std::vector<SessionReport>& reports) {
  require(!reports.empty(), "no session reports");
  int turns = 0;
  for (const auto& r : reports) turns = std::max(turns, r.turns);
  std::vector<double> rates(static_cast<size_t>(turns), 0.0);
  for (const auto& r : reports)
    for (int k = 0; k < r.passed(); ++k) rates[static_cast<size_t>(k)] += 1.0;
  for (auto& x : rates) x /= static_cast<double>(reports.size());
  return rates;
}

struct PixelMetrics {
  double l1 = 0.0, l2 = 0.0;
  double l1_unchanged = 0.0, l2_unchanged = 0.0;
  std::optional<double> mask_iou;
};

inline PixelMetrics pixel_metrics(const Frame& generated, const Frame& reference, const RoEMask& roe_union,
                                  const std::optional<RoEMask>& generated_mask = std::nullopt,
                                  const std::optional<RoEMask>& reference_mask = std::nullopt) {
  require(generated.height == reference.height && generated.width == reference.width &&
              roe_union.height == generated.height && roe_union.width == generated.width,
          "metric inputs differ in shape");
  PixelMetrics m;
  double s1 = 0, s2 = 0, u1 = 0, u2 = 0;
  size_t n = 0, nu = 0;
  for (int y = 0; y < generated.height; ++y)
    for (int x = 0; x < generated.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double d = static_cast<double>(generated.at(y, x, c)) - reference.at(y, x, c);
        s1 += std::abs(d), s2 += d * d, ++n;
        if (!roe_union.at(y, x)) u1 += std::abs(d), u2 += d * d, ++nu;
      }
  m.l1 = s1 / static_cast<double>(n);
  m.l2 = s2 / static_cast<double>(n);
  m.l1_unchanged = nu ? u1 / static_cast<double>(nu) : 0.0;
  m.l2_unchanged = nu ? u2 / static_cast<double>(nu) : 0.0;
  if (generated_mask) {
    require(reference_mask.has_value(), "mask IoU needs a reference mask");
    m.mask_iou = mask_iou(*generated_mask, *reference_mask);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Benchmark runs.

struct CellResult {
  std::vector<double> rates;
  double turn1_l1 = 0.0, turn1_l2 = 0.0;          // vs the expected render
  double turn1_l1_unchanged = 0.0;                // vs the source, outside the edit region
  std::optional<double> turn1_cur_mask_iou_median;
  std::vector<SessionReport> reports;
};

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of nothing");
  std::sort(v.begin(), v.end());
  const size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Samples and judges every session; generation stops at a session's first
/// failure since later turns are never judged.
template <typename T>
CellResult run_suite(const ModelParams<T>& params, const Vocabulary& vocab, const BenchmarkSuite& suite,
                     const SampleConfig& sample, const JudgeConfig& judge = {}, int workers = 1) {
  const size_t n = suite.sessions.size();
  struct Turn1 {
    PixelMetrics full, vs_source;
    std::optional<double> iou;
  };
  std::vector<SessionReport> reports(n);
  std::vector<Turn1> first(n);
  parallel_for(n, workers, [&](size_t i) {
    const SuiteSession& entry = suite.sessions[i];
    SampleConfig sc = sample;
    sc.seed = derive_seed(sample.seed, i);
    SessionRunner<T> runner(params, vocab, sc);
    const Frame source = render(entry.source);
    runner.begin(source);
    auto frame = [&](int t) {
      const TurnTrace& tt = runner.step(vocab.tokenize(entry.turns[static_cast<size_t>(t)].instruction));
      if (t == 0) {
        const SuiteTurn& st = entry.turns.front();
        first[i].full = pixel_metrics(tt.frame, render(st.expected), st.roe_union);
        first[i].vs_source = pixel_metrics(tt.frame, source, st.roe_union);
        if (tt.cur_mask) first[i].iou = mask_iou(*tt.cur_mask, st.roe_src);
      }
      return tt.frame;
    };
    reports[i] = eval_session_lazy(entry, frame, judge);
  });
  CellResult cell;
  cell.reports = std::move(reports);
  cell.rates = success_rates(cell.reports);
  std::vector<double> ious;
  for (const auto& f : first) {
    cell.turn1_l1 += f.full.l1 / static_cast<double>(n);
    cell.turn1_l2 += f.full.l2 / static_cast<double>(n);
    cell.turn1_l1_unchanged += f.vs_source.l1_unchanged / static_cast<double>(n);
    if (f.iou) ious.push_back(*f.iou);
  }
  if (!ious.empty()) cell.turn1_cur_mask_iou_median = median(ious);
  return cell;
}

struct AblationGrid {
  std::vector<bool> context = {true, false};
  std::vector<bool> dummy = {false, true};
  std::vector<ChainMode> modes = {kChainModes.begin(), kChainModes.end()};
};

inline nlohmann::json cell_json(const CellResult& c) {
  nlohmann::json j;
  j["rates"] = c.rates;
  j["turn1_l1"] = c.turn1_l1;
  j["turn1_l2"] = c.turn1_l2;
  j["turn1_l1_unchanged"] = c.turn1_l1_unchanged;
  j["turn1_cur_mask_iou_median"] =
      c.turn1_cur_mask_iou_median ? nlohmann::json(*c.turn1_cur_mask_iou_median) : nlohmann::json(nullptr);
  std::vector<int> passed;
  for (const auto& r : c.reports) passed.push_back(r.passed());
  j["passed_turns"] = passed;
  return j;
}

/// {context} x {dummy} x {mode} x {model}; `models` maps a label (e.g. the
/// training-set size) to parameters. One JSON report with a cell per point.
template <typename T>
nlohmann::json run_ablations(const std::map<std::string, const ModelParams<T>*>& models, const Vocabulary& vocab,
                             const BenchmarkSuite& suite, const SampleConfig& sample, const AblationGrid& grid,
                             const JudgeConfig& judge = {}, int workers = 1) {
  require(!models.empty() && !grid.context.empty() && !grid.dummy.empty() && !grid.modes.empty(),
          "empty ablation grid");
  nlohmann::json report;
  report["suite_sessions"] = suite.sessions.size();
  report["suite_seed"] = suite.seed;
  report["steps"] = sample.steps;
  report["cfg_scale"] = sample.cfg_scale;
  report["cells"] = nlohmann::json::array();
  for (const auto& [label, params] : models)
    for (bool ctx : grid.context)
      for (bool dummy : grid.dummy)
        for (ChainMode mode : grid.modes) {
          SampleConfig sc = sample;
          sc.use_context = ctx;
          sc.dummy_context = dummy;
          sc.mode = mode;
          nlohmann::json cell = cell_json(run_suite(*params, vocab, suite, sc, judge, workers));
          cell["model"] = label;
          cell["context"] = ctx;
          cell["dummy"] = dummy;
          cell["mode"] = chain_mode_name(mode);
          report["cells"].push_back(std::move(cell));
        }
  return report;
}

}  // namespace ctxedit
