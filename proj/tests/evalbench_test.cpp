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

#include <gtest/gtest.h>

#include <set>

#include "ctxedit/evalbench.hpp"
#include "micro_model.hpp"

namespace ctxedit {
namespace {

using testing::vocab;

const BenchmarkSuite& suite() {
  static const BenchmarkSuite s = make_suite(100, 5, 2026);
  return s;
}

std::vector<Frame> perfect_frames(const SuiteSession& s) {
  std::vector<Frame> out;
  for (const auto& t : s.turns) out.push_back(render(t.expected));
  return out;
}

Frame noisy(const Frame& f, const std::vector<float>& n, double sigma) {
  Frame g = f;
  for (size_t i = 0; i < g.pixels.size(); ++i)
    g.pixels[i] = std::clamp(g.pixels[i] + static_cast<float>(sigma) * n[i], 0.0f, 1.0f);
  return g;
}

// -- judge ---------------------------------------------------------------------------

TEST(OracleJudge, PerfectEditsPassEverywhere) {
  for (const auto& s : suite().sessions) {
    Frame prev = render(s.source);
    for (const auto& t : s.turns) {
      const Frame gen = render(t.expected);
      const auto r = oracle_judge(gen, prev, t.expected, t.roe_union);
      ASSERT_EQ(r.all, 1) << t.instruction << ": " << r.reason;
      EXPECT_EQ(r.prompt_following, 1);
      EXPECT_EQ(r.consistency, 1);
      prev = gen;
    }
  }
}

TEST(OracleJudge, IgnoredEditFailsPromptFollowing) {
  // A clearly visible removal.
  SceneState before;
  before.objects.push_back({0, Shape::kCircle, Color::kRed, {20, 20}, 10, {}});
  before.objects.push_back({1, Shape::kSquare, Color::kBlue, {45, 45}, 6, {}});
  SceneState after = before;
  after.objects.erase(after.objects.begin());
  auto [src, tgt] = roe_masks(before, after, {EditOp{EditKind::kRemove, {Shape::kCircle, Color::kRed}}});
  src |= tgt;
  const auto r = oracle_judge(render(before), render(before), after, src);
  EXPECT_EQ(r.prompt_following, 0);
  EXPECT_EQ(r.all, 0);
  EXPECT_EQ(r.consistency, 1);

  // Across the suite, ignoring the edit almost always fails; the exceptions
  // are edits whose changed pixels are scattered under occluders.
  int turns = 0, caught = 0;
  for (const auto& s : suite().sessions) {
    SceneState prev = s.source;
    for (const auto& t : s.turns) {
      ++turns;
      caught += oracle_judge(render(prev), render(prev), t.expected, t.roe_union).prompt_following == 0;
      prev = t.expected;
    }
  }
  EXPECT_GE(static_cast<double>(caught) / turns, 0.99);
}

TEST(OracleJudge, WrongColorFails) {
  int checked = 0;
  for (const auto& s : suite().sessions) {
    SceneState prev = s.source;
    for (const auto& t : s.turns) {
      if (t.op.op == EditKind::kRecolor || t.op.op == EditKind::kAdd) {
        SceneState wrong = t.expected;
        for (auto& o : wrong.objects)
          if (o.descriptor() == (t.op.op == EditKind::kAdd ? t.op.subject : Descriptor{t.op.subject.kind, t.op.new_color}))
            o.color = static_cast<Color>((static_cast<int>(o.color) + 1) % kNumColors);
        if (changed_pixels(render(wrong), render(t.expected)) >= kMinVisibleChange) {
          ++checked;
          EXPECT_EQ(oracle_judge(render(wrong), render(prev), t.expected, t.roe_union).prompt_following, 0)
              << t.instruction;
        }
      }
      prev = t.expected;
    }
  }
  EXPECT_GT(checked, 50);
}

TEST(OracleJudge, VerdictsMonotoneInNoiseAcrossTwoHundredRenders) {
  const std::vector<double> sigmas = {0.01, 0.02, 0.05, 0.1, 0.15, 0.2};
  Rng rng(3);
  int renders = 0;
  for (const auto& s : suite().sessions) {
    Frame prev = render(s.source);
    for (const auto& t : s.turns) {
      if (renders == 200) break;
      ++renders;
      const Frame clean = render(t.expected);
      std::vector<float> n(clean.pixels.size());
      for (auto& v : n) v = static_cast<float>(rng.normal());
      TurnReport last{"", 1, 1, 1};
      for (double sigma : sigmas) {
        const auto r = oracle_judge(noisy(clean, n, sigma), prev, t.expected, t.roe_union);
        EXPECT_LE(r.prompt_following, last.prompt_following) << renders << " sigma " << sigma;
        EXPECT_LE(r.consistency, last.consistency) << renders << " sigma " << sigma;
        EXPECT_LE(r.all, last.all);
        EXPECT_EQ(r.all, r.prompt_following & r.consistency);
        last = r;
      }
      prev = clean;
    }
  }
  EXPECT_EQ(renders, 200);
}

TEST(OracleJudge, DeterministicAndShapeChecked) {
  const auto& s = suite().sessions[7];
  const Frame g = render(s.turns[0].expected);
  const Frame ref = render(s.source);
  const auto a = oracle_judge(g, ref, s.turns[0].expected, s.turns[0].roe_union);
  const auto b = oracle_judge(g, ref, s.turns[0].expected, s.turns[0].roe_union);
  EXPECT_EQ(a.reason, b.reason);
  EXPECT_EQ(a.all, b.all);
  EXPECT_THROW(oracle_judge(Frame(32, 32), ref, s.turns[0].expected, s.turns[0].roe_union), ValidationError);
}

// -- suite ----------------------------------------------------------------------------

TEST(Suite, ChainsCorrectlyAndBalancesCategories) {
  std::map<EditKind, int> counts;
  ASSERT_EQ(suite().sessions.size(), 100u);
  for (const auto& s : suite().sessions) {
    ++counts[s.category];
    ASSERT_EQ(s.turns.size(), 5u);
    EXPECT_EQ(s.turns[0].op.op, s.category);
    SceneState cur = s.source;
    for (const auto& t : s.turns) {
      cur = apply_ops(cur, {t.op});
      EXPECT_EQ(cur, t.expected);
      EXPECT_EQ(vocab().detokenize(vocab().tokenize(t.instruction)), t.instruction);
    }
  }
  int lo = 1000, hi = 0;
  for (const auto& [k, n] : counts) lo = std::min(lo, n), hi = std::max(hi, n);
  EXPECT_EQ(counts.size(), 5u);
  EXPECT_LE(hi - lo, 1);
}

TEST(Suite, EveryEditIsVisibleAndSuiteIsDeterministic) {
  const auto again = make_suite(100, 5, 2026);
  for (size_t i = 0; i < suite().sessions.size(); ++i) {
    const auto& s = suite().sessions[i];
    EXPECT_EQ(s.source, again.sessions[i].source);
    SceneState prev = s.source;
    for (const auto& t : s.turns) {
      EXPECT_GE(changed_pixels(render(prev), render(t.expected)), kMinVisibleChange);
      prev = t.expected;
    }
  }
}

TEST(Suite, ConvertsToValidTrainingRecords) {
  for (size_t i = 0; i < 10; ++i) {
    const auto& s = suite().sessions[i];
    const auto rec = to_record(s, vocab(), i);
    ASSERT_EQ(rec.turns.size(), s.turns.size());
    EXPECT_EQ(rec.turns[0].source_frame, render(s.source));
    for (size_t k = 0; k < rec.turns.size(); ++k) {
      EXPECT_EQ(rec.turns[k].target_frame, render(s.turns[k].expected));
      EXPECT_TRUE(same_edits(parse_instruction(vocab().detokenize(rec.turns[k].instruction_tokens)), rec.turns[k].ops));
    }
    EXPECT_NO_THROW(assemble(rec, full_plan(rec), vocab()));
  }
}

// -- scoring --------------------------------------------------------------------------

TEST(EvalSession, AllPerfectGivesFiveFullReports) {
  const auto& s = suite().sessions[0];
  const auto rep = eval_session(perfect_frames(s), s);
  ASSERT_EQ(rep.reports.size(), 5u);
  for (const auto& r : rep.reports) EXPECT_EQ(r.all + r.prompt_following + r.consistency, 3);
  EXPECT_EQ(rep.passed(), 5);
}

TEST(EvalSession, FailureAtTurnThreeStopsJudging) {
  const auto& s = suite().sessions[1];
  auto frames = perfect_frames(s);
  frames[2] = Frame(64, 64, 0.0f);
  const auto rep = eval_session(frames, s);
  ASSERT_EQ(rep.reports.size(), 3u);
  EXPECT_EQ(rep.reports[2].all, 0);
  EXPECT_EQ(rep.turns - rep.evaluated(), 2);  // turns 4 and 5 unevaluated
  EXPECT_EQ(rep.passed(), 2);

  int calls = 0;
  eval_session_lazy(s, [&](int t) {
    ++calls;
    return frames[static_cast<size_t>(t)];
  });
  EXPECT_EQ(calls, 3);
}

TEST(EvalSession, ReferenceIsThePreviousGeneratedFrame) {
  // Each generated frame drifts 0.035 brighter than the last. Against the
  // previous generation every step is under the 0.05 threshold; against clean
  // renders the drift would exceed it by turn 2.
  const auto& s = suite().sessions[2];
  auto frames = perfect_frames(s);
  for (size_t k = 0; k < frames.size(); ++k)
    for (auto& v : frames[k].pixels) v = std::min(1.0f, v + 0.035f * static_cast<float>(k + 1));
  const auto clean = oracle_judge(frames[1], render(s.turns[0].expected), s.turns[1].expected, s.turns[1].roe_union);
  EXPECT_EQ(clean.consistency, 0);
  const auto rep = eval_session(frames, s);
  ASSERT_GE(rep.reports.size(), 3u);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(rep.reports[static_cast<size_t>(k)].consistency, 1) << k;
}

TEST(SuccessRates, HandComputedTenTraceFixture) {
  // First failing turn per session; 0 = never fails.
  const std::vector<int> fail_at = {0, 1, 2, 3, 0, 5, 2, 0, 4, 1};
  std::vector<SessionReport> reports;
  for (size_t i = 0; i < fail_at.size(); ++i) {
    const auto& s = suite().sessions[i];
    auto frames = perfect_frames(s);
    if (fail_at[i]) frames[static_cast<size_t>(fail_at[i] - 1)] = Frame(64, 64, 0.0f);
    reports.push_back(eval_session(frames, s));
    EXPECT_EQ(reports.back().evaluated(), fail_at[i] ? fail_at[i] : 5);
  }
  // Sessions surviving turn k: k=1 all but the two turn-1 failures, etc.
  const std::vector<double> expected = {0.8, 0.6, 0.5, 0.4, 0.3};
  EXPECT_EQ(success_rates(reports), expected);
}

TEST(SuccessRates, OneOfFourFailingAtTurnTwo) {
  std::vector<SessionReport> reports;
  for (int i = 0; i < 4; ++i) {
    const auto& s = suite().sessions[static_cast<size_t>(10 + i)];
    auto frames = perfect_frames(s);
    if (i == 2) frames[1] = Frame(64, 64, 1.0f);
    reports.push_back(eval_session(frames, s));
  }
  EXPECT_EQ(success_rates(reports), (std::vector<double>{1.0, 0.75, 0.75, 0.75, 0.75}));
}

TEST(SuccessRates, EmptyIsAnErrorAndRatesNeverIncrease) {
  EXPECT_THROW(success_rates({}), ValidationError);
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<SessionReport> reports(static_cast<size_t>(rng.uniform_int(1, 20)));
    for (auto& r : reports) {
      r.turns = 5;
      const int n = rng.uniform_int(0, 5);
      for (int k = 0; k < n; ++k) {
        const int ok = (k + 1 < n || rng.bernoulli(0.5)) ? 1 : 0;
        r.reports.push_back({"", ok, 1, ok});
      }
    }
    const auto rates = success_rates(reports);
    for (size_t k = 1; k < rates.size(); ++k) ASSERT_LE(rates[k], rates[k - 1]);
  }
}

// -- pixel metrics -------------------------------------------------------------------

TEST(PixelMetrics, IdenticalFramesAreZero) {
  Rng rng(5);
  const Frame f = testing::random_frame(rng, 16, 16);
  const auto m = pixel_metrics(f, f, testing::random_mask(rng, 16, 16));
  EXPECT_EQ(m.l1, 0.0);
  EXPECT_EQ(m.l2, 0.0);
  EXPECT_EQ(m.l1_unchanged, 0.0);
  EXPECT_EQ(m.l2_unchanged, 0.0);
  EXPECT_FALSE(m.mask_iou.has_value());
}

TEST(PixelMetrics, UniformOffset) {
  // Pixels are stored as float, so "0.1" is 0.1 up to float rounding.
  Frame ref(8, 8, 0.25f), gen(8, 8, 0.25f + 0.1f);
  const double d = static_cast<double>(0.25f + 0.1f) - 0.25;
  const auto m = pixel_metrics(gen, ref, RoEMask(8, 8));
  EXPECT_EQ(m.l1, d);
  EXPECT_NEAR(m.l1, 0.1, 1e-7);
  EXPECT_NEAR(m.l2, d * d, 1e-15);
  EXPECT_EQ(m.l1_unchanged, m.l1);
}

TEST(PixelMetrics, UnchangedRestrictsToComplementAndIouMatchesBruteForce) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Frame a = testing::random_frame(rng, 12, 12), b = testing::random_frame(rng, 12, 12);
    const RoEMask roe = testing::random_mask(rng, 12, 12, 0.4);
    const RoEMask g = testing::random_mask(rng, 12, 12, rng.uniform()), r = testing::random_mask(rng, 12, 12, 0.3);
    const auto m = pixel_metrics(a, b, roe, g, r);
    double sum = 0;
    int n = 0, inter = 0, uni = 0;
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) {
        if (!roe.at(y, x))
          for (int c = 0; c < 3; ++c) sum += std::abs(static_cast<double>(a.at(y, x, c)) - b.at(y, x, c)), ++n;
        inter += g.at(y, x) && r.at(y, x);
        uni += g.at(y, x) || r.at(y, x);
      }
    EXPECT_NEAR(m.l1_unchanged, n ? sum / n : 0.0, 1e-12);
    ASSERT_TRUE(m.mask_iou.has_value());
    EXPECT_DOUBLE_EQ(*m.mask_iou, uni ? static_cast<double>(inter) / uni : 1.0);
  }
}

// -- model runs ---------------------------------------------------------------------

ModelConfig tiny_config() {
  ModelConfig c = testing::micro_config();
  c.patch = 8;  // 64x64 canvas, 64 tokens per image
  return c;
}

TEST(Ablations, GridOfOneGivesOneCell) {
  const auto params = init_params<double>(tiny_config(), 7);
  const auto small = make_suite(2, 2, 8);
  SampleConfig sc;
  sc.steps = 2;
  AblationGrid grid;
  grid.context = {true};
  grid.dummy = {false};
  grid.modes = {ChainMode::kCurSegFirst};
  const auto report = run_ablations<double>({{"12.5k", &params}}, vocab(), small, sc, grid);
  ASSERT_EQ(report["cells"].size(), 1u);
  const auto& cell = report["cells"][0];
  EXPECT_EQ(cell["mode"], "cur_seg_first");
  EXPECT_EQ(cell["rates"].size(), 2u);
  EXPECT_TRUE(cell["turn1_cur_mask_iou_median"].is_number());
}

TEST(Ablations, CellKeysAreTheGridProduct) {
  const auto a = init_params<double>(tiny_config(), 9);
  const auto b = init_params<double>(tiny_config(), 10);
  const auto small = make_suite(1, 1, 11);
  SampleConfig sc;
  sc.steps = 1;
  const AblationGrid grid;
  const auto report = run_ablations<double>({{"a", &a}, {"b", &b}}, vocab(), small, sc, grid);
  std::set<std::string> keys;
  for (const auto& c : report["cells"])
    keys.insert(c["model"].get<std::string>() + "/" + (c["context"].get<bool>() ? "ctx" : "noctx") + "/" +
                (c["dummy"].get<bool>() ? "dummy" : "plain") + "/" + c["mode"].get<std::string>());
  EXPECT_EQ(report["cells"].size(), 2u * 2u * 2u * 4u);
  EXPECT_EQ(keys.size(), report["cells"].size());
}

TEST(RunSuite, UntrainedModelFailsAndStopsEarly) {
  const auto params = init_params<double>(tiny_config(), 12);
  const auto small = make_suite(3, 5, 13);
  SampleConfig sc;
  sc.steps = 2;
  const auto cell = run_suite(params, vocab(), small, sc);
  ASSERT_EQ(cell.rates.size(), 5u);
  for (const auto& r : cell.reports) EXPECT_LE(r.evaluated(), r.passed() + 1);
  for (size_t k = 1; k < cell.rates.size(); ++k) EXPECT_LE(cell.rates[k], cell.rates[k - 1]);
}

TEST(RunSuite, WorkerCountDoesNotChangeResults) {
  const auto params = init_params<double>(tiny_config(), 14);
  const auto small = make_suite(5, 2, 15);
  SampleConfig sc;
  sc.steps = 2;
  sc.mode = ChainMode::kCurSegFirst;
  const auto a = cell_json(run_suite(params, vocab(), small, sc, {}, 1));
  const auto b = cell_json(run_suite(params, vocab(), small, sc, {}, 3));
  EXPECT_EQ(a.dump(), b.dump());
}

}  // namespace
}  // namespace ctxedit
