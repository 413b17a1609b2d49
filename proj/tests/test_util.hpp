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

// Shared fixtures for the test binaries.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctxedit/sequencer.hpp"

namespace ctxedit::testing {

inline Frame random_frame(Rng& rng, int h, int w) {
  Frame f(h, w);
  for (auto& v : f.pixels) v = static_cast<float>(rng.uniform());
  return f;
}

inline RoEMask random_mask(Rng& rng, int h, int w, double density = 0.3) {
  RoEMask m(h, w);
  for (auto& b : m.bits) b = rng.bernoulli(density) ? 1 : 0;
  return m;
}

/// A record with random pixels, masks and instruction words; no scene logic.
inline SessionRecord random_record(Rng& rng, int turns, int h, int w, bool has_roe, const Vocabulary& vocab) {
  SessionRecord rec;
  rec.has_roe = has_roe;
  Frame prev = random_frame(rng, h, w);
  for (int i = 0; i < turns; ++i) {
    TurnRecord t;
    t.source_frame = prev;
    t.target_frame = random_frame(rng, h, w);
    t.source_state.height = t.target_state.height = h;
    t.source_state.width = t.target_state.width = w;
    const int n = rng.uniform_int(1, 6);
    for (int k = 0; k < n; ++k)
      t.instruction_tokens.push_back(static_cast<TokenId>(rng.uniform_int(2, static_cast<int>(vocab.size()) - 1)));
    t.has_roe = has_roe;
    t.roe_src = has_roe ? random_mask(rng, h, w) : RoEMask(h, w);
    t.roe_tgt = has_roe ? random_mask(rng, h, w) : RoEMask(h, w);
    prev = t.target_frame;
    rec.turns.push_back(std::move(t));
  }
  return rec;
}

/// A plan with random keep/drop choices that respects the retention rule.
inline TaskPlan random_plan(Rng& rng, const SessionRecord& rec) {
  TaskPlan plan;
  for (size_t i = 0; i < rec.turns.size(); ++i) {
    TurnPlan t;
    if (rec.has_roe) {
      t.cur_roe = rng.bernoulli(0.5) ? Keep::kKept : Keep::kDropped;
      t.next_roe = rng.bernoulli(0.5) ? Keep::kKept : Keep::kDropped;
    }
    if (i == 0 || t.csp())
      t.current_frame = Keep::kRequired;
    else
      t.current_frame = rng.bernoulli(0.5) ? Keep::kKept : Keep::kDropped;
    t.null_text = rng.bernoulli(0.2);
    plan.turns.push_back(t);
  }
  return plan;
}

/// Fresh scratch directory under the system temp dir.
// A random layout as a list of content units: text, or image with a clean
// copy, a noisy copy, or both. Unit order is the semantic order.
struct RandomLayout {
  std::vector<BlockDescriptor> blocks;
  std::vector<int> token_block;
  std::vector<int> token_unit;
  std::vector<bool> token_noisy;
};

inline RandomLayout random_layout(Rng& rng, int max_blocks) {
  RandomLayout l;
  int unit = 0;
  const int target = rng.uniform_int(1, max_blocks);
  while (static_cast<int>(l.blocks.size()) < target) {
    std::vector<Cleanliness> copies;
    if (rng.bernoulli(0.4)) {
      copies = {Cleanliness::kNone};
    } else {
      const int mode = rng.uniform_int(0, 2);
      if (mode != 1) copies.push_back(Cleanliness::kClean);
      if (mode != 0) copies.push_back(Cleanliness::kNoisy);
      if (static_cast<int>(l.blocks.size() + copies.size()) > target) copies.resize(1);
    }
    for (auto c : copies) {
      BlockDescriptor b;
      b.kind = c == Cleanliness::kNone ? BlockKind::kText : BlockKind::kImage;
      b.cleanliness = c;
      b.slot = unit;
      b.start = static_cast<int>(l.token_block.size());
      const int n = rng.uniform_int(1, 4);
      for (int i = 0; i < n; ++i) {
        l.token_block.push_back(static_cast<int>(l.blocks.size()));
        l.token_unit.push_back(unit);
        l.token_noisy.push_back(c == Cleanliness::kNoisy);
      }
      b.end = static_cast<int>(l.token_block.size());
      l.blocks.push_back(b);
    }
    ++unit;
  }
  return l;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ctxedit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ctxedit::testing
