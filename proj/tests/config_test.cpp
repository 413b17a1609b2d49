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

#include "ctxedit/config.hpp"
#include "ctxedit/png.hpp"
#include "test_util.hpp"

namespace ctxedit {
namespace {

TEST(RunConfig, DefaultsComeFromModuleStructs) {
  const auto c = make_run_config("sample");
  EXPECT_EQ(c.get("steps"), "50");
  EXPECT_EQ(c.get("cfg"), "10");
  const SampleConfig s = to_sample_config(c);
  EXPECT_EQ(s.steps, SampleConfig{}.steps);
  EXPECT_EQ(s.cfg_scale, SampleConfig{}.cfg_scale);
  EXPECT_EQ(s.mode, SampleConfig{}.mode);

  const auto t = make_run_config("train");
  const TrainConfig tc = to_train_config(t);
  EXPECT_EQ(tc.learning_rate, TrainConfig{}.learning_rate);
  EXPECT_EQ(tc.drop.current_frame, 0.2);
  EXPECT_EQ(tc.dummy_turn_prob, TrainConfig{}.dummy_turn_prob);
  EXPECT_EQ(to_model_config(t, 46), ModelConfig{});

  const JudgeConfig j = to_judge_config(make_run_config("eval"));
  EXPECT_EQ(j.detect_iou, 0.5);
  EXPECT_EQ(j.consistency_mae, 0.05);
}

TEST(RunConfig, FileThenFlagsLayering) {
  auto c = make_run_config("sample");
  c.merge_text("# comment\n\nsteps = 7\ncfg=2.5\nmode=next_seg_first\n", "f.cfg");
  c.set("steps", "3");  // flag wins over file
  const SampleConfig s = to_sample_config(c);
  EXPECT_EQ(s.steps, 3);
  EXPECT_EQ(s.cfg_scale, 2.5);
  EXPECT_EQ(s.mode, ChainMode::kNextSegFirst);
}

TEST(RunConfig, UnknownKeysAndBadValuesRejected) {
  auto c = make_run_config("sample");
  EXPECT_THROW(c.merge_text("stepz=3\n"), ValidationError);
  EXPECT_THROW(c.set("lr", "0.1"), ValidationError);  // a train key
  EXPECT_THROW(c.set("steps", "3.5"), ValidationError);
  EXPECT_THROW(c.set("steps", ""), ValidationError);
  EXPECT_THROW(c.set("cfg", "nan"), ValidationError);
  EXPECT_THROW(c.set("seed", "-1"), ValidationError);
  EXPECT_THROW(c.set("dummy_context", "yes"), ValidationError);
  EXPECT_THROW(c.merge_text("no equals sign\n"), ValidationError);
  EXPECT_THROW(c.merge_text("command=train\n"), ValidationError);
  EXPECT_THROW(make_run_config("serve"), ValidationError);
  c.set("mode", "bogus");  // a string key; rejected on conversion
  EXPECT_THROW(to_sample_config(c), ValidationError);
}

TEST(RunConfig, ErrorNamesFileAndLine) {
  auto c = make_run_config("eval");
  try {
    c.merge_text("steps=4\nsuite_turns=x\n", "run.cfg");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
  }
}

TEST(RunConfig, ResolvedRoundTrips) {
  for (const char* cmd : {"gen-data", "train", "sample", "eval", "inspect"}) {
    auto a = make_run_config(cmd);
    if (std::string(cmd) == "train") a.set("lr", "0.00030000000000000003");
    const std::string text = a.resolved();
    EXPECT_EQ(text.rfind(std::string("command=") + cmd + "\n", 0), 0u);
    auto b = make_run_config(cmd);
    b.merge_text(text);
    EXPECT_EQ(b.resolved(), text) << cmd;
  }
}

TEST(RunConfig, RealFormattingIsShortestExact) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = std::ldexp(rng.uniform(-1, 1), rng.uniform_int(-40, 40));
    EXPECT_EQ(std::stod(format_real(v)), v);
  }
  EXPECT_EQ(format_real(0.1), "0.1");
  EXPECT_EQ(format_real(10.0), "10");
}

// -- png -----------------------------------------------------------------------------

TEST(Png, RgbAndGrayRoundTrip) {
  Rng rng(2);
  for (int channels : {1, 3}) {
    PngImage img{13, 7, channels, {}};
    for (int i = 0; i < 13 * 7 * channels; ++i) img.pixels.push_back(static_cast<uint8_t>(rng.uniform_int(0, 255)));
    const auto back = decode_png(encode_png(img));
    EXPECT_EQ(back.width, 13);
    EXPECT_EQ(back.height, 7);
    EXPECT_EQ(back.channels, channels);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(Png, HeaderBytes) {
  const std::string bytes = encode_png({2, 3, 3, std::vector<uint8_t>(18, 7)});
  EXPECT_EQ(bytes.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
  EXPECT_EQ(bytes.substr(12, 4), "IHDR");
  EXPECT_EQ(static_cast<uint8_t>(bytes[19]), 2u);  // width low byte
  EXPECT_EQ(static_cast<uint8_t>(bytes[23]), 3u);  // height low byte
  EXPECT_EQ(bytes[24], 8);                         // bit depth
  EXPECT_EQ(bytes[25], 2);                         // truecolor
  EXPECT_EQ(bytes.substr(bytes.size() - 8, 4), "IEND");
}

TEST(Png, CorruptionAndBadInputRejected) {
  std::string bytes = encode_png({4, 4, 1, std::vector<uint8_t>(16, 200)});
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 1);
  EXPECT_THROW(decode_png(bytes), ValidationError);
  EXPECT_THROW(decode_png("GIF89a"), ValidationError);
  EXPECT_THROW(encode_png({4, 4, 2, std::vector<uint8_t>(32)}), ValidationError);
  EXPECT_THROW(encode_png({4, 4, 1, std::vector<uint8_t>(15)}), ValidationError);
}

TEST(Png, FrameQuantizesAndMaskIsBinary) {
  Frame f(2, 2, 0.0f);
  f.at(0, 1, 2) = 1.0f;
  f.at(1, 0, 0) = 0.5f;
  f.at(1, 1, 1) = 2.0f;  // clamped
  const auto img = decode_png(encode_png(to_png(f)));
  EXPECT_EQ(img.pixels[(0 * 2 + 1) * 3 + 2], 255);
  EXPECT_EQ(img.pixels[(1 * 2 + 0) * 3 + 0], 128);
  EXPECT_EQ(img.pixels[(1 * 2 + 1) * 3 + 1], 255);
  RoEMask m(3, 3);
  m.bits[4] = 1;
  const auto g = decode_png(encode_png(to_png(m)));
  EXPECT_EQ(g.channels, 1);
  for (int i = 0; i < 9; ++i) EXPECT_EQ(g.pixels[static_cast<size_t>(i)], i == 4 ? 255 : 0);
}

// -- parallel_for ---------------------------------------------------------------------

TEST(ParallelFor, CoversEveryIndexOnceAndRethrows) {
  for (int workers : {1, 2, 5}) {
    std::vector<int> hits(37, 0);
    parallel_for(hits.size(), workers, [&](size_t i) { ++hits[i]; });
    EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 37);
  }
  EXPECT_THROW(parallel_for(10, 3, [](size_t i) { require(i != 7, "boom"); }), ValidationError);
  EXPECT_THROW(parallel_for(10, 0, [](size_t) {}), ValidationError);
}

}  // namespace
}  // namespace ctxedit
