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

#include <algorithm>

#include "ctxedit/checkpoint.hpp"
#include "ctxedit/trainer.hpp"
#include "micro_model.hpp"

namespace ctxedit {
namespace {

using testing::micro_config;

template <typename T>
void expect_same_tensors(const std::map<std::string, Mat<T>>& a, const std::map<std::string, Mat<T>>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, m] : a) {
    const Mat<T>& n = b.at(name);
    ASSERT_EQ(m.rows(), n.rows());
    ASSERT_EQ(m.cols(), n.cols());
    EXPECT_EQ(std::memcmp(m.data(), n.data(), sizeof(T) * static_cast<size_t>(m.size())), 0) << name;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto params = init_params<float>(micro_config(), 3);
  const std::string bytes = serialize_params(params);
  const auto back = deserialize_params<float>(bytes);
  EXPECT_EQ(back.config, params.config);
  expect_same_tensors(params.tensors, back.tensors);
  EXPECT_EQ(serialize_params(back), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = testing::scratch_dir("ckpt_file");
  const auto params = testing::dense_params<float>(micro_config(), 4);
  save_params(dir / "p.vckp", params);
  expect_same_tensors(params.tensors, load_params<float>(dir / "p.vckp").tensors);
  EXPECT_FALSE(std::filesystem::exists(dir / "p.vckp.tmp"));
}

// Independent reader for the documented layout.
TEST(Checkpoint, LayoutIsNameSortedFloat32) {
  const auto params = testing::dense_params<double>(micro_config(), 5);
  const std::string bytes = serialize_params(params);
  size_t at = 0;
  auto take = [&](size_t n) {
    EXPECT_LE(at + n, bytes.size());
    const std::string s = bytes.substr(at, n);
    at += n;
    return s;
  };
  auto u32 = [&] {
    uint32_t v;
    std::memcpy(&v, take(4).data(), 4);
    return v;
  };
  EXPECT_EQ(take(4), "VCKP");
  EXPECT_EQ(u32(), 1u);
  const std::string text = take(u32());
  EXPECT_EQ(text, params.config.to_text());
  uint64_t hash;
  std::memcpy(&hash, take(8).data(), 8);
  EXPECT_EQ(hash, params.config.hash());
  const uint32_t count = u32();
  ASSERT_EQ(count, params.tensors.size());
  std::string prev;
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = take(u32());
    EXPECT_LT(prev, name);
    prev = name;
    const uint32_t rows = u32(), cols = u32();
    const MatD& m = params.at(name);
    ASSERT_EQ(rows, static_cast<uint32_t>(m.rows()));
    ASSERT_EQ(cols, static_cast<uint32_t>(m.cols()));
    for (int k = 0; k < m.size(); ++k) {
      float f;
      std::memcpy(&f, take(4).data(), 4);
      ASSERT_EQ(f, static_cast<float>(m.data()[k]));
    }
  }
  EXPECT_EQ(at + 8, bytes.size());  // trailing checksum only
}

TEST(Checkpoint, TruncationAndCorruptionAreErrors) {
  const std::string bytes = serialize_params(init_params<float>(micro_config(), 6));
  for (size_t cut : {size_t{0}, size_t{3}, size_t{11}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(deserialize_params<float>(bytes.substr(0, cut)), ValidationError) << cut;
  for (size_t pos : {size_t{1}, size_t{20}, bytes.size() / 3, bytes.size() - 9}) {
    std::string flipped = bytes;
    flipped[pos] = static_cast<char>(flipped[pos] ^ 0x10);
    EXPECT_THROW(deserialize_params<float>(flipped), ValidationError) << pos;
  }
}

TEST(Checkpoint, ConfigHashMismatchIsAnError) {
  const std::string bytes = serialize_params(init_params<float>(micro_config(), 7));
  ModelConfig other = micro_config();
  other.layers = 2;
  EXPECT_THROW(deserialize_params<float>(bytes, &other), ValidationError);
  const ModelConfig same = micro_config();
  EXPECT_NO_THROW(deserialize_params<float>(bytes, &same));
}

TEST(Checkpoint, MissingFileIsAnError) {
  EXPECT_THROW(load_params<float>(testing::scratch_dir("ckpt_missing") / "nope.vckp"), ValidationError);
}

// Frozen once from this implementation; guards the format and the seeded
// initializer against silent drift.
TEST(Checkpoint, GoldenChecksum) {
  const std::string bytes = serialize_params(init_params<float>(micro_config(), 2026));
  EXPECT_EQ(bytes.size(), 54716u);
  EXPECT_EQ(fnv1a(bytes), 6493753093529246289ull);
}

TEST(TrainStateFile, RoundTripIsBitExact) {
  TrainConfig cfg;
  auto s = init_train_state<double>(micro_config(), cfg, Vocabulary::standard().hash());
  s.params = testing::dense_params<double>(micro_config(), 8);
  for (auto& [name, m] : s.m) m.setConstant(0.25);
  for (auto& [name, v] : s.v) v.setConstant(1e-300);
  s.step = 17;
  s.rng.uniform();
  s.last_loss = 0.123;
  s.ema_loss = 0.456;
  const std::string bytes = serialize_state(s);
  const auto back = deserialize_state<double>(bytes);
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.last_loss, 0.123);
  EXPECT_EQ(back.ema_loss, 0.456);
  EXPECT_EQ(back.vocab_hash, s.vocab_hash);
  EXPECT_TRUE(back.rng == s.rng);
  expect_same_tensors(s.params.tensors, back.params.tensors);
  expect_same_tensors(s.m, back.m);
  expect_same_tensors(s.v, back.v);
  EXPECT_EQ(serialize_state(back), bytes);
}

TEST(TrainStateFile, PrecisionAndTruncationChecked) {
  const auto s = init_train_state<float>(micro_config(), TrainConfig{}, 1);
  const std::string bytes = serialize_state(s);
  EXPECT_THROW(deserialize_state<double>(bytes), ValidationError);
  EXPECT_THROW(deserialize_state<float>(bytes.substr(0, bytes.size() - 3)), ValidationError);
  EXPECT_THROW(deserialize_params<float>(bytes), ValidationError);
}

}  // namespace
}  // namespace ctxedit
