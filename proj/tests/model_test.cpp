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

#include "ctxedit/model.hpp"
#include "gradcheck.hpp"
#include "micro_model.hpp"
#include "test_util.hpp"

namespace ctxedit {
namespace {

using testing::random_plan;
using testing::random_record;

using testing::dense_params;
using testing::micro_config;
using testing::micro_sequence;
using testing::perturb_after;
using testing::vocab;

// -- parameter counting -------------------------------------------------------

TEST(CountParams, DefaultMatchesEnumeration) {
  ModelConfig c;
  c.vocab_size = static_cast<int>(vocab().size());
  int64_t enumerated = 0;
  for (const auto& [name, shape] : param_shapes(c)) enumerated += static_cast<int64_t>(shape.first) * shape.second;
  EXPECT_EQ(count_params(c), enumerated);
  EXPECT_EQ(init_params<float>(c, 1).size(), enumerated);
}

TEST(CountParams, ZeroLayersIsEmbeddingsAndHeads) {
  ModelConfig c = micro_config();
  c.layers = 0;
  const int64_t d = 16, p = 48, v = c.vocab_size, m = c.turn_marks;
  // embeddings + image projection + time MLP + final modulation + head
  EXPECT_EQ(count_params(c), v * d + m * d + (p * d + d) + 2 * (d * d + d) + (2 * d * d + 2 * d) + (d * p + p));
  EXPECT_EQ(init_params<double>(c, 1).size(), count_params(c));
}

TEST(CountParams, LayerTermsFollowFormula) {
  for (int dim : {16, 32}) {
    for (int layers : {1, 3}) {
      ModelConfig c = micro_config();
      c.model_dim = dim;
      c.layers = layers;
      ModelConfig bare = c;
      bare.layers = 0;
      const int64_t d = dim;
      EXPECT_EQ(count_params(c) - count_params(bare), 2 * layers * (18 * d * d + 15 * d));
      EXPECT_EQ(init_params<double>(c, 2).size(), count_params(c));
    }
  }
}

TEST(ModelConfig, TextRoundTripAndValidation) {
  ModelConfig c = micro_config();
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  EXPECT_THROW(ModelConfig::from_text("model_dim=17\n"), ValidationError);
  EXPECT_THROW(ModelConfig::from_text("depth=3\n"), ValidationError);
  ModelConfig bad = c;
  bad.heads = 4;  // head_dim 4 cannot hold three rotary axes
  EXPECT_THROW(bad.validate(), ValidationError);
}

// -- rotary embedding ---------------------------------------------------------

TEST(Rope, AllocationSplit) {
  const auto a = RopeAllocation::make(32, 3);  // 16 pairs: 6 / 5 / 5
  EXPECT_EQ(std::count(a.axis.begin(), a.axis.end(), 0), 6);
  EXPECT_EQ(std::count(a.axis.begin(), a.axis.end(), 1), 5);
  EXPECT_EQ(std::count(a.axis.begin(), a.axis.end(), 2), 5);
  const auto t = RopeAllocation::make(32, 1);
  EXPECT_EQ(std::count(t.axis.begin(), t.axis.end(), 0), 16);
}

TEST(Rope, ZeroPositionIsIdentity) {
  Rng rng(1);
  MatD v(4, 32);
  for (int i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
  MatD r = v;
  rope_rotate<double>(r, std::vector<Position>(4, Position{0, 0, 0}), RopeAllocation::make(32, 3));
  EXPECT_EQ(r, v);
}

TEST(Rope, IsometryAndInverse) {
  Rng rng(2);
  MatD v(50, 24);
  std::vector<Position> pos;
  for (int i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
  for (int i = 0; i < 50; ++i) pos.push_back({rng.uniform_int(0, 40), rng.uniform_int(0, 7), rng.uniform_int(0, 7)});
  MatD r = v;
  const auto alloc = RopeAllocation::make(24, 3);
  rope_rotate<double>(r, pos, alloc);
  for (int i = 0; i < 50; ++i) EXPECT_NEAR(r.row(i).norm(), v.row(i).norm(), 1e-6);
  rope_rotate<double>(r, pos, alloc, true);
  EXPECT_LT((r - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Rope, DotProductDependsOnlyOnOffset) {
  Rng rng(3);
  for (int axes : {1, 3}) {
    const auto alloc = RopeAllocation::make(16, axes);
    for (int trial = 0; trial < 200; ++trial) {
      MatD q(1, 16), k(1, 16);
      for (int i = 0; i < 16; ++i) {
        q(0, i) = rng.normal();
        k(0, i) = rng.normal();
      }
      const Position p1 = {rng.uniform_int(0, 30), rng.uniform_int(0, 7), rng.uniform_int(0, 7)};
      const Position p2 = {rng.uniform_int(0, 30), rng.uniform_int(0, 7), rng.uniform_int(0, 7)};
      const Position shift = {rng.uniform_int(0, 50), rng.uniform_int(0, 9), rng.uniform_int(0, 9)};
      auto dot_at = [&](Position a, Position b) {
        MatD qa = q, kb = k;
        rope_rotate<double>(qa, {a}, alloc);
        rope_rotate<double>(kb, {b}, alloc);
        return qa.row(0).dot(kb.row(0));
      };
      const Position a2 = {p1[0] + shift[0], p1[1] + shift[1], p1[2] + shift[2]};
      const Position b2 = {p2[0] + shift[0], p2[1] + shift[1], p2[2] + shift[2]};
      EXPECT_NEAR(dot_at(p1, p2), dot_at(a2, b2), 1e-9);
    }
  }
}

// -- forward ------------------------------------------------------------------

TEST(Forward, FreshNetworkIsHeadOfNormalizedEmbedding) {
  const ModelConfig c = micro_config();
  const auto params = init_params<double>(c, 5);
  Rng rng(6);
  const auto seq = micro_sequence(rng, 3, true, 7);
  Transformer<double> net(params);
  const auto out = net.forward(seq);
  ASSERT_EQ(out.velocity.rows(), seq.loss_count());
  ASSERT_TRUE(out.velocity.allFinite());
  for (int r = 0; r < out.velocity.rows(); ++r) {
    const int tok = out.tokens[static_cast<size_t>(r)];
    const RowVec<double> e =
        seq.image_inputs.row(seq.token_code[static_cast<size_t>(tok)]) * params.at("image.in.w") + params.at("image.in.b");
    const double mean = e.mean();
    const double var = (e.array() - mean).square().mean();
    const RowVec<double> xhat = (e.array() - mean) / std::sqrt(var + 1e-6);
    const RowVec<double> expect = xhat * params.at("head.w") + params.at("head.b");
    EXPECT_LT((out.velocity.row(r) - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, OutputsOnlyLossTokens) {
  Rng rng(8);
  const auto seq = micro_sequence(rng, 2, true, 1);
  const auto params = dense_params<double>(micro_config(), 9);
  Transformer<double> net(params);
  const auto out = net.forward(seq);
  for (int tok : out.tokens) EXPECT_TRUE(seq.loss_mask[static_cast<size_t>(tok)]);
  EXPECT_EQ(static_cast<int>(out.tokens.size()), seq.loss_count());
}

TEST(Forward, Deterministic) {
  Rng rng(10);
  const auto seq = micro_sequence(rng, 3, true, 2);
  const auto params = dense_params<float>(micro_config(), 11);
  Transformer<float> a(params), b(params);
  EXPECT_EQ(a.forward(seq).velocity, b.forward(seq).velocity);
}

TEST(Forward, RejectsMismatchedInputs) {
  Rng rng(12);
  auto seq = micro_sequence(rng, 1, false, 3);
  ModelConfig c = micro_config();
  c.patch = 8;
  const auto wrong_patch = init_params<double>(c, 1);
  Transformer<double> net8(wrong_patch);
  EXPECT_THROW(net8.forward(seq), ValidationError);
  const auto params = init_params<double>(micro_config(), 1);
  Transformer<double> net(params);
  for (size_t i = 0; i < seq.token_kind.size(); ++i)
    if (seq.token_kind[i] == TokenKind::kWord) {
      seq.token_code[i] = 999;
      break;
    }
  EXPECT_THROW(net.forward(seq), ValidationError);
}

TEST(Forward, LaterBlocksNeverChangeEarlierOutputs) {
  const auto params = dense_params<double>(micro_config(), 13);
  Transformer<double> net(params);
  Rng rng(14);
  for (int trial = 0; trial < 30; ++trial) {
    const auto seq = micro_sequence(rng, rng.uniform_int(1, 4), rng.bernoulli(0.6), static_cast<uint64_t>(trial));
    const int cut = rng.uniform_int(0, static_cast<int>(seq.blocks.size()) - 2);
    const auto other = perturb_after(seq, cut, rng);
    const auto a = net.forward(seq, {.all_hidden = true});
    const auto b = net.forward(other, {.all_hidden = true});
    const int end = seq.blocks[static_cast<size_t>(cut)].end;
    EXPECT_EQ(a.hidden.topRows(end), b.hidden.topRows(end)) << "trial " << trial;
    EXPECT_NE(a.hidden.bottomRows(seq.size() - end), b.hidden.bottomRows(seq.size() - end));
  }
}

TEST(Forward, SiblingMemoryOrderDoesNotMatter) {
  const auto params = dense_params<double>(micro_config(), 15);
  Transformer<double> net(params);
  Rng rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    const auto rec = random_record(rng, rng.uniform_int(1, 3), 8, 8, true, vocab());
    const auto seq = assemble(rec, full_plan(rec), vocab(), {.patch = 4, .noise_seed = 3});
    // Swap the last clean/noisy pair in memory order.
    const int nb = static_cast<int>(seq.blocks.size());
    const auto& clean = seq.blocks[static_cast<size_t>(nb - 2)];
    const auto& noisy = seq.blocks[static_cast<size_t>(nb - 1)];
    ASSERT_EQ(clean.slot, noisy.slot);
    PackedSequence sw = seq;
    sw.blocks[static_cast<size_t>(nb - 2)] = noisy;
    sw.blocks[static_cast<size_t>(nb - 1)] = clean;
    sw.blocks[static_cast<size_t>(nb - 2)].start = clean.start;
    sw.blocks[static_cast<size_t>(nb - 2)].end = clean.start + noisy.size();
    sw.blocks[static_cast<size_t>(nb - 1)].start = clean.start + noisy.size();
    sw.blocks[static_cast<size_t>(nb - 1)].end = noisy.end;
    std::vector<int> order;  // new memory position -> old token
    for (int i = 0; i < clean.start; ++i) order.push_back(i);
    for (int i = noisy.start; i < noisy.end; ++i) order.push_back(i);
    for (int i = clean.start; i < clean.end; ++i) order.push_back(i);
    for (size_t i = 0; i < order.size(); ++i) {
      const auto o = static_cast<size_t>(order[i]);
      sw.token_kind[i] = seq.token_kind[o];
      sw.token_code[i] = seq.token_code[o];
      sw.positions[i] = seq.positions[o];
      sw.loss_mask[i] = seq.loss_mask[o];
      sw.token_block[i] = seq.token_block[o] == nb - 2 ? nb - 1 : seq.token_block[o] == nb - 1 ? nb - 2 : seq.token_block[o];
    }
    const auto a = net.forward(seq, {.all_hidden = true});
    const auto b = net.forward(sw, {.all_hidden = true});
    ASSERT_EQ(a.velocity.rows(), b.velocity.rows());
    EXPECT_LT((a.velocity - b.velocity).cwiseAbs().maxCoeff(), 1e-12);
    // Key order inside attention changes, so agreement is up to rounding.
    const double tol = 1e-12 * (1.0 + a.hidden.cwiseAbs().maxCoeff());
    for (size_t i = 0; i < order.size(); ++i)
      EXPECT_LT((b.hidden.row(static_cast<int>(i)) - a.hidden.row(order[i])).cwiseAbs().maxCoeff(), tol);
  }
}

TEST(Forward, FiniteOnRandomInputs) {
  const auto params = init_params<float>(micro_config(), 17);
  const auto dense = dense_params<float>(micro_config(), 18);
  Transformer<float> fresh(params), trained(dense);
  Rng rng(19);
  for (int trial = 0; trial < 1000; ++trial) {
    auto seq = micro_sequence(rng, rng.uniform_int(1, 3), rng.bernoulli(0.5), static_cast<uint64_t>(trial));
    for (int i = 0; i < seq.image_inputs.size(); ++i) seq.image_inputs.data()[i] = rng.normal();
    ASSERT_TRUE(fresh.forward(seq).velocity.allFinite());
    ASSERT_TRUE(trained.forward(seq).velocity.allFinite());
  }
}

TEST(Forward, PrefixCacheMatchesFullPass) {
  const auto params = dense_params<double>(micro_config(), 20);
  Transformer<double> net(params);
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const auto rec = random_record(rng, rng.uniform_int(1, 3), 8, 8, rng.bernoulli(0.5), vocab());
    const auto full = assemble(rec, full_plan(rec), vocab(), {.patch = 4, .noise_seed = 4});
    // Prefix: everything but the final noisy block.
    const auto& last = full.blocks.back();
    ASSERT_TRUE(last.noisy());
    PackedSequence prefix = full;
    prefix.blocks.pop_back();
    prefix.token_block.resize(static_cast<size_t>(last.start));
    prefix.token_kind.resize(static_cast<size_t>(last.start));
    prefix.token_code.resize(static_cast<size_t>(last.start));
    prefix.positions.resize(static_cast<size_t>(last.start));
    prefix.loss_mask.assign(static_cast<size_t>(last.start), 0);
    // A fresh slot, as the sampler appends it: the final clean copy becomes context.
    PackedSequence seq = full;
    seq.blocks.back().slot = full.blocks[full.blocks.size() - 2].slot + 1;
    const auto ref = net.forward(seq);

    auto cache = net.build_prefix(prefix);
    auto [first, count] = full.image_rows(static_cast<int>(full.blocks.size()) - 1);
    std::vector<Position> pos(full.positions.begin() + last.start, full.positions.end());
    const MatD v = net.predict_block(cache, full.image_inputs.middleRows(first, count), last.t, pos);
    ASSERT_EQ(v.rows(), count);
    EXPECT_LT((v - ref.velocity.bottomRows(count)).cwiseAbs().maxCoeff(), 1e-11);
  }
}

// -- backward -----------------------------------------------------------------

TEST(Backward, MatchesCentralDifferences) {
  auto params = dense_params<double>(micro_config(), 22, 0.4);
  Rng rng(23);
  const auto seq = micro_sequence(rng, 2, true, 5);
  const auto report = testing::check_parameter_gradients(params, seq, 300, 24);
  EXPECT_GE(report.checked, 200);
  EXPECT_EQ(report.failed, 0) << "worst " << report.worst << " at " << report.worst_name;
}

TEST(Backward, InputGradientMatchesCentralDifferences) {
  const auto params = dense_params<double>(micro_config(), 24, 0.4);
  Rng rng(25);
  auto seq = micro_sequence(rng, 2, true, 6);
  Transformer<double> net(params);
  const auto out = net.forward(seq, {.keep_cache = true});
  MatD w(out.velocity.rows(), out.velocity.cols());
  for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  const MatD din = net.backward(w).d_image_inputs;
  ASSERT_EQ(din.rows(), seq.image_inputs.rows());
  auto objective = [&] { return (net.forward(seq).velocity.array() * w.array()).sum(); };
  for (int trial = 0; trial < 100; ++trial) {
    const int idx = rng.uniform_int(0, static_cast<int>(seq.image_inputs.size()) - 1);
    const double numeric = testing::central_difference(seq.image_inputs.data()[idx], objective);
    EXPECT_LE(testing::relative_error(din.data()[idx], numeric), testing::kGradTolerance)
        << "input " << idx << " analytic " << din.data()[idx] << " numeric " << numeric;
  }
}

TEST(Backward, RequiresCachedForward) {
  const auto params = init_params<double>(micro_config(), 1);
  Transformer<double> net(params);
  EXPECT_THROW(net.backward(MatD::Zero(1, 48)), ValidationError);
}

}  // namespace
}  // namespace ctxedit
