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

// Context-composition training: plan sampling with dropout, the flow loss on
// noisy tokens, Adam, and a resumable training loop.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctxedit/checkpoint.hpp"
#include "ctxedit/common.hpp"
#include "ctxedit/dataset.hpp"
#include "ctxedit/model.hpp"
#include "ctxedit/sequencer.hpp"
#include "json.hpp"

namespace ctxedit {

struct DropConfig {
  double current_frame = 0.20;
  double current_roe = 0.70;
  double next_roe = 0.70;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int steps = 1000;
  int batch_size = 1;
  DropConfig drop;
  double text_null_prob = 0.10;
  double dummy_turn_prob = 0.10;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  int eval_every = 0;        // 0 disables held-out loss
  int eval_sessions = 16;
  int checkpoint_every = 0;  // 0 writes only the final checkpoint

  void validate() const {
    auto prob = [](double p, const char* name) {
      require(p >= 0.0 && p <= 1.0, std::string(name) + " must lie in [0, 1]");
    };
    prob(drop.current_frame, "drop_current_frame");
    prob(drop.current_roe, "drop_current_roe");
    prob(drop.next_roe, "drop_next_roe");
    prob(text_null_prob, "text_null_prob");
    prob(dummy_turn_prob, "dummy_turn_prob");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
    require(adam_eps > 0.0, "adam_eps must be positive");
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be finite and >= 0");
    require(steps >= 1, "steps must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(eval_every >= 0 && checkpoint_every >= 0, "eval_every and checkpoint_every must be >= 0");
    require(eval_sessions >= 1, "eval_sessions must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Plans.

/// One dropout draw per context element, independent across turns. The
/// first image and the current frame of a turn predicting its source mask
/// are retained without a draw.
inline TaskPlan sample_task_plan(const SessionRecord& rec, const TrainConfig& cfg, Rng& rng) {
  TaskPlan plan;
  for (size_t i = 0; i < rec.turns.size(); ++i) {
    TurnPlan t;
    if (rec.has_roe) {
      t.cur_roe = rng.bernoulli(cfg.drop.current_roe) ? Keep::kDropped : Keep::kKept;
      t.next_roe = rng.bernoulli(cfg.drop.next_roe) ? Keep::kDropped : Keep::kKept;
    }
    if (i == 0 || t.csp())
      t.current_frame = Keep::kRequired;
    else
      t.current_frame = rng.bernoulli(cfg.drop.current_frame) ? Keep::kDropped : Keep::kKept;
    t.null_text = rng.bernoulli(cfg.text_null_prob);
    plan.turns.push_back(t);
  }
  return plan;
}

/// Dummy-turn augmentation, plan, noise: everything random about one example.
inline PackedSequence make_example(const SessionRecord& rec, const Vocabulary& vocab, const TrainConfig& cfg,
                                   int patch, Rng& rng) {
  const bool dummy = rng.bernoulli(cfg.dummy_turn_prob) && rec.turns.size() < static_cast<size_t>(kMaxTurnMarks);
  const SessionRecord r = dummy ? with_dummy_turn(rec, vocab) : rec;
  const TaskPlan plan = sample_task_plan(r, cfg, rng);
  AssembleOptions opt;
  opt.patch = patch;
  opt.noise_seed = rng.next_u64();
  return assemble(r, plan, vocab, opt);
}

// ---------------------------------------------------------------------------
// Loss.

struct LossParts {
  double sum = 0.0;   // squared error over masked components
  int64_t count = 0;  // masked components
};

/// Squared error against v = eps - x0 on rows with row_mask set. Rows of
/// every matrix index image-pathway tokens.
template <typename T>
LossParts flow_loss_parts(const Mat<T>& pred, const MatD& clean, const MatD& noise,
                          const std::vector<uint8_t>& row_mask) {
  require(pred.rows() == clean.rows() && pred.cols() == clean.cols() && noise.rows() == clean.rows() &&
              noise.cols() == clean.cols() && row_mask.size() == static_cast<size_t>(clean.rows()),
          "flow loss shape mismatch");
  LossParts lp;
  for (int r = 0; r < clean.rows(); ++r) {
    if (!row_mask[static_cast<size_t>(r)]) continue;
    for (int c = 0; c < clean.cols(); ++c) {
      const double e = static_cast<double>(pred(r, c)) - (noise(r, c) - clean(r, c));
      lp.sum += e * e;
    }
    lp.count += clean.cols();
  }
  return lp;
}

/// Mean over every masked component of the batch.
inline double flow_loss(const std::vector<LossParts>& parts) {
  LossParts total;
  for (const auto& p : parts) {
    total.sum += p.sum;
    total.count += p.count;
  }
  require(total.count > 0, "malformed batch: no loss-masked tokens");
  return total.sum / static_cast<double>(total.count);
}

template <typename T>
double flow_loss(const Mat<T>& pred, const MatD& clean, const MatD& noise, const std::vector<uint8_t>& row_mask) {
  return flow_loss({flow_loss_parts(pred, clean, noise, row_mask)});
}

/// Loss mask per image row of `seq`.
inline std::vector<uint8_t> image_row_mask(const PackedSequence& seq) {
  std::vector<uint8_t> m(static_cast<size_t>(seq.image_inputs.rows()), 0);
  for (int i = 0; i < seq.size(); ++i)
    if (seq.loss_mask[static_cast<size_t>(i)]) m[static_cast<size_t>(seq.token_code[static_cast<size_t>(i)])] = 1;
  return m;
}

/// Scatters forward() output rows into a full image-row matrix (zeros elsewhere).
template <typename T>
Mat<T> scatter_velocity(const PackedSequence& seq, const ForwardResult<T>& out) {
  Mat<T> full = Mat<T>::Zero(seq.image_inputs.rows(), seq.image_inputs.cols());
  for (size_t r = 0; r < out.tokens.size(); ++r)
    full.row(seq.token_code[static_cast<size_t>(out.tokens[r])]) = out.velocity.row(static_cast<int>(r));
  return full;
}

// ---------------------------------------------------------------------------
// State.

template <typename T>
struct TrainState {
  ModelParams<T> params;
  Gradients<T> m;  // Adam first moment
  Gradients<T> v;  // Adam second moment
  int64_t step = 0;
  Rng rng;
  double last_loss = 0.0;
  double ema_loss = 0.0;
  uint64_t vocab_hash = 0;
};

template <typename T>
TrainState<T> init_train_state(const ModelConfig& mc, const TrainConfig& cfg, uint64_t vocab_hash) {
  TrainState<T> s;
  s.params = init_params<T>(mc, derive_seed(cfg.seed, 11));
  s.m = zero_gradients(s.params);
  s.v = zero_gradients(s.params);
  s.rng = Rng(derive_seed(cfg.seed, 12));
  s.vocab_hash = vocab_hash;
  return s;
}

inline constexpr char kStateMagic[4] = {'V', 'T', 'S', 'T'};
inline constexpr uint32_t kStateVersion = 1;

// "VTST" | u32 version | u8 sizeof(real) | string model config | u64 hash
// | u64 vocab hash | i64 step | string rng | f64 last | f64 ema
// | params, m, v as tensor sections in native precision | u64 fnv1a
template <typename T>
std::string serialize_state(const TrainState<T>& s) {
  std::ostringstream out;
  io::put_bytes(out, kStateMagic, 4);
  io::put<uint32_t>(out, kStateVersion);
  io::put<uint8_t>(out, sizeof(T));
  io::put_string(out, s.params.config.to_text());
  io::put<uint64_t>(out, s.params.config.hash());
  io::put<uint64_t>(out, s.vocab_hash);
  io::put<int64_t>(out, s.step);
  io::put_string(out, s.rng.save());
  io::put<double>(out, s.last_loss);
  io::put<double>(out, s.ema_loss);
  detail::put_tensors<T>(out, s.params.tensors);
  detail::put_tensors<T>(out, s.m);
  detail::put_tensors<T>(out, s.v);
  return detail::seal(out.str());
}

template <typename T>
TrainState<T> deserialize_state(const std::string& bytes) {
  std::istringstream in(detail::unseal(bytes, "train state"));
  char magic[4];
  io::get_bytes(in, magic, 4);
  require(std::memcmp(magic, kStateMagic, 4) == 0, "not a VTST train state");
  require(io::get<uint32_t>(in) == kStateVersion, "unsupported train state version");
  require(io::get<uint8_t>(in) == sizeof(T), "train state precision differs from the requested one");
  TrainState<T> s;
  s.params.config = ModelConfig::from_text(io::get_string(in, 1 << 16));
  require(io::get<uint64_t>(in) == s.params.config.hash(), "train state config hash mismatch");
  s.vocab_hash = io::get<uint64_t>(in);
  s.step = io::get<int64_t>(in);
  s.rng.load(io::get_string(in, 1 << 16));
  s.last_loss = io::get<double>(in);
  s.ema_loss = io::get<double>(in);
  const auto shapes = param_shapes(s.params.config);
  s.params.tensors = detail::get_tensors<T, T>(in, shapes);
  s.m = detail::get_tensors<T, T>(in, shapes);
  s.v = detail::get_tensors<T, T>(in, shapes);
  require(in.peek() == std::char_traits<char>::eof(), "trailing bytes in train state");
  return s;
}

// ---------------------------------------------------------------------------
// Optimization.

template <typename T>
void adam_update(TrainState<T>& s, const Gradients<T>& g, const TrainConfig& cfg) {
  const double t = static_cast<double>(s.step + 1);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.adam_eps);
  for (auto& [name, p] : s.params.tensors) {
    const Mat<T>& gi = g.at(name);
    Mat<T>& m = s.m.at(name);
    Mat<T>& v = s.v.at(name);
    m = b1 * m + (T(1) - b1) * gi;
    v = b2 * v + (T(1) - b2) * gi.cwiseAbs2();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

/// Loss and parameter gradients of one batch; no update.
template <typename T>
std::pair<double, Gradients<T>> batch_gradients(const ModelParams<T>& params, const std::vector<PackedSequence>& batch) {
  int64_t total = 0;
  for (const auto& seq : batch) total += static_cast<int64_t>(seq.loss_count()) * seq.patch_dim();
  require(total > 0, "malformed batch: no loss-masked tokens");
  Transformer<T> net(params);
  Gradients<T> grads = zero_gradients(params);
  double sum = 0.0;
  ForwardOptions fo;
  fo.keep_cache = true;
  for (const auto& seq : batch) {
    const auto out = net.forward(seq, fo);
    Mat<T> dv(out.velocity.rows(), out.velocity.cols());
    for (int r = 0; r < dv.rows(); ++r) {
      const int row = seq.token_code[static_cast<size_t>(out.tokens[static_cast<size_t>(r)])];
      for (int c = 0; c < dv.cols(); ++c) {
        const double e = static_cast<double>(out.velocity(r, c)) - (seq.noise(row, c) - seq.clean_latents(row, c));
        sum += e * e;
        dv(r, c) = static_cast<T>(2.0 * e / static_cast<double>(total));
      }
    }
    const auto g = net.backward(dv).grads;
    for (auto& [name, acc] : grads) acc += g.at(name);
  }
  return {sum / static_cast<double>(total), std::move(grads)};
}

/// One Adam step on `batch`. `batch_id` names the batch in diagnostics.
template <typename T>
double train_step(TrainState<T>& s, const std::vector<PackedSequence>& batch, const TrainConfig& cfg,
                  const std::string& batch_id = "") {
  auto [loss, grads] = batch_gradients(s.params, batch);
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << s.step + 1 << " (batch " << batch_id << ")";
    for (size_t i = 0; i < batch.size(); ++i) msg << "\nsequence " << i << ":\n" << layout_table(batch[i]);
    throw NumericalError(msg.str());
  }
  adam_update(s, grads, cfg);
  s.last_loss = loss;
  s.ema_loss = s.step == 0 ? loss : 0.98 * s.ema_loss + 0.02 * loss;
  ++s.step;
  return loss;
}

// ---------------------------------------------------------------------------
// Loop.

/// Random access to sessions without holding them all in memory.
struct SessionSource {
  size_t size = 0;
  int height = kCanvas;
  int width = kCanvas;
  Vocabulary vocab = Vocabulary::standard();
  std::function<SessionRecord(size_t)> read;

  static SessionSource of(DatasetReader& reader) {
    return {reader.size(), reader.height(), reader.width(), reader.vocab(),
            [&reader](size_t i) { return reader.read(i); }};
  }
  static SessionSource of(const std::vector<SessionRecord>& recs, Vocabulary vocab = Vocabulary::standard()) {
    require(!recs.empty(), "no sessions");
    const Frame& f = recs.front().turns.front().source_frame;
    return {recs.size(), f.height, f.width, std::move(vocab), [&recs](size_t i) { return recs.at(i); }};
  }
};

/// Draws the next batch from the state's rng.
template <typename T>
std::vector<PackedSequence> next_batch(TrainState<T>& s, const SessionSource& data, const TrainConfig& cfg,
                                       std::string* batch_id = nullptr) {
  std::vector<PackedSequence> batch;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const auto idx = static_cast<size_t>(s.rng.uniform_int(0, static_cast<int>(data.size) - 1));
    if (batch_id) *batch_id += (b ? "," : "") + std::to_string(idx);
    batch.push_back(make_example(data.read(idx), data.vocab, cfg, s.params.config.patch, s.rng));
  }
  return batch;
}

/// Mean flow loss on the first `eval_sessions` sessions with every context
/// element kept and fixed noise; consumes no training randomness.
template <typename T>
double held_out_loss(const ModelParams<T>& params, const SessionSource& data, const TrainConfig& cfg) {
  Transformer<T> net(params);
  std::vector<LossParts> parts;
  const size_t n = std::min(data.size, static_cast<size_t>(cfg.eval_sessions));
  for (size_t i = 0; i < n; ++i) {
    const SessionRecord rec = data.read(i);
    AssembleOptions opt;
    opt.patch = params.config.patch;
    opt.noise_seed = derive_seed(cfg.seed, 1000 + i);
    const auto seq = assemble(rec, full_plan(rec), data.vocab, opt);
    parts.push_back(flow_loss_parts(scatter_velocity(seq, net.forward(seq)), seq.clean_latents, seq.noise,
                                    image_row_mask(seq)));
  }
  return flow_loss(parts);
}

struct TrainOutputs {
  std::filesystem::path dir;  // metrics.jsonl, eval.jsonl, ckpt_*.vckp, final.vckp, state.vtst
};

/// Runs until `cfg.steps` total steps. A resumed state continues from its
/// own step count and appends to the existing metrics.
template <typename T>
TrainState<T> train(const TrainConfig& cfg, const ModelConfig& mc, const SessionSource& data,
                    const TrainOutputs& outputs, std::optional<TrainState<T>> resume = std::nullopt) {
  cfg.validate();
  mc.validate();
  require(data.size > 0, "dataset is empty");
  require(mc.vocab_size == static_cast<int>(data.vocab.size()),
          "model vocab_size " + std::to_string(mc.vocab_size) + " does not match the dataset vocabulary (" +
              std::to_string(data.vocab.size()) + " words)");
  require(data.height % mc.patch == 0 && data.width % mc.patch == 0, "frame size not divisible by model patch");
  require(data.height / mc.patch <= mc.max_frame_axis && data.width / mc.patch <= mc.max_frame_axis,
          "patch grid exceeds max_frame_axis");

  TrainState<T> s = resume ? std::move(*resume) : init_train_state<T>(mc, cfg, data.vocab.hash());
  require(s.vocab_hash == data.vocab.hash(), "train state vocabulary hash does not match the dataset");
  require(s.params.config.hash() == mc.hash(), "train state model config does not match");

  std::filesystem::create_directories(outputs.dir);
  const auto mode = resume ? std::ios::app : std::ios::trunc;
  std::ofstream metrics(outputs.dir / "metrics.jsonl", std::ios::out | mode);
  std::ofstream evals(outputs.dir / "eval.jsonl", std::ios::out | mode);
  require(metrics && evals, "cannot write metrics in '" + outputs.dir.string() + "'");

  while (s.step < cfg.steps) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string id;
    const auto batch = next_batch(s, data, cfg, &id);
    const double loss = train_step(s, batch, cfg, id);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics << nlohmann::json{{"step", s.step}, {"loss", loss}, {"lr", cfg.learning_rate}, {"wall_ms", ms}}.dump()
            << "\n"
            << std::flush;
    if (cfg.eval_every > 0 && s.step % cfg.eval_every == 0)
      evals << nlohmann::json{{"step", s.step}, {"eval_loss", held_out_loss(s.params, data, cfg)}}.dump() << "\n"
            << std::flush;
    if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) {
      save_params(outputs.dir / ("ckpt_" + std::to_string(s.step) + ".vckp"), s.params);
      detail::write_file(outputs.dir / "state.vtst", serialize_state(s));
    }
  }
  save_params(outputs.dir / "final.vckp", s.params);
  detail::write_file(outputs.dir / "state.vtst", serialize_state(s));
  return s;
}

}  // namespace ctxedit
