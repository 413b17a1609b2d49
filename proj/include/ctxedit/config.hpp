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

// Command-scoped key=value settings: defaults < config file < flags.

#pragma once

#include <charconv>
#include <map>
#include <string>
#include <vector>

#include "ctxedit/evalbench.hpp"
#include "ctxedit/trainer.hpp"

namespace ctxedit {

enum class KeyType : uint8_t { kString, kInt, kUint, kReal, kBool };

struct ConfigKey {
  std::string name;
  KeyType type = KeyType::kString;
  std::string default_value;
  std::string help;
};

class RunConfig {
 public:
  RunConfig(std::string command, std::vector<ConfigKey> keys) : command_(std::move(command)), keys_(std::move(keys)) {
    for (const auto& k : keys_) {
      require(!values_.count(k.name), "duplicate config key '" + k.name + "'");
      check(k, k.default_value);
      values_[k.name] = k.default_value;
    }
  }

  const std::string& command() const { return command_; }
  const std::vector<ConfigKey>& keys() const { return keys_; }

  void set(const std::string& key, const std::string& value) {
    check(key_of(key), value);
    values_[key] = value;
  }

  /// key=value lines; '#' starts a comment line. A `command` line, as
  /// written to resolved.cfg, must name this command.
  void merge_text(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      const std::string where = origin + ":" + std::to_string(n);
      require(eq != std::string::npos, where + ": expected key=value");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (key == "command") {
        require(value == command_, where + ": config is for '" + value + "', not '" + command_ + "'");
        continue;
      }
      require(values_.count(key), where + ": unknown key '" + key + "' for command '" + command_ + "'");
      try {
        set(key, value);
      } catch (const ValidationError& e) {
        throw ValidationError(where + ": " + e.what());
      }
    }
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    require(it != values_.end(), "unknown config key '" + key + "'");
    return it->second;
  }
  int64_t get_int(const std::string& key) const { return parse_int(get(key), key); }
  uint64_t get_uint(const std::string& key) const { return parse_uint(get(key), key); }
  double get_real(const std::string& key) const { return parse_real(get(key), key); }
  bool get_bool(const std::string& key) const { return parse_bool(get(key), key); }
  int get_i32(const std::string& key) const {
    const int64_t v = get_int(key);
    require(v >= std::numeric_limits<int>::min() && v <= std::numeric_limits<int>::max(), key + " out of range");
    return static_cast<int>(v);
  }

  /// The command line followed by every key, sorted.
  std::string resolved() const {
    std::string out = "command=" + command_ + "\n";
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
  }

  static int64_t parse_int(const std::string& s, const std::string& key) {
    int64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty(), key + ": '" + s + "' is not an integer");
    return v;
  }
  static uint64_t parse_uint(const std::string& s, const std::string& key) {
    uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty(),
            key + ": '" + s + "' is not a non-negative integer");
    return v;
  }
  static double parse_real(const std::string& s, const std::string& key) {
    double v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty() && std::isfinite(v),
            key + ": '" + s + "' is not a finite number");
    return v;
  }
  static bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ValidationError(key + ": '" + s + "' is not a boolean (true/false)");
  }

  const ConfigKey& key_of(const std::string& name) const {
    for (const auto& k : keys_)
      if (k.name == name) return k;
    throw ValidationError("unknown key '" + name + "' for command '" + command_ + "'");
  }

  static void check(const ConfigKey& k, const std::string& v) {
    require(v.find('\n') == std::string::npos, k.name + ": value may not contain a newline");
    switch (k.type) {
      case KeyType::kInt: parse_int(v, k.name); break;
      case KeyType::kUint: parse_uint(v, k.name); break;
      case KeyType::kReal: parse_real(v, k.name); break;
      case KeyType::kBool: parse_bool(v, k.name); break;
      case KeyType::kString: break;
    }
  }

  std::string command_;
  std::vector<ConfigKey> keys_;
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Per-command schemas. Defaults come from the module config structs.

namespace schema {

inline ConfigKey str(std::string n, std::string d, std::string h) { return {std::move(n), KeyType::kString, std::move(d), std::move(h)}; }
inline ConfigKey i(std::string n, int64_t d, std::string h) { return {std::move(n), KeyType::kInt, std::to_string(d), std::move(h)}; }
inline ConfigKey u(std::string n, uint64_t d, std::string h) { return {std::move(n), KeyType::kUint, std::to_string(d), std::move(h)}; }
inline ConfigKey r(std::string n, double d, std::string h) { return {std::move(n), KeyType::kReal, format_real(d), std::move(h)}; }
inline ConfigKey b(std::string n, bool d, std::string h) { return {std::move(n), KeyType::kBool, d ? "true" : "false", std::move(h)}; }

inline std::vector<ConfigKey> sample_keys() {
  const SampleConfig d;
  return {i("steps", d.steps, "Euler steps"),
          r("cfg", d.cfg_scale, "classifier-free guidance scale"),
          str("mode", chain_mode_name(d.mode), "direct | cur_seg_first | next_seg_first | cur_then_next_seg"),
          b("dummy_context", d.dummy_context, "prepend the dummy identity turn"),
          b("use_context", d.use_context, "condition on the full history (false: previous image only)"),
          u("seed", d.seed, "sampling seed"),
          str("precision", "f32", "f32 | f64")};
}

inline std::vector<ConfigKey> model_keys() {
  const ModelConfig d;
  return {i("model_dim", d.model_dim, "transformer width"), i("layers", d.layers, "transformer layers"),
          i("heads", d.heads, "attention heads"), i("patch", d.patch, "patch size in pixels"),
          i("max_frame_axis", d.max_frame_axis, "largest patch-grid side"), r("rope_base", d.rope_base, "RoPE base")};
}

inline std::vector<ConfigKey> gen_data_keys() {
  const SessionConfig d;
  return {str("out", "", "output directory (required)"),
          i("sessions", 1000, "number of sessions"),
          u("seed", 0, "base seed; session i uses derive_seed(seed, i)"),
          i("workers", 1, "generation threads"),
          i("min_images", d.min_images, "fewest images per session"),
          i("max_images", d.max_images, "most images per session"),
          r("fixed_frame_prob", d.fixed_frame_prob, "probability of fixed-frame sampling"),
          r("roe_prob", d.roe_prob, "probability a session carries edit-region masks"),
          r("event_rate", d.event_rate, "per-tick edit event probability"),
          i("min_step", d.min_step, "shortest equal-interval step"),
          i("max_step", d.max_step, "longest equal-interval step"),
          i("max_ticks", d.max_ticks, "longest fixed-frame trajectory"),
          i("max_retries", d.max_retries, "attempts per session before giving up")};
}

inline std::vector<ConfigKey> train_keys() {
  const TrainConfig d;
  std::vector<ConfigKey> k = {str("data", "", "VSES dataset (required)"),
                              str("out", "", "output directory (required)"),
                              str("resume", "", "train state (state.vtst) to continue from"),
                              i("steps", d.steps, "total optimizer steps"),
                              r("lr", d.learning_rate, "Adam learning rate"),
                              i("batch_size", d.batch_size, "sessions per step"),
                              r("drop_current_frame", d.drop.current_frame, "current-frame drop probability"),
                              r("drop_current_roe", d.drop.current_roe, "source-mask drop probability"),
                              r("drop_next_roe", d.drop.next_roe, "target-mask drop probability"),
                              r("text_null_prob", d.text_null_prob, "instruction NULL probability"),
                              r("dummy_turn_prob", d.dummy_turn_prob, "dummy-turn augmentation probability"),
                              r("beta1", d.beta1, "Adam beta1"),
                              r("beta2", d.beta2, "Adam beta2"),
                              r("adam_eps", d.adam_eps, "Adam epsilon"),
                              u("seed", d.seed, "initialization and batching seed"),
                              i("eval_every", d.eval_every, "held-out loss period (0: never)"),
                              i("eval_sessions", d.eval_sessions, "sessions in the held-out loss"),
                              i("checkpoint_every", d.checkpoint_every, "checkpoint period (0: final only)"),
                              str("precision", "f32", "f32 | f64")};
  for (auto& m : model_keys()) k.push_back(std::move(m));
  return k;
}

inline std::vector<ConfigKey> sample_command_keys() {
  std::vector<ConfigKey> k = {str("checkpoint", "", "VCKP checkpoint (required)"),
                              str("out", "", "output directory (required)"),
                              str("data", "", "VSES dataset supplying the source frame and instructions"),
                              i("index", 0, "session index in the dataset"),
                              str("instructions", "", "'|'-separated instructions overriding the dataset's")};
  for (auto& s : sample_keys()) k.push_back(std::move(s));
  return k;
}

inline std::vector<ConfigKey> eval_keys() {
  const JudgeConfig j;
  std::vector<ConfigKey> k = {str("checkpoint", "", "VCKP checkpoint (required)"),
                              str("out", "", "output directory (required)"),
                              i("suite_sessions", 100, "benchmark sessions"),
                              i("suite_turns", 5, "turns per benchmark session"),
                              u("suite_seed", 2026, "benchmark seed"),
                              i("workers", 1, "evaluation threads"),
                              b("ablate", false, "run the context x dummy x mode grid"),
                              str("models", "", "extra 'label:path' checkpoints for the grid, comma separated"),
                              str("label", "model", "grid label of --checkpoint"),
                              r("detect_iou", j.detect_iou, "judge detection IoU"),
                              i("blob_pixels", j.blob_pixels, "judge stray-blob size"),
                              r("consistency_mae", j.consistency_mae, "judge consistency threshold"),
                              r("color_tolerance", j.color_tolerance, "judge color tolerance")};
  for (auto& s : sample_keys()) k.push_back(std::move(s));
  return k;
}

inline std::vector<ConfigKey> inspect_keys() {
  return {str("data", "", "VSES dataset (required)"), i("index", 0, "session index"),
          str("out", "", "output directory (required)"), i("patch", kDefaultPatch, "patch size in pixels")};
}

}  // namespace schema

inline RunConfig make_run_config(const std::string& command) {
  if (command == "gen-data") return {command, schema::gen_data_keys()};
  if (command == "train") return {command, schema::train_keys()};
  if (command == "sample") return {command, schema::sample_command_keys()};
  if (command == "eval") return {command, schema::eval_keys()};
  if (command == "inspect") return {command, schema::inspect_keys()};
  throw ValidationError("unknown command '" + command + "'");
}

// ---------------------------------------------------------------------------
// Conversions.

inline SampleConfig to_sample_config(const RunConfig& c) {
  SampleConfig s;
  s.steps = c.get_i32("steps");
  s.cfg_scale = c.get_real("cfg");
  s.mode = parse_chain_mode(c.get("mode"));
  s.dummy_context = c.get_bool("dummy_context");
  s.use_context = c.get_bool("use_context");
  s.seed = c.get_uint("seed");
  s.validate();
  return s;
}

inline SessionConfig to_session_config(const RunConfig& c) {
  SessionConfig s;
  s.min_images = c.get_i32("min_images");
  s.max_images = c.get_i32("max_images");
  s.fixed_frame_prob = c.get_real("fixed_frame_prob");
  s.roe_prob = c.get_real("roe_prob");
  s.event_rate = c.get_real("event_rate");
  s.min_step = c.get_i32("min_step");
  s.max_step = c.get_i32("max_step");
  s.max_ticks = c.get_i32("max_ticks");
  s.max_retries = c.get_i32("max_retries");
  s.validate();
  return s;
}

inline TrainConfig to_train_config(const RunConfig& c) {
  TrainConfig t;
  t.steps = c.get_i32("steps");
  t.learning_rate = c.get_real("lr");
  t.batch_size = c.get_i32("batch_size");
  t.drop.current_frame = c.get_real("drop_current_frame");
  t.drop.current_roe = c.get_real("drop_current_roe");
  t.drop.next_roe = c.get_real("drop_next_roe");
  t.text_null_prob = c.get_real("text_null_prob");
  t.dummy_turn_prob = c.get_real("dummy_turn_prob");
  t.beta1 = c.get_real("beta1");
  t.beta2 = c.get_real("beta2");
  t.adam_eps = c.get_real("adam_eps");
  t.seed = c.get_uint("seed");
  t.eval_every = c.get_i32("eval_every");
  t.eval_sessions = c.get_i32("eval_sessions");
  t.checkpoint_every = c.get_i32("checkpoint_every");
  t.validate();
  return t;
}

/// vocab_size comes from the dataset, not the config.
inline ModelConfig to_model_config(const RunConfig& c, int vocab_size) {
  ModelConfig m;
  m.model_dim = c.get_i32("model_dim");
  m.layers = c.get_i32("layers");
  m.heads = c.get_i32("heads");
  m.patch = c.get_i32("patch");
  m.max_frame_axis = c.get_i32("max_frame_axis");
  m.rope_base = c.get_real("rope_base");
  m.vocab_size = vocab_size;
  m.validate();
  return m;
}

inline JudgeConfig to_judge_config(const RunConfig& c) {
  JudgeConfig j;
  j.detect_iou = c.get_real("detect_iou");
  j.blob_pixels = c.get_i32("blob_pixels");
  j.consistency_mae = c.get_real("consistency_mae");
  j.color_tolerance = c.get_real("color_tolerance");
  return j;
}

}  // namespace ctxedit
