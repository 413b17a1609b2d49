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

// ctxedit: gen-data | train | sample | eval | inspect.
// Exit codes: 0 success, 2 validation error, 3 runtime or numerical error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "ctxedit/config.hpp"
#include "ctxedit/dataset.hpp"
#include "ctxedit/png.hpp"

namespace fs = std::filesystem;
using namespace ctxedit;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

/// Binds one flag per config key; after parsing, layers file then flags.
struct Command {
  RunConfig config;
  CLI::App* app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> flags;
  std::map<std::string, CLI::Option*> options;

  explicit Command(const std::string& name) : config(make_run_config(name)) {}

  void bind(CLI::App& parent, const std::string& help) {
    app = parent.add_subcommand(config.command(), help);
    app->add_option("--config", config_file, "key=value file applied before flags (e.g. a resolved.cfg)");
    for (const auto& k : config.keys()) {
      const std::string desc = k.help + " [key " + k.name + ", default " +
                               (k.default_value.empty() ? "''" : k.default_value) + "]";
      if (k.type == KeyType::kBool)
        options[k.name] = app->add_flag(flag_name(k.name) + "{true}", flags[k.name], desc);
      else
        options[k.name] = app->add_option(flag_name(k.name), flags[k.name], desc);
    }
  }

  bool chosen() const { return app->parsed(); }

  void resolve() {
    if (!config_file.empty()) config.merge_text(detail::read_file(config_file), config_file);
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) config.set(key, flags[key]);
  }

  fs::path out_dir() const {
    const std::string out = config.get("out");
    require(!out.empty(), config.command() + ": --out is required");
    fs::create_directories(out);
    detail::write_file(fs::path(out) / "resolved.cfg", config.resolved());
    return out;
  }
};

std::string required(const RunConfig& c, const std::string& key) {
  const std::string v = c.get(key);
  require(!v.empty(), c.command() + ": " + flag_name(key) + " is required");
  return v;
}

void write_json(const fs::path& path, const nlohmann::json& j) { detail::write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------

int gen_data(const RunConfig& c, const fs::path& out) {
  const int sessions = c.get_i32("sessions");
  require(sessions >= 1, "gen-data: --sessions must be >= 1");
  const int workers = c.get_i32("workers");
  const uint64_t seed = c.get_uint("seed");
  const SessionConfig sc = to_session_config(c);
  const Vocabulary& vocab = Vocabulary::standard();

  DatasetWriter writer(out / "dataset.vses", vocab);
  std::map<int, int> turn_hist;
  int with_roe = 0;
  // Chunks keep memory bounded; records are written in index order.
  const size_t chunk = 256;
  for (size_t begin = 0; begin < static_cast<size_t>(sessions); begin += chunk) {
    const size_t n = std::min(chunk, static_cast<size_t>(sessions) - begin);
    std::vector<SessionRecord> recs(n);
    parallel_for(n, workers, [&](size_t i) {
      const uint64_t id = begin + i;
      recs[i] = build_session(derive_seed(seed, id), sc, vocab, id);
    });
    for (const auto& r : recs) {
      writer.append(r);
      ++turn_hist[static_cast<int>(r.turns.size())];
      with_roe += r.has_roe;
    }
  }
  writer.close();

  std::string words;
  for (const auto& w : vocab.words()) words += w + "\n";
  detail::write_file(out / "vocab.txt", words);

  nlohmann::json summary;
  summary["sessions"] = sessions;
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [t, n] : turn_hist) hist[std::to_string(t)] = n;
  summary["turn_histogram"] = hist;
  summary["has_roe_fraction"] = static_cast<double>(with_roe) / sessions;
  summary["expected_has_roe_fraction"] = sc.roe_prob;
  write_json(out / "summary.json", summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

template <typename T>
int train_as(const RunConfig& c, const fs::path& out) {
  DatasetReader reader(required(c, "data"));
  const TrainConfig tc = to_train_config(c);
  const ModelConfig mc = to_model_config(c, static_cast<int>(reader.vocab().size()));
  const SessionSource source = SessionSource::of(reader);

  TrainState<T> state;
  if (!c.get("resume").empty()) {
    state = deserialize_state<T>(detail::read_file(c.get("resume")));
  } else {
    for (const char* f : {"metrics.jsonl", "eval.jsonl"}) fs::remove(out / f);
    state = init_train_state<T>(mc, tc, reader.vocab().hash());
    save_params(out / "init.vckp", state.params);
  }
  const auto final_state = train<T>(tc, mc, source, {out}, std::move(state));
  std::cout << "step " << final_state.step << " loss " << final_state.last_loss << " -> "
            << (out / "final.vckp").string() << "\n";
  return 0;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  return parts;
}

template <typename T>
int sample_as(const RunConfig& c, const fs::path& out) {
  const SampleConfig sc = to_sample_config(c);
  const auto params = load_params<T>(required(c, "checkpoint"));
  DatasetReader reader(required(c, "data"));
  require(reader.size() > 0, "sample: dataset is empty");
  const auto index = c.get_int("index");
  require(index >= 0 && static_cast<size_t>(index) < reader.size(), "sample: --index out of range");
  const SessionRecord rec = reader.read(static_cast<size_t>(index));

  std::vector<std::string> instructions;
  if (!c.get("instructions").empty()) {
    instructions = split(c.get("instructions"), '|');
  } else {
    for (const auto& t : rec.turns) instructions.push_back(reader.vocab().detokenize(t.instruction_tokens));
  }
  const Frame& source = rec.turns.front().source_frame;
  const SessionTrace trace = run_session(params, reader.vocab(), source, instructions, sc);

  write_png(out / "source.png", to_png(source));
  int k = 0;
  for (const auto& t : trace.turns) {
    const std::string stem = t.dummy ? "dummy" : "turn_" + std::to_string(++k);
    write_png(out / (stem + ".png"), to_png(t.frame));
    if (t.cur_mask) write_png(out / (stem + "_cur_mask.png"), to_png(*t.cur_mask));
    if (t.next_mask) write_png(out / (stem + "_next_mask.png"), to_png(*t.next_mask));
  }
  write_json(out / "trace.json", trace.to_json());
  std::cout << "wrote " << k << " turns to " << out.string() << "\n";
  return 0;
}

template <typename T>
int eval_as(const RunConfig& c, const fs::path& out) {
  const SampleConfig sc = to_sample_config(c);
  const JudgeConfig judge = to_judge_config(c);
  const int workers = c.get_i32("workers");
  const auto suite = make_suite(c.get_i32("suite_sessions"), c.get_i32("suite_turns"), c.get_uint("suite_seed"));
  const Vocabulary& vocab = Vocabulary::standard();

  std::map<std::string, ModelParams<T>> owned;
  owned.emplace(c.get("label"), load_params<T>(required(c, "checkpoint")));
  if (!c.get("models").empty())
    for (const auto& item : split(c.get("models"), ',')) {
      const auto colon = item.find(':');
      require(colon != std::string::npos && colon > 0, "eval: --models entries are label:path");
      require(!owned.count(item.substr(0, colon)), "eval: duplicate model label '" + item.substr(0, colon) + "'");
      owned.emplace(item.substr(0, colon), load_params<T>(item.substr(colon + 1)));
    }
  for (const auto& [label, p] : owned)
    require(p.config.vocab_size == static_cast<int>(vocab.size()), "eval: model '" + label + "' vocab size mismatch");

  nlohmann::json report;
  if (c.get_bool("ablate")) {
    std::map<std::string, const ModelParams<T>*> models;
    for (const auto& [label, p] : owned) models[label] = &p;
    report = run_ablations<T>(models, vocab, suite, sc, AblationGrid{}, judge, workers);
  } else {
    require(owned.size() == 1, "eval: --models needs --ablate");
    report = cell_json(run_suite(owned.begin()->second, vocab, suite, sc, judge, workers));
    report["model"] = c.get("label");
    report["context"] = sc.use_context;
    report["dummy"] = sc.dummy_context;
    report["mode"] = chain_mode_name(sc.mode);
    report["suite_sessions"] = suite.sessions.size();
    report["suite_seed"] = suite.seed;
    report["steps"] = sc.steps;
    report["cfg_scale"] = sc.cfg_scale;
  }
  write_json(out / "report.json", report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int inspect(const RunConfig& c, const fs::path& out) {
  DatasetReader reader(required(c, "data"));
  require(reader.size() > 0, "inspect: dataset is empty");
  const auto index = c.get_int("index");
  require(index >= 0 && static_cast<size_t>(index) < reader.size(), "inspect: --index out of range");
  const SessionRecord rec = reader.read(static_cast<size_t>(index));
  AssembleOptions opt;
  opt.patch = c.get_i32("patch");
  const PackedSequence seq = assemble(rec, full_plan(rec), reader.vocab(), opt);
  const std::string table = layout_table(seq);
  detail::write_file(out / "layout.txt", table);

  // Row q, column k; white where query q may attend to key k.
  const AttentionMask mask = seq.attention_mask();
  const int n = mask.size();
  PngImage img{n, n, 1, std::vector<uint8_t>(static_cast<size_t>(n) * static_cast<size_t>(n))};
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k) img.pixels[static_cast<size_t>(q) * n + k] = mask.allowed(q, k) ? 255 : 0;
  write_png(out / "attention_mask.png", img);
  std::cout << table;
  return 0;
}

bool wants_f64(const RunConfig& c) {
  const std::string p = c.get("precision");
  require(p == "f32" || p == "f64", "--precision must be f32 or f64");
  return p == "f64";
}

int run(Command& cmd) {
  cmd.resolve();
  const RunConfig& c = cmd.config;
  const fs::path out = cmd.out_dir();
  const std::string& name = c.command();
  if (name == "gen-data") return gen_data(c, out);
  if (name == "train") return wants_f64(c) ? train_as<double>(c, out) : train_as<float>(c, out);
  if (name == "sample") return wants_f64(c) ? sample_as<double>(c, out) : sample_as<float>(c, out);
  if (name == "eval") return wants_f64(c) ? eval_as<double>(c, out) : eval_as<float>(c, out);
  return inspect(c, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctxedit: multi-turn context-aware image editing on a synthetic world"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> commands;
  const std::pair<const char*, const char*> specs[] = {
      {"gen-data", "generate a VSES session dataset"},
      {"train", "train a model on a dataset"},
      {"sample", "run a multi-turn editing session and write PNGs"},
      {"eval", "run the benchmark suite (optionally the ablation grid)"},
      {"inspect", "print a session's block layout and write its attention mask"}};
  for (const auto& [name, help] : specs) {
    commands.push_back(std::make_unique<Command>(name));
    commands.back()->bind(app, help);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }
  try {
    for (auto& cmd : commands)
      if (cmd->chosen()) return run(*cmd);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
