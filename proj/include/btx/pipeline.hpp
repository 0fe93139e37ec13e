// SPDX-License-Identifier: Apache-2.0
//
// Stage orchestration over one output directory. Every stage reads its
// inputs from disk, writes its outputs atomically, and appends a manifest
// line with input/output digests; a stage whose recorded digests still
// match is skipped unless forced.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "btx/btm.hpp"
#include "btx/checkpoint.hpp"
#include "btx/data.hpp"
#include "btx/digest.hpp"
#include "btx/errors.hpp"
#include "btx/evalkit.hpp"
#include "btx/json_io.hpp"
#include "btx/merge.hpp"
#include "btx/train.hpp"

namespace btx {

namespace fs = std::filesystem;

// A required input is absent; the message names the command that makes it.
class MissingArtifact : public DataError {
 public:
  using DataError::DataError;
};

struct StageConfig {
  std::int64_t steps = 100;
  double peak_lr = 1e-4;
  std::int64_t warmup_steps = 100;
  double floor_fraction = 0.1;
};

inline void to_json(json& j, const StageConfig& s) {
  j = json{{"steps", s.steps}, {"peak_lr", s.peak_lr}, {"warmup_steps", s.warmup_steps},
           {"floor_fraction", s.floor_fraction}};
}
inline void from_json(const json& j, StageConfig& s) {
  detail::reject_unknown(j, {"steps", "peak_lr", "warmup_steps", "floor_fraction"}, "stage");
  detail::read_opt(j, "steps", s.steps);
  detail::read_opt(j, "peak_lr", s.peak_lr);
  detail::read_opt(j, "warmup_steps", s.warmup_steps);
  detail::read_opt(j, "floor_fraction", s.floor_fraction);
}

struct PipelineConfig {
  std::string output_dir = "run";
  std::uint64_t seed = 1234;
  ModelConfig model;
  std::vector<CorpusSpec> corpora;
  std::vector<std::string> experts;  // expert domains, in bank order
  RouterConfig router;
  AdamConfig adam;
  std::size_t batch_size = 16;
  std::size_t seq_len = 256;
  std::int64_t log_interval = 100;
  StageConfig seed_stage{1000, 1e-3, 100, 0.1};
  StageConfig expert_stage{2000, 1e-4, 100, 0.1};
  StageConfig finetune_stage{1000, 1e-4, 100, 0.1};
  MixtureSpec seed_mixture;      // default: uniform over experts
  MixtureSpec finetune_mixture;  // default: uniform over experts
  bool include_seed = false;     // generalist in the mix
  bool average_generalist = true;
  bool freeze_ff = false;
  std::size_t upcycle_experts = 0;  // 0: match the mixed model's expert count
  std::size_t eval_max_windows = 64;
  std::size_t eval_batch = 8;
  std::size_t routing_export_windows = 8;
  std::vector<std::size_t> btm_k{1, 2};

  static PipelineConfig from_json(const json& j);
  json to_json() const;
  void validate() const;

  const CorpusSpec& corpus(const std::string& name) const {
    for (const auto& c : corpora)
      if (c.name == name) return c;
    throw DataError("no corpus named '" + name + "' in the configuration");
  }
  std::size_t mixed_experts() const { return experts.size() + (include_seed ? 1 : 0); }
  std::size_t n_upcycle() const { return upcycle_experts ? upcycle_experts : mixed_experts(); }

  TrainHyper hyper(const StageConfig& s, std::uint64_t stage_seed) const {
    TrainHyper h;
    h.schedule = {s.peak_lr, s.warmup_steps, s.steps, s.floor_fraction};
    h.adam = adam;
    h.batch_size = batch_size;
    h.seq_len = seq_len;
    h.log_interval = log_interval;
    h.seed = stage_seed;
    return h;
  }
  EvalOptions eval_options() const {
    EvalOptions o;
    o.seq_len = seq_len;
    o.max_windows = eval_max_windows;
    o.batch = eval_batch;
    o.seed = seed;
    return o;
  }
};

inline MixtureSpec uniform_mixture(const std::vector<std::string>& names) {
  std::vector<std::pair<std::string, double>> w;
  for (const auto& n : names) w.emplace_back(n, 1.0);
  return MixtureSpec::from_weights(w);
}

inline PipelineConfig PipelineConfig::from_json(const json& j) {
  detail::reject_unknown(j,
                         {"output_dir", "seed", "model", "corpora", "experts", "router", "adam", "batch_size", "seq_len",
                          "log_interval", "seed_stage", "expert_stage", "finetune_stage", "seed_mixture",
                          "finetune_mixture", "include_seed", "average_generalist", "freeze_ff", "upcycle_experts",
                          "eval_max_windows", "eval_batch", "routing_export_windows", "btm_k"},
                         "pipeline config");
  PipelineConfig c;
  detail::read_opt(j, "output_dir", c.output_dir);
  detail::read_opt(j, "seed", c.seed);
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("corpora"))
    for (const auto& cj : j.at("corpora")) c.corpora.push_back(cj.get<CorpusSpec>());
  detail::read_opt(j, "experts", c.experts);
  if (c.experts.empty())
    for (const auto& s : c.corpora) c.experts.push_back(s.name);
  if (j.contains("router")) c.router = j.at("router").get<RouterConfig>();
  if (j.contains("adam")) c.adam = j.at("adam").get<AdamConfig>();
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "seq_len", c.seq_len);
  detail::read_opt(j, "log_interval", c.log_interval);
  if (j.contains("seed_stage")) c.seed_stage = j.at("seed_stage").get<StageConfig>();
  if (j.contains("expert_stage")) c.expert_stage = j.at("expert_stage").get<StageConfig>();
  if (j.contains("finetune_stage")) c.finetune_stage = j.at("finetune_stage").get<StageConfig>();
  if (c.experts.empty()) throw DataError("configuration names no corpora");
  c.seed_mixture = j.contains("seed_mixture") ? j.at("seed_mixture").get<MixtureSpec>() : uniform_mixture(c.experts);
  c.finetune_mixture =
      j.contains("finetune_mixture") ? j.at("finetune_mixture").get<MixtureSpec>() : uniform_mixture(c.experts);
  detail::read_opt(j, "include_seed", c.include_seed);
  detail::read_opt(j, "average_generalist", c.average_generalist);
  detail::read_opt(j, "freeze_ff", c.freeze_ff);
  detail::read_opt(j, "upcycle_experts", c.upcycle_experts);
  detail::read_opt(j, "eval_max_windows", c.eval_max_windows);
  detail::read_opt(j, "eval_batch", c.eval_batch);
  detail::read_opt(j, "routing_export_windows", c.routing_export_windows);
  detail::read_opt(j, "btm_k", c.btm_k);
  c.validate();
  return c;
}

inline json PipelineConfig::to_json() const {
  json cj = json::array();
  for (const auto& s : corpora) cj.push_back(s);
  return json{{"output_dir", output_dir},
              {"seed", seed},
              {"model", model},
              {"corpora", cj},
              {"experts", experts},
              {"router", router},
              {"adam", adam},
              {"batch_size", batch_size},
              {"seq_len", seq_len},
              {"log_interval", log_interval},
              {"seed_stage", seed_stage},
              {"expert_stage", expert_stage},
              {"finetune_stage", finetune_stage},
              {"seed_mixture", seed_mixture},
              {"finetune_mixture", finetune_mixture},
              {"include_seed", include_seed},
              {"average_generalist", average_generalist},
              {"freeze_ff", freeze_ff},
              {"upcycle_experts", upcycle_experts},
              {"eval_max_windows", eval_max_windows},
              {"eval_batch", eval_batch},
              {"routing_export_windows", routing_export_windows},
              {"btm_k", btm_k}};
}

inline void PipelineConfig::validate() const {
  try {
    model.validate();
  } catch (const Error& e) {
    throw DataError(std::string("model: ") + e.what());
  }
  std::set<std::string> names;
  for (const auto& c : corpora)
    if (!names.insert(c.name).second) throw DataError("corpus '" + c.name + "' defined twice");
  std::set<std::string> seen;
  for (const auto& e : experts) {
    corpus(e);
    if (!seen.insert(e).second) throw DataError("expert domain '" + e + "' listed twice");
    if (e == "seed") throw DataError("'seed' is reserved for the generalist");
  }
  for (const auto* m : {&seed_mixture, &finetune_mixture})
    for (const auto& comp : m->components) corpus(comp.corpus);
  for (const auto& [name, s] : {std::pair{"seed_stage", &seed_stage}, std::pair{"expert_stage", &expert_stage},
                                std::pair{"finetune_stage", &finetune_stage}}) {
    if (s->steps < 1) throw DataError(std::string(name) + ".steps must be positive");
    try {
      Schedule{s->peak_lr, s->warmup_steps, s->steps, s->floor_fraction}.validate();
    } catch (const Error& e) {
      throw DataError(std::string(name) + ": " + e.what());
    }
  }
  if (batch_size < 1 || seq_len < 2) throw DataError("batch_size must be >= 1 and seq_len >= 2");
  if (seq_len > static_cast<std::size_t>(model.max_seq_len)) throw DataError("seq_len exceeds model.max_seq_len");
  if (log_interval < 1) throw DataError("log_interval must be >= 1");
  if (mixed_experts() < 2) throw DataError("mixing needs at least two experts (add domains or include_seed)");
  try {
    router.validate(static_cast<int>(mixed_experts()));
    router.validate(static_cast<int>(n_upcycle()));
  } catch (const Error& e) {
    throw DataError(std::string("router: ") + e.what());
  }
  for (std::size_t k : btm_k)
    if (k < 1 || k > mixed_experts()) throw DataError("btm_k entries must lie in [1, number of BTM experts]");
}

// "a.b.c=value": value is parsed as JSON when it parses, else taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ContractError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ContractError("override '" + assignment + "' has an empty key");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (!node->is_object() && !node->is_null()) throw ContractError("override path '" + path + "' crosses a non-object");
    start = dot + 1;
  }
}

inline json load_config_json(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config '" + path.string() + "'");
  json j = json::parse(in, nullptr, false, true);
  if (j.is_discarded()) throw DataError("config '" + path.string() + "' is not valid JSON");
  for (const auto& o : overrides) apply_override(j, o);
  return j;
}

inline std::uint64_t stage_seed(std::uint64_t global, const std::string& label) {
  const std::string h = sha256_hex(std::to_string(global) + ":" + label);
  return std::stoull(h.substr(0, 16), nullptr, 16);
}

inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write '" + path.string() + "'");
  }
  fs::rename(tmp, path);
}

// ---- manifest ----

struct ManifestEntry {
  std::string stage;
  std::string params_digest;
  std::map<std::string, std::string> inputs;   // relative path -> sha256
  std::map<std::string, std::string> outputs;  // relative path -> sha256
  double wall_seconds = 0;
  std::uint64_t tokens = 0;

  json to_json() const {
    return json{{"stage", stage},     {"params_digest", params_digest}, {"inputs", inputs},
                {"outputs", outputs}, {"wall_seconds", wall_seconds},   {"tokens", tokens}};
  }
  static ManifestEntry from_json(const json& j) {
    ManifestEntry e;
    e.stage = j.at("stage").get<std::string>();
    e.params_digest = j.at("params_digest").get<std::string>();
    e.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    e.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    e.wall_seconds = j.at("wall_seconds").get<double>();
    e.tokens = j.at("tokens").get<std::uint64_t>();
    return e;
  }
};

class Manifest {
 public:
  explicit Manifest(fs::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        entries_.push_back(ManifestEntry::from_json(json::parse(line)));
      } catch (const std::exception& e) {
        throw CorruptionError("manifest '" + path_.string() + "' line " + std::to_string(n) + ": " + e.what());
      }
    }
  }

  const std::vector<ManifestEntry>& entries() const { return entries_; }

  const ManifestEntry* latest(const std::string& stage) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (it->stage == stage) return &*it;
    return nullptr;
  }

  // Rewritten through a temp file so a crash never leaves a torn line.
  void append(const ManifestEntry& e) {
    entries_.push_back(e);
    std::string text;
    for (const auto& x : entries_) text += x.to_json().dump() + "\n";
    write_file_atomic(path_, text);
  }

 private:
  fs::path path_;
  std::vector<ManifestEntry> entries_;
};

// ---- pipeline ----

struct StageReport {
  std::string stage;
  bool skipped = false;
  std::vector<std::string> notes;
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), root_(cfg_.output_dir), manifest_(root_ / "manifest.jsonl"), log_(log) {
    cfg_.validate();
  }

  const PipelineConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }
  const Manifest& manifest() const { return manifest_; }

  // Named checkpoint artifacts and the command that produces each.
  struct Artifact {
    std::string path;
    std::string command;
  };
  Artifact artifact(const std::string& model) const {
    if (model == "seed") return {"seed.btx", "seed-init"};
    if (model == "mix") return {"mix.btx", "mix"};
    if (model == "btx") return {"btx.btx", "finetune"};
    if (model == "upcycle-init") return {"upcycle.btx", "upcycle"};
    if (model == "upcycle") return {"upcycle_ft.btx", "finetune --from upcycle"};
    if (model == "dense") return {"dense.btx", "dense"};
    if (model.rfind("expert-", 0) == 0) {
      const std::string d = model.substr(7);
      cfg_.corpus(d);
      return {"experts/" + d + ".btx", "train-expert --domain " + d};
    }
    throw ContractError("unknown model '" + model + "' (seed, expert-<domain>, mix, btx, upcycle-init, upcycle, dense)");
  }
  std::vector<std::string> evaluable_models() const {
    std::vector<std::string> out{"seed"};
    for (const auto& d : cfg_.experts) out.push_back("expert-" + d);
    for (const char* m : {"btx", "upcycle", "dense"}) out.push_back(m);
    return out;
  }

  StageReport seed_init(bool force = false) {
    const json params{{"model", cfg_.model}, {"stage", cfg_.seed_stage}, {"mixture", cfg_.seed_mixture},
                      {"common", common_params()}};
    return run_stage("seed-init", params, {}, {"seed.btx", "logs/seed.csv"}, force, [&](ManifestEntry& e) {
      const auto res = pretrain_seed(cfg_.model, stage_seed(cfg_.seed, "init"), corpora(), cfg_.seed_mixture,
                                     cfg_.hyper(cfg_.seed_stage, stage_seed(cfg_.seed, "seed-init")));
      save_checkpoint(root_ / "seed.btx", result_checkpoint(res));
      res.log.write(root_ / "logs/seed.csv");
      e.tokens = res.tokens;
    });
  }

  // Each domain is its own stage entry; pending domains train concurrently
  // when `parallel`.
  std::vector<StageReport> train_experts(const std::vector<std::string>& domains, bool parallel, bool force = false) {
    std::vector<StageReport> reports;
    std::vector<std::string> pending;
    for (const auto& d : domains) {
      if (std::find(cfg_.experts.begin(), cfg_.experts.end(), d) == cfg_.experts.end())
        throw DataError("'" + d + "' is not an expert domain in the configuration");
      const auto [stage, params, inputs, outputs] = expert_stage_spec(d);
      if (!force && up_to_date(stage, params, inputs, outputs)) {
        reports.push_back({stage, true, {"up to date"}});
        say(stage + ": up to date");
      } else {
        pending.push_back(d);
      }
    }
    if (pending.empty()) return reports;
    require({"seed.btx"});
    const Checkpoint seed_ck = load_checkpoint(root_ / "seed.btx");
    const auto seed = dense_from_checkpoint(seed_ck);
    const auto& all = corpora();
    std::vector<ExpertJob> jobs;
    for (const auto& d : pending) jobs.push_back({&find_corpus(all, d), cfg_.hyper(cfg_.expert_stage, expert_seed(d))});
    const auto t0 = std::chrono::steady_clock::now();
    say("train-expert: " + std::to_string(pending.size()) + " job(s)" + (parallel ? " in parallel" : ""));
    const auto results = btx::train_experts(seed, jobs, parallel);
    const double wall = seconds_since(t0);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      const auto [stage, params, inputs, outputs] = expert_stage_spec(pending[i]);
      save_checkpoint(root_ / outputs[0], result_checkpoint(results[i], seed_ck.step));
      results[i].log.write(root_ / outputs[1]);
      ManifestEntry e{stage, sha256_hex(params.dump()), digests(inputs), digests(outputs), wall, results[i].tokens};
      manifest_.append(e);
      reports.push_back({stage, false, {}});
      say(stage + ": done");
    }
    return reports;
  }

  StageReport mix(bool force = false) {
    std::vector<std::string> inputs;
    for (const auto& d : cfg_.experts) inputs.push_back(artifact("expert-" + d).path);
    if (cfg_.include_seed) inputs.push_back("seed.btx");
    const json params{{"experts", cfg_.experts},          {"include_seed", cfg_.include_seed},
                      {"average_generalist", cfg_.average_generalist}, {"router", cfg_.router},
                      {"seed", stage_seed(cfg_.seed, "mix")}};
    return run_stage("mix", params, inputs, {"mix.btx"}, force, [&](ManifestEntry&) {
      std::vector<NamedModel<float>> experts;
      for (const auto& d : cfg_.experts)
        experts.push_back({d, dense_from_checkpoint(load_checkpoint(root_ / artifact("expert-" + d).path))});
      std::optional<NamedModel<float>> generalist;
      if (cfg_.include_seed) generalist = NamedModel<float>{"seed", dense_from_checkpoint(load_checkpoint(root_ / "seed.btx"))};
      const auto moe = mix_to_moe<float>(experts, generalist, cfg_.router, stage_seed(cfg_.seed, "mix"),
                                         MixOptions{cfg_.average_generalist});
      save_checkpoint(root_ / "mix.btx", to_checkpoint(moe));
    });
  }

  StageReport upcycle(bool force = false) {
    const json params{{"n_experts", cfg_.n_upcycle()}, {"router", cfg_.router}, {"seed", stage_seed(cfg_.seed, "upcycle")}};
    return run_stage("upcycle", params, {"seed.btx"}, {"upcycle.btx"}, force, [&](ManifestEntry&) {
      const auto seed = dense_from_checkpoint(load_checkpoint(root_ / "seed.btx"));
      save_checkpoint(root_ / "upcycle.btx",
                      to_checkpoint(btx::upcycle(seed, cfg_.n_upcycle(), cfg_.router, stage_seed(cfg_.seed, "upcycle"))));
    });
  }

  // `from` is "mix" (the routed model) or "upcycle" (the sparse-upcycling baseline).
  StageReport finetune(const std::string& from = "mix", bool force = false) {
    if (from != "mix" && from != "upcycle") throw ContractError("--from must be 'mix' or 'upcycle'");
    const std::string out = from == "mix" ? "btx.btx" : "upcycle_ft.btx";
    const std::string log = from == "mix" ? "logs/finetune.csv" : "logs/finetune_upcycle.csv";
    const std::string in = from == "mix" ? "mix.btx" : "upcycle.btx";
    const json params{{"stage", cfg_.finetune_stage}, {"mixture", cfg_.finetune_mixture}, {"router", cfg_.router},
                      {"freeze_ff", cfg_.freeze_ff},  {"common", common_params()}};
    return run_stage("finetune:" + from, params, {in}, {out, log}, force, [&](ManifestEntry& e) {
      const Checkpoint ck = load_checkpoint(root_ / in);
      auto moe = moe_from_checkpoint(ck);
      moe.router = cfg_.router;
      moe.router.validate(static_cast<int>(moe.n_experts()));
      const auto res = finetune_moe(moe, corpora(), cfg_.finetune_mixture,
                                    cfg_.hyper(cfg_.finetune_stage, stage_seed(cfg_.seed, "finetune")),
                                    build_freeze_mask(cfg_.freeze_ff));
      for (const auto& w : res.warnings) say("warning: " + w);
      save_checkpoint(root_ / out, result_checkpoint(res, ck.step));
      res.log.write(root_ / log);
      e.tokens = res.tokens;
    });
  }

  // Data-matched dense baseline: as many phase-1 steps as all experts
  // together, then the finetuning budget on the finetuning mixture.
  StageReport dense(bool force = false) {
    const json params{{"expert_stage", cfg_.expert_stage}, {"finetune_stage", cfg_.finetune_stage},
                      {"experts", cfg_.experts},           {"mixture", cfg_.finetune_mixture},
                      {"common", common_params()}};
    return run_stage("dense", params, {"seed.btx"}, {"dense.btx", "logs/dense.csv"}, force, [&](ManifestEntry& e) {
      const Checkpoint ck = load_checkpoint(root_ / "seed.btx");
      StageConfig p1 = cfg_.expert_stage;
      p1.steps *= static_cast<std::int64_t>(cfg_.experts.size());
      const auto res = train_dense_continue(dense_from_checkpoint(ck), corpora(), cfg_.experts,
                                            cfg_.hyper(p1, stage_seed(cfg_.seed, "dense-1")), cfg_.finetune_mixture,
                                            cfg_.hyper(cfg_.finetune_stage, stage_seed(cfg_.seed, "dense-2")));
      Checkpoint out = result_checkpoint(res.phase2, ck.step + static_cast<std::uint64_t>(p1.steps));
      save_checkpoint(root_ / "dense.btx", out);
      res.log.write(root_ / "logs/dense.csv");
      e.tokens = res.tokens();
    });
  }

  StageReport btm_fit(bool force = false) {
    const json params{{"experts", btm_experts()}, {"ngram", 2}};
    return run_stage("btm-fit", params, {}, {"btm/centroids.btc"}, force, [&](ManifestEntry&) {
      save_centroids(root_ / "btm/centroids.btc", fit_btm(btm_training_docs()));
    });
  }

  StageReport btm_eval(std::size_t k, bool force = false) {
    std::vector<std::string> inputs{"btm/centroids.btc"};
    for (const auto& name : btm_experts()) inputs.push_back(btm_checkpoint(name));
    const std::string out = "reports/btm-top" + std::to_string(k) + ".json";
    const json params{{"k", k}, {"eval", eval_params()}};
    return run_stage("btm-eval:" + std::to_string(k), params, inputs, {out}, force, [&](ManifestEntry&) {
      const CentroidStore store = load_centroids(root_ / "btm/centroids.btc");
      std::vector<ModelParams<float>> models;
      for (const auto& c : store.centroids) models.push_back(dense_from_checkpoint(load_checkpoint(root_ / btm_checkpoint(c.name))));
      std::vector<const ModelParams<float>*> ptrs;
      for (const auto& m : models) ptrs.push_back(&m);
      BtmEvalOptions opts;
      opts.eval = cfg_.eval_options();
      opts.k = k;
      const auto report = btx::btm_eval<float>(store, ptrs, eval_corpora(), "btm-top" + std::to_string(k), opts);
      write_file_atomic(root_ / out, report.to_json().dump(2) + "\n");
    });
  }

  StageReport eval(const std::string& model, bool force = false) {
    const Artifact a = artifact(model);
    const std::string out = "reports/" + model + ".json";
    return run_stage("eval:" + model, json{{"eval", eval_params()}}, {a.path}, {out}, force, [&](ManifestEntry&) {
      const Checkpoint ck = load_checkpoint(root_ / a.path);
      const EvalReport r = ck.moe ? eval_perplexity(moe_from_checkpoint(ck), model, eval_corpora(), cfg_.eval_options())
                                  : eval_perplexity(dense_from_checkpoint(ck), model, eval_corpora(), cfg_.eval_options());
      write_file_atomic(root_ / out, r.to_json().dump(2) + "\n");
    });
  }

  StageReport route_stats(const std::string& model, bool force = false) {
    const Artifact a = artifact(model);
    const std::string base = "routing/" + model;
    const json params{{"eval", eval_params()}, {"export_windows", cfg_.routing_export_windows}};
    return run_stage("route-stats:" + model, params, {a.path},
                     {base + "_usage.csv", base + "_hist.csv", base + "_tokens.csv"}, force, [&](ManifestEntry&) {
                       const Checkpoint ck = load_checkpoint(root_ / a.path);
                       if (!ck.moe) throw ContractError("'" + model + "' is a dense model; route-stats needs an MoE checkpoint");
                       const auto moe = moe_from_checkpoint(ck);
                       const auto corpora = eval_corpora();
                       const auto full = collect_routing(moe, corpora, cfg_.eval_options(), false);
                       EvalOptions few = cfg_.eval_options();
                       few.max_windows = cfg_.routing_export_windows;
                       const auto tokens = collect_routing(moe, corpora, few, true);
                       write_file_atomic(root_ / (base + "_usage.csv"), full.stats.usage_csv());
                       write_file_atomic(root_ / (base + "_hist.csv"), full.stats.histogram_csv());
                       write_file_atomic(root_ / (base + "_tokens.csv"), tokens.tokens_csv);
                     });
  }

  // Every report under reports/ (comparison excluded), in file-name order.
  StageReport compare(const std::string& baseline, bool force = false) {
    std::vector<std::string> inputs;
    if (fs::exists(root_ / "reports"))
      for (const auto& entry : fs::directory_iterator(root_ / "reports")) {
        const std::string name = entry.path().filename().string();
        if (entry.path().extension() == ".json" && name != "comparison.json") inputs.push_back("reports/" + name);
      }
    std::sort(inputs.begin(), inputs.end());
    if (inputs.size() < 2) throw MissingArtifact("compare needs at least two reports; run `btx eval` (and `btx btm-eval`) first");
    return run_stage("compare", json{{"baseline", baseline}}, inputs, {"reports/comparison.csv", "reports/comparison.json"},
                     force, [&](ManifestEntry&) {
                       std::vector<EvalReport> reports;
                       for (const auto& p : inputs) {
                         std::ifstream in(root_ / p);
                         json j = json::parse(in, nullptr, false);
                         if (j.is_discarded()) throw DataError("report '" + p + "' is not valid JSON");
                         reports.push_back(EvalReport::from_json(j));
                       }
                       const auto c = compare_runs(reports, baseline);
                       write_file_atomic(root_ / "reports/comparison.csv", c.csv());
                       write_file_atomic(root_ / "reports/comparison.json", c.to_json().dump(2) + "\n");
                     });
  }

  std::vector<std::string> btm_experts() const {
    std::vector<std::string> out = cfg_.experts;
    if (cfg_.include_seed) out.push_back("seed");
    return out;
  }

  const std::vector<Corpus>& corpora() {
    if (corpora_.empty())
      for (const auto& s : cfg_.corpora) corpora_.push_back(build_corpus(s));
    return corpora_;
  }

 private:
  struct ExpertSpec {
    std::string stage;
    json params;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
  };

  ExpertSpec expert_stage_spec(const std::string& d) const {
    return {"train-expert:" + d,
            json{{"domain", d}, {"corpus", cfg_.corpus(d)}, {"stage", cfg_.expert_stage}, {"common", common_params()},
                 {"seed", expert_seed(d)}},
            {"seed.btx"},
            {"experts/" + d + ".btx", "logs/expert_" + d + ".csv"}};
  }
  std::uint64_t expert_seed(const std::string& d) const { return stage_seed(cfg_.seed, "expert:" + d); }

  json common_params() const {
    json cj = json::array();
    for (const auto& s : cfg_.corpora) cj.push_back(s);
    return json{{"seed", cfg_.seed},           {"corpora", cj},
                {"adam", cfg_.adam},           {"batch_size", cfg_.batch_size},
                {"seq_len", cfg_.seq_len},     {"log_interval", cfg_.log_interval}};
  }
  json eval_params() const {
    json cj = json::array();
    for (const auto& d : cfg_.experts) cj.push_back(cfg_.corpus(d));
    return json{{"corpora", cj},
                {"seq_len", cfg_.seq_len},
                {"max_windows", cfg_.eval_max_windows},
                {"batch", cfg_.eval_batch},
                {"seed", cfg_.seed}};
  }

  // Evaluation domains are the expert domains, in bank order.
  std::vector<Corpus> eval_corpora() {
    std::vector<Corpus> out;
    for (const auto& d : cfg_.experts) out.push_back(find_corpus(corpora(), d));
    return out;
  }

  std::vector<std::pair<std::string, std::vector<std::string>>> btm_training_docs() {
    std::vector<std::pair<std::string, std::vector<std::string>>> out;
    std::vector<std::string> all;
    for (const auto& d : cfg_.experts) {
      const auto& docs = find_corpus(corpora(), d).train_docs;
      out.emplace_back(d, docs);
      all.insert(all.end(), docs.begin(), docs.end());
    }
    // The generalist's training data is the seed mixture: all domains.
    if (cfg_.include_seed) out.emplace_back("seed", all);
    return out;
  }
  std::string btm_checkpoint(const std::string& name) const {
    return name == "seed" ? "seed.btx" : artifact("expert-" + name).path;
  }

  std::string command_for(const std::string& rel) const {
    if (rel == "btm/centroids.btc") return "btm-fit";
    if (rel == "seed.btx") return "seed-init";
    if (rel == "mix.btx") return "mix" + std::string(cfg_.include_seed ? " --include-seed" : "");
    if (rel == "upcycle.btx") return "upcycle";
    if (rel == "btx.btx") return "finetune";
    if (rel == "upcycle_ft.btx") return "finetune --from upcycle";
    if (rel == "dense.btx") return "dense";
    if (rel.rfind("experts/", 0) == 0) return "train-expert --domain " + fs::path(rel).stem().string();
    return "";
  }

  void require(const std::vector<std::string>& inputs) const {
    for (const auto& rel : inputs)
      if (!fs::exists(root_ / rel)) {
        const std::string cmd = command_for(rel);
        throw MissingArtifact("missing '" + (root_ / rel).string() + "'" +
                              (cmd.empty() ? "" : "; run `btx " + cmd + "` first"));
      }
  }

  std::map<std::string, std::string> digests(const std::vector<std::string>& rels) const {
    std::map<std::string, std::string> out;
    for (const auto& r : rels) out[r] = file_sha256(root_ / r);
    return out;
  }

  bool up_to_date(const std::string& stage, const json& params, const std::vector<std::string>& inputs,
                  const std::vector<std::string>& outputs) const {
    const ManifestEntry* e = manifest_.latest(stage);
    if (e == nullptr || e->params_digest != sha256_hex(params.dump())) return false;
    for (const auto* group : {&inputs, &outputs})
      for (const auto& rel : *group) {
        if (!fs::exists(root_ / rel)) return false;
        const auto& recorded = group == &inputs ? e->inputs : e->outputs;
        auto it = recorded.find(rel);
        if (it == recorded.end() || it->second != file_sha256(root_ / rel)) return false;
      }
    return true;
  }

  template <typename Body>
  StageReport run_stage(const std::string& stage, const json& params, const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs, bool force, Body&& body) {
    if (!force && up_to_date(stage, params, inputs, outputs)) {
      say(stage + ": up to date");
      return {stage, true, {"up to date"}};
    }
    require(inputs);
    say(stage + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    ManifestEntry e;
    e.stage = stage;
    e.params_digest = sha256_hex(params.dump());
    e.inputs = digests(inputs);
    body(e);
    e.wall_seconds = seconds_since(t0);
    e.outputs = digests(outputs);
    manifest_.append(e);
    say(stage + ": done");
    return {stage, false, {}};
  }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  void say(const std::string& msg) const {
    if (log_) *log_ << msg << std::endl;
  }

  PipelineConfig cfg_;
  fs::path root_;
  Manifest manifest_;
  std::ostream* log_;
  std::vector<Corpus> corpora_;
};

}  // namespace btx
