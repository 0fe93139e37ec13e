// SPDX-License-Identifier: Apache-2.0
//
// btx: command-line driver for the branch/train/mix pipeline.
// Exit codes: 0 success, 1 usage or configuration contract error,
// 2 data error (missing, corrupt or incompatible input), 3 numeric failure.
#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "btx/pipeline.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  bool force = false;
  bool quiet = false;
};

btx::Pipeline open_pipeline(const Globals& g, std::vector<std::string> extra = {}) {
  std::vector<std::string> overrides = g.sets;
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  const btx::json j = btx::load_config_json(g.config, overrides);
  return btx::Pipeline(btx::PipelineConfig::from_json(j), g.quiet ? nullptr : &std::cerr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"btx: branch experts from a seed, train them, mix them into a routed model, and evaluate"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("-c,--config", g.config, "Pipeline configuration (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "Override a config key: a.b=value (value parsed as JSON when possible)");
  app.add_flag("-f,--force", g.force, "Rerun stages even when their recorded digests match");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress messages");

  auto* seed_init = app.add_subcommand("seed-init", "Initialize and pretrain the seed model on the seed mixture");

  auto* train_expert = app.add_subcommand("train-expert", "Branch the seed and train one expert per domain");
  std::vector<std::string> domains;
  bool all_domains = false, parallel = false;
  train_expert->add_option("-d,--domain", domains, "Domain to train (repeatable)");
  train_expert->add_flag("--all", all_domains, "Train every expert domain in the configuration");
  train_expert->add_flag("--parallel", parallel, "Train pending experts concurrently, one thread each");

  auto* mix = app.add_subcommand("mix", "Merge trained experts into a routed model");
  bool include_seed = false;
  mix->add_flag("--include-seed", include_seed, "Add the seed feedforward as a generalist expert (bank last)");

  auto* finetune = app.add_subcommand("finetune", "Finetune a routed model on the finetuning mixture");
  std::string from = "mix", routing;
  int top_k = 0;
  double alpha = -1;
  bool freeze_ff = false;
  finetune->add_option("--from", from, "Starting point: mix or upcycle")->check(CLI::IsMember({"mix", "upcycle"}));
  finetune->add_option("--routing", routing, "Routing method")
      ->check(CLI::IsMember({"topk", "switch", "sample_top1", "soft"}));
  finetune->add_option("--top-k", top_k, "Experts per token for top-k routing")->check(CLI::PositiveNumber);
  finetune->add_option("--alpha", alpha, "Load-balancing coefficient")->check(CLI::NonNegativeNumber);
  finetune->add_flag("--freeze-ff", freeze_ff, "Freeze expert feedforward weights");

  auto* dense = app.add_subcommand("dense", "Train the data-matched dense baseline from the seed");
  auto* upcycle = app.add_subcommand("upcycle", "Build the sparse-upcycling baseline from the seed");
  auto* btm_fit = app.add_subcommand("btm-fit", "Fit tf-idf statistics and per-expert centroids");

  auto* btm_eval = app.add_subcommand("btm-eval", "Evaluate the ensemble of dense experts with centroid routing");
  std::vector<std::size_t> ks;
  btm_eval->add_option("-k,--top-k", ks, "Experts per context (repeatable; default: config btm_k)");

  auto* eval = app.add_subcommand("eval", "Held-out perplexity per domain");
  std::vector<std::string> models;
  eval->add_option("-m,--model", models,
                   "Model to evaluate: seed, expert-<domain>, mix, btx, upcycle-init, upcycle, dense (repeatable; "
                   "default: every available one of seed, experts, btx, upcycle, dense)");

  auto* route_stats = app.add_subcommand("route-stats", "Routing utilization, gate histograms and token export");
  std::string route_model = "btx";
  route_stats->add_option("-m,--model", route_model, "Routed model (btx, mix, upcycle, upcycle-init)");

  auto* compare = app.add_subcommand("compare", "Join every evaluation report into one comparison table");
  std::string baseline;
  compare->add_option("-b,--baseline", baseline, "Baseline model for deltas (default: first report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    std::vector<std::string> extra;
    if (*mix && include_seed) extra.push_back("include_seed=true");
    if (*finetune) {
      if (!routing.empty()) extra.push_back("router.method=\"" + routing + "\"");
      if (top_k > 0) extra.push_back("router.k=" + std::to_string(top_k));
      if (alpha >= 0) extra.push_back("router.alpha=" + std::to_string(alpha));
      if (freeze_ff) extra.push_back("freeze_ff=true");
    }
    btx::Pipeline p = open_pipeline(g, extra);

    if (*seed_init) p.seed_init(g.force);
    if (*train_expert) {
      if (all_domains) domains = p.config().experts;
      if (domains.empty()) throw CLI::ValidationError("train-expert", "give --domain NAME or --all");
      p.train_experts(domains, parallel, g.force);
    }
    if (*mix) p.mix(g.force);
    if (*finetune) p.finetune(from, g.force);
    if (*dense) p.dense(g.force);
    if (*upcycle) p.upcycle(g.force);
    if (*btm_fit) p.btm_fit(g.force);
    if (*btm_eval) {
      if (ks.empty()) ks = p.config().btm_k;
      for (std::size_t k : ks) p.btm_eval(k, g.force);
    }
    if (*eval) {
      if (models.empty())
        for (const auto& m : p.evaluable_models())
          if (btx::fs::exists(p.root() / p.artifact(m).path)) models.push_back(m);
      if (models.empty()) throw btx::MissingArtifact("no trained models found; run `btx seed-init` first");
      for (const auto& m : models) p.eval(m, g.force);
    }
    if (*route_stats) p.route_stats(route_model, g.force);
    if (*compare) p.compare(baseline, g.force);
    return 0;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const btx::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const btx::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const btx::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const btx::Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
}
