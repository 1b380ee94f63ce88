// univlab: staged pipeline driver.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "univlab/parallel.hpp"
#include "univlab/pipeline.hpp"

using namespace univlab;

namespace {

void print_log(const Pipeline& p) {
  for (const auto& e : p.log())
    std::cout << (e.outcome == StageOutcome::built ? "built   " : "skipped ") << e.stage << '/' << e.name << "  ["
              << e.config_hash << "]\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"univlab: SAE feature universality and state-space circuit analysis"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config;
  std::uint64_t seed = 0;
  RunOptions opts;
  std::vector<std::string> only;
  app.add_option("--config", config, "Pipeline JSON config");
  auto* seed_opt = app.add_option("--seed", seed, "Override the config base seed");
  app.add_option("--threads", opts.threads, "Worker threads (0 = hardware)");
  app.add_option("--out-dir", opts.out_dir, "Artifact directory")->capture_default_str();
  app.add_flag("--force", opts.force, "Rebuild artifacts made from a different config");
  app.add_option("--only", only, "Restrict the stage to these entry names");

  auto* build = app.add_subcommand("build-models", "Construct and probe models");
  auto* harvest = app.add_subcommand("harvest", "Generate corpora and synthetic pairs, harvest activations");
  auto* train = app.add_subcommand("train-sae", "Train SAEs and encode their activations");
  auto* mppc = app.add_subcommand("mppc", "Max pairwise Pearson correlation jobs");
  auto* autointerp = app.add_subcommand("autointerp", "Score features with the LLM endpoint");
  auto* report = app.add_subcommand("report", "Histograms, differences and score tables");

  auto* patch = app.add_subcommand("patch", "Path-patching sweeps");
  patch->require_subcommand(1);
  std::string corruption, policy;
  patch->add_option("--policy", policy, "Freeze policy: other-states, direct or none");
  PatchCommand cmd;
  for (const char* s : {"sweep-states", "sweep-ssm", "sweep-conv", "ioi"}) {
    auto* sub = patch->add_subcommand(s);
    sub->callback([&cmd, s] { cmd.sweep = s; });
    if (std::string(s) == "sweep-conv") sub->add_option("--corruption", corruption, "b-corrupt or a-corrupt");
  }

  SynthBenchOptions sb;
  auto* bench = app.add_subcommand("synth-bench", "Planted-feature recovery benchmark");
  bench->add_option("--d", sb.d)->capture_default_str();
  bench->add_option("--f-true", sb.f_true)->capture_default_str();
  bench->add_option("--f", sb.f)->capture_default_str();
  bench->add_option("--samples", sb.samples)->capture_default_str();
  bench->add_option("--epochs", sb.epochs)->capture_default_str();
  bench->add_option("--batch", sb.batch)->capture_default_str();
  bench->add_option("--lambda", sb.lambda_l1)->capture_default_str();
  bench->add_option("--lr", sb.lr)->capture_default_str();
  bench->add_flag("--rotated", sb.rotated, "Second dictionary is a rotation of the first");
  bool no_baseline = false;
  bench->add_flag("--no-neuron-baseline", no_baseline);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*seed_opt) opts.seed = seed;
    opts.only = only;
    if (*bench) {
      if (*seed_opt) sb.seed = seed;
      sb.neuron_baseline = !no_baseline;
      if (opts.threads > 0) set_num_threads(opts.threads);
      std::cout << synth_bench(sb).dump(2) << '\n';
      return 0;
    }
    UNIV_CHECK(!config.empty(), usage, "--config is required for " + app.get_subcommands().front()->get_name());
    Pipeline p = Pipeline::from_file(config, opts);
    if (*build) p.build_models();
    else if (*harvest) p.harvest();
    else if (*train) p.train_saes();
    else if (*mppc) p.mppc();
    else if (*autointerp) p.autointerp();
    else if (*report) p.report();
    else if (*patch) {
      if (!corruption.empty()) cmd.corruption = parse_corruption(corruption);
      if (!policy.empty()) cmd.policy = parse_freeze_policy(policy);
      p.patch(cmd);
    }
    print_log(p);
    return 0;
  } catch (const Error& e) {
    std::cerr << "univlab: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "univlab: " << e.what() << '\n';
    return 2;
  }
}
