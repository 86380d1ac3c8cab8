// Command-line front end: train, prune, eval, trace, report, gen-data.
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dprune/checkpoint.hpp"
#include "dprune/config.hpp"
#include "dprune/experiment.hpp"
#include "dprune/synthdet.hpp"

namespace {

using namespace dprune;
using namespace dprune::harness;

struct Common {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double rate = -1;
  int rounds = 0;
  std::string utility;
  bool no_location = false;
  std::string method;
  std::string split = "val";
};

ExperimentConfig with_overrides(ExperimentConfig cfg, const Common& c) {
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.rate >= 0) cfg.prune.target_rate = c.rate;
  if (c.rounds > 0) cfg.prune.rounds = c.rounds;
  if (c.utility == "neck") cfg.prune.utility = prune::UtilitySource::kNeck;
  if (c.utility == "det") cfg.prune.utility = prune::UtilitySource::kDet;
  if (c.no_location) cfg.prune.location = false;
  if (c.method == "ldt") cfg.prune.method = PruneMethod::kLdt;
  if (c.method == "random") cfg.prune.method = PruneMethod::kRandom;
  if (c.method == "l1") cfg.prune.method = PruneMethod::kL1;
  // Through the parser again so overrides obey the same ranges.
  return parse_config(render_config(cfg));
}

ExperimentConfig resolve(const Common& c) {
  return with_overrides(c.config.empty() ? ExperimentConfig{} : load_config(c.config), c);
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

Checkpoint need_checkpoint(const Common& c) {
  if (c.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
  return read_checkpoint(c.checkpoint);
}

// The checkpoint's own config unless --config is given.
ExperimentConfig config_for(const Common& c, const Checkpoint& ck) {
  return c.config.empty() ? with_overrides(ck.config, c) : resolve(c);
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

int fail(const char* category, const std::string& msg, int code) {
  std::cerr << "error[" << category << "]: " << one_line(msg) << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discriminant training and channel pruning for a toy multi-scale detector"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { c.seed = v, c.seed_set = true; }, "experiment seed");
    sub->add_option("--out", c.out, "output directory");
  };

  auto* train = app.add_subcommand("train", "train a detector (LDT when alpha or beta > 0)");
  add_common(train);
  auto* prune_cmd = app.add_subcommand("prune", "iterative trace / prune / retrain");
  add_common(prune_cmd);
  prune_cmd->add_option("--checkpoint", c.checkpoint, "trained checkpoint")->required();
  prune_cmd->add_option("--rate", c.rate, "target parameter removal fraction")->check(CLI::Range(0.0, 0.999999));
  prune_cmd->add_option("--rounds", c.rounds, "prune rounds")->check(CLI::PositiveNumber);
  prune_cmd->add_option("--utility", c.utility, "utility source")->check(CLI::IsMember({"neck", "det"}));
  prune_cmd->add_flag("--no-location", c.no_location, "uniform attention mask");
  prune_cmd->add_option("--method", c.method, "importance method")->check(CLI::IsMember({"ldt", "random", "l1"}));
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", c.checkpoint, "checkpoint")->required();
  eval->add_option("--split", c.split, "dataset split")->check(CLI::IsMember({"train", "val"}));
  auto* trace = app.add_subcommand("trace", "channel utility / importance and batch stability");
  add_common(trace);
  trace->add_option("--checkpoint", c.checkpoint, "checkpoint")->required();
  trace->add_option("--utility", c.utility, "utility source")->check(CLI::IsMember({"neck", "det"}));
  trace->add_flag("--no-location", c.no_location, "uniform attention mask");
  auto* report = app.add_subcommand("report", "SVG plots and summary from a run directory");
  add_common(report);
  auto* gen = app.add_subcommand("gen-data", "export the synthetic dataset");
  add_common(gen);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 64);
  }

  try {
    if (*train) {
      const auto cfg = resolve(c);
      const auto splits = load_splits(cfg.data);
      const auto out = run_train(cfg, splits, cfg.out_dir, log_line);
      std::cout << "checkpoint " << (std::filesystem::path(cfg.out_dir) / "checkpoint.ldtc").string() << " val_map "
                << (out.epochs.empty() ? 0.0 : out.epochs.back().val_map) << "\n";
    } else if (*prune_cmd) {
      const auto ck = need_checkpoint(c);
      const auto cfg = config_for(c, ck);
      const auto splits = load_splits(cfg.data);
      const auto out = run_prune(cfg, ck, splits, cfg.out_dir, log_line);
      const auto& last = out.rounds.back();
      std::cout << "rate " << last.realized_rate << " params " << last.params << " map " << last.map << "\n";
    } else if (*eval) {
      const auto ck = need_checkpoint(c);
      const auto cfg = config_for(c, ck);
      const auto splits = load_splits(cfg.data);
      const auto r = run_eval(ck, c.split == "train" ? splits.train : splits.val, cfg.out_dir);
      std::cout << "map " << r.map.map << " params " << r.params << " macs " << r.macs << "\n";
    } else if (*trace) {
      const auto ck = need_checkpoint(c);
      const auto cfg = config_for(c, ck);
      const auto splits = load_splits(cfg.data);
      const auto r = run_trace(cfg, ck, splits, cfg.out_dir);
      double lo = 1;
      for (double v : r.min_correlation) lo = std::min(lo, v);
      std::cout << "traced_layers " << r.table.layers.size() << " min_batch_correlation " << lo << "\n";
    } else if (*report) {
      const auto cfg = resolve(c);
      run_report(cfg.out_dir);
      std::cout << "report written to " << cfg.out_dir << "\n";
    } else if (*gen) {
      const auto cfg = resolve(c);
      const auto splits = load_splits(cfg.data);
      const std::filesystem::path root(cfg.out_dir);
      data::export_samples(splits.train, root / "train");
      data::export_samples(splits.val, root / "val");
      std::cout << "exported " << splits.train.size() << " train and " << splits.val.size() << " val images to "
                << root.string() << "\n";
    }
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const CheckpointError& e) {
    return fail("checkpoint", e.what(), 3);
  } catch (const prune::InfeasibleRate& e) {
    return fail("infeasible-rate", e.what(), 4);
  } catch (const std::invalid_argument& e) {
    return fail("invalid-argument", e.what(), 5);
  } catch (const std::filesystem::filesystem_error& e) {
    return fail("io", e.what(), 6);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
