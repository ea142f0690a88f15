#include "factorforge/cli.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

using namespace factorforge;

int main(int argc, char** argv) {
  CLI::App app{"factorforge: mine high-frequency risk factors with a sequence-to-sequence model"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  std::vector<std::string> overrides;
  int threads = -1;
  std::int64_t seed = -1;
  bool quiet = false;
  app.add_option("--config", config_file, "INI run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a setting, section.key=value (repeatable)");
  app.add_option("--threads", threads, "Worker threads; 0 or unset reads FACTORFORGE_THREADS");
  app.add_option("--seed", seed, "Master seed")->check(CLI::NonNegativeNumber);
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic training corpus");
  std::uint64_t count = 0;
  std::string corpus_out;
  gen->add_option("-n,--count", count, "Number of samples")->required();
  gen->add_option("-o,--out", corpus_out, "Corpus NDJSON path")->required();

  auto* trn = app.add_subcommand("train", "Train a model on a corpus");
  std::string corpus_in, ckpt_out, log_out, resume;
  trn->add_option("--corpus", corpus_in, "Corpus NDJSON path")->required();
  trn->add_option("-o,--out", ckpt_out, "Checkpoint path")->required();
  trn->add_option("--log", log_out, "CSV training log (default <out>.log.csv)");
  trn->add_option("--resume", resume, "Checkpoint to continue from");

  auto* mn = app.add_subcommand("mine", "Mine factor candidates from bar data");
  std::string ckpt_in, data_in, factors_out;
  int bags = -1, cands = -1, keep = -1, trials = 1;
  bool selftest = false;
  mn->add_option("--checkpoint", ckpt_in, "Trained checkpoint")->required();
  mn->add_option("--data", data_in, "Minute-bar CSV");
  mn->add_option("-o,--out", factors_out, "factors.json path")->required();
  mn->add_option("--bags", bags, "Number of bags B");
  mn->add_option("--cands", cands, "Candidates decoded per bag K");
  mn->add_option("--keep", keep, "Candidates refined and kept C");
  mn->add_flag("--selftest", selftest, "Mine planted synthetic expressions and report recovery R2");
  mn->add_option("--trials", trials, "Planted expressions in --selftest")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Score factors against next-day realized volatility");
  std::string factors_in, report_out;
  bool check = false;
  ev->add_option("--factors", factors_in, "factors.json")->required();
  ev->add_option("--data", data_in, "Minute-bar CSV")->required();
  ev->add_option("-o,--out", report_out, "Report JSON path")->required();
  ev->add_flag("--check", check, "Recompute every metric by brute force and require 1e-12 agreement");

  auto* bt = app.add_subcommand("backtest", "Top-k portfolio simulation of the factor pool");
  std::string nav_out;
  int top = -1;
  bt->add_option("--factors", factors_in, "factors.json")->required();
  bt->add_option("--data", data_in, "Minute-bar CSV")->required();
  bt->add_option("--top", top, "Stocks held per day (default eval.top_k = 30)");
  bt->add_option("-o,--out", nav_out, "NAV CSV path")->required();

  auto* st = app.add_subcommand("selftest", "Run a small end-to-end pipeline");
  std::string workdir = "factorforge-selftest";
  st->add_option("--dir", workdir, "Working directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (threads >= 0) overrides.push_back("run.threads=" + std::to_string(threads));
    if (seed >= 0) overrides.push_back("run.seed=" + std::to_string(seed));
    if (bags >= 0) overrides.push_back("infer.bags=" + std::to_string(bags));
    if (cands >= 0) overrides.push_back("infer.candidates=" + std::to_string(cands));
    if (keep >= 0) overrides.push_back("infer.keep=" + std::to_string(keep));
    const RunConfig cfg = load_run_config(config_file, overrides);

    if (gen->parsed()) {
      cmd_gen_corpus(cfg, count, corpus_out);
    } else if (trn->parsed()) {
      const TrainSummary s = cmd_train(cfg, corpus_in, ckpt_out, log_out, resume);
      std::cout << "steps " << s.steps << ", best val accuracy " << s.best_val_accuracy << '\n';
    } else if (mn->parsed()) {
      if (selftest) {
        const RecoveryReport r = cmd_mine_selftest(cfg, ckpt_in, trials, factors_out);
        std::cout << "recovered " << r.recovered << "/" << r.trials.size() << " (R2 >= " << r.threshold
                  << "), best held-out R2 of first trial " << r.trials.front().best_r2 << '\n';
      } else {
        if (data_in.empty()) throw ConfigError("mine needs --data unless --selftest is given");
        const MiningResult r = cmd_mine(cfg, ckpt_in, data_in, factors_out);
        std::cout << r.candidates.size() << " candidates from " << r.bags_used << " bags\n";
      }
    } else if (ev->parsed()) {
      cmd_eval(cfg, factors_in, data_in, report_out, check);
      if (check) std::cout << "oracle check passed\n";
    } else if (bt->parsed()) {
      const BacktestReport r = cmd_backtest(cfg, factors_in, data_in, top >= 0 ? top : cfg.eval.top_k, nav_out);
      std::cout << "final NAV " << (r.nav.empty() ? 1.0 : r.nav.back()) << " over " << r.nav.size() << " days\n";
    } else if (st->parsed()) {
      const int failures = cmd_selftest(cfg, workdir, std::cout);
      return failures == 0 ? 0 : 3;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return exit_code(e);
  }
  return 0;
}
