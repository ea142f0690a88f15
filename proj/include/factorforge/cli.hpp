#pragma once

#include "factorforge/config.hpp"
#include "factorforge/eval.hpp"
#include "factorforge/infer.hpp"
#include "factorforge/train.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace factorforge {

// Process exit status for an error escaping a subcommand: 1 usage or
// config, 2 data or I/O, 3 numeric failure.
int exit_code(const std::exception& e);

// `<out>.config.json`: the resolved configuration written next to an output.
std::filesystem::path snapshot_path(const std::filesystem::path& out);

void cmd_gen_corpus(const RunConfig& cfg, std::uint64_t count, const std::filesystem::path& out);

// The log defaults to `<out>.log.csv`.
TrainSummary cmd_train(const RunConfig& cfg, const std::filesystem::path& corpus, const std::filesystem::path& out,
                       std::filesystem::path log = {}, const std::filesystem::path& resume = {});

// Bags of `eval.lookback_days` days per stock-day, pooled and re-bagged by the
// miner. Factor variables are open, high, low, close, volume, vwap.
MiningResult cmd_mine(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                      const std::filesystem::path& data, const std::filesystem::path& out);

// Planted-expression recovery: each trial draws an expression from the
// generator config, mines one bag of its points and scores every returned
// candidate by R² on fresh points. A trial recovers the expression when the
// best held-out R² reaches `threshold`.
struct RecoveryTrial {
  Expression planted;
  std::vector<Candidate> candidates;
  std::vector<double> held_out_r2;  // per candidate
  double best_r2 = 0.0;             // NaN when no candidate is defined everywhere
  bool recovered = false;
  std::string failure;  // set when mining threw
};

struct RecoveryReport {
  std::vector<RecoveryTrial> trials;
  int recovered = 0;
  double threshold = 0.99;
  double seconds = 0.0;

  double rate() const { return trials.empty() ? 0.0 : static_cast<double>(recovered) / trials.size(); }
  nlohmann::ordered_json to_json() const;
};

RecoveryReport run_recovery(const GeneratorConfig& gen, const CandidateGenerator& generator,
                            const InferenceConfig& infer, int trials, std::uint64_t seed, double threshold = 0.99);

RecoveryReport cmd_mine_selftest(const RunConfig& cfg, const std::filesystem::path& checkpoint, int trials,
                                 const std::filesystem::path& out);

// Report with IC*, RankIC*, IR*, R² and the daily IC series of each factor.
// With `check`, every metric is recomputed by the brute-force implementations
// and a disagreement above 1e-12 throws NumericError.
nlohmann::ordered_json cmd_eval(const RunConfig& cfg, const std::filesystem::path& factors,
                                const std::filesystem::path& data, const std::filesystem::path& out, bool check);

// Correlation-filtered, IC*-weighted pool, top-k portfolio. Writes the NAV CSV
// at `out` and the full report at `<out>.json`. Throws DataError on an empty
// pool.
BacktestReport cmd_backtest(const RunConfig& cfg, const std::filesystem::path& factors,
                            const std::filesystem::path& data, int top_k, const std::filesystem::path& out);

// Small end-to-end run of every subcommand in `workdir`. Returns the number of
// failed checks.
int cmd_selftest(const RunConfig& cfg, const std::filesystem::path& workdir, std::ostream& log);

}  // namespace factorforge
