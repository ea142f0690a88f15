#pragma once

#include "factorforge/errors.hpp"
#include "factorforge/infer.hpp"
#include "factorforge/model.hpp"
#include "factorforge/synth.hpp"
#include "factorforge/train.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace factorforge {

struct EvalConfig {
  double corr_threshold = 0.7;
  int pool_cap = 10;
  int top_k = 30;
  double cost_rate = 0.0;
  int lookback_days = 5;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct RunSettings {
  std::string preset = "paper";  // "paper" or "toy": base values of generator and model
  std::uint64_t seed = 1;        // master seed
  int threads = 0;               // 0 = FACTORFORGE_THREADS, then 1
};

// Every setting of a run. Built from a config file with sections [run],
// [generator], [model], [train], [infer], [eval] plus `section.key=value`
// overrides; values use JSON literal syntax (numbers, true/false, "strings",
// ["lists"]). Bare words are strings.
struct RunConfig {
  RunSettings run;
  GeneratorConfig generator;
  ModelConfig model;
  TrainConfig train;
  InferenceConfig infer;
  EvalConfig eval;

  static RunConfig preset(const std::string& name);  // throws ConfigError

  // Seeds of the stochastic stages, derived from the master seed.
  std::uint64_t corpus_seed() const { return run.seed; }
  std::uint64_t train_seed() const;
  std::uint64_t infer_seed() const;

  // The fully resolved configuration, including derived seeds.
  nlohmann::ordered_json to_json() const;
};

// Throws ConfigError on unknown sections or keys, malformed values, or invalid
// settings; DataError when the file cannot be read.
RunConfig load_run_config(const std::filesystem::path& file, std::span<const std::string> overrides);
RunConfig load_run_config(std::span<const std::string> overrides);

// Writes `to_json()` plus `extra` to `path`.
void write_config_snapshot(const RunConfig& cfg, const std::filesystem::path& path,
                           const nlohmann::ordered_json& extra = {});

}  // namespace factorforge
