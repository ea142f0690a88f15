#pragma once

#include "factorforge/corpus.hpp"
#include "factorforge/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace factorforge {

struct TrainConfig {
  int warmup_steps = 10000;
  double peak_lr = 2e-3;
  double initial_lr = 2e-7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  int batch_tokens = 2000;  // target-token budget per batch
  int epochs = 1;
  std::int64_t max_steps = 0;  // 0 = run all epochs
  double val_fraction = 0.1;
  int val_samples = 1000;  // cap on validation samples scored per evaluation
  int log_every = 100;
  int eval_every = 1000;  // multiple of log_every
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear warmup from initial_lr to peak_lr over [0, warmup], then
// peak_lr * sqrt(warmup / step).
double lr_schedule(std::int64_t step, const TrainConfig& tc);

struct TrainingExample {
  std::uint64_t id = 0;
  TokenGrid grid;
  std::vector<TokenId> target;  // BOS ... EOS
};

TrainingExample to_example(const CorpusRecord& record, int w_max);

struct AdamState {
  ParamVector<float> m, v;
  std::int64_t t = 0;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ParamVector<float> params;
  AdamState adam;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::int64_t batch_in_epoch = 0;
  std::uint64_t epoch_seed = 0;
  std::string rng_state;
  double best_val_accuracy = -1.0;

  // Binary file: "FFCKPT1\n", u64 LE header length, JSON header (configs,
  // vocabulary, tensor manifest with byte offsets), then little-endian
  // float32 arrays in manifest order.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  Transformer<float> build() const;
};

// Owns the parameters and optimizer state; applies one Adam update per call.
class Trainer {
 public:
  Trainer(const ModelConfig& mc, const TrainConfig& tc);
  explicit Trainer(const Checkpoint& ckpt);

  struct StepResult {
    double loss = 0.0;  // mean token cross-entropy before the update
    double lr = 0.0;
    double grad_norm = 0.0;
    int tokens = 0;
  };
  // Throws NumericError on a non-finite loss or gradient, leaving the
  // parameters untouched. `batch_id` is reported in the message.
  StepResult step(std::span<const TrainingExample* const> batch, std::int64_t batch_id = -1);

  struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    int tokens = 0;
  };
  EvalResult evaluate(std::span<const TrainingExample* const> samples) const;

  const Transformer<float>& model() const { return model_; }
  Transformer<float>& model() { return model_; }
  std::int64_t global_step() const { return step_; }
  const TrainConfig& config() const { return tc_; }

  Checkpoint checkpoint() const;

  // Loop position bookkeeping carried through checkpoints.
  std::int64_t epoch = 0;
  std::int64_t batch_in_epoch = 0;
  std::uint64_t epoch_seed = 0;
  double best_val_accuracy = -1.0;
  Rng rng;

 private:
  TrainConfig tc_;
  Transformer<float> model_;
  AdamState adam_;
  ParamVector<float> grads_;
  std::int64_t step_ = 0;
};

// Disjoint train/validation index sets over n samples; the validation set
// holds round(fraction * n) samples chosen by a seeded permutation.
struct DataSplit {
  std::vector<std::size_t> train, val;
};
DataSplit split_samples(std::size_t n, double val_fraction, std::uint64_t seed);

// Groups samples of similar target length into batches under the token
// budget, then shuffles batch order with `seed`.
std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainingExample> data,
                                                   std::span<const std::size_t> indices, int batch_tokens,
                                                   std::uint64_t seed);

struct TrainSummary {
  std::int64_t steps = 0;
  double best_val_accuracy = -1.0;
  double last_val_loss = 0.0;
  std::size_t train_samples = 0;
  std::size_t val_samples = 0;
  std::size_t skipped_too_long = 0;
};

// Full loop: split, bucket, train with periodic validation, write the CSV
// log (step, lr, train_loss, val_loss, val_acc), keep the best checkpoint at
// `out` and the latest at `out` + ".last". With `resume`, continues from
// that checkpoint's step counter and loop position.
TrainSummary train(std::span<const TrainingExample> data, const ModelConfig& mc, const TrainConfig& tc,
                   const std::filesystem::path& out, const std::filesystem::path& log,
                   const Checkpoint* resume = nullptr);

}  // namespace factorforge
