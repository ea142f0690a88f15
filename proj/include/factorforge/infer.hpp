#pragma once

#include "factorforge/bag.hpp"
#include "factorforge/codec.hpp"
#include "factorforge/decode.hpp"
#include "factorforge/errors.hpp"
#include "factorforge/expr.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace factorforge {

// No candidate could be parsed from any bag.
class MiningFailure : public NumericError {
 public:
  using NumericError::NumericError;
};

struct InferenceConfig {
  int bag_size = 400;
  int bags = 100;        // B
  int candidates = 10;   // K per bag
  int keep = 10;         // C refined
  int subset_cap = 1024;
  int bfgs_max_iter = 200;
  double bfgs_grad_tol = 1e-10;
  DecodeMode mode = DecodeMode::Beam;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  int threads = 1;

  void validate() const;  // throws ConfigError
  nlohmann::ordered_json to_json() const;
  static InferenceConfig from_json(const nlohmann::json& j);
};

// Per-bag standardization.
struct Scaling {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;
  double y_mu = 0.0;
  double y_sigma = 1.0;
  std::vector<bool> degenerate;  // columns whose sd fell below 1e-12
  bool y_degenerate = false;
};

struct ScaledBag {
  SampleBag bag;
  Scaling scaling;
};

// Throws DataError on an empty bag.
ScaledBag scale_bag(const SampleBag& bag);
// Maps raw points into the coordinates described by `s`.
SampleBag apply_scaling(const SampleBag& raw, const Scaling& s);
// y_sigma * e((x - mu) / sigma) + y_mu.
Expression unscale(const Expression& scaled, const Scaling& s);

// Per-point penalty added to the squared-error sum for points where the
// expression is undefined.
inline constexpr double kInvalidPenalty = 1e6;

// (sum of squared residuals over valid points + penalty per invalid point) / M.
double fit_error(const Expression& expr, const SampleBag& bag);

// R² of the expression's predictions on `bag`; NaN when it is undefined on any
// point or the targets are constant.
double prediction_r2(const Expression& expr, const SampleBag& bag);

struct RefineResult {
  Expression expr;
  double error_before = 0.0;
  double error_after = 0.0;
  int iterations = 0;
  bool refined = false;  // true when the returned constants improved the fit
};

// BFGS with Armijo backtracking on fit_error over at most cfg.subset_cap points
// of `bag`, starting from the constants already in `expr`. Never returns a
// result worse than the starting point.
RefineResult refine(const Expression& expr, const SampleBag& bag, const InferenceConfig& cfg);
inline Expression refine_constants(const Expression& expr, const SampleBag& bag, const InferenceConfig& cfg) {
  return refine(expr, bag, cfg).expr;
}

struct Candidate {
  Expression expr;
  std::vector<TokenId> tokens;  // as generated, BOS ... EOS
  double fit_error = 0.0;
  double pre_refine_error = 0.0;
  double r_squared = 0.0;  // NaN when undefined
  double log_prob = 0.0;
  bool refined = false;
  int bag = -1;  // index of the mining bag the candidate came from
  std::string origin;
};

// Scores every candidate on `bag`, sorts ascending by error, drops duplicate
// factors keeping the better one, and returns the first `keep`.
std::vector<Candidate> rank_and_dedup(std::vector<Candidate> candidates, const SampleBag& bag, int keep);

// Source of token sequences for a standardized bag.
class CandidateGenerator {
 public:
  virtual ~CandidateGenerator() = default;
  virtual int w_max() const = 0;
  virtual std::vector<Hypothesis> generate(const SampleBag& scaled, int k, std::uint64_t seed) const = 0;
};

class ModelGenerator final : public CandidateGenerator {
 public:
  ModelGenerator(const Transformer<float>& model, const InferenceConfig& cfg);
  int w_max() const override { return model_->config().w_max; }
  std::vector<Hypothesis> generate(const SampleBag& scaled, int k, std::uint64_t seed) const override;

 private:
  const Transformer<float>* model_;
  Vocabulary vocab_;
  InferenceConfig cfg_;
};

struct MiningResult {
  std::vector<Candidate> candidates;  // ascending fit error, at most keep
  std::size_t bags_used = 0;
  std::size_t generated = 0;
  std::size_t malformed = 0;
  std::size_t points = 0;
};

// Splits the input into bags of at most bag_size points, decodes K candidates
// per bag, keeps the best C, refines them, unscales, and re-ranks them on all
// input points. Throws MiningFailure when nothing parses.
MiningResult mine(std::span<const SampleBag> bags, const CandidateGenerator& generator,
                  const InferenceConfig& cfg);

nlohmann::ordered_json candidates_to_json(const std::vector<Candidate>& candidates,
                                          std::span<const std::string> names = {});
void write_factors(const std::filesystem::path& path, const MiningResult& result,
                   std::span<const std::string> names = {});

struct FactorRecord {
  std::string name;
  Expression expr;
};
// Reads the "factors" list written by write_factors. Throws DataError.
std::vector<FactorRecord> read_factors(const std::filesystem::path& path);

}  // namespace factorforge
