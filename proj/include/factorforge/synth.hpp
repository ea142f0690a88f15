#pragma once

#include "factorforge/bag.hpp"
#include "factorforge/errors.hpp"
#include "factorforge/expr.hpp"
#include "factorforge/rng.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <vector>

namespace factorforge {

class GenerationError : public NumericError {
 public:
  using NumericError::NumericError;
};

struct GeneratorConfig {
  int w_max = 10;
  int fixed_w = 0;  // 0 samples W ~ U{1, w_max}
  int b_max = 5;    // binary operator count b ~ U{W-1, W+b_max}
  int u_max = 5;
  std::vector<Op> binary_ops{std::begin(kBinaryOps), std::end(kBinaryOps)};
  std::vector<Op> unary_ops{std::begin(kUnaryOps), std::end(kUnaryOps)};
  int m_min_per_dim = 10;  // M ~ U{m_min_per_dim * W, m_max}
  int m_max = 200;
  int c_max = 10;
  int affine_exp_min = -2;
  int affine_exp_max = 2;
  double p_drop = 0.1;
  // Longest root-to-leaf run of operators in the skeleton (before the affine
  // expansion); 0 disables the limit.
  int max_depth = 0;
  int max_retries = 100;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);

  // Restricted grammar for desk-scale experiments: W <= 2, {add, mul, sin},
  // skeleton depth <= 3.
  static GeneratorConfig toy();
};

enum class Family : std::uint8_t { Gaussian, Uniform };

struct ClusterSpec {
  double weight = 1.0;
  Eigen::VectorXd centroid;
  Eigen::VectorXd scale;  // per-dimension standard deviation, in (0, 1)
  Family family = Family::Gaussian;
};

// Draws a value sign * mantissa * 10^exponent from the affine-coefficient
// distribution.
double sample_affine_coefficient(const GeneratorConfig& cfg, Rng& rng);

// Prefix shape of a binary tree with `internal` operators, uniform over all
// shapes: true marks an operator slot, false a leaf.
std::vector<bool> sample_binary_shape(int internal, Rng& rng);

struct ExpressionDraw {
  int w = 0;
  Expression skeleton;  // binary tree with unary insertions, before the affine step
  Expression expr;
};

ExpressionDraw draw_expression(const GeneratorConfig& cfg, int w, Rng& rng);
Expression sample_expression(const GeneratorConfig& cfg, Rng& rng);
Expression sample_expression(const GeneratorConfig& cfg, int w, Rng& rng);

// Skeleton depth of an expression: operators on the longest root-to-leaf path.
int operator_depth(const Expression& expr);

// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the signs of
// R's diagonal folded into Q).
Eigen::MatrixXd haar_rotation(int w, Rng& rng);

std::vector<ClusterSpec> sample_clusters(int w, const GeneratorConfig& cfg, Rng& rng);
// Cluster i receives floor(w_i * M) points, the last cluster the remainder.
std::vector<int> cluster_sizes(const std::vector<ClusterSpec>& clusters, int m);
// Raw (unstandardized) mixture draw; every cluster is rotated about its
// centroid by its own Haar rotation.
Eigen::MatrixXd draw_mixture(const std::vector<ClusterSpec>& clusters, int m, Rng& rng);
// Returns false when a column has zero variance.
bool standardize_columns(Eigen::MatrixXd& x);

Eigen::MatrixXd sample_inputs(int w, int m, const GeneratorConfig& cfg, Rng& rng);

struct TrainingSample {
  SampleBag bag;
  Expression expr;
  int attempts = 1;
};

// Evaluates `expr` on `inputs`; nullopt when any point is invalid.
std::optional<SampleBag> try_make_bag(const Expression& expr, Eigen::MatrixXd inputs);

TrainingSample make_training_sample(const GeneratorConfig& cfg, Rng& rng);
// Deterministic sample `index` of the corpus seeded with `master_seed`.
TrainingSample make_training_sample(const GeneratorConfig& cfg, std::uint64_t master_seed,
                                    std::uint64_t index);

// A sampled expression with a bag to mine and a held-out bag of fresh points
// from the same input distribution. Both have the training M.
struct PlantedProblem {
  Expression expr;
  SampleBag bag;
  SampleBag held_out;
};
PlantedProblem make_planted_problem(const GeneratorConfig& cfg, Rng& rng);

}  // namespace factorforge
