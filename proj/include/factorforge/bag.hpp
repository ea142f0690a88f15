#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <variant>

namespace factorforge {

struct SyntheticOrigin {
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
};

struct MarketOrigin {
  std::string ticker;
  std::string date;  // last day of the lookback window
};

// M paired points (x_k in R^W, y_k in R).
struct SampleBag {
  int w = 0;
  Eigen::MatrixXd inputs;   // M x W
  Eigen::VectorXd targets;  // M
  std::variant<SyntheticOrigin, MarketOrigin> origin;

  int m() const { return static_cast<int>(inputs.rows()); }
};

std::string describe_origin(const SampleBag& bag);

// Rows of all bags in order; the origin is the first bag's. Throws
// std::invalid_argument on an empty list or mismatched widths.
SampleBag concatenate_bags(std::span<const SampleBag> bags);

}  // namespace factorforge
