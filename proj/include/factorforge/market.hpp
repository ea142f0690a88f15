#pragma once

#include "factorforge/bag.hpp"
#include "factorforge/errors.hpp"
#include "factorforge/expr.hpp"

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace factorforge {

// Feature order of every bar row, i.e. the meaning of x0..x5.
inline constexpr int kBarFeatures = 6;
inline const std::array<std::string, kBarFeatures> kBarFeatureNames = {"open", "high", "low",
                                                                      "close", "volume", "vwap"};

// All minute bars of one stock on one trading day, in time order.
struct DayBars {
  std::string ticker;
  std::string date;          // ISO-8601
  std::vector<int> minutes;  // minutes since midnight, strictly increasing
  Eigen::MatrixXd features;  // n x 6

  int size() const { return static_cast<int>(minutes.size()); }
  Eigen::VectorXd closes() const { return features.col(3); }
};

// Stock-days sorted by (ticker, date).
struct BarPanel {
  std::vector<DayBars> days;

  std::vector<std::string> tickers() const;
  std::vector<std::string> dates() const;
};

using StockDay = std::pair<std::string, std::string>;  // (ticker, date)
using DailySeries = std::map<StockDay, double>;

// Parses `ticker,date,time,open,high,low,close,volume,vwap` with a header row.
// Row order does not matter. Errors carry the 1-based line number.
BarPanel read_bars(std::istream& in, const std::string& source = "<stream>");
BarPanel read_bars_csv(const std::filesystem::path& path);
void write_bars_csv(const BarPanel& panel, const std::filesystem::path& path);

// Sum of squared log returns of consecutive closes. Throws DataError on a
// non-positive price and std::invalid_argument with fewer than two closes.
double compute_rv(const Eigen::VectorXd& closes);

// RV of every stock-day with at least two bars.
DailySeries compute_rv_series(const BarPanel& panel);
void write_rv_csv(const DailySeries& rv, const std::filesystem::path& path);

struct BagBuildStats {
  int built = 0;
  int skipped_missing_target = 0;
};

// One bag per (ticker, day d) with the bars of days [d - lookback + 1, d] as
// rows and RV(ticker, d + 1) as every row's target. d + 1 is the ticker's next
// trading day in the panel.
std::vector<SampleBag> build_bags(const BarPanel& panel, const DailySeries& rv, int lookback_days,
                                  BagBuildStats* stats = nullptr);

// Daily factor value: mean of the expression over the day's valid bars.
// Stock-days without a valid bar are absent.
DailySeries factor_values(const Expression& expr, const BarPanel& panel);

// Deterministic synthetic panel for demos and tests: geometric random-walk
// prices with per-stock volatility levels that persist across days.
struct SyntheticMarketConfig {
  int tickers = 20;
  int days = 30;
  int bars_per_day = 60;
  std::uint64_t seed = 1;
};
BarPanel synthetic_panel(const SyntheticMarketConfig& cfg);

}  // namespace factorforge
