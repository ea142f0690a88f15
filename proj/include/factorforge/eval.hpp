#pragma once

#include "factorforge/errors.hpp"
#include "factorforge/expr.hpp"
#include "factorforge/market.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace factorforge {

class UndefinedMetric : public NumericError {
 public:
  using NumericError::NumericError;
};

// Dates x tickers matrix, NaN where a stock-day has no value.
struct DailyPanel {
  std::vector<std::string> dates;
  std::vector<std::string> tickers;
  Eigen::MatrixXd values;

  // Lays `series` out on the given axes (sorted, unique).
  static DailyPanel from_series(const DailySeries& series, std::vector<std::string> dates,
                                std::vector<std::string> tickers);
};

// value(ticker, t) = RV(ticker, next trading day of the ticker after t).
DailySeries next_day_rv(const BarPanel& panel, const DailySeries& rv);

// value(ticker, t) = close(t + 1) / close(t) - 1 using each day's last close.
DailySeries next_day_returns(const BarPanel& panel);

struct MetricSeries {
  std::vector<std::string> dates;
  std::vector<double> values;

  double mean() const;
  double sd() const;  // population
};

// 1 - SSE / SST. Throws UndefinedMetric when y is constant or has < 2 points.
double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat);

// NaN when either side is constant or fewer than two points are given.
double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// 1-based ranks, ties receive their average rank.
Eigen::VectorXd average_ranks(const Eigen::VectorXd& v);

// Daily cross-sectional correlation between factor(t) and target(t) over
// stocks with both values. Days with fewer than 3 such stocks or a constant
// side are skipped. `ranked` correlates within-day average ranks.
MetricSeries daily_ic(const DailyPanel& factor, const DailyPanel& target, bool ranked);

// Mean of the daily IC series; throws UndefinedMetric when every day is
// degenerate. The series is written to `series` when given.
double ic_star(const DailyPanel& factor, const DailyPanel& target, MetricSeries* series = nullptr);
double rank_ic_star(const DailyPanel& factor, const DailyPanel& target, MetricSeries* series = nullptr);

// Mean over population sd of the series. Throws UndefinedMetric with fewer
// than two days or sd <= 1e-12.
double ir_star(const MetricSeries& series);

struct PoolCandidate {
  std::string name;
  Expression expr;
  double ic = 0.0;
  DailySeries values;
};

struct PoolMember {
  std::string name;
  Expression expr;
  double weight = 0.0;  // the factor's IC*
  DailySeries values;
};

struct FactorPool {
  std::vector<PoolMember> members;
  double threshold = 0.7;
};

// Pearson correlation of two value series over their common stock-days; 0
// when undefined.
double series_correlation(const DailySeries& a, const DailySeries& b);

// Greedy selection by descending |IC*|: a candidate is admitted when its
// absolute correlation with every admitted factor is <= threshold.
FactorPool filter_pool(std::vector<PoolCandidate> candidates, double threshold, int cap);

struct BacktestReport {
  std::vector<std::string> dates;         // day t on which the portfolio is formed
  std::vector<double> gross_returns;      // mean member return from t to t + 1
  std::vector<double> turnover;           // sum |w_t - w_{t-1}|
  std::vector<double> net_returns;        // gross - turnover * cost
  std::vector<double> nav;                // compounded, starting from 1
  std::vector<std::vector<std::string>> holdings;
  std::vector<bool> short_day;            // fewer than k eligible stocks
  std::vector<bool> flat_scores;          // every eligible score equal
  bool degenerate = false;                // all factor weights zero
};

// Core simulation on aligned matrices (days x stocks, NaN = unavailable).
// Stocks are eligible on day t when both score and return are finite; ties in
// score are broken by ticker order.
BacktestReport simulate_top_k(const std::vector<std::string>& dates,
                              const std::vector<std::string>& tickers, const Eigen::MatrixXd& scores,
                              const Eigen::MatrixXd& returns, int k, double cost_rate);

// a(s, t) = sum_n w(n) V(s, n, t), then simulate_top_k on next-day returns.
BacktestReport backtest(const FactorPool& pool, const BarPanel& panel, int k, double cost_rate);

void write_nav_csv(const BacktestReport& report, const std::filesystem::path& path);
nlohmann::ordered_json backtest_to_json(const BacktestReport& report);

struct FactorMetrics {
  double ic = 0.0;
  double rank_ic = 0.0;
  double ir = 0.0;
  double r2 = 0.0;
  MetricSeries ic_series;
};

// IC*, RankIC*, IR* of daily factor values against next-day RV, and R² of the
// factor values as predictions of next-day RV pooled over stock-days.
// Undefined metrics are reported as NaN.
FactorMetrics evaluate_factor(const DailySeries& factor, const DailySeries& next_rv);

// Straightforward loop implementations used to cross-check the metrics.
namespace brute {
double pearson(const std::vector<double>& a, const std::vector<double>& b);
double r_squared(const std::vector<double>& y, const std::vector<double>& yhat);
double ic_star(const DailySeries& factor, const DailySeries& target, bool ranked);
double ir_star(const DailySeries& factor, const DailySeries& target);
}  // namespace brute

}  // namespace factorforge
