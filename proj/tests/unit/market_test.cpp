#include "factorforge/market.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

using namespace factorforge;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

std::string bar(const std::string& t, const std::string& d, const std::string& time, double c) {
  std::ostringstream os;
  os << t << ',' << d << ',' << time << ',' << c << ',' << c << ',' << c << ',' << c << ",100," << c;
  return os.str();
}

}  // namespace

TEST(ComputeRv, Examples) {
  EXPECT_EQ(compute_rv(vec({100, 100, 100})), 0.0);
  EXPECT_NEAR(compute_rv(vec({100, 101, 100.5})), 1.2363e-4, 1e-8);
  const double a = std::log(1.01), b = std::log(100.5 / 101.0);
  EXPECT_NEAR(compute_rv(vec({100, 101, 100.5})), a * a + b * b, 1e-18);
}

TEST(ComputeRv, ScaleInvariantAndAdditive) {
  std::mt19937_64 rng(3);
  std::lognormal_distribution<double> price(4.0, 0.1);
  for (int t = 0; t < 50; ++t) {
    Eigen::VectorXd c(20);
    for (auto& v : c) v = price(rng);
    const double rv = compute_rv(c);
    EXPECT_NEAR(compute_rv(2.0 * c), rv, 1e-14 * rv);
    const int cut = 1 + t % 18;
    // The shared price at the cut joins the two partitions.
    EXPECT_NEAR(compute_rv(c.head(cut + 1)) + compute_rv(c.tail(20 - cut)), rv, 1e-14 * rv);
  }
}

TEST(ComputeRv, Errors) {
  EXPECT_THROW(compute_rv(vec({100, 0, 101})), DataError);
  EXPECT_THROW(compute_rv(vec({100})), std::invalid_argument);
}

TEST(ReadBars, ParsesAndSorts) {
  std::istringstream in(
      "ticker,date,time,open,high,low,close,volume,vwap\n" + bar("B", "2024-01-02", "09:31", 11) + "\n" +
      bar("A", "2024-01-02", "09:32", 2) + "\n" + bar("A", "2024-01-02", "09:31", 1) + "\n");
  const BarPanel p = read_bars(in);
  ASSERT_EQ(p.days.size(), 2u);
  EXPECT_EQ(p.days[0].ticker, "A");
  EXPECT_EQ(p.days[0].minutes, (std::vector<int>{571, 572}));
  EXPECT_EQ(p.days[0].closes(), vec({1, 2}));
  EXPECT_EQ(p.tickers(), (std::vector<std::string>{"A", "B"}));
}

TEST(ReadBars, OrderInsensitive) {
  std::vector<std::string> rows;
  for (const char* t : {"A", "B", "C"})
    for (const char* d : {"2024-01-02", "2024-01-03"})
      for (int m = 0; m < 5; ++m) rows.push_back(bar(t, d, "10:0" + std::to_string(m), 10 + m));
  auto render = [&](const std::vector<std::string>& r) {
    std::string s = "ticker,date,time,open,high,low,close,volume,vwap\n";
    for (const auto& x : r) s += x + "\n";
    return s;
  };
  std::istringstream a(render(rows));
  const BarPanel pa = read_bars(a);
  std::shuffle(rows.begin(), rows.end(), std::mt19937_64(1));
  std::istringstream b(render(rows));
  const BarPanel pb = read_bars(b);
  ASSERT_EQ(pa.days.size(), pb.days.size());
  for (std::size_t i = 0; i < pa.days.size(); ++i) {
    EXPECT_EQ(pa.days[i].ticker, pb.days[i].ticker);
    EXPECT_EQ(pa.days[i].date, pb.days[i].date);
    EXPECT_EQ(pa.days[i].minutes, pb.days[i].minutes);
    EXPECT_EQ(pa.days[i].features, pb.days[i].features);
  }
}

TEST(ReadBars, ErrorsCarryLineNumbers) {
  auto error_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      read_bars(in, "f.csv");
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  const std::string h = "ticker,date,time,open,high,low,close,volume,vwap\n";
  EXPECT_NE(error_of(h + bar("A", "2024-01-02", "09:31", 1) + "\nA,2024-01-02,09:32,1,1,1,x,1,1\n")
                .find("f.csv:3:"),
            std::string::npos);
  EXPECT_NE(error_of(h + "A,2024-01-02,09:31,1,1,1,-1,1,1\n").find("f.csv:2:"), std::string::npos);
  EXPECT_NE(error_of(h + "A,2024-13-02,09:31,1,1,1,1,1,1\n").find("date"), std::string::npos);
  EXPECT_NE(error_of(h + "A,2024-01-02,9h31,1,1,1,1,1,1\n").find("time"), std::string::npos);
  EXPECT_NE(error_of(h + "A,2024-01-02,09:31,1,1,1,1,1\n").find("9 fields"), std::string::npos);
  EXPECT_NE(error_of("a,b,c\n").find("f.csv:1:"), std::string::npos);
  EXPECT_NE(error_of(h + bar("A", "2024-01-02", "09:31", 1) + "\n" + bar("A", "2024-01-02", "09:31", 2) + "\n")
                .find("duplicate"),
            std::string::npos);
}

TEST(ReadBars, CsvRoundTrip) {
  SyntheticMarketConfig cfg;
  cfg.tickers = 3;
  cfg.days = 4;
  cfg.bars_per_day = 10;
  const BarPanel p = synthetic_panel(cfg);
  const auto path = std::filesystem::temp_directory_path() / "ff_market_roundtrip.csv";
  write_bars_csv(p, path);
  const BarPanel q = read_bars_csv(path);
  ASSERT_EQ(q.days.size(), p.days.size());
  for (std::size_t i = 0; i < p.days.size(); ++i)
    EXPECT_TRUE(q.days[i].features.isApprox(p.days[i].features, 1e-9));
  std::filesystem::remove(path);
}

TEST(BuildBags, ShapesAndCounts) {
  SyntheticMarketConfig cfg;
  cfg.tickers = 3;
  cfg.days = 8;
  cfg.bars_per_day = 240;
  const BarPanel p = synthetic_panel(cfg);
  const DailySeries rv = compute_rv_series(p);
  BagBuildStats stats;
  const auto bags = build_bags(p, rv, 5, &stats);
  // Per ticker: days 5..7 have a successor, i.e. days - lookback bags.
  ASSERT_EQ(bags.size(), 3u * (8 - 5));
  EXPECT_EQ(stats.built, 9);
  for (const auto& b : bags) {
    EXPECT_EQ(b.w, 6);
    EXPECT_EQ(b.m(), 1200);
    EXPECT_EQ(b.targets.minCoeff(), b.targets.maxCoeff());
  }
  const auto& first = std::get<MarketOrigin>(bags.front().origin);
  EXPECT_EQ(first.ticker, "S000");
  EXPECT_EQ(first.date, p.days[4].date);
  EXPECT_EQ(bags.front().targets[0], rv.at({"S000", p.days[5].date}));
  // The last day of the panel never anchors a bag.
  for (const auto& b : bags) EXPECT_NE(std::get<MarketOrigin>(b.origin).date, p.days[7].date);
}

TEST(BuildBags, MissingTargetIsSkipped) {
  SyntheticMarketConfig cfg;
  cfg.tickers = 1;
  cfg.days = 4;
  cfg.bars_per_day = 5;
  const BarPanel p = synthetic_panel(cfg);
  DailySeries rv = compute_rv_series(p);
  rv.erase({"S000", p.days[3].date});
  BagBuildStats stats;
  const auto bags = build_bags(p, rv, 2, &stats);
  EXPECT_EQ(bags.size(), 1u);
  EXPECT_EQ(stats.skipped_missing_target, 1);
}

TEST(FactorValues, Examples) {
  BarPanel p;
  DayBars d;
  d.ticker = "A";
  d.date = "2024-01-02";
  d.minutes = {600, 601, 602};
  d.features = Eigen::MatrixXd::Constant(3, 6, 50.0);
  p.days.push_back(d);
  const auto close = factor_values(Expression::variable(3), p);
  EXPECT_DOUBLE_EQ(close.at({"A", "2024-01-02"}), 50.0);
  const auto none = factor_values(Expression::constant(1) / (Expression::variable(3) - Expression::variable(3)), p);
  EXPECT_TRUE(none.empty());
  const auto two = factor_values(Expression::constant(2), p);
  EXPECT_DOUBLE_EQ(two.at({"A", "2024-01-02"}), 2.0);
}

TEST(FactorValues, MeanSkipsInvalidBars) {
  BarPanel p;
  DayBars d;
  d.ticker = "A";
  d.date = "2024-01-02";
  d.minutes = {600, 601, 602};
  d.features = Eigen::MatrixXd::Constant(3, 6, 1.0);
  d.features(0, 0) = 4.0;
  d.features(1, 0) = 0.0;
  d.features(2, 0) = 1.0;
  p.days.push_back(d);
  // 1/x0 over {4, 0, 1}: the zero bar is invalid.
  EXPECT_DOUBLE_EQ(factor_values(apply(Op::Inv, Expression::variable(0)), p).at({"A", "2024-01-02"}), 0.625);
}
