#include "factorforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace factorforge {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t index_of(const std::vector<std::string>& sorted, const std::string& key) {
  auto it = std::lower_bound(sorted.begin(), sorted.end(), key);
  if (it == sorted.end() || *it != key) return sorted.size();
  return static_cast<std::size_t>(it - sorted.begin());
}

// Day index ranges of each ticker inside the (ticker, date)-sorted panel.
template <class Fn>
void for_each_ticker(const BarPanel& panel, Fn&& fn) {
  std::size_t begin = 0;
  while (begin < panel.days.size()) {
    std::size_t end = begin;
    while (end < panel.days.size() && panel.days[end].ticker == panel.days[begin].ticker) ++end;
    fn(begin, end);
    begin = end;
  }
}

}  // namespace

DailyPanel DailyPanel::from_series(const DailySeries& series, std::vector<std::string> dates,
                                   std::vector<std::string> tickers) {
  DailyPanel p;
  p.dates = std::move(dates);
  p.tickers = std::move(tickers);
  p.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(p.dates.size()),
                                       static_cast<Eigen::Index>(p.tickers.size()), kNaN);
  for (const auto& [key, v] : series) {
    const std::size_t s = index_of(p.tickers, key.first);
    const std::size_t t = index_of(p.dates, key.second);
    if (s < p.tickers.size() && t < p.dates.size())
      p.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)) = v;
  }
  return p;
}

DailySeries next_day_rv(const BarPanel& panel, const DailySeries& rv) {
  DailySeries out;
  for_each_ticker(panel, [&](std::size_t begin, std::size_t end) {
    for (std::size_t d = begin; d + 1 < end; ++d) {
      auto it = rv.find({panel.days[d + 1].ticker, panel.days[d + 1].date});
      if (it != rv.end()) out[{panel.days[d].ticker, panel.days[d].date}] = it->second;
    }
  });
  return out;
}

DailySeries next_day_returns(const BarPanel& panel) {
  DailySeries out;
  for_each_ticker(panel, [&](std::size_t begin, std::size_t end) {
    for (std::size_t d = begin; d + 1 < end; ++d) {
      const auto& today = panel.days[d];
      const auto& next = panel.days[d + 1];
      if (today.size() == 0 || next.size() == 0) continue;
      const double c0 = today.features(today.size() - 1, 3);
      const double c1 = next.features(next.size() - 1, 3);
      out[{today.ticker, today.date}] = c1 / c0 - 1.0;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

double MetricSeries::mean() const {
  if (values.empty()) return kNaN;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double MetricSeries::sd() const {
  if (values.empty()) return kNaN;
  const double m = mean();
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  if (y.size() != yhat.size()) throw std::invalid_argument("r_squared: length mismatch");
  if (y.size() < 2) throw UndefinedMetric("r_squared: need at least two points");
  const double mean = y.mean();
  const double sst = (y.array() - mean).square().sum();
  if (!(sst > 0.0)) throw UndefinedMetric("r_squared: constant target");
  const double sse = (y - yhat).squaredNorm();
  return 1.0 - sse / sst;
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  if (a.size() < 2) return kNaN;
  const Eigen::ArrayXd da = a.array() - a.mean();
  const Eigen::ArrayXd db = b.array() - b.mean();
  const double saa = da.square().sum();
  const double sbb = db.square().sum();
  if (!(saa > 0.0) || !(sbb > 0.0)) return kNaN;
  const double r = (da * db).sum() / std::sqrt(saa * sbb);
  return std::clamp(r, -1.0, 1.0);
}

Eigen::VectorXd average_ranks(const Eigen::VectorXd& v) {
  const Eigen::Index n = v.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return v[a] < v[b]; });
  Eigen::VectorXd ranks(n);
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

MetricSeries daily_ic(const DailyPanel& factor, const DailyPanel& target, bool ranked) {
  if (factor.dates != target.dates || factor.tickers != target.tickers)
    throw std::invalid_argument("daily_ic: panels are not aligned");
  MetricSeries out;
  const Eigen::Index stocks = factor.values.cols();
  for (Eigen::Index t = 0; t < factor.values.rows(); ++t) {
    std::vector<double> a, b;
    for (Eigen::Index s = 0; s < stocks; ++s) {
      const double f = factor.values(t, s);
      const double y = target.values(t, s);
      if (std::isfinite(f) && std::isfinite(y)) {
        a.push_back(f);
        b.push_back(y);
      }
    }
    if (a.size() < 3) continue;
    Eigen::VectorXd va = Eigen::Map<Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
    Eigen::VectorXd vb = Eigen::Map<Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
    if (ranked) {
      va = average_ranks(va);
      vb = average_ranks(vb);
    }
    const double ic = pearson(va, vb);
    if (std::isnan(ic)) continue;
    out.dates.push_back(factor.dates[static_cast<std::size_t>(t)]);
    out.values.push_back(ic);
  }
  return out;
}

double ic_star(const DailyPanel& factor, const DailyPanel& target, MetricSeries* series) {
  MetricSeries s = daily_ic(factor, target, false);
  if (s.values.empty()) throw UndefinedMetric("ic_star: no day with a defined cross-sectional correlation");
  const double m = s.mean();
  if (series) *series = std::move(s);
  return m;
}

double rank_ic_star(const DailyPanel& factor, const DailyPanel& target, MetricSeries* series) {
  MetricSeries s = daily_ic(factor, target, true);
  if (s.values.empty()) throw UndefinedMetric("rank_ic_star: no day with a defined rank correlation");
  const double m = s.mean();
  if (series) *series = std::move(s);
  return m;
}

double ir_star(const MetricSeries& series) {
  if (series.values.size() < 2) throw UndefinedMetric("ir_star: need at least two days");
  const double sd = series.sd();
  if (!(sd > 1e-12)) throw UndefinedMetric("ir_star: IC series has zero dispersion");
  return series.mean() / sd;
}

// ---------------------------------------------------------------------------
// Pool

double series_correlation(const DailySeries& a, const DailySeries& b) {
  std::vector<double> va, vb;
  for (const auto& [key, v] : a) {
    auto it = b.find(key);
    if (it == b.end() || !std::isfinite(v) || !std::isfinite(it->second)) continue;
    va.push_back(v);
    vb.push_back(it->second);
  }
  const double r = pearson(Eigen::Map<Eigen::VectorXd>(va.data(), static_cast<Eigen::Index>(va.size())),
                           Eigen::Map<Eigen::VectorXd>(vb.data(), static_cast<Eigen::Index>(vb.size())));
  return std::isnan(r) ? 0.0 : r;
}

FactorPool filter_pool(std::vector<PoolCandidate> candidates, double threshold, int cap) {
  if (cap < 0) throw ConfigError("filter_pool: cap must be >= 0");
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const PoolCandidate& a, const PoolCandidate& b) { return std::abs(a.ic) > std::abs(b.ic); });
  FactorPool pool;
  pool.threshold = threshold;
  for (auto& c : candidates) {
    if (static_cast<int>(pool.members.size()) >= cap) break;
    bool admit = true;
    for (const auto& m : pool.members) {
      if (std::abs(series_correlation(c.values, m.values)) > threshold) {
        admit = false;
        break;
      }
    }
    if (admit) pool.members.push_back({std::move(c.name), std::move(c.expr), c.ic, std::move(c.values)});
  }
  for (std::size_t i = 0; i < pool.members.size(); ++i)
    for (std::size_t j = i + 1; j < pool.members.size(); ++j)
      if (std::abs(series_correlation(pool.members[i].values, pool.members[j].values)) > threshold)
        throw std::logic_error("filter_pool: admitted pair exceeds the correlation threshold");
  return pool;
}

// ---------------------------------------------------------------------------
// Backtest

BacktestReport simulate_top_k(const std::vector<std::string>& dates,
                              const std::vector<std::string>& tickers, const Eigen::MatrixXd& scores,
                              const Eigen::MatrixXd& returns, int k, double cost_rate) {
  if (k < 1) throw ConfigError("backtest: k must be >= 1");
  if (cost_rate < 0.0) throw ConfigError("backtest: cost rate must be >= 0");
  const Eigen::Index days = scores.rows();
  const Eigen::Index stocks = scores.cols();
  if (returns.rows() != days || returns.cols() != stocks || static_cast<Eigen::Index>(dates.size()) != days ||
      static_cast<Eigen::Index>(tickers.size()) != stocks)
    throw std::invalid_argument("simulate_top_k: inconsistent shapes");

  BacktestReport rep;
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(stocks);
  double nav = 1.0;
  for (Eigen::Index t = 0; t < days; ++t) {
    std::vector<Eigen::Index> eligible;
    for (Eigen::Index s = 0; s < stocks; ++s)
      if (std::isfinite(scores(t, s)) && std::isfinite(returns(t, s))) eligible.push_back(s);
    // Higher score first, ticker order among equals.
    std::stable_sort(eligible.begin(), eligible.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return scores(t, a) > scores(t, b); });
    bool flat = !eligible.empty();
    for (Eigen::Index s : eligible) flat = flat && scores(t, s) == scores(t, eligible.front());

    const std::size_t n = std::min<std::size_t>(eligible.size(), static_cast<std::size_t>(k));
    Eigen::VectorXd w = Eigen::VectorXd::Zero(stocks);
    std::vector<std::string> held;
    double gross = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Index s = eligible[i];
      w[s] = 1.0 / static_cast<double>(n);
      gross += returns(t, s);
      held.push_back(tickers[static_cast<std::size_t>(s)]);
    }
    if (n > 0) gross /= static_cast<double>(n);
    const double turnover = (w - prev).cwiseAbs().sum();
    const double net = gross - turnover * cost_rate;
    nav *= 1.0 + net;
    prev = w;

    rep.dates.push_back(dates[static_cast<std::size_t>(t)]);
    rep.gross_returns.push_back(gross);
    rep.turnover.push_back(turnover);
    rep.net_returns.push_back(net);
    rep.nav.push_back(nav);
    rep.holdings.push_back(std::move(held));
    rep.short_day.push_back(eligible.size() < static_cast<std::size_t>(k));
    rep.flat_scores.push_back(flat);
  }
  return rep;
}

BacktestReport backtest(const FactorPool& pool, const BarPanel& panel, int k, double cost_rate) {
  if (pool.members.empty()) throw DataError("backtest: the factor pool is empty");
  const auto dates = panel.dates();
  const auto tickers = panel.tickers();
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dates.size()),
                                                 static_cast<Eigen::Index>(tickers.size()));
  bool all_zero = true;
  for (const auto& m : pool.members) {
    all_zero = all_zero && m.weight == 0.0;
    const DailyPanel v = DailyPanel::from_series(m.values, dates, tickers);
    // NaN propagates: a missing factor value leaves the stock unscored that day.
    scores += m.weight * v.values;
  }
  const DailyPanel ret = DailyPanel::from_series(next_day_returns(panel), dates, tickers);
  BacktestReport rep = simulate_top_k(dates, tickers, scores, ret.values, k, cost_rate);
  rep.degenerate = all_zero;
  return rep;
}

void write_nav_csv(const BacktestReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << "date,daily_return,nav\n";
  char buf[80];
  for (std::size_t i = 0; i < report.dates.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", report.net_returns[i], report.nav[i]);
    os << report.dates[i] << ',' << buf << '\n';
  }
}

nlohmann::ordered_json backtest_to_json(const BacktestReport& r) {
  nlohmann::ordered_json j;
  j["final_nav"] = r.nav.empty() ? 1.0 : r.nav.back();
  j["degenerate"] = r.degenerate;
  nlohmann::ordered_json days = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.dates.size(); ++i) {
    nlohmann::ordered_json d;
    d["date"] = r.dates[i];
    d["gross_return"] = r.gross_returns[i];
    d["turnover"] = r.turnover[i];
    d["net_return"] = r.net_returns[i];
    d["nav"] = r.nav[i];
    d["holdings"] = r.holdings[i];
    d["short_day"] = static_cast<bool>(r.short_day[i]);
    d["flat_scores"] = static_cast<bool>(r.flat_scores[i]);
    days.push_back(std::move(d));
  }
  j["days"] = std::move(days);
  return j;
}

FactorMetrics evaluate_factor(const DailySeries& factor, const DailySeries& next_rv) {
  std::set<std::string> date_set, ticker_set;
  for (const auto& [key, v] : factor) {
    ticker_set.insert(key.first);
    date_set.insert(key.second);
  }
  const std::vector<std::string> dates(date_set.begin(), date_set.end());
  const std::vector<std::string> tickers(ticker_set.begin(), ticker_set.end());
  const DailyPanel f = DailyPanel::from_series(factor, dates, tickers);
  const DailyPanel y = DailyPanel::from_series(next_rv, dates, tickers);

  FactorMetrics m;
  m.ic_series = daily_ic(f, y, false);
  m.ic = m.ic_series.values.empty() ? kNaN : m.ic_series.mean();
  const MetricSeries ranked = daily_ic(f, y, true);
  m.rank_ic = ranked.values.empty() ? kNaN : ranked.mean();
  try {
    m.ir = ir_star(m.ic_series);
  } catch (const UndefinedMetric&) {
    m.ir = kNaN;
  }
  std::vector<double> yv, fv;
  for (const auto& [key, v] : factor) {
    auto it = next_rv.find(key);
    if (it == next_rv.end() || !std::isfinite(v)) continue;
    fv.push_back(v);
    yv.push_back(it->second);
  }
  try {
    m.r2 = r_squared(Eigen::Map<Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size())),
                     Eigen::Map<Eigen::VectorXd>(fv.data(), static_cast<Eigen::Index>(fv.size())));
  } catch (const UndefinedMetric&) {
    m.r2 = kNaN;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Brute-force cross-checks

namespace brute {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n < 2) return kNaN;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return kNaN;
  return cov / std::sqrt(va) / std::sqrt(vb);
}

double r_squared(const std::vector<double>& y, const std::vector<double>& yhat) {
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sse += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    sst += (y[i] - mean) * (y[i] - mean);
  }
  return 1.0 - sse / sst;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0.0, equal = 0.0;
    for (double u : v) {
      if (u < v[i]) less += 1.0;
      if (u == v[i]) equal += 1.0;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

std::vector<double> daily(const DailySeries& factor, const DailySeries& target, bool ranked) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_day;
  for (const auto& [key, v] : factor) {
    auto it = target.find(key);
    if (it == target.end() || !std::isfinite(v) || !std::isfinite(it->second)) continue;
    by_day[key.second].first.push_back(v);
    by_day[key.second].second.push_back(it->second);
  }
  std::vector<double> out;
  for (auto& [day, pair] : by_day) {
    if (pair.first.size() < 3) continue;
    const double r = ranked ? pearson(ranks(pair.first), ranks(pair.second)) : pearson(pair.first, pair.second);
    if (!std::isnan(r)) out.push_back(r);
  }
  return out;
}

}  // namespace

double ic_star(const DailySeries& factor, const DailySeries& target, bool ranked) {
  const auto v = daily(factor, target, ranked);
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? kNaN : s / static_cast<double>(v.size());
}

double ir_star(const DailySeries& factor, const DailySeries& target) {
  const auto v = daily(factor, target, false);
  if (v.size() < 2) return kNaN;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return mean / std::sqrt(var);
}

}  // namespace brute

}  // namespace factorforge
