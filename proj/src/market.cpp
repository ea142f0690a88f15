#include "factorforge/market.hpp"

#include "factorforge/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace factorforge {

namespace {

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view s, double& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

bool valid_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  if (!digits(s.substr(0, 4)) || !digits(s.substr(5, 2)) || !digits(s.substr(8, 2))) return false;
  const int month = std::stoi(std::string(s.substr(5, 2)));
  const int day = std::stoi(std::string(s.substr(8, 2)));
  return month >= 1 && month <= 12 && day >= 1 && day <= 31;
}

int parse_minutes(std::string_view s) {
  if (s.size() != 5 || s[2] != ':' || !digits(s.substr(0, 2)) || !digits(s.substr(3, 2))) return -1;
  const int h = std::stoi(std::string(s.substr(0, 2)));
  const int m = std::stoi(std::string(s.substr(3, 2)));
  if (h > 23 || m > 59) return -1;
  return h * 60 + m;
}

constexpr std::string_view kHeader = "ticker,date,time,open,high,low,close,volume,vwap";

}  // namespace

std::vector<std::string> BarPanel::tickers() const {
  std::set<std::string> s;
  for (const auto& d : days) s.insert(d.ticker);
  return {s.begin(), s.end()};
}

std::vector<std::string> BarPanel::dates() const {
  std::set<std::string> s;
  for (const auto& d : days) s.insert(d.date);
  return {s.begin(), s.end()};
}

BarPanel read_bars(std::istream& in, const std::string& source) {
  auto fail = [&](std::size_t line, const std::string& msg) {
    throw DataError(source + ":" + std::to_string(line) + ": " + msg);
  };
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  struct Row {
    int minute;
    std::array<double, kBarFeatures> f;
    std::size_t line;
  };
  std::map<StockDay, std::vector<Row>> grouped;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view view = trim(line);
    if (view.empty()) continue;
    if (!header) {
      std::string compact;
      for (char c : view)
        if (c != ' ' && c != '\t') compact += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      if (compact != kHeader) fail(line_no, "expected header '" + std::string(kHeader) + "'");
      header = true;
      continue;
    }
    const auto fields = split(view, ',');
    if (fields.size() != 9) fail(line_no, "expected 9 fields, found " + std::to_string(fields.size()));
    const std::string ticker(trim(fields[0]));
    const std::string date(trim(fields[1]));
    if (ticker.empty()) fail(line_no, "empty ticker");
    if (!valid_date(date)) fail(line_no, "invalid date '" + date + "' (expected YYYY-MM-DD)");
    Row row;
    row.line = line_no;
    row.minute = parse_minutes(trim(fields[2]));
    if (row.minute < 0) fail(line_no, "invalid time '" + std::string(trim(fields[2])) + "' (expected HH:MM)");
    for (int k = 0; k < kBarFeatures; ++k) {
      if (!parse_double(trim(fields[3 + k]), row.f[k]))
        fail(line_no, "invalid " + kBarFeatureNames[k] + " '" + std::string(trim(fields[3 + k])) + "'");
      const bool is_volume = k == 4;
      if (is_volume ? row.f[k] < 0.0 : row.f[k] <= 0.0)
        fail(line_no, kBarFeatureNames[k] + (is_volume ? " must be non-negative" : " must be positive"));
    }
    grouped[{ticker, date}].push_back(row);
  }
  if (!header) fail(line_no, "missing header");

  BarPanel panel;
  panel.days.reserve(grouped.size());
  for (auto& [key, rows] : grouped) {
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.minute < b.minute; });
    DayBars day;
    day.ticker = key.first;
    day.date = key.second;
    day.features.resize(static_cast<Eigen::Index>(rows.size()), kBarFeatures);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i > 0 && rows[i].minute == rows[i - 1].minute)
        fail(std::max(rows[i].line, rows[i - 1].line), "duplicate bar for " + key.first + " " + key.second);
      day.minutes.push_back(rows[i].minute);
      for (int k = 0; k < kBarFeatures; ++k) day.features(static_cast<Eigen::Index>(i), k) = rows[i].f[k];
    }
    panel.days.push_back(std::move(day));
  }
  return panel;
}

BarPanel read_bars_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_bars(in, path.string());
}

void write_bars_csv(const BarPanel& panel, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << kHeader << '\n';
  char buf[64];
  for (const auto& d : panel.days) {
    for (int i = 0; i < d.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%02d:%02d", d.minutes[i] / 60, d.minutes[i] % 60);
      os << d.ticker << ',' << d.date << ',' << buf;
      for (int k = 0; k < kBarFeatures; ++k) {
        std::snprintf(buf, sizeof buf, "%.10g", d.features(i, k));
        os << ',' << buf;
      }
      os << '\n';
    }
  }
}

double compute_rv(const Eigen::VectorXd& closes) {
  if (closes.size() < 2) throw std::invalid_argument("compute_rv: need at least two closes");
  if ((closes.array() <= 0.0).any()) throw DataError("compute_rv: non-positive price");
  double rv = 0.0;
  for (Eigen::Index j = 1; j < closes.size(); ++j) {
    const double r = std::log(closes[j]) - std::log(closes[j - 1]);
    rv += r * r;
  }
  return rv;
}

DailySeries compute_rv_series(const BarPanel& panel) {
  DailySeries out;
  for (const auto& d : panel.days)
    if (d.size() >= 2) out[{d.ticker, d.date}] = compute_rv(d.closes());
  return out;
}

void write_rv_csv(const DailySeries& rv, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << "ticker,date,rv\n";
  char buf[40];
  for (const auto& [key, v] : rv) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << key.first << ',' << key.second << ',' << buf << '\n';
  }
}

std::vector<SampleBag> build_bags(const BarPanel& panel, const DailySeries& rv, int lookback_days,
                                  BagBuildStats* stats) {
  if (lookback_days < 1) throw ConfigError("build_bags: lookback_days must be >= 1");
  BagBuildStats local;
  std::vector<SampleBag> bags;
  std::size_t begin = 0;
  while (begin < panel.days.size()) {
    std::size_t end = begin;
    while (end < panel.days.size() && panel.days[end].ticker == panel.days[begin].ticker) ++end;
    // days [begin, end) belong to one ticker, in date order
    for (std::size_t d = begin + lookback_days - 1; d + 1 < end; ++d) {
      const auto& next = panel.days[d + 1];
      auto it = rv.find({next.ticker, next.date});
      if (it == rv.end()) {
        ++local.skipped_missing_target;
        continue;
      }
      Eigen::Index rows = 0;
      for (std::size_t k = d + 1 - lookback_days; k <= d; ++k) rows += panel.days[k].size();
      SampleBag bag;
      bag.w = kBarFeatures;
      bag.inputs.resize(rows, kBarFeatures);
      Eigen::Index r = 0;
      for (std::size_t k = d + 1 - lookback_days; k <= d; ++k) {
        bag.inputs.middleRows(r, panel.days[k].size()) = panel.days[k].features;
        r += panel.days[k].size();
      }
      bag.targets = Eigen::VectorXd::Constant(rows, it->second);
      bag.origin = MarketOrigin{panel.days[d].ticker, panel.days[d].date};
      bags.push_back(std::move(bag));
      ++local.built;
    }
    begin = end;
  }
  if (local.skipped_missing_target > 0)
    spdlog::info("build_bags: skipped {} stock-days without a next-day RV", local.skipped_missing_target);
  if (stats) *stats = local;
  return bags;
}

DailySeries factor_values(const Expression& expr, const BarPanel& panel) {
  DailySeries out;
  for (const auto& d : panel.days) {
    if (d.size() == 0) continue;
    const EvalResult r = evaluate(expr, d.features);
    const std::size_t valid = r.valid.size() - r.invalid_count;
    if (valid == 0) continue;
    double sum = 0.0;
    for (Eigen::Index k = 0; k < r.values.size(); ++k)
      if (r.valid[k]) sum += r.values[k];
    out[{d.ticker, d.date}] = sum / static_cast<double>(valid);
  }
  return out;
}

BarPanel synthetic_panel(const SyntheticMarketConfig& cfg) {
  if (cfg.tickers < 1 || cfg.days < 1 || cfg.bars_per_day < 2)
    throw ConfigError("synthetic_panel: need >= 1 ticker, >= 1 day and >= 2 bars per day");
  BarPanel panel;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Calendar of weekdays starting 2024-01-01, ignoring holidays.
  std::vector<std::string> dates;
  for (std::chrono::sys_days d{std::chrono::year{2024} / 1 / 1}; static_cast<int>(dates.size()) < cfg.days;
       d += std::chrono::days{1}) {
    if (std::chrono::weekday{d}.iso_encoding() > 5) continue;
    const std::chrono::year_month_day ymd{d};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    dates.emplace_back(buf);
  }
  for (int s = 0; s < cfg.tickers; ++s) {
    Rng rng = make_stream(cfg.seed, static_cast<std::uint64_t>(s));
    char name[16];
    std::snprintf(name, sizeof name, "S%03d", s);
    const double base_vol = 0.01 * std::exp(0.5 * normal(rng));
    double log_vol_dev = 0.0;
    double price = 10.0 + 90.0 * unit(rng);
    const double base_volume = 1e4 * std::exp(normal(rng));
    for (int t = 0; t < cfg.days; ++t) {
      log_vol_dev = 0.8 * log_vol_dev + 0.3 * normal(rng);
      const double day_vol = base_vol * std::exp(log_vol_dev);
      const double bar_vol = day_vol / std::sqrt(static_cast<double>(cfg.bars_per_day));
      DayBars day;
      day.ticker = name;
      day.date = dates[t];
      day.features.resize(cfg.bars_per_day, kBarFeatures);
      for (int j = 0; j < cfg.bars_per_day; ++j) {
        const double open = price;
        const double close = open * std::exp(bar_vol * normal(rng));
        const double spread = std::abs(bar_vol * normal(rng)) * 0.5;
        const double high = std::max(open, close) * std::exp(spread);
        const double low = std::min(open, close) * std::exp(-spread);
        const double volume = std::round(base_volume * (0.5 + unit(rng)) * (1.0 + 100.0 * std::abs(std::log(close / open))));
        const double vwap = (open + high + low + close) / 4.0;
        day.minutes.push_back(9 * 60 + 30 + j);
        day.features.row(j) << open, high, low, close, volume, vwap;
        price = close;
      }
      panel.days.push_back(std::move(day));
    }
  }
  return panel;
}

}  // namespace factorforge
