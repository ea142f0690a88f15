#pragma once

#include "factorforge/market.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace factorforge::oracle {

// Random stock-day values on `days` x `stocks`, with roughly 10% of cells
// missing so daily cross-sections differ in size.
inline DailySeries random_series(int days, int stocks, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> value(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DailySeries out;
  for (int d = 0; d < days; ++d)
    for (int s = 0; s < stocks; ++s) {
      const double v = value(rng);
      if (u(rng) < 0.1) continue;
      out[{"T" + std::to_string(s), "2024-02-" + std::to_string(10 + d)}] = v;
    }
  return out;
}

namespace detail {

inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      less += w < v[i];
      equal += w == v[i];
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

inline double corr(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
  }
  const double ma = sa / n, mb = sb / n;
  for (std::size_t i = 0; i < a.size(); ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return NAN;
  return sab / std::sqrt(saa * sbb);
}

inline std::vector<double> daily(const DailySeries& f, const DailySeries& y, bool ranked) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_day;
  for (const auto& [k, v] : f) {
    auto it = y.find(k);
    if (it == y.end()) continue;
    by_day[k.second].first.push_back(v);
    by_day[k.second].second.push_back(it->second);
  }
  std::vector<double> out;
  for (auto& [d, p] : by_day) {
    if (p.first.size() < 3) continue;
    const double c = ranked ? corr(ranks(p.first), ranks(p.second)) : corr(p.first, p.second);
    if (!std::isnan(c)) out.push_back(c);
  }
  return out;
}

}  // namespace detail

inline double direct_ic(const DailySeries& f, const DailySeries& y, bool ranked) {
  const auto s = detail::daily(f, y, ranked);
  double sum = 0;
  for (double v : s) sum += v;
  return sum / static_cast<double>(s.size());
}

inline double direct_ir(const DailySeries& f, const DailySeries& y) {
  const auto s = detail::daily(f, y, false);
  const double n = static_cast<double>(s.size());
  double mean = 0, var = 0;
  for (double v : s) mean += v / n;
  for (double v : s) var += (v - mean) * (v - mean) / n;
  return mean / std::sqrt(var);
}

}  // namespace factorforge::oracle
