#include "factorforge/cli.hpp"

#include "factorforge/corpus.hpp"
#include "factorforge/market.hpp"
#include "factorforge/parallel.hpp"
#include "factorforge/rng.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>

namespace factorforge {

namespace {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

std::vector<std::string> feature_names() { return {kBarFeatureNames.begin(), kBarFeatureNames.end()}; }

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

void write_json(const OrderedJson& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw DataError("write failed: " + path.string());
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw DataError(what + " not found: " + p.string());
}

Transformer<float> load_model(const fs::path& checkpoint) {
  require_file(checkpoint, "checkpoint");
  return Checkpoint::load(checkpoint).build();
}

struct MarketData {
  BarPanel panel;
  DailySeries rv;
};

MarketData load_market(const fs::path& data) {
  require_file(data, "data file");
  MarketData d{read_bars_csv(data), {}};
  d.rv = compute_rv_series(d.panel);
  return d;
}

bool agrees(double a, double b) {
  if (!std::isfinite(a) || !std::isfinite(b)) return !std::isfinite(a) && !std::isfinite(b);
  return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b));
}

double brute_r2(const DailySeries& factor, const DailySeries& next_rv) {
  std::vector<double> y, f;
  for (const auto& [key, v] : factor) {
    auto it = next_rv.find(key);
    if (it == next_rv.end() || !std::isfinite(v)) continue;
    f.push_back(v);
    y.push_back(it->second);
  }
  return y.size() < 2 ? kNaN : brute::r_squared(y, f);
}

}  // namespace

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const std::invalid_argument*>(&e)) return 1;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e) ||
      dynamic_cast<const std::ios_base::failure*>(&e))
    return 2;
  return 3;
}

fs::path snapshot_path(const fs::path& out) { return with_suffix(out, ".config.json"); }

// ---------------------------------------------------------------------------

void cmd_gen_corpus(const RunConfig& cfg, std::uint64_t count, const fs::path& out) {
  const int threads = resolve_threads(cfg.run.threads);
  spdlog::info("generating {} samples into {} ({} threads)", count, out.string(), threads);
  write_corpus(out, cfg.generator, cfg.corpus_seed(), count, threads);
  write_config_snapshot(cfg, snapshot_path(out),
                        {{"command", "gen-corpus"}, {"count", count}, {"output", out.string()}});
}

TrainSummary cmd_train(const RunConfig& cfg, const fs::path& corpus, const fs::path& out, fs::path log,
                       const fs::path& resume) {
  require_file(corpus, "corpus");
  if (log.empty()) log = with_suffix(out, ".log.csv");
  const CorpusManifest manifest = load_manifest(corpus);
  if (manifest.generator.w_max > cfg.model.w_max)
    throw ConfigError("corpus has up to " + std::to_string(manifest.generator.w_max) +
                      " variables but model.w_max is " + std::to_string(cfg.model.w_max));
  const auto records = load_corpus(corpus);
  std::vector<TrainingExample> data;
  data.reserve(records.size());
  for (const auto& r : records) data.push_back(to_example(r, cfg.model.w_max));

  std::optional<Checkpoint> start;
  if (!resume.empty()) {
    require_file(resume, "resume checkpoint");
    start = Checkpoint::load(resume);
  }
  write_config_snapshot(cfg, snapshot_path(out),
                        {{"command", "train"},
                         {"corpus", corpus.string()},
                         {"corpus_hash", manifest.config_hash},
                         {"log", log.string()},
                         {"resume", resume.string()}});
  return train(data, cfg.model, cfg.train, out, log, start ? &*start : nullptr);
}

MiningResult cmd_mine(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out) {
  const Transformer<float> model = load_model(checkpoint);
  const MarketData market = load_market(data);
  BagBuildStats stats;
  const auto bags = build_bags(market.panel, market.rv, cfg.eval.lookback_days, &stats);
  if (bags.empty()) throw DataError(data.string() + ": no stock-day has a next-day RV target");
  spdlog::info("{} stock-day bags ({} without a target)", stats.built, stats.skipped_missing_target);
  // One pool of stock points, re-bagged by the miner.
  const SampleBag pooled = concatenate_bags(bags);
  const ModelGenerator generator(model, cfg.infer);
  MiningResult result = mine(std::span<const SampleBag>(&pooled, 1), generator, cfg.infer);
  const auto names = feature_names();
  write_factors(out, result, names);
  write_config_snapshot(cfg, snapshot_path(out),
                        {{"command", "mine"},
                         {"checkpoint", checkpoint.string()},
                         {"data", data.string()},
                         {"bags_used", result.bags_used},
                         {"generated", result.generated},
                         {"malformed", result.malformed}});
  return result;
}

// ---------------------------------------------------------------------------

OrderedJson RecoveryReport::to_json() const {
  OrderedJson list = OrderedJson::array();
  for (const auto& t : trials) {
    OrderedJson item;
    item["planted"] = to_infix(t.planted);
    item["best_held_out_r2"] = number_or_null(t.best_r2);
    item["recovered"] = t.recovered;
    if (!t.failure.empty()) item["failure"] = t.failure;
    OrderedJson cands = candidates_to_json(t.candidates);
    for (std::size_t i = 0; i < cands.size(); ++i) cands[i]["held_out_r2"] = number_or_null(t.held_out_r2[i]);
    item["candidates"] = std::move(cands);
    list.push_back(std::move(item));
  }
  return {{"trials", trials.size()}, {"recovered", recovered}, {"rate", rate()},
          {"threshold", threshold},  {"seconds", seconds},     {"results", std::move(list)}};
}

RecoveryReport run_recovery(const GeneratorConfig& gen, const CandidateGenerator& generator,
                            const InferenceConfig& infer, int trials, std::uint64_t seed, double threshold) {
  const auto start = std::chrono::steady_clock::now();
  RecoveryReport report;
  report.threshold = threshold;
  for (int t = 0; t < trials; ++t) {
    Rng rng = make_stream(seed, static_cast<std::uint64_t>(t));
    PlantedProblem p = make_planted_problem(gen, rng);
    RecoveryTrial trial;
    trial.planted = p.expr;
    trial.best_r2 = kNaN;
    InferenceConfig cfg = infer;
    cfg.seed = stream_seed(seed, 0x10000 + static_cast<std::uint64_t>(t));
    try {
      trial.candidates = mine(std::span<const SampleBag>(&p.bag, 1), generator, cfg).candidates;
    } catch (const MiningFailure& e) {
      trial.failure = e.what();
    }
    for (const auto& c : trial.candidates) {
      const double r2 = prediction_r2(c.expr, p.held_out);
      trial.held_out_r2.push_back(r2);
      if (std::isfinite(r2) && !(r2 <= trial.best_r2)) trial.best_r2 = r2;
    }
    trial.recovered = std::isfinite(trial.best_r2) && trial.best_r2 >= threshold;
    report.recovered += trial.recovered ? 1 : 0;
    spdlog::info("trial {}: {} -> best held-out R2 {:.6f}{}", t, to_infix(trial.planted), trial.best_r2,
                 trial.recovered ? " (recovered)" : "");
    report.trials.push_back(std::move(trial));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

RecoveryReport cmd_mine_selftest(const RunConfig& cfg, const fs::path& checkpoint, int trials, const fs::path& out) {
  if (trials < 1) throw ConfigError("selftest needs at least one trial");
  const Transformer<float> model = load_model(checkpoint);
  const ModelGenerator generator(model, cfg.infer);
  GeneratorConfig gen = cfg.generator;
  gen.w_max = std::min(gen.w_max, model.config().w_max);
  RecoveryReport report = run_recovery(gen, generator, cfg.infer, trials, cfg.infer.seed);
  // Wall time is left out of the file so reruns compare equal.
  OrderedJson j = report.to_json();
  j.erase("seconds");
  write_json(j, out);
  write_config_snapshot(cfg, snapshot_path(out),
                        {{"command", "mine --selftest"}, {"checkpoint", checkpoint.string()}, {"trials", trials}});
  return report;
}

// ---------------------------------------------------------------------------

OrderedJson cmd_eval(const RunConfig& cfg, const fs::path& factors, const fs::path& data, const fs::path& out,
                     bool check) {
  require_file(factors, "factors file");
  const auto records = read_factors(factors);
  const MarketData market = load_market(data);
  const DailySeries next_rv = next_day_rv(market.panel, market.rv);
  const auto names = feature_names();

  OrderedJson list = OrderedJson::array();
  std::vector<std::string> mismatches;
  for (const auto& f : records) {
    if (f.expr.max_variable() >= static_cast<int>(names.size()))
      throw DataError(f.name + " uses more inputs than the bar features");
    const DailySeries values = factor_values(f.expr, market.panel);
    const FactorMetrics m = evaluate_factor(values, next_rv);
    OrderedJson item;
    item["name"] = f.name;
    item["infix"] = to_infix(f.expr, names);
    item["IC*"] = number_or_null(m.ic);
    item["RankIC*"] = number_or_null(m.rank_ic);
    item["IR*"] = number_or_null(m.ir);
    item["R2"] = number_or_null(m.r2);
    OrderedJson daily = OrderedJson::array();
    for (std::size_t i = 0; i < m.ic_series.dates.size(); ++i)
      daily.push_back({{"date", m.ic_series.dates[i]}, {"ic", m.ic_series.values[i]}});
    item["daily_ic"] = std::move(daily);
    if (check) {
      const std::pair<const char*, std::pair<double, double>> pairs[] = {
          {"IC*", {m.ic, brute::ic_star(values, next_rv, false)}},
          {"RankIC*", {m.rank_ic, brute::ic_star(values, next_rv, true)}},
          {"IR*", {m.ir, brute::ir_star(values, next_rv)}},
          {"R2", {m.r2, brute_r2(values, next_rv)}},
      };
      OrderedJson oracle;
      for (const auto& [key, v] : pairs) {
        oracle[key] = number_or_null(v.second);
        if (!agrees(v.first, v.second))
          mismatches.push_back(f.name + " " + key + ": " + std::to_string(v.first) + " vs " +
                               std::to_string(v.second));
      }
      item["oracle"] = std::move(oracle);
    }
    list.push_back(std::move(item));
  }
  OrderedJson report = {{"factors", std::move(list)}};
  if (check) report["oracle_check"] = mismatches.empty() ? "pass" : "fail";
  write_json(report, out);
  write_config_snapshot(cfg, snapshot_path(out),
                        {{"command", "eval"}, {"factors", factors.string()}, {"data", data.string()}, {"check", check}});
  if (!mismatches.empty()) {
    std::string msg = "metric oracle disagreement:";
    for (const auto& s : mismatches) msg += "\n  " + s;
    throw NumericError(msg);
  }
  return report;
}

BacktestReport cmd_backtest(const RunConfig& cfg, const fs::path& factors, const fs::path& data, int top_k,
                            const fs::path& out) {
  if (top_k < 1) throw ConfigError("--top must be >= 1");
  require_file(factors, "factors file");
  const auto records = read_factors(factors);
  const MarketData market = load_market(data);
  const DailySeries next_rv = next_day_rv(market.panel, market.rv);

  std::vector<PoolCandidate> candidates;
  for (const auto& f : records) {
    if (f.expr.max_variable() >= static_cast<int>(kBarFeatureNames.size()))
      throw DataError(f.name + " uses more inputs than the bar features");
    DailySeries values = factor_values(f.expr, market.panel);
    const double ic = evaluate_factor(values, next_rv).ic;
    if (!std::isfinite(ic)) {
      spdlog::warn("{}: IC* undefined, left out of the pool", f.name);
      continue;
    }
    candidates.push_back({f.name, f.expr, ic, std::move(values)});
  }
  const FactorPool pool = filter_pool(std::move(candidates), cfg.eval.corr_threshold, cfg.eval.pool_cap);
  if (pool.members.empty()) throw DataError("factor pool is empty: no factor in " + factors.string() + " has a defined IC*");

  const BacktestReport report = backtest(pool, market.panel, top_k, cfg.eval.cost_rate);
  write_nav_csv(report, out);
  OrderedJson j = backtest_to_json(report);
  OrderedJson members = OrderedJson::array();
  for (const auto& m : pool.members)
    members.push_back({{"name", m.name}, {"infix", to_infix(m.expr, feature_names())}, {"weight", m.weight}});
  j["pool"] = std::move(members);
  j["top_k"] = top_k;
  write_json(j, with_suffix(out, ".json"));
  write_config_snapshot(cfg, snapshot_path(out),
                        {{"command", "backtest"}, {"factors", factors.string()}, {"data", data.string()}, {"top_k", top_k}});
  return report;
}

// ---------------------------------------------------------------------------

int cmd_selftest(const RunConfig& base, const fs::path& workdir, std::ostream& log) {
  fs::create_directories(workdir);
  RunConfig cfg = base;
  cfg.generator = GeneratorConfig::toy();
  cfg.generator.w_max = static_cast<int>(kBarFeatureNames.size());
  cfg.generator.m_max = 60;
  cfg.model = ModelConfig::toy(cfg.generator.w_max);
  cfg.model.d_emb = 16;
  cfg.model.heads = 2;
  cfg.model.encoder_layers = 1;
  cfg.model.decoder_layers = 1;
  cfg.model.with_vocab();
  cfg.train.max_steps = 10;
  cfg.train.warmup_steps = 5;
  cfg.train.log_every = 5;
  cfg.train.eval_every = 5;
  cfg.train.val_samples = 20;
  cfg.infer.bags = 4;
  cfg.infer.candidates = 3;
  cfg.infer.keep = 3;
  cfg.infer.bfgs_max_iter = 20;

  int failures = 0;
  auto step = [&](const std::string& name, auto&& fn) {
    try {
      const std::string detail = fn();
      log << "PASS " << name << (detail.empty() ? "" : ": " + detail) << '\n';
    } catch (const std::exception& e) {
      ++failures;
      log << "FAIL " << name << ": " << e.what() << '\n';
    }
  };

  const fs::path corpus = workdir / "corpus.ndjson", ckpt = workdir / "model.ckpt", bars = workdir / "bars.csv",
                 factors = workdir / "factors.json";
  step("gen-corpus", [&] {
    cmd_gen_corpus(cfg, 200, corpus);
    return std::to_string(load_corpus(corpus).size()) + " samples";
  });
  step("train", [&] {
    const TrainSummary s = cmd_train(cfg, corpus, ckpt);
    return std::to_string(s.steps) + " steps, val loss " + std::to_string(s.last_val_loss);
  });
  step("mine --selftest", [&] {
    const RecoveryReport r = cmd_mine_selftest(cfg, ckpt, 2, workdir / "recovery.json");
    return "best held-out R2 " + std::to_string(r.trials.front().best_r2);
  });
  step("mine", [&] {
    write_bars_csv(synthetic_panel({8, 12, 30, cfg.run.seed}), bars);
    MiningResult r = cmd_mine(cfg, ckpt, bars, factors);
    // Two hand-written factors keep the pool non-empty for an untrained model.
    for (const Expression& e :
         {(Expression::variable(1) - Expression::variable(2)) / Expression::variable(3), Expression::variable(4)}) {
      Candidate c;
      c.expr = e;
      c.origin = "selftest";
      r.candidates.push_back(c);
    }
    write_factors(factors, r, feature_names());
    return std::to_string(r.candidates.size() - 2) + " mined factors";
  });
  step("eval --check", [&] {
    const OrderedJson j = cmd_eval(cfg, factors, bars, workdir / "report.json", true);
    return std::to_string(j.at("factors").size()) + " factors";
  });
  step("backtest", [&] {
    const BacktestReport r = cmd_backtest(cfg, factors, bars, 3, workdir / "nav.csv");
    return "final NAV " + std::to_string(r.nav.empty() ? 1.0 : r.nav.back());
  });
  return failures;
}

}  // namespace factorforge
