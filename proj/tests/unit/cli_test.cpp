#include "factorforge/cli.hpp"

#include "factorforge/corpus.hpp"
#include "factorforge/market.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace factorforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "factorforge_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

RunConfig small_config() {
  const std::vector<std::string> o{"run.preset=toy", "model.d_emb=16",         "model.heads=2",
                                   "model.encoder_layers=1", "model.decoder_layers=1", "generator.m_max=40",
                                   "train.warmup_steps=4",   "train.log_every=2",      "train.eval_every=2",
                                   "train.val_samples=10"};
  return load_run_config(o);
}

class FixedGenerator final : public CandidateGenerator {
 public:
  explicit FixedGenerator(std::vector<TokenId> seq) : seq_(std::move(seq)) {}
  int w_max() const override { return 2; }
  std::vector<Hypothesis> generate(const SampleBag&, int, std::uint64_t) const override {
    return {{seq_, -1.0, 0.0, true}};
  }

 private:
  std::vector<TokenId> seq_;
};

void write_factor_file(const fs::path& path, const std::vector<Expression>& exprs) {
  MiningResult r;
  for (const auto& e : exprs) {
    Candidate c;
    c.expr = e;
    r.candidates.push_back(c);
  }
  write_factors(path, r);
}

}  // namespace

TEST(ExitCode, StableMapping) {
  EXPECT_EQ(exit_code(ConfigError("x")), 1);
  EXPECT_EQ(exit_code(std::invalid_argument("x")), 1);
  EXPECT_EQ(exit_code(DataError("x")), 2);
  EXPECT_EQ(exit_code(MalformedSequence("x")), 2);
  EXPECT_EQ(exit_code(fs::filesystem_error("x", std::make_error_code(std::errc::no_such_file_or_directory))), 2);
  EXPECT_EQ(exit_code(NumericError("x")), 3);
  EXPECT_EQ(exit_code(MiningFailure("x")), 3);
  EXPECT_EQ(exit_code(GenerationError("x")), 3);
  EXPECT_EQ(exit_code(std::runtime_error("x")), 3);
}

TEST(GenCorpus, CountDeterminismAndSnapshot) {
  const fs::path dir = scratch("gen");
  const RunConfig cfg = small_config();
  cmd_gen_corpus(cfg, 1000, dir / "a.ndjson");
  cmd_gen_corpus(cfg, 1000, dir / "b.ndjson");
  EXPECT_EQ(line_count(dir / "a.ndjson"), 1000u);
  EXPECT_EQ(slurp(dir / "a.ndjson"), slurp(dir / "b.ndjson"));
  EXPECT_EQ(load_manifest(dir / "a.ndjson").config_hash, config_hash(cfg.generator));

  const auto snap = nlohmann::json::parse(slurp(snapshot_path(dir / "a.ndjson")));
  EXPECT_EQ(snap.at("command"), "gen-corpus");
  EXPECT_EQ(snap.at("run").at("seed"), cfg.run.seed);

  cmd_gen_corpus(cfg, 0, dir / "empty.ndjson");
  EXPECT_EQ(line_count(dir / "empty.ndjson"), 0u);
  EXPECT_EQ(load_manifest(dir / "empty.ndjson").count, 0u);
}

TEST(Train, LogRowsAndResume) {
  const fs::path dir = scratch("train");
  RunConfig cfg = small_config();
  cmd_gen_corpus(cfg, 60, dir / "c.ndjson");

  cfg.train.max_steps = 2;
  cfg.train.epochs = 20;
  cfg.train.batch_tokens = 200;
  EXPECT_EQ(cmd_train(cfg, dir / "c.ndjson", dir / "m.ckpt").steps, 2);
  EXPECT_EQ(line_count(dir / "m.ckpt.log.csv"), 1u + 2 / 2);

  cfg.train.max_steps = 4;
  const TrainSummary resumed = cmd_train(cfg, dir / "c.ndjson", dir / "m.ckpt", {}, dir / "m.ckpt.last");
  EXPECT_EQ(resumed.steps, 4);
  EXPECT_EQ(Checkpoint::load(dir / "m.ckpt.last").step, 4);

  cfg.model.w_max = 1;
  cfg.model.with_vocab();
  EXPECT_THROW(cmd_train(cfg, dir / "c.ndjson", dir / "n.ckpt"), ConfigError);
  EXPECT_THROW(cmd_train(cfg, dir / "missing.ndjson", dir / "n.ckpt"), DataError);
}

TEST(Mine, MalformedCsvReportsLine) {
  const fs::path dir = scratch("mine");
  std::ofstream(dir / "bad.csv") << "ticker,date,time,open,high,low,close,volume,vwap\n"
                                    "AAA,2024-01-02,09:31,1,1,1,1,100,1\n"
                                    "AAA,2024-01-02,09:32,1,1,oops,1,100,1\n";
  RunConfig cfg = small_config();
  cmd_gen_corpus(cfg, 20, dir / "c.ndjson");
  cfg.train.max_steps = 1;
  cmd_train(cfg, dir / "c.ndjson", dir / "m.ckpt");
  try {
    cmd_mine(cfg, dir / "m.ckpt", dir / "bad.csv", dir / "f.json");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
}

TEST(Recovery, LinearPlantsAreRecoveredByAffineSkeleton) {
  GeneratorConfig gen;
  gen.w_max = 1;
  gen.b_max = 0;
  gen.u_max = 0;
  gen.binary_ops = {Op::Add};
  gen.m_max = 60;
  const Vocabulary v(2);
  const auto c = [](double x) { return Expression::constant(x); };
  const FixedGenerator stub(encode_expression(c(1.0) * Expression::variable(0) + c(0.5), v).ids);
  InferenceConfig infer;
  infer.candidates = 1;

  const RecoveryReport a = run_recovery(gen, stub, infer, 5, 42);
  ASSERT_EQ(a.trials.size(), 5u);
  EXPECT_EQ(a.recovered, 5);
  EXPECT_DOUBLE_EQ(a.rate(), 1.0);
  for (const auto& t : a.trials) {
    EXPECT_EQ(t.held_out_r2.size(), t.candidates.size());
    EXPECT_GE(t.best_r2, 0.99);
  }
  const RecoveryReport b = run_recovery(gen, stub, infer, 5, 42);
  auto ja = a.to_json(), jb = b.to_json();
  ja.erase("seconds");
  jb.erase("seconds");
  EXPECT_EQ(ja, jb);
}

TEST(Recovery, WrongSkeletonIsNotRecovered) {
  GeneratorConfig gen;
  gen.w_max = 1;
  gen.b_max = 0;
  gen.u_max = 0;
  gen.binary_ops = {Op::Add};
  gen.m_max = 60;
  const FixedGenerator stub(encode_expression(Expression::constant(0.3), Vocabulary(2)).ids);
  const RecoveryReport r = run_recovery(gen, stub, InferenceConfig{}, 3, 7);
  EXPECT_EQ(r.recovered, 0);
}

TEST(EvalAndBacktest, ReportSchemaOracleAndEmptyPool) {
  const fs::path dir = scratch("eval");
  write_bars_csv(synthetic_panel({6, 8, 20, 3}), dir / "bars.csv");
  const auto x = [](int i) { return Expression::variable(i); };
  write_factor_file(dir / "f.json", {(x(1) - x(2)) / x(3), x(4), x(1) * x(1)});
  const RunConfig cfg = small_config();

  const auto report = cmd_eval(cfg, dir / "f.json", dir / "bars.csv", dir / "r.json", true);
  ASSERT_EQ(report.at("factors").size(), 3u);
  for (const auto& f : report.at("factors")) {
    for (const char* key : {"IC*", "RankIC*", "IR*", "R2", "daily_ic", "oracle"}) EXPECT_TRUE(f.contains(key)) << key;
  }
  EXPECT_EQ(report.at("oracle_check"), "pass");
  EXPECT_TRUE(fs::exists(snapshot_path(dir / "r.json")));

  const BacktestReport bt = cmd_backtest(cfg, dir / "f.json", dir / "bars.csv", 2, dir / "nav.csv");
  EXPECT_FALSE(bt.nav.empty());
  EXPECT_EQ(line_count(dir / "nav.csv"), bt.nav.size() + 1);
  EXPECT_TRUE(fs::exists(dir / "nav.csv.json"));

  // A constant factor has no defined IC*, leaving the pool empty.
  write_factor_file(dir / "const.json", {Expression::constant(2.0)});
  EXPECT_THROW(cmd_backtest(cfg, dir / "const.json", dir / "bars.csv", 2, dir / "nav2.csv"), DataError);
  EXPECT_THROW(cmd_backtest(cfg, dir / "f.json", dir / "bars.csv", 0, dir / "nav3.csv"), ConfigError);
}

TEST(Selftest, EndToEndPasses) {
  std::ostringstream log;
  EXPECT_EQ(cmd_selftest(small_config(), scratch("selftest"), log), 0) << log.str();
}
