#include "factorforge/config.hpp"

#include "factorforge/rng.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace factorforge;

namespace {

std::filesystem::path write_ini(const std::string& name, const std::string& text) {
  const auto path = std::filesystem::temp_directory_path() / ("factorforge_config_" + name + ".ini");
  std::ofstream(path) << text;
  return path;
}

RunConfig with(std::vector<std::string> overrides) { return load_run_config(overrides); }

}  // namespace

TEST(RunConfig, DefaultsArePaperPreset) {
  const RunConfig cfg = with({});
  EXPECT_EQ(cfg.run.preset, "paper");
  EXPECT_EQ(cfg.model.to_json(), ModelConfig::paper().to_json());
  EXPECT_EQ(cfg.generator.to_json(), GeneratorConfig().to_json());
  EXPECT_EQ(cfg.infer.bags, 100);
  EXPECT_EQ(cfg.eval.top_k, 30);
}

TEST(RunConfig, ToyPresetFollowsGeneratorWidth) {
  const RunConfig cfg = with({"run.preset=toy"});
  EXPECT_EQ(cfg.generator.to_json(), GeneratorConfig::toy().to_json());
  EXPECT_EQ(cfg.model.w_max, cfg.generator.w_max);

  const RunConfig wider = with({"run.preset=toy", "generator.w_max=3"});
  EXPECT_EQ(wider.model.w_max, 3);
  EXPECT_EQ(wider.model.encoder_vocab, ModelConfig::toy(3).with_vocab().encoder_vocab);
}

TEST(RunConfig, SeedsDeriveFromMasterSeed) {
  const RunConfig a = with({"run.seed=7"});
  EXPECT_EQ(a.corpus_seed(), 7u);
  EXPECT_EQ(a.train.seed, stream_seed(7, 1));
  EXPECT_EQ(a.infer.seed, stream_seed(7, 2));
  EXPECT_NE(a.train.seed, with({"run.seed=8"}).train.seed);
  EXPECT_THROW(with({"train.seed=3"}), ConfigError);
  EXPECT_THROW(with({"model.encoder_vocab=3"}), ConfigError);
}

TEST(RunConfig, OverridesAreTyped) {
  const RunConfig cfg = with({"train.peak_lr=5e-4", "infer.mode=sample", "infer.temperature=0.5",
                              "generator.unary_ops=sin,cos", "eval.cost_rate=0.001", "run.threads=2"});
  EXPECT_DOUBLE_EQ(cfg.train.peak_lr, 5e-4);
  EXPECT_EQ(cfg.infer.mode, DecodeMode::Sample);
  EXPECT_DOUBLE_EQ(cfg.infer.temperature, 0.5);
  EXPECT_EQ(cfg.generator.unary_ops, (std::vector<Op>{Op::Sin, Op::Cos}));
  EXPECT_DOUBLE_EQ(cfg.eval.cost_rate, 0.001);
  EXPECT_EQ(cfg.infer.threads, 2);

  EXPECT_THROW(with({"infer.bags=many"}), ConfigError);
  EXPECT_THROW(with({"infer.bags=2.5"}), ConfigError);
  EXPECT_THROW(with({"train.peak_lr=true"}), ConfigError);
  EXPECT_THROW(with({"infer.bags=0"}), ConfigError);
  EXPECT_THROW(with({"run.preset=huge"}), ConfigError);
  EXPECT_THROW(with({"run.threads=-1"}), ConfigError);
}

TEST(RunConfig, UnknownNamesAreRejected) {
  EXPECT_THROW(with({"infer.beam_width=4"}), ConfigError);
  EXPECT_THROW(with({"optimizer.lr=1"}), ConfigError);
  EXPECT_THROW(with({"infer_bags=4"}), ConfigError);
  EXPECT_THROW(with({"infer.bags"}), ConfigError);
}

TEST(RunConfig, ReadsIniFileWithComments) {
  const auto path = write_ini("ok",
                              "; comment\n"
                              "[run]\n"
                              "preset = toy\n"
                              "seed = 11\n"
                              "# another comment\n"
                              "[infer]\n"
                              "bags = 4\n"
                              "candidates = 3\n"
                              "[eval]\n"
                              "top_k = 5\n");
  const std::vector<std::string> overrides{"infer.bags=6"};
  const RunConfig cfg = load_run_config(path, overrides);
  EXPECT_EQ(cfg.run.preset, "toy");
  EXPECT_EQ(cfg.run.seed, 11u);
  EXPECT_EQ(cfg.infer.bags, 6);
  EXPECT_EQ(cfg.infer.candidates, 3);
  EXPECT_EQ(cfg.eval.top_k, 5);
}

TEST(RunConfig, FileErrors) {
  EXPECT_THROW(load_run_config(write_ini("section", "[decoder]\nk = 1\n"), {}), ConfigError);
  EXPECT_THROW(load_run_config(write_ini("key", "[infer]\nwidth = 1\n"), {}), ConfigError);
  EXPECT_THROW(load_run_config(write_ini("syntax", "[infer\nbags = 1\n"), {}), ConfigError);
  EXPECT_THROW(load_run_config(std::filesystem::path("/nonexistent/run.ini"), {}), DataError);
}

TEST(RunConfig, SnapshotReloadsToSameConfig) {
  const RunConfig cfg = with({"run.preset=toy", "run.seed=5", "infer.keep=4"});
  const auto path = std::filesystem::temp_directory_path() / "factorforge_config_snapshot.json";
  write_config_snapshot(cfg, path, {{"command", "test"}});
  std::ifstream is(path);
  const auto j = nlohmann::json::parse(is);
  EXPECT_EQ(j.at("command"), "test");
  EXPECT_EQ(j.at("infer").at("keep"), 4);
  EXPECT_EQ(j.at("train").at("seed"), stream_seed(5, 1));
  EXPECT_EQ(nlohmann::json(cfg.to_json()).at("model"), j.at("model"));
}
