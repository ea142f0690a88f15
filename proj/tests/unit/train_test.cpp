#include "factorforge/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

using namespace factorforge;

namespace {

ModelConfig small_model() {
  ModelConfig c = ModelConfig::toy();
  c.d_emb = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  return c.with_vocab();
}

std::vector<TrainingExample> small_corpus(std::size_t n, std::uint64_t seed) {
  std::vector<TrainingExample> out;
  GeneratorConfig g = GeneratorConfig::toy();
  g.m_max = 30;
  for (const auto& r : generate_records(g, seed, 0, n, 1)) out.push_back(to_example(r, g.w_max));
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::filesystem::path temp(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ff_train_" + name);
}

std::vector<const TrainingExample*> pointers(const std::vector<TrainingExample>& v) {
  std::vector<const TrainingExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

}  // namespace

TEST(LrSchedule, Examples) {
  const TrainConfig tc;
  EXPECT_DOUBLE_EQ(lr_schedule(0, tc), 2e-7);
  EXPECT_DOUBLE_EQ(lr_schedule(10000, tc), 2e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(40000, tc), 1e-3);
  // No jump at the peak: neighbours differ by at most one warmup increment.
  const double increment = (tc.peak_lr - tc.initial_lr) / tc.warmup_steps;
  EXPECT_NEAR(lr_schedule(10001, tc), lr_schedule(10000, tc), increment);
  EXPECT_NEAR(lr_schedule(9999, tc), lr_schedule(10000, tc), increment * (1 + 1e-9));
  for (int s = 1; s <= 10000; s += 333) EXPECT_LT(lr_schedule(s - 1, tc), lr_schedule(s, tc));
  for (int s = 10001; s < 100000; s += 7777) EXPECT_GT(lr_schedule(s - 1, tc), lr_schedule(s, tc));
  EXPECT_THROW(lr_schedule(-1, tc), std::invalid_argument);
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig tc;
  EXPECT_NO_THROW(tc.validate());
  EXPECT_EQ(TrainConfig::from_json(tc.to_json()).to_json(), tc.to_json());
  tc.peak_lr = tc.initial_lr;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.warmup_steps = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.eval_every = 150;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Data, SplitIsDisjointAndComplete) {
  const DataSplit s = split_samples(1000, 0.1, 3);
  EXPECT_EQ(s.val.size(), 100u);
  EXPECT_EQ(s.train.size(), 900u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (std::size_t v : s.val) EXPECT_TRUE(all.insert(v).second);
  EXPECT_EQ(all.size(), 1000u);
  EXPECT_EQ(split_samples(1000, 0.1, 3).val, s.val);
  EXPECT_NE(split_samples(1000, 0.1, 4).val, s.val);
}

TEST(Data, BatchesRespectBudgetAndGroupLengths) {
  const auto data = small_corpus(200, 5);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto batches = make_batches(data, idx, 150, 9);
  std::multiset<std::size_t> seen;
  std::size_t spread_sum = 0;
  for (const auto& b : batches) {
    int tokens = 0;
    std::size_t lo = 1000, hi = 0;
    for (std::size_t i : b) {
      seen.insert(i);
      tokens += static_cast<int>(data[i].target.size()) - 1;
      lo = std::min(lo, data[i].target.size());
      hi = std::max(hi, data[i].target.size());
    }
    if (b.size() > 1) EXPECT_LE(tokens, 150);
    spread_sum += hi - lo;
  }
  EXPECT_EQ(seen.size(), data.size());
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), data.size());
  // Bucketing keeps each batch's length range narrow.
  EXPECT_LT(static_cast<double>(spread_sum) / batches.size(), 6.0);
  EXPECT_EQ(make_batches(data, idx, 150, 9), batches);
}

TEST(Trainer, IdenticalSamplesMatchSingleSample) {
  const auto data = small_corpus(1, 7);
  const std::vector<TrainingExample> triple(3, data[0]);
  TrainConfig tc;
  Trainer a(small_model(), tc), b(small_model(), tc);
  const auto ra = a.step(pointers(data));
  const auto rb = b.step(pointers(triple));
  EXPECT_NEAR(ra.loss, rb.loss, 1e-6);
  EXPECT_EQ(rb.tokens, 3 * ra.tokens);
  EXPECT_NEAR(a.evaluate(pointers(data)).loss, b.evaluate(pointers(triple)).loss, 1e-6);
}

TEST(Trainer, FirstLossIsLogVocabulary) {
  const auto data = small_corpus(4, 8);
  Trainer t(small_model(), TrainConfig{});
  const auto r = t.step(pointers(data));
  EXPECT_NEAR(r.loss, std::log(static_cast<double>(small_model().decoder_vocab)), 1e-6);
  EXPECT_DOUBLE_EQ(r.lr, 2e-7);
  EXPECT_EQ(t.global_step(), 1);
}

TEST(Trainer, LossDecreasesOnAFixedBatch) {
  const auto data = small_corpus(4, 9);
  TrainConfig tc;
  tc.warmup_steps = 20;
  Trainer t(small_model(), tc);
  const auto batch = pointers(data);
  const double first = t.step(batch).loss;
  double last = first;
  for (int i = 0; i < 150; ++i) last = t.step(batch).loss;
  EXPECT_LT(last, 0.5 * first);
}

TEST(Trainer, NonFiniteLossLeavesParametersAlone) {
  const auto data = small_corpus(2, 10);
  Trainer t(small_model(), TrainConfig{});
  const auto& spec = t.model().layout().at("head.bias");
  t.model().params()[spec.offset + 5] = std::numeric_limits<float>::infinity();
  const auto before = t.model().params();
  try {
    t.step(pointers(data), 42);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 42"), std::string::npos);
  }
  EXPECT_EQ(t.global_step(), 0);
  EXPECT_EQ(std::memcmp(before.data(), t.model().params().data(), before.size() * sizeof(float)), 0);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto data = small_corpus(3, 11);
  Trainer t(small_model(), TrainConfig{});
  t.step(pointers(data));
  t.best_val_accuracy = 0.25;
  const auto a = temp("a.ckpt"), b = temp("b.ckpt");
  t.checkpoint().save(a);
  const Checkpoint loaded = Checkpoint::load(a);
  loaded.save(b);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(loaded.params, t.model().params());
  EXPECT_EQ(loaded.step, 1);
  EXPECT_EQ(loaded.adam.t, 1);
  EXPECT_EQ(loaded.best_val_accuracy, 0.25);
  EXPECT_EQ(loaded.model.to_json(), small_model().to_json());

  Trainer resumed(loaded);
  EXPECT_EQ(rng_state(resumed.rng), rng_state(t.rng));
  const auto ra = resumed.step(pointers(data));
  const auto rt = t.step(pointers(data));
  EXPECT_EQ(ra.loss, rt.loss);
  EXPECT_EQ(resumed.model().params(), t.model().params());
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto p = temp("bad.ckpt");
  {
    std::ofstream os(p, std::ios::binary);
    os << "not a checkpoint";
  }
  EXPECT_THROW(Checkpoint::load(p), DataError);
  Trainer t(small_model(), TrainConfig{});
  t.checkpoint().save(p);
  std::filesystem::resize_file(p, std::filesystem::file_size(p) - 16);
  EXPECT_THROW(Checkpoint::load(p), DataError);
  std::filesystem::remove(p);
}

TEST(TrainLoop, DeterministicAndResumable) {
  const auto data = small_corpus(60, 12);
  TrainConfig tc;
  tc.warmup_steps = 10;
  tc.batch_tokens = 200;
  tc.max_steps = 8;
  tc.log_every = 2;
  tc.eval_every = 4;
  tc.epochs = 5;
  const auto out1 = temp("run1.ckpt"), out2 = temp("run2.ckpt");
  const auto log1 = temp("run1.csv"), log2 = temp("run2.csv");
  const auto s1 = train(data, small_model(), tc, out1, log1);
  train(data, small_model(), tc, out2, log2);
  EXPECT_EQ(s1.steps, 8);
  EXPECT_EQ(slurp(out1), slurp(out2));
  EXPECT_EQ(slurp(out1.string() + ".last"), slurp(out2.string() + ".last"));
  EXPECT_EQ(slurp(log1), slurp(log2));
  EXPECT_EQ(s1.val_samples, 6u);

  // Log rows = steps / log interval, plus the header.
  std::ifstream is(log1);
  int lines = 0;
  for (std::string line; std::getline(is, line);) ++lines;
  EXPECT_EQ(lines, 1 + 8 / 2);

  // Stopping at 4 and resuming to 8 continues the step counter and lands on
  // the same parameters as the uninterrupted run.
  TrainConfig half = tc;
  half.max_steps = 4;
  const auto out3 = temp("run3.ckpt"), log3 = temp("run3.csv");
  train(data, small_model(), half, out3, log3);
  const Checkpoint mid = Checkpoint::load(out3.string() + ".last");
  EXPECT_EQ(mid.step, 4);
  Checkpoint resume = mid;
  resume.train.max_steps = 8;
  const auto s3 = train(data, small_model(), resume.train, out3, log3, &resume);
  EXPECT_EQ(s3.steps, 8);
  EXPECT_EQ(Checkpoint::load(out3.string() + ".last").params, Checkpoint::load(out1.string() + ".last").params);
  for (const auto& p : {out1, out2, out3})
    for (const char* suffix : {"", ".last"}) std::filesystem::remove(p.string() + suffix);
  for (const auto& p : {log1, log2, log3}) std::filesystem::remove(p);
}

TEST(TrainLoop, EmptyCorpusIsAnError) {
  EXPECT_THROW(train({}, small_model(), TrainConfig{}, temp("e.ckpt"), temp("e.csv")), DataError);
}
