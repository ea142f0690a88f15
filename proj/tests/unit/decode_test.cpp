#include "factorforge/decode.hpp"

#include "factorforge/synth.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace factorforge;

namespace {

Transformer<float> random_model(std::uint64_t seed) {
  ModelConfig c = ModelConfig::toy();
  c.d_emb = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.max_len = 40;
  Transformer<float> m(c.with_vocab());
  Rng rng(seed);
  m.initialize(rng);
  // A non-zero head so the output distribution is not uniform.
  const auto& head = m.layout().at("head.weight");
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (std::size_t i = 0; i < head.size(); ++i) m.params()[head.offset + i] = n(rng);
  return m;
}

TokenGrid sample_grid(std::uint64_t seed) {
  GeneratorConfig g = GeneratorConfig::toy();
  g.m_max = 25;
  Rng rng(seed);
  const auto s = make_training_sample(g, rng);
  return encode_points(s.bag, Vocabulary(g.w_max));
}

}  // namespace

TEST(Grammar, AcceptsEncodedExpressions) {
  const Vocabulary vocab(2);
  GeneratorConfig g = GeneratorConfig::toy();
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const Expression e = sample_expression(g, rng);
    const auto ids = encode_expression(e, vocab).ids;
    GrammarState gs(vocab, 2, static_cast<int>(ids.size()));
    for (std::size_t k = 1; k < ids.size(); ++k) {
      ASSERT_TRUE(gs.allowed(ids[k])) << "position " << k;
      gs.advance(ids[k]);
      if (k + 2 == ids.size()) {
        EXPECT_TRUE(gs.complete());
      }
    }
  }
}

TEST(Grammar, LengthBudgetAndVariables) {
  const Vocabulary vocab(3);
  GrammarState gs(vocab, 2, 5);
  const TokenId add = vocab.op_token(Op::Add);
  EXPECT_TRUE(gs.allowed(add));
  EXPECT_TRUE(gs.allowed(vocab.variable_token(1)));
  EXPECT_FALSE(gs.allowed(vocab.variable_token(2)));
  EXPECT_FALSE(gs.allowed(Vocabulary::eos()));
  EXPECT_FALSE(gs.allowed(vocab.mantissa_token(1234)));
  gs.advance(add);
  // Two slots remain and only three positions: leaves must be variables.
  EXPECT_TRUE(gs.allowed(vocab.variable_token(0)));
  EXPECT_FALSE(gs.allowed(vocab.sign_token(false)));
  EXPECT_FALSE(gs.allowed(vocab.op_token(Op::Sin)));
  gs.advance(vocab.variable_token(0));
  gs.advance(vocab.variable_token(1));
  EXPECT_TRUE(gs.complete());
  EXPECT_TRUE(gs.allowed(Vocabulary::eos()));
  EXPECT_FALSE(gs.allowed(vocab.variable_token(0)));
}

TEST(Grammar, ConstantTriples) {
  const Vocabulary vocab(1);
  GrammarState gs(vocab, 1, 10);
  gs.advance(vocab.sign_token(true));
  EXPECT_TRUE(gs.allowed(vocab.mantissa_token(1000)));
  EXPECT_TRUE(gs.allowed(vocab.mantissa_token(0)));
  EXPECT_FALSE(gs.allowed(vocab.mantissa_token(999)));
  EXPECT_FALSE(gs.allowed(vocab.exponent_token(0)));
  gs.advance(vocab.mantissa_token(0));
  EXPECT_TRUE(gs.allowed(vocab.exponent_token(0)));
  EXPECT_FALSE(gs.allowed(vocab.exponent_token(-3)));
  gs.advance(vocab.exponent_token(0));
  EXPECT_TRUE(gs.complete());
}

TEST(Grammar, MaskAgreesWithAllowed) {
  const Vocabulary vocab(2);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    GrammarState gs(vocab, 2, 30);
    while (true) {
      std::vector<float> logits(static_cast<std::size_t>(vocab.decoder_size()), 0.0f);
      gs.mask(logits);
      std::vector<TokenId> ok;
      for (TokenId id = 0; id < vocab.decoder_size(); ++id) {
        ASSERT_EQ(std::isfinite(logits[static_cast<std::size_t>(id)]), gs.allowed(id)) << id;
        if (gs.allowed(id)) ok.push_back(id);
      }
      ASSERT_FALSE(ok.empty());
      const TokenId pick = ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
      if (pick == Vocabulary::eos()) break;
      gs.advance(pick);
    }
  }
}

TEST(Grammar, RandomWalksAlwaysDecode) {
  const Vocabulary vocab(2);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    const int max_len = 3 + trial % 40;
    GrammarState gs(vocab, 1, max_len);
    std::vector<TokenId> ids{Vocabulary::bos()};
    while (ids.back() != Vocabulary::eos()) {
      std::vector<TokenId> ok;
      for (TokenId id = 0; id < vocab.decoder_size(); ++id)
        if (gs.allowed(id)) ok.push_back(id);
      ASSERT_FALSE(ok.empty());
      ids.push_back(ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)]);
      gs.advance(ids.back());
    }
    ASSERT_LE(static_cast<int>(ids.size()), max_len);
    const Expression e = decode_expression(ids, vocab);
    EXPECT_LE(e.max_variable(), 0);
  }
}

TEST(Decode, BeamReturnsKDeterministicDecodableSequences) {
  const auto model = random_model(1);
  const TokenGrid grid = sample_grid(2);
  DecodeOptions opts;
  opts.k = 10;
  const auto a = decode_candidates(model, grid, opts);
  const auto b = decode_candidates(model, grid, opts);
  ASSERT_EQ(a.size(), 10u);
  const Vocabulary vocab(model.config().w_max);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ids, b[i].ids);
    EXPECT_TRUE(a[i].finished);
    EXPECT_NO_THROW(decode_expression(a[i].ids, vocab));
    EXPECT_LE(static_cast<int>(a[i].ids.size()), model.config().max_len);
    if (i > 0) EXPECT_GE(a[i - 1].score, a[i].score);
    EXPECT_NEAR(a[i].score, a[i].log_prob / static_cast<double>(a[i].ids.size() - 1), 1e-12);
  }
}

TEST(Decode, SamplingReturnsKAndFollowsSeed) {
  const auto model = random_model(3);
  const TokenGrid grid = sample_grid(4);
  DecodeOptions opts;
  opts.k = 7;
  opts.mode = DecodeMode::Sample;
  opts.seed = 11;
  const auto a = decode_candidates(model, grid, opts);
  ASSERT_EQ(a.size(), 7u);
  EXPECT_EQ(decode_candidates(model, grid, opts)[3].ids, a[3].ids);
  const Vocabulary vocab(model.config().w_max);
  for (const auto& h : a) EXPECT_NO_THROW(decode_expression(h.ids, vocab));
}

TEST(Decode, ZeroTemperatureIsGreedy) {
  const auto model = random_model(5);
  const TokenGrid grid = sample_grid(6);
  DecodeOptions beam;
  beam.k = 1;
  const auto greedy = decode_candidates(model, grid, beam).front().ids;
  DecodeOptions cold;
  cold.mode = DecodeMode::Sample;
  cold.k = 3;
  cold.temperature = 0.0;
  for (const auto& h : decode_candidates(model, grid, cold)) EXPECT_EQ(h.ids, greedy);
  cold.temperature = 1e-4;
  for (const auto& h : decode_candidates(model, grid, cold)) EXPECT_EQ(h.ids, greedy);
}

TEST(Decode, UnconstrainedStillReturnsK) {
  const auto model = random_model(7);
  DecodeOptions opts;
  opts.k = 4;
  opts.constrained = false;
  const auto out = decode_candidates(model, sample_grid(8), opts);
  EXPECT_EQ(out.size(), 4u);
  for (const auto& h : out) EXPECT_LE(static_cast<int>(h.ids.size()), model.config().max_len);
}

TEST(Decode, RejectsBadK) {
  const auto model = random_model(9);
  DecodeOptions opts;
  opts.k = 0;
  EXPECT_THROW(decode_candidates(model, sample_grid(1), opts), std::invalid_argument);
}
