#include "factorforge/bag.hpp"
#include "factorforge/codec.hpp"
#include "factorforge/synth.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace factorforge;

namespace {

const Vocabulary& vocab10() {
  static const Vocabulary v(10);
  return v;
}

std::vector<std::string> strings(const TokenSequence& s) { return token_strings(s.ids, vocab10()); }

std::vector<TokenId> ids(std::initializer_list<const char*> toks) {
  std::vector<TokenId> out;
  for (const char* t : toks) out.push_back(*vocab10().decoder_id(t));
  return out;
}

}  // namespace

TEST(EncodeFloat, Examples) {
  EXPECT_EQ(encode_float(9.7341), (FloatTriple{false, 9734, -3}));
  EXPECT_EQ(encode_float(0.0), (FloatTriple{false, 0, 0}));
  EXPECT_EQ(encode_float(-0.042), (FloatTriple{true, 4200, -5}));
  EXPECT_EQ(encode_float(2.0), (FloatTriple{false, 2000, -3}));
  EXPECT_EQ(encode_float(1e100), (FloatTriple{false, 1000, 97}));
  EXPECT_EQ(encode_float(1e-100), (FloatTriple{false, 1000, -103}));
  // Rounding carries into the next decade.
  EXPECT_EQ(encode_float(9.99999), (FloatTriple{false, 1000, -2}));
}

TEST(EncodeFloat, Errors) {
  EXPECT_THROW(encode_float(1.01e100), CodecError);
  EXPECT_THROW(encode_float(std::nan("")), CodecError);
  EXPECT_THROW(encode_float(INFINITY), CodecError);
}

TEST(EncodeFloat, TinyValuesFlushToZero) {
  EXPECT_EQ(encode_float(9.99e-101), (FloatTriple{false, 0, 0}));
  EXPECT_EQ(encode_float(-1e-200), (FloatTriple{false, 0, 0}));
}

TEST(DecodeFloat, Examples) {
  EXPECT_DOUBLE_EQ(decode_float({false, 9734, -3}), 9.734);
  EXPECT_DOUBLE_EQ(decode_float({true, 1000, 0}), -1000.0);
  EXPECT_EQ(decode_float({false, 0, 0}), 0.0);
  EXPECT_THROW(decode_float({false, 10000, 0}), CodecError);
  EXPECT_THROW(decode_float({false, 1000, 101}), CodecError);
}

TEST(EncodeFloat, RoundTripLogUniform) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> lg(-100.0, 100.0);
  double worst = 0.0;
  for (int i = 0; i < 1'000'000; ++i) {
    const double v = std::pow(10.0, lg(rng)) * ((i & 1) ? -1.0 : 1.0);
    const FloatTriple t = encode_float(v);
    ASSERT_TRUE(t.mantissa == 0 || (t.mantissa >= 1000 && t.mantissa <= 9999));
    worst = std::max(worst, std::abs(decode_float(t) - v) / std::abs(v));
  }
  EXPECT_LE(worst, 5e-4);
}

TEST(Vocabulary, Layout) {
  const Vocabulary& v = vocab10();
  EXPECT_EQ(v.decoder_size(), 3 + 14 + 10 + 2 + 10000 + 204);
  EXPECT_EQ(v.encoder_size(), 1 + 2 + 10000 + 204);
  EXPECT_EQ(v.decoder_token(Vocabulary::bos()), "<bos>");
  for (TokenId id = 0; id < v.encoder_size(); ++id) {
    const auto& tok = v.encoder_token(id);
    EXPECT_FALSE(op_from_name(tok).has_value());
    EXPECT_TRUE(v.decoder_id(tok).has_value());
  }
  EXPECT_EQ(v.decoder_token(v.exponent_token(-103)), "E-103");
  EXPECT_EQ(v.encoder_token(v.encoder_exponent_token(100)), "E100");
}

TEST(Vocabulary, JsonRoundTrip) {
  const auto j = vocab10().to_json();
  const Vocabulary back = Vocabulary::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  auto bad = j;
  bad["decoder"][5] = "bogus";
  EXPECT_THROW(Vocabulary::from_json(bad), CodecError);
}

TEST(EncodeExpression, PaperStyleExample) {
  const Expression e = apply(Op::Tan, Expression::constant(9.7341) * Expression::variable(0));
  EXPECT_EQ(strings(encode_expression(e, vocab10())),
            (std::vector<std::string>{"<bos>", "tan", "mul", "+", "9734", "E-3", "x0", "<eos>"}));
}

TEST(EncodeExpression, Small) {
  EXPECT_EQ(strings(encode_expression(Expression::variable(0), vocab10())),
            (std::vector<std::string>{"<bos>", "x0", "<eos>"}));
  EXPECT_EQ(strings(encode_expression(Expression::variable(0) + Expression::constant(2), vocab10())),
            (std::vector<std::string>{"<bos>", "add", "x0", "+", "2000", "E-3", "<eos>"}));
}

TEST(DecodeExpression, ParsesWithoutBos) {
  const Expression e = decode_expression(ids({"tan", "mul", "+", "9734", "E-3", "x0"}), vocab10());
  const Expression want = apply(Op::Tan, Expression::constant(9.734) * Expression::variable(0));
  EXPECT_EQ(e, want);
}

TEST(DecodeExpression, StopsAtEos) {
  const Expression e = decode_expression(ids({"<bos>", "x1", "<eos>", "add", "junk"}), vocab10());
  EXPECT_EQ(e, Expression::variable(1));
}

TEST(DecodeExpression, Malformed) {
  EXPECT_THROW(decode_expression(ids({"add", "x0"}), vocab10()), MalformedSequence);
  EXPECT_THROW(decode_expression(ids({"x0", "x1"}), vocab10()), MalformedSequence);
  EXPECT_THROW(decode_expression(ids({"add", "x0", "<eos>"}), vocab10()), MalformedSequence);
  EXPECT_THROW(decode_expression(ids({"sin", "+", "12", "x0"}), vocab10()), MalformedSequence);
  EXPECT_THROW(decode_expression(ids({"sin", "+", "1200"}), vocab10()), MalformedSequence);
  EXPECT_THROW(decode_expression(ids({"E5"}), vocab10()), MalformedSequence);
  EXPECT_THROW(decode_expression(ids({"<pad>"}), vocab10()), MalformedSequence);
  EXPECT_THROW(decode_expression(std::vector<TokenId>{}, vocab10()), MalformedSequence);
  const std::vector<TokenId> unknown = {999999};
  EXPECT_THROW(decode_expression(unknown, vocab10()), MalformedSequence);
  EXPECT_FALSE(try_decode_expression(ids({"add", "x0"}), vocab10()).has_value());
}

TEST(DecodeExpression, RoundTripOnSampledExpressions) {
  GeneratorConfig cfg;
  Rng rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const Expression e = sample_expression(cfg, rng);
    const Expression d = decode_expression(encode_expression(e, vocab10()).ids, vocab10());
    ASSERT_EQ(d.size(), e.size());
    for (std::size_t k = 0; k < e.size(); ++k) {
      const Node& a = e.nodes()[k];
      const Node& b = d.nodes()[k];
      ASSERT_EQ(a.op, b.op);
      ASSERT_EQ(a.var, b.var);
      if (a.op == Op::Constant) {
        if (a.value == 0.0)
          ASSERT_EQ(b.value, 0.0);
        else
          ASSERT_LE(std::abs(a.value - b.value) / std::abs(a.value), 5e-4);
      }
    }
  }
}

TEST(EncodePoints, GridShapeAndPadding) {
  SampleBag bag;
  bag.w = 2;
  bag.inputs = Eigen::MatrixXd::Zero(1, 2);
  bag.targets = Eigen::VectorXd::Zero(1);
  const TokenGrid g = encode_points(bag, vocab10());
  ASSERT_EQ(g.rows, 1);
  ASSERT_EQ(g.width, 33);
  const Vocabulary& v = vocab10();
  const TokenId zero[3] = {v.encoder_sign_token(false), v.encoder_mantissa_token(0), v.encoder_exponent_token(0)};
  for (int slot = 0; slot < 11; ++slot) {
    for (int t = 0; t < 3; ++t) {
      const TokenId id = g.row(0)[3 * slot + t];
      if (slot < 2 || slot == 10)
        EXPECT_EQ(id, zero[t]);
      else
        EXPECT_EQ(id, Vocabulary::encoder_pad());
    }
  }
}

TEST(EncodePoints, FullWidthHasNoPadding) {
  SampleBag bag;
  bag.w = 10;
  bag.inputs = Eigen::MatrixXd::Constant(3, 10, 1.5);
  bag.targets = Eigen::VectorXd::Constant(3, -2.0);
  const TokenGrid g = encode_points(bag, vocab10());
  for (TokenId id : g.ids) EXPECT_NE(id, Vocabulary::encoder_pad());
}

TEST(EncodePoints, Rejections) {
  SampleBag bag;
  bag.w = 1;
  bag.inputs = Eigen::MatrixXd::Constant(2, 1, 1.0);
  bag.targets = Eigen::VectorXd::Constant(2, 1.0);
  bag.targets[1] = std::nan("");
  EXPECT_THROW(encode_points(bag, vocab10()), CodecError);
  bag.w = 11;
  bag.inputs = Eigen::MatrixXd::Constant(2, 11, 1.0);
  bag.targets = Eigen::VectorXd::Constant(2, 1.0);
  EXPECT_THROW(encode_points(bag, vocab10()), CodecError);
}
