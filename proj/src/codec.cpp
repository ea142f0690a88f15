#include "factorforge/codec.hpp"

#include "factorforge/bag.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>

namespace factorforge {

FloatTriple encode_float(double v) {
  if (!std::isfinite(v)) throw CodecError("encode_float: non-finite value");
  if (std::abs(v) > kValueLimit) throw CodecError("encode_float: |value| exceeds 1e100");
  FloatTriple t;
  if (v == 0.0) return t;
  // %.3e yields the correctly rounded four-significant-digit decimal form.
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", std::abs(v));
  const int lead = buf[0] - '0';
  const int frac = std::atoi(buf + 2);
  const int exp10 = std::atoi(buf + 6);
  const int exponent = exp10 - 3;
  if (exponent < kMinExponent) return t;
  t.negative = v < 0.0;
  t.mantissa = lead * 1000 + frac;
  t.exponent = exponent;
  return t;
}

double decode_float(const FloatTriple& t) {
  if (t.mantissa < 0 || t.mantissa >= kMantissaCount)
    throw CodecError("decode_float: mantissa out of range");
  if (t.exponent < kMinExponent || t.exponent > kMaxExponent)
    throw CodecError("decode_float: exponent out of range");
  if (t.mantissa == 0) return 0.0;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%de%d", t.mantissa, t.exponent);
  const double v = std::strtod(buf, nullptr);
  return t.negative ? -v : v;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(int w_max) : w_max_(w_max) {
  if (w_max < 1) throw std::invalid_argument("Vocabulary: w_max must be >= 1");
  decoder_tokens_ = {"<pad>", "<bos>", "<eos>"};
  for (Op op : kBinaryOps) decoder_tokens_.emplace_back(op_name(op));
  for (Op op : kUnaryOps) decoder_tokens_.emplace_back(op_name(op));
  variable_base_ = static_cast<TokenId>(decoder_tokens_.size());
  for (int w = 0; w < w_max; ++w) decoder_tokens_.push_back("x" + std::to_string(w));
  sign_base_ = static_cast<TokenId>(decoder_tokens_.size());
  decoder_tokens_.emplace_back("+");
  decoder_tokens_.emplace_back("-");
  mantissa_base_ = static_cast<TokenId>(decoder_tokens_.size());
  for (int m = 0; m < kMantissaCount; ++m) decoder_tokens_.push_back(std::to_string(m));
  exponent_base_ = static_cast<TokenId>(decoder_tokens_.size());
  for (int e = kMinExponent; e <= kMaxExponent; ++e) decoder_tokens_.push_back("E" + std::to_string(e));

  encoder_tokens_ = {"<pad>", "+", "-"};
  for (int m = 0; m < kMantissaCount; ++m) encoder_tokens_.push_back(std::to_string(m));
  for (int e = kMinExponent; e <= kMaxExponent; ++e) encoder_tokens_.push_back("E" + std::to_string(e));

  for (std::size_t i = 0; i < decoder_tokens_.size(); ++i)
    decoder_index_.emplace(decoder_tokens_[i], static_cast<TokenId>(i));
  for (std::size_t i = 0; i < encoder_tokens_.size(); ++i)
    encoder_index_.emplace(encoder_tokens_[i], static_cast<TokenId>(i));

  // The encoder never sees symbolic tokens.
  for (const auto& tok : encoder_tokens_) {
    if (op_from_name(tok) || (tok.size() > 1 && tok[0] == 'x'))
      throw std::logic_error("Vocabulary: symbolic token in encoder vocabulary");
    if (!decoder_index_.contains(tok)) throw std::logic_error("Vocabulary: encoder token missing from decoder");
  }
}

TokenId Vocabulary::op_token(Op op) const {
  for (std::size_t i = 0; i < std::size(kBinaryOps); ++i)
    if (kBinaryOps[i] == op) return 3 + static_cast<TokenId>(i);
  for (std::size_t i = 0; i < std::size(kUnaryOps); ++i)
    if (kUnaryOps[i] == op) return 3 + static_cast<TokenId>(std::size(kBinaryOps) + i);
  throw std::invalid_argument("op_token: not an operator");
}

TokenId Vocabulary::variable_token(int w) const {
  if (w < 0 || w >= w_max_) throw CodecError("variable_token: index exceeds vocabulary w_max");
  return variable_base_ + w;
}

TokenInfo Vocabulary::decoder_info(TokenId id) const {
  if (id < 0 || id >= decoder_size()) throw CodecError("token id outside decoder vocabulary");
  TokenInfo info;
  if (id == pad()) {
    info.kind = TokenKind::Pad;
  } else if (id == bos()) {
    info.kind = TokenKind::Bos;
  } else if (id == eos()) {
    info.kind = TokenKind::Eos;
  } else if (id < variable_base_) {
    info.kind = TokenKind::Operator;
    const auto k = static_cast<std::size_t>(id - 3);
    info.op = k < std::size(kBinaryOps) ? kBinaryOps[k] : kUnaryOps[k - std::size(kBinaryOps)];
  } else if (id < sign_base_) {
    info.kind = TokenKind::Variable;
    info.value = id - variable_base_;
  } else if (id < mantissa_base_) {
    info.kind = TokenKind::Sign;
    info.value = id - sign_base_;
  } else if (id < exponent_base_) {
    info.kind = TokenKind::Mantissa;
    info.value = id - mantissa_base_;
  } else {
    info.kind = TokenKind::Exponent;
    info.value = id - exponent_base_ + kMinExponent;
  }
  return info;
}

const std::string& Vocabulary::decoder_token(TokenId id) const {
  if (id < 0 || id >= decoder_size()) throw CodecError("token id outside decoder vocabulary");
  return decoder_tokens_[id];
}

const std::string& Vocabulary::encoder_token(TokenId id) const {
  if (id < 0 || id >= encoder_size()) throw CodecError("token id outside encoder vocabulary");
  return encoder_tokens_[id];
}

std::optional<TokenId> Vocabulary::decoder_id(const std::string& token) const {
  auto it = decoder_index_.find(token);
  if (it == decoder_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Vocabulary::encoder_id(const std::string& token) const {
  auto it = encoder_index_.find(token);
  if (it == encoder_index_.end()) return std::nullopt;
  return it->second;
}

nlohmann::ordered_json Vocabulary::to_json() const {
  nlohmann::ordered_json j;
  j["w_max"] = w_max_;
  j["decoder"] = decoder_tokens_;
  j["encoder"] = encoder_tokens_;
  return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v(j.at("w_max").get<int>());
  if (j.at("decoder").get<std::vector<std::string>>() != v.decoder_tokens_ ||
      j.at("encoder").get<std::vector<std::string>>() != v.encoder_tokens_)
    throw CodecError("serialized vocabulary does not match the token layout");
  return v;
}

// ---------------------------------------------------------------------------
// Expressions

TokenSequence encode_expression(const Expression& expr, const Vocabulary& vocab) {
  TokenSequence seq;
  seq.role = SequenceRole::Expression;
  seq.ids.reserve(expr.size() * 2 + 2);
  seq.ids.push_back(Vocabulary::bos());
  for (const Node& n : expr.nodes()) {
    switch (n.op) {
      case Op::Variable:
        seq.ids.push_back(vocab.variable_token(n.var));
        break;
      case Op::Constant: {
        const FloatTriple t = encode_float(n.value);
        seq.ids.push_back(vocab.sign_token(t.negative));
        seq.ids.push_back(vocab.mantissa_token(t.mantissa));
        seq.ids.push_back(vocab.exponent_token(t.exponent));
        break;
      }
      default:
        seq.ids.push_back(vocab.op_token(n.op));
    }
  }
  seq.ids.push_back(Vocabulary::eos());
  return seq;
}

Expression decode_expression(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::size_t i = 0;
  if (!ids.empty() && ids[0] == Vocabulary::bos()) i = 1;
  std::vector<Node> nodes;
  long pending = 1;
  auto info_at = [&](std::size_t k) {
    try {
      return vocab.decoder_info(ids[k]);
    } catch (const CodecError&) {
      throw MalformedSequence("unknown token id " + std::to_string(ids[k]) + " at position " +
                              std::to_string(k));
    }
  };
  while (true) {
    if (i >= ids.size()) {
      if (pending > 0) throw MalformedSequence("truncated sequence: missing operands");
      break;
    }
    if (ids[i] == Vocabulary::eos()) {
      if (pending > 0) throw MalformedSequence("EOS before the expression is complete");
      break;
    }
    if (pending == 0) throw MalformedSequence("dangling tokens after a complete expression");
    const TokenInfo info = info_at(i);
    switch (info.kind) {
      case TokenKind::Operator:
        nodes.push_back({info.op, 0, 0.0});
        pending += arity(info.op) - 1;
        ++i;
        break;
      case TokenKind::Variable:
        nodes.push_back({Op::Variable, static_cast<std::uint16_t>(info.value), 0.0});
        --pending;
        ++i;
        break;
      case TokenKind::Sign: {
        if (i + 2 >= ids.size()) throw MalformedSequence("truncated constant");
        const TokenInfo mant = info_at(i + 1);
        const TokenInfo expo = info_at(i + 2);
        if (mant.kind != TokenKind::Mantissa || expo.kind != TokenKind::Exponent)
          throw MalformedSequence("malformed constant triple at position " + std::to_string(i));
        const double v = decode_float({info.value == 1, mant.value, expo.value});
        nodes.push_back({Op::Constant, 0, v});
        --pending;
        i += 3;
        break;
      }
      default:
        throw MalformedSequence("unexpected token '" + vocab.decoder_token(ids[i]) +
                                "' at position " + std::to_string(i));
    }
  }
  return Expression::from_prefix(std::move(nodes));
}

std::optional<Expression> try_decode_expression(std::span<const TokenId> ids,
                                                const Vocabulary& vocab) {
  try {
    return decode_expression(ids, vocab);
  } catch (const MalformedSequence&) {
    return std::nullopt;
  }
}

std::vector<std::string> token_strings(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.push_back(vocab.decoder_token(id));
  return out;
}

// ---------------------------------------------------------------------------
// Points

TokenGrid encode_points(const SampleBag& bag, const Vocabulary& vocab) {
  const int w_max = vocab.w_max();
  if (bag.w > w_max) throw CodecError("encode_points: bag dimension exceeds w_max");
  if (bag.inputs.cols() != bag.w || bag.targets.size() != bag.inputs.rows())
    throw CodecError("encode_points: inconsistent bag shape");
  TokenGrid grid;
  grid.rows = bag.m();
  grid.width = grid_width(w_max);
  grid.ids.resize(static_cast<std::size_t>(grid.rows) * grid.width);
  auto put = [&](TokenId* slot, double v) {
    if (!std::isfinite(v)) throw CodecError("encode_points: non-finite coordinate");
    const FloatTriple t = encode_float(v);
    slot[0] = vocab.encoder_sign_token(t.negative);
    slot[1] = vocab.encoder_mantissa_token(t.mantissa);
    slot[2] = vocab.encoder_exponent_token(t.exponent);
  };
  for (int k = 0; k < grid.rows; ++k) {
    TokenId* row = grid.ids.data() + static_cast<std::size_t>(k) * grid.width;
    for (int w = 0; w < w_max; ++w) {
      TokenId* slot = row + 3 * w;
      if (w < bag.w) {
        put(slot, bag.inputs(k, w));
      } else {
        slot[0] = slot[1] = slot[2] = Vocabulary::encoder_pad();
      }
    }
    put(row + 3 * w_max, bag.targets[k]);
  }
  return grid;
}

}  // namespace factorforge
