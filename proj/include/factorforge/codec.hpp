#pragma once

#include "factorforge/errors.hpp"
#include "factorforge/expr.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace factorforge {

struct SampleBag;

using TokenId = std::int32_t;

class CodecError : public DataError {
 public:
  using DataError::DataError;
};

class MalformedSequence : public CodecError {
 public:
  using CodecError::CodecError;
};

// Numbers are written with four significant digits as (sign, mantissa,
// exponent): v = sign * mantissa * 10^exponent, mantissa in {0} or
// [1000, 9999].
inline constexpr int kMantissaCount = 10000;
inline constexpr int kMinExponent = -103;
inline constexpr int kMaxExponent = 100;
inline constexpr int kExponentCount = kMaxExponent - kMinExponent + 1;

struct FloatTriple {
  bool negative = false;
  int mantissa = 0;
  int exponent = 0;

  friend bool operator==(const FloatTriple&, const FloatTriple&) = default;
};

// Throws CodecError when |v| > 1e100 or v is not finite. Magnitudes that
// round below 1000e-103 encode as zero.
FloatTriple encode_float(double v);
// Throws CodecError on an out-of-range mantissa or exponent.
double decode_float(const FloatTriple& t);

enum class TokenKind : std::uint8_t {
  Pad,
  Bos,
  Eos,
  Operator,
  Variable,
  Sign,
  Mantissa,
  Exponent,
};

struct TokenInfo {
  TokenKind kind = TokenKind::Pad;
  int value = 0;  // variable index, mantissa, exponent, or 1 for a minus sign
  Op op = Op::Constant;
};

// Decoder and encoder vocabularies. Ids are dense and laid out in a fixed
// order, so two vocabularies with the same w_max are identical.
//
// decoder: PAD BOS EOS | operators | x0..x(w_max-1) | + - | 0..9999 | E-103..E100
// encoder: PAD | + - | 0..9999 | E-103..E100
class Vocabulary {
 public:
  explicit Vocabulary(int w_max);

  int w_max() const { return w_max_; }
  int decoder_size() const { return static_cast<int>(decoder_tokens_.size()); }
  int encoder_size() const { return static_cast<int>(encoder_tokens_.size()); }

  static constexpr TokenId pad() { return 0; }
  static constexpr TokenId bos() { return 1; }
  static constexpr TokenId eos() { return 2; }
  static constexpr TokenId encoder_pad() { return 0; }

  TokenId op_token(Op op) const;
  TokenId variable_token(int w) const;
  TokenId sign_token(bool negative) const { return sign_base_ + (negative ? 1 : 0); }
  TokenId mantissa_token(int m) const { return mantissa_base_ + m; }
  TokenId exponent_token(int e) const { return exponent_base_ + (e - kMinExponent); }

  TokenId encoder_sign_token(bool negative) const { return 1 + (negative ? 1 : 0); }
  TokenId encoder_mantissa_token(int m) const { return 3 + m; }
  TokenId encoder_exponent_token(int e) const { return 3 + kMantissaCount + (e - kMinExponent); }

  // Classification of a decoder id; throws CodecError when out of range.
  TokenInfo decoder_info(TokenId id) const;

  const std::string& decoder_token(TokenId id) const;
  const std::string& encoder_token(TokenId id) const;
  std::optional<TokenId> decoder_id(const std::string& token) const;
  std::optional<TokenId> encoder_id(const std::string& token) const;

  // Token boundaries of the decoder id space, used for constrained decoding.
  TokenId operator_begin() const { return 3; }
  TokenId variable_begin() const { return variable_base_; }
  TokenId sign_begin() const { return sign_base_; }
  TokenId mantissa_begin() const { return mantissa_base_; }
  TokenId exponent_begin() const { return exponent_base_; }

  nlohmann::ordered_json to_json() const;
  // Rebuilds from a serialized table and checks it against the fixed layout.
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  int w_max_;
  TokenId variable_base_;
  TokenId sign_base_;
  TokenId mantissa_base_;
  TokenId exponent_base_;
  std::vector<std::string> decoder_tokens_;
  std::vector<std::string> encoder_tokens_;
  std::unordered_map<std::string, TokenId> decoder_index_;
  std::unordered_map<std::string, TokenId> encoder_index_;
};

enum class SequenceRole : std::uint8_t { Points, Expression };

struct TokenSequence {
  std::vector<TokenId> ids;
  SequenceRole role = SequenceRole::Expression;
};

// Prefix traversal wrapped in BOS ... EOS; each constant becomes three tokens.
TokenSequence encode_expression(const Expression& expr, const Vocabulary& vocab);

// Parses a prefix stream (a leading BOS is optional; parsing stops at EOS).
// Throws MalformedSequence on truncation, dangling tokens, unknown ids, or a
// broken constant triple.
Expression decode_expression(std::span<const TokenId> ids, const Vocabulary& vocab);
std::optional<Expression> try_decode_expression(std::span<const TokenId> ids,
                                                const Vocabulary& vocab);

std::vector<std::string> token_strings(std::span<const TokenId> ids, const Vocabulary& vocab);

// M x 3(w_max + 1) grid of encoder ids, row-major. Slots 0..w_max-1 hold the
// features (PAD triples above the bag dimension), slot w_max holds the target.
struct TokenGrid {
  int rows = 0;
  int width = 0;
  std::vector<TokenId> ids;

  std::span<const TokenId> row(int r) const {
    return {ids.data() + static_cast<std::size_t>(r) * width, static_cast<std::size_t>(width)};
  }
};

inline int grid_width(int w_max) { return 3 * (w_max + 1); }

// Throws CodecError when the bag is wider than w_max or holds a non-finite or
// out-of-range value.
TokenGrid encode_points(const SampleBag& bag, const Vocabulary& vocab);

}  // namespace factorforge
