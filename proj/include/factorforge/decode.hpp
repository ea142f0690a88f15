#pragma once

#include "factorforge/codec.hpp"
#include "factorforge/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace factorforge {

// Tracks a partial prefix sequence and says which decoder tokens keep it
// completable as a well-formed expression within `max_len` positions.
class GrammarState {
 public:
  GrammarState(const Vocabulary& vocab, int variables, int max_len);

  bool allowed(TokenId id) const;
  // Sets the logits of disallowed tokens to -inf.
  void mask(std::span<float> logits) const;
  void advance(TokenId id);
  // True once a full expression has been emitted; only EOS is allowed then.
  bool complete() const { return pending_ == 0 && stage_ == Stage::Free; }

 private:
  enum class Stage : std::uint8_t { Free, Mantissa, Exponent };
  int budget() const { return max_len_ - 1 - emitted_; }

  const Vocabulary* vocab_;
  int variables_;
  int max_len_;
  int pending_ = 1;
  int emitted_ = 0;  // tokens after BOS
  Stage stage_ = Stage::Free;
  bool zero_mantissa_ = false;
  std::vector<std::int8_t> op_arity_;  // per operator token
};

enum class DecodeMode : std::uint8_t { Beam, Sample };

struct DecodeOptions {
  int k = 10;
  DecodeMode mode = DecodeMode::Beam;
  double temperature = 1.0;  // sampling only; 0 = greedy
  bool constrained = true;
  int variables = -1;  // variables allowed by the grammar; -1 = w_max
  std::uint64_t seed = 0;
};

struct Hypothesis {
  std::vector<TokenId> ids;  // BOS ... [EOS]
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / generated length
  bool finished = false;
};

// Beam mode returns the K best length-normalized hypotheses; sample mode
// draws K independent sequences, sequence i from stream (seed, i).
std::vector<Hypothesis> decode_candidates(const Transformer<float>& model, const TokenGrid& grid,
                                          const DecodeOptions& opts);

}  // namespace factorforge
