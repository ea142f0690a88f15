#include "factorforge/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace factorforge {

GrammarState::GrammarState(const Vocabulary& vocab, int variables, int max_len)
    : vocab_(&vocab), variables_(variables), max_len_(max_len) {
  if (variables < 1 || variables > vocab.w_max()) throw std::invalid_argument("GrammarState: bad variable count");
  if (max_len < 3) throw std::invalid_argument("GrammarState: max_len must be >= 3");
  for (TokenId id = vocab.operator_begin(); id < vocab.variable_begin(); ++id)
    op_arity_.push_back(static_cast<std::int8_t>(arity(vocab.decoder_info(id).op)));
}

bool GrammarState::allowed(TokenId id) const {
  const Vocabulary& v = *vocab_;
  switch (stage_) {
    case Stage::Mantissa: {
      const int m = id - v.mantissa_begin();
      return id >= v.mantissa_begin() && id < v.exponent_begin() && (m == 0 || m >= 1000);
    }
    case Stage::Exponent:
      if (zero_mantissa_) return id == v.exponent_token(0);
      return id >= v.exponent_begin() && id < v.exponent_begin() + kExponentCount;
    case Stage::Free:
      break;
  }
  if (pending_ == 0) return id == Vocabulary::eos();
  // After emitting a token, `pending` more subtrees need at least one token
  // each, plus the closing EOS.
  const int room = budget();
  if (id >= v.operator_begin() && id < v.variable_begin()) {
    const int a = op_arity_[static_cast<std::size_t>(id - v.operator_begin())];
    return 1 + (pending_ - 1 + a) + 1 <= room;
  }
  if (id >= v.variable_begin() && id < v.variable_begin() + variables_) return 1 + (pending_ - 1) + 1 <= room;
  if (id == v.sign_token(false) || id == v.sign_token(true)) return 3 + (pending_ - 1) + 1 <= room;
  return false;
}

void GrammarState::mask(std::span<float> logits) const {
  const Vocabulary& v = *vocab_;
  const float ninf = -std::numeric_limits<float>::infinity();
  const auto n = static_cast<TokenId>(logits.size());
  auto block = [&](TokenId lo, TokenId hi) {
    for (TokenId i = std::max<TokenId>(lo, 0); i < std::min(hi, n); ++i) logits[static_cast<std::size_t>(i)] = ninf;
  };
  switch (stage_) {
    case Stage::Mantissa:
      block(0, v.mantissa_begin());
      block(v.mantissa_begin() + 1, v.mantissa_begin() + 1000);
      block(v.exponent_begin(), n);
      return;
    case Stage::Exponent:
      if (zero_mantissa_) {
        const TokenId keep = v.exponent_token(0);
        block(0, keep);
        block(keep + 1, n);
      } else {
        block(0, v.exponent_begin());
      }
      return;
    case Stage::Free:
      break;
  }
  for (TokenId i = 0; i < v.sign_begin() + 2 && i < n; ++i)
    if (!allowed(i)) logits[static_cast<std::size_t>(i)] = ninf;
  block(v.sign_begin() + 2, n);
}

void GrammarState::advance(TokenId id) {
  const Vocabulary& v = *vocab_;
  ++emitted_;
  switch (stage_) {
    case Stage::Mantissa:
      zero_mantissa_ = id == v.mantissa_token(0);
      stage_ = Stage::Exponent;
      return;
    case Stage::Exponent:
      stage_ = Stage::Free;
      --pending_;
      return;
    case Stage::Free:
      break;
  }
  if (id == Vocabulary::eos()) {
    pending_ = 0;
  } else if (id >= v.operator_begin() && id < v.variable_begin()) {
    pending_ += op_arity_[static_cast<std::size_t>(id - v.operator_begin())] - 1;
  } else if (id == v.sign_token(false) || id == v.sign_token(true)) {
    stage_ = Stage::Mantissa;
  } else {
    --pending_;
  }
}

namespace {

using Model = Transformer<float>;

struct Beam {
  std::vector<TokenId> ids;
  double log_prob = 0.0;
  Model::Cache cache;
  GrammarState grammar;
  Model::RowVector logits;
};

// log-softmax in double over a float logit row.
std::vector<double> log_softmax(const Model::RowVector& logits) {
  const double mx = logits.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) sum += std::exp(static_cast<double>(logits[i]) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(static_cast<std::size_t>(logits.size()));
  for (Eigen::Index i = 0; i < logits.size(); ++i) out[static_cast<std::size_t>(i)] = logits[i] - lse;
  return out;
}

void apply_mask(Beam& b, bool constrained) {
  if (constrained) b.grammar.mask({b.logits.data(), static_cast<std::size_t>(b.logits.size())});
}

double normalized(double log_prob, std::size_t generated) {
  return log_prob / static_cast<double>(std::max<std::size_t>(generated, 1));
}

std::vector<Hypothesis> beam_search(const Model& model, const Model::Memory& memory, Beam start,
                                    const DecodeOptions& opts) {
  const int k = opts.k;
  const int max_len = model.config().max_len;
  std::vector<Beam> live;
  live.push_back(std::move(start));
  std::vector<Hypothesis> finished;

  struct Option {
    double log_prob;
    std::size_t beam;
    TokenId token;
  };
  for (int len = 1; len < max_len && !live.empty(); ++len) {
    std::vector<Option> options;
    for (std::size_t b = 0; b < live.size(); ++b) {
      apply_mask(live[b], opts.constrained);
      const auto lp = log_softmax(live[b].logits);
      std::vector<TokenId> ids(lp.size());
      std::iota(ids.begin(), ids.end(), 0);
      const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
      std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end(),
                        [&](TokenId a, TokenId c) { return lp[a] > lp[c] || (lp[a] == lp[c] && a < c); });
      for (std::size_t i = 0; i < take; ++i)
        if (std::isfinite(lp[ids[i]])) options.push_back({live[b].log_prob + lp[ids[i]], b, ids[i]});
    }
    std::sort(options.begin(), options.end(), [](const Option& a, const Option& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.token < b.token;
    });
    std::vector<Beam> next;
    for (const Option& o : options) {
      if (static_cast<int>(next.size()) >= k) break;
      const Beam& parent = live[o.beam];
      if (o.token == Vocabulary::eos()) {
        Hypothesis h;
        h.ids = parent.ids;
        h.ids.push_back(o.token);
        h.log_prob = o.log_prob;
        h.score = normalized(o.log_prob, h.ids.size() - 1);
        h.finished = true;
        finished.push_back(std::move(h));
        continue;
      }
      Beam child{parent.ids, o.log_prob, parent.cache, parent.grammar, {}};
      child.ids.push_back(o.token);
      child.grammar.advance(o.token);
      next.push_back(std::move(child));
    }
    // Sequences that hit the length limit stop here.
    const bool at_limit = len + 1 >= max_len;
    for (auto& b : next) {
      if (at_limit) {
        finished.push_back({b.ids, b.log_prob, normalized(b.log_prob, b.ids.size() - 1), false});
        continue;
      }
      b.logits = model.step(memory, b.cache, b.ids.back());
    }
    live = at_limit ? std::vector<Beam>{} : std::move(next);

    if (static_cast<int>(finished.size()) >= k && !live.empty()) {
      std::vector<double> scores;
      for (const auto& h : finished) scores.push_back(h.score);
      std::nth_element(scores.begin(), scores.begin() + (k - 1), scores.end(), std::greater<>());
      const double kth = scores[static_cast<std::size_t>(k - 1)];
      // A live beam can at best keep its log-probability while growing to
      // max_len - 1 generated tokens.
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& b : live) best_live = std::max(best_live, normalized(b.log_prob, max_len - 1));
      if (kth >= best_live) break;
    }
  }
  for (const auto& b : live)
    if (static_cast<int>(finished.size()) < k)
      finished.push_back({b.ids, b.log_prob, normalized(b.log_prob, b.ids.size() - 1), false});
  std::stable_sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ids < b.ids;
  });
  if (static_cast<int>(finished.size()) > k) finished.resize(static_cast<std::size_t>(k));
  return finished;
}

Hypothesis sample_one(const Model& model, const Model::Memory& memory, Beam b, const DecodeOptions& opts,
                      Rng& rng) {
  const int max_len = model.config().max_len;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (static_cast<int>(b.ids.size()) < max_len) {
    apply_mask(b, opts.constrained);
    const auto lp = log_softmax(b.logits);
    TokenId chosen = 0;
    if (opts.temperature <= 0.0) {
      chosen = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    } else {
      const double mx = *std::max_element(lp.begin(), lp.end());
      std::vector<double> w(lp.size());
      double total = 0.0;
      for (std::size_t i = 0; i < lp.size(); ++i) total += w[i] = std::exp((lp[i] - mx) / opts.temperature);
      double u = unit(rng) * total;
      chosen = static_cast<TokenId>(lp.size() - 1);
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] == 0.0) continue;
        u -= w[i];
        if (u < 0.0) {
          chosen = static_cast<TokenId>(i);
          break;
        }
      }
      while (w[static_cast<std::size_t>(chosen)] == 0.0 && chosen > 0) --chosen;
    }
    b.log_prob += lp[static_cast<std::size_t>(chosen)];
    b.ids.push_back(chosen);
    if (chosen == Vocabulary::eos()) {
      return {b.ids, b.log_prob, normalized(b.log_prob, b.ids.size() - 1), true};
    }
    b.grammar.advance(chosen);
    if (static_cast<int>(b.ids.size()) >= max_len) break;
    b.logits = model.step(memory, b.cache, chosen);
  }
  return {b.ids, b.log_prob, normalized(b.log_prob, b.ids.size() - 1), false};
}

}  // namespace

std::vector<Hypothesis> decode_candidates(const Transformer<float>& model, const TokenGrid& grid,
                                          const DecodeOptions& opts) {
  if (opts.k < 1) throw std::invalid_argument("decode_candidates: K must be >= 1");
  const ModelConfig& cfg = model.config();
  const Vocabulary vocab(cfg.w_max);
  const int variables = opts.variables < 0 ? cfg.w_max : opts.variables;

  const auto memory = model.prepare(grid);
  Beam start{{Vocabulary::bos()}, 0.0, model.new_cache(), GrammarState(vocab, variables, cfg.max_len), {}};
  start.logits = model.step(memory, start.cache, Vocabulary::bos());

  if (opts.mode == DecodeMode::Beam) return beam_search(model, memory, std::move(start), opts);
  std::vector<Hypothesis> out;
  for (int i = 0; i < opts.k; ++i) {
    Rng rng = make_stream(opts.seed, static_cast<std::uint64_t>(i));
    out.push_back(sample_one(model, memory, start, opts, rng));
  }
  return out;
}

}  // namespace factorforge
