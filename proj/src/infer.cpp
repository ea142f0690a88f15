#include "factorforge/infer.hpp"

#include "factorforge/eval.hpp"
#include "factorforge/parallel.hpp"
#include "factorforge/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace factorforge {

namespace {

constexpr double kDegenerateSd = 1e-12;
constexpr double kArmijo = 1e-4;
constexpr int kMaxHalvings = 60;
constexpr int kProbeRows = 64;

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

const char* mode_name(DecodeMode m) { return m == DecodeMode::Beam ? "beam" : "sample"; }

DecodeMode mode_from_name(const std::string& s) {
  if (s == "beam") return DecodeMode::Beam;
  if (s == "sample") return DecodeMode::Sample;
  throw ConfigError("infer.mode must be \"beam\" or \"sample\", got \"" + s + "\"");
}

// Rows `idx` of `bag`.
SampleBag take_rows(const SampleBag& bag, std::span<const std::size_t> idx) {
  SampleBag out;
  out.w = bag.w;
  out.origin = bag.origin;
  out.inputs.resize(static_cast<Eigen::Index>(idx.size()), bag.inputs.cols());
  out.targets.resize(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = bag.inputs.row(static_cast<Eigen::Index>(idx[i]));
    out.targets[static_cast<Eigen::Index>(i)] = bag.targets[static_cast<Eigen::Index>(idx[i])];
  }
  return out;
}

// The first `count` entries of a seeded permutation of [0, n), sorted.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (count >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Eigen::MatrixXd probe_rows(const SampleBag& bag) {
  return bag.inputs.topRows(std::min<Eigen::Index>(kProbeRows, bag.inputs.rows()));
}

struct ErrorTerms {
  double sse = 0.0;
  std::size_t invalid = 0;
};

double combine(const ErrorTerms& t, std::size_t n) {
  return (t.sse + kInvalidPenalty * static_cast<double>(t.invalid)) / static_cast<double>(n);
}

// Least-squares objective over the constants of a fixed skeleton.
class Objective {
 public:
  Objective(const Expression& skeleton, const SampleBag& bag) : skeleton_(skeleton), bag_(bag) {}

  double value(const Eigen::VectorXd& c) const {
    const auto e = skeleton_.with_constants({c.data(), static_cast<std::size_t>(c.size())});
    const EvalResult r = evaluate(e, bag_.inputs);
    ErrorTerms t;
    t.invalid = r.invalid_count;
    for (Eigen::Index k = 0; k < r.values.size(); ++k)
      if (r.valid[static_cast<std::size_t>(k)]) t.sse += std::pow(r.values[k] - bag_.targets[k], 2);
    const double f = combine(t, static_cast<std::size_t>(bag_.m()));
    return std::isfinite(f) ? f : std::numeric_limits<double>::infinity();
  }

  double value_and_gradient(const Eigen::VectorXd& c, Eigen::VectorXd& grad, std::size_t& invalid) const {
    const auto e = skeleton_.with_constants({c.data(), static_cast<std::size_t>(c.size())});
    const GradResult r = grad_constants(e, bag_.inputs);
    ErrorTerms t;
    t.invalid = r.invalid_count;
    grad.setZero(c.size());
    for (Eigen::Index k = 0; k < r.values.size(); ++k) {
      if (!r.valid[static_cast<std::size_t>(k)]) continue;
      const double res = r.values[k] - bag_.targets[k];
      t.sse += res * res;
      grad += 2.0 * res * r.jacobian.row(k).transpose();
    }
    const auto n = static_cast<double>(bag_.m());
    grad /= n;
    invalid = t.invalid;
    const double f = combine(t, static_cast<std::size_t>(bag_.m()));
    if (!std::isfinite(f) || !grad.allFinite()) return std::numeric_limits<double>::infinity();
    return f;
  }

 private:
  const Expression& skeleton_;
  const SampleBag& bag_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void InferenceConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("infer: " + what);
  };
  require(bag_size >= 1, "bag_size must be >= 1");
  require(bags >= 1, "bags must be >= 1");
  require(candidates >= 1, "candidates must be >= 1");
  require(keep >= 1, "keep must be >= 1");
  require(static_cast<std::int64_t>(keep) <= static_cast<std::int64_t>(bags) * candidates,
          "keep must not exceed bags * candidates");
  require(subset_cap >= 1, "subset_cap must be >= 1");
  require(bfgs_max_iter >= 0, "bfgs_max_iter must be >= 0");
  require(bfgs_grad_tol >= 0.0, "bfgs_grad_tol must be >= 0");
  require(temperature >= 0.0, "temperature must be >= 0");
  require(threads >= 0, "threads must be >= 0");
}

OrderedJson InferenceConfig::to_json() const {
  return {{"bag_size", bag_size},
          {"bags", bags},
          {"candidates", candidates},
          {"keep", keep},
          {"subset_cap", subset_cap},
          {"bfgs_max_iter", bfgs_max_iter},
          {"bfgs_grad_tol", bfgs_grad_tol},
          {"mode", mode_name(mode)},
          {"temperature", temperature},
          {"seed", seed}};
}

InferenceConfig InferenceConfig::from_json(const Json& j) {
  InferenceConfig c;
  try {
    c.bag_size = j.value("bag_size", c.bag_size);
    c.bags = j.value("bags", c.bags);
    c.candidates = j.value("candidates", c.candidates);
    c.keep = j.value("keep", c.keep);
    c.subset_cap = j.value("subset_cap", c.subset_cap);
    c.bfgs_max_iter = j.value("bfgs_max_iter", c.bfgs_max_iter);
    c.bfgs_grad_tol = j.value("bfgs_grad_tol", c.bfgs_grad_tol);
    c.mode = mode_from_name(j.value("mode", std::string(mode_name(c.mode))));
    c.temperature = j.value("temperature", c.temperature);
    c.seed = j.value("seed", c.seed);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("infer: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Scaling

ScaledBag scale_bag(const SampleBag& bag) {
  if (bag.m() == 0) throw DataError("scale_bag: empty bag");
  const auto n = static_cast<double>(bag.m());
  Scaling s;
  s.mu = bag.inputs.colwise().mean().transpose();
  s.sigma.resize(bag.inputs.cols());
  s.degenerate.assign(static_cast<std::size_t>(bag.inputs.cols()), false);
  for (Eigen::Index j = 0; j < bag.inputs.cols(); ++j) {
    const double sd = std::sqrt((bag.inputs.col(j).array() - s.mu[j]).square().sum() / n);
    s.degenerate[static_cast<std::size_t>(j)] = !(sd >= kDegenerateSd);
    s.sigma[j] = s.degenerate[static_cast<std::size_t>(j)] ? 1.0 : sd;
  }
  s.y_mu = bag.targets.mean();
  const double y_sd = std::sqrt((bag.targets.array() - s.y_mu).square().sum() / n);
  s.y_degenerate = !(y_sd >= kDegenerateSd);
  s.y_sigma = s.y_degenerate ? 1.0 : y_sd;
  return {apply_scaling(bag, s), std::move(s)};
}

SampleBag apply_scaling(const SampleBag& raw, const Scaling& s) {
  if (raw.inputs.cols() != s.mu.size()) throw std::invalid_argument("apply_scaling: width mismatch");
  SampleBag out = raw;
  out.inputs = (raw.inputs.rowwise() - s.mu.transpose()).array().rowwise() / s.sigma.transpose().array();
  out.targets = (raw.targets.array() - s.y_mu) / s.y_sigma;
  return out;
}

Expression unscale(const Expression& scaled, const Scaling& s) {
  return substitute_affine(scaled, s.mu, s.sigma, s.y_mu, s.y_sigma);
}

// ---------------------------------------------------------------------------
// Ranking and refinement

double fit_error(const Expression& expr, const SampleBag& bag) {
  if (bag.m() == 0) throw DataError("fit_error: empty bag");
  if (expr.max_variable() >= bag.inputs.cols()) return kInvalidPenalty;
  const EvalResult r = evaluate(expr, bag.inputs);
  ErrorTerms t;
  t.invalid = r.invalid_count;
  for (Eigen::Index k = 0; k < r.values.size(); ++k) {
    if (!r.valid[static_cast<std::size_t>(k)]) continue;
    const double res = r.values[k] - bag.targets[k];
    if (std::isfinite(res * res)) {
      t.sse += res * res;
    } else {
      ++t.invalid;
    }
  }
  return combine(t, static_cast<std::size_t>(bag.m()));
}

double prediction_r2(const Expression& expr, const SampleBag& bag) {
  const EvalResult ev = evaluate(expr, bag.inputs);
  if (!ev.all_valid()) return std::numeric_limits<double>::quiet_NaN();
  try {
    return r_squared(bag.targets, ev.values);
  } catch (const UndefinedMetric&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

RefineResult refine(const Expression& expr, const SampleBag& full, const InferenceConfig& cfg) {
  RefineResult out{expr, 0.0, 0.0, 0, false};
  const SampleBag bag =
      full.m() > cfg.subset_cap
          ? take_rows(full, sample_indices(static_cast<std::size_t>(full.m()),
                                           static_cast<std::size_t>(cfg.subset_cap), make_stream(cfg.seed, 0x5B5E7)))
          : full;
  out.error_before = out.error_after = fit_error(expr, bag);
  const int p = expr.num_constants();
  if (p == 0 || expr.max_variable() >= bag.inputs.cols()) return out;

  const Objective objective(expr, bag);
  const std::vector<double> init = expr.constants();
  Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(init.data(), p);
  Eigen::VectorXd g(p);
  std::size_t invalid = 0;
  double f = objective.value_and_gradient(c, g, invalid);
  if (!std::isfinite(f) || invalid == static_cast<std::size_t>(bag.m())) return out;

  Eigen::VectorXd best_c = c;
  double best_f = f;
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(p, p);
  bool scaled = false;
  for (int it = 0; it < cfg.bfgs_max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= cfg.bfgs_grad_tol) break;
    Eigen::VectorXd dir = -h * g;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      h.setIdentity();
      dir = -g;
      slope = -g.squaredNorm();
    }
    double alpha = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    Eigen::VectorXd c_new;
    bool accepted = false;
    for (int k = 0; k < kMaxHalvings; ++k, alpha *= 0.5) {
      c_new = c + alpha * dir;
      f_new = objective.value(c_new);
      if (f_new <= f + kArmijo * alpha * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    Eigen::VectorXd g_new(p);
    f_new = objective.value_and_gradient(c_new, g_new, invalid);
    if (!std::isfinite(f_new)) break;
    out.iterations = it + 1;
    const Eigen::VectorXd s = c_new - c;
    const Eigen::VectorXd y = g_new - g;
    c = c_new;
    g = g_new;
    const double f_old = f;
    f = f_new;
    if (f < best_f) {
      best_f = f;
      best_c = c;
    }
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        h *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd left = Eigen::MatrixXd::Identity(p, p) - rho * s * y.transpose();
      h = left * h * left.transpose() + rho * s * s.transpose();
    }
    if (s.lpNorm<Eigen::Infinity>() <= 1e-15 * (1.0 + c.lpNorm<Eigen::Infinity>()) || f_old - f <= 0.0) break;
  }
  if (best_f < out.error_before) {
    out.expr = expr.with_constants({best_c.data(), static_cast<std::size_t>(p)});
    out.error_after = fit_error(out.expr, bag);
    out.refined = out.error_after <= out.error_before;
    if (!out.refined) {
      out.expr = expr;
      out.error_after = out.error_before;
    }
  }
  return out;
}

namespace {

struct Ranked {
  std::size_t index;
  double error;
};

// Indices of the `keep` best distinct expressions, ascending by error.
std::vector<Ranked> rank_indices(std::span<const Expression> exprs, std::span<const double> errors,
                                 const Eigen::MatrixXd& probe, int keep) {
  std::vector<Ranked> ranked(exprs.size());
  for (std::size_t i = 0; i < exprs.size(); ++i) ranked[i] = {i, errors[i]};
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.error < b.error; });
  std::vector<Fingerprint> kept_prints;
  std::vector<Ranked> out;
  for (const Ranked& r : ranked) {
    if (static_cast<int>(out.size()) >= keep) break;
    Fingerprint fp = fingerprint(exprs[r.index], probe);
    const bool duplicate = std::any_of(kept_prints.begin(), kept_prints.end(),
                                       [&](const Fingerprint& k) { return same_factor(k, fp); });
    if (duplicate) continue;
    kept_prints.push_back(std::move(fp));
    out.push_back(r);
  }
  return out;
}

std::vector<double> errors_on(std::span<const Expression> exprs, const SampleBag& bag, int threads) {
  std::vector<double> out(exprs.size());
  parallel_for(exprs.size(), threads, [&](std::size_t i) { out[i] = fit_error(exprs[i], bag); });
  return out;
}

}  // namespace

std::vector<Candidate> rank_and_dedup(std::vector<Candidate> candidates, const SampleBag& bag, int keep) {
  std::vector<Expression> exprs;
  exprs.reserve(candidates.size());
  for (const auto& c : candidates) exprs.push_back(c.expr);
  std::vector<Candidate> out;
  const auto errors = errors_on(exprs, bag, 1);
  for (const Ranked& r : rank_indices(exprs, errors, probe_rows(bag), keep)) {
    out.push_back(std::move(candidates[r.index]));
    out.back().fit_error = r.error;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation

ModelGenerator::ModelGenerator(const Transformer<float>& model, const InferenceConfig& cfg)
    : model_(&model), vocab_(model.config().w_max), cfg_(cfg) {}

std::vector<Hypothesis> ModelGenerator::generate(const SampleBag& scaled, int k, std::uint64_t seed) const {
  DecodeOptions opts;
  opts.k = k;
  opts.mode = cfg_.mode;
  opts.temperature = cfg_.temperature;
  opts.variables = std::max(scaled.w, 1);
  opts.seed = seed;
  return decode_candidates(*model_, encode_points(scaled, vocab_), opts);
}

// ---------------------------------------------------------------------------
// Mining

namespace {

struct Generated {
  Expression scaled;
  std::vector<TokenId> tokens;
  double log_prob;
  int bag;
};

// Splits every input bag into nearly equal chunks of at most `size` rows.
std::vector<SampleBag> split_bags(std::span<const SampleBag> bags, int size, std::uint64_t seed) {
  std::vector<SampleBag> out;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const auto m = static_cast<std::size_t>(bags[b].m());
    if (m <= static_cast<std::size_t>(size)) {
      out.push_back(bags[b]);
      continue;
    }
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng = make_stream(seed, 0x100000 + b);
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t chunks = (m + static_cast<std::size_t>(size) - 1) / static_cast<std::size_t>(size);
    for (std::size_t c = 0; c < chunks; ++c) {
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(c * m / chunks),
                                   perm.begin() + static_cast<std::ptrdiff_t>((c + 1) * m / chunks));
      std::sort(idx.begin(), idx.end());
      out.push_back(take_rows(bags[b], idx));
    }
  }
  return out;
}

}  // namespace

MiningResult mine(std::span<const SampleBag> bags, const CandidateGenerator& generator, const InferenceConfig& cfg) {
  cfg.validate();
  if (bags.empty()) throw DataError("mine: no bags");
  const int w = bags.front().w;
  for (const auto& b : bags) {
    if (b.w != w || b.inputs.cols() != w) throw DataError("mine: bags disagree on the input width");
    if (b.m() == 0) throw DataError("mine: empty bag");
  }
  if (w > generator.w_max())
    throw DataError("mine: bags have " + std::to_string(w) + " inputs but the model supports " +
                    std::to_string(generator.w_max()));
  const int threads = resolve_threads(cfg.threads);

  std::vector<SampleBag> chunks = split_bags(bags, cfg.bag_size, cfg.seed);
  if (chunks.size() > static_cast<std::size_t>(cfg.bags)) {
    const auto pick =
        sample_indices(chunks.size(), static_cast<std::size_t>(cfg.bags), make_stream(cfg.seed, 0xB465));
    std::vector<SampleBag> chosen;
    for (std::size_t i : pick) chosen.push_back(std::move(chunks[i]));
    chunks = std::move(chosen);
  }

  MiningResult result;
  result.bags_used = chunks.size();

  // Candidates are compared on the pooled points with targets standardized by
  // the pooled statistics, and refined in their own bag's coordinates.
  const SampleBag pooled = concatenate_bags(chunks);
  result.points = static_cast<std::size_t>(pooled.m());
  Scaling pool_scaling = scale_bag(pooled).scaling;
  const double pool_mu = pool_scaling.y_mu, pool_sd = pool_scaling.y_sigma;
  SampleBag common = pooled;
  common.targets = (pooled.targets.array() - pool_mu) / pool_sd;
  const auto subset_rows = sample_indices(static_cast<std::size_t>(common.m()),
                                          static_cast<std::size_t>(cfg.subset_cap), make_stream(cfg.seed, 0x5B5E7));
  const SampleBag subset = take_rows(common, subset_rows);
  const SampleBag raw_subset = take_rows(pooled, subset_rows);
  const Eigen::MatrixXd probe = probe_rows(pooled);

  std::vector<Scaling> scalings(chunks.size());
  std::vector<std::vector<Hypothesis>> hyps(chunks.size());
  parallel_for(chunks.size(), threads, [&](std::size_t b) {
    ScaledBag sb = scale_bag(chunks[b]);
    scalings[b] = std::move(sb.scaling);
    hyps[b] = generator.generate(sb.bag, cfg.candidates, stream_seed(cfg.seed, b));
  });

  const Vocabulary vocab(generator.w_max());
  std::vector<Generated> pool;
  for (std::size_t b = 0; b < chunks.size(); ++b) {
    for (auto& h : hyps[b]) {
      ++result.generated;
      auto e = try_decode_expression(h.ids, vocab);
      if (!e || e->max_variable() >= w) {
        ++result.malformed;
        continue;
      }
      pool.push_back({std::move(*e), std::move(h.ids), h.log_prob, static_cast<int>(b)});
    }
  }
  if (pool.empty())
    throw MiningFailure("mining produced no parsable candidates from " + std::to_string(result.generated) +
                        " sequences");

  // Expression of a scaled candidate in the common coordinates: raw inputs,
  // pooled-standardized target.
  auto to_common = [&](const Expression& scaled, const Scaling& s) {
    return substitute_affine(scaled, s.mu, s.sigma, (s.y_mu - pool_mu) / pool_sd, s.y_sigma / pool_sd);
  };
  std::vector<Expression> common_exprs(pool.size());
  parallel_for(pool.size(), threads, [&](std::size_t i) {
    common_exprs[i] = to_common(pool[i].scaled, scalings[static_cast<std::size_t>(pool[i].bag)]);
  });
  const auto shortlist = rank_indices(common_exprs, errors_on(common_exprs, subset, threads), probe, cfg.keep);

  std::vector<Candidate> refined(shortlist.size());
  parallel_for(shortlist.size(), threads, [&](std::size_t i) {
    const Generated& g = pool[shortlist[i].index];
    const Scaling& s = scalings[static_cast<std::size_t>(g.bag)];
    const RefineResult r = refine(g.scaled, apply_scaling(raw_subset, s), cfg);
    Candidate& c = refined[i];
    const Expression before = common_exprs[shortlist[i].index];
    const Expression after = to_common(r.expr, s);
    c.pre_refine_error = fit_error(before, common);
    const double post = r.refined ? fit_error(after, common) : c.pre_refine_error;
    c.refined = r.refined && post <= c.pre_refine_error;
    c.fit_error = c.refined ? post : c.pre_refine_error;
    c.expr = unscale(c.refined ? r.expr : g.scaled, s);
    c.tokens = g.tokens;
    c.log_prob = g.log_prob;
    c.bag = g.bag;
    c.origin = describe_origin(chunks[static_cast<std::size_t>(g.bag)]);
    c.r_squared = prediction_r2(c.expr, pooled);
  });

  std::vector<Expression> final_exprs;
  std::vector<double> final_errors;
  for (const auto& c : refined) {
    final_exprs.push_back(c.expr);
    final_errors.push_back(c.fit_error);
  }
  for (const Ranked& r : rank_indices(final_exprs, final_errors, probe, cfg.keep))
    result.candidates.push_back(std::move(refined[r.index]));
  spdlog::info("mined {} candidates from {} bags ({} sequences, {} malformed)", result.candidates.size(),
               result.bags_used, result.generated, result.malformed);
  return result;
}

// ---------------------------------------------------------------------------
// Output

namespace {

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

int variables_needed(const Expression& e) { return std::max(e.max_variable() + 1, 1); }

}  // namespace

OrderedJson candidates_to_json(const std::vector<Candidate>& candidates, std::span<const std::string> names) {
  OrderedJson list = OrderedJson::array();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Candidate& c = candidates[i];
    const Vocabulary vocab(variables_needed(c.expr));
    OrderedJson item;
    item["name"] = "f" + std::to_string(i);
    item["infix"] = to_infix(c.expr, names);
    item["prefix"] = token_strings(encode_expression(c.expr, vocab).ids, vocab);
    item["constants"] = c.expr.constants();
    item["fit_error"] = number_or_null(c.fit_error);
    item["r2"] = number_or_null(c.r_squared);
    item["provenance"] = {{"bag", c.bag},
                          {"origin", c.origin},
                          {"refined", c.refined},
                          {"pre_refine_error", number_or_null(c.pre_refine_error)},
                          {"log_prob", number_or_null(c.log_prob)},
                          {"generated_length", c.tokens.size()}};
    list.push_back(std::move(item));
  }
  return list;
}

void write_factors(const std::filesystem::path& path, const MiningResult& result, std::span<const std::string> names) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << candidates_to_json(result.candidates, names).dump(2) << '\n';
  if (!os) throw DataError("failed writing " + path.string());
}

std::vector<FactorRecord> read_factors(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  Json j;
  try {
    is >> j;
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw DataError(path.string() + ": expected a list of factors");
  std::vector<FactorRecord> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string where = path.string() + ": factor " + std::to_string(i);
    try {
      const auto tokens = j[i].at("prefix").get<std::vector<std::string>>();
      int w = 1;
      for (const auto& t : tokens)
        if (t.size() > 1 && t[0] == 'x' && std::all_of(t.begin() + 1, t.end(), [](unsigned char ch) { return std::isdigit(ch) != 0; }))
          w = std::max(w, std::stoi(t.substr(1)) + 1);
      const Vocabulary vocab(w);
      std::vector<TokenId> ids;
      for (const auto& t : tokens) {
        const auto id = vocab.decoder_id(t);
        if (!id) throw DataError(where + ": unknown token '" + t + "'");
        ids.push_back(*id);
      }
      Expression e = decode_expression(ids, vocab);
      const auto constants = j[i].at("constants").get<std::vector<double>>();
      if (static_cast<int>(constants.size()) != e.num_constants())
        throw DataError(where + ": constant count does not match the prefix");
      out.push_back({j[i].value("name", "f" + std::to_string(i)), e.with_constants(constants)});
    } catch (const Json::exception& e) {
      throw DataError(where + ": " + e.what());
    } catch (const CodecError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace factorforge
