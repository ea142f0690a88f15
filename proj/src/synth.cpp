#include "factorforge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace factorforge {

namespace {

std::vector<std::string> op_names(const std::vector<Op>& ops) {
  std::vector<std::string> out;
  for (Op op : ops) out.emplace_back(op_name(op));
  return out;
}

std::vector<Op> parse_ops(const nlohmann::json& j, int want_arity) {
  std::vector<Op> out;
  for (const auto& name : j.get<std::vector<std::string>>()) {
    auto op = op_from_name(name);
    if (!op || arity(*op) != want_arity) throw ConfigError("unknown operator '" + name + "'");
    out.push_back(*op);
  }
  return out;
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

// Number of binary trees with `n` operators left to place when `e` slots are
// still empty.
class ShapeCounts {
 public:
  explicit ShapeCounts(int n_max) : n_max_(n_max), table_((2 * n_max + 3) * (n_max + 1), 0.0) {
    const int e_max = 2 * n_max + 2;
    for (int e = 0; e <= e_max; ++e) at(e, 0) = 1.0;
    for (int n = 1; n <= n_max; ++n) {
      at(0, n) = 0.0;
      for (int e = 1; e + 1 <= e_max; ++e) at(e, n) = at(e - 1, n) + at(e + 1, n - 1);
    }
  }
  double operator()(int e, int n) const { return table_[e * (n_max_ + 1) + n]; }

 private:
  double& at(int e, int n) { return table_[e * (n_max_ + 1) + n]; }
  int n_max_;
  std::vector<double> table_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void GeneratorConfig::validate() const {
  if (w_max < 1) throw ConfigError("generator.w_max must be >= 1");
  if (fixed_w < 0 || fixed_w > w_max) throw ConfigError("generator.fixed_w must be in [0, w_max]");
  if (b_max < 0 || u_max < 0) throw ConfigError("generator.b_max/u_max must be >= 0");
  if (binary_ops.empty()) throw ConfigError("generator.binary_ops must not be empty");
  if (u_max > 0 && unary_ops.empty()) throw ConfigError("generator.unary_ops is empty but u_max > 0");
  if (m_min_per_dim < 1 || m_max < m_min_per_dim * (fixed_w > 0 ? fixed_w : w_max))
    throw ConfigError("generator.m_max must be >= m_min_per_dim * W");
  if (c_max < 1) throw ConfigError("generator.c_max must be >= 1");
  if (affine_exp_min > affine_exp_max) throw ConfigError("generator affine exponent range is empty");
  if (p_drop < 0.0 || p_drop > 1.0) throw ConfigError("generator.p_drop must be in [0, 1]");
  if (max_depth < 0) throw ConfigError("generator.max_depth must be >= 0");
  if (max_retries < 1) throw ConfigError("generator.max_retries must be >= 1");
}

nlohmann::ordered_json GeneratorConfig::to_json() const {
  nlohmann::ordered_json j;
  j["w_max"] = w_max;
  j["fixed_w"] = fixed_w;
  j["b_max"] = b_max;
  j["u_max"] = u_max;
  j["binary_ops"] = op_names(binary_ops);
  j["unary_ops"] = op_names(unary_ops);
  j["m_min_per_dim"] = m_min_per_dim;
  j["m_max"] = m_max;
  j["c_max"] = c_max;
  j["affine_exp_min"] = affine_exp_min;
  j["affine_exp_max"] = affine_exp_max;
  j["p_drop"] = p_drop;
  j["max_depth"] = max_depth;
  j["max_retries"] = max_retries;
  return j;
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.w_max = j.at("w_max").get<int>();
  c.fixed_w = j.at("fixed_w").get<int>();
  c.b_max = j.at("b_max").get<int>();
  c.u_max = j.at("u_max").get<int>();
  c.binary_ops = parse_ops(j.at("binary_ops"), 2);
  c.unary_ops = parse_ops(j.at("unary_ops"), 1);
  c.m_min_per_dim = j.at("m_min_per_dim").get<int>();
  c.m_max = j.at("m_max").get<int>();
  c.c_max = j.at("c_max").get<int>();
  c.affine_exp_min = j.at("affine_exp_min").get<int>();
  c.affine_exp_max = j.at("affine_exp_max").get<int>();
  c.p_drop = j.at("p_drop").get<double>();
  c.max_depth = j.at("max_depth").get<int>();
  c.max_retries = j.at("max_retries").get<int>();
  c.validate();
  return c;
}

GeneratorConfig GeneratorConfig::toy() {
  GeneratorConfig c;
  c.w_max = 2;
  c.b_max = 1;
  c.u_max = 2;
  c.binary_ops = {Op::Add, Op::Mul};
  c.unary_ops = {Op::Sin};
  c.m_max = 60;
  c.p_drop = 0.0;
  c.max_depth = 3;
  return c;
}

// ---------------------------------------------------------------------------
// Expressions

double sample_affine_coefficient(const GeneratorConfig& cfg, Rng& rng) {
  const double sign = uniform_int(rng, 0, 1) == 0 ? -1.0 : 1.0;
  const double mantissa = uniform01(rng);
  const int exponent = uniform_int(rng, cfg.affine_exp_min, cfg.affine_exp_max);
  return sign * mantissa * std::pow(10.0, exponent);
}

std::vector<bool> sample_binary_shape(int internal, Rng& rng) {
  if (internal < 0) throw std::invalid_argument("sample_binary_shape: negative operator count");
  const ShapeCounts counts(internal);
  // -1 empty slot, 0 leaf, 1 operator; slots from `cursor` on are all empty.
  std::vector<int> slots{-1};
  std::size_t cursor = 0;
  int empty = 1;
  for (int n = internal; n > 0; --n) {
    const double total = counts(empty, n);
    double u = uniform01(rng) * total;
    int k = 0;
    for (; k < empty - 1; ++k) {
      u -= counts(empty - k + 1, n - 1);
      if (u < 0.0) break;
    }
    for (int j = 0; j < k; ++j) slots[cursor + j] = 0;
    const std::size_t chosen = cursor + k;
    slots[chosen] = 1;
    slots.insert(slots.begin() + static_cast<std::ptrdiff_t>(chosen) + 1, {-1, -1});
    cursor = chosen + 1;
    empty = empty - k + 1;
  }
  std::vector<bool> shape(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) shape[i] = slots[i] == 1;
  return shape;
}

int operator_depth(const Expression& expr) {
  const auto nodes = expr.nodes();
  std::vector<int> stack;
  for (std::size_t i = nodes.size(); i-- > 0;) {
    const int a = arity(nodes[i].op);
    if (a == 0) {
      stack.push_back(0);
    } else if (a == 1) {
      stack.back() += 1;
    } else {
      const int lhs = stack.back();
      stack.pop_back();
      stack.back() = 1 + std::max(lhs, stack.back());
    }
  }
  return stack.back();
}

namespace {

Expression build_skeleton(const GeneratorConfig& cfg, int w, Rng& rng) {
  const int b = uniform_int(rng, w - 1, w + cfg.b_max);
  const std::vector<bool> shape = sample_binary_shape(b, rng);

  const int leaves = b + 1;
  std::vector<int> vars(leaves);
  for (int i = 0; i < leaves; ++i) vars[i] = i < w ? i : uniform_int(rng, 0, w - 1);
  std::shuffle(vars.begin(), vars.end(), rng);

  std::vector<Node> nodes;
  nodes.reserve(shape.size());
  int leaf = 0;
  for (bool is_op : shape) {
    if (is_op) {
      const Op op = cfg.binary_ops[uniform_int(rng, 0, static_cast<int>(cfg.binary_ops.size()) - 1)];
      nodes.push_back({op, 0, 0.0});
    } else {
      nodes.push_back({Op::Variable, static_cast<std::uint16_t>(vars[leaf++]), 0.0});
    }
  }

  // Each draw puts one unary operator on a uniformly chosen edge; the edge
  // above node i is realized by inserting the operator in front of i.
  const int u = cfg.u_max > 0 ? uniform_int(rng, 0, cfg.u_max) : 0;
  for (int j = 0; j < u; ++j) {
    const int at = uniform_int(rng, 0, static_cast<int>(nodes.size()) - 1);
    const Op op = cfg.unary_ops[uniform_int(rng, 0, static_cast<int>(cfg.unary_ops.size()) - 1)];
    nodes.insert(nodes.begin() + at, Node{op, 0, 0.0});
  }
  return Expression::from_prefix(std::move(nodes));
}

Expression affine_expand(const Expression& skel, std::size_t at, const std::vector<bool>& dropped,
                         const GeneratorConfig& cfg, Rng& rng) {
  const Node& n = skel.nodes()[at];
  auto wrap = [&](const Expression& inner, bool drop) {
    double a = sample_affine_coefficient(cfg, rng);
    const double b = sample_affine_coefficient(cfg, rng);
    if (drop) a = 0.0;
    return Expression::constant(a) * inner + Expression::constant(b);
  };
  if (n.op == Op::Variable) return wrap(Expression::variable(n.var), dropped[n.var]);
  const std::size_t first = at + 1;
  if (is_unary(n.op)) {
    Expression child = affine_expand(skel, first, dropped, cfg, rng);
    return wrap(Expression::unary(n.op, child), false);
  }
  Expression lhs = affine_expand(skel, first, dropped, cfg, rng);
  Expression rhs = affine_expand(skel, skel.subtree_end(first), dropped, cfg, rng);
  return Expression::binary(n.op, lhs, rhs);
}

}  // namespace

Expression sample_expression(const GeneratorConfig& cfg, Rng& rng) {
  const int w = cfg.fixed_w > 0 ? cfg.fixed_w : uniform_int(rng, 1, cfg.w_max);
  return sample_expression(cfg, w, rng);
}

ExpressionDraw draw_expression(const GeneratorConfig& cfg, int w, Rng& rng) {
  if (w < 1 || w > cfg.w_max) throw std::invalid_argument("draw_expression: W outside [1, w_max]");
  ExpressionDraw d;
  d.w = w;
  d.skeleton = build_skeleton(cfg, w, rng);
  if (cfg.max_depth > 0) {
    int tries = 0;
    while (operator_depth(d.skeleton) > cfg.max_depth) {
      if (++tries > 10000) throw GenerationError("draw_expression: max_depth unreachable for this config");
      d.skeleton = build_skeleton(cfg, w, rng);
    }
  }
  std::vector<bool> dropped(w, false);
  for (int v = 0; v < w; ++v) dropped[v] = cfg.p_drop > 0.0 && uniform01(rng) < cfg.p_drop;
  d.expr = affine_expand(d.skeleton, 0, dropped, cfg, rng);
  return d;
}

Expression sample_expression(const GeneratorConfig& cfg, int w, Rng& rng) {
  return draw_expression(cfg, w, rng).expr;
}

// ---------------------------------------------------------------------------
// Inputs

Eigen::MatrixXd haar_rotation(int w, Rng& rng) {
  if (w < 1) throw std::invalid_argument("haar_rotation: W must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(w, w);
  for (int i = 0; i < w; ++i)
    for (int j = 0; j < w; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd& r = qr.matrixQR();
  for (int j = 0; j < w; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

std::vector<ClusterSpec> sample_clusters(int w, const GeneratorConfig& cfg, Rng& rng) {
  const int c = uniform_int(rng, 1, cfg.c_max);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<ClusterSpec> clusters(c);
  double total = 0.0;
  for (auto& cl : clusters) {
    do cl.weight = uniform01(rng);
    while (cl.weight <= 0.0);
    total += cl.weight;
    cl.centroid.resize(w);
    cl.scale.resize(w);
    for (int j = 0; j < w; ++j) cl.centroid[j] = normal(rng);
    for (int j = 0; j < w; ++j) {
      do cl.scale[j] = uniform01(rng);
      while (cl.scale[j] <= 0.0);
    }
    cl.family = uniform_int(rng, 0, 1) == 0 ? Family::Gaussian : Family::Uniform;
  }
  for (auto& cl : clusters) cl.weight /= total;
  return clusters;
}

std::vector<int> cluster_sizes(const std::vector<ClusterSpec>& clusters, int m) {
  std::vector<int> sizes(clusters.size(), 0);
  int used = 0;
  for (std::size_t i = 0; i + 1 < clusters.size(); ++i) {
    sizes[i] = static_cast<int>(std::floor(clusters[i].weight * m));
    used += sizes[i];
  }
  sizes.back() = m - used;
  return sizes;
}

Eigen::MatrixXd draw_mixture(const std::vector<ClusterSpec>& clusters, int m, Rng& rng) {
  if (clusters.empty()) throw std::invalid_argument("draw_mixture: no clusters");
  const int w = static_cast<int>(clusters.front().centroid.size());
  const std::vector<int> sizes = cluster_sizes(clusters, m);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-std::sqrt(3.0), std::sqrt(3.0));
  Eigen::MatrixXd x(m, w);
  int row = 0;
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    const ClusterSpec& cl = clusters[i];
    Eigen::MatrixXd block(sizes[i], w);
    for (int k = 0; k < sizes[i]; ++k)
      for (int j = 0; j < w; ++j)
        block(k, j) = cl.scale[j] * (cl.family == Family::Gaussian ? normal(rng) : unit(rng));
    const Eigen::MatrixXd rot = haar_rotation(w, rng);
    x.middleRows(row, sizes[i]) = (block * rot).rowwise() + cl.centroid.transpose();
    row += sizes[i];
  }
  return x;
}

bool standardize_columns(Eigen::MatrixXd& x) {
  const double n = static_cast<double>(x.rows());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    x.col(j).array() -= mean;
    const double sd = std::sqrt(x.col(j).squaredNorm() / n);
    if (!(sd > 0.0) || !std::isfinite(sd)) return false;
    x.col(j) /= sd;
    // A second centering pass removes the rounding residue of the first.
    x.col(j).array() -= x.col(j).mean();
  }
  return true;
}

Eigen::MatrixXd sample_inputs(int w, int m, const GeneratorConfig& cfg, Rng& rng) {
  if (m < 1) throw std::invalid_argument("sample_inputs: M must be >= 1");
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Eigen::MatrixXd x = draw_mixture(sample_clusters(w, cfg, rng), m, rng);
    if (standardize_columns(x)) return x;
  }
  throw GenerationError("sample_inputs: degenerate input columns after " +
                        std::to_string(cfg.max_retries) + " draws");
}

// ---------------------------------------------------------------------------
// Samples

std::optional<SampleBag> try_make_bag(const Expression& expr, Eigen::MatrixXd inputs) {
  const EvalResult r = evaluate(expr, inputs);
  if (!r.all_valid()) return std::nullopt;
  SampleBag bag;
  bag.w = static_cast<int>(inputs.cols());
  bag.inputs = std::move(inputs);
  bag.targets = r.values;
  return bag;
}

TrainingSample make_training_sample(const GeneratorConfig& cfg, Rng& rng) {
  for (int attempt = 1; attempt <= cfg.max_retries; ++attempt) {
    Expression expr = sample_expression(cfg, rng);
    const int w = expr.max_variable() + 1;
    const int m = uniform_int(rng, cfg.m_min_per_dim * w, cfg.m_max);
    auto bag = try_make_bag(expr, sample_inputs(w, m, cfg, rng));
    if (bag) return TrainingSample{std::move(*bag), std::move(expr), attempt};
  }
  throw GenerationError("make_training_sample: retry cap of " + std::to_string(cfg.max_retries) +
                        " exhausted");
}

TrainingSample make_training_sample(const GeneratorConfig& cfg, std::uint64_t master_seed,
                                    std::uint64_t index) {
  Rng rng = make_stream(master_seed, index);
  try {
    TrainingSample s = make_training_sample(cfg, rng);
    s.bag.origin = SyntheticOrigin{stream_seed(master_seed, index), index};
    return s;
  } catch (const GenerationError& e) {
    throw GenerationError(std::string(e.what()) + " (master seed " + std::to_string(master_seed) +
                          ", sample " + std::to_string(index) + ")");
  }
}

PlantedProblem make_planted_problem(const GeneratorConfig& cfg, Rng& rng) {
  for (int attempt = 1; attempt <= cfg.max_retries; ++attempt) {
    Expression expr = sample_expression(cfg, rng);
    const int w = expr.max_variable() + 1;
    const int m = uniform_int(rng, cfg.m_min_per_dim * w, cfg.m_max);
    auto all = try_make_bag(expr, sample_inputs(w, 2 * m, cfg, rng));
    if (!all) continue;
    PlantedProblem p{std::move(expr), {}, {}};
    for (SampleBag* half : {&p.bag, &p.held_out}) {
      half->w = w;
      half->inputs.resize(m, w);
      half->targets.resize(m);
    }
    for (int i = 0; i < 2 * m; ++i) {
      SampleBag& half = i % 2 == 0 ? p.bag : p.held_out;
      half.inputs.row(i / 2) = all->inputs.row(i);
      half.targets[i / 2] = all->targets[i];
    }
    return p;
  }
  throw GenerationError("make_planted_problem: retry cap of " + std::to_string(cfg.max_retries) + " exhausted");
}

}  // namespace factorforge
