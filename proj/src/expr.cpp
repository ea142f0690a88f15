#include "factorforge/expr.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <stdexcept>

namespace factorforge {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct OpInfo {
  Op op;
  std::string_view name;
  int arity;
};

constexpr OpInfo kOpTable[] = {
    {Op::Add, "add", 2},   {Op::Sub, "sub", 2},   {Op::Mul, "mul", 2},   {Op::Div, "div", 2},
    {Op::Inv, "inv", 1},   {Op::Abs, "abs", 1},   {Op::Sqr, "sqr", 1},   {Op::Sqrt, "sqrt", 1},
    {Op::Sin, "sin", 1},   {Op::Cos, "cos", 1},   {Op::Tan, "tan", 1},   {Op::Atan, "atan", 1},
    {Op::Log, "log", 1},   {Op::Exp, "exp", 1},   {Op::Variable, "var", 0},
    {Op::Constant, "const", 0},
};

Eigen::ArrayXd guard(const Eigen::ArrayXd& a) {
  return (a.abs() <= kValueLimit).select(a, kNaN);
}

Eigen::ArrayXd apply_unary(Op op, const Eigen::ArrayXd& a) {
  switch (op) {
    case Op::Inv:
      return guard((a != 0.0).select(a.inverse(), kNaN));
    case Op::Abs:
      return a.abs();
    case Op::Sqr:
      return guard(a.square());
    case Op::Sqrt:
      return (a >= 0.0).select(a.sqrt(), kNaN);
    case Op::Sin:
      return a.sin();
    case Op::Cos:
      return a.cos();
    case Op::Tan:
      return guard((a.cos().abs() >= kTanPoleEps).select(a.tan(), kNaN));
    case Op::Atan:
      return a.atan();
    case Op::Log:
      return (a > 0.0).select(a.log(), kNaN);
    case Op::Exp:
      return guard(a.exp());
    default:
      throw std::logic_error("apply_unary: not a unary operator");
  }
}

Eigen::ArrayXd apply_binary(Op op, const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  switch (op) {
    case Op::Add:
      return guard(a + b);
    case Op::Sub:
      return guard(a - b);
    case Op::Mul:
      return guard(a * b);
    case Op::Div:
      return guard((b != 0.0).select(a / b, kNaN));
    default:
      throw std::logic_error("apply_binary: not a binary operator");
  }
}

void finish_mask(const Eigen::ArrayXd& values, std::vector<std::uint8_t>& valid,
                 std::size_t& invalid) {
  valid.assign(values.size(), 1);
  invalid = 0;
  for (Eigen::Index k = 0; k < values.size(); ++k) {
    if (std::isnan(values[k])) {
      valid[k] = 0;
      ++invalid;
    }
  }
}

std::string format_exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ULL;

}  // namespace

int arity(Op op) { return kOpTable[static_cast<int>(op)].arity; }
bool is_binary(Op op) { return arity(op) == 2; }
bool is_unary(Op op) { return arity(op) == 1; }
bool is_leaf(Op op) { return arity(op) == 0; }
std::string_view op_name(Op op) { return kOpTable[static_cast<int>(op)].name; }

std::optional<Op> op_from_name(std::string_view name) {
  for (const auto& info : kOpTable) {
    if (info.name == name && info.arity > 0) return info.op;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Expression

Expression Expression::variable(int index) {
  if (index < 0 || index > 0xFFFF) throw std::invalid_argument("variable index out of range");
  return Expression({Node{Op::Variable, static_cast<std::uint16_t>(index), 0.0}});
}

Expression Expression::constant(double value) {
  return Expression({Node{Op::Constant, 0, value}});
}

Expression Expression::unary(Op op, const Expression& child) {
  if (!is_unary(op)) throw std::invalid_argument("unary(): operator is not unary");
  if (child.empty()) throw std::invalid_argument("unary(): empty operand");
  std::vector<Node> nodes;
  nodes.reserve(child.size() + 1);
  nodes.push_back(Node{op, 0, 0.0});
  nodes.insert(nodes.end(), child.nodes_.begin(), child.nodes_.end());
  return Expression(std::move(nodes));
}

Expression Expression::binary(Op op, const Expression& lhs, const Expression& rhs) {
  if (!is_binary(op)) throw std::invalid_argument("binary(): operator is not binary");
  if (lhs.empty() || rhs.empty()) throw std::invalid_argument("binary(): empty operand");
  std::vector<Node> nodes;
  nodes.reserve(lhs.size() + rhs.size() + 1);
  nodes.push_back(Node{op, 0, 0.0});
  nodes.insert(nodes.end(), lhs.nodes_.begin(), lhs.nodes_.end());
  nodes.insert(nodes.end(), rhs.nodes_.begin(), rhs.nodes_.end());
  return Expression(std::move(nodes));
}

Expression Expression::from_prefix(std::vector<Node> nodes) {
  if (nodes.empty()) throw std::invalid_argument("from_prefix: empty node list");
  long pending = 1;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (pending == 0) throw std::invalid_argument("from_prefix: trailing nodes after complete tree");
    pending += arity(nodes[i].op) - 1;
  }
  if (pending != 0) throw std::invalid_argument("from_prefix: missing operands");
  return Expression(std::move(nodes));
}

int Expression::num_constants() const {
  return static_cast<int>(std::count_if(nodes_.begin(), nodes_.end(),
                                        [](const Node& n) { return n.op == Op::Constant; }));
}

std::vector<double> Expression::constants() const {
  std::vector<double> out;
  for (const auto& n : nodes_)
    if (n.op == Op::Constant) out.push_back(n.value);
  return out;
}

Expression Expression::with_constants(std::span<const double> values) const {
  if (static_cast<int>(values.size()) != num_constants())
    throw std::invalid_argument("with_constants: wrong number of constants");
  std::vector<Node> nodes = nodes_;
  std::size_t p = 0;
  for (auto& n : nodes)
    if (n.op == Op::Constant) n.value = values[p++];
  return Expression(std::move(nodes));
}

int Expression::max_variable() const {
  int m = -1;
  for (const auto& n : nodes_)
    if (n.op == Op::Variable) m = std::max(m, static_cast<int>(n.var));
  return m;
}

int Expression::binary_count() const {
  return static_cast<int>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return is_binary(n.op); }));
}

int Expression::unary_count() const {
  return static_cast<int>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return is_unary(n.op); }));
}

std::size_t Expression::subtree_end(std::size_t begin) const {
  long pending = 1;
  std::size_t i = begin;
  while (pending > 0) {
    pending += arity(nodes_.at(i).op) - 1;
    ++i;
  }
  return i;
}

Expression Expression::subtree(std::size_t begin) const {
  const std::size_t end = subtree_end(begin);
  return Expression(std::vector<Node>(nodes_.begin() + begin, nodes_.begin() + end));
}

Expression operator+(const Expression& a, const Expression& b) { return Expression::binary(Op::Add, a, b); }
Expression operator-(const Expression& a, const Expression& b) { return Expression::binary(Op::Sub, a, b); }
Expression operator*(const Expression& a, const Expression& b) { return Expression::binary(Op::Mul, a, b); }
Expression operator/(const Expression& a, const Expression& b) { return Expression::binary(Op::Div, a, b); }
Expression apply(Op unary_op, const Expression& a) { return Expression::unary(unary_op, a); }

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(const Expression& expr, const Eigen::MatrixXd& inputs) {
  if (expr.empty()) throw std::invalid_argument("evaluate: empty expression");
  if (expr.max_variable() >= inputs.cols())
    throw std::invalid_argument("evaluate: variable index exceeds input width");
  const Eigen::Index m = inputs.rows();
  const auto nodes = expr.nodes();

  std::vector<Eigen::ArrayXd> stack;
  stack.reserve(16);
  for (std::size_t i = nodes.size(); i-- > 0;) {
    const Node& n = nodes[i];
    switch (arity(n.op)) {
      case 0:
        if (n.op == Op::Variable)
          stack.push_back(guard(inputs.col(n.var).array()));
        else
          stack.push_back(guard(Eigen::ArrayXd::Constant(m, n.value)));
        break;
      case 1: {
        Eigen::ArrayXd a = std::move(stack.back());
        stack.back() = apply_unary(n.op, a);
        break;
      }
      default: {
        Eigen::ArrayXd lhs = std::move(stack.back());
        stack.pop_back();
        stack.back() = apply_binary(n.op, lhs, stack.back());
        break;
      }
    }
  }

  EvalResult out;
  out.values = stack.back().matrix();
  finish_mask(stack.back(), out.valid, out.invalid_count);
  return out;
}

GradResult grad_constants(const Expression& expr, const Eigen::MatrixXd& inputs) {
  if (expr.empty()) throw std::invalid_argument("grad_constants: empty expression");
  if (expr.max_variable() >= inputs.cols())
    throw std::invalid_argument("grad_constants: variable index exceeds input width");
  const Eigen::Index m = inputs.rows();
  const auto nodes = expr.nodes();
  const int p_total = expr.num_constants();

  struct Entry {
    Eigen::ArrayXd v;
    Eigen::ArrayXXd d;  // M x P
  };
  std::vector<Entry> stack;
  int next_const = p_total;  // scanning backwards, constants are met in reverse prefix order

  for (std::size_t i = nodes.size(); i-- > 0;) {
    const Node& n = nodes[i];
    if (n.op == Op::Variable) {
      stack.push_back({guard(inputs.col(n.var).array()), Eigen::ArrayXXd::Zero(m, p_total)});
      continue;
    }
    if (n.op == Op::Constant) {
      --next_const;
      Entry e{guard(Eigen::ArrayXd::Constant(m, n.value)), Eigen::ArrayXXd::Zero(m, p_total)};
      e.d.col(next_const).setOnes();
      stack.push_back(std::move(e));
      continue;
    }
    if (is_unary(n.op)) {
      Entry& e = stack.back();
      const Eigen::ArrayXd& a = e.v;
      Eigen::ArrayXd factor;
      switch (n.op) {
        case Op::Inv: factor = -a.square().inverse(); break;
        case Op::Abs: factor = a.sign(); break;
        case Op::Sqr: factor = 2.0 * a; break;
        case Op::Sqrt: factor = 0.5 * a.sqrt().inverse(); break;
        case Op::Sin: factor = a.cos(); break;
        case Op::Cos: factor = -a.sin(); break;
        case Op::Tan: factor = a.cos().square().inverse(); break;
        case Op::Atan: factor = (1.0 + a.square()).inverse(); break;
        case Op::Log: factor = a.inverse(); break;
        case Op::Exp: factor = a.exp(); break;
        default: throw std::logic_error("grad_constants: unknown unary operator");
      }
      e.v = apply_unary(n.op, a);
      e.d.colwise() *= factor;
      continue;
    }
    Entry lhs = std::move(stack.back());
    stack.pop_back();
    Entry& rhs = stack.back();
    Entry out;
    out.v = apply_binary(n.op, lhs.v, rhs.v);
    switch (n.op) {
      case Op::Add:
        out.d = lhs.d + rhs.d;
        break;
      case Op::Sub:
        out.d = lhs.d - rhs.d;
        break;
      case Op::Mul:
        out.d = lhs.d.colwise() * rhs.v + rhs.d.colwise() * lhs.v;
        break;
      case Op::Div: {
        const Eigen::ArrayXd inv_b = rhs.v.inverse();
        out.d = lhs.d.colwise() * inv_b - rhs.d.colwise() * (lhs.v * inv_b.square());
        break;
      }
      default:
        throw std::logic_error("grad_constants: unknown binary operator");
    }
    rhs = std::move(out);
  }

  GradResult out;
  Entry& top = stack.back();
  out.values = top.v.matrix();
  finish_mask(top.v, out.valid, out.invalid_count);
  out.jacobian = top.d.matrix();
  for (Eigen::Index k = 0; k < m; ++k) {
    if (!out.valid[k] || !out.jacobian.row(k).allFinite()) {
      if (out.valid[k]) {
        out.valid[k] = 0;
        ++out.invalid_count;
        out.values[k] = kNaN;
      }
      out.jacobian.row(k).setZero();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Affine substitution

Expression substitute_affine(const Expression& expr, const Eigen::VectorXd& mu,
                             const Eigen::VectorXd& sigma, double y_mu, double y_sigma) {
  if (mu.size() != sigma.size()) throw std::invalid_argument("substitute_affine: mu/sigma size mismatch");
  if (expr.max_variable() >= mu.size())
    throw std::invalid_argument("substitute_affine: variable index exceeds mu/sigma width");
  if (y_sigma == 0.0) throw std::invalid_argument("substitute_affine: zero y_sigma");
  for (Eigen::Index w = 0; w < sigma.size(); ++w)
    if (sigma[w] == 0.0) throw std::invalid_argument("substitute_affine: zero sigma");

  std::vector<Node> nodes;
  nodes.reserve(expr.size() * 2 + 5);
  nodes.push_back({Op::Add, 0, 0.0});
  nodes.push_back({Op::Mul, 0, 0.0});
  nodes.push_back({Op::Constant, 0, y_sigma});
  for (const Node& n : expr.nodes()) {
    if (n.op == Op::Variable) {
      nodes.push_back({Op::Div, 0, 0.0});
      nodes.push_back({Op::Sub, 0, 0.0});
      nodes.push_back(n);
      nodes.push_back({Op::Constant, 0, mu[n.var]});
      nodes.push_back({Op::Constant, 0, sigma[n.var]});
    } else {
      nodes.push_back(n);
    }
  }
  nodes.push_back({Op::Constant, 0, y_mu});
  return Expression::from_prefix(std::move(nodes));
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

std::string canonical_at(const Expression& e, std::size_t at) {
  const Node& n = e.nodes()[at];
  if (n.op == Op::Variable) return "x" + std::to_string(n.var);
  if (n.op == Op::Constant) return format_exact(n.value);
  const std::size_t first = at + 1;
  std::string lhs = canonical_at(e, first);
  if (is_unary(n.op)) return std::string(op_name(n.op)) + "(" + lhs + ")";
  std::string rhs = canonical_at(e, e.subtree_end(first));
  if ((n.op == Op::Add || n.op == Op::Mul) && rhs < lhs) std::swap(lhs, rhs);
  return std::string(op_name(n.op)) + "(" + lhs + "," + rhs + ")";
}

std::string infix_at(const Expression& e, std::size_t at, std::span<const std::string> names,
                     bool top) {
  const Node& n = e.nodes()[at];
  if (n.op == Op::Variable) {
    if (n.var < names.size()) return names[n.var];
    return "x" + std::to_string(n.var);
  }
  if (n.op == Op::Constant) {
    std::string s = format_short(n.value);
    return (n.value < 0 && !top) ? "(" + s + ")" : s;
  }
  const std::size_t first = at + 1;
  if (is_unary(n.op)) {
    std::string a = infix_at(e, first, names, true);
    if (n.op == Op::Sqr) return "(" + a + ")^2";
    if (n.op == Op::Inv) return "1/(" + a + ")";
    return std::string(op_name(n.op)) + "(" + a + ")";
  }
  const std::size_t second = e.subtree_end(first);
  std::string lhs = infix_at(e, first, names, false);
  std::string sym;
  switch (n.op) {
    case Op::Add: sym = " + "; break;
    case Op::Sub: sym = " - "; break;
    case Op::Mul: sym = "*"; break;
    default: sym = "/"; break;
  }
  std::string rhs;
  const Node& r = e.nodes()[second];
  if (n.op == Op::Add && r.op == Op::Constant && r.value < 0) {
    sym = " - ";
    rhs = format_short(-r.value);
  } else {
    rhs = infix_at(e, second, names, false);
  }
  std::string body = lhs + sym + rhs;
  return top ? body : "(" + body + ")";
}

}  // namespace

std::string canonical_string(const Expression& expr) {
  if (expr.empty()) return {};
  return canonical_at(expr, 0);
}

std::string to_infix(const Expression& expr, std::span<const std::string> names) {
  if (expr.empty()) return {};
  return infix_at(expr, 0, names, true);
}

// ---------------------------------------------------------------------------
// Fingerprints

Eigen::MatrixXd default_probe(int w, int rows) {
  std::mt19937_64 rng(0x5EEDF00DULL + static_cast<std::uint64_t>(w));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd probe(rows, w);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < w; ++j) probe(i, j) = normal(rng);
  return probe;
}

Fingerprint fingerprint(const Expression& expr, const Eigen::MatrixXd& probe) {
  Fingerprint fp;
  fp.canonical = canonical_string(expr);
  fp.canonical_hash = fnv1a(kFnvOffset, fp.canonical.data(), fp.canonical.size());
  const EvalResult r = evaluate(expr, probe);
  fp.probe_values.assign(r.values.data(), r.values.data() + r.values.size());
  std::uint64_t h = kFnvOffset;
  for (double v : fp.probe_values) {
    std::int64_t bucket[2] = {0, 0};
    if (std::isnan(v)) {
      bucket[0] = std::numeric_limits<std::int64_t>::min();
    } else if (std::abs(v) <= 1.0) {
      bucket[1] = static_cast<std::int64_t>(std::floor(v * 1e9));
    } else {
      int e = 0;
      const double mant = std::frexp(v, &e);
      bucket[0] = e;
      bucket[1] = static_cast<std::int64_t>(std::floor(mant * 1e9));
    }
    h = fnv1a(h, bucket, sizeof bucket);
  }
  fp.value_hash = h;
  return fp;
}

bool same_factor(const Fingerprint& a, const Fingerprint& b) {
  if (a.canonical == b.canonical) return true;
  if (a.probe_values.size() != b.probe_values.size()) return false;
  for (std::size_t i = 0; i < a.probe_values.size(); ++i) {
    const double x = a.probe_values[i];
    const double y = b.probe_values[i];
    const bool nx = std::isnan(x);
    const bool ny = std::isnan(y);
    if (nx != ny) return false;
    if (nx) continue;
    const double scale = std::max({1.0, std::abs(x), std::abs(y)});
    if (std::abs(x - y) > 1e-9 * scale) return false;
  }
  return true;
}

}  // namespace factorforge
