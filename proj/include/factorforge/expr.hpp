#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace factorforge {

// Operator set of the factor grammar. Only cross-sectional operators exist;
// there are no rolling-window / time-series operators.
enum class Op : std::uint8_t {
  Add,
  Sub,
  Mul,
  Div,
  Inv,
  Abs,
  Sqr,
  Sqrt,
  Sin,
  Cos,
  Tan,
  Atan,
  Log,
  Exp,
  Variable,
  Constant,
};

inline constexpr Op kBinaryOps[] = {Op::Add, Op::Sub, Op::Mul, Op::Div};
inline constexpr Op kUnaryOps[] = {Op::Inv, Op::Abs, Op::Sqr,  Op::Sqrt, Op::Sin,
                                   Op::Cos, Op::Tan, Op::Atan, Op::Log,  Op::Exp};

int arity(Op op);
bool is_binary(Op op);
bool is_unary(Op op);
bool is_leaf(Op op);
std::string_view op_name(Op op);
std::optional<Op> op_from_name(std::string_view name);

// Upper bound on |value| at any node; beyond it a point is treated as invalid.
inline constexpr double kValueLimit = 1e100;
// tan is rejected where |cos| falls below this.
inline constexpr double kTanPoleEps = 1e-12;

struct Node {
  Op op = Op::Constant;
  std::uint16_t var = 0;  // Variable only
  double value = 0.0;     // Constant only

  friend bool operator==(const Node&, const Node&) = default;
};

// Immutable expression tree stored as its prefix (Polish) traversal. Constants
// are indexed in prefix order everywhere in the library.
class Expression {
 public:
  Expression() = default;

  static Expression variable(int index);
  static Expression constant(double value);
  static Expression unary(Op op, const Expression& child);
  static Expression binary(Op op, const Expression& lhs, const Expression& rhs);
  // Validates arity consistency; throws std::invalid_argument otherwise.
  static Expression from_prefix(std::vector<Node> nodes);

  std::span<const Node> nodes() const { return nodes_; }
  const Node& root() const { return nodes_.front(); }
  bool empty() const { return nodes_.empty(); }
  std::size_t size() const { return nodes_.size(); }

  int num_constants() const;
  std::vector<double> constants() const;
  Expression with_constants(std::span<const double> values) const;
  // Largest variable index referenced, or -1 when none.
  int max_variable() const;
  // Operator counts, excluding leaves.
  int binary_count() const;
  int unary_count() const;

  // Index one past the end of the subtree rooted at `begin`.
  std::size_t subtree_end(std::size_t begin) const;
  Expression subtree(std::size_t begin) const;

  friend bool operator==(const Expression&, const Expression&) = default;

 private:
  explicit Expression(std::vector<Node> nodes) : nodes_(std::move(nodes)) {}
  std::vector<Node> nodes_;
};

// Convenience builders used by tests and the generator.
Expression operator+(const Expression& a, const Expression& b);
Expression operator-(const Expression& a, const Expression& b);
Expression operator*(const Expression& a, const Expression& b);
Expression operator/(const Expression& a, const Expression& b);
Expression apply(Op unary_op, const Expression& a);

struct EvalResult {
  Eigen::VectorXd values;          // NaN where invalid
  std::vector<std::uint8_t> valid;  // 1 = inside the domain and |value| <= 1e100
  std::size_t invalid_count = 0;

  bool all_valid() const { return invalid_count == 0; }
};

// Point-wise evaluation over an M x W input matrix (one row per point).
EvalResult evaluate(const Expression& expr, const Eigen::MatrixXd& inputs);

struct GradResult {
  Eigen::VectorXd values;
  std::vector<std::uint8_t> valid;
  std::size_t invalid_count = 0;
  Eigen::MatrixXd jacobian;  // M x P, d value_k / d constant_p; zero rows where invalid

  bool all_valid() const { return invalid_count == 0; }
};

// Forward-mode derivatives of the expression with respect to its constants.
// Points where a derivative is not finite are flagged invalid as well.
GradResult grad_constants(const Expression& expr, const Eigen::MatrixXd& inputs);

// Builds y_sigma * e((x - mu) / sigma) + y_mu as an explicit tree.
// Throws std::invalid_argument on a zero sigma or y_sigma.
Expression substitute_affine(const Expression& expr, const Eigen::VectorXd& mu,
                             const Eigen::VectorXd& sigma, double y_mu, double y_sigma);

// Node count.
inline int complexity(const Expression& expr) { return static_cast<int>(expr.size()); }

// Prefix string with add/mul operands sorted; constants printed exactly.
std::string canonical_string(const Expression& expr);

// Infix rendering for reports. Variables are named x0, x1, ... unless names are
// supplied.
std::string to_infix(const Expression& expr, std::span<const std::string> names = {});

struct Fingerprint {
  std::string canonical;
  std::vector<double> probe_values;  // NaN where invalid
  std::uint64_t canonical_hash = 0;
  std::uint64_t value_hash = 0;  // hash of probe values quantized to a 1e-9 grid
};

// Fixed pseudo-random probe (standard normal) with `rows` points of width `w`.
Eigen::MatrixXd default_probe(int w, int rows = 64);

Fingerprint fingerprint(const Expression& expr, const Eigen::MatrixXd& probe);

// Two expressions are treated as the same factor when their canonical strings
// match or their probe predictions agree within 1e-9 (relative above 1) with
// identical validity patterns.
bool same_factor(const Fingerprint& a, const Fingerprint& b);

}  // namespace factorforge
