#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace smsdkl {

using Mat = Eigen::MatrixXd;

// Cholesky factorization with escalating diagonal jitter: retries at
// 1e-8, 1e-7, ..., 1e-4 before giving up. Throws std::runtime_error if the
// matrix is still not positive definite at the largest jitter.
Eigen::LLT<Mat> chol_spd(const Mat& a);

namespace graph {

enum class Op {
  kInput,
  kConstant,
  kAdd,
  kMul,
  kMatmul,
  kTanh,
  kSigmoid,
  kRelu,
  kExp,
  kLog,
  kSum,
  kMean,
  kConcat,
  kSlice,
  kTranspose,
  kCholSolveQuadform,
  kLogdetSpd,
};

using NodeId = int;

// Reduction axis: kAllAxes collapses to 1x1, 0 sums over rows (keeping one
// row), 1 sums over columns (keeping one column).
inline constexpr int kAllAxes = -1;

// Reverse-mode differentiation tape. Nodes are appended in topological
// order; shapes are fixed and checked when a node is created, so forward()
// never raises shape errors. Inputs are bound (and re-bound) between
// forward passes; everything else is recomputed from them.
class Tape {
 public:
  NodeId input(int rows, int cols);
  NodeId constant(Mat value);
  NodeId scalar(double value) { return constant(Mat::Constant(1, 1, value)); }

  // add/mul broadcast: each dimension must match or be 1 on one side.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId relu(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sum(NodeId a, int axis = kAllAxes);
  NodeId mean(NodeId a, int axis = kAllAxes);
  NodeId concat(const std::vector<NodeId>& parts, int axis);
  NodeId slice(NodeId a, int row0, int rows, int col0, int cols);
  NodeId transpose(NodeId a);

  // v' A^{-1} v for SPD A and column vector v -> 1x1. The solve uses a
  // Cholesky factorization; adjoints are closed-form in u = A^{-1} v.
  NodeId chol_solve_quadform(NodeId a, NodeId v);
  // 2 sum(log diag(L)) for SPD A = L L' -> 1x1; adjoint is A^{-1}.
  NodeId logdet_spd(NodeId a);

  // Compositions of the primitives above (no new node kinds).
  NodeId neg(NodeId a) { return mul(a, scalar(-1.0)); }
  NodeId sub(NodeId a, NodeId b) { return add(a, neg(b)); }
  NodeId abs(NodeId a) { return add(relu(a), relu(neg(a))); }
  NodeId square(NodeId a) { return mul(a, a); }
  // log(1 + e^z) computed as relu(z) + log(1 + e^{-|z|}) so large |z| never
  // overflows the exponential.
  NodeId softplus(NodeId z);
  // Elementwise binary cross-entropy from logits: softplus(z) - e*z.
  NodeId bce_logits(NodeId z, NodeId e) { return sub(softplus(z), mul(e, z)); }

  void bind(NodeId id, const Mat& value);
  const Mat& forward(NodeId root);
  // Root must be 1x1; populates grad() of every node with d(root)/d(node).
  void backward(NodeId root);

  const Mat& value(NodeId id) const { return nodes_[id].value; }
  const Mat& grad(NodeId id) const { return nodes_[id].grad; }
  int rows(NodeId id) const { return static_cast<int>(nodes_[id].value.rows()); }
  int cols(NodeId id) const { return static_cast<int>(nodes_[id].value.cols()); }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Op op;
    std::vector<NodeId> parents;
    Mat value;
    Mat grad;
    int axis = kAllAxes;                    // sum/mean/concat
    int row0 = 0, col0 = 0;                 // slice
    bool bound = false;                     // inputs
    Mat aux;                                // u = A^{-1}v, or A^{-1} for logdet
  };

  NodeId push(Node n);
  void check_exists(NodeId id) const;
  void eval(Node& n);
  void accumulate(int idx);

  std::vector<Node> nodes_;
};

}  // namespace graph

// Named parameter arrays plus Adam moment state. Names are unique and
// insertion-ordered; shapes are fixed once created.
class ParamStore {
 public:
  Mat& create(const std::string& name, int rows, int cols);
  Mat& create(const std::string& name, Mat init);

  bool has(const std::string& name) const;
  Mat& get(const std::string& name);
  const Mat& get(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::int64_t step_count() const { return step_; }

  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);

  friend bool adam_step(ParamStore& store, const std::map<std::string, Mat>& grads,
                        double lr, std::string* diag);

 private:
  struct Slot {
    Mat value;
    Mat m1;
    Mat m2;
  };
  std::map<std::string, Slot> slots_;
  std::vector<std::string> order_;
  std::int64_t step_ = 0;
};

// One Adam descent step (decay 0.9/0.999, epsilon 1e-8); pass negated
// gradients to ascend. Parameters absent from grads keep their value and
// moments. Returns false, stores untouched, and fills diag when any
// gradient entry is non-finite.
bool adam_step(ParamStore& store, const std::map<std::string, Mat>& grads, double lr,
               std::string* diag = nullptr);

// A differentiable scalar function of a ParamStore: the evaluation returns
// the scalar plus its analytic parameter gradients (normally read off a
// Tape after backward()).
struct EvalResult {
  double value = 0.0;
  std::map<std::string, Mat> grads;
};
using DiffFn = std::function<EvalResult(const ParamStore&)>;

// Central-difference check of fn's analytic gradients at params; returns
// the worst relative error over every coordinate, with denominator
// max(|analytic|, |numeric|, 1e-8).
double grad_check(const DiffFn& fn, const ParamStore& params, double eps);

}  // namespace smsdkl
