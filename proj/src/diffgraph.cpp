#include "smsdkl/diffgraph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "smsdkl/io.hpp"

namespace smsdkl {

Eigen::LLT<Mat> chol_spd(const Mat& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("chol_spd needs a square matrix");
  Eigen::LLT<Mat> llt(a);
  if (llt.info() == Eigen::Success) return llt;
  for (double jitter = 1e-8; jitter <= 1e-4; jitter *= 10.0) {
    Mat aj = a;
    aj.diagonal().array() += jitter;
    llt.compute(aj);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw std::runtime_error("matrix not positive definite even with 1e-4 jitter");
}

namespace graph {

namespace {

void broadcast_shape(int ar, int ac, int br, int bc, int* rr, int* rc) {
  const bool rows_ok = ar == br || ar == 1 || br == 1;
  const bool cols_ok = ac == bc || ac == 1 || bc == 1;
  if (!rows_ok || !cols_ok) {
    std::ostringstream ss;
    ss << "cannot broadcast shapes " << ar << "x" << ac << " and " << br << "x" << bc;
    throw std::invalid_argument(ss.str());
  }
  *rr = std::max(ar, br);
  *rc = std::max(ac, bc);
}

Mat expand(const Mat& src, int rows, int cols) {
  if (src.rows() == rows && src.cols() == cols) return src;
  return src.replicate(rows / src.rows(), cols / src.cols());
}

// Sums grad down to the parent's (possibly broadcast) shape.
Mat reduce_to(const Mat& grad, int rows, int cols) {
  Mat out = grad;
  if (rows == 1 && out.rows() > 1) out = out.colwise().sum().eval();
  if (cols == 1 && out.cols() > 1) out = out.rowwise().sum().eval();
  return out;
}

}  // namespace

NodeId Tape::push(Node n) {
  n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

void Tape::check_exists(NodeId id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("node id out of range");
}

NodeId Tape::input(int rows, int cols) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("input needs positive dimensions");
  Node n;
  n.op = Op::kInput;
  n.value = Mat::Zero(rows, cols);
  return push(std::move(n));
}

NodeId Tape::constant(Mat value) {
  if (value.size() == 0) throw std::invalid_argument("constant cannot be empty");
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_exists(a);
  check_exists(b);
  int rr, rc;
  broadcast_shape(rows(a), cols(a), rows(b), cols(b), &rr, &rc);
  Node n;
  n.op = Op::kAdd;
  n.parents = {a, b};
  n.value = Mat::Zero(rr, rc);
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check_exists(a);
  check_exists(b);
  int rr, rc;
  broadcast_shape(rows(a), cols(a), rows(b), cols(b), &rr, &rc);
  Node n;
  n.op = Op::kMul;
  n.parents = {a, b};
  n.value = Mat::Zero(rr, rc);
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  check_exists(a);
  check_exists(b);
  if (cols(a) != rows(b)) {
    std::ostringstream ss;
    ss << "matmul inner dimensions differ: " << rows(a) << "x" << cols(a) << " * " << rows(b)
       << "x" << cols(b);
    throw std::invalid_argument(ss.str());
  }
  Node n;
  n.op = Op::kMatmul;
  n.parents = {a, b};
  n.value = Mat::Zero(rows(a), cols(b));
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::kTanh;
  n.parents = {a};
  n.value = Mat::Zero(rows(a), cols(a));
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::kSigmoid;
  n.parents = {a};
  n.value = Mat::Zero(rows(a), cols(a));
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::kRelu;
  n.parents = {a};
  n.value = Mat::Zero(rows(a), cols(a));
  return push(std::move(n));
}

NodeId Tape::exp(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::kExp;
  n.parents = {a};
  n.value = Mat::Zero(rows(a), cols(a));
  return push(std::move(n));
}

NodeId Tape::log(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::kLog;
  n.parents = {a};
  n.value = Mat::Zero(rows(a), cols(a));
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a, int axis) {
  check_exists(a);
  if (axis != kAllAxes && axis != 0 && axis != 1)
    throw std::invalid_argument("sum axis must be -1, 0 or 1");
  Node n;
  n.op = Op::kSum;
  n.parents = {a};
  n.axis = axis;
  n.value = Mat::Zero(axis == 0 || axis == kAllAxes ? 1 : rows(a),
                      axis == 1 || axis == kAllAxes ? 1 : cols(a));
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a, int axis) {
  check_exists(a);
  if (axis != kAllAxes && axis != 0 && axis != 1)
    throw std::invalid_argument("mean axis must be -1, 0 or 1");
  Node n;
  n.op = Op::kMean;
  n.parents = {a};
  n.axis = axis;
  n.value = Mat::Zero(axis == 0 || axis == kAllAxes ? 1 : rows(a),
                      axis == 1 || axis == kAllAxes ? 1 : cols(a));
  return push(std::move(n));
}

NodeId Tape::concat(const std::vector<NodeId>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat needs at least one part");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat axis must be 0 or 1");
  for (NodeId p : parts) check_exists(p);
  int total = 0;
  const int other = axis == 0 ? cols(parts[0]) : rows(parts[0]);
  for (NodeId p : parts) {
    const int same = axis == 0 ? cols(p) : rows(p);
    if (same != other) throw std::invalid_argument("concat parts disagree off-axis");
    total += axis == 0 ? rows(p) : cols(p);
  }
  Node n;
  n.op = Op::kConcat;
  n.parents = parts;
  n.axis = axis;
  n.value = axis == 0 ? Mat::Zero(total, other) : Mat::Zero(other, total);
  return push(std::move(n));
}

NodeId Tape::slice(NodeId a, int row0, int nrows, int col0, int ncols) {
  check_exists(a);
  if (row0 < 0 || col0 < 0 || nrows < 1 || ncols < 1 || row0 + nrows > rows(a) ||
      col0 + ncols > cols(a))
    throw std::invalid_argument("slice bounds outside parent shape");
  Node n;
  n.op = Op::kSlice;
  n.parents = {a};
  n.row0 = row0;
  n.col0 = col0;
  n.value = Mat::Zero(nrows, ncols);
  return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::kTranspose;
  n.parents = {a};
  n.value = Mat::Zero(cols(a), rows(a));
  return push(std::move(n));
}

NodeId Tape::chol_solve_quadform(NodeId a, NodeId v) {
  check_exists(a);
  check_exists(v);
  if (rows(a) != cols(a)) throw std::invalid_argument("quadform matrix must be square");
  if (cols(v) != 1 || rows(v) != rows(a))
    throw std::invalid_argument("quadform vector shape must match the matrix");
  Node n;
  n.op = Op::kCholSolveQuadform;
  n.parents = {a, v};
  n.value = Mat::Zero(1, 1);
  return push(std::move(n));
}

NodeId Tape::logdet_spd(NodeId a) {
  check_exists(a);
  if (rows(a) != cols(a)) throw std::invalid_argument("logdet matrix must be square");
  Node n;
  n.op = Op::kLogdetSpd;
  n.parents = {a};
  n.value = Mat::Zero(1, 1);
  return push(std::move(n));
}

NodeId Tape::softplus(NodeId z) {
  NodeId a = abs(z);
  NodeId one = scalar(1.0);
  return add(relu(z), log(add(one, exp(neg(a)))));
}

void Tape::bind(NodeId id, const Mat& value) {
  check_exists(id);
  Node& n = nodes_[id];
  if (n.op != Op::kInput) throw std::invalid_argument("only inputs can be bound");
  if (value.rows() != n.value.rows() || value.cols() != n.value.cols()) {
    std::ostringstream ss;
    ss << "bind shape " << value.rows() << "x" << value.cols() << " differs from declared "
       << n.value.rows() << "x" << n.value.cols();
    throw std::invalid_argument(ss.str());
  }
  n.value = value;
  n.bound = true;
}

void Tape::eval(Node& n) {
  const auto& p = n.parents;
  auto V = [this](NodeId id) -> const Mat& { return nodes_[id].value; };
  switch (n.op) {
    case Op::kInput:
      if (!n.bound) throw std::logic_error("forward() reached an unbound input");
      break;
    case Op::kConstant:
      break;
    case Op::kAdd: {
      const int r = static_cast<int>(n.value.rows()), c = static_cast<int>(n.value.cols());
      n.value = expand(V(p[0]), r, c) + expand(V(p[1]), r, c);
      break;
    }
    case Op::kMul: {
      const int r = static_cast<int>(n.value.rows()), c = static_cast<int>(n.value.cols());
      n.value = expand(V(p[0]), r, c).cwiseProduct(expand(V(p[1]), r, c));
      break;
    }
    case Op::kMatmul:
      n.value.noalias() = V(p[0]) * V(p[1]);
      break;
    case Op::kTanh:
      n.value = V(p[0]).array().tanh().matrix();
      break;
    case Op::kSigmoid:
      n.value = (1.0 / (1.0 + (-V(p[0]).array()).exp())).matrix();
      break;
    case Op::kRelu:
      n.value = V(p[0]).cwiseMax(0.0);
      break;
    case Op::kExp:
      n.value = V(p[0]).array().exp().matrix();
      break;
    case Op::kLog:
      n.value = V(p[0]).array().log().matrix();
      break;
    case Op::kSum:
      if (n.axis == kAllAxes)
        n.value(0, 0) = V(p[0]).sum();
      else if (n.axis == 0)
        n.value = V(p[0]).colwise().sum();
      else
        n.value = V(p[0]).rowwise().sum();
      break;
    case Op::kMean:
      if (n.axis == kAllAxes)
        n.value(0, 0) = V(p[0]).mean();
      else if (n.axis == 0)
        n.value = V(p[0]).colwise().mean();
      else
        n.value = V(p[0]).rowwise().mean();
      break;
    case Op::kConcat: {
      int at = 0;
      for (NodeId q : p) {
        const Mat& v = V(q);
        if (n.axis == 0) {
          n.value.middleRows(at, v.rows()) = v;
          at += static_cast<int>(v.rows());
        } else {
          n.value.middleCols(at, v.cols()) = v;
          at += static_cast<int>(v.cols());
        }
      }
      break;
    }
    case Op::kSlice:
      n.value = V(p[0]).block(n.row0, n.col0, n.value.rows(), n.value.cols());
      break;
    case Op::kTranspose:
      n.value = V(p[0]).transpose();
      break;
    case Op::kCholSolveQuadform: {
      auto llt = chol_spd(V(p[0]));
      n.aux = llt.solve(V(p[1]));  // u = A^{-1} v
      n.value(0, 0) = V(p[1]).col(0).dot(n.aux.col(0));
      break;
    }
    case Op::kLogdetSpd: {
      auto llt = chol_spd(V(p[0]));
      n.value(0, 0) = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
      const long d = V(p[0]).rows();
      n.aux = llt.solve(Mat::Identity(d, d));
      break;
    }
  }
}

const Mat& Tape::forward(NodeId root) {
  check_exists(root);
  for (NodeId i = 0; i <= root; ++i) eval(nodes_[i]);
  return nodes_[root].value;
}

void Tape::accumulate(int idx) {
  Node& n = nodes_[idx];
  if (n.parents.empty()) return;
  if (n.grad.isZero(0.0)) return;
  const Mat& g = n.grad;
  auto P = [this](NodeId id) -> Node& { return nodes_[id]; };
  switch (n.op) {
    case Op::kInput:
    case Op::kConstant:
      break;
    case Op::kAdd:
      for (int k = 0; k < 2; ++k) {
        Node& par = P(n.parents[k]);
        par.grad += reduce_to(g, static_cast<int>(par.value.rows()),
                              static_cast<int>(par.value.cols()));
      }
      break;
    case Op::kMul: {
      const int r = static_cast<int>(n.value.rows()), c = static_cast<int>(n.value.cols());
      Node& a = P(n.parents[0]);
      Node& b = P(n.parents[1]);
      a.grad += reduce_to(g.cwiseProduct(expand(b.value, r, c)),
                          static_cast<int>(a.value.rows()), static_cast<int>(a.value.cols()));
      b.grad += reduce_to(g.cwiseProduct(expand(a.value, r, c)),
                          static_cast<int>(b.value.rows()), static_cast<int>(b.value.cols()));
      break;
    }
    case Op::kMatmul:
      P(n.parents[0]).grad.noalias() += g * P(n.parents[1]).value.transpose();
      P(n.parents[1]).grad.noalias() += P(n.parents[0]).value.transpose() * g;
      break;
    case Op::kTanh:
      P(n.parents[0]).grad.array() += g.array() * (1.0 - n.value.array().square());
      break;
    case Op::kSigmoid:
      P(n.parents[0]).grad.array() += g.array() * n.value.array() * (1.0 - n.value.array());
      break;
    case Op::kRelu:
      P(n.parents[0]).grad.array() +=
          g.array() * (P(n.parents[0]).value.array() > 0.0).cast<double>();
      break;
    case Op::kExp:
      P(n.parents[0]).grad.array() += g.array() * n.value.array();
      break;
    case Op::kLog:
      P(n.parents[0]).grad.array() += g.array() / P(n.parents[0]).value.array();
      break;
    case Op::kSum: {
      Node& a = P(n.parents[0]);
      a.grad += expand(g, static_cast<int>(a.value.rows()), static_cast<int>(a.value.cols()));
      break;
    }
    case Op::kMean: {
      Node& a = P(n.parents[0]);
      double scale = 0.0;
      if (n.axis == kAllAxes)
        scale = 1.0 / static_cast<double>(a.value.size());
      else if (n.axis == 0)
        scale = 1.0 / static_cast<double>(a.value.rows());
      else
        scale = 1.0 / static_cast<double>(a.value.cols());
      a.grad += scale * expand(g, static_cast<int>(a.value.rows()),
                               static_cast<int>(a.value.cols()));
      break;
    }
    case Op::kConcat: {
      int at = 0;
      for (NodeId q : n.parents) {
        Node& par = P(q);
        if (n.axis == 0) {
          par.grad += g.middleRows(at, par.value.rows());
          at += static_cast<int>(par.value.rows());
        } else {
          par.grad += g.middleCols(at, par.value.cols());
          at += static_cast<int>(par.value.cols());
        }
      }
      break;
    }
    case Op::kSlice:
      P(n.parents[0]).grad.block(n.row0, n.col0, n.value.rows(), n.value.cols()) += g;
      break;
    case Op::kTranspose:
      P(n.parents[0]).grad += g.transpose();
      break;
    case Op::kCholSolveQuadform: {
      const double gs = g(0, 0);
      P(n.parents[0]).grad.noalias() += -gs * (n.aux * n.aux.transpose());
      P(n.parents[1]).grad += 2.0 * gs * n.aux;
      break;
    }
    case Op::kLogdetSpd:
      P(n.parents[0]).grad += g(0, 0) * n.aux;
      break;
  }
}

void Tape::backward(NodeId root) {
  check_exists(root);
  const Node& r = nodes_[root];
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw std::logic_error("backward() needs a scalar root");
  for (NodeId i = 0; i <= root; ++i) nodes_[i].grad.setZero();
  nodes_[root].grad(0, 0) = 1.0;
  for (NodeId i = root; i >= 0; --i) accumulate(i);
}

}  // namespace graph

Mat& ParamStore::create(const std::string& name, int rows, int cols) {
  return create(name, Mat::Zero(rows, cols));
}

Mat& ParamStore::create(const std::string& name, Mat init) {
  if (slots_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Slot s;
  s.m1 = Mat::Zero(init.rows(), init.cols());
  s.m2 = Mat::Zero(init.rows(), init.cols());
  s.value = std::move(init);
  order_.push_back(name);
  return slots_.emplace(name, std::move(s)).first->second.value;
}

bool ParamStore::has(const std::string& name) const { return slots_.count(name) > 0; }

Mat& ParamStore::get(const std::string& name) {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second.value;
}

const Mat& ParamStore::get(const std::string& name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second.value;
}

namespace {

void write_array(std::ostream& out, const Mat& m) {
  for (long r = 0; r < m.rows(); ++r) {
    for (long c = 0; c < m.cols(); ++c) {
      if (c) out << ' ';
      out << format_hex(m(r, c));
    }
    out << '\n';
  }
}

Mat read_array(std::istream& in, long rows, long cols) {
  Mat m(rows, cols);
  std::string tok;
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      if (!(in >> tok)) throw std::runtime_error("parameter file truncated");
      m(r, c) = parse_hex(tok);
    }
  return m;
}

}  // namespace

void ParamStore::save(const std::string& path) const {
  std::ostringstream out;
  out << "smsdkl-params-v1\n";
  out << "step " << step_ << '\n';
  out << "count " << order_.size() << '\n';
  for (const auto& name : order_) {
    const Slot& s = slots_.at(name);
    out << "param " << name << ' ' << s.value.rows() << ' ' << s.value.cols() << '\n';
    write_array(out, s.value);
    write_array(out, s.m1);
    write_array(out, s.m2);
  }
  atomic_write(path, out.str());
}

ParamStore ParamStore::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open parameter file: " + path);
  std::string magic;
  in >> magic;
  if (magic != "smsdkl-params-v1") throw std::runtime_error("not a parameter file: " + path);
  std::string key;
  std::int64_t step = 0;
  size_t count = 0;
  in >> key >> step;
  if (key != "step") throw std::runtime_error("malformed parameter file: " + path);
  in >> key >> count;
  if (key != "count") throw std::runtime_error("malformed parameter file: " + path);
  ParamStore store;
  store.step_ = step;
  for (size_t i = 0; i < count; ++i) {
    std::string name;
    long rows = 0, cols = 0;
    in >> key >> name >> rows >> cols;
    if (key != "param" || rows < 0 || cols < 0)
      throw std::runtime_error("malformed parameter file: " + path);
    Slot s;
    s.value = read_array(in, rows, cols);
    s.m1 = read_array(in, rows, cols);
    s.m2 = read_array(in, rows, cols);
    store.order_.push_back(name);
    store.slots_.emplace(name, std::move(s));
  }
  return store;
}

bool adam_step(ParamStore& store, const std::map<std::string, Mat>& grads, double lr,
               std::string* diag) {
  for (const auto& [name, g] : grads) {
    auto it = store.slots_.find(name);
    if (it == store.slots_.end())
      throw std::invalid_argument("gradient for unknown parameter: " + name);
    const Mat& v = it->second.value;
    if (g.rows() != v.rows() || g.cols() != v.cols())
      throw std::invalid_argument("gradient shape mismatch for parameter: " + name);
    if (!g.allFinite()) {
      if (diag) *diag = "non-finite gradient for parameter: " + name;
      return false;
    }
  }
  store.step_ += 1;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(store.step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(store.step_));
  for (const auto& [name, g] : grads) {
    auto& s = store.slots_.find(name)->second;
    s.m1 = b1 * s.m1 + (1.0 - b1) * g;
    s.m2.array() = b2 * s.m2.array() + (1.0 - b2) * g.array().square();
    s.value.array() -= lr * (s.m1.array() / c1) / ((s.m2.array() / c2).sqrt() + eps);
  }
  return true;
}

double grad_check(const DiffFn& fn, const ParamStore& params, double eps) {
  EvalResult base = fn(params);
  double worst = 0.0;
  ParamStore probe = params;
  for (const auto& name : params.names()) {
    Mat& p = probe.get(name);
    const Mat* analytic = nullptr;
    auto it = base.grads.find(name);
    if (it != base.grads.end()) analytic = &it->second;
    for (long r = 0; r < p.rows(); ++r)
      for (long c = 0; c < p.cols(); ++c) {
        const double keep = p(r, c);
        p(r, c) = keep + eps;
        const double fp = fn(probe).value;
        p(r, c) = keep - eps;
        const double fm = fn(probe).value;
        p(r, c) = keep;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic ? (*analytic)(r, c) : 0.0;
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
      }
  }
  return worst;
}

}  // namespace smsdkl
