#include "smsdkl/feature_net.hpp"

#include <algorithm>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace smsdkl {

FeatureNetDims FeatureNetDims::from_config(const RunConfig& cfg, int obs_width, int x_width) {
  FeatureNetDims d;
  d.input_width = obs_width + 1;
  d.x_width = x_width;
  d.lstm_hidden = cfg.lstm_hidden;
  d.set_width = cfg.set_width;
  d.mlp_width = cfg.mlp_width;
  d.embed_dim = cfg.embed_dim;
  d.feature_dim = cfg.feature_dim;
  return d;
}

std::vector<std::string> feature_net_param_names() {
  return {"lstm.wx", "lstm.wh", "lstm.b",  "set.w1",  "set.b1",  "set.w2",  "set.b2",
          "set.w3",  "set.b3",  "set.w4",  "set.b4",  "head.w1", "head.b1", "head.w2",
          "head.b2", "head.w3", "head.b3"};
}

namespace {

Mat uniform_init(int rows, int cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

inline Eigen::ArrayXd sigmoid(const Eigen::ArrayXd& x) { return 1.0 / (1.0 + (-x).exp()); }

}  // namespace

void init_feature_net(ParamStore& store, const FeatureNetDims& d, Rng& rng) {
  const int H = d.lstm_hidden, W = d.set_width, M = d.mlp_width;
  store.create("lstm.wx", uniform_init(4 * H, d.input_width, rng));
  store.create("lstm.wh", uniform_init(4 * H, H, rng));
  Mat b = Mat::Zero(4 * H, 1);
  b.block(H, 0, H, 1).setOnes();  // forget gate opens at the start
  store.create("lstm.b", std::move(b));

  store.create("set.w1", uniform_init(W, H, rng));
  store.create("set.b1", W, 1);
  store.create("set.w2", uniform_init(W, W, rng));
  store.create("set.b2", W, 1);
  store.create("set.w3", uniform_init(W, W, rng));
  store.create("set.b3", W, 1);
  store.create("set.w4", uniform_init(d.embed_dim, W, rng));
  store.create("set.b4", d.embed_dim, 1);

  store.create("head.w1", uniform_init(M, d.embed_dim + d.x_width, rng));
  store.create("head.b1", M, 1);
  store.create("head.w2", uniform_init(M, M, rng));
  store.create("head.b2", M, 1);
  store.create("head.w3", uniform_init(d.feature_dim, M, rng));
  store.create("head.b3", d.feature_dim, 1);
}

Eigen::VectorXd encode_instance(const ParamStore& store, const FeatureNetDims& d,
                                const Eigen::Ref<const Mat>& obs,
                                const Eigen::Ref<const Eigen::VectorXd>& labels) {
  const int len = static_cast<int>(obs.rows());
  if (len < 1) throw std::invalid_argument("cannot encode an empty instance");
  if (obs.cols() + 1 != d.input_width || labels.size() != len)
    throw std::invalid_argument("instance width does not match the encoder");
  const int H = d.lstm_hidden;
  const Mat& wx = store.get("lstm.wx");
  const Mat& wh = store.get("lstm.wh");
  const Eigen::VectorXd b = store.get("lstm.b").col(0);

  Eigen::VectorXd h = Eigen::VectorXd::Zero(H), c = Eigen::VectorXd::Zero(H);
  Eigen::VectorXd u(d.input_width), pre(4 * H);
  for (int tau = 0; tau < len; ++tau) {
    u.head(d.input_width - 1) = obs.row(tau).transpose();
    u[d.input_width - 1] = labels[tau];
    pre.noalias() = wx * u;
    pre.noalias() += wh * h;
    pre += b;
    const auto ig = sigmoid(pre.segment(0, H).array());
    const auto fg = sigmoid(pre.segment(H, H).array());
    const auto gg = pre.segment(2 * H, H).array().tanh();
    const auto og = sigmoid(pre.segment(3 * H, H).array());
    c = (fg * c.array() + ig * gg).matrix();
    h = (og * c.array().tanh()).matrix();
  }
  return h;
}

Mat encode_batch_serial(const ParamStore& store, const FeatureNetDims& d,
                        const Filtration& filt, const std::vector<int>& subset) {
  Mat out(static_cast<int>(subset.size()), d.lstm_hidden);
  for (int k = 0; k < static_cast<int>(subset.size()); ++k)
    out.row(k) = encode_instance(store, d, filt.obs(subset[k]), filt.labels(subset[k]));
  return out;
}

Mat encode_batch_parallel(const ParamStore& store, const FeatureNetDims& d,
                          const Filtration& filt, const std::vector<int>& subset) {
  const int n = static_cast<int>(subset.size());
  Mat out(n, d.lstm_hidden);
#pragma omp parallel for schedule(static)
  for (int k = 0; k < n; ++k)
    out.row(k) = encode_instance(store, d, filt.obs(subset[k]), filt.labels(subset[k]));
  return out;
}

Eigen::VectorXd encode_set(const ParamStore& store, const FeatureNetDims& d, const Mat& h) {
  if (h.rows() < 1 || h.cols() != d.lstm_hidden)
    throw std::invalid_argument("set encoder needs a nonempty I x H matrix");
  const Mat a1 = ((h * store.get("set.w1").transpose()).rowwise() +
                  store.get("set.b1").col(0).transpose())
                     .cwiseMax(0.0);
  const Mat a2 = ((a1 * store.get("set.w2").transpose()).rowwise() +
                  store.get("set.b2").col(0).transpose())
                     .cwiseMax(0.0);
  const Eigen::VectorXd pooled = a2.colwise().mean().transpose();
  const Eigen::VectorXd a3 =
      (store.get("set.w3") * pooled + store.get("set.b3").col(0)).cwiseMax(0.0);
  return store.get("set.w4") * a3 + store.get("set.b4").col(0);
}

Eigen::VectorXd feature_map(const ParamStore& store, const FeatureNetDims& d,
                            const Eigen::VectorXd& z, const Eigen::VectorXd& x_norm) {
  if (z.size() != d.embed_dim || x_norm.size() != d.x_width)
    throw std::invalid_argument("feature_map input widths do not match");
  Eigen::VectorXd u(d.embed_dim + d.x_width);
  u << z, x_norm;
  const Eigen::VectorXd a1 =
      (store.get("head.w1") * u + store.get("head.b1").col(0)).array().tanh().matrix();
  const Eigen::VectorXd a2 =
      (store.get("head.w2") * a1 + store.get("head.b2").col(0)).array().tanh().matrix();
  return (store.get("head.w3") * a2 + store.get("head.b3").col(0)).array().tanh().matrix();
}

Mat feature_matrix(const ParamStore& store, const FeatureNetDims& d, const Eigen::VectorXd& z,
                   const Mat& x_rows) {
  Mat g(x_rows.rows(), d.feature_dim);
  for (int n = 0; n < x_rows.rows(); ++n)
    g.row(n) = feature_map(store, d, z, x_rows.row(n).transpose()).transpose();
  return g;
}

std::vector<int> encoding_subset(int total, int cap, Rng& rng) {
  if (total <= cap) {
    std::vector<int> all(total);
    for (int i = 0; i < total; ++i) all[i] = i;
    return all;
  }
  return rng.sample_without_replacement(total, cap);
}

std::map<std::string, graph::NodeId> add_param_inputs(graph::Tape& tape,
                                                      const ParamStore& store,
                                                      const std::vector<std::string>& names) {
  std::map<std::string, graph::NodeId> nodes;
  for (const auto& name : names) {
    const Mat& v = store.get(name);
    nodes[name] = tape.input(static_cast<int>(v.rows()), static_cast<int>(v.cols()));
  }
  return nodes;
}

void bind_params(graph::Tape& tape, const std::map<std::string, graph::NodeId>& nodes,
                 const ParamStore& store) {
  for (const auto& [name, id] : nodes) tape.bind(id, store.get(name));
}

std::map<std::string, Mat> collect_grads(const graph::Tape& tape,
                                         const std::map<std::string, graph::NodeId>& nodes) {
  std::map<std::string, Mat> grads;
  for (const auto& [name, id] : nodes) grads[name] = tape.grad(id);
  return grads;
}

graph::NodeId build_embedding(graph::Tape& tape,
                              const std::map<std::string, graph::NodeId>& params,
                              const FeatureNetDims& d, const Filtration& filt,
                              const std::vector<int>& subset) {
  if (subset.empty()) throw std::invalid_argument("embedding needs at least one instance");
  const int I = static_cast<int>(subset.size());
  const int H = d.lstm_hidden;
  int max_steps = 0;
  for (int i : subset) max_steps = std::max(max_steps, filt.steps(i));

  using graph::NodeId;
  const NodeId wxT = tape.transpose(params.at("lstm.wx"));
  const NodeId whT = tape.transpose(params.at("lstm.wh"));
  const NodeId bT = tape.transpose(params.at("lstm.b"));

  NodeId h = tape.constant(Mat::Zero(I, H));
  NodeId c = tape.constant(Mat::Zero(I, H));
  for (int tau = 0; tau < max_steps; ++tau) {
    Mat x = Mat::Zero(I, d.input_width);
    Eigen::VectorXd mask = Eigen::VectorXd::Zero(I);
    for (int k = 0; k < I; ++k) {
      if (tau < filt.steps(subset[k])) {
        x.row(k).head(d.input_width - 1) = filt.obs(subset[k]).row(tau);
        x(k, d.input_width - 1) = filt.labels(subset[k])[tau];
        mask[k] = 1.0;
      }
    }
    const NodeId pre =
        tape.add(tape.add(tape.matmul(tape.constant(x), wxT), tape.matmul(h, whT)), bT);
    const NodeId ig = tape.sigmoid(tape.slice(pre, 0, I, 0, H));
    const NodeId fg = tape.sigmoid(tape.slice(pre, 0, I, H, H));
    const NodeId gg = tape.tanh(tape.slice(pre, 0, I, 2 * H, H));
    const NodeId og = tape.sigmoid(tape.slice(pre, 0, I, 3 * H, H));
    const NodeId c_new = tape.add(tape.mul(fg, c), tape.mul(ig, gg));
    const NodeId h_new = tape.mul(og, tape.tanh(c_new));
    if (mask.minCoeff() >= 1.0) {
      c = c_new;
      h = h_new;
    } else {
      const NodeId m = tape.constant(mask);
      const NodeId keep = tape.constant((1.0 - mask.array()).matrix());
      c = tape.add(tape.mul(m, c_new), tape.mul(keep, c));
      h = tape.add(tape.mul(m, h_new), tape.mul(keep, h));
    }
  }

  auto layer = [&](NodeId in, const char* w, const char* b, bool rectify) {
    NodeId out = tape.add(tape.matmul(in, tape.transpose(params.at(w))),
                          tape.transpose(params.at(b)));
    return rectify ? tape.relu(out) : out;
  };
  const NodeId a1 = layer(h, "set.w1", "set.b1", true);
  const NodeId a2 = layer(a1, "set.w2", "set.b2", true);
  const NodeId pooled = tape.mean(a2, 0);
  const NodeId a3 = layer(pooled, "set.w3", "set.b3", true);
  return layer(a3, "set.w4", "set.b4", false);
}

graph::NodeId build_feature_rows(graph::Tape& tape,
                                 const std::map<std::string, graph::NodeId>& params,
                                 const FeatureNetDims& d, graph::NodeId z,
                                 const Mat& x_rows) {
  if (x_rows.rows() < 1 || x_rows.cols() != d.x_width)
    throw std::invalid_argument("feature rows need an N x x_width input block");
  const int N = static_cast<int>(x_rows.rows());
  using graph::NodeId;
  const NodeId zrep = tape.matmul(tape.constant(Mat::Ones(N, 1)), z);
  const NodeId u = tape.concat({zrep, tape.constant(x_rows)}, 1);
  auto layer = [&](NodeId in, const char* w, const char* b) {
    return tape.tanh(tape.add(tape.matmul(in, tape.transpose(params.at(w))),
                              tape.transpose(params.at(b))));
  };
  const NodeId a1 = layer(u, "head.w1", "head.b1");
  const NodeId a2 = layer(a1, "head.w2", "head.b2");
  return layer(a2, "head.w3", "head.b3");
}

}  // namespace smsdkl
