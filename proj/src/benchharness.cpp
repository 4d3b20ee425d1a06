#include "smsdkl/benchharness.hpp"

#include <omp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "smsdkl/baselines.hpp"
#include "smsdkl/dkl_surrogate.hpp"
#include "smsdkl/feature_net.hpp"
#include "smsdkl/io.hpp"

namespace fs = std::filesystem;

namespace smsdkl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Two-pass Pearson correlation; returns false when either side has zero
// variance (the undefined case callers must handle).
bool pearson(const std::vector<double>& xs, const std::vector<double>& ys,
             double* out) {
  const int n = static_cast<int>(xs.size());
  if (n < 2) return false;
  double mx = 0.0, my = 0.0;
  for (int i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (int i = 0; i < n; ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return false;
  *out = sxy / std::sqrt(sxx * syy);
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic family

HyperparamSpace synth_space() {
  return HyperparamSpace({Dimension::continuous("x1", 0.0, 1.0),
                          Dimension::continuous("x2", 0.0, 1.0)});
}

double SynthFamily::value(int t, const HyperparamVector& x) const {
  if (t < 1 || t > steps)
    throw std::invalid_argument("SynthFamily::value: step out of range");
  const Eigen::VectorXd xn = normalize(space, x);
  double out = 0.0;
  for (int j = 0; j < centers.rows(); ++j) {
    const double d2 = (xn - centers.row(j).transpose()).squaredNorm();
    out += coeff(t - 1, j) * signs[j] *
           std::exp(-d2 / (2.0 * widths[j] * widths[j]));
  }
  return out;
}

std::vector<double> SynthFamily::evaluate(const HyperparamVector& x) const {
  std::vector<double> y(steps);
  std::uint64_t h = splitmix64(seed ^ 0x5851f42d4c957f2dull);
  for (const double v : x.values)
    h = splitmix64(h ^ std::bit_cast<std::uint64_t>(v));
  for (int t = 1; t <= steps; ++t) {
    y[t - 1] = value(t, x);
    if (noise_sd > 0.0) {
      Rng noise(splitmix64(h ^ static_cast<std::uint64_t>(t)));
      y[t - 1] += noise_sd * noise.normal();
    }
  }
  return y;
}

SynthFamily synth_family(std::uint64_t seed, int steps, double rho,
                         const HyperparamSpace& space, int bumps) {
  if (steps < 1) throw std::invalid_argument("synth_family: steps must be >= 1");
  if (bumps < 1) throw std::invalid_argument("synth_family: bumps must be >= 1");
  if (!(rho >= 0.0 && rho <= 1.0))
    throw std::invalid_argument("synth_family: rho must be in [0, 1]");
  if (space.size() == 0) throw std::invalid_argument("synth_family: empty space");

  SynthFamily fam;
  fam.steps = steps;
  fam.rho = rho;
  fam.noise_sd = 0.01;
  fam.space = space;
  fam.seed = seed;

  Rng rng(seed);
  const int w = space.normalized_width();
  fam.centers.resize(bumps, w);
  for (int j = 0; j < bumps; ++j)
    for (int k = 0; k < w; ++k) fam.centers(j, k) = rng.uniform();
  // Width shrinks as the bump count grows (a no-op at the default 12), so a
  // denser family adds resolvable detail instead of piling up overlap.
  const double wf = std::sqrt(12.0 / bumps);
  fam.widths.resize(bumps);
  for (int j = 0; j < bumps; ++j) fam.widths[j] = wf * rng.uniform(0.08, 0.25);
  fam.signs.resize(bumps);
  for (int j = 0; j < bumps; ++j) fam.signs[j] = rng.uniform() < 0.5 ? -1.0 : 1.0;

  // AR(1) weight paths. The innovation is drawn even at rho=1 so the stream
  // position (and therefore the bump layout for a given seed) is the same
  // for every rho.
  fam.coeff.resize(steps, bumps);
  const double fresh = std::sqrt(1.0 - rho * rho);
  for (int j = 0; j < bumps; ++j) fam.coeff(0, j) = rng.normal();
  for (int t = 1; t < steps; ++t)
    for (int j = 0; j < bumps; ++j)
      fam.coeff(t, j) = rho * fam.coeff(t - 1, j) + fresh * rng.normal();

  fam.oracle_value.resize(steps);
  fam.oracle_x.resize(steps);
  for (int t = 1; t <= steps; ++t) {
    const GridMax g = grid_eval_max_serial(fam, t, 10000);
    fam.oracle_value[t - 1] = g.value;
    fam.oracle_x[t - 1] = g.x;
  }
  return fam;
}

namespace {

// Per-dimension grid values: categorical and integer dims are enumerated,
// continuous dims get an even subdivision sized so the whole grid reaches
// min_points.
std::vector<std::vector<double>> grid_axes(const HyperparamSpace& space,
                                           int min_points) {
  const int n = space.size();
  std::vector<std::vector<double>> axes(n);
  double fixed = 1.0;
  int free_dims = 0;
  for (int i = 0; i < n; ++i) {
    const auto& d = space.dims()[i];
    if (d.kind == DimKind::kCategorical) {
      for (int v = 0; v < d.levels; ++v) axes[i].push_back(v);
      fixed *= d.levels;
    } else if (d.kind == DimKind::kInteger && d.hi - d.lo + 1 <= 512.0) {
      for (double v = d.lo; v <= d.hi; v += 1.0) axes[i].push_back(v);
      fixed *= axes[i].size();
    } else {
      ++free_dims;
    }
  }
  if (free_dims > 0) {
    int g = std::max(
        2, static_cast<int>(std::ceil(
               std::pow(std::max(1.0, min_points / fixed), 1.0 / free_dims))));
    for (int i = 0; i < n; ++i) {
      if (!axes[i].empty()) continue;
      const auto& d = space.dims()[i];
      for (int v = 0; v < g; ++v) {
        double x = d.lo + (d.hi - d.lo) * v / (g - 1);
        if (d.kind == DimKind::kInteger) x = std::round(x);
        axes[i].push_back(x);
      }
      if (d.kind == DimKind::kInteger)
        axes[i].erase(std::unique(axes[i].begin(), axes[i].end()),
                      axes[i].end());
    }
  }
  return axes;
}

HyperparamVector grid_point(const std::vector<std::vector<double>>& axes,
                            long flat) {
  HyperparamVector x;
  x.values.resize(axes.size());
  for (int i = static_cast<int>(axes.size()) - 1; i >= 0; --i) {
    const long m = static_cast<long>(axes[i].size());
    x.values[i] = axes[i][flat % m];
    flat /= m;
  }
  return x;
}

template <bool kParallel>
GridMax grid_eval_max_impl(const SynthFamily& fam, int t, int min_points) {
  const auto axes = grid_axes(fam.space, min_points);
  long total = 1;
  for (const auto& a : axes) total *= static_cast<long>(a.size());

  // Ties resolve to the lowest flat index, which also makes the parallel
  // split order-independent.
  double best = -std::numeric_limits<double>::infinity();
  long best_idx = 0;
  if constexpr (kParallel) {
    const int slots = omp_get_max_threads();
    std::vector<double> vals(slots, -std::numeric_limits<double>::infinity());
    std::vector<long> idxs(slots, 0);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < total; ++i) {
      const int s = omp_get_thread_num();
      const double v = fam.value(t, grid_point(axes, i));
      if (v > vals[s] || (v == vals[s] && i < idxs[s])) {
        vals[s] = v;
        idxs[s] = i;
      }
    }
    for (int s = 0; s < slots; ++s)
      if (vals[s] > best || (vals[s] == best && idxs[s] < best_idx)) {
        best = vals[s];
        best_idx = idxs[s];
      }
  } else {
    for (long i = 0; i < total; ++i) {
      const double v = fam.value(t, grid_point(axes, i));
      if (v > best) {
        best = v;
        best_idx = i;
      }
    }
  }
  return {best, grid_point(axes, best_idx)};
}

}  // namespace

GridMax grid_eval_max_serial(const SynthFamily& fam, int t, int min_points) {
  return grid_eval_max_impl<false>(fam, t, min_points);
}

GridMax grid_eval_max_parallel(const SynthFamily& fam, int t, int min_points) {
  return grid_eval_max_impl<true>(fam, t, min_points);
}

MultiStepProblem synth_problem(const SynthFamily& fam) {
  MultiStepProblem prob;
  prob.steps = fam.steps;
  prob.eval =
      [fam](const HyperparamVector& x) -> std::optional<std::vector<double>> {
    return fam.evaluate(x);
  };
  return prob;
}

// ---------------------------------------------------------------------------
// Drifting dataset

SequenceDataset synth_dataset(std::uint64_t seed, int steps,
                              const DriftProfile& p) {
  if (steps < 1) throw std::invalid_argument("synth_dataset: steps must be >= 1");
  if (p.instances < 1 || p.width < 1)
    throw std::invalid_argument("synth_dataset: bad profile sizes");
  if (!(p.ar_coeff >= 0.0 && p.ar_coeff < 1.0))
    throw std::invalid_argument("synth_dataset: ar_coeff must be in [0, 1)");
  if (p.noise_sd < 0.0)
    throw std::invalid_argument("synth_dataset: negative noise");

  Rng rng(seed);
  const int w = p.width;
  Eigen::VectorXd drift_dir(w), jump_dir(w), wa(w), wb(w);
  for (int k = 0; k < w; ++k) drift_dir[k] = rng.normal();
  for (int k = 0; k < w; ++k) jump_dir[k] = rng.normal();
  const double wscale = 2.0 / std::sqrt(static_cast<double>(w));
  for (int k = 0; k < w; ++k) wa[k] = wscale * rng.normal();
  for (int k = 0; k < w; ++k) wb[k] = wscale * rng.normal();
  const double bias = 0.5 * rng.normal();

  const double stationary_sd =
      p.noise_sd / std::sqrt(1.0 - p.ar_coeff * p.ar_coeff);
  constexpr double kHalfPi = 1.5707963267948966;

  std::vector<Instance> instances;
  instances.reserve(p.instances);
  for (int i = 0; i < p.instances; ++i) {
    Instance inst;
    inst.obs.resize(steps, w);
    inst.labels.resize(steps);
    Eigen::VectorXd state(w);
    for (int k = 0; k < w; ++k) state[k] = stationary_sd * rng.normal();
    for (int t = 1; t <= steps; ++t) {
      if (t >= 2) {
        if (t == p.break_step) {
          for (int k = 0; k < w; ++k) state[k] = stationary_sd * rng.normal();
        } else {
          for (int k = 0; k < w; ++k)
            state[k] = p.ar_coeff * state[k] + p.noise_sd * rng.normal();
        }
      }
      const bool past_break = p.break_step > 0 && t >= p.break_step;
      for (int k = 0; k < w; ++k) {
        double mean = p.mean_drift * (t - 1) * drift_dir[k];
        if (past_break) mean += p.break_size * jump_dir[k];
        inst.obs(t - 1, k) = mean + state[k];
      }
      double theta = p.label_drift * (t - 1);
      if (past_break) theta += kHalfPi;
      const Eigen::VectorXd wt = std::cos(theta) * wa + std::sin(theta) * wb;
      const double logit = wt.dot(inst.obs.row(t - 1).transpose()) + bias;
      const double prob = 1.0 / (1.0 + std::exp(-logit));
      inst.labels[t - 1] = rng.uniform() < prob ? 1.0 : 0.0;
    }
    instances.push_back(std::move(inst));
  }
  return SequenceDataset(std::move(instances), steps, w);
}

// ---------------------------------------------------------------------------
// Inner learner

HyperparamSpace inner_space() {
  return HyperparamSpace({
      Dimension::integer("hidden", 2, 16),
      Dimension::integer("epochs", 0, 30),
      Dimension::integer("batch", 4, 64),
      Dimension::integer("lr_exp", -4, -1),
      Dimension::integer("wd_exp", -8, -1),
      Dimension::continuous("dropout", 0.0, 0.6),
  });
}

InnerLearnerTask inner_task(std::uint64_t seed, int steps,
                            const DriftProfile& profile) {
  if (profile.instances < 8)
    throw std::invalid_argument("inner_task: needs at least 8 instances");
  const SequenceDataset ds = synth_dataset(seed, steps, profile);
  const int n_train = ds.size() * 3 / 4;
  std::vector<Instance> train(ds.instances().begin(),
                              ds.instances().begin() + n_train);
  std::vector<Instance> valid(ds.instances().begin() + n_train,
                              ds.instances().end());
  InnerLearnerTask task;
  task.train = SequenceDataset(std::move(train), steps, ds.feature_width());
  task.valid = SequenceDataset(std::move(valid), steps, ds.feature_width());
  task.space = inner_space();
  task.steps = steps;
  return task;
}

namespace {

// One minibatch of the classifier loss as a reusable graph: parameters and
// dropout masks are bound per update, the batch data is baked in.
struct BatchGraph {
  graph::Tape tape;
  std::map<std::string, graph::NodeId> params;
  std::vector<graph::NodeId> masks;  // one per step; empty at dropout 0
  graph::NodeId root = 0;
  int rows = 0;
};

BatchGraph build_batch_graph(const SequenceDataset& train, int i0, int i1,
                             const ParamStore& store, double dropout,
                             double weight_decay) {
  BatchGraph g;
  auto& tape = g.tape;
  const int rows = i1 - i0;
  const int w = train.feature_width();
  const int steps = train.max_steps();
  g.rows = rows;

  for (const auto& name : store.names()) {
    const Mat& p = store.get(name);
    g.params[name] = tape.input(static_cast<int>(p.rows()),
                                static_cast<int>(p.cols()));
  }
  const graph::NodeId ones = tape.constant(Mat::Ones(rows, 1));
  const graph::NodeId bias_row =
      tape.matmul(ones, tape.transpose(g.params.at("rnn.b")));
  graph::NodeId h = tape.constant(
      Mat::Zero(rows, store.get("rnn.wh").rows()));

  graph::NodeId total = tape.scalar(0.0);
  for (int t = 0; t < steps; ++t) {
    Mat xt(rows, w), yt(rows, 1);
    for (int i = 0; i < rows; ++i) {
      xt.row(i) = train.instance(i0 + i).obs.row(t);
      yt(i, 0) = train.instance(i0 + i).labels[t];
    }
    graph::NodeId x = tape.constant(xt);
    if (dropout > 0.0) {
      const graph::NodeId m = tape.input(rows, w);
      g.masks.push_back(m);
      x = tape.mul(x, m);
    }
    const graph::NodeId pre = tape.add(
        tape.add(tape.matmul(x, tape.transpose(g.params.at("rnn.wx"))),
                 tape.matmul(h, tape.transpose(g.params.at("rnn.wh")))),
        bias_row);
    h = tape.tanh(pre);
    const graph::NodeId z =
        tape.add(tape.matmul(h, tape.transpose(g.params.at("out.v"))),
                 tape.matmul(ones, g.params.at("out.c")));
    total = tape.add(total, tape.sum(tape.bce_logits(z, tape.constant(yt))));
  }
  graph::NodeId loss =
      tape.mul(total, tape.scalar(1.0 / (static_cast<double>(rows) * steps)));
  if (weight_decay > 0.0) {
    graph::NodeId l2 = tape.scalar(0.0);
    for (const auto& [name, node] : g.params)
      l2 = tape.add(l2, tape.sum(tape.square(node)));
    loss = tape.add(loss, tape.mul(l2, tape.scalar(weight_decay)));
  }
  g.root = loss;
  return g;
}

// Plain forward pass (no dropout), scoring every instance at every step.
Mat classifier_logits(const SequenceDataset& ds, const ParamStore& store) {
  const Mat& wx = store.get("rnn.wx");
  const Mat& wh = store.get("rnn.wh");
  const Mat& b = store.get("rnn.b");
  const Mat& v = store.get("out.v");
  const double c = store.get("out.c")(0, 0);
  Mat logits(ds.size(), ds.max_steps());
  for (int i = 0; i < ds.size(); ++i) {
    Eigen::VectorXd h = Eigen::VectorXd::Zero(wh.rows());
    for (int t = 0; t < ds.max_steps(); ++t) {
      h = (wx * ds.instance(i).obs.row(t).transpose() + wh * h + b.col(0))
              .array()
              .tanh();
      logits(i, t) = (v * h)(0, 0) + c;
    }
  }
  return logits;
}

std::vector<int> step_labels(const SequenceDataset& ds, int t) {
  std::vector<int> labels(ds.size());
  for (int i = 0; i < ds.size(); ++i)
    labels[i] = ds.instance(i).labels[t] != 0.0 ? 1 : 0;
  return labels;
}

std::vector<double> constant_classifier_scores(const InnerLearnerTask& task) {
  std::vector<double> y(task.steps);
  const std::vector<double> flat(task.valid.size(), 0.0);
  for (int t = 0; t < task.steps; ++t)
    y[t] = auprc(flat, step_labels(task.valid, t));
  return y;
}

}  // namespace

std::vector<double> inner_eval(const InnerLearnerTask& task,
                               const HyperparamVector& x, std::uint64_t seed,
                               bool* diverged) {
  if (diverged) *diverged = false;
  task.space.require_contains(x);
  const int hidden = static_cast<int>(std::lround(x.values[0]));
  const int epochs = static_cast<int>(std::lround(x.values[1]));
  const int batch = static_cast<int>(std::lround(x.values[2]));
  const double lr = std::pow(10.0, x.values[3]);
  const double weight_decay = std::pow(10.0, x.values[4]);
  const double dropout = x.values[5];
  const int w = task.train.feature_width();

  Rng rng(seed);
  ParamStore store;
  auto fill = [&rng](Mat& m, double scale) {
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) m(r, c) = scale * rng.normal();
  };
  fill(store.create("rnn.wx", hidden, w), 0.5 / std::sqrt(double(w)));
  fill(store.create("rnn.wh", hidden, hidden), 0.5 / std::sqrt(double(hidden)));
  store.create("rnn.b", hidden, 1).setZero();
  // Zero output head: an untrained model scores every instance identically,
  // so zero-epoch runs read back the label prevalence under the tie rule.
  store.create("out.v", 1, hidden).setZero();
  store.create("out.c", 1, 1).setZero();

  std::vector<BatchGraph> graphs;
  for (int i0 = 0; i0 < task.train.size(); i0 += batch)
    graphs.push_back(build_batch_graph(task.train, i0,
                                       std::min(task.train.size(), i0 + batch),
                                       store, dropout, weight_decay));

  const double keep = 1.0 - dropout;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (auto& g : graphs) {
      for (const auto& [name, node] : g.params) g.tape.bind(node, store.get(name));
      if (!g.masks.empty()) {
        Mat m(g.rows, w);
        for (const graph::NodeId node : g.masks) {
          for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < w; ++c)
              m(r, c) = rng.uniform() >= dropout ? 1.0 / keep : 0.0;
          g.tape.bind(node, m);
        }
      }
      const Mat& loss = g.tape.forward(g.root);
      if (!std::isfinite(loss(0, 0))) {
        if (diverged) *diverged = true;
        return constant_classifier_scores(task);
      }
      g.tape.backward(g.root);
      std::map<std::string, Mat> grads;
      for (const auto& [name, node] : g.params) grads[name] = g.tape.grad(node);
      if (!adam_step(store, grads, lr)) {
        if (diverged) *diverged = true;
        return constant_classifier_scores(task);
      }
    }
  }

  const Mat logits = classifier_logits(task.valid, store);
  std::vector<double> y(task.steps);
  for (int t = 0; t < task.steps; ++t) {
    std::vector<double> scores(task.valid.size());
    for (int i = 0; i < task.valid.size(); ++i) scores[i] = logits(i, t);
    y[t] = auprc(scores, step_labels(task.valid, t));
  }
  return y;
}

MultiStepProblem inner_problem(const InnerLearnerTask& task,
                               std::uint64_t seed) {
  MultiStepProblem prob;
  prob.steps = task.steps;
  prob.eval =
      [task, seed](const HyperparamVector& x) -> std::optional<std::vector<double>> {
    return inner_eval(task, x, seed);
  };
  return prob;
}

// ---------------------------------------------------------------------------
// Metrics

double auprc(const std::vector<double>& scores, const std::vector<int>& labels,
             bool* degenerate) {
  if (degenerate) *degenerate = false;
  const int n = static_cast<int>(scores.size());
  if (n == 0) throw std::invalid_argument("auprc: empty input");
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("auprc: scores and labels differ in length");
  int positives = 0;
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(scores[i]))
      throw std::invalid_argument("auprc: non-finite score");
    if (labels[i] != 0 && labels[i] != 1)
      throw std::invalid_argument("auprc: labels must be 0 or 1");
    positives += labels[i];
  }
  if (positives == n) {
    if (degenerate) *degenerate = true;
    return 1.0;
  }
  if (positives == 0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&scores](int a, int b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  int tp = 0, rank = 0;
  for (int i = 0; i < n;) {
    int j = i;
    int block_tp = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      block_tp += labels[order[j]];
      ++j;
    }
    tp += block_tp;
    rank = j;
    if (block_tp > 0) ap += block_tp * (static_cast<double>(tp) / rank);
    i = j;
  }
  return ap / positives;
}

double feature_autocorr(const SequenceDataset& ds, std::vector<int>* excluded) {
  if (excluded) excluded->clear();
  if (ds.max_steps() < 2)
    throw std::invalid_argument("feature_autocorr: needs at least two steps");
  double total = 0.0;
  int kept = 0;
  for (int k = 0; k < ds.feature_width(); ++k) {
    std::vector<double> now, next;
    for (int i = 0; i < ds.size(); ++i) {
      const Instance& inst = ds.instance(i);
      for (int t = 0; t + 1 < inst.length(); ++t) {
        now.push_back(inst.obs(t, k));
        next.push_back(inst.obs(t + 1, k));
      }
    }
    double r = 0.0;
    if (pearson(now, next, &r)) {
      total += r;
      ++kept;
    } else if (excluded) {
      excluded->push_back(k);
    }
  }
  return kept > 0 ? total / kept : kNaN;
}

Mat performance_corr_matrix(const RunHistory& h) {
  const int n = static_cast<int>(h.records.size());
  if (n < 3)
    throw std::invalid_argument(
        "performance_corr_matrix: needs at least 3 acquisitions");
  const int t_count = h.steps;
  Mat corr = Mat::Identity(t_count, t_count);
  for (int a = 0; a < t_count; ++a) {
    for (int b = a + 1; b < t_count; ++b) {
      std::vector<double> ya(n), yb(n);
      for (int i = 0; i < n; ++i) {
        ya[i] = h.records[i].y[a];
        yb[i] = h.records[i].y[b];
      }
      double r = kNaN;
      if (!pearson(ya, yb, &r)) r = kNaN;
      corr(a, b) = r;
      corr(b, a) = r;
    }
  }
  return corr;
}

std::vector<double> wise_prefix(const RunHistory& h, int upto) {
  if (h.records.empty())
    throw std::invalid_argument("wise_prefix: empty history");
  const int n = std::clamp(upto, 1, static_cast<int>(h.records.size()));
  std::vector<double> best(h.steps, -std::numeric_limits<double>::infinity());
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < h.steps; ++t)
      best[t] = std::max(best[t], h.records[i].y[t]);
  return best;
}

std::vector<double> single_prefix(const RunHistory& h, int upto) {
  if (h.records.empty())
    throw std::invalid_argument("single_prefix: empty history");
  const int n = std::clamp(upto, 1, static_cast<int>(h.records.size()));
  int best = 0;
  double best_sum = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double s = std::accumulate(h.records[i].y.begin(),
                                     h.records[i].y.end(), 0.0);
    if (s > best_sum) {
      best_sum = s;
      best = i;
    }
  }
  return h.records[best].y;
}

std::vector<double> topk_trajectory(const RunHistory& h, int k) {
  if (k < 1) throw std::invalid_argument("topk_trajectory: k must be >= 1");
  const int n = static_cast<int>(h.records.size());
  if (n == 0) throw std::invalid_argument("topk_trajectory: empty history");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&h](int a, int b) {
    const auto mean = [&h](int i) {
      return std::accumulate(h.records[i].y.begin(), h.records[i].y.end(), 0.0) /
             h.steps;
    };
    return mean(a) > mean(b);
  });
  const int take = std::min(k, n);
  std::vector<double> out(h.steps, 0.0);
  for (int i = 0; i < take; ++i)
    for (int t = 0; t < h.steps; ++t) out[t] += h.records[order[i]].y[t];
  for (double& v : out) v /= take;
  return out;
}

// ---------------------------------------------------------------------------
// Experiment config

namespace {

void reject_unknown(const nlohmann::json& obj, const char* where,
                    std::initializer_list<const char*> known) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find_if(known.begin(), known.end(), [&key](const char* k) {
          return key == k;
        }) == known.end())
      throw std::invalid_argument(std::string("config: unknown key '") + key +
                                  "' in " + where);
  }
}

DriftProfile parse_profile(const nlohmann::json& obj) {
  reject_unknown(obj, "dataset",
                 {"instances", "width", "ar_coeff", "noise_sd", "mean_drift",
                  "break_step", "break_size", "label_drift"});
  DriftProfile p;
  p.instances = obj.value("instances", p.instances);
  p.width = obj.value("width", p.width);
  p.ar_coeff = obj.value("ar_coeff", p.ar_coeff);
  p.noise_sd = obj.value("noise_sd", p.noise_sd);
  p.mean_drift = obj.value("mean_drift", p.mean_drift);
  p.break_step = obj.value("break_step", p.break_step);
  p.break_size = obj.value("break_size", p.break_size);
  p.label_drift = obj.value("label_drift", p.label_drift);
  return p;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  reject_unknown(root, "the top level",
                 {"name", "task", "steps", "synth", "dataset", "algorithms",
                  "seeds", "checkpoints", "budget", "surrogate"});
  ExperimentConfig cfg;
  cfg.name = root.value("name", cfg.name);
  cfg.task = root.value("task", cfg.task);
  if (cfg.task != "synth" && cfg.task != "inner")
    throw std::invalid_argument("config: task must be 'synth' or 'inner'");
  cfg.steps = root.value("steps", cfg.steps);
  if (cfg.steps < 1) throw std::invalid_argument("config: steps must be >= 1");

  if (root.contains("synth")) {
    const auto& s = root["synth"];
    reject_unknown(s, "synth", {"rho", "bumps", "noise_sd", "family_seed"});
    cfg.rho = s.value("rho", cfg.rho);
    cfg.bumps = s.value("bumps", cfg.bumps);
    cfg.noise_sd = s.value("noise_sd", cfg.noise_sd);
    cfg.family_seed = s.value("family_seed", cfg.family_seed);
  }
  if (root.contains("dataset")) cfg.dataset = parse_profile(root["dataset"]);
  if (root.contains("algorithms"))
    cfg.algorithms = root["algorithms"].get<std::vector<std::string>>();
  if (cfg.algorithms.empty())
    throw std::invalid_argument("config: empty algorithm list");
  for (const auto& a : cfg.algorithms)
    if (a != "sms_dkl" && a != "gp" && a != "parego" && a != "random")
      throw std::invalid_argument("config: unknown algorithm '" + a + "'");
  if (root.contains("seeds"))
    cfg.seeds = root["seeds"].get<std::vector<std::uint64_t>>();
  if (cfg.seeds.empty()) throw std::invalid_argument("config: empty seed list");
  if (root.contains("checkpoints"))
    cfg.checkpoints = root["checkpoints"].get<std::vector<int>>();
  if (cfg.checkpoints.empty())
    throw std::invalid_argument("config: empty checkpoint list");

  if (root.contains("budget")) {
    const auto& b = root["budget"];
    reject_unknown(b, "budget", {"n_init", "n_iters", "record_timing"});
    cfg.run.n_init = b.value("n_init", cfg.run.n_init);
    cfg.run.n_iters = b.value("n_iters", cfg.run.n_iters);
    cfg.run.record_timing = b.value("record_timing", cfg.run.record_timing);
  }
  if (root.contains("surrogate")) {
    const auto& s = root["surrogate"];
    reject_unknown(s, "surrogate",
                   {"m_train", "candidate_pool", "embed_dim", "feature_dim",
                    "subsample_threshold", "subsample_size", "lstm_hidden",
                    "set_width", "mlp_width", "instance_cap", "learn_rate",
                    "warm_start", "share_noise", "save_train_log"});
    cfg.run.m_train = s.value("m_train", cfg.run.m_train);
    cfg.run.candidate_pool = s.value("candidate_pool", cfg.run.candidate_pool);
    cfg.run.embed_dim = s.value("embed_dim", cfg.run.embed_dim);
    cfg.run.feature_dim = s.value("feature_dim", cfg.run.feature_dim);
    cfg.run.subsample_threshold =
        s.value("subsample_threshold", cfg.run.subsample_threshold);
    cfg.run.subsample_size = s.value("subsample_size", cfg.run.subsample_size);
    cfg.run.lstm_hidden = s.value("lstm_hidden", cfg.run.lstm_hidden);
    cfg.run.set_width = s.value("set_width", cfg.run.set_width);
    cfg.run.mlp_width = s.value("mlp_width", cfg.run.mlp_width);
    cfg.run.instance_cap = s.value("instance_cap", cfg.run.instance_cap);
    cfg.run.learn_rate = s.value("learn_rate", cfg.run.learn_rate);
    cfg.run.warm_start = s.value("warm_start", cfg.run.warm_start);
    cfg.run.share_noise = s.value("share_noise", cfg.run.share_noise);
    cfg.run.save_train_log = s.value("save_train_log", cfg.run.save_train_log);
  }
  cfg.run.validate();
  if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0))
    throw std::invalid_argument("config: rho must be in [0, 1]");
  return cfg;
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json root;
  root["name"] = cfg.name;
  root["task"] = cfg.task;
  root["steps"] = cfg.steps;
  root["synth"] = {{"rho", cfg.rho},
                   {"bumps", cfg.bumps},
                   {"noise_sd", cfg.noise_sd},
                   {"family_seed", cfg.family_seed}};
  root["dataset"] = {{"instances", cfg.dataset.instances},
                     {"width", cfg.dataset.width},
                     {"ar_coeff", cfg.dataset.ar_coeff},
                     {"noise_sd", cfg.dataset.noise_sd},
                     {"mean_drift", cfg.dataset.mean_drift},
                     {"break_step", cfg.dataset.break_step},
                     {"break_size", cfg.dataset.break_size},
                     {"label_drift", cfg.dataset.label_drift}};
  root["algorithms"] = cfg.algorithms;
  root["seeds"] = cfg.seeds;
  root["checkpoints"] = cfg.checkpoints;
  root["budget"] = {{"n_init", cfg.run.n_init},
                    {"n_iters", cfg.run.n_iters},
                    {"record_timing", cfg.run.record_timing}};
  root["surrogate"] = {{"m_train", cfg.run.m_train},
                       {"candidate_pool", cfg.run.candidate_pool},
                       {"embed_dim", cfg.run.embed_dim},
                       {"feature_dim", cfg.run.feature_dim},
                       {"subsample_threshold", cfg.run.subsample_threshold},
                       {"subsample_size", cfg.run.subsample_size},
                       {"lstm_hidden", cfg.run.lstm_hidden},
                       {"set_width", cfg.run.set_width},
                       {"mlp_width", cfg.run.mlp_width},
                       {"instance_cap", cfg.run.instance_cap},
                       {"learn_rate", cfg.run.learn_rate},
                       {"warm_start", cfg.run.warm_start},
                       {"share_noise", cfg.run.share_noise},
                       {"save_train_log", cfg.run.save_train_log}};
  return root.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Experiment runner

namespace {

struct RunOutput {
  bool ok = false;
  RunHistory history;
  std::string error;
};

struct Aggregate {
  double mean = kNaN;
  double stderr_ = 0.0;
};

Aggregate aggregate(const std::vector<double>& xs) {
  Aggregate a;
  const int n = static_cast<int>(xs.size());
  if (n == 0) return a;
  a.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (n >= 2) {
    double ss = 0.0;
    for (const double x : xs) ss += (x - a.mean) * (x - a.mean);
    a.stderr_ = std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<double>(n));
  }
  return a;
}

std::uint64_t derived_seed(std::uint64_t base, std::uint64_t salt) {
  return Rng(base).child(salt).seed();
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const fs::path& out_dir) {
  cfg.run.validate();
  const bool is_synth = cfg.task == "synth";

  // Shared task fixtures. The synthetic family is one fixed noisy oracle for
  // the whole experiment; per-seed variation enters through the run seeds and
  // (for the encoder) per-seed datasets, mirroring fresh train/valid splits.
  SynthFamily family;
  HyperparamSpace space;
  std::vector<InnerLearnerTask> inner_tasks;  // per seed
  if (is_synth) {
    space = synth_space();
    family = synth_family(cfg.family_seed, cfg.steps, cfg.rho, space, cfg.bumps);
    family.noise_sd = cfg.noise_sd;
  } else {
    space = inner_space();
    inner_tasks.reserve(cfg.seeds.size());
    for (const std::uint64_t s : cfg.seeds)
      inner_tasks.push_back(
          inner_task(derived_seed(cfg.family_seed, s), cfg.steps, cfg.dataset));
  }

  fs::create_directories(out_dir / "convergence");
  struct Job {
    int algo;
    int seed;
  };
  std::vector<Job> jobs;
  for (int a = 0; a < static_cast<int>(cfg.algorithms.size()); ++a)
    for (int s = 0; s < static_cast<int>(cfg.seeds.size()); ++s) {
      jobs.push_back({a, s});
      fs::create_directories(out_dir / "runs" / cfg.algorithms[a] /
                             ("seed_" + std::to_string(cfg.seeds[s])));
    }

  std::vector<RunOutput> outputs(jobs.size());
#pragma omp parallel for schedule(dynamic)
  for (int j = 0; j < static_cast<int>(jobs.size()); ++j) {
    const std::string& algo = cfg.algorithms[jobs[j].algo];
    const std::uint64_t seed = cfg.seeds[jobs[j].seed];
    const fs::path run_dir =
        out_dir / "runs" / algo / ("seed_" + std::to_string(seed));
    RunOutput& out = outputs[j];
    try {
      RunConfig rc = cfg.run;
      rc.seed = seed;
      const MultiStepProblem problem =
          is_synth ? synth_problem(family)
                   : inner_problem(inner_tasks[jobs[j].seed], seed);
      if (algo == "sms_dkl") {
        const SequenceDataset ds =
            is_synth ? synth_dataset(derived_seed(cfg.family_seed, seed),
                                     cfg.steps, cfg.dataset)
                     : inner_tasks[jobs[j].seed].train;
        SmsRunResult r = sms_dkl_run(problem, ds, space, rc);
        out.history = std::move(r.history);
        r.params.save((run_dir / "params.txt").string());
        if (rc.save_train_log) {
          std::string log = "iter,objective,steps,beta_mean,lambda_mean,aborted\n";
          for (int i = 0; i < static_cast<int>(r.fits.size()); ++i) {
            const FitResult& f = r.fits[i];
            log += format_g12(i + 1) + ",";
            log += (f.objective.empty() ? "nan" : format_g12(f.objective.back())) + ",";
            log += format_g12(static_cast<double>(f.objective.size())) + ",";
            log += (f.beta_mean.empty() ? "nan" : format_g12(f.beta_mean.back())) + ",";
            log += (f.lambda_mean.empty() ? "nan" : format_g12(f.lambda_mean.back())) + ",";
            log += std::string(f.aborted ? "1" : "0") + "\n";
          }
          atomic_write((run_dir / "fit_summary.csv").string(), log);
        }
      } else if (algo == "gp") {
        out.history = gp_bo_run(problem, space, rc);
      } else if (algo == "parego") {
        out.history = parego_run(problem, space, rc);
      } else {
        out.history = random_search_run(problem, space, rc);
      }
      atomic_write((run_dir / "history.csv").string(),
                   history_csv(out.history, space));
      out.ok = true;
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  }

  ExperimentResult result;
  result.out_dir = out_dir;
  for (int j = 0; j < static_cast<int>(jobs.size()); ++j)
    if (!outputs[j].ok)
      result.failures.push_back(cfg.algorithms[jobs[j].algo] + " seed " +
                                std::to_string(cfg.seeds[jobs[j].seed]) + ": " +
                                outputs[j].error);

  const auto history_of = [&](int algo, int seed) -> const RunHistory* {
    const int j = algo * static_cast<int>(cfg.seeds.size()) + seed;
    if (!outputs[j].ok || outputs[j].history.records.empty()) return nullptr;
    return &outputs[j].history;
  };

  // Checkpoint tables: per (checkpoint, step), the mean +- stderr over seeds
  // of the single-model and stepwise readouts of each algorithm.
  const auto checkpoint_table = [&](bool as_regret) {
    std::string csv = "checkpoint,step";
    for (const auto& algo : cfg.algorithms)
      csv += "," + algo + "_mean," + algo + "_stderr," + algo + "_wise_mean," +
             algo + "_wise_stderr";
    csv += "\n";
    for (const int cp : cfg.checkpoints) {
      for (int t = 0; t < cfg.steps; ++t) {
        csv += std::to_string(cp) + "," + std::to_string(t + 1);
        for (int a = 0; a < static_cast<int>(cfg.algorithms.size()); ++a) {
          std::vector<double> single, wise;
          for (int s = 0; s < static_cast<int>(cfg.seeds.size()); ++s) {
            const RunHistory* h = history_of(a, s);
            if (!h) continue;
            const int upto = cfg.run.n_init + cp;
            double sv = single_prefix(*h, upto)[t];
            double wv = wise_prefix(*h, upto)[t];
            if (as_regret) {
              sv = family.oracle_value[t] - sv;
              wv = family.oracle_value[t] - wv;
            }
            single.push_back(sv);
            wise.push_back(wv);
          }
          const Aggregate sa = aggregate(single), wa = aggregate(wise);
          csv += "," + format_g12(sa.mean) + "," + format_g12(sa.stderr_) +
                 "," + format_g12(wa.mean) + "," + format_g12(wa.stderr_);
        }
        csv += "\n";
      }
    }
    return csv;
  };
  atomic_write((out_dir / "checkpoints.csv").string(), checkpoint_table(false));
  if (is_synth)
    atomic_write((out_dir / "regret_checkpoints.csv").string(),
                 checkpoint_table(true));

  // Convergence data: per iteration, the stepwise readout averaged over
  // steps, aggregated over seeds.
  const int total_iters = cfg.run.n_init + cfg.run.n_iters;
  for (int a = 0; a < static_cast<int>(cfg.algorithms.size()); ++a) {
    std::string csv = is_synth ? "iter,value_mean,value_stderr,regret_mean,regret_stderr\n"
                               : "iter,value_mean,value_stderr\n";
    for (int it = 1; it <= total_iters; ++it) {
      std::vector<double> vals, regrets;
      for (int s = 0; s < static_cast<int>(cfg.seeds.size()); ++s) {
        const RunHistory* h = history_of(a, s);
        if (!h) continue;
        const std::vector<double> wise = wise_prefix(*h, it);
        double v = 0.0, r = 0.0;
        for (int t = 0; t < cfg.steps; ++t) {
          v += wise[t];
          if (is_synth) r += family.oracle_value[t] - wise[t];
        }
        vals.push_back(v / cfg.steps);
        if (is_synth) regrets.push_back(r / cfg.steps);
      }
      const Aggregate va = aggregate(vals);
      csv += std::to_string(it) + "," + format_g12(va.mean) + "," +
             format_g12(va.stderr_);
      if (is_synth) {
        const Aggregate ra = aggregate(regrets);
        csv += "," + format_g12(ra.mean) + "," + format_g12(ra.stderr_);
      }
      csv += "\n";
    }
    atomic_write((out_dir / "convergence" / (cfg.algorithms[a] + ".csv")).string(),
                 csv);
  }

  std::string failures = "algorithm_seed,message\n";
  for (const auto& f : result.failures) {
    const auto colon = f.find(": ");
    failures += csv_quote(f.substr(0, colon)) + "," +
                csv_quote(f.substr(colon + 2)) + "\n";
  }
  atomic_write((out_dir / "failures.csv").string(), failures);
  atomic_write((out_dir / "config.json").string(), experiment_config_json(cfg));
  return result;
}

}  // namespace smsdkl
