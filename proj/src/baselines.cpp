#include "smsdkl/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "smsdkl/diffgraph.hpp"

namespace smsdkl {

namespace {

constexpr double kSqrt5 = 2.2360679774997896964;
constexpr double kLogNoiseFloor = -18.420680743952367;  // log(1e-8)

double scaled_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                       const Eigen::VectorXd& ell) {
  double r2 = 0.0;
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    const double d = (a[j] - b[j]) / ell[j];
    r2 += d * d;
  }
  return std::sqrt(r2);
}

double matern52_of_r(double r, double sf2) {
  return sf2 * (1.0 + kSqrt5 * r + 5.0 * r * r / 3.0) * std::exp(-kSqrt5 * r);
}

}  // namespace

double matern52_ard(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                    const Eigen::VectorXd& ell, double sf2) {
  if (a.size() != b.size() || a.size() != ell.size())
    throw std::invalid_argument("matern52_ard: size mismatch");
  if (sf2 <= 0.0 || (ell.array() <= 0.0).any())
    throw std::invalid_argument("matern52_ard: hyperparameters must be positive");
  return matern52_of_r(scaled_distance(a, b, ell), sf2);
}

Mat gram_matrix_serial(const Mat& x, const Eigen::VectorXd& ell, double sf2) {
  const int n = static_cast<int>(x.rows());
  Mat k(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      k(i, j) = matern52_of_r(scaled_distance(x.row(i), x.row(j), ell), sf2);
  return k;
}

Mat gram_matrix_parallel(const Mat& x, const Eigen::VectorXd& ell, double sf2) {
  const int n = static_cast<int>(x.rows());
  Mat k(n, n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      k(i, j) = matern52_of_r(scaled_distance(x.row(i), x.row(j), ell), sf2);
  return k;
}

double gp_lml(const Mat& x, const Eigen::VectorXd& y, const Eigen::VectorXd& log_ell,
              double log_sf2, double log_sn2) {
  const int n = static_cast<int>(x.rows());
  const Eigen::VectorXd ell = log_ell.array().exp();
  Mat k = gram_matrix_serial(x, ell, std::exp(log_sf2));
  k.diagonal().array() += std::exp(log_sn2);
  const Eigen::LLT<Mat> chol = chol_spd(k);
  const Eigen::VectorXd alpha = chol.solve(y);
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += std::log(chol.matrixLLT()(i, i));
  return -0.5 * y.dot(alpha) - logdet -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

Eigen::VectorXd gp_lml_grad(const Mat& x, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& log_ell, double log_sf2,
                            double log_sn2) {
  const int n = static_cast<int>(x.rows());
  const int d = static_cast<int>(log_ell.size());
  const Eigen::VectorXd ell = log_ell.array().exp();
  const double sf2 = std::exp(log_sf2);
  const double sn2 = std::exp(log_sn2);

  const Mat k0 = gram_matrix_serial(x, ell, sf2);  // noise-free part
  Mat k = k0;
  k.diagonal().array() += sn2;
  const Eigen::LLT<Mat> chol = chol_spd(k);
  const Eigen::VectorXd alpha = chol.solve(y);
  // A = alpha alpha' - K^{-1}; gradient in theta is tr(A dK/dtheta)/2.
  const Mat a = alpha * alpha.transpose() - chol.solve(Mat::Identity(n, n));

  Eigen::VectorXd grad(d + 2);
  for (int j = 0; j < d; ++j) {
    double acc = 0.0;
    for (int p = 0; p < n; ++p) {
      for (int q = 0; q < n; ++q) {
        const double r = scaled_distance(x.row(p), x.row(q), ell);
        const double dj = (x(p, j) - x(q, j)) / ell[j];
        const double dk = (5.0 / 3.0) * sf2 * (1.0 + kSqrt5 * r) * std::exp(-kSqrt5 * r) *
                          dj * dj;
        acc += a(p, q) * dk;
      }
    }
    grad[j] = 0.5 * acc;
  }
  grad[d] = 0.5 * (a.array() * k0.array()).sum();
  grad[d + 1] = 0.5 * sn2 * a.trace();
  return grad;
}

GpModel gp_fit(const Mat& x, const Eigen::VectorXd& y, Rng& rng) {
  const int n = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  if (n < 2) throw std::invalid_argument("gp_fit: need at least two observations");
  if (y.size() != n) throw std::invalid_argument("gp_fit: target size mismatch");

  GpModel model;
  model.x = x;
  model.y_mean = y.mean();
  const double var = (y.array() - model.y_mean).square().mean();
  model.y_sd = std::max(std::sqrt(var), 1e-8);
  const Eigen::VectorXd ys = (y.array() - model.y_mean) / model.y_sd;

  double best = -std::numeric_limits<double>::infinity();
  for (int start = 0; start < 5; ++start) {
    ParamStore ps;
    if (start == 0) {
      ps.create("log_ell", Mat::Zero(d, 1));
      ps.create("log_sf2", Mat::Zero(1, 1));
      Mat sn(1, 1);
      sn(0, 0) = std::log(1e-2);
      ps.create("log_sn2", sn);
    } else {
      Mat le(d, 1), sf(1, 1), sn(1, 1);
      for (int j = 0; j < d; ++j) le(j, 0) = rng.uniform(-2.0, 2.0);
      sf(0, 0) = rng.uniform(-2.0, 2.0);
      sn(0, 0) = rng.uniform(-6.0, -1.0);
      ps.create("log_ell", le);
      ps.create("log_sf2", sf);
      ps.create("log_sn2", sn);
    }

    for (int step = 0; step < 200; ++step) {
      const Eigen::VectorXd le = ps.get("log_ell").col(0);
      const Eigen::VectorXd g = gp_lml_grad(x, ys, le, ps.get("log_sf2")(0, 0),
                                            ps.get("log_sn2")(0, 0));
      std::map<std::string, Mat> grads;
      grads["log_ell"] = -g.head(d);
      grads["log_sf2"] = -g.segment(d, 1);
      grads["log_sn2"] = -g.tail(1);
      if (!adam_step(ps, grads, 0.05, nullptr)) break;
      Mat& sn = ps.get("log_sn2");
      sn(0, 0) = std::max(sn(0, 0), kLogNoiseFloor);
    }

    const Eigen::VectorXd le = ps.get("log_ell").col(0);
    const double lml = gp_lml(x, ys, le, ps.get("log_sf2")(0, 0), ps.get("log_sn2")(0, 0));
    if (std::isfinite(lml) && lml > best) {
      best = lml;
      model.log_ell = le;
      model.log_sf2 = ps.get("log_sf2")(0, 0);
      model.log_sn2 = ps.get("log_sn2")(0, 0);
    }
  }
  if (!std::isfinite(best)) throw std::runtime_error("gp_fit: no start converged");

  Mat k = gram_matrix_serial(x, model.log_ell.array().exp(), std::exp(model.log_sf2));
  k.diagonal().array() += std::exp(model.log_sn2);
  model.chol = chol_spd(k);
  model.alpha = model.chol.solve(ys);
  model.lml = best;
  return model;
}

std::pair<double, double> gp_predict(const GpModel& m, const Eigen::VectorXd& x) {
  const int n = static_cast<int>(m.x.rows());
  const Eigen::VectorXd ell = m.log_ell.array().exp();
  const double sf2 = std::exp(m.log_sf2);
  Eigen::VectorXd ks(n);
  for (int i = 0; i < n; ++i)
    ks[i] = matern52_of_r(scaled_distance(m.x.row(i), x, ell), sf2);
  const double mean = ks.dot(m.alpha);
  const double var = std::max(sf2 - ks.dot(m.chol.solve(ks)), 0.0);
  return {mean * m.y_sd + m.y_mean, var * m.y_sd * m.y_sd};
}

namespace {

double elapsed_or_zero(const std::chrono::steady_clock::time_point& start, bool enabled) {
  if (!enabled) return 0.0;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Shared bookkeeping for the single-objective baseline loops.
struct BaselineState {
  int steps;
  RunHistory history;
  std::vector<HyperparamVector> xs;  // successful acquisitions, raw values
  Mat y;                             // per-step scores, one row per success
  std::vector<double> best;
  std::vector<HyperparamVector> best_x;
  int attempts = 0;

  explicit BaselineState(int t)
      : steps(t),
        y(0, t),
        best(t, -std::numeric_limits<double>::infinity()),
        best_x(t) {
    history.steps = t;
  }

  std::optional<std::vector<double>> evaluate(const MultiStepProblem& problem,
                                              const HyperparamVector& x) {
    ++attempts;
    auto scores = problem.eval(x);
    if (scores && static_cast<int>(scores->size()) != steps)
      throw std::runtime_error("baseline run: problem returned the wrong number of scores");
    if (!scores) history.failed_attempts.push_back(attempts);
    return scores;
  }

  void record(int chosen_t, const HyperparamVector& x, const std::vector<double>& scores,
              double seconds) {
    xs.push_back(x);
    y.conservativeResize(y.rows() + 1, Eigen::NoChange);
    for (int t = 0; t < steps; ++t) y(y.rows() - 1, t) = scores[t];
    for (int t = 0; t < steps; ++t) {
      if (scores[t] > best[t]) {
        best[t] = scores[t];
        best_x[t] = x;
      }
    }
    IterationRecord r;
    r.iter = static_cast<int>(history.records.size()) + 1;
    r.chosen_t = chosen_t;
    r.x = x;
    r.y = scores;
    r.incumbent = best;
    r.incumbent_x = best_x;
    r.p.assign(steps, 0.0);
    r.seconds = seconds;
    history.records.push_back(std::move(r));
  }
};

// Initial design shared with sms_dkl_run: identical rng consumption, so a
// matched seed yields matched init points across algorithms.
void run_initial_design(BaselineState& state, const MultiStepProblem& problem,
                        const HyperparamSpace& space, const RunConfig& cfg, Rng& rng) {
  for (int i = 0; i < cfg.n_init; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const HyperparamVector x = sample_uniform(space, rng);
    const auto scores = state.evaluate(problem, x);
    if (!scores) continue;
    state.record(0, x, *scores, elapsed_or_zero(start, cfg.record_timing));
  }
}

// One EI-argmax acquisition against a fitted GP on the given targets.
StepProposal gp_acquire(const GpModel& model, const Eigen::VectorXd& targets,
                        const CandidatePool& pool) {
  Eigen::VectorXd ei(pool.xn.rows());
  const double y_best = targets.maxCoeff();
  for (int i = 0; i < pool.xn.rows(); ++i) {
    const auto [mu, var] = gp_predict(model, pool.xn.row(i).transpose());
    ei[i] = expected_improvement(mu, var, y_best);
  }
  return propose_step(0, pool, ei);
}

}  // namespace

RunHistory gp_bo_run(const MultiStepProblem& problem, const HyperparamSpace& space,
                     const RunConfig& cfg) {
  cfg.validate();
  if (problem.steps < 1 || !problem.eval)
    throw std::invalid_argument("gp_bo_run: invalid problem");
  Rng rng(cfg.seed);
  BaselineState state(problem.steps);
  run_initial_design(state, problem, space, cfg, rng);

  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    const auto start = std::chrono::steady_clock::now();
    const int n = static_cast<int>(state.xs.size());

    HyperparamVector x_next;
    if (n < 2) {
      x_next = sample_uniform(space, rng);
    } else {
      const Mat xn = normalize_rows(space, state.xs);
      const Eigen::VectorXd f_sum = state.y.rowwise().sum();
      const GpModel model = gp_fit(xn, f_sum, rng);
      const CandidatePool pool = draw_candidates(space, cfg.candidate_pool, rng);
      x_next = gp_acquire(model, f_sum, pool).x_star;
    }

    const auto scores = state.evaluate(problem, x_next);
    if (!scores) continue;
    state.record(0, x_next, *scores, elapsed_or_zero(start, cfg.record_timing));
  }
  return state.history;
}

Mat rescale_columns(const Mat& y) {
  Mat out(y.rows(), y.cols());
  for (Eigen::Index t = 0; t < y.cols(); ++t) {
    const double lo = y.col(t).minCoeff();
    const double hi = y.col(t).maxCoeff();
    if (hi > lo)
      out.col(t) = (y.col(t).array() - lo) / (hi - lo);
    else
      out.col(t).setZero();
  }
  return out;
}

Eigen::VectorXd sample_simplex(int t, Rng& rng) {
  if (t < 1) throw std::invalid_argument("sample_simplex: need at least one weight");
  Eigen::VectorXd theta(t);
  for (int i = 0; i < t; ++i) theta[i] = -std::log(1.0 - rng.uniform());
  return theta / theta.sum();
}

Eigen::VectorXd parego_scalarize(const Mat& y_rescaled, const Eigen::VectorXd& theta) {
  if (theta.size() != y_rescaled.cols())
    throw std::invalid_argument("parego_scalarize: weight count mismatch");
  Eigen::VectorXd out(y_rescaled.rows());
  for (Eigen::Index i = 0; i < y_rescaled.rows(); ++i) {
    const Eigen::VectorXd weighted =
        (y_rescaled.row(i).transpose().array() * theta.array()).matrix();
    out[i] = weighted.maxCoeff() + 0.05 * weighted.sum();
  }
  return out;
}

RunHistory parego_run(const MultiStepProblem& problem, const HyperparamSpace& space,
                      const RunConfig& cfg,
                      const std::vector<Eigen::VectorXd>* theta_override) {
  cfg.validate();
  if (problem.steps < 1 || !problem.eval)
    throw std::invalid_argument("parego_run: invalid problem");
  if (theta_override && static_cast<int>(theta_override->size()) < cfg.n_iters)
    throw std::invalid_argument("parego_run: weight override shorter than the run");
  Rng rng(cfg.seed);
  BaselineState state(problem.steps);
  run_initial_design(state, problem, space, cfg, rng);

  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    const auto start = std::chrono::steady_clock::now();
    const Eigen::VectorXd theta = theta_override
                                      ? (*theta_override)[iter]
                                      : sample_simplex(problem.steps, rng);
    const int n = static_cast<int>(state.xs.size());

    HyperparamVector x_next;
    if (n < 2) {
      x_next = sample_uniform(space, rng);
    } else {
      const Mat xn = normalize_rows(space, state.xs);
      const Eigen::VectorXd scalarized = parego_scalarize(rescale_columns(state.y), theta);
      const GpModel model = gp_fit(xn, scalarized, rng);
      const CandidatePool pool = draw_candidates(space, cfg.candidate_pool, rng);
      x_next = gp_acquire(model, scalarized, pool).x_star;
    }

    const auto scores = state.evaluate(problem, x_next);
    if (!scores) continue;
    state.record(0, x_next, *scores, elapsed_or_zero(start, cfg.record_timing));
  }
  return state.history;
}

RunHistory random_search_run(const MultiStepProblem& problem,
                             const HyperparamSpace& space, const RunConfig& cfg) {
  cfg.validate();
  if (problem.steps < 1 || !problem.eval)
    throw std::invalid_argument("random_search_run: invalid problem");
  Rng rng(cfg.seed);
  BaselineState state(problem.steps);
  run_initial_design(state, problem, space, cfg, rng);

  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    const auto start = std::chrono::steady_clock::now();
    const HyperparamVector x = sample_uniform(space, rng);
    const auto scores = state.evaluate(problem, x);
    if (!scores) continue;
    state.record(0, x, *scores, elapsed_or_zero(start, cfg.record_timing));
  }
  return state.history;
}

std::vector<StepIncumbent> posthoc_stepwise(const RunHistory& h) {
  if (h.records.empty()) throw std::invalid_argument("posthoc_stepwise: empty history");
  std::vector<StepIncumbent> out(h.steps);
  for (int t = 0; t < h.steps; ++t) {
    const IterationRecord* best = &h.records[0];
    for (const auto& r : h.records)
      if (r.y[t] > best->y[t]) best = &r;
    out[t] = {best->x, best->y[t]};
  }
  return out;
}

int single_model_incumbent(const RunHistory& h) {
  if (h.records.empty()) throw std::invalid_argument("single_model_incumbent: empty history");
  int best = 0;
  double best_sum = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < h.records.size(); ++i) {
    const auto& y = h.records[i].y;
    const double sum = std::accumulate(y.begin(), y.end(), 0.0);
    if (sum > best_sum) {
      best_sum = sum;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace smsdkl
