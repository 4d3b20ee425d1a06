#include "smsdkl/dkl_surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "smsdkl/io.hpp"

namespace smsdkl {

std::int64_t& mac_counter() {
  thread_local std::int64_t count = 0;
  return count;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void check_gy(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda) {
  if (!(beta > 0.0) || !(lambda > 0.0))
    throw std::invalid_argument("beta and lambda must be positive");
  if (g.rows() != y.size())
    throw std::invalid_argument("feature rows and scores disagree in length");
}

}  // namespace

BlrPosterior posterior(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda) {
  check_gy(g, y, beta, lambda);
  const std::int64_t n = g.rows(), d = g.cols();
  BlrPosterior post;
  post.beta = beta;
  post.lambda = lambda;
  post.k_w = Mat::Identity(d, d);
  if (n > 0) post.k_w += (beta / lambda) * (g.transpose() * g);
  mac_counter() += n * d * d + d * d * d / 3;
  post.chol = chol_spd(post.k_w);
  if (n > 0) {
    post.m_w = post.chol.solve((beta / lambda) * (g.transpose() * y));
    mac_counter() += n * d + d * d;
  } else {
    post.m_w = Eigen::VectorXd::Zero(d);
  }
  return post;
}

std::pair<double, double> predict(const BlrPosterior& post, const Eigen::VectorXd& g) {
  if (g.size() != post.k_w.rows())
    throw std::invalid_argument("feature width does not match the posterior");
  const std::int64_t d = g.size();
  const double mu = post.m_w.dot(g);
  const double s2 = g.dot(post.chol.solve(g)) / post.lambda;
  mac_counter() += d * d + 2 * d;
  return {mu, s2};
}

double log_marginal_primal(const Mat& g, const Eigen::VectorXd& y, double beta,
                           double lambda) {
  check_gy(g, y, beta, lambda);
  const std::int64_t n = g.rows(), d = g.cols();
  if (n < 1) throw std::invalid_argument("log marginal needs at least one observation");
  Mat kw = Mat::Identity(d, d) + (beta / lambda) * (g.transpose() * g);
  auto llt = chol_spd(kw);
  const Eigen::VectorXd u = g.transpose() * y;
  const double quad = u.dot(llt.solve(u));
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  mac_counter() += n * d * d + d * d * d / 3 + n * d + d * d + d + n;
  return 0.5 * n * (std::log(beta) - kLog2Pi) - 0.5 * beta * y.squaredNorm() +
         0.5 * beta * beta / lambda * quad - 0.5 * logdet;
}

double log_marginal_dual(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda) {
  check_gy(g, y, beta, lambda);
  const std::int64_t n = g.rows(), d = g.cols();
  if (n < 1) throw std::invalid_argument("log marginal needs at least one observation");
  Mat c = (1.0 / lambda) * (g * g.transpose());
  c.diagonal().array() += 1.0 / beta;
  auto llt = chol_spd(c);
  const double quad = y.dot(llt.solve(y));
  const double half_logdet = llt.matrixLLT().diagonal().array().log().sum();
  mac_counter() += d * n * n + n * n * n / 3 + n * n + n;
  return -0.5 * n * kLog2Pi - half_logdet - 0.5 * quad;
}

double log_marginal(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda) {
  return g.rows() > g.cols() ? log_marginal_primal(g, y, beta, lambda)
                             : log_marginal_dual(g, y, beta, lambda);
}

StepStats score_stats(const std::vector<double>& y) {
  StepStats s;
  if (y.empty()) return s;
  const double n = static_cast<double>(y.size());
  s.mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double var = 0.0;
  for (double v : y) var += (v - s.mean) * (v - s.mean);
  s.sd = std::max(std::sqrt(var / n), 1e-8);
  return s;
}

Eigen::VectorXd normalized_scores(const std::vector<double>& y, const StepStats& stats) {
  Eigen::VectorXd out(static_cast<int>(y.size()));
  for (int i = 0; i < out.size(); ++i) out[i] = (y[i] - stats.mean) / stats.sd;
  return out;
}

std::string noise_name(const char* which, int t, bool share) {
  std::string base = std::string("noise.") + which;
  return share ? base : base + "." + std::to_string(t);
}

void init_noise_params(ParamStore& store, int steps, bool share) {
  if (share) {
    store.create(noise_name("log_beta", 0, true), 1, 1);
    store.create(noise_name("log_lambda", 0, true), 1, 1);
    return;
  }
  for (int t = 1; t <= steps; ++t) {
    store.create(noise_name("log_beta", t, false), 1, 1);
    store.create(noise_name("log_lambda", t, false), 1, 1);
  }
}

ObjectiveGraph build_multitask_graph(const ParamStore& params, const MultitaskProblem& prob,
                                     const std::vector<int>& steps, Rng& rng) {
  if (!prob.data || !prob.space || !prob.acq)
    throw std::invalid_argument("multitask problem is missing its dataset, space or sets");
  if (steps.empty()) throw std::invalid_argument("step subset must be nonempty");
  const int total = static_cast<int>(prob.acq->size());
  for (int t : steps) {
    if (t < 1 || t > total) throw std::invalid_argument("step index outside [1, T]");
    if ((*prob.acq)[t - 1].size() < 1)
      throw std::invalid_argument("acquisition set " + std::to_string(t) + " is empty");
  }

  ObjectiveGraph out;
  auto& tp = out.tape;
  out.params = add_param_inputs(tp, params, params.names());
  const std::vector<int> subset = encoding_subset(prob.data->size(), prob.instance_cap, rng);

  using graph::NodeId;
  std::vector<NodeId> terms;
  for (int t : steps) {
    const AcquisitionSet& a = (*prob.acq)[t - 1];
    const Filtration filt(*prob.data, t);
    const NodeId z = build_embedding(tp, out.params, prob.dims, filt, subset);
    const Mat xn = normalize_rows(*prob.space, a.X);
    const NodeId g = build_feature_rows(tp, out.params, prob.dims, z, xn);
    const Eigen::VectorXd yhat = normalized_scores(a.y, score_stats(a.y));
    const NodeId lb = out.params.at(noise_name("log_beta", t, prob.share_noise));
    const NodeId ll = out.params.at(noise_name("log_lambda", t, prob.share_noise));
    const int n = a.size(), d = prob.dims.feature_dim;
    const NodeId ycol = tp.constant(yhat);
    NodeId step_ll;
    if (n > d) {
      const NodeId gt = tp.transpose(g);
      const NodeId kw = tp.add(tp.constant(Mat::Identity(d, d)),
                               tp.mul(tp.exp(tp.sub(lb, ll)), tp.matmul(gt, g)));
      const NodeId quad = tp.chol_solve_quadform(kw, tp.matmul(gt, ycol));
      const NodeId t1 = tp.mul(tp.scalar(0.5 * n), tp.sub(lb, tp.scalar(kLog2Pi)));
      const NodeId t2 = tp.mul(tp.scalar(-0.5 * yhat.squaredNorm()), tp.exp(lb));
      const NodeId t3 =
          tp.mul(tp.mul(tp.scalar(0.5), tp.exp(tp.sub(tp.add(lb, lb), ll))), quad);
      const NodeId t4 = tp.mul(tp.scalar(-0.5), tp.logdet_spd(kw));
      step_ll = tp.add(tp.add(t1, t2), tp.add(t3, t4));
    } else {
      const NodeId c =
          tp.add(tp.mul(tp.exp(tp.neg(ll)), tp.matmul(g, tp.transpose(g))),
                 tp.mul(tp.exp(tp.neg(lb)), tp.constant(Mat::Identity(n, n))));
      step_ll = tp.add(tp.add(tp.scalar(-0.5 * n * kLog2Pi),
                              tp.mul(tp.scalar(-0.5), tp.logdet_spd(c))),
                       tp.mul(tp.scalar(-0.5), tp.chol_solve_quadform(c, ycol)));
    }
    terms.push_back(step_ll);
  }
  NodeId root = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) root = tp.add(root, terms[i]);
  out.root = root;
  return out;
}

EvalResult eval_multitask(ObjectiveGraph& g, const ParamStore& params) {
  bind_params(g.tape, g.params, params);
  EvalResult out;
  out.value = g.tape.forward(g.root)(0, 0);
  g.tape.backward(g.root);
  out.grads = collect_grads(g.tape, g.params);
  return out;
}

double multitask_objective(const ParamStore& params, const MultitaskProblem& prob,
                           const std::vector<int>& steps, Rng& rng) {
  ObjectiveGraph g = build_multitask_graph(params, prob, steps, rng);
  bind_params(g.tape, g.params, params);
  return g.tape.forward(g.root)(0, 0);
}

namespace {

double mean_exp_of(const ParamStore& params, const char* which) {
  double sum = 0.0;
  int count = 0;
  const std::string key = std::string("noise.") + which;
  for (const auto& name : params.names()) {
    if (name.rfind(key, 0) == 0) {
      sum += std::exp(params.get(name)(0, 0));
      ++count;
    }
  }
  return count ? sum / count : 0.0;
}

}  // namespace

FitResult fit(ParamStore& params, const MultitaskProblem& prob, const FitOptions& opt,
              Rng& rng) {
  FitResult res;
  if (opt.iterations <= 0) return res;
  const int total = static_cast<int>(prob.acq->size());
  std::vector<int> all_steps(total);
  std::iota(all_steps.begin(), all_steps.end(), 1);

  const bool step_sub = total > opt.subsample_threshold;
  const bool inst_sub = prob.data->size() > prob.instance_cap;
  const bool rebuild = step_sub || inst_sub;

  ObjectiveGraph fixed;
  if (!rebuild) fixed = build_multitask_graph(params, prob, all_steps, rng);

  double lr = opt.learn_rate;
  bool halved = false;
  ParamStore last_good = params;
  for (int it = 0; it < opt.iterations; ++it) {
    ObjectiveGraph* g = &fixed;
    ObjectiveGraph scratch;
    if (rebuild) {
      std::vector<int> s = all_steps;
      if (step_sub) {
        s.clear();
        for (int idx : rng.sample_without_replacement(total, opt.subsample_size))
          s.push_back(idx + 1);
      }
      scratch = build_multitask_graph(params, prob, s, rng);
      g = &scratch;
    }
    EvalResult ev;
    std::string diag = "non-finite objective";
    bool bad = false;
    try {
      ev = eval_multitask(*g, params);
      bad = !std::isfinite(ev.value);
    } catch (const std::runtime_error& e) {
      diag = e.what();
      bad = true;
    }
    if (!bad) {
      for (auto& [name, grad] : ev.grads) grad = -grad;
      last_good = params;  // state before this update, for rollback
      bad = !adam_step(params, ev.grads, lr, &diag);
    }
    if (!bad)
      for (const auto& name : params.names())
        if (name.rfind("noise.", 0) == 0) {
          Mat& p = params.get(name);
          p = p.cwiseMax(-opt.log_noise_bound).cwiseMin(opt.log_noise_bound);
        }
    if (bad) {
      if (halved) {
        res.aborted = true;
        res.diagnostic = diag + " after halving the step size";
        return res;
      }
      halved = true;
      lr *= 0.5;
      params = last_good;
      continue;
    }
    res.objective.push_back(ev.value);
    res.beta_mean.push_back(mean_exp_of(params, "log_beta"));
    res.lambda_mean.push_back(mean_exp_of(params, "log_lambda"));
  }
  return res;
}

std::string fit_log_csv(const FitResult& r) {
  std::ostringstream out;
  out << "iter,objective,beta_mean,lambda_mean\n";
  for (size_t i = 0; i < r.objective.size(); ++i)
    out << (i + 1) << ',' << format_g12(r.objective[i]) << ',' << format_g12(r.beta_mean[i])
        << ',' << format_g12(r.lambda_mean[i]) << '\n';
  return out.str();
}

}  // namespace smsdkl
