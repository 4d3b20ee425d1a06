#include "smsdkl/acquisition.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "smsdkl/io.hpp"

namespace smsdkl {

double expected_improvement(double mu, double sigma2, double y_best) {
  if (sigma2 < 0.0) throw std::invalid_argument("expected_improvement: negative variance");
  const double diff = mu - y_best;
  if (sigma2 == 0.0) return std::max(diff, 0.0);
  const double sigma = std::sqrt(sigma2);
  const double u = diff / sigma;
  const double cdf = 0.5 * std::erfc(-u / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
  return std::max(diff * cdf + sigma * pdf, 0.0);
}

CandidatePool draw_candidates(const HyperparamSpace& space, int count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("draw_candidates: count must be positive");
  CandidatePool pool;
  pool.xs.reserve(count);
  for (int i = 0; i < count; ++i) pool.xs.push_back(sample_uniform(space, rng));
  pool.xn = normalize_rows(space, pool.xs);
  return pool;
}

namespace {

double candidate_ei_at(const ParamStore& params, const FeatureNetDims& dims,
                       const Eigen::VectorXd& z, const Mat& xn, int i,
                       const BlrPosterior& post, double y_best) {
  const Eigen::VectorXd g = feature_map(params, dims, z, xn.row(i).transpose());
  auto [mu, sigma2] = predict(post, g);
  return expected_improvement(mu, std::max(sigma2, 0.0), y_best);
}

}  // namespace

Eigen::VectorXd candidate_ei_serial(const ParamStore& params, const FeatureNetDims& dims,
                                    const Eigen::VectorXd& z, const Mat& xn,
                                    const BlrPosterior& post, double y_best) {
  Eigen::VectorXd ei(xn.rows());
  for (int i = 0; i < xn.rows(); ++i)
    ei[i] = candidate_ei_at(params, dims, z, xn, i, post, y_best);
  return ei;
}

Eigen::VectorXd candidate_ei_parallel(const ParamStore& params, const FeatureNetDims& dims,
                                      const Eigen::VectorXd& z, const Mat& xn,
                                      const BlrPosterior& post, double y_best) {
  Eigen::VectorXd ei(xn.rows());
  const int n = static_cast<int>(xn.rows());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    ei[i] = candidate_ei_at(params, dims, z, xn, i, post, y_best);
  return ei;
}

StepProposal propose_step(int t, const CandidatePool& pool, const Eigen::VectorXd& ei) {
  if (pool.xs.empty()) throw std::invalid_argument("propose_step: empty candidate pool");
  if (ei.size() != static_cast<Eigen::Index>(pool.xs.size()))
    throw std::invalid_argument("propose_step: ei size does not match the pool");
  int best = 0;
  for (int i = 1; i < ei.size(); ++i)
    if (ei[i] > ei[best]) best = i;
  return {t, pool.xs[best], ei[best], best};
}

std::vector<double> hedge_probabilities(const std::vector<double>& acq_values) {
  if (acq_values.empty())
    throw std::invalid_argument("hedge_probabilities: no acquisition values");
  double sum = 0.0;
  for (double v : acq_values) {
    if (v < 0.0) throw std::invalid_argument("hedge_probabilities: negative acquisition value");
    sum += v;
  }
  std::vector<double> p(acq_values.size());
  if (sum <= 0.0) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(p.size()));
  } else {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = acq_values[i] / sum;
  }
  return p;
}

int hedge_sample(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

StepProposal hedge_select(const std::vector<StepProposal>& proposals, Rng& rng) {
  std::vector<double> values(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) values[i] = proposals[i].acq_value;
  return proposals[hedge_sample(hedge_probabilities(values), rng)];
}

namespace {

std::string x_json(const HyperparamSpace& space, const HyperparamVector& x) {
  nlohmann::ordered_json obj;
  for (int d = 0; d < space.size(); ++d) obj[space.dims()[d].name] = x.values[d];
  return obj.dump();
}

HyperparamVector parse_x_json(const HyperparamSpace& space, const std::string& text) {
  const auto obj = nlohmann::json::parse(text);
  HyperparamVector x;
  x.values.reserve(space.size());
  for (const auto& dim : space.dims()) {
    if (!obj.contains(dim.name))
      throw std::runtime_error("history: x_json is missing dimension " + dim.name);
    x.values.push_back(obj[dim.name].get<double>());
  }
  return x;
}

}  // namespace

std::string history_csv(const RunHistory& h, const HyperparamSpace& space) {
  std::ostringstream out;
  out << "iter,chosen_t,x_json";
  for (int t = 1; t <= h.steps; ++t) out << ",y_" << t;
  for (int t = 1; t <= h.steps; ++t) out << ",inc_" << t;
  for (int t = 1; t <= h.steps; ++t) out << ",p_" << t;
  out << ",seconds\n";
  for (const auto& r : h.records) {
    out << r.iter << ',' << r.chosen_t << ',' << csv_quote(x_json(space, r.x));
    for (double v : r.y) out << ',' << format_g12(v);
    for (double v : r.incumbent) out << ',' << format_g12(v);
    for (double v : r.p) out << ',' << format_g12(v);
    out << ',' << format_g12(r.seconds) << '\n';
  }
  return out.str();
}

RunHistory parse_history_csv(const std::string& text, const HyperparamSpace& space) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("history: empty file");
  const auto header = csv_split(line);
  if (header.size() < 7 || (header.size() - 4) % 3 != 0)
    throw std::runtime_error("history: malformed header");
  const int steps = static_cast<int>((header.size() - 4) / 3);
  if (header[0] != "iter" || header[1] != "chosen_t" || header[2] != "x_json" ||
      header[3] != "y_1" || header.back() != "seconds")
    throw std::runtime_error("history: unexpected header columns");

  RunHistory h;
  h.steps = steps;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != header.size()) throw std::runtime_error("history: ragged row");
    IterationRecord r;
    r.iter = std::atoi(f[0].c_str());
    r.chosen_t = std::atoi(f[1].c_str());
    r.x = parse_x_json(space, f[2]);
    int col = 3;
    for (int t = 0; t < steps; ++t) r.y.push_back(std::strtod(f[col++].c_str(), nullptr));
    for (int t = 0; t < steps; ++t)
      r.incumbent.push_back(std::strtod(f[col++].c_str(), nullptr));
    for (int t = 0; t < steps; ++t) r.p.push_back(std::strtod(f[col++].c_str(), nullptr));
    r.seconds = std::strtod(f[col].c_str(), nullptr);
    h.records.push_back(std::move(r));
  }
  return h;
}

namespace {

class StopWatch {
 public:
  explicit StopWatch(bool enabled) : enabled_(enabled), start_(Clock::now()) {}
  double seconds() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double>(Clock::now() - start_).count();
  }

 private:
  using Clock = std::chrono::steady_clock;
  bool enabled_;
  Clock::time_point start_;
};

}  // namespace

SmsRunResult sms_dkl_run(const MultiStepProblem& problem, const SequenceDataset& ds,
                         const HyperparamSpace& space, const RunConfig& cfg,
                         const AcquisitionOverride* injected) {
  cfg.validate();
  const int T = problem.steps;
  if (T < 1) throw std::invalid_argument("sms_dkl_run: problem needs at least one step");
  if (!problem.eval) throw std::invalid_argument("sms_dkl_run: problem has no evaluator");
  if (ds.size() == 0) throw std::invalid_argument("sms_dkl_run: empty dataset");
  if (T > ds.max_steps())
    throw std::invalid_argument("sms_dkl_run: more steps than the dataset provides");

  Rng rng(cfg.seed);
  std::vector<AcquisitionSet> acq(T);
  for (int t = 0; t < T; ++t) acq[t].t = t + 1;

  SmsRunResult out;
  out.history.steps = T;

  std::vector<double> best(T, -std::numeric_limits<double>::infinity());
  std::vector<HyperparamVector> best_x(T);
  int attempts = 0;

  auto record = [&](int chosen_t, const HyperparamVector& x, const std::vector<double>& y,
                    const std::vector<double>& p, double seconds) {
    for (int t = 0; t < T; ++t) {
      if (y[t] > best[t]) {
        best[t] = y[t];
        best_x[t] = x;
      }
    }
    IterationRecord r;
    r.iter = static_cast<int>(out.history.records.size()) + 1;
    r.chosen_t = chosen_t;
    r.x = x;
    r.y = y;
    r.incumbent = best;
    r.incumbent_x = best_x;
    r.p = p;
    r.seconds = seconds;
    out.history.records.push_back(std::move(r));
  };

  auto evaluate = [&](const HyperparamVector& x) -> std::optional<std::vector<double>> {
    ++attempts;
    auto y = problem.eval(x);
    if (y && static_cast<int>(y->size()) != T)
      throw std::runtime_error("sms_dkl_run: problem returned the wrong number of scores");
    if (!y) out.history.failed_attempts.push_back(attempts);
    return y;
  };

  const std::vector<double> no_policy(T, 0.0);
  for (int i = 0; i < cfg.n_init; ++i) {
    StopWatch watch(cfg.record_timing);
    const HyperparamVector x = sample_uniform(space, rng);
    const auto y = evaluate(x);
    if (!y) continue;
    for (int t = 0; t < T; ++t) acq[t].append(x, (*y)[t]);
    record(0, x, *y, no_policy, watch.seconds());
  }

  FeatureNetDims dims =
      FeatureNetDims::from_config(cfg, ds.feature_width(), space.normalized_width());
  ParamStore params;
  init_feature_net(params, dims, rng);
  init_noise_params(params, T, cfg.share_noise);

  MultitaskProblem mt;
  mt.data = &ds;
  mt.space = &space;
  mt.acq = &acq;
  mt.dims = dims;
  mt.share_noise = cfg.share_noise;
  mt.instance_cap = cfg.instance_cap;

  FitOptions fopt;
  fopt.iterations = cfg.m_train;
  fopt.learn_rate = cfg.learn_rate;
  fopt.subsample_threshold = cfg.subsample_threshold;
  fopt.subsample_size = cfg.subsample_size;

  std::vector<int> all_steps(T);
  for (int t = 0; t < T; ++t) all_steps[t] = t + 1;

  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    StopWatch watch(cfg.record_timing);
    const bool have_data = acq[0].size() > 0;

    if (have_data && !injected) {
      if (!cfg.warm_start && iter > 0) {
        params = ParamStore();
        init_feature_net(params, dims, rng);
        init_noise_params(params, T, cfg.share_noise);
      }
      out.fits.push_back(fit(params, mt, fopt, rng));
    }

    const std::vector<int> subset = encoding_subset(ds.size(), cfg.instance_cap, rng);
    const CandidatePool pool = draw_candidates(space, cfg.candidate_pool, rng);

    std::vector<StepProposal> proposals;
    proposals.reserve(T);
    for (int t = 1; t <= T; ++t) {
      Eigen::VectorXd ei;
      if (!have_data) {
        ei = Eigen::VectorXd::Zero(pool.xn.rows());
      } else if (injected) {
        Eigen::VectorXd mu, sigma2;
        injected->predict(t, pool.xn, mu, sigma2);
        const Eigen::VectorXd yhat = normalized_scores(acq[t - 1].y, score_stats(acq[t - 1].y));
        const double y_best = yhat.maxCoeff();
        ei.resize(pool.xn.rows());
        for (int i = 0; i < ei.size(); ++i)
          ei[i] = expected_improvement(mu[i], std::max(sigma2[i], 0.0), y_best);
      } else {
        const Eigen::VectorXd z = encode_set(
            params, dims, encode_batch_parallel(params, dims, filtration(ds, t), subset));
        const Eigen::VectorXd yhat = normalized_scores(acq[t - 1].y, score_stats(acq[t - 1].y));
        const Mat g = feature_matrix(params, dims, z, normalize_rows(space, acq[t - 1].X));
        const double beta =
            std::exp(params.get(noise_name("log_beta", t, cfg.share_noise))(0, 0));
        const double lambda =
            std::exp(params.get(noise_name("log_lambda", t, cfg.share_noise))(0, 0));
        const BlrPosterior post = posterior(g, yhat, beta, lambda);
        ei = candidate_ei_parallel(params, dims, z, pool.xn, post, yhat.maxCoeff());
      }
      proposals.push_back(propose_step(t, pool, ei));
    }

    std::vector<double> values(T);
    for (int t = 0; t < T; ++t) values[t] = proposals[t].acq_value;
    const std::vector<double> p = hedge_probabilities(values);
    const StepProposal& chosen = proposals[hedge_sample(p, rng)];

    const auto y = evaluate(chosen.x_star);
    if (!y) continue;
    for (int t = 0; t < T; ++t) acq[t].append(chosen.x_star, (*y)[t]);
    record(chosen.t, chosen.x_star, *y, p, watch.seconds());
  }

  out.params = std::move(params);
  return out;
}

}  // namespace smsdkl
