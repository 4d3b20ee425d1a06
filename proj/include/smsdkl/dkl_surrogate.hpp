#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "smsdkl/core.hpp"
#include "smsdkl/diffgraph.hpp"
#include "smsdkl/feature_net.hpp"

namespace smsdkl {

// Thread-local multiply-accumulate estimate, incremented by the
// marginal-likelihood and posterior routines; reset it before a measurement.
std::int64_t& mac_counter();

// Bayesian linear regression posterior over head weights, built from the
// feature rows G (N x D) and scores y. K_w = I + (beta/lambda) G'G; the
// weight covariance is (lambda K_w)^{-1}.
struct BlrPosterior {
  Eigen::VectorXd m_w;
  Mat k_w;
  Eigen::LLT<Mat> chol;
  double beta = 1.0;
  double lambda = 1.0;
};

BlrPosterior posterior(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda);

// Predictive mean and variance at one feature vector: mu = m_w'g,
// sigma2 = (1/lambda) g' K_w^{-1} g.
std::pair<double, double> predict(const BlrPosterior& post, const Eigen::VectorXd& g);

// Log marginal likelihood of y given G. The primal form works in the D x D
// weight space, the dual in the N x N observation space; they agree to
// rounding and the dispatching version picks primal exactly when N > D.
double log_marginal_primal(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda);
double log_marginal_dual(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda);
double log_marginal(const Mat& g, const Eigen::VectorXd& y, double beta, double lambda);

// Score normalization per step: shift by the mean, scale by the population
// standard deviation floored at 1e-8.
struct StepStats {
  double mean = 0.0;
  double sd = 1.0;
};
StepStats score_stats(const std::vector<double>& y);
Eigen::VectorXd normalized_scores(const std::vector<double>& y, const StepStats& stats);

// Names and creation of the trained noise/prior precisions log beta_t and
// log lambda_t (all start at 0, i.e. beta = lambda = 1). With share = true a
// single pair covers every step.
std::string noise_name(const char* which, int t, bool share);
void init_noise_params(ParamStore& store, int steps, bool share);

// Everything the multi-task objective needs besides the parameters.
struct MultitaskProblem {
  const SequenceDataset* data = nullptr;
  const HyperparamSpace* space = nullptr;
  const std::vector<AcquisitionSet>* acq = nullptr;  // one per step, 1-based step ids inside
  FeatureNetDims dims;
  bool share_noise = false;
  int instance_cap = 256;
};

// A built objective tape: bind parameters, run forward/backward, read grads.
struct ObjectiveGraph {
  graph::Tape tape;
  std::map<std::string, graph::NodeId> params;
  graph::NodeId root = -1;
};

// Builds the summed per-step log marginal likelihood over the given 1-based
// steps. Instance pooling uses one seeded subsample (shared by all steps)
// when the dataset exceeds the cap.
ObjectiveGraph build_multitask_graph(const ParamStore& params, const MultitaskProblem& prob,
                                     const std::vector<int>& steps, Rng& rng);

// Bind + forward + backward on a built graph; grads are ascent-signed
// (gradients of the objective itself).
EvalResult eval_multitask(ObjectiveGraph& g, const ParamStore& params);

// Convenience single evaluation (builds a fresh graph).
double multitask_objective(const ParamStore& params, const MultitaskProblem& prob,
                           const std::vector<int>& steps, Rng& rng);

struct FitOptions {
  int iterations = 500;
  double learn_rate = 1e-2;
  int subsample_threshold = 32;  // step subsampling beyond this many steps
  int subsample_size = 32;
  double log_noise_bound = 10.0;  // |log beta|, |log lambda| kept inside this
};

struct FitResult {
  std::vector<double> objective;    // per accepted iteration
  std::vector<double> beta_mean;    // mean over steps of exp(log beta_t)
  std::vector<double> lambda_mean;
  bool aborted = false;
  std::string diagnostic;
};

// Adam ascent on the multi-task objective, warm-starting from the incoming
// parameters. A non-finite objective or gradient (or a factorization failure
// inside the graph) rolls the parameters back one step and halves the step
// size; a second occurrence aborts. The log noise precisions are projected
// into [-log_noise_bound, log_noise_bound] after every update: scores are
// normalized to unit variance before fitting, so precisions outside that
// range carry no information, and on noise-free objectives the evidence
// would otherwise push beta up until the head covariance loses definiteness.
FitResult fit(ParamStore& params, const MultitaskProblem& prob, const FitOptions& opt,
              Rng& rng);

// Training-log serialization: CSV `iter,objective,beta_mean,lambda_mean`.
std::string fit_log_csv(const FitResult& r);

}  // namespace smsdkl
