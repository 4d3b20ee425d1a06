#pragma once

#include <utility>
#include <vector>

#include "smsdkl/acquisition.hpp"
#include "smsdkl/core.hpp"
#include "smsdkl/rng.hpp"

namespace smsdkl {

// Matern-5/2 kernel with per-dimension lengthscales:
// sf2 (1 + sqrt5 r + 5 r^2/3) exp(-sqrt5 r), r^2 = sum_j (a_j-b_j)^2/ell_j^2.
double matern52_ard(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                    const Eigen::VectorXd& ell, double sf2);

// Kernel matrix over the rows of x (no noise term). The parallel variant
// fills disjoint rows from an OpenMP loop and matches the serial one bit
// for bit.
Mat gram_matrix_serial(const Mat& x, const Eigen::VectorXd& ell, double sf2);
Mat gram_matrix_parallel(const Mat& x, const Eigen::VectorXd& ell, double sf2);

// Exact-inference Gaussian-process regressor on standardized targets.
struct GpModel {
  Eigen::VectorXd log_ell;
  double log_sf2 = 0.0;
  double log_sn2 = 0.0;
  Mat x;                  // training inputs, one row per observation
  double y_mean = 0.0;    // standardization of the raw targets
  double y_sd = 1.0;
  Eigen::LLT<Mat> chol;   // of K + sn2 I
  Eigen::VectorXd alpha;  // (K + sn2 I)^{-1} y_standardized
  double lml = 0.0;       // log marginal likelihood at the fitted parameters
};

// Log marginal likelihood of standardized targets and its gradient in
// (log_ell_1..log_ell_d, log_sf2, log_sn2).
double gp_lml(const Mat& x, const Eigen::VectorXd& y, const Eigen::VectorXd& log_ell,
              double log_sf2, double log_sn2);
Eigen::VectorXd gp_lml_grad(const Mat& x, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& log_ell, double log_sf2, double log_sn2);

// Empirical-Bayes fit: standardizes y, then runs 5 seeded multi-start Adam
// ascents (200 steps each) on the log hyperparameters and keeps the best.
// The noise floor is log(1e-8). Throws std::invalid_argument when fewer
// than two observations are given.
GpModel gp_fit(const Mat& x, const Eigen::VectorXd& y, Rng& rng);

// Latent posterior mean and variance at one input, on the raw target scale.
std::pair<double, double> gp_predict(const GpModel& m, const Eigen::VectorXd& x);

// Single-objective EI Bayesian optimization on f_sum(x) = sum_t y_t(x),
// recording the full per-step score vector each acquisition so stepwise
// post-selection can run on the history. Shares the initial-design draw
// protocol with sms_dkl_run: the same cfg.seed gives the same init points.
RunHistory gp_bo_run(const MultiStepProblem& problem, const HyperparamSpace& space,
                     const RunConfig& cfg);

// Uniform random search. Same initial-design protocol and history schema as
// the model-based loops, so it slots into the same comparisons.
RunHistory random_search_run(const MultiStepProblem& problem,
                             const HyperparamSpace& space, const RunConfig& cfg);

// Per-column affine rescale of y onto [0,1] over the current observations;
// a constant column becomes all zeros.
Mat rescale_columns(const Mat& y);

// Uniform draw from the probability simplex (normalized exponentials).
Eigen::VectorXd sample_simplex(int t, Rng& rng);

// Augmented weighted-max scalarization of pre-rescaled scores: per row,
// max_t(theta_t yhat_t) + 0.05 sum_t theta_t yhat_t.
Eigen::VectorXd parego_scalarize(const Mat& y_rescaled, const Eigen::VectorXd& theta);

// Scalarization-based multi-objective baseline: each iteration draws a fresh
// simplex weight, scalarizes all past observations, and runs one EI step of
// GP BO on the scalarized targets. theta_override (one entry per BO
// iteration) pins the weight sequence for tests.
RunHistory parego_run(const MultiStepProblem& problem, const HyperparamSpace& space,
                      const RunConfig& cfg,
                      const std::vector<Eigen::VectorXd>* theta_override = nullptr);

struct StepIncumbent {
  HyperparamVector x;
  double y = 0.0;
};

// Stepwise post-selection: for each step, the acquisition with the best
// observed y_t, searched over every recorded row.
std::vector<StepIncumbent> posthoc_stepwise(const RunHistory& h);

// Index of the record whose summed score is largest: the best single model.
int single_model_incumbent(const RunHistory& h);

}  // namespace smsdkl
