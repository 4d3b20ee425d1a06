#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "smsdkl/core.hpp"
#include "smsdkl/dkl_surrogate.hpp"
#include "smsdkl/feature_net.hpp"
#include "smsdkl/rng.hpp"

namespace smsdkl {

// Expected improvement under maximization: with sigma = sqrt(sigma2) and
// u = (mu - y_best)/sigma, ei = (mu - y_best) Phi(u) + sigma phi(u). A
// deterministic prediction (sigma2 = 0) reduces to max(mu - y_best, 0).
// Throws std::invalid_argument on negative variance.
double expected_improvement(double mu, double sigma2, double y_best);

struct StepProposal {
  int t = 0;                // 1-based step
  HyperparamVector x_star;
  double acq_value = 0.0;   // EI at x_star, never negative
  int candidate = 0;        // index into the pool that produced x_star
};

// One uniform batch of acquisition candidates, drawn once per BO iteration
// and shared by every step's argmax.
struct CandidatePool {
  std::vector<HyperparamVector> xs;
  Mat xn;  // normalized rows, one per candidate
};

CandidatePool draw_candidates(const HyperparamSpace& space, int count, Rng& rng);

// EI of every pool candidate under one step's fitted surrogate. The set
// embedding z is fixed here, so only the head network runs per candidate.
// The parallel variant fills disjoint entries from an OpenMP loop and
// matches the serial one bit for bit.
Eigen::VectorXd candidate_ei_serial(const ParamStore& params, const FeatureNetDims& dims,
                                    const Eigen::VectorXd& z, const Mat& xn,
                                    const BlrPosterior& post, double y_best);
Eigen::VectorXd candidate_ei_parallel(const ParamStore& params, const FeatureNetDims& dims,
                                      const Eigen::VectorXd& z, const Mat& xn,
                                      const BlrPosterior& post, double y_best);

// Argmax over the pool; equal values keep the lowest candidate index.
StepProposal propose_step(int t, const CandidatePool& pool, const Eigen::VectorXd& ei);

// Step-selection distribution p_t = a_t / sum_tau a_tau; an all-zero sum
// falls back to uniform. Throws std::invalid_argument on negative values.
std::vector<double> hedge_probabilities(const std::vector<double>& acq_values);

// Samples an index from the distribution with a single uniform draw.
int hedge_sample(const std::vector<double>& probs, Rng& rng);

// probabilities + sample in one call.
StepProposal hedge_select(const std::vector<StepProposal>& proposals, Rng& rng);

// A black box returning one score per step for a single evaluation, or
// nothing when the evaluation fails.
struct MultiStepProblem {
  int steps = 1;
  std::function<std::optional<std::vector<double>>(const HyperparamVector&)> eval;
};

struct IterationRecord {
  int iter = 0;      // 1-based row number, counting the initial design
  int chosen_t = 0;  // selected step; 0 for initial-design rows
  HyperparamVector x;
  std::vector<double> y;          // observed y_1..y_T
  std::vector<double> incumbent;  // running best y_t, non-decreasing per t
  std::vector<HyperparamVector> incumbent_x;
  std::vector<double> p;          // selection probabilities; zeros for init rows
  double seconds = 0.0;
};

struct RunHistory {
  int steps = 0;
  std::vector<IterationRecord> records;
  // 1-based evaluation attempts (across init + BO) whose problem call failed.
  std::vector<int> failed_attempts;
};

// History table `iter,chosen_t,x_json,y_1..y_T,inc_1..inc_T,p_1..p_T,seconds`.
// x_json is a quoted JSON object keyed by dimension name.
std::string history_csv(const RunHistory& h, const HyperparamSpace& space);
RunHistory parse_history_csv(const std::string& text, const HyperparamSpace& space);

// Test/diagnostic hook: replaces the surrogate predictive (mu, sigma2) for
// each step's candidate batch. With a constant prediction every candidate
// ties, the argmax falls to index 0 of a fresh uniform pool, and the run
// degenerates to random search.
struct AcquisitionOverride {
  std::function<void(int t, const Mat& xn, Eigen::VectorXd& mu, Eigen::VectorXd& sigma2)>
      predict;
};

struct SmsRunResult {
  RunHistory history;
  ParamStore params;            // surrogate parameters after the final fit
  std::vector<FitResult> fits;  // one training trace per BO iteration
};

// The full optimizer loop: a shared random initial design, then per
// iteration fit -> per-step posterior rebuild -> shared-pool argmax ->
// stochastic step selection -> one evaluation appended to every step's
// history. Failed evaluations are recorded and skipped; acquisition-set
// sizes advance only on success.
SmsRunResult sms_dkl_run(const MultiStepProblem& problem, const SequenceDataset& ds,
                         const HyperparamSpace& space, const RunConfig& cfg,
                         const AcquisitionOverride* injected = nullptr);

}  // namespace smsdkl
