#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "smsdkl/acquisition.hpp"
#include "smsdkl/core.hpp"
#include "smsdkl/diffgraph.hpp"
#include "smsdkl/rng.hpp"

namespace smsdkl {

// ---------------------------------------------------------------------------
// Correlated synthetic black-box family
//
// Each step's objective is a weighted sum of shared radial bumps over the
// normalized space, f_t(x) = sum_j alpha_j(t) * b_j(xhat). The weights follow
// an order-1 autoregressive path across steps with correlation rho, so
// adjacent steps share structure: rho=1 freezes the weights (every step is
// the same function) and rho=0 draws them independently. The exact optimum of
// every step is recorded on a dense grid at construction.

struct SynthFamily {
  int steps = 0;
  double rho = 0.0;
  double noise_sd = 0.0;
  HyperparamSpace space;
  Mat centers;             // bumps x normalized-width, bump centers
  Eigen::VectorXd widths;  // per-bump radial width
  Eigen::VectorXd signs;   // per-bump +-1
  Mat coeff;               // steps x bumps, AR(1) weight paths
  std::uint64_t seed = 0;  // also keys the frozen observation noise
  std::vector<double> oracle_value;        // grid maximum per step
  std::vector<HyperparamVector> oracle_x;  // grid argmax per step

  // Noiseless objective value at step t (t is 1-based, like Filtration).
  double value(int t, const HyperparamVector& x) const;

  // All T values at once, plus frozen observation noise: the noise is a pure
  // function of (family seed, x, t), so repeated queries and different
  // algorithms see identical observations for identical inputs.
  std::vector<double> evaluate(const HyperparamVector& x) const;
};

// Default benchmark domain: two continuous dims on the unit square.
HyperparamSpace synth_space();

SynthFamily synth_family(std::uint64_t seed, int steps, double rho,
                         const HyperparamSpace& space, int bumps);

struct GridMax {
  double value = 0.0;
  HyperparamVector x;
};

// Maximum of the noiseless f_t over a fixed dense grid with at least
// min_points points (range dims get even subdivisions, categorical dims are
// enumerated). Ties resolve to the lowest flattened grid index. The two
// implementations differ only in the OpenMP pragma and return identical
// results.
GridMax grid_eval_max_serial(const SynthFamily& fam, int t, int min_points);
GridMax grid_eval_max_parallel(const SynthFamily& fam, int t, int min_points);

// Wraps the family as a run problem for the optimizer loops.
MultiStepProblem synth_problem(const SynthFamily& fam);

// ---------------------------------------------------------------------------
// Drifting synthetic sequence dataset
//
// Per-feature AR(1) chains with a drifting mean feed a drifting logistic
// label rule. A break step restarts the chains (and shifts their means), the
// smooth knobs move the means and rotate the label weights a little every
// step. With everything at zero the generator is stationary.

struct DriftProfile {
  int instances = 200;
  int width = 4;
  double ar_coeff = 0.5;     // memory of the per-feature chains, in [0,1)
  double noise_sd = 1.0;     // innovation scale
  double mean_drift = 0.0;   // per-step linear drift of feature means
  int break_step = 0;        // 1-based regime break; 0 disables
  double break_size = 0.0;   // mean jump applied from the break onward
  double label_drift = 0.0;  // per-step rotation of the logistic weights
};

SequenceDataset synth_dataset(std::uint64_t seed, int steps,
                              const DriftProfile& profile);

// ---------------------------------------------------------------------------
// Trainable inner learner
//
// A deliberately tiny single-layer tanh recurrent classifier trained with
// Adam on binary cross-entropy plus L2, with input dropout. One evaluation
// trains the model once on the training split and scores average precision
// on every validation filtration, so a single pass prices all T steps.

struct InnerLearnerTask {
  SequenceDataset train;
  SequenceDataset valid;
  HyperparamSpace space;
  int steps = 0;
};

// The learner's hyperparameter space: hidden width, epochs, batch size,
// step-size exponent, weight-decay exponent, input dropout rate.
HyperparamSpace inner_space();

// Builds a drifting dataset and splits it 3:1 into train/validation.
InnerLearnerTask inner_task(std::uint64_t seed, int steps,
                            const DriftProfile& profile);

// Trains once, scores AUPRC per validation filtration. Deterministic given
// (x, seed). Divergent training (non-finite loss) falls back to the
// constant-classifier score and sets *diverged.
std::vector<double> inner_eval(const InnerLearnerTask& task,
                               const HyperparamVector& x, std::uint64_t seed,
                               bool* diverged = nullptr);

MultiStepProblem inner_problem(const InnerLearnerTask& task, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Metrics and diagnostics

// Average precision: the sum over distinct-score thresholds, taken in
// descending order, of (recall gain at the threshold) x (precision at the
// threshold). Tied scores form a single threshold, which is how ties are
// averaged rather than ordered. Degenerate label sets use the convention
// all-positive -> 1 and all-negative -> 0, with *degenerate set.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels,
             bool* degenerate = nullptr);

// Mean over features of the lag-1 Pearson correlation of (value_t,
// value_{t+1}) pairs pooled across instances and steps. Zero-variance
// features are excluded and reported through *excluded.
double feature_autocorr(const SequenceDataset& ds,
                        std::vector<int>* excluded = nullptr);

// Pearson correlation matrix of the per-step score columns across all
// acquisitions in the history. Requires >= 3 records. Entries involving a
// zero-variance column are NaN (the missing marker); the diagonal stays 1.
Mat performance_corr_matrix(const RunHistory& h);

// Stepwise readout of a history prefix: best observed y_t over the first
// `upto` records, per step. `upto` is clamped to the record count.
std::vector<double> wise_prefix(const RunHistory& h, int upto);

// Single-model readout of a history prefix: the y vector of the record with
// the best summed score among the first `upto` records.
std::vector<double> single_prefix(const RunHistory& h, int upto);

// Mean y_t over the k highest-performing records (ranked by mean score),
// one row per step: the trajectory of a typical top model.
std::vector<double> topk_trajectory(const RunHistory& h, int k);

// ---------------------------------------------------------------------------
// Experiment runner

struct ExperimentConfig {
  std::string name = "experiment";
  std::string task = "synth";  // "synth" or "inner"
  int steps = 8;

  // synth task
  double rho = 0.95;
  int bumps = 12;
  double noise_sd = 0.01;
  std::uint64_t family_seed = 1;

  // dataset fed to the sequence encoder (synth) or the learner (inner)
  DriftProfile dataset;

  std::vector<std::string> algorithms{"sms_dkl", "gp", "parego", "random"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<int> checkpoints{40, 100};
  RunConfig run;  // budgets and surrogate knobs; run.seed is set per run
};

// Parses the documented JSON config format; unknown keys are rejected.
ExperimentConfig parse_experiment_config(const std::string& text);

// The fully resolved config, echoing every default, as canonical JSON.
std::string experiment_config_json(const ExperimentConfig& cfg);

struct ExperimentResult {
  std::filesystem::path out_dir;
  std::vector<std::string> failures;  // one "<algo> seed <s>: why" per failure
};

// Runs the (algorithm x seed) grid — independent runs in an OpenMP worker
// pool — and writes the result bundle: per-run history CSVs (and parameter
// checkpoints for sms_dkl), the checkpoint table, per-algorithm convergence
// data, the resolved config, and the failure list. Everything in the bundle
// is a deterministic function of the config.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::filesystem::path& out_dir);

}  // namespace smsdkl
