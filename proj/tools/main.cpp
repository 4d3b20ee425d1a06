#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smsdkl/baselines.hpp"
#include "smsdkl/benchharness.hpp"
#include "smsdkl/dkl_surrogate.hpp"
#include "smsdkl/feature_net.hpp"
#include "smsdkl/io.hpp"
#include "svgplot.hpp"

namespace fs = std::filesystem;
using namespace smsdkl;

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;  // non-numeric cells parse to NaN
};

CsvTable read_numeric_csv(const fs::path& path) {
  CsvTable table;
  const std::string text = read_file(path.string());
  std::string line;
  bool first = true;
  for (size_t pos = 0; pos <= text.size(); ++pos) {
    if (pos < text.size() && text[pos] != '\n') {
      line += text[pos];
      continue;
    }
    if (!line.empty()) {
      const auto cells = csv_split(line);
      if (first) {
        table.header = cells;
        first = false;
      } else {
        std::vector<double> row;
        for (const auto& c : cells) {
          char* end = nullptr;
          const double v = std::strtod(c.c_str(), &end);
          row.push_back(end == c.c_str() ? std::nan("") : v);
        }
        table.rows.push_back(std::move(row));
      }
    }
    line.clear();
  }
  return table;
}

int column_of(const CsvTable& t, const std::string& name) {
  const auto it = std::find(t.header.begin(), t.header.end(), name);
  return it == t.header.end() ? -1 : static_cast<int>(it - t.header.begin());
}

std::optional<fs::path> find_config_upward(fs::path dir) {
  for (int depth = 0; depth < 5; ++depth) {
    const fs::path candidate = dir / "config.json";
    if (fs::exists(candidate)) return candidate;
    if (!dir.has_parent_path() || dir.parent_path() == dir) break;
    dir = dir.parent_path();
  }
  return std::nullopt;
}

std::optional<std::uint64_t> seed_from_path(const fs::path& p) {
  for (const auto& part : p) {
    const std::string s = part.string();
    if (s.rfind("seed_", 0) == 0) {
      char* end = nullptr;
      const std::uint64_t v = std::strtoull(s.c_str() + 5, &end, 10);
      if (end && *end == '\0') return v;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// run

int cmd_run(const std::string& config_path, std::string out_dir) {
  const ExperimentConfig cfg = parse_experiment_config(read_file(config_path));
  if (out_dir.empty()) out_dir = cfg.name + "_bundle";
  std::printf("experiment '%s': task=%s steps=%d algorithms=%zu seeds=%zu\n",
              cfg.name.c_str(), cfg.task.c_str(), cfg.steps,
              cfg.algorithms.size(), cfg.seeds.size());
  const ExperimentResult result = run_experiment(cfg, out_dir);
  for (const auto& f : result.failures)
    std::fprintf(stderr, "run failed: %s\n", f.c_str());
  std::printf("bundle written to %s (%zu failures)\n",
              result.out_dir.string().c_str(), result.failures.size());
  return 0;
}

// ---------------------------------------------------------------------------
// check

// Like grad_check but with a five-point Richardson stencil, which keeps the
// truncation error well below the comparison tolerance at a step size large
// enough to survive the objective's noise floor.
double richardson_grad_check(const DiffFn& fn, const ParamStore& params,
                             double eps) {
  const EvalResult base = fn(params);
  double worst = 0.0;
  ParamStore probe = params;
  for (const auto& name : params.names()) {
    Mat& p = probe.get(name);
    const auto it = base.grads.find(name);
    const Mat* analytic = it != base.grads.end() ? &it->second : nullptr;
    for (long r = 0; r < p.rows(); ++r)
      for (long c = 0; c < p.cols(); ++c) {
        const double keep = p(r, c);
        const auto at = [&](double shift) {
          p(r, c) = keep + shift;
          return fn(probe).value;
        };
        const double numeric =
            (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) /
            (12.0 * eps);
        p(r, c) = keep;
        const double a = analytic ? (*analytic)(r, c) : 0.0;
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
      }
  }
  return worst;
}

bool report(const char* name, bool ok, double measured, const char* detail) {
  std::printf("%s %s (%s = %.3g)\n", ok ? "PASS" : "FAIL", name, detail, measured);
  return ok;
}

bool check_primal_dual() {
  Rng rng(1);
  double worst = 0;
  for (int c = 0; c < 200; ++c) {
    const int n = rng.uniform_int(1, 20);
    const int d = rng.uniform_int(1, 20);
    Mat g(n, d);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      y[i] = rng.normal();
      for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
    }
    const double beta = std::exp(rng.uniform(-2, 2));
    const double lambda = std::exp(rng.uniform(-2, 2));
    const double a = log_marginal_primal(g, y, beta, lambda);
    const double b = log_marginal_dual(g, y, beta, lambda);
    worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(a)));
  }
  return report("weight-space and observation-space likelihoods agree",
                worst < 1e-8, worst, "worst rel diff");
}

bool check_posterior() {
  Rng rng(2);
  double worst = 0;
  for (int c = 0; c < 100; ++c) {
    const int n = rng.uniform_int(2, 25);
    const int d = rng.uniform_int(1, 12);
    Mat g(n, d);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      y[i] = rng.normal();
      for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
    }
    const double beta = std::exp(rng.uniform(-2, 2));
    const double lambda = std::exp(rng.uniform(-2, 2));
    const BlrPosterior post = posterior(g, y, beta, lambda);

    const Mat kw_inv =
        (Mat::Identity(d, d) + (beta / lambda) * g.transpose() * g).inverse();
    const Eigen::VectorXd m = (beta / lambda) * kw_inv * (g.transpose() * y);
    worst = std::max(worst, (post.m_w - m).norm() / std::max(1.0, m.norm()));
    for (int k = 0; k < 5; ++k) {
      Eigen::VectorXd q(d);
      for (int j = 0; j < d; ++j) q[j] = rng.normal();
      const auto [mu, s2] = predict(post, q);
      const double mu_ref = m.dot(q);
      const double s2_ref = q.dot(kw_inv * q) / lambda;
      worst = std::max(worst, std::abs(mu - mu_ref) / std::max(1.0, std::abs(mu_ref)));
      worst = std::max(worst, std::abs(s2 - s2_ref) / std::max(1.0, s2_ref));
    }
  }
  return report("posterior and predictive match the dense-inverse oracle",
                worst < 1e-8, worst, "worst rel err");
}

bool check_gradients() {
  double worst = 0;
  for (std::uint64_t seed = 40; seed < 43; ++seed) {
    Rng rng(seed);
    DriftProfile profile;
    profile.instances = 5;
    profile.width = 2;
    const SequenceDataset ds = synth_dataset(seed, 3, profile);
    const HyperparamSpace space = synth_space();

    FeatureNetDims dims;
    dims.input_width = 3;
    dims.x_width = 2;
    dims.lstm_hidden = 3;
    dims.set_width = 4;
    dims.mlp_width = 4;
    dims.embed_dim = 2;
    dims.feature_dim = 4;

    ParamStore params;
    init_feature_net(params, dims, rng);
    init_noise_params(params, 3, false);
    // Move the rectifier pre-activations off their kinks so the numeric
    // probes stay on one side.
    for (const char* b : {"set.b1", "set.b2", "set.b3"})
      params.get(b).array() += 0.45;

    std::vector<AcquisitionSet> acq(3);
    for (int t = 1; t <= 3; ++t) {
      acq[t - 1].t = t;
      for (int i = 0; i < 3; ++i)
        acq[t - 1].append(sample_uniform(space, rng), rng.normal());
    }
    MultitaskProblem prob;
    prob.data = &ds;
    prob.space = &space;
    prob.acq = &acq;
    prob.dims = dims;

    Rng build_rng(7);
    ObjectiveGraph graph = build_multitask_graph(params, prob, {1, 2, 3}, build_rng);
    const DiffFn fn = [&graph](const ParamStore& p) { return eval_multitask(graph, p); };
    worst = std::max(worst, richardson_grad_check(fn, params, 2.5e-3));
  }
  return report("objective gradients match finite differences", worst < 1e-3,
                worst, "worst rel err");
}

bool check_permutation_invariance() {
  Rng rng(5);
  double worst = 0;
  for (int c = 0; c < 25; ++c) {
    DriftProfile profile;
    profile.instances = rng.uniform_int(3, 8);
    profile.width = rng.uniform_int(1, 3);
    const int steps = rng.uniform_int(2, 4);
    const SequenceDataset ds = synth_dataset(1000 + c, steps, profile);

    FeatureNetDims dims;
    dims.input_width = profile.width + 1;
    dims.x_width = 2;
    dims.lstm_hidden = rng.uniform_int(2, 5);
    dims.set_width = 4;
    dims.mlp_width = 4;
    dims.embed_dim = rng.uniform_int(1, 3);
    dims.feature_dim = 4;
    ParamStore params;
    init_feature_net(params, dims, rng);

    const Filtration filt(ds, rng.uniform_int(1, steps));
    std::vector<int> subset(ds.size());
    std::iota(subset.begin(), subset.end(), 0);
    std::vector<int> shuffled = subset;
    for (int i = static_cast<int>(shuffled.size()) - 1; i > 0; --i)
      std::swap(shuffled[i], shuffled[rng.uniform_int(0, i)]);

    const Eigen::VectorXd z1 =
        encode_set(params, dims, encode_batch_serial(params, dims, filt, subset));
    const Eigen::VectorXd z2 =
        encode_set(params, dims, encode_batch_serial(params, dims, filt, shuffled));
    worst = std::max(worst, (z1 - z2).cwiseAbs().maxCoeff());
  }
  return report("set embedding ignores instance order", worst < 1e-12, worst,
                "worst abs diff");
}

int cmd_check() {
  bool ok = true;
  ok &= check_primal_dual();
  ok &= check_posterior();
  ok &= check_gradients();
  ok &= check_permutation_invariance();
  std::printf("%s\n", ok ? "all checks passed" : "CHECKS FAILED");
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// plot

int cmd_plot(const std::string& bundle_arg) {
  const fs::path bundle(bundle_arg);
  const ExperimentConfig cfg =
      parse_experiment_config(read_file((bundle / "config.json").string()));
  const fs::path plots = bundle / "plots";
  fs::create_directories(plots);
  int written = 0;

  std::vector<svgplot::Series> value, regret;
  for (const auto& algo : cfg.algorithms) {
    const fs::path file = bundle / "convergence" / (algo + ".csv");
    if (!fs::exists(file)) continue;
    const CsvTable t = read_numeric_csv(file);
    const int ci = column_of(t, "iter");
    const int cv = column_of(t, "value_mean");
    const int cs = column_of(t, "value_stderr");
    const int cr = column_of(t, "regret_mean");
    const int cre = column_of(t, "regret_stderr");
    svgplot::Series sv{algo, {}, {}, {}};
    svgplot::Series sr{algo, {}, {}, {}};
    for (const auto& row : t.rows) {
      sv.x.push_back(row[ci]);
      sv.y.push_back(row[cv]);
      sv.band.push_back(row[cs]);
      if (cr >= 0) {
        sr.x.push_back(row[ci]);
        sr.y.push_back(row[cr]);
        sr.band.push_back(row[cre]);
      }
    }
    value.push_back(std::move(sv));
    if (cr >= 0) regret.push_back(std::move(sr));
  }
  if (!value.empty()) {
    atomic_write((plots / "convergence_value.svg").string(),
                 svgplot::line_plot("Best-per-step mean vs evaluations",
                                    "evaluations", "mean best score", value));
    ++written;
  }
  if (!regret.empty()) {
    atomic_write((plots / "convergence_regret.svg").string(),
                 svgplot::line_plot("Mean per-step regret vs evaluations",
                                    "evaluations", "mean regret", regret));
    ++written;
  }

  // Final-checkpoint stepwise readout across steps, one line per algorithm.
  const CsvTable ck = read_numeric_csv(bundle / "checkpoints.csv");
  const int ccp = column_of(ck, "checkpoint");
  const int cst = column_of(ck, "step");
  double last_cp = 0;
  for (const auto& row : ck.rows) last_cp = std::max(last_cp, row[ccp]);
  std::vector<svgplot::Series> steps;
  for (const auto& algo : cfg.algorithms) {
    const int cm = column_of(ck, algo + "_wise_mean");
    const int ce = column_of(ck, algo + "_wise_stderr");
    if (cm < 0) continue;
    svgplot::Series s{algo, {}, {}, {}};
    for (const auto& row : ck.rows)
      if (row[ccp] == last_cp) {
        s.x.push_back(row[cst]);
        s.y.push_back(row[cm]);
        s.band.push_back(ce >= 0 ? row[ce] : 0.0);
      }
    steps.push_back(std::move(s));
  }
  if (!steps.empty()) {
    char title[96];
    std::snprintf(title, sizeof title, "Stepwise readout at checkpoint %.0f",
                  last_cp);
    atomic_write((plots / "checkpoint_steps.svg").string(),
                 svgplot::line_plot(title, "step", "best score", steps));
    ++written;
  }

  std::printf("wrote %d plots to %s\n", written, plots.string().c_str());
  return written > 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// diag

int cmd_diag(const std::string& path_arg, int top_k, std::string task_flag) {
  fs::path history_path(path_arg);
  fs::path run_dir;
  if (fs::is_directory(history_path)) {
    run_dir = history_path;
    history_path = run_dir / "history.csv";
  } else {
    run_dir = history_path.parent_path();
  }

  std::optional<ExperimentConfig> cfg;
  if (const auto config_path = find_config_upward(run_dir))
    cfg = parse_experiment_config(read_file(config_path->string()));
  if (cfg) task_flag = cfg->task;
  if (task_flag != "synth" && task_flag != "inner")
    throw std::invalid_argument(
        "no config.json found near the history; pass --task synth|inner");
  const HyperparamSpace space =
      task_flag == "synth" ? synth_space() : inner_space();

  const RunHistory h =
      parse_history_csv(read_file(history_path.string()), space);
  std::printf("history: %zu records, %d steps, %zu failed attempts\n",
              h.records.size(), h.steps, h.failed_attempts.size());

  std::printf("\nper-step score correlation across acquisitions:\n      ");
  for (int t = 1; t <= h.steps; ++t) std::printf("   t=%-3d", t);
  std::printf("\n");
  const Mat corr = performance_corr_matrix(h);
  for (int a = 0; a < h.steps; ++a) {
    std::printf("t=%-4d", a + 1);
    for (int b = 0; b < h.steps; ++b) {
      if (std::isfinite(corr(a, b)))
        std::printf(" %+.4f", corr(a, b));
      else
        std::printf("     --");
    }
    std::printf("\n");
  }

  const int k = std::min<int>(top_k, static_cast<int>(h.records.size()));
  const auto top = topk_trajectory(h, k);
  const auto wise = wise_prefix(h, static_cast<int>(h.records.size()));
  std::printf("\nstep   best observed   top-%d mean\n", k);
  for (int t = 0; t < h.steps; ++t)
    std::printf("%4d   %13.6g   %10.6g\n", t + 1, wise[t], top[t]);

  // Embedding trace: needs the run's saved parameters plus the config to
  // rebuild the dataset the encoder saw.
  const fs::path params_path = run_dir / "params.txt";
  if (cfg && fs::exists(params_path)) {
    const auto seed = seed_from_path(run_dir);
    if (seed) {
      const ParamStore params = ParamStore::load(params_path.string());
      SequenceDataset ds =
          cfg->task == "synth"
              ? synth_dataset(Rng(cfg->family_seed).child(*seed).seed(),
                              cfg->steps, cfg->dataset)
              : inner_task(Rng(cfg->family_seed).child(*seed).seed(),
                           cfg->steps, cfg->dataset)
                    .train;
      const FeatureNetDims dims = FeatureNetDims::from_config(
          cfg->run, ds.feature_width(), space.normalized_width());
      Rng subset_rng(0);
      const std::vector<int> subset =
          encoding_subset(ds.size(), cfg->run.instance_cap, subset_rng);
      std::printf("\nset embedding by step (fresh encoding subsample):\n");
      for (int t = 1; t <= cfg->steps; ++t) {
        const Filtration filt(ds, t);
        const Eigen::VectorXd z = encode_set(
            params, dims, encode_batch_serial(params, dims, filt, subset));
        std::printf("t=%-4d", t);
        for (int j = 0; j < z.size(); ++j) std::printf(" %+.5f", z[j]);
        std::printf("\n");
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stepwise model-selection benchmark driver"};
  app.require_subcommand(1);

  std::string config_path, out_dir, bundle_dir, diag_path, task_flag;
  int top_k = 20;

  CLI::App* run = app.add_subcommand("run", "run an experiment config and write a bundle");
  run->add_option("config", config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "bundle directory (default <name>_bundle)");

  CLI::App* check = app.add_subcommand("check", "run the built-in oracle self-tests");

  CLI::App* plot = app.add_subcommand("plot", "render convergence plots for a bundle");
  plot->add_option("bundle", bundle_dir, "bundle directory from `run`")
      ->required()
      ->check(CLI::ExistingDirectory);

  CLI::App* diag = app.add_subcommand("diag", "diagnostics for one run history");
  diag->add_option("history", diag_path, "history.csv or a run directory")
      ->required()
      ->check(CLI::ExistingPath);
  diag->add_option("-k,--top-k", top_k, "models in the top-k trajectory")
      ->check(CLI::PositiveNumber);
  diag->add_option("--task", task_flag,
                   "search space when no config.json is present")
      ->check(CLI::IsMember({"synth", "inner"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(run)) return cmd_run(config_path, out_dir);
    if (app.got_subcommand(check)) return cmd_check();
    if (app.got_subcommand(plot)) return cmd_plot(bundle_dir);
    if (app.got_subcommand(diag)) return cmd_diag(diag_path, top_k, task_flag);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
