// Times each OpenMP kernel against its serial reference and verifies that
// the two agree. Speedups hover around 1.0 on a single-core box; the point
// of running this there is the agreement check and the per-kernel baseline.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <chrono>
#include <functional>
#include <numeric>
#include <vector>

#include "smsdkl/acquisition.hpp"
#include "smsdkl/baselines.hpp"
#include "smsdkl/benchharness.hpp"
#include "smsdkl/dkl_surrogate.hpp"
#include "smsdkl/feature_net.hpp"

using namespace smsdkl;

namespace {

double median_ms(const std::function<void()>& work, int reps) {
  std::vector<double> ms;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    work();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  return ms[ms.size() / 2];
}

void row(const char* name, double serial_ms, double parallel_ms, bool match) {
  std::printf("%-16s %10.2f ms %10.2f ms %8.2fx   %s\n", name, serial_ms,
              parallel_ms, serial_ms / parallel_ms, match ? "match" : "MISMATCH");
}

}  // namespace

int main() {
  std::printf("%-16s %13s %13s %9s\n", "kernel", "serial", "parallel", "speedup");
  bool all_match = true;
  const int reps = 5;

  {
    Rng rng(1);
    const int n = 600, d = 8;
    Mat x(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) x(i, j) = rng.uniform();
    Eigen::VectorXd ell = Eigen::VectorXd::Constant(d, 0.4);
    Mat ks, kp;
    const double ts = median_ms([&] { ks = gram_matrix_serial(x, ell, 1.3); }, reps);
    const double tp = median_ms([&] { kp = gram_matrix_parallel(x, ell, 1.3); }, reps);
    const bool ok = ks == kp;
    all_match &= ok;
    row("gram_matrix", ts, tp, ok);
  }

  {
    Rng rng(2);
    DriftProfile profile;
    profile.instances = 128;
    profile.width = 6;
    const SequenceDataset ds = synth_dataset(11, 12, profile);
    FeatureNetDims dims;
    dims.input_width = profile.width + 1;
    dims.x_width = 2;
    dims.lstm_hidden = 32;
    dims.set_width = 16;
    dims.mlp_width = 16;
    dims.embed_dim = 4;
    dims.feature_dim = 16;
    ParamStore params;
    init_feature_net(params, dims, rng);
    std::vector<int> subset(ds.size());
    std::iota(subset.begin(), subset.end(), 0);
    const Filtration filt(ds, 12);
    Mat hs, hp;
    const double ts =
        median_ms([&] { hs = encode_batch_serial(params, dims, filt, subset); }, reps);
    const double tp =
        median_ms([&] { hp = encode_batch_parallel(params, dims, filt, subset); }, reps);
    const bool ok = hs == hp;
    all_match &= ok;
    row("encode_batch", ts, tp, ok);
  }

  {
    Rng rng(3);
    const HyperparamSpace space = synth_space();
    FeatureNetDims dims;
    dims.input_width = 4;
    dims.x_width = space.normalized_width();
    dims.lstm_hidden = 8;
    dims.set_width = 16;
    dims.mlp_width = 16;
    dims.embed_dim = 4;
    dims.feature_dim = 16;
    ParamStore params;
    init_feature_net(params, dims, rng);
    Eigen::VectorXd z(dims.embed_dim);
    for (int j = 0; j < dims.embed_dim; ++j) z[j] = rng.normal();

    const int n_obs = 64;
    Mat g(n_obs, dims.feature_dim);
    Eigen::VectorXd y(n_obs);
    for (int i = 0; i < n_obs; ++i) {
      y[i] = rng.normal();
      for (int j = 0; j < dims.feature_dim; ++j) g(i, j) = rng.normal();
    }
    const BlrPosterior post = posterior(g, y, 1.0, 1.0);
    const CandidatePool pool = draw_candidates(space, 4096, rng);
    Eigen::VectorXd es, ep;
    const double ts = median_ms(
        [&] { es = candidate_ei_serial(params, dims, z, pool.xn, post, 0.2); }, reps);
    const double tp = median_ms(
        [&] { ep = candidate_ei_parallel(params, dims, z, pool.xn, post, 0.2); }, reps);
    const bool ok = es == ep;
    all_match &= ok;
    row("candidate_ei", ts, tp, ok);
  }

  {
    const HyperparamSpace space = synth_space();
    const SynthFamily fam = synth_family(5, 4, 0.5, space, 12);
    GridMax gs, gp;
    const double ts =
        median_ms([&] { gs = grid_eval_max_serial(fam, 2, 250000); }, reps);
    const double tp =
        median_ms([&] { gp = grid_eval_max_parallel(fam, 2, 250000); }, reps);
    const bool ok =
        gs.value == gp.value && gs.x.values == gp.x.values;
    all_match &= ok;
    row("grid_eval_max", ts, tp, ok);
  }

  std::printf("%s\n", all_match ? "all kernels match" : "KERNEL MISMATCH");
  return all_match ? 0 : 1;
}
