#include <cmath>
#include <optional>
#include <vector>

#include "doctest.h"
#include "smsdkl/acquisition.hpp"
#include "smsdkl/baselines.hpp"
#include "smsdkl/core.hpp"
#include "test_util.hpp"

using namespace smsdkl;
using Eigen::VectorXd;

namespace {

// Draws y from a Matern-5/2 GP with the given lengthscale so gp_fit has
// something to recover.
VectorXd sample_gp(const Mat& x, double ell_true, double noise_sd, Rng& rng) {
  VectorXd ell = VectorXd::Constant(x.cols(), ell_true);
  Mat k = gram_matrix_serial(x, ell, 1.0);
  auto llt = chol_spd(k);
  VectorXd eps(x.rows());
  for (int i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
  VectorXd y = llt.matrixL() * eps;
  for (int i = 0; i < y.size(); ++i) y[i] += noise_sd * rng.normal();
  return y;
}

MultiStepProblem bowl_problem() {
  MultiStepProblem prob;
  prob.steps = 1;
  prob.eval = [](const HyperparamVector& v) -> std::optional<std::vector<double>> {
    double x1 = v.values[0], x2 = v.values[1];
    return std::vector<double>{1.0 - (x1 - 0.37) * (x1 - 0.37) -
                               (x2 - 0.58) * (x2 - 0.58)};
  };
  return prob;
}

// Two steps whose optima sit at x1=0.3 and x1=0.7: no single configuration
// can win both, so the stepwise readout has room to beat the single-model one.
MultiStepProblem pulled_apart_problem() {
  MultiStepProblem prob;
  prob.steps = 2;
  prob.eval = [](const HyperparamVector& v) -> std::optional<std::vector<double>> {
    double x1 = v.values[0];
    return std::vector<double>{1.0 - (x1 - 0.3) * (x1 - 0.3),
                               1.0 - (x1 - 0.7) * (x1 - 0.7)};
  };
  return prob;
}

RunConfig bo_cfg(uint64_t seed, int iters) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.n_init = 5;
  cfg.n_iters = iters;
  cfg.candidate_pool = 512;
  return cfg;
}

IterationRecord make_record(int iter, double x1, std::vector<double> y) {
  IterationRecord r;
  r.iter = iter;
  r.chosen_t = 0;
  r.x.values = {x1, 0.5};
  r.y = std::move(y);
  r.incumbent = r.y;
  r.incumbent_x.assign(r.y.size(), r.x);
  r.p.assign(r.y.size(), 0.0);
  r.seconds = 0.0;
  return r;
}

}  // namespace

TEST_CASE("matern kernel values") {
  VectorXd a(2), b(2), ell(2);
  a << 0.3, 0.9;
  ell << 0.7, 1.3;

  SUBCASE("coincident points return the signal variance") {
    CHECK(matern52_ard(a, a, ell, 2.5) == 2.5);
  }

  SUBCASE("unit distance, unit lengthscale") {
    VectorXd one(1), zero(1), l1(1);
    one << 1.0;
    zero << 0.0;
    l1 << 1.0;
    CHECK(matern52_ard(one, zero, l1, 1.0) ==
          doctest::Approx(0.523994108831820310592713250761).epsilon(1e-14));
  }

  SUBCASE("two coordinates each off by 0.5 at unit lengthscale") {
    VectorXd p(2), q(2), l(2);
    p << 0.5, 0.5;
    q.setZero();
    l.setOnes();
    CHECK(matern52_ard(p, q, l, 1.0) ==
          doctest::Approx(0.702495760153803273873370188357).epsilon(1e-14));
  }

  SUBCASE("decays monotonically and vanishes far away") {
    VectorXd l1(1), zero(1);
    l1 << 1.0;
    zero << 0.0;
    double prev = 1.0;
    for (double r = 0.5; r < 30.0; r += 0.5) {
      VectorXd p(1);
      p << r;
      double k = matern52_ard(p, zero, l1, 1.0);
      CHECK(k < prev);
      prev = k;
    }
    CHECK(prev < 1e-20);
  }

  SUBCASE("rescaling a coordinate and its lengthscale together is a no-op") {
    b << 0.1, 0.4;
    double k0 = matern52_ard(a, b, ell, 1.7);
    VectorXd a2 = a, b2 = b, ell2 = ell;
    a2[0] *= 3.0;
    b2[0] *= 3.0;
    ell2[0] *= 3.0;
    CHECK(matern52_ard(a2, b2, ell2, 1.7) == doctest::Approx(k0).epsilon(1e-14));
  }
}

TEST_CASE("gram matrix is symmetric with unit-diagonal structure and the "
          "parallel kernel matches the serial one bitwise") {
  Rng rng(321);
  Mat x(23, 3);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) x(i, j) = rng.uniform();
  VectorXd ell(3);
  ell << 0.4, 1.1, 0.8;

  Mat ks = gram_matrix_serial(x, ell, 1.9);
  Mat kp = gram_matrix_parallel(x, ell, 1.9);
  REQUIRE(ks.rows() == 23);
  REQUIRE(ks.cols() == 23);
  for (int i = 0; i < 23; ++i) {
    CHECK(ks(i, i) == 1.9);
    for (int j = 0; j < 23; ++j) {
      CHECK(ks(i, j) == ks(j, i));
      CHECK(ks(i, j) == kp(i, j));
    }
  }
}

TEST_CASE("marginal likelihood gradient agrees with central differences") {
  double worst = 0.0;
  for (int s = 0; s < 5; ++s) {
    Rng rng(300 + s);
    int n = 12, d = 2;
    Mat x(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) x(i, j) = rng.uniform();
    VectorXd y(n);
    for (int i = 0; i < n; ++i) y[i] = rng.normal();
    VectorXd le(d);
    le << -0.3 + 0.2 * rng.normal(), 0.4 + 0.2 * rng.normal();
    double lsf = 0.3 * rng.normal();
    double lsn = -2.0 + 0.3 * rng.normal();

    VectorXd g = gp_lml_grad(x, y, le, lsf, lsn);
    REQUIRE(g.size() == d + 2);
    double h = 1e-5;
    for (int j = 0; j < d + 2; ++j) {
      auto at = [&](double delta) {
        VectorXd le2 = le;
        double lsf2 = lsf, lsn2 = lsn;
        if (j < d) le2[j] += delta;
        else if (j == d) lsf2 += delta;
        else lsn2 += delta;
        return gp_lml(x, y, le2, lsf2, lsn2);
      };
      double num = (at(h) - at(-h)) / (2 * h);
      double rel =
          std::abs(num - g[j]) / std::max({std::abs(num), std::abs(g[j]), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("posterior mean reproduces training targets when noise is tiny") {
  Rng rng(11);
  int n = 15;
  Mat x(n, 2);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = rng.uniform();
    x(i, 1) = rng.uniform();
    y[i] = std::sin(3 * x(i, 0)) + 0.5 * x(i, 1) + 2.0;
  }
  GpModel m;
  m.log_ell = VectorXd::Zero(2);
  m.log_sf2 = 0.0;
  m.log_sn2 = std::log(1e-8);
  m.x = x;
  m.y_mean = y.mean();
  m.y_sd = std::sqrt((y.array() - m.y_mean).square().sum() / n);
  VectorXd ys = (y.array() - m.y_mean) / m.y_sd;
  Mat k = gram_matrix_serial(x, m.log_ell.array().exp(), 1.0);
  k.diagonal().array() += 1e-8;
  m.chol = chol_spd(k);
  m.alpha = m.chol.solve(ys);
  m.lml = 0.0;

  for (int i = 0; i < n; ++i) {
    auto [mu, var] = gp_predict(m, x.row(i).transpose());
    CHECK(std::abs(mu - y[i]) < 1e-5);
    CHECK(var >= 0.0);
    CHECK(var < 1e-6);
  }
}

TEST_CASE("hyperparameter fitting") {
  SUBCASE("recovers a known lengthscale within a factor of two on most seeds") {
    int ok = 0;
    for (int s = 0; s < 10; ++s) {
      Rng rng(9000 + s);
      Mat x(40, 1);
      for (int i = 0; i < 40; ++i) x(i, 0) = rng.uniform();
      VectorXd y = sample_gp(x, 0.5, 0.05, rng);
      GpModel m = gp_fit(x, y, rng);
      double lhat = std::exp(m.log_ell[0]);
      if (lhat >= 0.25 && lhat <= 1.0) ++ok;
    }
    CHECK(ok >= 8);
  }

  SUBCASE("constant targets do not break the fit") {
    Rng rng(5);
    Mat x(8, 2);
    for (int i = 0; i < 8; ++i) {
      x(i, 0) = rng.uniform();
      x(i, 1) = rng.uniform();
    }
    VectorXd y = VectorXd::Constant(8, 3.25);
    GpModel m = gp_fit(x, y, rng);
    auto [mu, var] = gp_predict(m, VectorXd::Constant(2, 0.5));
    CHECK(mu == doctest::Approx(3.25).epsilon(1e-9));
    CHECK(var >= 0.0);
  }

  SUBCASE("refuses fewer than two observations") {
    Rng rng(1);
    Mat x(1, 2);
    x << 0.5, 0.5;
    VectorXd y(1);
    y << 1.0;
    CHECK_THROWS_AS(gp_fit(x, y, rng), std::invalid_argument);
  }
}

TEST_CASE("single-model optimizer loop") {
  auto space = testutil::unit_square();

  SUBCASE("closes the gap on a concave objective") {
    for (uint64_t s = 40; s < 43; ++s) {
      RunHistory h = gp_bo_run(bowl_problem(), space, bo_cfg(s, 25));
      double best = -1e300;
      for (auto& r : h.records) best = std::max(best, r.y[0]);
      CHECK(1.0 - best <= 0.05);
    }
  }

  SUBCASE("same seed gives an identical history") {
    RunHistory a = gp_bo_run(bowl_problem(), space, bo_cfg(7, 6));
    RunHistory b = gp_bo_run(bowl_problem(), space, bo_cfg(7, 6));
    CHECK(history_csv(a, space) == history_csv(b, space));
  }

  SUBCASE("random search shares the protocol and stays uniform") {
    RunConfig cfg = bo_cfg(31, 12);
    RunHistory a = random_search_run(bowl_problem(), space, cfg);
    RunHistory b = random_search_run(bowl_problem(), space, cfg);
    CHECK(history_csv(a, space) == history_csv(b, space));
    CHECK(a.records.size() == size_t(cfg.n_init + 12));
    RunHistory g = gp_bo_run(bowl_problem(), space, cfg);
    for (int i = 0; i < cfg.n_init; ++i)
      CHECK(a.records[i].x == g.records[i].x);
  }

  SUBCASE("shares the initial design with the deep-kernel loop at equal seeds") {
    auto ds = testutil::make_dataset(4, 3, 2, 19);
    MultiStepProblem prob = pulled_apart_problem();
    RunConfig cfg = bo_cfg(99, 1);
    cfg.m_train = 10;
    cfg.embed_dim = 2;
    cfg.feature_dim = 4;
    cfg.lstm_hidden = 3;
    cfg.set_width = 4;
    cfg.mlp_width = 4;
    prob.steps = 2;
    RunHistory hg = gp_bo_run(prob, space, cfg);
    RunHistory hd = sms_dkl_run(prob, ds, space, cfg).history;
    REQUIRE(hg.records.size() >= size_t(cfg.n_init));
    REQUIRE(hd.records.size() >= size_t(cfg.n_init));
    for (int i = 0; i < cfg.n_init; ++i)
      CHECK(hg.records[i].x == hd.records[i].x);
  }
}

TEST_CASE("column rescaling maps each objective onto the unit interval") {
  Mat y(4, 2);
  y << 1.0, 5.0,
       3.0, 5.0,
       2.0, 5.0,
       1.5, 5.0;
  Mat r = rescale_columns(y);
  CHECK(r(0, 0) == 0.0);
  CHECK(r(1, 0) == 1.0);
  CHECK(r(2, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(r(3, 0) == doctest::Approx(0.25).epsilon(1e-14));
  for (int i = 0; i < 4; ++i) CHECK(r(i, 1) == 0.0);
}

TEST_CASE("simplex draws are valid weight vectors") {
  Rng rng(77);
  for (int i = 0; i < 50; ++i) {
    VectorXd th = sample_simplex(5, rng);
    REQUIRE(th.size() == 5);
    double sum = 0.0;
    for (int j = 0; j < 5; ++j) {
      CHECK(th[j] >= 0.0);
      sum += th[j];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("scalarization") {
  SUBCASE("worked examples") {
    Mat y(1, 2);
    VectorXd th(2);

    y << 0.4, 0.9;
    th << 1.0, 0.0;
    CHECK(parego_scalarize(y, th)[0] == doctest::Approx(0.42).epsilon(1e-14));

    y << 0.4, 0.8;
    th << 0.5, 0.5;
    CHECK(parego_scalarize(y, th)[0] == doctest::Approx(0.43).epsilon(1e-14));
  }

  SUBCASE("zero-weight objectives cannot move the value") {
    Mat a(1, 2), b(1, 2);
    a << 0.4, 0.1;
    b << 0.4, 0.9;
    VectorXd th(2);
    th << 1.0, 0.0;
    CHECK(parego_scalarize(a, th)[0] == parego_scalarize(b, th)[0]);
  }

  SUBCASE("raising any weighted objective raises the value") {
    VectorXd th(2);
    th << 0.3, 0.7;
    Mat a(1, 2), b(1, 2);
    a << 0.5, 0.5;
    for (int j = 0; j < 2; ++j) {
      b = a;
      b(0, j) += 0.2;
      CHECK(parego_scalarize(b, th)[0] > parego_scalarize(a, th)[0]);
    }
  }

  SUBCASE("weight vector must match the column count") {
    Mat y(1, 3);
    y << 0.1, 0.2, 0.3;
    VectorXd th(2);
    th << 0.5, 0.5;
    CHECK_THROWS_AS(parego_scalarize(y, th), std::invalid_argument);
  }
}

TEST_CASE("scalarized optimizer loop") {
  auto space = testutil::unit_square();

  SUBCASE("injected weights make the run reproducible") {
    RunConfig cfg = bo_cfg(13, 4);
    std::vector<VectorXd> thetas;
    Rng rng(2024);
    for (int i = 0; i < 4; ++i) thetas.push_back(sample_simplex(2, rng));
    RunHistory a = parego_run(pulled_apart_problem(), space, cfg, &thetas);
    RunHistory b = parego_run(pulled_apart_problem(), space, cfg, &thetas);
    CHECK(history_csv(a, space) == history_csv(b, space));
    CHECK(a.records.size() == size_t(cfg.n_init + 4));
  }

  SUBCASE("rejects an override shorter than the run") {
    RunConfig cfg = bo_cfg(13, 4);
    std::vector<VectorXd> thetas{VectorXd::Constant(2, 0.5)};
    CHECK_THROWS_AS(parego_run(pulled_apart_problem(), space, cfg, &thetas),
                    std::invalid_argument);
  }

  SUBCASE("stepwise readout beats the single-model one when optima disagree") {
    int adv = 0;
    for (uint64_t s = 70; s < 74; ++s) {
      RunHistory h = parego_run(pulled_apart_problem(), space, bo_cfg(s, 25));
      auto wise = posthoc_stepwise(h);
      int si = single_model_incumbent(h);
      double wsum = wise[0].y + wise[1].y;
      double ssum = h.records[si].y[0] + h.records[si].y[1];
      if (wsum > ssum + 1e-9) ++adv;
    }
    CHECK(adv >= 3);
  }
}

TEST_CASE("stepwise readout of a finished history") {
  SUBCASE("single acquisition is its own incumbent at every step") {
    RunHistory h;
    h.steps = 2;
    h.records.push_back(make_record(1, 0.2, {0.7, 0.1}));
    auto wise = posthoc_stepwise(h);
    REQUIRE(wise.size() == 2);
    CHECK(wise[0].y == 0.7);
    CHECK(wise[1].y == 0.1);
    CHECK(wise[0].x.values[0] == 0.2);
    CHECK(single_model_incumbent(h) == 0);
  }

  SUBCASE("crossed scores pick different winners per step") {
    RunHistory h;
    h.steps = 2;
    h.records.push_back(make_record(1, 0.2, {0.9, 0.1}));
    h.records.push_back(make_record(2, 0.8, {0.1, 0.9}));
    h.records.push_back(make_record(3, 0.5, {0.6, 0.6}));
    auto wise = posthoc_stepwise(h);
    CHECK(wise[0].x.values[0] == 0.2);
    CHECK(wise[1].x.values[0] == 0.8);
    CHECK(wise[0].y == 0.9);
    CHECK(wise[1].y == 0.9);
    CHECK(single_model_incumbent(h) == 2);
  }

  SUBCASE("stepwise total dominates every single acquisition") {
    Rng rng(404);
    RunHistory h;
    h.steps = 3;
    for (int i = 0; i < 30; ++i)
      h.records.push_back(
          make_record(i + 1, rng.uniform(),
                      {rng.normal(), rng.normal(), rng.normal()}));
    auto wise = posthoc_stepwise(h);
    double wsum = wise[0].y + wise[1].y + wise[2].y;
    for (auto& r : h.records) {
      double s = r.y[0] + r.y[1] + r.y[2];
      CHECK(wsum >= s - 1e-12);
    }
    int si = single_model_incumbent(h);
    double best = h.records[si].y[0] + h.records[si].y[1] + h.records[si].y[2];
    CHECK(wsum >= best - 1e-12);
  }

  SUBCASE("empty history is a usage error") {
    RunHistory h;
    h.steps = 2;
    CHECK_THROWS_AS(posthoc_stepwise(h), std::invalid_argument);
    CHECK_THROWS_AS(single_model_incumbent(h), std::invalid_argument);
  }
}
