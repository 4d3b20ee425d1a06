#include "doctest.h"
#include "smsdkl/dkl_surrogate.hpp"
#include "test_util.hpp"

#include <cmath>
#include <limits>
#include <numeric>

using namespace smsdkl;

namespace {

Mat random_g(int n, int d, Rng& rng) {
  Mat g(n, d);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) g(r, c) = rng.normal();
  return g;
}

Eigen::VectorXd random_y(int n, Rng& rng) {
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = rng.normal();
  return y;
}

MultitaskProblem tiny_problem(const SequenceDataset& ds, const HyperparamSpace& space,
                              const std::vector<AcquisitionSet>& acq,
                              const FeatureNetDims& dims) {
  MultitaskProblem prob;
  prob.data = &ds;
  prob.space = &space;
  prob.acq = &acq;
  prob.dims = dims;
  prob.share_noise = false;
  prob.instance_cap = 256;
  return prob;
}

FeatureNetDims tiny_dims(int obs_width, int x_width, int feature_dim) {
  FeatureNetDims d;
  d.input_width = obs_width + 1;
  d.x_width = x_width;
  d.lstm_hidden = 3;
  d.set_width = 4;
  d.mlp_width = 4;
  d.embed_dim = 2;
  d.feature_dim = feature_dim;
  return d;
}

}  // namespace

TEST_CASE("posterior closed forms") {
  SUBCASE("no data returns the prior") {
    auto post = posterior(Mat(0, 3), Eigen::VectorXd(0), 2.0, 3.0);
    CHECK(post.m_w.isZero(0.0));
    CHECK(post.k_w == Mat::Identity(3, 3));
  }
  SUBCASE("single unit observation") {
    Mat g(1, 1);
    g << 1.0;
    Eigen::VectorXd y(1);
    y << 1.0;
    auto post = posterior(g, y, 1.0, 1.0);
    CHECK(post.k_w(0, 0) == doctest::Approx(2.0));
    CHECK(post.m_w[0] == doctest::Approx(0.5));
    auto [mu, s2] = predict(post, Eigen::VectorXd::Ones(1));
    CHECK(mu == doctest::Approx(0.5));
    CHECK(s2 == doctest::Approx(0.5));
  }
  SUBCASE("invalid arguments") {
    CHECK_THROWS_AS(posterior(Mat(2, 2), Eigen::VectorXd(3), 1.0, 1.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(posterior(Mat(1, 1), Eigen::VectorXd(1), -1.0, 1.0),
                    std::invalid_argument);
  }
}

TEST_CASE("posterior and predictive match the dense-inverse oracle") {
  double worst = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    Rng rng(2000 + trial);
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 11));
    const int d = 1 + static_cast<int>(rng.uniform_int(0, 7));
    const double beta = std::exp(rng.uniform(-1.0, 1.0));
    const double lambda = std::exp(rng.uniform(-1.0, 1.0));
    Mat g = random_g(n, d, rng);
    Eigen::VectorXd y = random_y(n, rng);

    Mat a = lambda * Mat::Identity(d, d) + beta * g.transpose() * g;
    Mat cov = a.inverse();
    Eigen::VectorXd m_direct = beta * cov * g.transpose() * y;

    auto post = posterior(g, y, beta, lambda);
    worst = std::max(worst, (post.m_w - m_direct).lpNorm<Eigen::Infinity>());
    Eigen::VectorXd probe = random_y(d, rng);
    auto [mu, s2] = predict(post, probe);
    worst = std::max(worst, std::abs(mu - m_direct.dot(probe)));
    worst = std::max(worst, std::abs(s2 - probe.dot(cov * probe)));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("predictive variance never grows when a row is added") {
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(3000 + trial);
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 6));
    const int d = 2 + static_cast<int>(rng.uniform_int(0, 4));
    Mat g = random_g(n, d, rng);
    Eigen::VectorXd y = random_y(n, rng);
    const double beta = std::exp(rng.uniform(-1.0, 1.0));
    const double lambda = std::exp(rng.uniform(-1.0, 1.0));
    Eigen::VectorXd probe = random_y(d, rng);

    auto before = predict(posterior(g, y, beta, lambda), probe);
    Mat g2(n + 1, d);
    g2 << g, random_y(d, rng).transpose();
    Eigen::VectorXd y2(n + 1);
    y2 << y, rng.normal();
    auto after = predict(posterior(g2, y2, beta, lambda), probe);
    CHECK(after.second <= before.second + 1e-12);
  }
}

TEST_CASE("log marginal closed forms and the primal/dual bridge") {
  SUBCASE("unit case") {
    Mat g(1, 1);
    g << 1.0;
    Eigen::VectorXd y(1);
    y << 1.0;
    const double want = -0.5 * std::log(4.0 * M_PI) - 0.25;
    CHECK(log_marginal_primal(g, y, 1.0, 1.0) == doctest::Approx(want).epsilon(1e-10));
    CHECK(log_marginal_dual(g, y, 1.0, 1.0) == doctest::Approx(want).epsilon(1e-10));
  }
  SUBCASE("zero scores keep only normalizer and determinant") {
    Rng rng(7);
    Mat g = random_g(4, 2, rng);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(4);
    const double beta = 1.7, lambda = 0.6;
    Mat kw = Mat::Identity(2, 2) + (beta / lambda) * g.transpose() * g;
    const double want =
        0.5 * 4 * std::log(beta / (2.0 * M_PI)) - 0.5 * std::log(kw.determinant());
    CHECK(log_marginal_primal(g, y, beta, lambda) == doctest::Approx(want).epsilon(1e-10));
  }
  SUBCASE("zero features reduce the dual to independent gaussians") {
    Eigen::VectorXd y(3);
    y << 0.5, -1.0, 2.0;
    const double beta = 2.0;
    double want = 0.0;
    for (int i = 0; i < 3; ++i)
      want += -0.5 * std::log(2.0 * M_PI / beta) - 0.5 * beta * y[i] * y[i];
    CHECK(log_marginal_dual(Mat::Zero(3, 2), y, beta, 1.0) ==
          doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("forms agree over seeded shapes") {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Rng rng(4000 + trial);
      const int n = 1 + static_cast<int>(rng.uniform_int(0, 19));
      const int d = 1 + static_cast<int>(rng.uniform_int(0, 19));
      Mat g = random_g(n, d, rng);
      Eigen::VectorXd y = random_y(n, rng);
      const double beta = std::exp(rng.uniform(-2.0, 2.0));
      const double lambda = std::exp(rng.uniform(-2.0, 2.0));
      const double p = log_marginal_primal(g, y, beta, lambda);
      const double q = log_marginal_dual(g, y, beta, lambda);
      worst = std::max(worst, std::abs(p - q) / std::max(1.0, std::abs(q)));
    }
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("log marginal dispatches on n > d") {
  Rng rng(9);
  auto macs_of = [](auto&& call) {
    mac_counter() = 0;
    call();
    return mac_counter();
  };
  Mat tall = random_g(5, 2, rng);
  Eigen::VectorXd y5 = random_y(5, rng);
  auto want_tall = macs_of([&] { log_marginal_primal(tall, y5, 1.0, 1.0); });
  CHECK(macs_of([&] { log_marginal(tall, y5, 1.0, 1.0); }) == want_tall);

  Mat wide = random_g(2, 5, rng);
  Eigen::VectorXd y2 = random_y(2, rng);
  auto want_wide = macs_of([&] { log_marginal_dual(wide, y2, 1.0, 1.0); });
  CHECK(macs_of([&] { log_marginal(wide, y2, 1.0, 1.0); }) == want_wide);

  Mat square = random_g(3, 3, rng);
  Eigen::VectorXd y3 = random_y(3, rng);
  auto want_square = macs_of([&] { log_marginal_dual(square, y3, 1.0, 1.0); });
  CHECK(macs_of([&] { log_marginal(square, y3, 1.0, 1.0); }) == want_square);
}

TEST_CASE("score stats normalize and floor the spread") {
  std::vector<double> y{1.0, 2.0, 3.0, 4.0};
  auto stats = score_stats(y);
  CHECK(stats.mean == doctest::Approx(2.5));
  Eigen::VectorXd z = normalized_scores(y, stats);
  CHECK(z.mean() == doctest::Approx(0.0));
  CHECK(z.squaredNorm() / 4.0 == doctest::Approx(1.0));

  std::vector<double> flat{2.0, 2.0, 2.0};
  CHECK(score_stats(flat).sd == 1e-8);
}

TEST_CASE("multitask objective equals the sum of per-step marginals") {
  auto ds = testutil::make_dataset(5, 3, 2, 71);
  auto space = testutil::unit_square();
  auto acq = testutil::make_acq(space, 3, 6, 72);
  auto dims = tiny_dims(2, space.normalized_width(), 3);
  auto prob = tiny_problem(ds, space, acq, dims);

  ParamStore ps;
  Rng rng(73);
  init_feature_net(ps, dims, rng);
  init_noise_params(ps, 3, false);
  ps.get("noise.log_beta.2")(0, 0) = 0.4;
  ps.get("noise.log_lambda.3")(0, 0) = -0.3;

  double total = 0.0;
  for (int t = 1; t <= 3; ++t) {
    Rng tmp(0);
    const double single = multitask_objective(ps, prob, {t}, tmp);
    // fast-path cross-check of the same step
    auto filt = filtration(ds, t);
    std::vector<int> subset{0, 1, 2, 3, 4};
    Eigen::VectorXd z = encode_set(ps, dims, encode_batch_serial(ps, dims, filt, subset));
    Mat g = feature_matrix(ps, dims, z, normalize_rows(space, acq[t - 1].X));
    Eigen::VectorXd yhat = normalized_scores(acq[t - 1].y, score_stats(acq[t - 1].y));
    const double beta = std::exp(ps.get(noise_name("log_beta", t, false))(0, 0));
    const double lambda = std::exp(ps.get(noise_name("log_lambda", t, false))(0, 0));
    CHECK(single == doctest::Approx(log_marginal(g, yhat, beta, lambda)).epsilon(1e-9));
    total += single;
  }
  Rng tmp(0);
  CHECK(multitask_objective(ps, prob, {1, 2, 3}, tmp) == doctest::Approx(total).epsilon(1e-9));
}

// The bias offset keeps relu pre-activations away from zero so the finite
// differences never step across the kink.
static ParamStore graded_params(const FeatureNetDims& dims, int steps, std::uint64_t seed) {
  ParamStore ps;
  Rng rng(seed);
  init_feature_net(ps, dims, rng);
  init_noise_params(ps, steps, false);
  for (const char* b : {"set.b1", "set.b2", "set.b3", "set.b4"})
    ps.get(b).array() += 0.45;
  return ps;
}

TEST_CASE("multitask gradients survive finite differences") {
  auto space = testutil::unit_square();

  SUBCASE("more evaluations than features") {
    auto ds = testutil::make_dataset(4, 3, 2, 81);
    auto acq = testutil::make_acq(space, 3, 4, 82);
    auto dims = tiny_dims(2, space.normalized_width(), 3);
    auto prob = tiny_problem(ds, space, acq, dims);
    auto ps = graded_params(dims, 3, 83);
    auto fn = [&](const ParamStore& s) {
      Rng tmp(0);
      ObjectiveGraph g = build_multitask_graph(s, prob, {1, 2, 3}, tmp);
      return eval_multitask(g, s);
    };
    CHECK(testutil::fd_check_5pt(fn, ps, 2.5e-3) < 1e-4);
  }

  SUBCASE("more features than evaluations") {
    auto ds = testutil::make_dataset(4, 3, 2, 500);
    auto acq = testutil::make_acq(space, 3, 3, 600);
    auto dims = tiny_dims(2, space.normalized_width(), 4);
    auto prob = tiny_problem(ds, space, acq, dims);
    auto ps = graded_params(dims, 3, 700);
    auto fn = [&](const ParamStore& s) {
      Rng tmp(0);
      ObjectiveGraph g = build_multitask_graph(s, prob, {1, 2, 3}, tmp);
      return eval_multitask(g, s);
    };
    CHECK(testutil::fd_check_5pt(fn, ps, 2.5e-3) < 1e-4);
  }
}

TEST_CASE("fit behaviour") {
  auto ds = testutil::make_dataset(5, 3, 2, 91);
  auto space = testutil::unit_square();
  auto acq = testutil::make_acq(space, 3, 6, 92);
  auto dims = tiny_dims(2, space.normalized_width(), 3);
  auto prob = tiny_problem(ds, space, acq, dims);

  auto fresh = [&] {
    ParamStore ps;
    Rng rng(93);
    init_feature_net(ps, dims, rng);
    init_noise_params(ps, 3, false);
    return ps;
  };

  SUBCASE("zero iterations change nothing") {
    ParamStore ps = fresh();
    Mat before = ps.get("head.w1");
    FitOptions opt;
    opt.iterations = 0;
    Rng rng(94);
    auto res = fit(ps, prob, opt, rng);
    CHECK(res.objective.empty());
    CHECK(ps.get("head.w1") == before);
  }
  SUBCASE("objective trends upward over window averages") {
    ParamStore ps = fresh();
    FitOptions opt;
    opt.iterations = 200;
    opt.learn_rate = 1e-2;
    Rng rng(94);
    auto res = fit(ps, prob, opt, rng);
    REQUIRE(res.objective.size() == 200);
    CHECK_FALSE(res.aborted);
    double prev = -1e300;
    for (int w = 0; w < 4; ++w) {
      double avg =
          std::accumulate(res.objective.begin() + 50 * w, res.objective.begin() + 50 * (w + 1),
                          0.0) /
          50.0;
      CHECK(avg >= prev);
      prev = avg;
    }
  }
  SUBCASE("same seed gives identical parameters") {
    ParamStore a = fresh(), b = fresh();
    FitOptions opt;
    opt.iterations = 40;
    Rng r1(95), r2(95);
    fit(a, prob, opt, r1);
    fit(b, prob, opt, r2);
    for (const auto& name : a.names()) CHECK(a.get(name) == b.get(name));
  }
  SUBCASE("a poisoned parameter halves the step once and then aborts") {
    ParamStore ps = fresh();
    ps.get("head.w1")(0, 0) = std::numeric_limits<double>::quiet_NaN();
    FitOptions opt;
    opt.iterations = 20;
    Rng rng(96);
    auto res = fit(ps, prob, opt, rng);
    CHECK(res.aborted);
    CHECK_FALSE(res.diagnostic.empty());
    CHECK(res.objective.empty());
  }
  SUBCASE("log precisions stay inside the projection bound") {
    ParamStore ps = fresh();
    FitOptions opt;
    opt.iterations = 120;
    opt.learn_rate = 0.3;
    opt.log_noise_bound = 0.5;
    Rng rng(98);
    auto res = fit(ps, prob, opt, rng);
    CHECK_FALSE(res.aborted);
    for (const auto& name : ps.names())
      if (name.rfind("noise.", 0) == 0) {
        CHECK(ps.get(name)(0, 0) <= 0.5);
        CHECK(ps.get(name)(0, 0) >= -0.5);
      }
    CHECK(res.beta_mean.back() <= std::exp(0.5) + 1e-12);
  }
  SUBCASE("training log serializes one row per iteration") {
    ParamStore ps = fresh();
    FitOptions opt;
    opt.iterations = 5;
    Rng rng(97);
    auto res = fit(ps, prob, opt, rng);
    auto csv = fit_log_csv(res);
    CHECK(csv.rfind("iter,objective,beta_mean,lambda_mean\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  }
}
