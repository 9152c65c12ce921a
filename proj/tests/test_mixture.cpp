#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "gmdiff/mixture.hpp"
#include "gmdiff/rng.hpp"
#include "gmdiff/schedule.hpp"

using namespace gmdiff;

namespace {

GaussianMixture two_mode_1d(double x0, double x1, double sigma, double w0) {
  GaussianMixture gmm;
  gmm.n_modes = 2;
  gmm.dim = 1;
  gmm.modes.resize(2, 1);
  gmm.modes << x0, x1;
  gmm.weights.resize(2);
  gmm.weights << w0, 1.0 - w0;
  gmm.sigma = sigma;
  gmm.sigma_raw = sigma;
  gmm.validate();
  return gmm;
}

GaussianMixture three_mode_2d() {
  GaussianMixture gmm;
  gmm.n_modes = 3;
  gmm.dim = 2;
  gmm.modes.resize(3, 2);
  gmm.modes << 0.0, 0.0, 1.0, 0.2, -0.4, 0.9;
  gmm.weights.resize(3);
  gmm.weights << 0.5, 0.3, 0.2;
  gmm.sigma = 0.15;
  gmm.sigma_raw = 0.15;
  gmm.validate();
  return gmm;
}

}  // namespace

TEST_CASE("grid mixture matches the 5x5 layout before normalization") {
  const GaussianMixture gmm = build_grid_mixture(5, 2.0, 0.02, 2, 25);
  CHECK(gmm.n_modes == 25);
  CHECK(gmm.dim == 2);
  CHECK(gmm.weights[0] == doctest::Approx(1.0 / 25).epsilon(1e-14));
  const double scale = 2.0 * std::sqrt(2.0);
  CHECK(gmm.norm_scale == doctest::Approx(scale));
  std::set<double> coords;
  for (int k = 0; k < 25; ++k)
    for (int d = 0; d < 2; ++d) coords.insert(gmm.modes(k, d) * scale);
  const std::set<double> expect = {-4.0, -2.0, 0.0, 2.0, 4.0};
  CHECK(coords.size() == 5);
  for (const double c : expect) {
    bool found = false;
    for (const double got : coords) found |= std::abs(got - c) < 1e-12;
    CHECK(found);
  }
  CHECK(gmm.sigma == doctest::Approx(0.02 / scale));
}

TEST_CASE("smallest lattice keeps {0, 1} pre-normalization") {
  const GaussianMixture gmm = build_grid_mixture(2, 1.0, 0.1, 1, 2);
  CHECK(gmm.n_modes == 2);
  const double scale = 2.0;  // 2 sqrt(1)
  CHECK(gmm.modes(0, 0) * scale == doctest::Approx(0.0));
  CHECK(gmm.modes(1, 0) * scale == doctest::Approx(1.0));
  CHECK(gmm.weights[0] == doctest::Approx(0.5));
}

TEST_CASE("farthest-point sampling starts with a diameter pair (dim 4)") {
  const int side = 5, dim = 4, keep = 25;
  const GaussianMixture gmm = build_grid_mixture(side, 2.0, 0.02, dim, keep);
  CHECK(gmm.n_modes == keep);
  // Exhaustive pairwise check over the candidate lattice: the first two
  // picks must realize the maximum pairwise distance.
  const double d01 = (gmm.modes.row(0) - gmm.modes.row(1)).norm();
  double best = 0.0;
  const int count = 625;
  std::vector<Eigen::Vector4d> lattice(count);
  int idx = 0;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b)
      for (int c = 0; c < 5; ++c)
        for (int d = 0; d < 5; ++d)
          lattice[idx++] = Eigen::Vector4d(a - 2, b - 2, c - 2, d - 2) * 2.0 /
                           (2.0 * std::sqrt(4.0));
  for (int a = 0; a < count; ++a)
    for (int b = a + 1; b < count; ++b)
      best = std::max(best, (lattice[a] - lattice[b]).norm());
  CHECK(d01 == doctest::Approx(best).epsilon(1e-12));
  // Pairwise minimum over kept modes stays positive and distinct.
  double min_pair = 1e9;
  for (int a = 0; a < keep; ++a)
    for (int b = a + 1; b < keep; ++b)
      min_pair = std::min(min_pair, (gmm.modes.row(a) - gmm.modes.row(b)).norm());
  CHECK(min_pair > 0.0);
}

TEST_CASE("build_grid_mixture rejects bad arguments") {
  CHECK_THROWS_AS(build_grid_mixture(1, 2.0, 0.02, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_grid_mixture(5, -1.0, 0.02, 2, 25), std::invalid_argument);
  CHECK_THROWS_AS(build_grid_mixture(5, 2.0, 0.0, 2, 25), std::invalid_argument);
  CHECK_THROWS_AS(build_grid_mixture(2, 1.0, 0.1, 3, 9), std::invalid_argument);
}

TEST_CASE("responsibilities: midpoint symmetry, saturation, normalization") {
  const GaussianMixture gmm = two_mode_1d(0.0, 1.0, 0.1, 0.5);
  const NoiseSchedule sched = build_linear_schedule(100, 1e-4, 0.02, gmm.sigma);

  Eigen::VectorXd mid(1);
  mid << 0.5 * std::sqrt(sched.alpha_bar(30));
  const Eigen::VectorXd g = responsibilities(gmm, sched, mid, 30);
  CHECK(g[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(0.5).epsilon(1e-12));

  // x at a mode with the other mode >= 10 sigma_t away: saturation checked
  // against the direct density ratio.
  const GaussianMixture tight = two_mode_1d(0.0, 1.0, 0.01, 0.5);
  const NoiseSchedule sched2 = build_linear_schedule(100, 1e-5, 1e-4, 0.01);
  const int t = 1;
  const double sig_t = std::sqrt(sched2.sigma_sq(t));
  REQUIRE(1.0 / sig_t >= 10.0);
  Eigen::VectorXd at_mode(1);
  at_mode << 0.0;
  const Eigen::VectorXd g2 = responsibilities(tight, sched2, at_mode, t);
  CHECK(g2[0] >= 1.0 - 1e-8);

  CounterRng rng(3, 0, 0);
  const GaussianMixture tri = three_mode_2d();
  const NoiseSchedule sched3 = build_linear_schedule(200, 1e-4, 0.02, tri.sigma);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd x(2);
    x << 2.0 * rng.normal(), 2.0 * rng.normal();
    const int tt = 1 + static_cast<int>(rng.next_u64() % 200);
    const Eigen::VectorXd gg = responsibilities(tri, sched3, x, tt);
    CHECK(std::abs(gg.sum() - 1.0) <= 1e-10);
    CHECK((gg.array() >= 0.0).all());
  }

  Eigen::VectorXd bad(1);
  bad << std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(responsibilities(gmm, sched, bad, 10), std::invalid_argument);
}

TEST_CASE("responsibilities are permutation-equivariant") {
  const GaussianMixture tri = three_mode_2d();
  GaussianMixture permuted = tri;
  const int perm[3] = {2, 0, 1};
  for (int k = 0; k < 3; ++k) {
    permuted.modes.row(k) = tri.modes.row(perm[k]);
    permuted.weights[k] = tri.weights[perm[k]];
  }
  const NoiseSchedule sched = build_linear_schedule(50, 1e-4, 0.02, tri.sigma);
  Eigen::VectorXd x(2);
  x << 0.3, -0.1;
  const Eigen::VectorXd a = responsibilities(tri, sched, x, 20);
  const Eigen::VectorXd b = responsibilities(permuted, sched, x, 20);
  for (int k = 0; k < 3; ++k)
    CHECK(b[k] == doctest::Approx(a[perm[k]]).epsilon(1e-14));
}

TEST_CASE("score matches the finite-difference gradient of the log marginal") {
  const GaussianMixture tri = three_mode_2d();
  const NoiseSchedule sched = build_linear_schedule(200, 1e-4, 0.02, tri.sigma);
  CounterRng rng(5, 1, 0);
  const double h = 1e-5;
  for (int trial = 0; trial < 40; ++trial) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 200);
    // Well-scaled draw: x ~ p_t.
    const int k = static_cast<int>(rng.next_u64() % 3);
    Eigen::VectorXd x(2);
    const double sab = std::sqrt(sched.alpha_bar(t));
    const double sig = std::sqrt(sched.sigma_sq(t));
    for (int d = 0; d < 2; ++d)
      x[d] = sab * tri.modes(k, d) + sig * rng.normal();
    const Eigen::VectorXd s = score_exact(tri, sched, x, t);
    Eigen::VectorXd fd(2);
    for (int d = 0; d < 2; ++d) {
      Eigen::VectorXd xp = x, xm = x;
      xp[d] += h;
      xm[d] -= h;
      fd[d] = (log_marginal_density(tri, sched, xp, t) -
               log_marginal_density(tri, sched, xm, t)) /
              (2.0 * h);
    }
    CHECK((fd - s).norm() <= 1e-5 * s.norm());
  }
}

TEST_CASE("score is zero at the center of a single Gaussian") {
  GaussianMixture one;
  one.n_modes = 1;
  one.dim = 2;
  one.modes = Eigen::MatrixXd::Zero(1, 2);
  one.weights = Eigen::VectorXd::Ones(1);
  one.sigma = 1.0;
  one.validate();
  const NoiseSchedule sched = build_linear_schedule(10, 1e-4, 0.02, 1.0);
  const Eigen::VectorXd s = score_exact(one, sched, Eigen::VectorXd::Zero(2), 5);
  CHECK(s.norm() == doctest::Approx(0.0));
}

TEST_CASE("log marginal: standard normal value and quadrature normalization") {
  GaussianMixture one;
  one.n_modes = 1;
  one.dim = 2;
  one.modes = Eigen::MatrixXd::Zero(1, 2);
  one.weights = Eigen::VectorXd::Ones(1);
  one.sigma = 1.0;
  one.validate();
  // alpha_bar(0) = 1, sigma_0^2 = sigma^2 = 1.
  const NoiseSchedule sched = build_linear_schedule(10, 1e-4, 0.02, 1.0);
  CHECK(log_marginal_density(one, sched, Eigen::VectorXd::Zero(2), 0) ==
        doctest::Approx(-std::log(2.0 * M_PI)).epsilon(1e-12));

  // Quadrature oracle: exp(log density) integrates to 1 on a fine grid.
  const GaussianMixture gmm1d = two_mode_1d(-0.4, 0.8, 0.3, 0.35);
  const NoiseSchedule s1 = build_linear_schedule(100, 1e-4, 0.02, gmm1d.sigma);
  for (const int t : {0, 40, 100}) {
    const int n = 4000;
    const double lo = -6.0, hi = 6.0;
    const double dx = (hi - lo) / n;
    double mass = 0.0;
    Eigen::VectorXd x(1);
    for (int i = 0; i <= n; ++i) {
      x[0] = lo + i * dx;
      const double w = (i == 0 || i == n) ? 0.5 : 1.0;
      mass += w * std::exp(log_marginal_density(gmm1d, s1, x, t)) * dx;
    }
    CHECK(std::abs(mass - 1.0) < 1e-3);
  }

  const GaussianMixture tri = three_mode_2d();
  const NoiseSchedule s2 = build_linear_schedule(100, 1e-4, 0.02, tri.sigma);
  {
    const int n = 260;
    const double lo = -5.0, hi = 5.0;
    const double dx = (hi - lo) / n;
    double mass = 0.0;
    Eigen::VectorXd x(2);
    for (int i = 0; i <= n; ++i)
      for (int j = 0; j <= n; ++j) {
        x << lo + i * dx, lo + j * dx;
        const double w = ((i == 0 || i == n) ? 0.5 : 1.0) *
                         ((j == 0 || j == n) ? 0.5 : 1.0);
        mass += w * std::exp(log_marginal_density(tri, s2, x, 30)) * dx * dx;
      }
    CHECK(std::abs(mass - 1.0) < 1e-3);
  }
}

TEST_CASE("log marginal peaks at the nearest mode when modes are separated") {
  const GaussianMixture gmm = two_mode_1d(0.0, 1.0, 0.01, 0.5);
  const NoiseSchedule sched = build_linear_schedule(100, 1e-5, 1e-4, 0.01);
  const int t = 1;
  REQUIRE(1.0 >= 10.0 * std::sqrt(sched.sigma_sq(t)));
  double best_val = -1e300;
  double best_x = 0.0;
  Eigen::VectorXd x(1);
  for (int i = 0; i <= 400; ++i) {
    x[0] = -0.5 + 2.0 * i / 400.0;
    const double v = log_marginal_density(gmm, sched, x, t);
    if (v > best_val) {
      best_val = v;
      best_x = x[0];
    }
  }
  const double sab = std::sqrt(sched.alpha_bar(t));
  const bool near_mode =
      std::abs(best_x - 0.0) < 0.02 || std::abs(best_x - sab) < 0.02;
  CHECK(near_mode);
}

TEST_CASE("rescale: identity at t = 0 and responsibility preservation") {
  const GaussianMixture tri = three_mode_2d();
  const NoiseSchedule sched = build_linear_schedule(200, 1e-4, 0.02, tri.sigma);
  Eigen::VectorXd x(2);
  x << 0.37, -0.21;
  const RescaledState s0 = rescale(tri, sched, x, 0);
  CHECK((s0.y - x).norm() == doctest::Approx(0.0));
  CHECK(s0.sigma_tilde_sq == doctest::Approx(tri.sigma * tri.sigma));

  CounterRng rng(9, 0, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 200);
    Eigen::VectorXd xr(2);
    xr << rng.normal(), rng.normal();
    const RescaledState rs = rescale(tri, sched, xr, t);
    const Eigen::VectorXd g = responsibilities(tri, sched, xr, t);
    for (int k = 0; k < 3; ++k)
      CHECK(std::abs(rs.gamma_tilde[k] - g[k]) <= 1e-12);
    // Posterior-mean cross-check: sqrt(ab) mu_hat(y) = sum gamma mu_t.
    const Eigen::VectorXd mean_res =
        std::sqrt(sched.alpha_bar(t)) *
        posterior_mean_rescaled(tri, rs.sigma_tilde_sq, rs.y);
    const Eigen::VectorXd mean_x =
        std::sqrt(sched.alpha_bar(t)) * (tri.modes.transpose() * g);
    CHECK((mean_res - mean_x).norm() <= 1e-10);
  }
}

TEST_CASE("two-mode responsibility: symmetry, arithmetic, oracle agreement") {
  CHECK(two_mode_responsibility(1.0, 0.5, 0.5, 0.3, 0.3) ==
        doctest::Approx(0.5));
  // l^2 / s~^2 = 4 kappa with kappa = 7 at xi = 0: sigmoid(-14).
  const double v = two_mode_responsibility(std::sqrt(28.0 * 0.01), 0.01, 0.0,
                                           0.5, 0.5);
  CHECK(v == doctest::Approx(1.0 / (1.0 + std::exp(14.0))).epsilon(1e-12));

  // Agreement with the full responsibilities on a two-mode mixture.
  const GaussianMixture gmm = two_mode_1d(0.0, 1.0, 0.1, 0.4);
  CounterRng rng(13, 0, 0);
  for (int trial = 0; trial < 40; ++trial) {
    const double sts = 0.01 + rng.uniform();
    const double xi = -0.5 + 2.0 * rng.uniform();
    Eigen::VectorXd y(1);
    y << xi;  // modes at 0 and 1, so y = xi directly
    const Eigen::VectorXd g = responsibilities_rescaled(gmm, sts, y);
    const double direct = two_mode_responsibility(1.0, sts, xi, 0.4, 0.6);
    CHECK(std::abs(direct - g[1]) <= 1e-12);
  }

  // Strictly increasing in xi; value at 1/2 is pi_j / (pi_i + pi_j).
  double prev = -1.0;
  for (int i = 0; i <= 20; ++i) {
    const double xi = i / 20.0;
    const double r = two_mode_responsibility(1.0, 0.05, xi, 0.4, 0.6);
    CHECK(r > prev);
    prev = r;
  }
  CHECK(two_mode_responsibility(1.0, 0.05, 0.5, 0.4, 0.6) ==
        doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("two-mode 1D posterior mean matches the tanh closed form") {
  const GaussianMixture gmm = two_mode_1d(-0.3, 0.9, 0.2, 0.5);
  const NoiseSchedule sched = build_linear_schedule(150, 1e-4, 0.02, gmm.sigma);
  CounterRng rng(17, 0, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 150);
    Eigen::VectorXd x(1);
    x << 1.5 * rng.normal();
    const Eigen::VectorXd g = responsibilities(gmm, sched, x, t);
    const double sab = std::sqrt(sched.alpha_bar(t));
    const double post = g[0] * sab * -0.3 + g[1] * sab * 0.9;
    const double a = sab * -0.3, b = sab * 0.9;
    const double m = 0.5 * (a + b);
    const double oracle = m + 0.5 * (b - a) *
                                  std::tanh((b - a) * (x[0] - m) /
                                            (2.0 * sched.sigma_sq(t)));
    CHECK(std::abs(post - oracle) <= 1e-10);
  }
}

TEST_CASE("mixture JSON round trip") {
  const GaussianMixture gmm = build_grid_mixture(5, 2.0, 0.02, 2, 25);
  const GaussianMixture back = mixture_from_json(mixture_to_json(gmm));
  CHECK(back.n_modes == gmm.n_modes);
  CHECK(back.sigma == gmm.sigma);
  CHECK((back.modes - gmm.modes).norm() == 0.0);
  CHECK((back.weights - gmm.weights).norm() == 0.0);
}
