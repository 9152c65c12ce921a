#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "gmdiff/mixture.hpp"
#include "gmdiff/rng.hpp"
#include "gmdiff/schedule.hpp"
#include "gmdiff/scorenet.hpp"

using namespace gmdiff;

namespace {

GaussianMixture single_gaussian_2d(double x, double y, double sigma) {
  GaussianMixture gmm;
  gmm.n_modes = 1;
  gmm.dim = 2;
  gmm.modes.resize(1, 2);
  gmm.modes << x, y;
  gmm.weights = Eigen::VectorXd::Ones(1);
  gmm.sigma = sigma;
  gmm.sigma_raw = sigma;
  gmm.validate();
  return gmm;
}

}  // namespace

TEST_CASE("parameter count matches the 3-layer 64-hidden architecture") {
  ScoreNet net2(2, 100, 1);
  // in = 2 + 3 time features
  CHECK(net2.parameter_count() == 5 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
  ScoreNet net4(4, 100, 1);
  // in = 4 + 3 + 8 log-SNR features
  CHECK(net4.parameter_count() == 15 * 64 + 64 + 64 * 64 + 64 + 64 * 4 + 4);
}

TEST_CASE("output is finite across the time range") {
  const NoiseSchedule sched = build_linear_schedule(100, 1e-4, 0.02, 0.02);
  ScoreNet net(2, 100, 7);
  Eigen::VectorXd x(2);
  x << 0.4, -0.9;
  for (int t = 1; t <= 100; t += 9) CHECK(net.predict(sched, x, t).allFinite());
}

TEST_CASE("backprop gradients match central finite differences") {
  const GaussianMixture gmm = single_gaussian_2d(0.2, -0.1, 0.3);
  const NoiseSchedule sched = build_linear_schedule(50, 1e-3, 0.02, gmm.sigma);
  // Tiny batch so the FD probe is cheap; the loss path is the same one
  // training uses.
  const int B = 16;
  ScoreNet net(2, 50, 3);
  Eigen::MatrixXd X(net.input_dim(), B), E(2, B);
  CounterRng rng(5, 0, 0);
  Eigen::VectorXd xt(2), feat(net.input_dim());
  for (int n = 0; n < B; ++n) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 50);
    const double ab = sched.alpha_bar(t);
    for (int d = 0; d < 2; ++d) {
      E(d, n) = rng.normal();
      xt[d] = std::sqrt(ab) * gmm.modes(0, d) + std::sqrt(1 - ab) * E(d, n);
    }
    net.features(sched, xt, t, feat);
    X.col(n) = feat;
  }
  const auto loss_of = [&](ScoreNet& n) {
    return (n.forward(X) - E).squaredNorm() / B;
  };

  // Analytic gradient via the same backprop as train_score.
  const auto silu = [](double z) { return z / (1.0 + std::exp(-z)); };
  const auto silu_grad = [](double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
  };
  Eigen::MatrixXd Z1 = (net.W1_ * X).colwise() + net.b1_;
  Eigen::MatrixXd A1 = Z1.unaryExpr(silu);
  Eigen::MatrixXd Z2 = (net.W2_ * A1).colwise() + net.b2_;
  Eigen::MatrixXd A2 = Z2.unaryExpr(silu);
  Eigen::MatrixXd Y = (net.W3_ * A2).colwise() + net.b3_;
  Eigen::MatrixXd dY = 2.0 / B * (Y - E);
  Eigen::MatrixXd gW3 = dY * A2.transpose();
  Eigen::MatrixXd dZ2 = net.W3_.transpose() * dY;
  dZ2.array() *= Z2.unaryExpr(silu_grad).array();
  Eigen::MatrixXd gW2 = dZ2 * A1.transpose();
  Eigen::MatrixXd dZ1 = net.W2_.transpose() * dZ2;
  dZ1.array() *= Z1.unaryExpr(silu_grad).array();
  Eigen::MatrixXd gW1 = dZ1 * X.transpose();
  Eigen::VectorXd gb2 = dZ2.rowwise().sum();

  // Probe parameters spread across the layers.
  const double h = 1e-6;
  struct Probe {
    Eigen::MatrixXd* W;
    const Eigen::MatrixXd* g;
    int r, c;
  };
  std::vector<Probe> probes = {
      {&net.W1_, &gW1, 0, 0},  {&net.W1_, &gW1, 10, 2}, {&net.W1_, &gW1, 63, 4},
      {&net.W2_, &gW2, 5, 7},  {&net.W2_, &gW2, 31, 31}, {&net.W2_, &gW2, 63, 0},
      {&net.W3_, &gW3, 0, 10}, {&net.W3_, &gW3, 1, 63}};
  for (const auto& p : probes) {
    const double saved = (*p.W)(p.r, p.c);
    (*p.W)(p.r, p.c) = saved + h;
    const double up = loss_of(net);
    (*p.W)(p.r, p.c) = saved - h;
    const double dn = loss_of(net);
    (*p.W)(p.r, p.c) = saved;
    const double fd = (up - dn) / (2.0 * h);
    const double an = (*p.g)(p.r, p.c);
    CHECK(std::abs(fd - an) <= 1e-4 * std::max(1.0, std::abs(an)));
  }
  for (const int r : {3, 40}) {
    const double saved = net.b2_[r];
    net.b2_[r] = saved + h;
    const double up = loss_of(net);
    net.b2_[r] = saved - h;
    const double dn = loss_of(net);
    net.b2_[r] = saved;
    const double fd = (up - dn) / (2.0 * h);
    CHECK(std::abs(fd - gb2[r]) <= 1e-4 * std::max(1.0, std::abs(gb2[r])));
  }
}

TEST_CASE("training reduces the loss and is bit-deterministic") {
  // A tight single mode keeps the conditional noise well identified, so
  // the optimum sits far below the initial loss.
  const GaussianMixture gmm = single_gaussian_2d(0.5, -0.5, 0.02);
  const NoiseSchedule sched = build_linear_schedule(200, 1e-4, 0.02, gmm.sigma);
  TrainConfig tc;
  tc.n_data = 4000;
  tc.batch = 256;
  tc.epochs = 80;  // 15 steps per pass
  tc.lr_start = 3e-3;
  tc.lr_end = 3e-4;
  tc.seed = 11;
  const TrainResult a = train_score(gmm, sched, tc);
  CHECK(a.final_loss * 10.0 <= a.initial_loss);
  const TrainResult b = train_score(gmm, sched, tc);
  CHECK(a.final_loss == b.final_loss);
  CHECK((a.net.W1_ - b.net.W1_).norm() == 0.0);
  CHECK((a.net.W3_ - b.net.W3_).norm() == 0.0);

  // Learned score at the mode center is near zero at mid-t.
  const LearnedScore learned(a.net, sched);
  const int t = 100;
  Eigen::VectorXd center =
      std::sqrt(sched.alpha_bar(t)) * gmm.modes.row(0).transpose();
  const double sig_t = std::sqrt(sched.sigma_sq(t));
  CHECK(learned.score(center, t).norm() <= 0.1 / sig_t);
}

TEST_CASE("checkpoint round trip preserves predictions exactly") {
  const GaussianMixture gmm = single_gaussian_2d(0.1, 0.2, 0.3);
  const NoiseSchedule sched = build_linear_schedule(60, 1e-4, 0.02, gmm.sigma);
  ScoreNet net(2, 60, 21);
  const std::string path = "/tmp/gmdiff_test_ckpt.bin";
  net.save(path, 21, 0, 0.0);
  const ScoreNet back = ScoreNet::load(path);
  Eigen::VectorXd x(2);
  x << -0.3, 0.8;
  for (const int t : {1, 30, 60}) {
    const Eigen::VectorXd a = net.predict(sched, x, t);
    const Eigen::VectorXd b = back.predict(sched, x, t);
    CHECK((a - b).norm() == 0.0);
  }
  std::remove(path.c_str());
}

TEST_CASE("eps-hat/score conversion round-trips on the exact adapter") {
  const GaussianMixture gmm = build_grid_mixture(5, 2.0, 0.02, 2, 25);
  const NoiseSchedule sched = build_linear_schedule(200, 1e-4, 0.02, gmm.sigma);
  const ExactScore exact(gmm, sched);
  CounterRng rng(31, 0, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const int t = 1 + static_cast<int>(rng.next_u64() % 200);
    Eigen::VectorXd x(2);
    x << rng.normal(), rng.normal();
    const Eigen::VectorXd s = exact.score(x, t);
    const Eigen::VectorXd eps_hat = -std::sqrt(1.0 - sched.alpha_bar(t)) * s;
    const Eigen::VectorXd s_back =
        -eps_hat / std::sqrt(1.0 - sched.alpha_bar(t));
    CHECK((s_back - s).norm() <= 1e-12 * std::max(1.0, s.norm()));
  }
}

TEST_CASE("score error field vanishes for the exact adapter") {
  const GaussianMixture gmm = build_grid_mixture(5, 2.0, 0.02, 2, 25);
  const NoiseSchedule sched = build_linear_schedule(100, 1e-4, 0.02, gmm.sigma);
  const ExactScore exact(gmm, sched);
  const ScoreErrorSpec spec = score_error_field(exact, gmm, sched, 20, 4, 3);
  for (int t = 1; t <= 20; ++t) {
    CHECK(spec.rho_bar[t] == 0.0);
    CHECK(std::isfinite(spec.l_psi[t]));
  }
}
