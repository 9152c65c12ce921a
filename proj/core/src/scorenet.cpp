#include "gmdiff/scorenet.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gmdiff/geometry.hpp"
#include "gmdiff/rng.hpp"

namespace gmdiff {

namespace {

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }
inline double silu_grad(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

int feature_dim(int dim) { return dim + 3 + (dim > 2 ? 8 : 0); }

}  // namespace

ScoreNet::ScoreNet(int dim, int T, std::uint64_t init_seed) : dim_(dim), T_(T) {
  const int in = feature_dim(dim);
  W1_.resize(kHidden, in);
  W2_.resize(kHidden, kHidden);
  W3_.resize(dim, kHidden);
  b1_ = Eigen::VectorXd::Zero(kHidden);
  b2_ = Eigen::VectorXd::Zero(kHidden);
  b3_ = Eigen::VectorXd::Zero(dim);
  CounterRng rng(init_seed, 0x6e6574ull, kStreamInit);
  const auto init = [&rng](Eigen::MatrixXd& W) {
    const double scale = std::sqrt(2.0 / (W.cols() + W.rows()));
    for (Eigen::Index c = 0; c < W.cols(); ++c)
      for (Eigen::Index r = 0; r < W.rows(); ++r) W(r, c) = scale * rng.normal();
  };
  init(W1_);
  init(W2_);
  init(W3_);
}

std::int64_t ScoreNet::parameter_count() const {
  return W1_.size() + W2_.size() + W3_.size() + b1_.size() + b2_.size() +
         b3_.size();
}

void ScoreNet::features(const NoiseSchedule& schedule, const Eigen::VectorXd& x,
                        int t, Eigen::Ref<Eigen::VectorXd> out) const {
  const double ab = schedule.alpha_bar(t);
  out.head(dim_) = x;
  out[dim_] = static_cast<double>(t) / T_;
  out[dim_ + 1] = std::sqrt(ab);
  out[dim_ + 2] = std::sqrt(1.0 - ab);
  if (dim_ > 2) {
    // Sinusoidal features of the log signal-to-noise ratio.
    const double snr = std::log(std::max(ab, 1e-300) /
                                std::max(1.0 - ab, 1e-300)) / 4.0;
    const double freqs[4] = {0.25, 0.5, 1.0, 2.0};
    for (int k = 0; k < 4; ++k) {
      out[dim_ + 3 + 2 * k] = std::sin(freqs[k] * snr);
      out[dim_ + 4 + 2 * k] = std::cos(freqs[k] * snr);
    }
  }
}

Eigen::MatrixXd ScoreNet::forward(const Eigen::MatrixXd& X) const {
  Eigen::MatrixXd z1 = (W1_ * X).colwise() + b1_;
  Eigen::MatrixXd a1 = (z1.array() / (1.0 + (-z1.array()).exp())).matrix();
  Eigen::MatrixXd z2 = (W2_ * a1).colwise() + b2_;
  Eigen::MatrixXd a2 = (z2.array() / (1.0 + (-z2.array()).exp())).matrix();
  return (W3_ * a2).colwise() + b3_;
}

Eigen::VectorXd ScoreNet::predict(const NoiseSchedule& schedule,
                                  const Eigen::VectorXd& x, int t) const {
  Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 96, 1> f(input_dim());
  features(schedule, x, t, f);
  Eigen::Matrix<double, kHidden, 1> z1 = W1_ * f + b1_;
  for (int i = 0; i < kHidden; ++i) z1[i] = silu(z1[i]);
  Eigen::Matrix<double, kHidden, 1> z2 = W2_ * z1 + b2_;
  for (int i = 0; i < kHidden; ++i) z2[i] = silu(z2[i]);
  return W3_ * z2 + b3_;
}

std::vector<Eigen::MatrixXd*> ScoreNet::weight_refs() {
  return {&W1_, &W2_, &W3_};
}
std::vector<Eigen::VectorXd*> ScoreNet::bias_refs() {
  return {&b1_, &b2_, &b3_};
}

void ScoreNet::save(const std::string& path, std::uint64_t seed, int epoch,
                    double loss) const {
  nlohmann::json header;
  header["dim"] = dim_;
  header["T"] = T_;
  header["hidden"] = kHidden;
  header["input_dim"] = input_dim();
  header["seed"] = seed;
  header["epoch"] = epoch;
  header["loss"] = loss;
  header["parameter_count"] = parameter_count();
  const std::string head = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("scorenet: cannot write " + path);
  const std::uint64_t head_len = head.size();
  out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  const auto dump = [&out](const double* data, std::int64_t n) {
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(n * sizeof(double)));
  };
  dump(W1_.data(), W1_.size());
  dump(b1_.data(), b1_.size());
  dump(W2_.data(), W2_.size());
  dump(b2_.data(), b2_.size());
  dump(W3_.data(), W3_.size());
  dump(b3_.data(), b3_.size());
}

ScoreNet ScoreNet::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("scorenet: cannot read " + path);
  std::uint64_t head_len = 0;
  in.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  const auto header = nlohmann::json::parse(head);
  ScoreNet net(header.at("dim").get<int>(), header.at("T").get<int>(), 0);
  const auto slurp = [&in](double* data, std::int64_t n) {
    in.read(reinterpret_cast<char*>(data),
            static_cast<std::streamsize>(n * sizeof(double)));
  };
  slurp(net.W1_.data(), net.W1_.size());
  slurp(net.b1_.data(), net.b1_.size());
  slurp(net.W2_.data(), net.W2_.size());
  slurp(net.b2_.data(), net.b2_.size());
  slurp(net.W3_.data(), net.W3_.size());
  slurp(net.b3_.data(), net.b3_.size());
  if (!in) throw std::runtime_error("scorenet: truncated checkpoint " + path);
  return net;
}

void TrainConfig::validate() const {
  if (n_data < 1) throw std::invalid_argument("train: n_data must be positive");
  if (batch < 1 || batch > n_data)
    throw std::invalid_argument("train: need 1 <= batch <= n_data");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be positive");
  if (!(lr_end <= lr_start))
    throw std::invalid_argument("train: lr_end must be <= lr_start");
}

namespace {

struct Adam {
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<Eigen::MatrixXd> mW, vW;
  std::vector<Eigen::VectorXd> mb, vb;
  long step = 0;

  void init(ScoreNet& net) {
    for (auto* W : net.weight_refs()) {
      mW.emplace_back(Eigen::MatrixXd::Zero(W->rows(), W->cols()));
      vW.emplace_back(Eigen::MatrixXd::Zero(W->rows(), W->cols()));
    }
    for (auto* b : net.bias_refs()) {
      mb.emplace_back(Eigen::VectorXd::Zero(b->size()));
      vb.emplace_back(Eigen::VectorXd::Zero(b->size()));
    }
  }

  void update(ScoreNet& net, const std::vector<Eigen::MatrixXd>& gW,
              const std::vector<Eigen::VectorXd>& gb, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(b1, step);
    const double c2 = 1.0 - std::pow(b2, step);
    auto weights = net.weight_refs();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      mW[i] = b1 * mW[i] + (1.0 - b1) * gW[i];
      vW[i] = b2 * vW[i] + (1.0 - b2) * gW[i].cwiseProduct(gW[i]);
      weights[i]->array() -=
          lr * (mW[i].array() / c1) /
          ((vW[i].array() / c2).sqrt() + eps);
    }
    auto biases = net.bias_refs();
    for (std::size_t i = 0; i < biases.size(); ++i) {
      mb[i] = b1 * mb[i] + (1.0 - b1) * gb[i];
      vb[i] = b2 * vb[i] + (1.0 - b2) * gb[i].cwiseProduct(gb[i]);
      biases[i]->array() -=
          lr * (mb[i].array() / c1) /
          ((vb[i].array() / c2).sqrt() + eps);
    }
  }
};

}  // namespace

TrainResult train_score(const GaussianMixture& gmm,
                        const NoiseSchedule& schedule,
                        const TrainConfig& config) {
  config.validate();
  const int dim = gmm.dim;
  const int T = schedule.T();
  const int in_dim = feature_dim(dim);

  // Training data: x0 ~ p_data, drawn once.
  Eigen::MatrixXd data(dim, config.n_data);
  {
    CounterRng rng(config.seed, 0x64617461ull, kStreamInit);
    for (int n = 0; n < config.n_data; ++n) {
      const double uw = rng.uniform();
      int k = 0;
      double acc = 0.0;
      for (; k < gmm.n_modes - 1; ++k) {
        acc += gmm.weights[k];
        if (uw <= acc) break;
      }
      for (int d = 0; d < dim; ++d)
        data(d, n) = gmm.modes(k, d) + gmm.sigma * rng.normal();
    }
  }

  TrainResult result;
  result.net = ScoreNet(dim, T, config.seed);
  ScoreNet& net = result.net;
  Adam adam;
  adam.init(net);

  const int B = config.batch;
  Eigen::MatrixXd X(in_dim, B), E(dim, B);
  Eigen::MatrixXd Z1(ScoreNet::kHidden, B), A1(ScoreNet::kHidden, B);
  Eigen::MatrixXd Z2(ScoreNet::kHidden, B), A2(ScoreNet::kHidden, B);
  Eigen::MatrixXd Y(dim, B), dY(dim, B);
  Eigen::MatrixXd dZ2(ScoreNet::kHidden, B), dZ1(ScoreNet::kHidden, B);
  Eigen::VectorXd xt(dim), feat(in_dim);

  const auto assemble_batch = [&](int step) {
    CounterRng rng(config.seed, 0x62617463ull + step, kStreamAux0);
    const int n_low = static_cast<int>(config.low_t_fraction * B);
    const int t_low_max = std::max(2, T / 8);
    for (int n = 0; n < B; ++n) {
      const int idx = static_cast<int>(rng.next_u64() % config.n_data);
      const int t = n < n_low
                        ? 1 + static_cast<int>(rng.next_u64() % t_low_max)
                        : 1 + static_cast<int>(rng.next_u64() % T);
      const double ab = schedule.alpha_bar(t);
      const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
      for (int d = 0; d < dim; ++d) {
        E(d, n) = rng.normal();
        xt[d] = sa * data(d, idx) + sb * E(d, n);
      }
      net.features(schedule, xt, t, feat);
      X.col(n) = feat;
    }
  };

  Eigen::MatrixXd S1(ScoreNet::kHidden, B), S2(ScoreNet::kHidden, B);
  const auto forward_loss = [&]() {
    // SiLU via vectorized exp: s = sigmoid(z), silu = z s,
    // silu' = s (1 + z (1 - s)).
    Z1.noalias() = net.W1_ * X;
    Z1.colwise() += net.b1_;
    S1 = (1.0 / (1.0 + (-Z1.array()).exp())).matrix();
    A1 = (Z1.array() * S1.array()).matrix();
    Z2.noalias() = net.W2_ * A1;
    Z2.colwise() += net.b2_;
    S2 = (1.0 / (1.0 + (-Z2.array()).exp())).matrix();
    A2 = (Z2.array() * S2.array()).matrix();
    Y.noalias() = net.W3_ * A2;
    Y.colwise() += net.b3_;
    dY = Y - E;
    return dY.squaredNorm() / B;
  };

  std::vector<Eigen::MatrixXd> gW(3);
  std::vector<Eigen::VectorXd> gb(3);
  const int total_steps = config.total_steps();
  for (int step = 0; step < total_steps; ++step) {
    assemble_batch(step);
    const double loss = forward_loss();
    if (!std::isfinite(loss)) {
      // Divergent loss: abort with the last parameters.
      result.final_loss = loss;
      break;
    }
    if (step == 0) result.initial_loss = loss;
    if (step % 50 == 0) result.loss_curve.push_back(loss);
    result.final_loss = loss;

    dY *= 2.0 / B;
    gW[2].noalias() = dY * A2.transpose();
    gb[2] = dY.rowwise().sum();
    dZ2.noalias() = net.W3_.transpose() * dY;
    dZ2.array() *= (S2.array() * (1.0 + Z2.array() * (1.0 - S2.array())));
    gW[1].noalias() = dZ2 * A1.transpose();
    gb[1] = dZ2.rowwise().sum();
    dZ1.noalias() = net.W2_.transpose() * dZ2;
    dZ1.array() *= (S1.array() * (1.0 + Z1.array() * (1.0 - S1.array())));
    gW[0].noalias() = dZ1 * X.transpose();
    gb[0] = dZ1.rowwise().sum();

    const double frac =
        total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 0.0;
    const double lr = config.lr_start + (config.lr_end - config.lr_start) * frac;
    adam.update(net, gW, gb, lr);
  }
  return result;
}

void LearnedScore::score(const Eigen::VectorXd& x, int t,
                         Eigen::Ref<Eigen::VectorXd> out) const {
  const Eigen::VectorXd eps_hat = net_.predict(*schedule_, x, t);
  const double denom =
      convention_ == ScoreConvention::noise_over_sqrt_one_minus_alpha_bar
          ? std::sqrt(1.0 - schedule_->alpha_bar(t))
          : std::sqrt(schedule_->sigma_sq(t));
  out = -eps_hat / std::max(denom, 1e-12);
}

ScoreErrorSpec score_error_field(const ScoreSource& learned,
                                 const GaussianMixture& gmm,
                                 const NoiseSchedule& schedule, int t_max,
                                 int samples_per_t, std::uint64_t seed) {
  ScoreErrorSpec spec;
  spec.rho_bar.assign(t_max + 1, 0.0);
  spec.l_psi.assign(t_max + 1, 0.0);
  Eigen::VectorXd s_learned(gmm.dim), s_exact(gmm.dim);
  Eigen::VectorXd s_learned2(gmm.dim), s_exact2(gmm.dim);
  for (int t = 1; t <= t_max; ++t) {
    CounterRng rng(seed, 0x707369ull, static_cast<std::uint32_t>(t));
    const double sab = std::sqrt(schedule.alpha_bar(t));
    const double sig_t = std::sqrt(schedule.sigma_sq(t));
    double rho = 0.0, lip = 0.0;
    for (int n = 0; n < samples_per_t; ++n) {
      // Tube-region sample: a point near a random pair's segment.
      const int i = static_cast<int>(rng.next_u64() % gmm.n_modes);
      int j = static_cast<int>(rng.next_u64() % gmm.n_modes);
      if (j == i) j = (j + 1) % gmm.n_modes;
      const double xi = rng.uniform();
      Eigen::VectorXd y = gmm.modes.row(i).transpose() +
                          xi * (gmm.modes.row(j) - gmm.modes.row(i)).transpose();
      Eigen::VectorXd x(gmm.dim);
      for (int d = 0; d < gmm.dim; ++d)
        x[d] = sab * y[d] + sig_t * 0.5 * rng.normal();
      learned.score(x, t, s_learned);
      score_exact_into(gmm, schedule, x, t, s_exact);
      const double err = (s_learned - s_exact).norm();
      rho = std::max(rho, err * schedule.sigma_sq(t) / sab);
      Eigen::VectorXd x2 = x;
      const double h = 1e-3;
      x2[static_cast<int>(rng.next_u64() % gmm.dim)] += h;
      learned.score(x2, t, s_learned2);
      score_exact_into(gmm, schedule, x2, t, s_exact2);
      lip = std::max(
          lip, ((s_learned2 - s_exact2) - (s_learned - s_exact)).norm() / h);
    }
    spec.rho_bar[t] = rho;
    spec.l_psi[t] = lip;
  }
  return spec;
}

}  // namespace gmdiff
