#include "gmdiff/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "gmdiff/rng.hpp"
#include "gmdiff/schedule.hpp"

namespace gmdiff {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr int kMaxFpsCandidates = 500000;

thread_local std::vector<double> tl_logp;

// Lattice coordinate for index k: separation * (k - floor((side-1)/2)).
// Centered for odd sides; {0, 1, ...} anchored for side = 2.
double lattice_coord(int k, int side, double separation) {
  return separation * (k - (side - 1) / 2);
}

Eigen::MatrixXd enumerate_lattice(int side, double separation, int dim,
                                  long long count) {
  Eigen::MatrixXd points(count, dim);
  std::vector<int> idx(dim, 0);
  for (long long p = 0; p < count; ++p) {
    for (int d = 0; d < dim; ++d)
      points(p, d) = lattice_coord(idx[d], side, separation);
    for (int d = dim - 1; d >= 0; --d) {
      if (++idx[d] < side) break;
      idx[d] = 0;
    }
  }
  return points;
}

Eigen::MatrixXd sample_lattice(int side, double separation, int dim,
                               int count) {
  // Lattice too large to enumerate; draw candidates coordinate-wise from a
  // fixed stream so the candidate set depends only on (side, dim).
  Eigen::MatrixXd points(count, dim);
  CounterRng rng(0x6d69787475726573ull, (std::uint64_t(side) << 32) | dim,
                 kStreamAux0);
  for (int p = 0; p < count; ++p)
    for (int d = 0; d < dim; ++d) {
      const int k = static_cast<int>(rng.next_u64() % side);
      points(p, d) = lattice_coord(k, side, separation);
    }
  return points;
}

Eigen::MatrixXd farthest_point_sample(const Eigen::MatrixXd& candidates,
                                      int n_keep) {
  const int n = static_cast<int>(candidates.rows());
  std::vector<int> chosen;
  chosen.reserve(n_keep);
  chosen.push_back(0);
  Eigen::VectorXd min_dist =
      (candidates.rowwise() - candidates.row(0)).rowwise().squaredNorm();
  while (static_cast<int>(chosen.size()) < n_keep) {
    int best = 0;
    double best_dist = -1.0;
    for (int p = 0; p < n; ++p) {
      if (min_dist[p] > best_dist) {  // ties keep the lowest index
        best_dist = min_dist[p];
        best = p;
      }
    }
    chosen.push_back(best);
    const auto d2 =
        (candidates.rowwise() - candidates.row(best)).rowwise().squaredNorm();
    min_dist = min_dist.cwiseMin(d2);
  }
  Eigen::MatrixXd modes(n_keep, candidates.cols());
  for (int m = 0; m < n_keep; ++m) modes.row(m) = candidates.row(chosen[m]);
  return modes;
}

// log responsibilities (unnormalized) for modes scaled by `mode_scale`
// and variance `var`; returns the max entry.
double fill_log_posteriors(const GaussianMixture& gmm, double mode_scale,
                           double var, const Eigen::VectorXd& x,
                           std::vector<double>& logp) {
  const int n = gmm.n_modes;
  logp.resize(n);
  double best = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k) {
    const double d2 = (x - mode_scale * gmm.modes.row(k).transpose()).squaredNorm();
    logp[k] = std::log(gmm.weights[k]) - 0.5 * d2 / var;
    best = std::max(best, logp[k]);
  }
  return best;
}

Eigen::VectorXd normalized_responsibilities(const GaussianMixture& gmm,
                                            double mode_scale, double var,
                                            const Eigen::VectorXd& x) {
  if (!x.allFinite())
    throw std::invalid_argument("responsibilities: non-finite state");
  auto& logp = tl_logp;
  const double best = fill_log_posteriors(gmm, mode_scale, var, x, logp);
  Eigen::VectorXd gamma(gmm.n_modes);
  double sum = 0.0;
  for (int k = 0; k < gmm.n_modes; ++k) {
    gamma[k] = std::exp(logp[k] - best);
    sum += gamma[k];
  }
  gamma /= sum;
  for (int k = 0; k < gmm.n_modes; ++k)
    if (gamma[k] < 1e-300) gamma[k] = 0.0;
  return gamma;
}

}  // namespace

void GaussianMixture::validate() const {
  if (n_modes <= 0) throw std::invalid_argument("mixture: n_modes must be positive");
  if (dim <= 0) throw std::invalid_argument("mixture: dim must be positive");
  if (modes.rows() != n_modes || modes.cols() != dim)
    throw std::invalid_argument("mixture: modes shape mismatch");
  if (weights.size() != n_modes)
    throw std::invalid_argument("mixture: weights size mismatch");
  if ((weights.array() <= 0.0).any())
    throw std::invalid_argument("mixture: weights must be strictly positive");
  if (std::abs(weights.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("mixture: weights must sum to 1");
  if (!(sigma > 0.0)) throw std::invalid_argument("mixture: sigma must be positive");
  for (int a = 0; a < n_modes; ++a)
    for (int b = a + 1; b < n_modes; ++b)
      if ((modes.row(a) - modes.row(b)).squaredNorm() == 0.0)
        throw std::invalid_argument("mixture: duplicate modes");
}

Eigen::VectorXd GaussianMixture::log_weights() const {
  return weights.array().log();
}

GaussianMixture build_grid_mixture(int side, double separation, double sigma,
                                   int dim, int n_keep) {
  if (side < 2) throw std::invalid_argument("build_grid_mixture: side must be >= 2");
  if (!(separation > 0.0))
    throw std::invalid_argument("build_grid_mixture: separation must be positive");
  if (!(sigma > 0.0))
    throw std::invalid_argument("build_grid_mixture: sigma must be positive");
  if (dim < 1) throw std::invalid_argument("build_grid_mixture: dim must be >= 1");

  const double lattice_size = std::pow(static_cast<double>(side), dim);
  if (static_cast<double>(n_keep) > lattice_size)
    throw std::invalid_argument("build_grid_mixture: n_keep exceeds lattice size");
  GaussianMixture gmm;
  gmm.dim = dim;
  if (dim <= 2) {
    const long long count = static_cast<long long>(lattice_size);
    gmm.modes = enumerate_lattice(side, separation, dim, count);
    gmm.n_modes = static_cast<int>(count);
  } else {
    Eigen::MatrixXd candidates;
    if (lattice_size <= static_cast<double>(kMaxFpsCandidates)) {
      candidates = enumerate_lattice(side, separation, dim,
                                     static_cast<long long>(lattice_size));
    } else {
      candidates = sample_lattice(side, separation, dim, kMaxFpsCandidates);
    }
    gmm.modes = farthest_point_sample(candidates, n_keep);
    gmm.n_modes = n_keep;
  }
  const double scale = 2.0 * std::sqrt(static_cast<double>(dim));
  gmm.modes /= scale;
  gmm.sigma_raw = sigma;
  gmm.norm_scale = scale;
  gmm.sigma = sigma / scale;
  gmm.weights = Eigen::VectorXd::Constant(gmm.n_modes, 1.0 / gmm.n_modes);
  gmm.validate();
  return gmm;
}

Eigen::VectorXd responsibilities(const GaussianMixture& gmm,
                                 const NoiseSchedule& schedule,
                                 const Eigen::VectorXd& x, int t) {
  const double scale = std::sqrt(schedule.alpha_bar(t));
  return normalized_responsibilities(gmm, scale, schedule.sigma_sq(t), x);
}

void score_exact_into(const GaussianMixture& gmm, const NoiseSchedule& schedule,
                      const Eigen::VectorXd& x, int t,
                      Eigen::Ref<Eigen::VectorXd> out) {
  const double scale = std::sqrt(schedule.alpha_bar(t));
  const double var = schedule.sigma_sq(t);
  const Eigen::VectorXd gamma = normalized_responsibilities(gmm, scale, var, x);
  out = (scale * (gmm.modes.transpose() * gamma) - x) / var;
}

Eigen::VectorXd score_exact(const GaussianMixture& gmm,
                            const NoiseSchedule& schedule,
                            const Eigen::VectorXd& x, int t) {
  Eigen::VectorXd out(x.size());
  score_exact_into(gmm, schedule, x, t, out);
  return out;
}

double log_marginal_density(const GaussianMixture& gmm,
                            const NoiseSchedule& schedule,
                            const Eigen::VectorXd& x, int t) {
  if (!x.allFinite())
    throw std::invalid_argument("log_marginal_density: non-finite state");
  const double scale = std::sqrt(schedule.alpha_bar(t));
  const double var = schedule.sigma_sq(t);
  auto& logp = tl_logp;
  const double best = fill_log_posteriors(gmm, scale, var, x, logp);
  double sum = 0.0;
  for (int k = 0; k < gmm.n_modes; ++k) sum += std::exp(logp[k] - best);
  const double d = static_cast<double>(gmm.dim);
  return best + std::log(sum) - 0.5 * d * (kLog2Pi + std::log(var));
}

Eigen::VectorXd responsibilities_rescaled(const GaussianMixture& gmm,
                                          double sigma_tilde_sq,
                                          const Eigen::VectorXd& y) {
  return normalized_responsibilities(gmm, 1.0, sigma_tilde_sq, y);
}

RescaledState rescale(const GaussianMixture& gmm, const NoiseSchedule& schedule,
                      const Eigen::VectorXd& x, int t) {
  const double ab = schedule.alpha_bar(t);
  if (!(ab > 0.0)) throw std::invalid_argument("rescale: alpha_bar must be positive");
  RescaledState state;
  state.y = x / std::sqrt(ab);
  state.sigma_tilde_sq = schedule.sigma_tilde_sq(t);
  state.gamma_tilde =
      normalized_responsibilities(gmm, 1.0, state.sigma_tilde_sq, state.y);
  return state;
}

double two_mode_responsibility(double ell, double sigma_tilde_sq, double xi,
                               double pi_i, double pi_j) {
  if (!(sigma_tilde_sq > 0.0))
    throw std::invalid_argument("two_mode_responsibility: variance must be positive");
  const double z = std::log(pi_j / pi_i) +
                   (ell * ell / sigma_tilde_sq) * (xi - 0.5);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Eigen::VectorXd posterior_mean_rescaled(const GaussianMixture& gmm,
                                        double sigma_tilde_sq,
                                        const Eigen::VectorXd& y) {
  const Eigen::VectorXd gamma =
      normalized_responsibilities(gmm, 1.0, sigma_tilde_sq, y);
  return gmm.modes.transpose() * gamma;
}

nlohmann::json mixture_to_json(const GaussianMixture& gmm) {
  nlohmann::json j;
  j["n_modes"] = gmm.n_modes;
  j["dim"] = gmm.dim;
  j["sigma"] = gmm.sigma;
  j["sigma_raw"] = gmm.sigma_raw;
  j["norm_scale"] = gmm.norm_scale;
  j["weights"] = std::vector<double>(gmm.weights.data(),
                                     gmm.weights.data() + gmm.weights.size());
  auto modes = nlohmann::json::array();
  for (int k = 0; k < gmm.n_modes; ++k) {
    std::vector<double> row(gmm.dim);
    for (int d = 0; d < gmm.dim; ++d) row[d] = gmm.modes(k, d);
    modes.push_back(row);
  }
  j["modes"] = modes;
  return j;
}

GaussianMixture mixture_from_json(const nlohmann::json& j) {
  GaussianMixture gmm;
  gmm.n_modes = j.at("n_modes").get<int>();
  gmm.dim = j.at("dim").get<int>();
  gmm.sigma = j.at("sigma").get<double>();
  gmm.sigma_raw = j.value("sigma_raw", gmm.sigma);
  gmm.norm_scale = j.value("norm_scale", 1.0);
  const auto w = j.at("weights").get<std::vector<double>>();
  gmm.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
  gmm.modes.resize(gmm.n_modes, gmm.dim);
  const auto& modes = j.at("modes");
  for (int k = 0; k < gmm.n_modes; ++k)
    for (int d = 0; d < gmm.dim; ++d)
      gmm.modes(k, d) = modes.at(k).at(d).get<double>();
  gmm.validate();
  return gmm;
}

}  // namespace gmdiff
