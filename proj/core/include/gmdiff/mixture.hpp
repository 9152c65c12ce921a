#pragma once

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

namespace gmdiff {

class NoiseSchedule;

// Isotropic N-mode Gaussian mixture target. Modes are stored one per row.
// `sigma` is the per-component standard deviation actually used by all
// downstream arithmetic; `sigma_raw` and `norm_scale` record the value
// before the 2*sqrt(dim) coordinate normalization applied at build time.
struct GaussianMixture {
  int n_modes = 0;
  int dim = 0;
  Eigen::MatrixXd modes;    // n_modes x dim
  Eigen::VectorXd weights;  // strictly positive, sums to 1
  double sigma = 0.0;
  double sigma_raw = 0.0;
  double norm_scale = 1.0;

  void validate() const;  // throws std::invalid_argument on violation
  Eigen::VectorXd log_weights() const;
};

struct RescaledState {
  Eigen::VectorXd y;            // x / sqrt(alpha_bar_t)
  Eigen::VectorXd gamma_tilde;  // responsibilities against static modes
  double sigma_tilde_sq = 0.0;
};

// Uniform lattice mixture; dim == 2 keeps the full side x side grid,
// higher dims keep n_keep modes via farthest-point sampling over at most
// 500000 lattice candidates. Coordinates and sigma are then divided by
// 2*sqrt(dim).
GaussianMixture build_grid_mixture(int side, double separation, double sigma,
                                   int dim, int n_keep);

// Posterior component probabilities gamma_k(x, t), computed in log space
// with max subtraction. Values below 1e-300 are clamped to zero after
// normalization.
Eigen::VectorXd responsibilities(const GaussianMixture& gmm,
                                 const NoiseSchedule& schedule,
                                 const Eigen::VectorXd& x, int t);

// Closed-form score of the diffused marginal:
//   grad log p_t(x) = -(x - sum_k gamma_k mu_t^k) / sigma_t^2.
Eigen::VectorXd score_exact(const GaussianMixture& gmm,
                            const NoiseSchedule& schedule,
                            const Eigen::VectorXd& x, int t);
void score_exact_into(const GaussianMixture& gmm, const NoiseSchedule& schedule,
                      const Eigen::VectorXd& x, int t,
                      Eigen::Ref<Eigen::VectorXd> out);

double log_marginal_density(const GaussianMixture& gmm,
                            const NoiseSchedule& schedule,
                            const Eigen::VectorXd& x, int t);

RescaledState rescale(const GaussianMixture& gmm, const NoiseSchedule& schedule,
                      const Eigen::VectorXd& x, int t);

// Responsibilities against static modes with effective variance
// sigma_tilde_sq, evaluated at y. Same log-odds as responsibilities().
Eigen::VectorXd responsibilities_rescaled(const GaussianMixture& gmm,
                                          double sigma_tilde_sq,
                                          const Eigen::VectorXd& y);

// Two-mode responsibility of mode j along the (i, j) segment:
//   sigmoid(log(pi_j / pi_i) + (l^2 / sigma_tilde^2) (xi - 1/2)).
double two_mode_responsibility(double ell, double sigma_tilde_sq, double xi,
                               double pi_i, double pi_j);

// Posterior mean of the static modes, sum_k gamma_tilde_k mu^k.
Eigen::VectorXd posterior_mean_rescaled(const GaussianMixture& gmm,
                                        double sigma_tilde_sq,
                                        const Eigen::VectorXd& y);

nlohmann::json mixture_to_json(const GaussianMixture& gmm);
GaussianMixture mixture_from_json(const nlohmann::json& j);

}  // namespace gmdiff
