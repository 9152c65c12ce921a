#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gmdiff/geometry.hpp"
#include "gmdiff/mixture.hpp"
#include "gmdiff/samplers.hpp"
#include "gmdiff/schedule.hpp"
#include "gmdiff/scorenet.hpp"

namespace gmdiff {

// ------------------------------------------------------------------ labels

enum class LabelKind { true_mode, interpolation, invalid };

struct Label {
  LabelKind kind = LabelKind::invalid;
  int i = -1;
  int j = -1;
};

// Mode check first (5 sigma, or sigma (sqrt(dim) + 4) for dim > 10), then
// nearest segment over all pairs, else invalid.
Label classify_sample(const GaussianMixture& gmm, const Eigen::VectorXd& x0);
double classification_threshold(const GaussianMixture& gmm);

// --------------------------------------------------------- critical times

struct AssumptionReport {
  double kappa = 0.0;
  std::optional<int> tau1;
  std::optional<int> tau2;
  std::vector<int> times;           // recorded trajectory times
  std::vector<double> margin;       // Delta_t per recorded time
  std::vector<double> margin_kappa; // Delta_t / (2 sigma_t^2)
};

// Largest recorded t such that the dominance margin satisfies
// Delta_{t'} >= 2 sigma_{t'}^2 kappa at every recorded t' <= t.
AssumptionReport detect_tau1(const TrajectoryRecord& traj,
                             const GaussianMixture& gmm,
                             const NoiseSchedule& schedule, double kappa);

// Largest t with l^2 >= 4 kappa sigma_tilde_{t'}^2 dim for all t' <= t.
std::optional<int> detect_tau2(double ell, const NoiseSchedule& schedule,
                               double kappa, int dim);

// Per-step margin ratios Delta_t / (2 sigma_t^2) for one trajectory,
// plus prefix minima toward t = 0 (for sweeping kappa cheaply).
std::vector<double> margin_kappa_series(const TrajectoryRecord& traj,
                                        const GaussianMixture& gmm,
                                        const NoiseSchedule& schedule);
std::optional<int> tau1_from_series(const std::vector<int>& times,
                                    const std::vector<double>& prefix_min,
                                    double kappa);
std::vector<double> prefix_min_toward_zero(const std::vector<double>& series);

// ------------------------------------------------------- tube convergence

struct ConvergenceSeries {
  std::vector<int> times;
  std::vector<double> u;
  std::vector<double> mean_dperp;  // sqrt(dim)-rescaled
  std::vector<double> ci_half;     // 95% normal CI across trajectories
};

struct ConvergenceFit {
  bool fittable = false;
  double slope = 0.0;      // per unit u
  double intercept = 0.0;
  double plateau = 0.0;    // terminal mean rescaled distance
  int fit_begin = 0;       // indices into the series
  int fit_end = 0;
};

// Mean rescaled orthogonal distance to the instantaneous dominant
// eps-extended segment, per recorded time.
ConvergenceSeries dperp_series(const std::vector<std::vector<float>>& per_traj,
                               const std::vector<int>& times,
                               const NoiseSchedule& schedule, int dim);

// Per-trajectory rescaled d_perp at each recorded step.
std::vector<float> trajectory_dperp(const TrajectoryRecord& traj,
                                    const GaussianMixture& gmm,
                                    const NoiseSchedule& schedule, double eps);

// Log-linear fit of the pre-plateau region against u(t): from the first
// step after the mean drops below 50% of its initial value to the first
// step within 2x the terminal plateau. Fewer than 5 points: unfittable.
ConvergenceFit fit_tube_convergence(const ConvergenceSeries& series);

// ------------------------------------------------------------- equilibria

struct EquilibriumReport {
  bool found_i = false, found_j = false;
  double xi_i = 0.0, xi_j = 0.0;
  double slope_i = 0.0, slope_j = 0.0;  // dF/dxi at the roots
};

// Full N-mode parallel drift F(xi) = <mu_hat(y(xi)) - y(xi), u> / ell with
// w = 0; bisection over [-a, a] and [1-a, 1+a], a = 1/4.
EquilibriumReport find_mode_equilibria(const SegmentFrame& segment,
                                       const GaussianMixture& gmm,
                                       double sigma_tilde_sq);

double parallel_drift_fullN(const SegmentFrame& segment,
                            const GaussianMixture& gmm, double sigma_tilde_sq,
                            double xi);
double parallel_drift_two_mode(const SegmentFrame& segment,
                               const GaussianMixture& gmm,
                               double sigma_tilde_sq, double xi);

struct SaddleReport {
  bool found = false;
  double xi = 0.0;
  double slope = 0.0;  // F'(xi*); two-mode case: (l^2/s~^2) xi (1-xi) - 1
};

// Interior saddle via the log-odds fixed point (two-mode) or bisection on
// the exact drift between the stable roots (full N).
SaddleReport find_interior_saddle_two_mode(const SegmentFrame& segment,
                                           const GaussianMixture& gmm,
                                           double sigma_tilde_sq);
SaddleReport find_interior_saddle_fullN(const SegmentFrame& segment,
                                        const GaussianMixture& gmm,
                                        double sigma_tilde_sq);

// ------------------------------------------------------------ eigenvalues

struct MidpointEigenReport {
  double lambda_analytic = 0.0;  // l^2 / (4 s~^2) - 1
  Eigen::VectorXd eigenvalues;   // numeric spectrum, descending
  int n_positive = 0;
};

// Numeric Jacobian of the rescaled drift mu_hat(y) - y at the midpoint
// (central differences, step 1e-6 ell) plus the analytic unstable value.
MidpointEigenReport midpoint_eigenvalues(const SegmentFrame& segment,
                                         const GaussianMixture& gmm,
                                         const NoiseSchedule& schedule, int t);

// ---------------------------------------------------------------- trapping

struct TrappingSpec {
  int tau3 = 3;           // DDIM steps remaining
  double theta = 0.0;     // dimensionless xi-radius
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  double Lambda_plus = 0.0;   // lmax + 2 (1 + lmax)^2 theta
  double entry_window = 0.0;  // theta exp(-Lambda_plus tau3_u)
  bool admissible = false;    // theta < lmin / (2 (1 + lmax)^2)
};

TrappingSpec make_trapping_spec(const SegmentFrame& segment,
                                const NoiseSchedule& schedule, int t3_index,
                                double theta);

struct TrapResult {
  double stuck_rate = 0.0;
  double escape_rate = 0.0;
  double stuck_se = 0.0;
  std::vector<double> offsets;      // initial |A| in x-space length units
  std::vector<double> terminal_xi;  // per trial
  std::vector<int> stuck;           // 0/1 per trial
};

// Restarts on the time-t3 segment at signed offsets spanning [0, theta_len]
// (x-space length units); stuck = terminal classification interpolation.
TrapResult trapping_experiment(const GaussianMixture& gmm,
                               const NoiseSchedule& schedule,
                               const ScoreSource& source,
                               const SegmentFrame& segment, SamplerKind kind,
                               int tau3_ddim, int n_steps_ddim, double eta,
                               int z_hybrid, double theta_len, int n_trials,
                               std::uint64_t seed, int workers = 1);

// ------------------------------------------------------------ Prop-5 bound

struct DdpmBoundInputs {
  double eta_max = 0.0;        // sup (1/2) beta_t over the span
  std::vector<double> K;       // per-t local drift slope bound
  double int_eta = 0.0;        // sum of (1/2) beta_t
  double int_K = 0.0;          // sum of K(t)
  double lambda_rep = 0.0;
  double theta = 0.0;          // length-scale radius
  int tau3_span = 0;
  bool repulsion_ok = false;   // lambda_rep > 0
};

// (4/pi) exp(-pi^2 int_eta / (16 (1 + int_K)^2 theta^2))
//   + 2 exp(-lambda_rep theta^2 / (2 eta_max)), capped at 1.
double ddpm_terminal_bound(const DdpmBoundInputs& inputs);

using DriftFn = std::function<double(double a, int t, CounterRng& rng)>;

// K(t) = max_{|a| <= 2 theta} |b(a,t)| / |a| over 50 a-intervals per side;
// lambda_rep = min over t and |a| in [theta, a_star] of -b(a,t) sign(a)/|a|.
DdpmBoundInputs estimate_drift_bounds(const DriftFn& drift,
                                      const NoiseSchedule& schedule,
                                      int tau3_span, int n_samples,
                                      double theta, double a_star,
                                      std::uint64_t seed);

DriftFn make_bisector_drift(const SegmentFrame& segment,
                            const ScoreSource& source,
                            const NoiseSchedule& schedule, double eps);

// --------------------------------------------------- midpoint decomposition

struct DecompositionTable {
  std::uint64_t n = 0;
  std::uint64_t n_H = 0, n_M = 0, n_H_and_M = 0, n_H_and_Mc = 0;
  double p_H = 0.0, p_M = 0.0;
  double p_H_given_M = 0.0, p_H_given_Mc = 0.0;  // NaN when undefined
  double wilson_lo_H_given_M = 0.0, wilson_hi_H_given_M = 0.0;
  bool h_given_m_defined = false, h_given_mc_defined = false;
};

struct TrajectorySummary {
  Label label;
  bool entered_midpoint = false;  // within theta ell_t of the dominant
                                  // pair's midpoint in the final tau3 steps
};

DecompositionTable midpoint_event_decomposition(
    const std::vector<TrajectorySummary>& batch);

// Per-trajectory M-event: ||x_t - m_t|| <= theta_frac * ell_t for some
// recorded t <= t3_index, with (i, j) the instantaneous nearest pair.
bool entered_midpoint_neighborhood(const TrajectoryRecord& traj,
                                   const GaussianMixture& gmm,
                                   const NoiseSchedule& schedule,
                                   double theta_frac, int t3_index);

std::pair<double, double> wilson_interval(std::uint64_t successes,
                                          std::uint64_t trials);

// -------------------------------------------------------- diagonal checker

struct DiagonalReport {
  double max_min_responsibility = 0.0;
  std::uint64_t states_checked = 0;
  std::uint64_t violations = 0;  // min responsibility > exp(-kappa)
};

// Requires an axis-aligned grid mixture (grid_coords gives per-mode integer
// coordinates). States whose kappa-dominant pair is a cell diagonal are
// checked for min rescaled responsibility <= exp(-kappa).
DiagonalReport diagonal_avoidance_check(
    const std::vector<TrajectoryRecord>& batch, const GaussianMixture& gmm,
    const NoiseSchedule& schedule, const Eigen::MatrixXi& grid_coords,
    double kappa);

bool is_diagonal_pair(const Eigen::MatrixXi& grid_coords, int i, int j);
Eigen::MatrixXi lattice_coords(const GaussianMixture& gmm, int side,
                               double separation);

// ----------------------------------------------------------- perturbation

struct PerturbationReport {
  bool saddle_found = false;
  double xi_unperturbed = 0.0;
  double xi_perturbed = 0.0;
  double shift = 0.0;
  double shift_bound = 0.0;       // 2 rho_bar / (l lambda_t)
  double lambda_unperturbed = 0.0;
  double lambda_perturbed = 0.0;
  double directional_term = 0.0;  // sigma_t^2 u' grad-psi u
  double rho_bar = 0.0;
  double lambda_rep_reduced = 0.0;
  bool escape_condition_ok = false;  // r_A_max < lambda_rep theta
};

using PsiField = std::function<Eigen::VectorXd(const Eigen::VectorXd&, int)>;

PerturbationReport perturbation_analysis(const PsiField& psi,
                                         const SegmentFrame& segment,
                                         const GaussianMixture& gmm,
                                         const NoiseSchedule& schedule, int t,
                                         double lambda_rep, double theta_len,
                                         int tau3_span);

// ------------------------------------------------------ Brownian confinement

struct ConfinementReport {
  double empirical = 0.0;
  double standard_error = 0.0;
  double bound = 0.0;  // (4/pi) exp(-pi^2 V / (8 a^2)), capped at 1
};

ConfinementReport brownian_confinement_check(double V, double a, int n_paths,
                                             int n_substeps,
                                             std::uint64_t seed);

const char* label_kind_name(LabelKind kind);

}  // namespace gmdiff
