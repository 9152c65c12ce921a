#include "gmdiff/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "gmdiff/engine.hpp"

namespace gmdiff {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

SegmentFrame scaled_frame(const GaussianMixture& gmm, int i, int j,
                          double scale) {
  SegmentFrame seg = SegmentFrame::between(gmm, i, j);
  seg.mode_i *= scale;
  seg.midpoint *= scale;
  seg.ell *= scale;
  seg.scale = scale;
  return seg;
}

}  // namespace

const char* label_kind_name(LabelKind kind) {
  switch (kind) {
    case LabelKind::true_mode: return "true_mode";
    case LabelKind::interpolation: return "interpolation";
    case LabelKind::invalid: return "invalid";
  }
  return "unknown";
}

double classification_threshold(const GaussianMixture& gmm) {
  if (gmm.dim <= 10) return 5.0 * gmm.sigma;
  return gmm.sigma * (std::sqrt(static_cast<double>(gmm.dim)) + 4.0);
}

Label classify_sample(const GaussianMixture& gmm, const Eigen::VectorXd& x0) {
  if (!x0.allFinite())
    throw std::invalid_argument("classify_sample: non-finite state");
  const double thr = classification_threshold(gmm);
  Label label;
  double best_mode = std::numeric_limits<double>::infinity();
  int best_k = -1;
  for (int k = 0; k < gmm.n_modes; ++k) {
    const double d = (x0 - gmm.modes.row(k).transpose()).norm();
    if (d < best_mode) {
      best_mode = d;
      best_k = k;
    }
  }
  if (best_mode <= thr) {
    label.kind = LabelKind::true_mode;
    label.i = best_k;
    return label;
  }
  // A point can sit on several collinear segments (e.g. grid midpoints);
  // near-ties resolve toward the shorter segment, then the lower pair.
  double best_seg = std::numeric_limits<double>::infinity();
  double best_ell = std::numeric_limits<double>::infinity();
  for (int i = 0; i < gmm.n_modes; ++i)
    for (int j = i + 1; j < gmm.n_modes; ++j) {
      const SegmentFrame seg = SegmentFrame::between(gmm, i, j);
      const double d = perp_distance(seg, 0.0, x0);
      const bool tie = std::abs(d - best_seg) <= 1e-9 * (1.0 + best_seg);
      if ((tie && seg.ell < best_ell * (1.0 - 1e-9)) ||
          (!tie && d < best_seg)) {
        best_seg = d;
        best_ell = seg.ell;
        label.i = i;
        label.j = j;
      }
    }
  label.kind = best_seg <= thr ? LabelKind::interpolation : LabelKind::invalid;
  if (label.kind == LabelKind::invalid) {
    label.i = -1;
    label.j = -1;
  }
  return label;
}

// --------------------------------------------------------- critical times

std::vector<double> margin_kappa_series(const TrajectoryRecord& traj,
                                        const GaussianMixture& gmm,
                                        const NoiseSchedule& schedule) {
  std::vector<double> out(traj.times.size());
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const int t = traj.times[k];
    const NearestPair pair = nearest_pair(gmm, schedule, traj.states[k], t);
    out[k] = pair.margin / (2.0 * schedule.sigma_sq(t));
  }
  return out;
}

std::vector<double> prefix_min_toward_zero(const std::vector<double>& series) {
  std::vector<double> out(series.size());
  double running = std::numeric_limits<double>::infinity();
  for (std::size_t k = series.size(); k-- > 0;) {
    running = std::min(running, series[k]);
    out[k] = running;
  }
  return out;
}

std::optional<int> tau1_from_series(const std::vector<int>& times,
                                    const std::vector<double>& suffix_min,
                                    double kappa) {
  for (std::size_t k = 0; k < times.size(); ++k)
    if (suffix_min[k] >= kappa) return times[k];
  return std::nullopt;
}

AssumptionReport detect_tau1(const TrajectoryRecord& traj,
                             const GaussianMixture& gmm,
                             const NoiseSchedule& schedule, double kappa) {
  AssumptionReport report;
  report.kappa = kappa;
  report.times = traj.times;
  report.margin_kappa = margin_kappa_series(traj, gmm, schedule);
  report.margin.resize(report.margin_kappa.size());
  for (std::size_t k = 0; k < traj.times.size(); ++k)
    report.margin[k] =
        report.margin_kappa[k] * 2.0 * schedule.sigma_sq(traj.times[k]);
  const auto suffix = prefix_min_toward_zero(report.margin_kappa);
  report.tau1 = tau1_from_series(traj.times, suffix, kappa);
  // tau2 uses the minimum pair separation of the mixture.
  double ell_min = std::numeric_limits<double>::infinity();
  for (int i = 0; i < gmm.n_modes; ++i)
    for (int j = i + 1; j < gmm.n_modes; ++j)
      ell_min = std::min(ell_min,
                         (gmm.modes.row(i) - gmm.modes.row(j)).norm());
  report.tau2 = detect_tau2(ell_min, schedule, kappa, gmm.dim);
  return report;
}

std::optional<int> detect_tau2(double ell, const NoiseSchedule& schedule,
                               double kappa, int dim) {
  if (!(ell > 0.0)) throw std::invalid_argument("detect_tau2: ell must be positive");
  // sigma_tilde^2 is increasing in t, so the valid prefix ends at the
  // first index violating the inequality.
  const double lhs = ell * ell;
  int best = -1;
  for (int t = 0; t <= schedule.T(); ++t) {
    if (lhs >= 4.0 * kappa * schedule.sigma_tilde_sq(t) * dim)
      best = t;
    else
      break;
  }
  if (best < 0) return std::nullopt;
  return best;
}

// ------------------------------------------------------- tube convergence

std::vector<float> trajectory_dperp(const TrajectoryRecord& traj,
                                    const GaussianMixture& gmm,
                                    const NoiseSchedule& schedule, double eps) {
  // Distances are taken in the rescaled (static-segment) coordinates where
  // the orthogonal dynamics contract exactly like exp(-u), then divided by
  // sqrt(dim).
  std::vector<float> out(traj.times.size());
  const double root_dim = std::sqrt(static_cast<double>(gmm.dim));
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const int t = traj.times[k];
    const NearestPair pair = nearest_pair(gmm, schedule, traj.states[k], t);
    const SegmentFrame seg = SegmentFrame::between(gmm, pair.i, pair.j);
    const Eigen::VectorXd y =
        traj.states[k] / std::sqrt(schedule.alpha_bar(t));
    out[k] = static_cast<float>(perp_distance(seg, eps, y) / root_dim);
  }
  return out;
}

ConvergenceSeries dperp_series(const std::vector<std::vector<float>>& per_traj,
                               const std::vector<int>& times,
                               const NoiseSchedule& schedule, int dim) {
  (void)dim;
  ConvergenceSeries series;
  series.times = times;
  series.u.resize(times.size());
  series.mean_dperp.assign(times.size(), 0.0);
  series.ci_half.assign(times.size(), 0.0);
  const double n = static_cast<double>(per_traj.size());
  for (std::size_t k = 0; k < times.size(); ++k) {
    series.u[k] = schedule.u_time(times[k]);
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& row : per_traj) {
      sum += row[k];
      sum_sq += static_cast<double>(row[k]) * row[k];
    }
    const double mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean);
    series.mean_dperp[k] = mean;
    series.ci_half[k] = 1.96 * std::sqrt(var / n);
  }
  return series;
}

ConvergenceFit fit_tube_convergence(const ConvergenceSeries& series) {
  ConvergenceFit fit;
  const std::size_t n = series.mean_dperp.size();
  if (n < 5) return fit;
  const double initial = series.mean_dperp.front();
  fit.plateau = series.mean_dperp.back();
  // Fit region: first step after the mean halves, to the first step within
  // twice the terminal plateau.
  std::size_t begin = 0;
  while (begin < n && series.mean_dperp[begin] >= 0.5 * initial) ++begin;
  std::size_t end = begin;
  while (end < n && series.mean_dperp[end] > 2.0 * fit.plateau) ++end;
  if (end <= begin || end - begin < 5) return fit;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double m = static_cast<double>(end - begin);
  for (std::size_t k = begin; k < end; ++k) {
    const double x = series.u[k];
    const double y = std::log(std::max(series.mean_dperp[k], 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = m * sxx - sx * sx;
  if (denom == 0.0) return fit;
  fit.fittable = true;
  fit.slope = (m * sxy - sx * sy) / denom;
  fit.intercept = (sy - fit.slope * sx) / m;
  fit.fit_begin = static_cast<int>(begin);
  fit.fit_end = static_cast<int>(end);
  return fit;
}

// ------------------------------------------------------------- equilibria

double parallel_drift_fullN(const SegmentFrame& segment,
                            const GaussianMixture& gmm, double sigma_tilde_sq,
                            double xi) {
  const Eigen::VectorXd y = segment.mode_i + xi * segment.ell * segment.u;
  const Eigen::VectorXd mean =
      posterior_mean_rescaled(gmm, sigma_tilde_sq, y);
  return (mean - y).dot(segment.u) / segment.ell;
}

double parallel_drift_two_mode(const SegmentFrame& segment,
                               const GaussianMixture& gmm,
                               double sigma_tilde_sq, double xi) {
  return two_mode_responsibility(segment.ell, sigma_tilde_sq, xi,
                                 gmm.weights[segment.i],
                                 gmm.weights[segment.j]) -
         xi;
}

namespace {

// Bisection on fn over [lo, hi] assuming fn(lo) and fn(hi) have opposite
// signs; stops at |fn| <= 1e-12 or interval <= 1e-12.
template <class Fn>
double bisect(const Fn& fn, double lo, double hi) {
  double flo = fn(lo);
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const double fmid = fn(mid);
    if (std::abs(fmid) <= 1e-12 || hi - lo <= 1e-12) return mid;
    if ((flo < 0.0) == (fmid < 0.0)) {
      lo = mid;
      flo = fmid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

template <class Fn>
double slope_central(const Fn& fn, double x, double h) {
  return (fn(x + h) - fn(x - h)) / (2.0 * h);
}

}  // namespace

EquilibriumReport find_mode_equilibria(const SegmentFrame& segment,
                                       const GaussianMixture& gmm,
                                       double sigma_tilde_sq) {
  EquilibriumReport report;
  const auto drift = [&](double xi) {
    return parallel_drift_fullN(segment, gmm, sigma_tilde_sq, xi);
  };
  const double a = 0.25;
  if (drift(-a) > 0.0 && drift(a) < 0.0) {
    report.found_i = true;
    report.xi_i = bisect(drift, -a, a);
    report.slope_i = slope_central(drift, report.xi_i, 1e-7);
  }
  if (drift(1.0 - a) > 0.0 && drift(1.0 + a) < 0.0) {
    report.found_j = true;
    report.xi_j = bisect(drift, 1.0 - a, 1.0 + a);
    report.slope_j = slope_central(drift, report.xi_j, 1e-7);
  }
  return report;
}

SaddleReport find_interior_saddle_two_mode(const SegmentFrame& segment,
                                           const GaussianMixture& gmm,
                                           double sigma_tilde_sq) {
  SaddleReport report;
  const double a_t = segment.ell * segment.ell / sigma_tilde_sq;
  // Equal weights put the saddle at the midpoint exactly.
  if (gmm.weights[segment.i] == gmm.weights[segment.j]) {
    if (a_t > 4.0) {
      report.found = true;
      report.xi = 0.5;
      report.slope = a_t * 0.25 - 1.0;
    }
    return report;
  }
  const double log_odds = std::log(gmm.weights[segment.j] / gmm.weights[segment.i]);
  // Log-odds fixed point: log(xi/(1-xi)) = log_odds + a_t (xi - 1/2).
  // The interior saddle is the downward crossing of G.
  const auto G = [&](double xi) {
    return std::log(xi / (1.0 - xi)) - log_odds - a_t * (xi - 0.5);
  };
  const int n_scan = 2048;
  double prev_xi = kNaN, prev_g = kNaN;
  for (int k = 1; k < n_scan; ++k) {
    const double xi = static_cast<double>(k) / n_scan;
    const double g = G(xi);
    if (std::isfinite(prev_g) && prev_g > 0.0 && g <= 0.0) {
      const double root = bisect(G, prev_xi, xi);
      const double slope = a_t * root * (1.0 - root) - 1.0;
      if (slope > 0.0) {
        report.found = true;
        report.xi = root;
        report.slope = slope;
        return report;
      }
    }
    prev_xi = xi;
    prev_g = g;
  }
  return report;
}

SaddleReport find_interior_saddle_fullN(const SegmentFrame& segment,
                                        const GaussianMixture& gmm,
                                        double sigma_tilde_sq) {
  SaddleReport report;
  const auto drift = [&](double xi) {
    return parallel_drift_fullN(segment, gmm, sigma_tilde_sq, xi);
  };
  const EquilibriumReport eq = find_mode_equilibria(segment, gmm, sigma_tilde_sq);
  const double lo = eq.found_i ? eq.xi_i + 1e-4 : 0.05;
  const double hi = eq.found_j ? eq.xi_j - 1e-4 : 0.95;
  const int n_scan = 2048;
  double prev_xi = lo, prev_f = drift(lo);
  for (int k = 1; k <= n_scan; ++k) {
    const double xi = lo + (hi - lo) * k / n_scan;
    const double f = drift(xi);
    if (prev_f < 0.0 && f >= 0.0) {  // upward crossing = repelling root
      report.found = true;
      report.xi = bisect(drift, prev_xi, xi);
      report.slope = slope_central(drift, report.xi, 1e-7);
      return report;
    }
    prev_xi = xi;
    prev_f = f;
  }
  return report;
}

// ------------------------------------------------------------ eigenvalues

MidpointEigenReport midpoint_eigenvalues(const SegmentFrame& segment,
                                         const GaussianMixture& gmm,
                                         const NoiseSchedule& schedule, int t) {
  MidpointEigenReport report;
  const double sts = schedule.sigma_tilde_sq(t);
  report.lambda_analytic = segment.ell * segment.ell / (4.0 * sts) - 1.0;
  const int dim = gmm.dim;
  const double h = 1e-6 * segment.ell;
  Eigen::MatrixXd J(dim, dim);
  Eigen::VectorXd yp(dim), ym(dim);
  for (int d = 0; d < dim; ++d) {
    yp = segment.midpoint;
    ym = segment.midpoint;
    yp[d] += h;
    ym[d] -= h;
    const Eigen::VectorXd gp =
        posterior_mean_rescaled(gmm, sts, yp) - yp;
    const Eigen::VectorXd gm =
        posterior_mean_rescaled(gmm, sts, ym) - ym;
    J.col(d) = (gp - gm) / (2.0 * h);
  }
  const Eigen::MatrixXd sym = 0.5 * (J + J.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  Eigen::VectorXd vals = solver.eigenvalues();
  std::sort(vals.data(), vals.data() + vals.size(),
            [](double a, double b) { return a > b; });
  report.eigenvalues = vals;
  report.n_positive = static_cast<int>((vals.array() > 0.0).count());
  return report;
}

// ---------------------------------------------------------------- trapping

TrappingSpec make_trapping_spec(const SegmentFrame& segment,
                                const NoiseSchedule& schedule, int t3_index,
                                double theta) {
  TrappingSpec spec;
  spec.theta = theta;
  double lmin = std::numeric_limits<double>::infinity();
  double lmax = -std::numeric_limits<double>::infinity();
  for (int t = 0; t <= t3_index; ++t) {
    const double lambda =
        segment.ell * segment.ell / (4.0 * schedule.sigma_tilde_sq(t)) - 1.0;
    lmin = std::min(lmin, lambda);
    lmax = std::max(lmax, lambda);
  }
  spec.lambda_min = lmin;
  spec.lambda_max = lmax;
  spec.Lambda_plus = lmax + 2.0 * (1.0 + lmax) * (1.0 + lmax) * theta;
  const double u_span = schedule.u_time(0) - schedule.u_time(t3_index);
  spec.entry_window = theta * std::exp(-spec.Lambda_plus * u_span);
  spec.admissible = theta > 0.0 && theta <= 0.5 &&
                    theta < lmin / (2.0 * (1.0 + lmax) * (1.0 + lmax));
  return spec;
}

TrapResult trapping_experiment(const GaussianMixture& gmm,
                               const NoiseSchedule& schedule,
                               const ScoreSource& source,
                               const SegmentFrame& segment, SamplerKind kind,
                               int tau3_ddim, int n_steps_ddim, double eta,
                               int z_hybrid, double theta_len, int n_trials,
                               std::uint64_t seed, int workers) {
  const int t3 = tau3_time_index(schedule.T(), n_steps_ddim, tau3_ddim);
  const double scale = std::sqrt(schedule.alpha_bar(t3));

  SamplerConfig config;
  config.kind = kind;
  config.eta = eta;
  config.seed = seed;
  if (kind != SamplerKind::ddpm)
    config.grid = ddim_quadratic_grid(schedule, n_steps_ddim);
  else
    config.grid = ddpm_full_grid(schedule);
  if (kind == SamplerKind::hybrid) {
    config.tau3_index = t3;
    config.z_extra = z_hybrid;
  }

  TrapResult result;
  result.offsets.resize(n_trials);
  result.terminal_xi.resize(n_trials);
  result.stuck.resize(n_trials);
  std::vector<int> escape(n_trials, 0);

  const auto run_one = [&](std::uint64_t id) -> int {
    const int k = static_cast<int>(id);
    const double offset = theta_len * (k + 0.5) / n_trials;
    const double signed_offset = (k % 2 == 0) ? offset : -offset;
    Eigen::VectorXd x0 = scale * (segment.midpoint + signed_offset * segment.u);
    const TrajectoryRecord rec =
        restart_from_point(x0, t3, config, source, schedule, id);
    const Eigen::VectorXd& terminal = rec.states.back();
    const Label label = classify_sample(gmm, terminal);
    result.offsets[k] = offset;
    const SegmentCoordinates coords = decompose(segment, terminal);
    result.terminal_xi[k] = coords.xi;
    escape[k] = label.kind == LabelKind::true_mode ? 1 : 0;
    return label.kind == LabelKind::interpolation ? 1 : 0;
  };

  const auto stuck = map_ids<int>(n_trials, workers, run_one);
  std::uint64_t n_stuck = 0, n_escape = 0;
  for (int k = 0; k < n_trials; ++k) {
    result.stuck[k] = stuck[k];
    n_stuck += stuck[k];
    n_escape += escape[k];
  }
  result.stuck_rate = static_cast<double>(n_stuck) / n_trials;
  result.escape_rate = static_cast<double>(n_escape) / n_trials;
  result.stuck_se = std::sqrt(
      std::max(0.0, result.stuck_rate * (1.0 - result.stuck_rate) / n_trials));
  return result;
}

// ------------------------------------------------------------ Prop-5 bound

double ddpm_terminal_bound(const DdpmBoundInputs& inputs) {
  const double theta_sq = inputs.theta * inputs.theta;
  const double one_plus_K = 1.0 + inputs.int_K;
  const double term1 =
      (4.0 / M_PI) *
      std::exp(-M_PI * M_PI * inputs.int_eta /
               (16.0 * one_plus_K * one_plus_K * theta_sq));
  const double term2 =
      2.0 * std::exp(-inputs.lambda_rep * theta_sq / (2.0 * inputs.eta_max));
  return std::min(1.0, term1 + term2);
}

DdpmBoundInputs estimate_drift_bounds(const DriftFn& drift,
                                      const NoiseSchedule& schedule,
                                      int tau3_span, int n_samples,
                                      double theta, double a_star,
                                      std::uint64_t seed) {
  DdpmBoundInputs inputs;
  inputs.theta = theta;
  inputs.tau3_span = tau3_span;
  inputs.K.assign(tau3_span + 1, 0.0);
  const int n_nodes = 50;
  const int n_z = std::max(1, n_samples / (100 * std::max(1, tau3_span)));
  double lambda_rep = std::numeric_limits<double>::infinity();
  double int_eta = 0.0, eta_max = 0.0, int_K = 0.0;
  for (int t = 1; t <= tau3_span; ++t) {
    CounterRng rng(seed, 0x626f756e64ull, static_cast<std::uint32_t>(t));
    double K_t = 0.0;
    for (int side = 0; side < 2; ++side) {
      const double sgn = side == 0 ? 1.0 : -1.0;
      for (int m = 0; m < n_nodes; ++m) {
        const double mag_K = 2.0 * theta * (m + 0.5) / n_nodes;
        for (int r = 0; r < n_z; ++r)
          K_t = std::max(K_t, std::abs(drift(sgn * mag_K, t, rng)) / mag_K);
        const double mag_L = theta + (a_star - theta) * (m + 0.5) / n_nodes;
        for (int r = 0; r < n_z; ++r) {
          const double b = drift(sgn * mag_L, t, rng);
          lambda_rep = std::min(lambda_rep, -b * sgn / mag_L);
        }
      }
    }
    inputs.K[t] = K_t;
    int_K += K_t;
    const double eta_t = 0.5 * schedule.beta(t);
    int_eta += eta_t;
    eta_max = std::max(eta_max, eta_t);
  }
  inputs.int_K = int_K;
  inputs.int_eta = int_eta;
  inputs.eta_max = eta_max;
  inputs.lambda_rep = lambda_rep;
  inputs.repulsion_ok = lambda_rep > 0.0;
  return inputs;
}

DriftFn make_bisector_drift(const SegmentFrame& segment,
                            const ScoreSource& source,
                            const NoiseSchedule& schedule, double eps) {
  const int dim = static_cast<int>(segment.u.size());
  return [&segment, &source, &schedule, eps, dim](double a, int t,
                                                  CounterRng& rng) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
    if (eps > 0.0) {
      Eigen::VectorXd g(dim);
      rng.fill_normal(g);
      g -= g.dot(segment.u) * segment.u;
      const double norm = g.norm();
      if (norm > 0.0) z = (eps * (2.0 * rng.uniform() - 1.0)) * g / norm;
    }
    return bisector_drift(segment, source, schedule, a, t, z);
  };
}

// --------------------------------------------------- midpoint decomposition

std::pair<double, double> wilson_interval(std::uint64_t successes,
                                          std::uint64_t trials) {
  if (trials == 0) return {kNaN, kNaN};
  const double z = 1.96;
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
  const double half =
      z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / (1.0 + z2 / n);
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

DecompositionTable midpoint_event_decomposition(
    const std::vector<TrajectorySummary>& batch) {
  DecompositionTable table;
  table.n = batch.size();
  for (const auto& s : batch) {
    const bool H = s.label.kind == LabelKind::interpolation;
    const bool M = s.entered_midpoint;
    table.n_H += H;
    table.n_M += M;
    table.n_H_and_M += H && M;
    table.n_H_and_Mc += H && !M;
  }
  const double n = static_cast<double>(table.n);
  table.p_H = table.n_H / n;
  table.p_M = table.n_M / n;
  table.h_given_m_defined = table.n_M > 0;
  table.h_given_mc_defined = table.n_M < table.n;
  table.p_H_given_M =
      table.h_given_m_defined
          ? static_cast<double>(table.n_H_and_M) / table.n_M
          : kNaN;
  table.p_H_given_Mc =
      table.h_given_mc_defined
          ? static_cast<double>(table.n_H_and_Mc) / (table.n - table.n_M)
          : kNaN;
  std::tie(table.wilson_lo_H_given_M, table.wilson_hi_H_given_M) =
      wilson_interval(table.n_H_and_M, table.n_M);
  return table;
}

bool entered_midpoint_neighborhood(const TrajectoryRecord& traj,
                                   const GaussianMixture& gmm,
                                   const NoiseSchedule& schedule,
                                   double theta_frac, int t3_index) {
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const int t = traj.times[k];
    if (t > t3_index) continue;
    const NearestPair pair = nearest_pair(gmm, schedule, traj.states[k], t);
    const double scale = std::sqrt(schedule.alpha_bar(t));
    const SegmentFrame seg = scaled_frame(gmm, pair.i, pair.j, scale);
    if ((traj.states[k] - seg.midpoint).norm() <= theta_frac * seg.ell)
      return true;
  }
  return false;
}

// -------------------------------------------------------- diagonal checker

Eigen::MatrixXi lattice_coords(const GaussianMixture& gmm, int side,
                               double separation) {
  Eigen::MatrixXi coords(gmm.n_modes, gmm.dim);
  const double step = separation / gmm.norm_scale;
  const int offset = (side - 1) / 2;
  for (int k = 0; k < gmm.n_modes; ++k)
    for (int d = 0; d < gmm.dim; ++d)
      coords(k, d) =
          static_cast<int>(std::lround(gmm.modes(k, d) / step)) + offset;
  return coords;
}

bool is_diagonal_pair(const Eigen::MatrixXi& grid_coords, int i, int j) {
  int n_diff_one = 0, n_diff_other = 0;
  for (int d = 0; d < grid_coords.cols(); ++d) {
    const int delta = std::abs(grid_coords(i, d) - grid_coords(j, d));
    if (delta == 1)
      ++n_diff_one;
    else if (delta != 0)
      ++n_diff_other;
  }
  return n_diff_one == 2 && n_diff_other == 0;
}

DiagonalReport diagonal_avoidance_check(
    const std::vector<TrajectoryRecord>& batch, const GaussianMixture& gmm,
    const NoiseSchedule& schedule, const Eigen::MatrixXi& grid_coords,
    double kappa) {
  DiagonalReport report;
  const double bound = std::exp(-kappa);
  for (const auto& traj : batch) {
    for (std::size_t k = 0; k < traj.times.size(); ++k) {
      const int t = traj.times[k];
      const NearestPair pair = nearest_pair(gmm, schedule, traj.states[k], t);
      if (pair.margin < 2.0 * schedule.sigma_sq(t) * kappa) continue;
      if (!is_diagonal_pair(grid_coords, pair.i, pair.j)) continue;
      const RescaledState rs = rescale(gmm, schedule, traj.states[k], t);
      const double min_resp =
          std::min(rs.gamma_tilde[pair.i], rs.gamma_tilde[pair.j]);
      ++report.states_checked;
      report.max_min_responsibility =
          std::max(report.max_min_responsibility, min_resp);
      if (min_resp > bound) ++report.violations;
    }
  }
  return report;
}

// ----------------------------------------------------------- perturbation

PerturbationReport perturbation_analysis(const PsiField& psi,
                                         const SegmentFrame& segment,
                                         const GaussianMixture& gmm,
                                         const NoiseSchedule& schedule, int t,
                                         double lambda_rep, double theta_len,
                                         int tau3_span) {
  PerturbationReport report;
  const double sts = schedule.sigma_tilde_sq(t);
  const double sab = std::sqrt(schedule.alpha_bar(t));
  const double sig_sq = schedule.sigma_sq(t);
  const double ell = segment.ell;

  const SaddleReport base = find_interior_saddle_two_mode(segment, gmm, sts);
  report.xi_unperturbed = base.xi;
  report.lambda_unperturbed = base.slope;

  const auto parallel_error = [&](double xi) {
    const Eigen::VectorXd y = segment.mode_i + xi * ell * segment.u;
    const Eigen::VectorXd p = psi(sab * y, t);
    return sig_sq / (sab * ell) * p.dot(segment.u);
  };
  const auto perturbed = [&](double xi) {
    return parallel_drift_two_mode(segment, gmm, sts, xi) + parallel_error(xi);
  };

  // rho_bar(t): max sampled sigma_t^2 ||psi|| / sqrt(ab) near the saddle.
  double rho_bar = 0.0;
  for (int m = 0; m <= 20; ++m) {
    const double xi = base.xi - 0.2 + 0.4 * m / 20.0;
    const Eigen::VectorXd y = segment.mode_i + xi * ell * segment.u;
    rho_bar = std::max(rho_bar, sig_sq * psi(sab * y, t).norm() / sab);
  }
  report.rho_bar = rho_bar;
  report.shift_bound = base.slope > 0.0
                           ? 2.0 * rho_bar / (ell * base.slope)
                           : kNaN;

  if (base.found) {
    const double lo = base.xi - 0.2, hi = base.xi + 0.2;
    // Perturbed root: upward crossing of the perturbed drift near the
    // unperturbed saddle; a missing bracket means the saddle is destroyed.
    const int n_scan = 400;
    double prev_xi = lo, prev_f = perturbed(lo);
    for (int k = 1; k <= n_scan; ++k) {
      const double xi = lo + (hi - lo) * k / n_scan;
      const double f = perturbed(xi);
      if (prev_f < 0.0 && f >= 0.0) {
        report.saddle_found = true;
        report.xi_perturbed = bisect(perturbed, prev_xi, xi);
        break;
      }
      prev_xi = xi;
      prev_f = f;
    }
  }
  if (report.saddle_found) {
    report.shift = std::abs(report.xi_perturbed - report.xi_unperturbed);
    report.lambda_perturbed =
        slope_central(perturbed, report.xi_perturbed, 1e-6);
    // sigma_t^2 u' grad-psi u via a central difference along u in x-space.
    const Eigen::VectorXd y =
        segment.mode_i + report.xi_perturbed * ell * segment.u;
    const double h = 1e-6 * ell;
    const Eigen::VectorXd pp = psi(sab * y + h * segment.u, t);
    const Eigen::VectorXd pm = psi(sab * y - h * segment.u, t);
    report.directional_term = sig_sq * (pp - pm).dot(segment.u) / (2.0 * h);
  }

  // Prop E.3 escape condition over the DDPM span.
  double r_max = 0.0;
  for (int s = 1; s <= tau3_span; ++s) {
    double rho_t = 0.0;
    const double sab_s = std::sqrt(schedule.alpha_bar(s));
    for (int m = 0; m <= 10; ++m) {
      const double xi = 0.25 + 0.5 * m / 10.0;
      const Eigen::VectorXd y = segment.mode_i + xi * ell * segment.u;
      rho_t = std::max(rho_t, psi(sab_s * y, s).norm());
    }
    r_max = std::max(r_max, schedule.beta(s) * rho_t);
  }
  report.escape_condition_ok = r_max < lambda_rep * theta_len;
  report.lambda_rep_reduced =
      theta_len > 0.0 ? lambda_rep - r_max / theta_len : kNaN;
  return report;
}

// ------------------------------------------------------ Brownian confinement

ConfinementReport brownian_confinement_check(double V, double a, int n_paths,
                                             int n_substeps,
                                             std::uint64_t seed) {
  if (!(V > 0.0 && a > 0.0))
    throw std::invalid_argument("brownian_confinement_check: V, a must be > 0");
  ConfinementReport report;
  const double dt = V / n_substeps;
  const double sd = std::sqrt(dt);
  std::uint64_t confined = 0;
  for (int p = 0; p < n_paths; ++p) {
    CounterRng rng(seed, p, kStreamAux1);
    double b = 0.0;
    bool inside = true;
    for (int s = 0; s < n_substeps; ++s) {
      b += sd * rng.normal();
      if (std::abs(b) > a) {
        inside = false;
        break;
      }
    }
    confined += inside;
  }
  report.empirical = static_cast<double>(confined) / n_paths;
  report.standard_error = std::sqrt(
      std::max(0.0, report.empirical * (1.0 - report.empirical) / n_paths));
  report.bound =
      std::min(1.0, (4.0 / M_PI) * std::exp(-M_PI * M_PI * V / (8.0 * a * a)));
  return report;
}

}  // namespace gmdiff
