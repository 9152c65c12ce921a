#include "gmdiff/samplers.hpp"

#include <cmath>
#include <stdexcept>

#include "gmdiff/mixture.hpp"

namespace gmdiff {

void SamplerConfig::validate() const {
  if (eta < 0.0 || eta > 1.0)
    throw std::invalid_argument("sampler: eta must be in [0, 1]");
  if (kind == SamplerKind::hybrid) {
    if (z_extra < 1)
      throw std::invalid_argument("sampler: hybrid requires z_extra >= 1");
    if (tau3_index < 0 || grid.indices.empty() ||
        tau3_index > grid.indices.front())
      throw std::invalid_argument(
          "sampler: hybrid tau3_index must lie within the grid range");
  }
}

const char* sampler_kind_name(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::ddpm: return "ddpm";
    case SamplerKind::ddim: return "ddim";
    case SamplerKind::hybrid: return "hybrid";
  }
  return "unknown";
}

Eigen::VectorXd ddpm_span_step(const ScoreSource& source,
                               const NoiseSchedule& schedule,
                               const Eigen::VectorXd& x, int t, int t_next,
                               CounterRng& rng, bool add_noise) {
  const double beta_eff = 1.0 - schedule.alpha_bar(t) / schedule.alpha_bar(t_next);
  Eigen::VectorXd s(x.size());
  source.score(x, t, s);
  Eigen::VectorXd out = (x + beta_eff * s) / std::sqrt(1.0 - beta_eff);
  if (add_noise) {
    const double sd = std::sqrt(beta_eff);
    for (Eigen::Index d = 0; d < out.size(); ++d) out[d] += sd * rng.normal();
  }
  return out;
}

Eigen::VectorXd ddpm_step(const ScoreSource& source,
                          const NoiseSchedule& schedule,
                          const Eigen::VectorXd& x, int t, CounterRng& rng) {
  if (t < 1) throw std::invalid_argument("ddpm_step: t must be >= 1");
  return ddpm_span_step(source, schedule, x, t, t - 1, rng, t > 1);
}

Eigen::VectorXd ddim_step(const ScoreSource& source,
                          const NoiseSchedule& schedule,
                          const Eigen::VectorXd& x, int t, int t_next,
                          double eta, CounterRng& rng) {
  if (t_next > t || t_next < 0)
    throw std::invalid_argument("ddim_step: need t >= t_next >= 0");
  const double ab = schedule.alpha_bar(t);
  const double ab_next = schedule.alpha_bar(t_next);
  Eigen::VectorXd s(x.size());
  source.score(x, t, s);
  const Eigen::VectorXd eps_hat = -std::sqrt(1.0 - ab) * s;
  const Eigen::VectorXd x0_hat =
      (x - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
  double sigma_eta_sq = 0.0;
  if (eta > 0.0 && t_next < t && ab < 1.0) {
    sigma_eta_sq =
        eta * eta * ((1.0 - ab_next) / (1.0 - ab)) * (1.0 - ab / ab_next);
  }
  const double dir_coeff = std::sqrt(std::max(0.0, 1.0 - ab_next - sigma_eta_sq));
  Eigen::VectorXd out = std::sqrt(ab_next) * x0_hat + dir_coeff * eps_hat;
  if (sigma_eta_sq > 0.0) {
    const double sd = std::sqrt(sigma_eta_sq);
    for (Eigen::Index d = 0; d < out.size(); ++d) out[d] += sd * rng.normal();
  }
  return out;
}

std::vector<int> hybrid_tail_indices(int t_hi, int z) {
  std::vector<int> out;
  out.push_back(t_hi);
  for (int k = 1; k <= z; ++k) {
    const int t = static_cast<int>(std::lround(
        static_cast<double>(t_hi) * (1.0 - static_cast<double>(k) / z)));
    if (t < out.back()) out.push_back(t);
  }
  if (out.back() != 0) out.push_back(0);
  return out;
}

namespace {

// Step sequence the config induces below a starting index.
std::vector<int> path_below(const SamplerConfig& config, int start_index) {
  std::vector<int> times;
  if (config.kind == SamplerKind::ddpm) {
    for (int t = start_index; t >= 0; --t) times.push_back(t);
    return times;
  }
  std::vector<int> ddim_part;
  for (int t : config.grid.indices)
    if (t <= start_index) ddim_part.push_back(t);
  if (ddim_part.empty() || ddim_part.front() != start_index)
    ddim_part.insert(ddim_part.begin(), start_index);
  if (config.kind == SamplerKind::ddim) return ddim_part;
  // Hybrid: DDIM until tau3_index, then z DDPM spans down to 0.
  std::vector<int> times2;
  for (int t : ddim_part)
    if (t > config.tau3_index) times2.push_back(t);
  const auto tail =
      hybrid_tail_indices(std::min(config.tau3_index, start_index),
                          config.z_extra);
  times2.insert(times2.end(), tail.begin(), tail.end());
  return times2;
}

TrajectoryRecord run_path(const SamplerConfig& config,
                          const ScoreSource& source,
                          const NoiseSchedule& schedule,
                          const std::vector<int>& path, Eigen::VectorXd x,
                          std::uint64_t traj_id) {
  TrajectoryRecord rec;
  rec.seed = config.seed;
  rec.traj_id = traj_id;
  rec.times.reserve(path.size());
  rec.states.reserve(path.size());
  rec.times.push_back(path.front());
  rec.states.push_back(x);
  for (std::size_t k = 0; k + 1 < path.size(); ++k) {
    const int t = path[k];
    const int t_next = path[k + 1];
    CounterRng rng(config.seed, traj_id, static_cast<std::uint32_t>(t));
    const bool ddpm_like =
        config.kind == SamplerKind::ddpm ||
        (config.kind == SamplerKind::hybrid && t <= config.tau3_index);
    Eigen::VectorXd next =
        ddpm_like
            ? ddpm_span_step(source, schedule, x, t, t_next, rng, t_next > 0)
            : ddim_step(source, schedule, x, t, t_next, config.eta, rng);
    if (!next.allFinite()) {
      rec.failed = true;
      break;
    }
    x = std::move(next);
    rec.times.push_back(t_next);
    rec.states.push_back(x);
  }
  return rec;
}

}  // namespace

TrajectoryRecord sample_trajectory(const SamplerConfig& config,
                                   const ScoreSource& source,
                                   const GaussianMixture& gmm,
                                   const NoiseSchedule& schedule,
                                   std::uint64_t traj_id) {
  config.validate();
  const int T = schedule.T();
  Eigen::VectorXd x(gmm.dim);
  CounterRng init(config.seed, traj_id, kStreamInit);
  init.fill_normal(x);
  const auto path = path_below(config, T);
  if (path.front() != T)
    throw std::invalid_argument("sample_trajectory: grid must start at T");
  return run_path(config, source, schedule, path, std::move(x), traj_id);
}

TrajectoryRecord restart_from_point(const Eigen::VectorXd& x0, int start_index,
                                    const SamplerConfig& config,
                                    const ScoreSource& source,
                                    const NoiseSchedule& schedule,
                                    std::uint64_t traj_id) {
  config.validate();
  const auto path = path_below(config, start_index);
  if (path.size() < 2) {
    TrajectoryRecord rec;
    rec.seed = config.seed;
    rec.traj_id = traj_id;
    rec.times = {start_index};
    rec.states = {x0};
    return rec;
  }
  return run_path(config, source, schedule, path, x0, traj_id);
}

double bisector_drift(const SegmentFrame& segment, const ScoreSource& source,
                      const NoiseSchedule& schedule, double a, int t,
                      const Eigen::VectorXd& z_orth) {
  // A is measured against the time-t midpoint sqrt(ab) m; projecting the
  // ancestral update onto u cancels the anchor's own drift exactly, leaving
  //   b(a, t) = -(beta/2) a - beta <s(x, t), u>.
  const double scale = std::sqrt(schedule.alpha_bar(t));
  const Eigen::VectorXd x =
      scale * segment.midpoint + a * segment.u + z_orth;
  Eigen::VectorXd s(x.size());
  source.score(x, t, s);
  const double beta = schedule.beta(t);
  return -0.5 * beta * a - beta * s.dot(segment.u);
}

BisectorPath bisector_sde_trajectory(const SegmentFrame& segment,
                                     const ScoreSource& source,
                                     const NoiseSchedule& schedule,
                                     int tau3_span, double a_init,
                                     double z_orth_bound, std::uint64_t seed,
                                     std::uint64_t traj_id,
                                     double noise_scale) {
  BisectorPath path;
  path.times.reserve(tau3_span + 1);
  path.a.reserve(tau3_span + 1);
  double a = a_init;
  path.times.push_back(tau3_span);
  path.a.push_back(a);
  const int dim = static_cast<int>(segment.u.size());
  Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
  for (int t = tau3_span; t >= 1; --t) {
    CounterRng rng(seed, traj_id, static_cast<std::uint32_t>(t));
    if (z_orth_bound > 0.0) {
      // Random direction in the orthogonal complement, magnitude U(-b, b).
      Eigen::VectorXd g(dim);
      rng.fill_normal(g);
      g -= g.dot(segment.u) * segment.u;
      const double norm = g.norm();
      const double mag = z_orth_bound * (2.0 * rng.uniform() - 1.0);
      z = norm > 0.0 ? Eigen::VectorXd(mag * g / norm)
                     : Eigen::VectorXd::Zero(dim);
    }
    const double b = bisector_drift(segment, source, schedule, a, t, z);
    double next = a - b;
    if (noise_scale > 0.0)
      next += noise_scale * std::sqrt(schedule.beta(t)) * rng.normal();
    a = next;
    path.times.push_back(t - 1);
    path.a.push_back(a);
  }
  return path;
}

}  // namespace gmdiff
