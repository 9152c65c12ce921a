#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "gmdiff/geometry.hpp"
#include "gmdiff/rng.hpp"
#include "gmdiff/schedule.hpp"
#include "gmdiff/score_source.hpp"

namespace gmdiff {

enum class SamplerKind { ddpm, ddim, hybrid };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddpm;
  StepGrid grid;
  double eta = 0.0;     // DDIM noise level in [0, 1]
  int z_extra = 0;      // DDPM steps replacing the grid tail below tau3_index
  int tau3_index = -1;  // time index at which the hybrid switches
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrajectoryRecord {
  std::vector<int> times;               // decreasing
  std::vector<Eigen::VectorXd> states;  // same length as times
  std::uint64_t seed = 0;
  std::uint64_t traj_id = 0;
  bool failed = false;  // non-finite state encountered; last finite kept
};

// One ancestral step t -> t-1:
//   mean = (x + beta_t s) / sqrt(1 - beta_t), noise sqrt(beta_t) z.
// The final step to t = 0 is noiseless.
Eigen::VectorXd ddpm_step(const ScoreSource& source,
                          const NoiseSchedule& schedule,
                          const Eigen::VectorXd& x, int t, CounterRng& rng);

// Ancestral step across a span t -> t_next with aggregated
// beta_eff = 1 - alpha_bar_t / alpha_bar_{t_next}; reduces to ddpm_step
// for adjacent indices.
Eigen::VectorXd ddpm_span_step(const ScoreSource& source,
                               const NoiseSchedule& schedule,
                               const Eigen::VectorXd& x, int t, int t_next,
                               CounterRng& rng, bool add_noise);

// DDIM update t -> t_next with noise level eta; eta = 0 is deterministic.
Eigen::VectorXd ddim_step(const ScoreSource& source,
                          const NoiseSchedule& schedule,
                          const Eigen::VectorXd& x, int t, int t_next,
                          double eta, CounterRng& rng);

// Full reverse trajectory from x_T ~ N(0, I); every visited state is
// recorded. Streams are keyed by (seed, traj_id, step index).
TrajectoryRecord sample_trajectory(const SamplerConfig& config,
                                   const ScoreSource& source,
                                   const GaussianMixture& gmm,
                                   const NoiseSchedule& schedule,
                                   std::uint64_t traj_id);

// Remaining reverse steps from a supplied state at start_index. Grid
// entries above start_index are skipped; start_index itself must lie on
// the config grid (or be the DDPM index for unit-step configs).
TrajectoryRecord restart_from_point(const Eigen::VectorXd& x0, int start_index,
                                    const SamplerConfig& config,
                                    const ScoreSource& source,
                                    const NoiseSchedule& schedule,
                                    std::uint64_t traj_id);

// Uniform-in-index sub-grid of [t_hi .. 0] with z transitions (before
// dedup); used for the hybrid tail.
std::vector<int> hybrid_tail_indices(int t_hi, int z);

// 1D bisector SDE: A_{t-1} = A_t - b(A_t, t) + noise_scale sqrt(beta_t) xi.
// A is the signed offset from the time-t midpoint sqrt(ab_t) m along u; the
// state is reconstructed as x = sqrt(ab_t) m + a u + z with z orthogonal,
// ||z|| <= z_orth_bound, and the projected drift reduces to
// b(a, t) = -(beta_t / 2) a - beta_t <s(x, t), u>.
struct BisectorPath {
  std::vector<int> times;
  std::vector<double> a;  // signed bisector coordinate per time
};

BisectorPath bisector_sde_trajectory(const SegmentFrame& segment,
                                     const ScoreSource& source,
                                     const NoiseSchedule& schedule,
                                     int tau3_span, double a_init,
                                     double z_orth_bound, std::uint64_t seed,
                                     std::uint64_t traj_id,
                                     double noise_scale = 1.0);

// Drift b(a, t) of the bisector SDE with a supplied orthogonal offset.
double bisector_drift(const SegmentFrame& segment, const ScoreSource& source,
                      const NoiseSchedule& schedule, double a, int t,
                      const Eigen::VectorXd& z_orth);

const char* sampler_kind_name(SamplerKind kind);

}  // namespace gmdiff
