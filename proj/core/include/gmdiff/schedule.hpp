#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace gmdiff {

// Discrete variance-preserving noise schedule. beta(t) is defined for
// t in [1, T]; alpha_bar(t) for t in [0, T] with alpha_bar(0) = 1 and
// alpha_bar(t) = prod_{k<=t} (1 - beta_k).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(std::vector<double> beta, double sigma_data);

  int T() const { return static_cast<int>(beta_.size()) - 1; }
  double sigma_data() const { return sigma_data_; }
  double terminal_gamma() const { return alpha_bar_.back(); }

  double beta(int t) const { return beta_[t]; }
  double alpha_bar(int t) const { return alpha_bar_[t]; }
  // sigma_t^2 = sigma^2 alpha_bar_t + (1 - alpha_bar_t)
  double sigma_sq(int t) const { return sigma_sq_[t]; }
  // effective variance sigma_tilde_t^2 = sigma_t^2 / alpha_bar_t
  double sigma_tilde_sq(int t) const { return sigma_sq_[t] / alpha_bar_[t]; }

  // u(t) = sum_{s=t+1}^{T} beta_s / (2 sigma_s^2); u(T) = 0, increasing
  // toward t = 0.
  double u_time(int t) const { return u_[t]; }

  void set_sigma_data(double sigma_data);

 private:
  std::vector<double> beta_;       // size T+1, beta_[0] unused (= 0)
  std::vector<double> alpha_bar_;  // size T+1
  std::vector<double> sigma_sq_;   // size T+1
  std::vector<double> u_;          // size T+1
  double sigma_data_ = 0.0;

  void recompute();
};

enum class GridKind { ddpm_full, ddim_quadratic, ddim_uniform };

// Strictly decreasing time indices from T down to 0.
struct StepGrid {
  GridKind kind = GridKind::ddpm_full;
  std::vector<int> indices;
  int n_steps = 0;  // number of transitions = indices.size() - 1

  void validate(int T) const;
};

NoiseSchedule build_linear_schedule(int T, double beta_min, double beta_max,
                                    double sigma_data);

StepGrid ddpm_full_grid(const NoiseSchedule& schedule);
// t_k = round(T (k/n)^2) for k = n..0, deduplicated, endpoints {T, 0}.
StepGrid ddim_quadratic_grid(const NoiseSchedule& schedule, int n_steps);
StepGrid ddim_uniform_grid(const NoiseSchedule& schedule, int n_steps);

// Time index a DDIM step count maps to on the quadratic grid:
// round(T (k/n)^2).
int quadratic_grid_index(int T, int n_steps, int k);

// tau3 conversion between samplers: the time index floor(T (tau3/n)^2).
// DDPM restarts take that many unit steps; DDIM restarts follow the grid
// entries below it. Emitted in every run manifest.
int tau3_time_index(int T, int n_steps, int tau3);

const char* grid_kind_name(GridKind kind);

nlohmann::json schedule_to_json(const NoiseSchedule& schedule, double beta_min,
                                double beta_max);

}  // namespace gmdiff
