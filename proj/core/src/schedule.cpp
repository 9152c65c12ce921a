#include "gmdiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace gmdiff {

NoiseSchedule::NoiseSchedule(std::vector<double> beta, double sigma_data)
    : sigma_data_(sigma_data) {
  beta_.assign(1, 0.0);
  beta_.insert(beta_.end(), beta.begin(), beta.end());
  recompute();
}

void NoiseSchedule::set_sigma_data(double sigma_data) {
  sigma_data_ = sigma_data;
  recompute();
}

void NoiseSchedule::recompute() {
  const int T = this->T();
  alpha_bar_.assign(T + 1, 1.0);
  sigma_sq_.assign(T + 1, 0.0);
  u_.assign(T + 1, 0.0);
  const double s2 = sigma_data_ * sigma_data_;
  sigma_sq_[0] = s2;
  for (int t = 1; t <= T; ++t) {
    alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta_[t]);
    sigma_sq_[t] = s2 * alpha_bar_[t] + (1.0 - alpha_bar_[t]);
  }
  // u(t) accumulates from T downward (left-Riemann over unit steps).
  for (int t = T - 1; t >= 0; --t)
    u_[t] = u_[t + 1] + beta_[t + 1] / (2.0 * sigma_sq_[t + 1]);
}

NoiseSchedule build_linear_schedule(int T, double beta_min, double beta_max,
                                    double sigma_data) {
  if (T < 2) throw std::invalid_argument("schedule: T must be >= 2");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw std::invalid_argument("schedule: need 0 < beta_min <= beta_max < 1");
  if (!(sigma_data > 0.0))
    throw std::invalid_argument("schedule: sigma_data must be positive");
  std::vector<double> beta(T);
  for (int i = 0; i < T; ++i)
    beta[i] = beta_min + (beta_max - beta_min) * i / (T - 1);
  return NoiseSchedule(std::move(beta), sigma_data);
}

void StepGrid::validate(int T) const {
  if (indices.size() < 2) throw std::invalid_argument("grid: too few indices");
  if (indices.front() != T || indices.back() != 0)
    throw std::invalid_argument("grid: endpoints must be {T, 0}");
  for (std::size_t k = 1; k < indices.size(); ++k)
    if (indices[k] >= indices[k - 1])
      throw std::invalid_argument("grid: indices must be strictly decreasing");
}

StepGrid ddpm_full_grid(const NoiseSchedule& schedule) {
  StepGrid grid;
  grid.kind = GridKind::ddpm_full;
  const int T = schedule.T();
  grid.indices.resize(T + 1);
  for (int t = T; t >= 0; --t) grid.indices[T - t] = t;
  grid.n_steps = T;
  return grid;
}

int quadratic_grid_index(int T, int n_steps, int k) {
  const double frac = static_cast<double>(k) / n_steps;
  return static_cast<int>(std::lround(T * frac * frac));
}

int tau3_time_index(int T, int n_steps, int tau3) {
  const double frac = static_cast<double>(tau3) / n_steps;
  return static_cast<int>(std::floor(T * frac * frac));
}

StepGrid ddim_quadratic_grid(const NoiseSchedule& schedule, int n_steps) {
  const int T = schedule.T();
  if (n_steps < 2 || n_steps > T)
    throw std::invalid_argument("grid: need 2 <= n_steps <= T");
  StepGrid grid;
  grid.kind = GridKind::ddim_quadratic;
  for (int k = n_steps; k >= 0; --k) {
    int t = quadratic_grid_index(T, n_steps, k);
    if (k == n_steps) t = T;
    if (k == 0) t = 0;
    if (grid.indices.empty() || t < grid.indices.back())
      grid.indices.push_back(t);
  }
  grid.n_steps = static_cast<int>(grid.indices.size()) - 1;
  grid.validate(T);
  return grid;
}

StepGrid ddim_uniform_grid(const NoiseSchedule& schedule, int n_steps) {
  const int T = schedule.T();
  if (n_steps < 2 || n_steps > T)
    throw std::invalid_argument("grid: need 2 <= n_steps <= T");
  StepGrid grid;
  grid.kind = GridKind::ddim_uniform;
  for (int k = n_steps; k >= 0; --k) {
    int t = static_cast<int>(std::lround(static_cast<double>(T) * k / n_steps));
    if (k == n_steps) t = T;
    if (k == 0) t = 0;
    if (grid.indices.empty() || t < grid.indices.back())
      grid.indices.push_back(t);
  }
  grid.n_steps = static_cast<int>(grid.indices.size()) - 1;
  grid.validate(T);
  return grid;
}

const char* grid_kind_name(GridKind kind) {
  switch (kind) {
    case GridKind::ddpm_full: return "ddpm_full";
    case GridKind::ddim_quadratic: return "ddim_quadratic";
    case GridKind::ddim_uniform: return "ddim_uniform";
  }
  return "unknown";
}

nlohmann::json schedule_to_json(const NoiseSchedule& schedule, double beta_min,
                                double beta_max) {
  nlohmann::json j;
  j["T"] = schedule.T();
  j["beta_min"] = beta_min;
  j["beta_max"] = beta_max;
  j["family"] = "linear";
  j["sigma_data"] = schedule.sigma_data();
  return j;
}

}  // namespace gmdiff
