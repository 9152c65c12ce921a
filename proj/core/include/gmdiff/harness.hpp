#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gmdiff/mixture.hpp"
#include "gmdiff/samplers.hpp"
#include "gmdiff/schedule.hpp"
#include "gmdiff/scorenet.hpp"
#include "gmdiff/score_source.hpp"

namespace gmdiff {

enum class Experiment {
  sample,
  step_sweep,
  kappa_sweep,
  convergence,
  trap,
  eta_sweep,
  tau3_ablation,
  bound_check,
  decomposition,
  diagonal,
  perturbation,
  train,
  dim_sweep,
  hyper_ablation,
};

const char* experiment_name(Experiment e);
std::optional<Experiment> experiment_from_name(const std::string& name);

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct MixtureSpec {
  int side = 5;
  double separation = 2.0;
  double sigma = 0.02;
  int dim = 2;
  int n_keep = 25;
};

struct ScheduleSpec {
  int T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  std::string family = "linear";
};

struct SamplerSpec {
  std::string kind = "ddpm";      // ddpm | ddim | hybrid
  std::string grid = "ddpm_full"; // ddpm_full | ddim_quadratic | ddim_uniform
  int n_steps = 50;
  double eta = 0.0;
  int z_extra = 0;
  int tau3 = 0;  // DDIM steps; hybrids switch at the mapped time index
};

struct ScoreSpec {
  std::string kind = "exact";  // exact | learned | perturbed
  std::string checkpoint;      // learned: load from here if present
  TrainConfig train;           // learned: train if checkpoint missing
  std::string psi_shape = "constant";  // perturbed
  double psi_scale = 0.0;
};

struct AnalysisSpec {
  double kappa = 7.0;
  double theta_frac = 0.15;  // radius as a fraction of ell_t
  int tau3 = 3;              // DDIM steps
  double a_star = 0.280;
  double phi = 0.1;
  int kappa_points = 50;
  double kappa_min = 1.0;
  double kappa_max = 20.0;
  std::vector<int> z_list = {2, 5, 8};
  std::vector<double> eta_list = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<int> tau3_list = {1, 3, 6, 9};
  std::vector<int> step_list = {10, 25, 50, 100, 250};
  std::vector<int> dim_list = {2, 4, 8};
  std::vector<double> theta_fracs = {0.05, 0.10, 0.15, 0.20};
};

struct ExperimentConfig {
  Experiment experiment = Experiment::sample;
  MixtureSpec mixture;
  ScheduleSpec schedule;
  SamplerSpec sampler;
  ScoreSpec score;
  AnalysisSpec analysis;
  std::uint64_t n_trajectories = 10000;
  std::uint64_t n_dump_trajectories = 0;  // sample: full state histories
  std::uint64_t seed = 1234;
  int workers = 0;  // 0 = hardware concurrency
  std::string out = "out";
  bool full_scale = false;
  std::int64_t resume_limit = -1;  // testing hook: stop after N new ids

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;  // throws ConfigError naming the offending field
};

struct ResultBundle {
  nlohmann::json manifest;
  std::string out_dir;
  std::vector<std::string> csv_paths;
};

ResultBundle run(const ExperimentConfig& config);

// One two-column CSV per curve plus a gnuplot script referencing them.
struct CurveSpec {
  std::string csv;       // source table (path into the bundle)
  std::string x_column;
  std::string y_column;
  std::string name;
  bool log_y = false;
};

std::vector<std::string> emit_plot_data(const ResultBundle& bundle,
                                        const std::vector<CurveSpec>& curves);

// Shared helpers used by experiments and tests.
struct Instruments {
  GaussianMixture gmm;
  NoiseSchedule schedule;
  std::shared_ptr<const ScoreSource> source;
  StepGrid grid;
  SamplerConfig sampler;
};

Instruments build_instruments(const ExperimentConfig& config);
std::shared_ptr<const ScoreSource> build_score_source(
    const ExperimentConfig& config, const GaussianMixture& gmm,
    const NoiseSchedule& schedule);

std::string default_output_root();

}  // namespace gmdiff
