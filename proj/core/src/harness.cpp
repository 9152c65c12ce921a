#include "gmdiff/harness.hpp"

#include <cstdlib>
#include <stdexcept>

#include "gmdiff/io.hpp"
#include "gmdiff/version.hpp"

namespace gmdiff {

namespace {

const char* kExperimentNames[] = {
    "sample",        "step-sweep", "kappa-sweep", "convergence",
    "trap",          "eta-sweep",  "tau3-ablation", "bound-check",
    "decomposition", "diagonal",   "perturbation", "train",
    "dim-sweep",     "hyper-ablation",
};

}  // namespace

const char* experiment_name(Experiment e) {
  return kExperimentNames[static_cast<int>(e)];
}

std::optional<Experiment> experiment_from_name(const std::string& name) {
  for (int k = 0; k < 14; ++k)
    if (name == kExperimentNames[k]) return static_cast<Experiment>(k);
  return std::nullopt;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["experiment"] = experiment_name(experiment);
  j["mixture"] = {{"side", mixture.side},
                  {"separation", mixture.separation},
                  {"sigma", mixture.sigma},
                  {"dim", mixture.dim},
                  {"n_keep", mixture.n_keep}};
  j["schedule"] = {{"T", schedule.T},
                   {"beta_min", schedule.beta_min},
                   {"beta_max", schedule.beta_max},
                   {"family", schedule.family}};
  j["sampler"] = {{"kind", sampler.kind},     {"grid", sampler.grid},
                  {"n_steps", sampler.n_steps}, {"eta", sampler.eta},
                  {"z_extra", sampler.z_extra}, {"tau3", sampler.tau3}};
  j["score"] = {{"kind", score.kind},
                {"checkpoint", score.checkpoint},
                {"psi_shape", score.psi_shape},
                {"psi_scale", score.psi_scale},
                {"train",
                 {{"n_data", score.train.n_data},
                  {"batch", score.train.batch},
                  {"epochs", score.train.epochs},
                  {"lr_start", score.train.lr_start},
                  {"lr_end", score.train.lr_end},
                  {"low_t_fraction", score.train.low_t_fraction},
                  {"seed", score.train.seed}}}};
  j["analysis"] = {{"kappa", analysis.kappa},
                   {"theta_frac", analysis.theta_frac},
                   {"tau3", analysis.tau3},
                   {"a_star", analysis.a_star},
                   {"phi", analysis.phi},
                   {"kappa_points", analysis.kappa_points},
                   {"kappa_min", analysis.kappa_min},
                   {"kappa_max", analysis.kappa_max},
                   {"z_list", analysis.z_list},
                   {"eta_list", analysis.eta_list},
                   {"tau3_list", analysis.tau3_list},
                   {"step_list", analysis.step_list},
                   {"dim_list", analysis.dim_list},
                   {"theta_fracs", analysis.theta_fracs}};
  j["n_trajectories"] = n_trajectories;
  j["n_dump_trajectories"] = n_dump_trajectories;
  j["seed"] = seed;
  j["workers"] = workers;
  j["out"] = out;
  j["full_scale"] = full_scale;
  return j;
}

namespace {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("experiment")) {
    const auto name = j.at("experiment").get<std::string>();
    const auto e = experiment_from_name(name);
    if (!e) throw ConfigError("config.experiment: unknown experiment '" + name + "'");
    cfg.experiment = *e;
  }
  if (j.contains("mixture")) {
    const auto& m = j.at("mixture");
    read_field(m, "side", cfg.mixture.side);
    read_field(m, "separation", cfg.mixture.separation);
    read_field(m, "sigma", cfg.mixture.sigma);
    read_field(m, "dim", cfg.mixture.dim);
    read_field(m, "n_keep", cfg.mixture.n_keep);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    read_field(s, "T", cfg.schedule.T);
    read_field(s, "beta_min", cfg.schedule.beta_min);
    read_field(s, "beta_max", cfg.schedule.beta_max);
    read_field(s, "family", cfg.schedule.family);
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    read_field(s, "kind", cfg.sampler.kind);
    read_field(s, "grid", cfg.sampler.grid);
    read_field(s, "n_steps", cfg.sampler.n_steps);
    read_field(s, "eta", cfg.sampler.eta);
    read_field(s, "z_extra", cfg.sampler.z_extra);
    read_field(s, "tau3", cfg.sampler.tau3);
  }
  if (j.contains("score")) {
    const auto& s = j.at("score");
    read_field(s, "kind", cfg.score.kind);
    read_field(s, "checkpoint", cfg.score.checkpoint);
    read_field(s, "psi_shape", cfg.score.psi_shape);
    read_field(s, "psi_scale", cfg.score.psi_scale);
    if (s.contains("train")) {
      const auto& t = s.at("train");
      read_field(t, "n_data", cfg.score.train.n_data);
      read_field(t, "batch", cfg.score.train.batch);
      read_field(t, "epochs", cfg.score.train.epochs);
      read_field(t, "lr_start", cfg.score.train.lr_start);
      read_field(t, "lr_end", cfg.score.train.lr_end);
      read_field(t, "low_t_fraction", cfg.score.train.low_t_fraction);
      read_field(t, "seed", cfg.score.train.seed);
    }
  }
  if (j.contains("analysis")) {
    const auto& a = j.at("analysis");
    read_field(a, "kappa", cfg.analysis.kappa);
    read_field(a, "theta_frac", cfg.analysis.theta_frac);
    read_field(a, "tau3", cfg.analysis.tau3);
    read_field(a, "a_star", cfg.analysis.a_star);
    read_field(a, "phi", cfg.analysis.phi);
    read_field(a, "kappa_points", cfg.analysis.kappa_points);
    read_field(a, "kappa_min", cfg.analysis.kappa_min);
    read_field(a, "kappa_max", cfg.analysis.kappa_max);
    read_field(a, "z_list", cfg.analysis.z_list);
    read_field(a, "eta_list", cfg.analysis.eta_list);
    read_field(a, "tau3_list", cfg.analysis.tau3_list);
    read_field(a, "step_list", cfg.analysis.step_list);
    read_field(a, "dim_list", cfg.analysis.dim_list);
    read_field(a, "theta_fracs", cfg.analysis.theta_fracs);
  }
  read_field(j, "n_trajectories", cfg.n_trajectories);
  read_field(j, "n_dump_trajectories", cfg.n_dump_trajectories);
  read_field(j, "seed", cfg.seed);
  read_field(j, "workers", cfg.workers);
  read_field(j, "out", cfg.out);
  read_field(j, "full_scale", cfg.full_scale);
  return cfg;
}

void ExperimentConfig::validate() const {
  if (mixture.side < 2) throw ConfigError("config.mixture.side: must be >= 2");
  if (!(mixture.separation > 0.0))
    throw ConfigError("config.mixture.separation: must be positive");
  if (!(mixture.sigma > 0.0))
    throw ConfigError("config.mixture.sigma: must be positive");
  if (mixture.dim < 1) throw ConfigError("config.mixture.dim: must be >= 1");
  if (mixture.n_keep < 1) throw ConfigError("config.mixture.n_keep: must be >= 1");
  if (schedule.T < 2) throw ConfigError("config.schedule.T: must be >= 2");
  if (!(schedule.beta_min > 0.0 && schedule.beta_min <= schedule.beta_max &&
        schedule.beta_max < 1.0))
    throw ConfigError("config.schedule.beta_min/beta_max: need 0 < min <= max < 1");
  if (schedule.family != "linear")
    throw ConfigError("config.schedule.family: only 'linear' is supported");
  if (sampler.kind != "ddpm" && sampler.kind != "ddim" && sampler.kind != "hybrid")
    throw ConfigError("config.sampler.kind: must be ddpm, ddim, or hybrid");
  if (sampler.grid != "ddpm_full" && sampler.grid != "ddim_quadratic" &&
      sampler.grid != "ddim_uniform")
    throw ConfigError("config.sampler.grid: unknown grid kind");
  if (sampler.n_steps < 2 || sampler.n_steps > schedule.T)
    throw ConfigError("config.sampler.n_steps: need 2 <= n_steps <= T");
  if (sampler.eta < 0.0 || sampler.eta > 1.0)
    throw ConfigError("config.sampler.eta: must be in [0, 1]");
  if (sampler.kind == "hybrid" && sampler.z_extra < 1)
    throw ConfigError("config.sampler.z_extra: hybrid requires z_extra >= 1");
  if (score.kind != "exact" && score.kind != "learned" && score.kind != "perturbed")
    throw ConfigError("config.score.kind: must be exact, learned, or perturbed");
  if (score.kind == "learned") score.train.validate();
  if (!(analysis.kappa > 0.0)) throw ConfigError("config.analysis.kappa: must be positive");
  if (!(analysis.theta_frac > 0.0))
    throw ConfigError("config.analysis.theta_frac: must be positive");
  if (analysis.tau3 < 0) throw ConfigError("config.analysis.tau3: must be >= 0");
  if (n_trajectories < 1)
    throw ConfigError("config.n_trajectories: must be >= 1");
  if (workers < 0) throw ConfigError("config.workers: must be >= 0");
  if (out.empty()) throw ConfigError("config.out: must not be empty");
}

std::string default_output_root() {
  const char* env = std::getenv("GMDIFF_OUT");
  return env != nullptr && env[0] != '\0' ? env : "out";
}

}  // namespace gmdiff
