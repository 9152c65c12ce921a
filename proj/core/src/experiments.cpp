#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "gmdiff/analysis.hpp"
#include "gmdiff/engine.hpp"
#include "gmdiff/harness.hpp"
#include "gmdiff/io.hpp"
#include "gmdiff/version.hpp"

namespace gmdiff {

namespace {

struct Ctx {
  ExperimentConfig cfg;
  GaussianMixture gmm;
  NoiseSchedule schedule;
  std::shared_ptr<const ScoreSource> source;
  int workers = 1;
  std::string dir;
  ResultBundle bundle;
};

SamplerKind sampler_kind_from(const std::string& name) {
  if (name == "ddpm") return SamplerKind::ddpm;
  if (name == "ddim") return SamplerKind::ddim;
  return SamplerKind::hybrid;
}

StepGrid make_grid(const ExperimentConfig& cfg, const NoiseSchedule& schedule) {
  if (cfg.sampler.kind == "ddpm" || cfg.sampler.grid == "ddpm_full")
    return ddpm_full_grid(schedule);
  if (cfg.sampler.grid == "ddim_uniform")
    return ddim_uniform_grid(schedule, cfg.sampler.n_steps);
  return ddim_quadratic_grid(schedule, cfg.sampler.n_steps);
}

SamplerConfig make_sampler(const ExperimentConfig& cfg,
                           const NoiseSchedule& schedule,
                           SamplerKind kind, double eta, int z_extra,
                           int tau3_ddim) {
  SamplerConfig sc;
  sc.kind = kind;
  sc.eta = eta;
  sc.seed = cfg.seed;
  sc.grid = kind == SamplerKind::ddpm
                ? ddpm_full_grid(schedule)
                : (cfg.sampler.grid == "ddim_uniform"
                       ? ddim_uniform_grid(schedule, cfg.sampler.n_steps)
                       : ddim_quadratic_grid(schedule, cfg.sampler.n_steps));
  if (kind == SamplerKind::hybrid) {
    sc.z_extra = z_extra;
    sc.tau3_index =
        tau3_time_index(schedule.T(), cfg.sampler.n_steps, tau3_ddim);
    // The switch index must sit on the grid; the quadratic formula value is
    // a grid entry by construction.
  }
  return sc;
}

std::vector<std::pair<int, int>> adjacent_pairs(const GaussianMixture& gmm) {
  double ell_min = std::numeric_limits<double>::infinity();
  for (int i = 0; i < gmm.n_modes; ++i)
    for (int j = i + 1; j < gmm.n_modes; ++j)
      ell_min =
          std::min(ell_min, (gmm.modes.row(i) - gmm.modes.row(j)).norm());
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < gmm.n_modes; ++i)
    for (int j = i + 1; j < gmm.n_modes; ++j)
      if ((gmm.modes.row(i) - gmm.modes.row(j)).norm() <= ell_min * (1.0 + 1e-9))
        pairs.emplace_back(i, j);
  return pairs;
}

std::string partial_path(const Ctx& ctx, const std::string& tag) {
  return ctx.dir + "/partial_" + tag + ".bin";
}

// ----------------------------------------------------------- experiments

void experiment_sample(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  const SamplerConfig sc =
      make_sampler(cfg, ctx.schedule, sampler_kind_from(cfg.sampler.kind),
                   cfg.sampler.eta, cfg.sampler.z_extra, cfg.sampler.tau3);
  const int dim = ctx.gmm.dim;
  const std::size_t payload_len = 3 + dim;
  const auto runner = [&](std::uint64_t id) {
    const TrajectoryRecord rec =
        sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
    const Label label = classify_sample(ctx.gmm, rec.states.back());
    std::vector<float> payload(payload_len);
    payload[0] = static_cast<float>(static_cast<int>(label.kind));
    payload[1] = static_cast<float>(label.i);
    payload[2] = static_cast<float>(label.j);
    for (int d = 0; d < dim; ++d)
      payload[3 + d] = static_cast<float>(rec.states.back()[d]);
    return payload;
  };
  const auto rows =
      map_ids_resumable(cfg.n_trajectories, ctx.workers, runner,
                        partial_path(ctx, "sample"), payload_len,
                        cfg.resume_limit);
  if (cfg.resume_limit >= 0) return;  // interrupted run: tables deferred

  std::uint64_t n_true = 0, n_interp = 0, n_invalid = 0;
  {
    std::vector<std::string> header = {"traj_id", "label", "i", "j"};
    for (int d = 0; d < dim; ++d) header.push_back("x" + std::to_string(d));
    CsvWriter samples(ctx.dir + "/samples.csv", header);
    for (std::uint64_t id = 0; id < rows.size(); ++id) {
      const auto& p = rows[id];
      const auto kind = static_cast<LabelKind>(static_cast<int>(p[0]));
      n_true += kind == LabelKind::true_mode;
      n_interp += kind == LabelKind::interpolation;
      n_invalid += kind == LabelKind::invalid;
      std::vector<std::string> row = {std::to_string(id),
                                      label_kind_name(kind),
                                      std::to_string(static_cast<int>(p[1])),
                                      std::to_string(static_cast<int>(p[2]))};
      for (int d = 0; d < dim; ++d) row.push_back(CsvWriter::format(p[3 + d]));
      samples.row_mixed(row);
    }
    ctx.bundle.csv_paths.push_back(ctx.dir + "/samples.csv");
  }
  {
    CsvWriter hist(ctx.dir + "/histogram.csv", {"label", "count"});
    hist.row_mixed({"true_mode", std::to_string(n_true)});
    hist.row_mixed({"interpolation", std::to_string(n_interp)});
    hist.row_mixed({"invalid", std::to_string(n_invalid)});
    ctx.bundle.csv_paths.push_back(ctx.dir + "/histogram.csv");
  }
  {
    const double n = static_cast<double>(rows.size());
    const double denom_excl = n - static_cast<double>(n_invalid);
    CsvWriter rates(ctx.dir + "/rates.csv",
                    {"n", "n_true", "n_interp", "n_invalid",
                     "rate_interp_inclusive", "rate_interp_exclusive"});
    rates.row({n, static_cast<double>(n_true), static_cast<double>(n_interp),
               static_cast<double>(n_invalid), n_interp / n,
               denom_excl > 0 ? n_interp / denom_excl : 0.0});
    ctx.bundle.csv_paths.push_back(ctx.dir + "/rates.csv");
  }
  if (cfg.n_dump_trajectories > 0) {
    // Full state histories for the first ids, re-generated deterministically.
    std::vector<std::string> header = {"traj_id", "step_index", "t"};
    for (int d = 0; d < dim; ++d) header.push_back("x" + std::to_string(d));
    CsvWriter dump(ctx.dir + "/trajectories.csv", header);
    const std::uint64_t n_dump =
        std::min<std::uint64_t>(cfg.n_dump_trajectories, cfg.n_trajectories);
    for (std::uint64_t id = 0; id < n_dump; ++id) {
      const TrajectoryRecord rec =
          sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
      for (std::size_t k = 0; k < rec.times.size(); ++k) {
        std::vector<std::string> row = {std::to_string(id), std::to_string(k),
                                        std::to_string(rec.times[k])};
        for (int d = 0; d < dim; ++d)
          row.push_back(CsvWriter::format(rec.states[k][d]));
        dump.row_mixed(row);
      }
    }
    nlohmann::json sidecar;
    sidecar["config_hash"] = ctx.bundle.manifest["config_hash"];
    sidecar["seed"] = cfg.seed;
    sidecar["n_dumped"] = n_dump;
    sidecar["grid"] = sc.grid.indices;
    write_text_file(ctx.dir + "/trajectories.json", sidecar.dump(2) + "\n");
    ctx.bundle.csv_paths.push_back(ctx.dir + "/trajectories.csv");
  }
}

void experiment_convergence(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  const double eps =
      epsilon_from_kappa(ctx.gmm.n_modes, cfg.analysis.kappa);
  CsvWriter fits(ctx.dir + "/fits.csv",
                 {"sampler", "slope", "intercept", "plateau", "fit_begin",
                  "fit_end", "epsilon", "epsilon_rescaled"});
  const double eps_rescaled = eps / std::sqrt(static_cast<double>(ctx.gmm.dim));
  for (const auto kind : {SamplerKind::ddpm, SamplerKind::ddim}) {
    const SamplerConfig sc =
        make_sampler(cfg, ctx.schedule, kind, cfg.sampler.eta, 0, 0);
    const std::vector<int>& times = sc.grid.indices;
    const std::size_t payload_len = times.size();
    const auto runner = [&](std::uint64_t id) {
      const TrajectoryRecord rec =
          sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
      return trajectory_dperp(rec, ctx.gmm, ctx.schedule, eps);
    };
    const std::string tag =
        std::string("convergence_") + sampler_kind_name(kind);
    const auto rows = map_ids_resumable(cfg.n_trajectories, ctx.workers,
                                        runner, partial_path(ctx, tag),
                                        payload_len, cfg.resume_limit);
    if (cfg.resume_limit >= 0) continue;
    const ConvergenceSeries series =
        dperp_series(rows, times, ctx.schedule, ctx.gmm.dim);
    const ConvergenceFit fit = fit_tube_convergence(series);
    const std::string path = ctx.dir + "/" + tag + ".csv";
    CsvWriter curve(path, {"t", "u", "mean_dperp", "ci_half"});
    for (std::size_t k = 0; k < series.times.size(); ++k)
      curve.row({static_cast<double>(series.times[k]), series.u[k],
                 series.mean_dperp[k], series.ci_half[k]});
    ctx.bundle.csv_paths.push_back(path);
    fits.row_mixed({sampler_kind_name(kind), CsvWriter::format(fit.slope),
                    CsvWriter::format(fit.intercept),
                    CsvWriter::format(fit.plateau),
                    std::to_string(fit.fit_begin), std::to_string(fit.fit_end),
                    CsvWriter::format(eps), CsvWriter::format(eps_rescaled)});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/fits.csv");
}

void experiment_kappa_sweep(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  const SamplerConfig sc =
      make_sampler(cfg, ctx.schedule, sampler_kind_from(cfg.sampler.kind),
                   cfg.sampler.eta, 0, 0);
  const std::vector<int>& times = sc.grid.indices;
  const std::size_t payload_len = times.size();
  const auto runner = [&](std::uint64_t id) {
    const TrajectoryRecord rec =
        sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
    const auto series = margin_kappa_series(rec, ctx.gmm, ctx.schedule);
    const auto suffix = prefix_min_toward_zero(series);
    std::vector<float> payload(payload_len, 0.0f);
    for (std::size_t k = 0; k < suffix.size() && k < payload_len; ++k)
      payload[k] = static_cast<float>(
          std::min(suffix[k], 1e30));
    return payload;
  };
  const auto rows = map_ids_resumable(cfg.n_trajectories, ctx.workers, runner,
                                      partial_path(ctx, "kappa"), payload_len,
                                      cfg.resume_limit);
  if (cfg.resume_limit >= 0) return;

  double ell_min = std::numeric_limits<double>::infinity();
  for (int i = 0; i < ctx.gmm.n_modes; ++i)
    for (int j = i + 1; j < ctx.gmm.n_modes; ++j)
      ell_min = std::min(
          ell_min, (ctx.gmm.modes.row(i) - ctx.gmm.modes.row(j)).norm());

  CsvWriter table(ctx.dir + "/kappa_sweep.csv",
                  {"kappa", "mean_tau1", "tau1_exists_frac", "tau2",
                   "epsilon"});
  const int P = cfg.analysis.kappa_points;
  for (int p = 0; p < P; ++p) {
    const double kappa =
        cfg.analysis.kappa_min +
        (cfg.analysis.kappa_max - cfg.analysis.kappa_min) * p /
            std::max(1, P - 1);
    double sum_tau1 = 0.0;
    std::uint64_t n_exists = 0;
    for (const auto& row : rows) {
      for (std::size_t k = 0; k < times.size(); ++k) {
        if (row[k] >= kappa) {
          sum_tau1 += times[k];
          ++n_exists;
          break;
        }
      }
    }
    const auto tau2 = detect_tau2(ell_min, ctx.schedule, kappa, ctx.gmm.dim);
    table.row({kappa, n_exists ? sum_tau1 / n_exists : -1.0,
               static_cast<double>(n_exists) / rows.size(),
               tau2 ? static_cast<double>(*tau2) : -1.0,
               epsilon_from_kappa(ctx.gmm.n_modes, kappa)});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/kappa_sweep.csv");
}

struct TrapLine {
  std::string sampler;
  int z = 0;
  double eta = 0.0;
  SamplerKind kind;
};

void experiment_trap(Ctx& ctx, const std::vector<int>& tau3_values,
                     const std::vector<double>& eta_values) {
  const auto& cfg = ctx.cfg;
  const auto pairs = adjacent_pairs(ctx.gmm);
  std::vector<TrapLine> lines;
  for (const double eta : eta_values)
    lines.push_back({eta == 0.0 ? "ddim" : "ddim_eta", 0, eta,
                     SamplerKind::ddim});
  lines.push_back({"ddpm", 0, 0.0, SamplerKind::ddpm});
  for (const int z : cfg.analysis.z_list)
    lines.push_back({"hybrid", z, 0.0, SamplerKind::hybrid});

  CsvWriter table(ctx.dir + "/trap.csv",
                  {"sampler", "z", "eta", "tau3", "t3_index", "stuck_rate",
                   "se_pairs", "n_trials"});
  CsvWriter profile(ctx.dir + "/trap_profile.csv",
                    {"sampler", "z", "eta", "tau3", "offset_frac",
                     "stuck_rate"});
  for (const int tau3 : tau3_values) {
    const int t3 =
        tau3_time_index(ctx.schedule.T(), cfg.sampler.n_steps, tau3);
    for (const auto& line : lines) {
      const int per_pair = std::max<int>(
          1, static_cast<int>(cfg.n_trajectories / pairs.size()));
      std::vector<double> pair_rates;
      const int n_bins = 10;
      std::vector<double> bin_stuck(n_bins, 0.0), bin_count(n_bins, 0.0);
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        const SegmentFrame segment =
            SegmentFrame::between(ctx.gmm, pairs[p].first, pairs[p].second);
        const double ell_t =
            std::sqrt(ctx.schedule.alpha_bar(t3)) * segment.ell;
        const double theta_len = cfg.analysis.theta_frac * ell_t;
        const TrapResult result = trapping_experiment(
            ctx.gmm, ctx.schedule, *ctx.source, segment, line.kind, tau3,
            cfg.sampler.n_steps, line.eta, line.z, theta_len, per_pair,
            cfg.seed + p, ctx.workers);
        pair_rates.push_back(result.stuck_rate);
        for (std::size_t k = 0; k < result.offsets.size(); ++k) {
          const int bin = std::min(
              n_bins - 1,
              static_cast<int>(result.offsets[k] / theta_len * n_bins));
          bin_stuck[bin] += result.stuck[k];
          bin_count[bin] += 1.0;
        }
      }
      double mean = 0.0;
      for (const double r : pair_rates) mean += r;
      mean /= pair_rates.size();
      double var = 0.0;
      for (const double r : pair_rates) var += (r - mean) * (r - mean);
      const double se = pair_rates.size() > 1
                            ? std::sqrt(var / (pair_rates.size() - 1) /
                                        pair_rates.size())
                            : 0.0;
      table.row_mixed({line.sampler, std::to_string(line.z),
                       CsvWriter::format(line.eta), std::to_string(tau3),
                       std::to_string(t3), CsvWriter::format(mean),
                       CsvWriter::format(se),
                       std::to_string(per_pair * pairs.size())});
      for (int b = 0; b < n_bins; ++b)
        profile.row_mixed(
            {line.sampler, std::to_string(line.z), CsvWriter::format(line.eta),
             std::to_string(tau3),
             CsvWriter::format((b + 0.5) * cfg.analysis.theta_frac / n_bins),
             CsvWriter::format(bin_count[b] > 0 ? bin_stuck[b] / bin_count[b]
                                                : 0.0)});
    }
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/trap.csv");
  ctx.bundle.csv_paths.push_back(ctx.dir + "/trap_profile.csv");
}

void experiment_bound_check(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  const auto pairs = adjacent_pairs(ctx.gmm);
  const double eps = epsilon_from_kappa(ctx.gmm.n_modes, cfg.analysis.kappa);
  const int tau3_ddim = cfg.analysis.tau3;
  const int span =
      tau3_time_index(ctx.schedule.T(), cfg.sampler.n_steps, tau3_ddim);

  CsvWriter lam(ctx.dir + "/lambda_rep.csv",
                {"i", "j", "lambda_rep", "eta_max", "int_eta", "int_K",
                 "repulsion_ok"});
  std::vector<DdpmBoundInputs> all_inputs;
  for (const auto& [i, j] : pairs) {
    const SegmentFrame segment = SegmentFrame::between(ctx.gmm, i, j);
    const double theta_len = cfg.analysis.theta_frac * segment.ell;
    const auto drift =
        make_bisector_drift(segment, *ctx.source, ctx.schedule, eps);
    const DdpmBoundInputs inputs = estimate_drift_bounds(
        drift, ctx.schedule, span, 2000, theta_len,
        cfg.analysis.a_star * segment.ell, cfg.seed + i * 100 + j);
    all_inputs.push_back(inputs);
    lam.row_mixed({std::to_string(i), std::to_string(j),
                   CsvWriter::format(inputs.lambda_rep),
                   CsvWriter::format(inputs.eta_max),
                   CsvWriter::format(inputs.int_eta),
                   CsvWriter::format(inputs.int_K),
                   inputs.repulsion_ok ? "1" : "0"});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/lambda_rep.csv");

  // Monte Carlo terminal-midpoint probability vs the bound on the first
  // adjacent segment.
  const SegmentFrame segment =
      SegmentFrame::between(ctx.gmm, pairs[0].first, pairs[0].second);
  const auto drift =
      make_bisector_drift(segment, *ctx.source, ctx.schedule, eps);
  CsvWriter table(ctx.dir + "/bound.csv",
                  {"theta_frac", "theta_len", "mc", "mc_se", "bound"});
  for (const double frac : cfg.analysis.theta_fracs) {
    const double theta_len = frac * segment.ell;
    DdpmBoundInputs inputs = estimate_drift_bounds(
        drift, ctx.schedule, span, 2000, theta_len,
        cfg.analysis.a_star * segment.ell, cfg.seed);
    const std::uint64_t n_paths = cfg.n_trajectories;
    const auto hits = map_ids<int>(n_paths, ctx.workers, [&](std::uint64_t id) {
      const BisectorPath path = bisector_sde_trajectory(
          segment, *ctx.source, ctx.schedule, span, 0.0, eps, cfg.seed, id);
      return std::abs(path.a.back()) <= theta_len ? 1 : 0;
    });
    std::uint64_t n_in = 0;
    for (const int h : hits) n_in += h;
    const double mc = static_cast<double>(n_in) / n_paths;
    const double se = std::sqrt(std::max(0.0, mc * (1.0 - mc) / n_paths));
    table.row({frac, theta_len, mc, se, ddpm_terminal_bound(inputs)});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/bound.csv");
}

void experiment_decomposition(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  const int t3 =
      tau3_time_index(ctx.schedule.T(), cfg.sampler.n_steps,
                           cfg.analysis.tau3);
  CsvWriter table(
      ctx.dir + "/decomposition.csv",
      {"sampler", "p_H", "p_H_given_M", "p_H_given_Mc", "p_M",
       "p_HM_product", "p_HMc_product", "wilson_lo", "wilson_hi", "n"});
  for (const auto kind : {SamplerKind::ddim, SamplerKind::ddpm}) {
    const SamplerConfig sc =
        make_sampler(cfg, ctx.schedule, kind, cfg.sampler.eta, 0, 0);
    const std::size_t payload_len = 4;
    const auto runner = [&](std::uint64_t id) {
      const TrajectoryRecord rec =
          sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
      const Label label = classify_sample(ctx.gmm, rec.states.back());
      const bool M = entered_midpoint_neighborhood(
          rec, ctx.gmm, ctx.schedule, cfg.analysis.theta_frac, t3);
      return std::vector<float>{
          static_cast<float>(static_cast<int>(label.kind)),
          static_cast<float>(label.i), static_cast<float>(label.j),
          M ? 1.0f : 0.0f};
    };
    const std::string tag =
        std::string("decomposition_") + sampler_kind_name(kind);
    const auto rows = map_ids_resumable(cfg.n_trajectories, ctx.workers,
                                        runner, partial_path(ctx, tag),
                                        payload_len, cfg.resume_limit);
    if (cfg.resume_limit >= 0) continue;
    std::vector<TrajectorySummary> batch(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      batch[k].label.kind = static_cast<LabelKind>(static_cast<int>(rows[k][0]));
      batch[k].label.i = static_cast<int>(rows[k][1]);
      batch[k].label.j = static_cast<int>(rows[k][2]);
      batch[k].entered_midpoint = rows[k][3] > 0.5f;
    }
    const DecompositionTable t = midpoint_event_decomposition(batch);
    table.row_mixed(
        {sampler_kind_name(kind), CsvWriter::format(t.p_H),
         CsvWriter::format(t.p_H_given_M), CsvWriter::format(t.p_H_given_Mc),
         CsvWriter::format(t.p_M),
         CsvWriter::format(t.h_given_m_defined ? t.p_H_given_M * t.p_M : 0.0),
         CsvWriter::format(t.h_given_mc_defined
                               ? t.p_H_given_Mc * (1.0 - t.p_M)
                               : 0.0),
         CsvWriter::format(t.wilson_lo_H_given_M),
         CsvWriter::format(t.wilson_hi_H_given_M), std::to_string(t.n)});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/decomposition.csv");
}

void experiment_diagonal(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  const SamplerConfig sc =
      make_sampler(cfg, ctx.schedule, sampler_kind_from(cfg.sampler.kind),
                   cfg.sampler.eta, 0, 0);
  const Eigen::MatrixXi coords =
      lattice_coords(ctx.gmm, cfg.mixture.side, cfg.mixture.separation);
  const double kappa = cfg.analysis.kappa;
  // payload: max_min_resp, checked, violations, interp_diag, interp_other
  const auto runner = [&](std::uint64_t id) {
    const TrajectoryRecord rec =
        sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
    const DiagonalReport rep = diagonal_avoidance_check(
        {rec}, ctx.gmm, ctx.schedule, coords, kappa);
    const Label label = classify_sample(ctx.gmm, rec.states.back());
    const bool interp = label.kind == LabelKind::interpolation;
    const bool diag = interp && is_diagonal_pair(coords, label.i, label.j);
    return std::vector<float>{
        static_cast<float>(rep.max_min_responsibility),
        static_cast<float>(rep.states_checked),
        static_cast<float>(rep.violations), diag ? 1.0f : 0.0f,
        interp && !diag ? 1.0f : 0.0f};
  };
  const auto rows =
      map_ids_resumable(cfg.n_trajectories, ctx.workers, runner,
                        partial_path(ctx, "diagonal"), 5, cfg.resume_limit);
  if (cfg.resume_limit >= 0) return;
  double max_resp = 0.0;
  std::uint64_t checked = 0, violations = 0, diag = 0, other = 0;
  for (const auto& r : rows) {
    max_resp = std::max(max_resp, static_cast<double>(r[0]));
    checked += static_cast<std::uint64_t>(r[1]);
    violations += static_cast<std::uint64_t>(r[2]);
    diag += static_cast<std::uint64_t>(r[3]);
    other += static_cast<std::uint64_t>(r[4]);
  }
  CsvWriter table(ctx.dir + "/diagonal.csv",
                  {"max_min_responsibility", "bound", "states_checked",
                   "violations", "interp_diagonal", "interp_other"});
  table.row({max_resp, std::exp(-kappa), static_cast<double>(checked),
             static_cast<double>(violations), static_cast<double>(diag),
             static_cast<double>(other)});
  ctx.bundle.csv_paths.push_back(ctx.dir + "/diagonal.csv");
}

void experiment_step_sweep(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  CsvWriter table(ctx.dir + "/step_sweep.csv",
                  {"sampler", "n_steps", "rate", "se", "n"});
  const auto rate_for = [&](SamplerKind kind, int n_steps) {
    ExperimentConfig sub = cfg;
    sub.sampler.n_steps = n_steps;
    const SamplerConfig sc = make_sampler(sub, ctx.schedule, kind, 0.0, 0, 0);
    const auto labels =
        map_ids<int>(cfg.n_trajectories, ctx.workers, [&](std::uint64_t id) {
          const TrajectoryRecord rec =
              sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
          const Label label = classify_sample(ctx.gmm, rec.states.back());
          if (label.kind == LabelKind::interpolation) return 1;
          if (label.kind == LabelKind::invalid) return 2;
          return 0;
        });
    std::uint64_t n_interp = 0, n_invalid = 0;
    for (const int l : labels) {
      n_interp += l == 1;
      n_invalid += l == 2;
    }
    const double denom = static_cast<double>(labels.size() - n_invalid);
    const double rate = denom > 0 ? n_interp / denom : 0.0;
    const double se = std::sqrt(std::max(0.0, rate * (1.0 - rate) / denom));
    return std::pair<double, double>(rate, se);
  };
  const auto [ddpm_rate, ddpm_se] = rate_for(SamplerKind::ddpm, 50);
  table.row_mixed({"ddpm", std::to_string(ctx.schedule.T()),
                   CsvWriter::format(ddpm_rate), CsvWriter::format(ddpm_se),
                   std::to_string(cfg.n_trajectories)});
  for (const int n_steps : cfg.analysis.step_list) {
    const auto [rate, se] = rate_for(SamplerKind::ddim, n_steps);
    table.row_mixed({"ddim", std::to_string(n_steps), CsvWriter::format(rate),
                     CsvWriter::format(se),
                     std::to_string(cfg.n_trajectories)});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/step_sweep.csv");
}

void experiment_eta_sweep(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  CsvWriter table(ctx.dir + "/eta_sweep.csv",
                  {"eta", "rate", "se", "trap_stuck_rate", "n"});
  const auto pairs = adjacent_pairs(ctx.gmm);
  const int t3 = tau3_time_index(ctx.schedule.T(), cfg.sampler.n_steps,
                                      cfg.analysis.tau3);
  for (const double eta : cfg.analysis.eta_list) {
    const SamplerConfig sc =
        make_sampler(cfg, ctx.schedule, SamplerKind::ddim, eta, 0, 0);
    const auto labels =
        map_ids<int>(cfg.n_trajectories, ctx.workers, [&](std::uint64_t id) {
          const TrajectoryRecord rec =
              sample_trajectory(sc, *ctx.source, ctx.gmm, ctx.schedule, id);
          return classify_sample(ctx.gmm, rec.states.back()).kind ==
                         LabelKind::interpolation
                     ? 1
                     : 0;
        });
    std::uint64_t n_interp = 0;
    for (const int l : labels) n_interp += l;
    const double rate = static_cast<double>(n_interp) / labels.size();
    const double se =
        std::sqrt(std::max(0.0, rate * (1.0 - rate) / labels.size()));
    // Midpoint escape at this eta on the central segment.
    const SegmentFrame segment =
        SegmentFrame::between(ctx.gmm, pairs[pairs.size() / 2].first,
                              pairs[pairs.size() / 2].second);
    const double ell_t = std::sqrt(ctx.schedule.alpha_bar(t3)) * segment.ell;
    const TrapResult trap = trapping_experiment(
        ctx.gmm, ctx.schedule, *ctx.source, segment, SamplerKind::ddim,
        cfg.analysis.tau3, cfg.sampler.n_steps, eta, 0,
        cfg.analysis.theta_frac * ell_t,
        std::max<int>(100, cfg.n_trajectories / 10), cfg.seed, ctx.workers);
    table.row({eta, rate, se, trap.stuck_rate,
               static_cast<double>(labels.size())});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/eta_sweep.csv");
}

void experiment_perturbation(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  const auto pairs = adjacent_pairs(ctx.gmm);
  const SegmentFrame segment = SegmentFrame::between(
      ctx.gmm, pairs[pairs.size() / 2].first, pairs[pairs.size() / 2].second);
  // Evaluation time: largest t with l^2 / sigma_tilde^2 >= 20 so the
  // two-mode slope floor is positive on the bracketing interval.
  int t_eval = 0;
  for (int t = ctx.schedule.T(); t >= 0; --t) {
    if (segment.ell * segment.ell / ctx.schedule.sigma_tilde_sq(t) >= 20.0) {
      t_eval = t;
      break;
    }
  }
  const int span = tau3_time_index(ctx.schedule.T(), cfg.sampler.n_steps,
                                        cfg.analysis.tau3);
  const double eps = epsilon_from_kappa(ctx.gmm.n_modes, cfg.analysis.kappa);
  const auto drift =
      make_bisector_drift(segment, *ctx.source, ctx.schedule, eps);
  const double theta_len = cfg.analysis.theta_frac * segment.ell;
  const DdpmBoundInputs bounds = estimate_drift_bounds(
      drift, ctx.schedule, span, 2000, theta_len,
      cfg.analysis.a_star * segment.ell, cfg.seed);

  const double c = cfg.score.psi_scale;
  PsiField psi;
  if (cfg.score.psi_shape == "constant") {
    const Eigen::VectorXd dir = segment.u;
    psi = [c, dir](const Eigen::VectorXd&, int) {
      return Eigen::VectorXd(c * dir);
    };
  } else if (cfg.score.psi_shape == "linear") {
    const Eigen::VectorXd dir = segment.u;
    const Eigen::VectorXd center = segment.midpoint;
    psi = [c, dir, center](const Eigen::VectorXd& x, int) {
      return Eigen::VectorXd(c * (x - center).dot(dir) * dir);
    };
  } else {
    throw ConfigError(
        "config.score.psi_shape: perturbation experiment needs constant or "
        "linear");
  }
  const PerturbationReport rep =
      perturbation_analysis(psi, segment, ctx.gmm, ctx.schedule, t_eval,
                            bounds.lambda_rep, theta_len, span);
  CsvWriter table(ctx.dir + "/perturbation.csv",
                  {"psi_shape", "psi_scale", "t", "saddle_found", "xi_base",
                   "xi_perturbed", "shift", "shift_bound", "lambda_base",
                   "lambda_perturbed", "directional_term", "rho_bar",
                   "lambda_rep_reduced", "escape_ok"});
  table.row_mixed({cfg.score.psi_shape, CsvWriter::format(c),
                   std::to_string(t_eval), rep.saddle_found ? "1" : "0",
                   CsvWriter::format(rep.xi_unperturbed),
                   CsvWriter::format(rep.xi_perturbed),
                   CsvWriter::format(rep.shift),
                   CsvWriter::format(rep.shift_bound),
                   CsvWriter::format(rep.lambda_unperturbed),
                   CsvWriter::format(rep.lambda_perturbed),
                   CsvWriter::format(rep.directional_term),
                   CsvWriter::format(rep.rho_bar),
                   CsvWriter::format(rep.lambda_rep_reduced),
                   rep.escape_condition_ok ? "1" : "0"});
  ctx.bundle.csv_paths.push_back(ctx.dir + "/perturbation.csv");
}

void experiment_train(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  TrainConfig tc = cfg.score.train;
  if (cfg.full_scale) tc.epochs = std::max(tc.epochs, 10000);
  if (tc.seed == 0) tc.seed = cfg.seed;
  const TrainResult result = train_score(ctx.gmm, ctx.schedule, tc);
  const std::string ckpt = cfg.score.checkpoint.empty()
                               ? ctx.dir + "/scorenet.ckpt"
                               : cfg.score.checkpoint;
  result.net.save(ckpt, tc.seed, tc.epochs, result.final_loss);
  CsvWriter curve(ctx.dir + "/loss_curve.csv", {"step", "loss"});
  for (std::size_t k = 0; k < result.loss_curve.size(); ++k)
    curve.row({static_cast<double>(k * 50), result.loss_curve[k]});
  ctx.bundle.csv_paths.push_back(ctx.dir + "/loss_curve.csv");
  ctx.bundle.manifest["checkpoint"] = ckpt;
  ctx.bundle.manifest["initial_loss"] = result.initial_loss;
  ctx.bundle.manifest["final_loss"] = result.final_loss;
}

void experiment_dim_sweep(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  CsvWriter table(ctx.dir + "/dim_sweep.csv",
                  {"dim", "kappa", "mean_tau1", "tau2", "plateau",
                   "epsilon_rescaled", "n"});
  for (const int dim : cfg.analysis.dim_list) {
    const GaussianMixture gmm = build_grid_mixture(
        cfg.mixture.side, cfg.mixture.separation, cfg.mixture.sigma, dim,
        cfg.mixture.n_keep);
    NoiseSchedule schedule = build_linear_schedule(
        cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max,
        gmm.sigma);
    const ExactScore source(gmm, schedule);
    SamplerConfig sc;
    sc.kind = SamplerKind::ddim;
    sc.grid = ddim_quadratic_grid(schedule, cfg.sampler.n_steps);
    sc.seed = cfg.seed;
    const double eps = epsilon_from_kappa(gmm.n_modes, cfg.analysis.kappa);
    const std::uint64_t n = std::max<std::uint64_t>(200, cfg.n_trajectories / 10);
    double sum_tau1 = 0.0, plateau = 0.0;
    std::uint64_t n_tau1 = 0;
    const auto rows = map_ids<std::vector<float>>(
        n, ctx.workers, [&](std::uint64_t id) {
          const TrajectoryRecord rec =
              sample_trajectory(sc, source, gmm, schedule, id);
          auto dperp = trajectory_dperp(rec, gmm, schedule, eps);
          const auto margins = margin_kappa_series(rec, gmm, schedule);
          const auto suffix = prefix_min_toward_zero(margins);
          const auto tau1 =
              tau1_from_series(rec.times, suffix, cfg.analysis.kappa);
          std::vector<float> payload;
          payload.push_back(tau1 ? static_cast<float>(*tau1) : -1.0f);
          payload.push_back(dperp.back());
          return payload;
        });
    for (const auto& r : rows) {
      if (r[0] >= 0.0f) {
        sum_tau1 += r[0];
        ++n_tau1;
      }
      plateau += r[1];
    }
    plateau /= rows.size();
    double ell_min = std::numeric_limits<double>::infinity();
    for (int i = 0; i < gmm.n_modes; ++i)
      for (int j = i + 1; j < gmm.n_modes; ++j)
        ell_min =
            std::min(ell_min, (gmm.modes.row(i) - gmm.modes.row(j)).norm());
    const auto tau2 = detect_tau2(ell_min, schedule, cfg.analysis.kappa, dim);
    table.row({static_cast<double>(dim), cfg.analysis.kappa,
               n_tau1 ? sum_tau1 / n_tau1 : -1.0,
               tau2 ? static_cast<double>(*tau2) : -1.0, plateau,
               eps / std::sqrt(static_cast<double>(dim)),
               static_cast<double>(n)});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/dim_sweep.csv");
}

void experiment_hyper_ablation(Ctx& ctx) {
  const auto& cfg = ctx.cfg;
  CsvWriter table(ctx.dir + "/hyper_ablation.csv",
                  {"T", "sigma", "separation", "rate_ddim", "rate_ddpm",
                   "gap", "n"});
  struct Variant {
    int T;
    double sigma;
    double sep;
  };
  std::vector<Variant> variants = {
      {cfg.schedule.T, cfg.mixture.sigma, cfg.mixture.separation},
      {cfg.schedule.T / 2, cfg.mixture.sigma, cfg.mixture.separation},
      {cfg.schedule.T, cfg.mixture.sigma * 2.0, cfg.mixture.separation},
      {cfg.schedule.T, cfg.mixture.sigma * 0.5, cfg.mixture.separation},
      {cfg.schedule.T, cfg.mixture.sigma, cfg.mixture.separation * 0.5},
  };
  for (const auto& v : variants) {
    const GaussianMixture gmm = build_grid_mixture(
        cfg.mixture.side, v.sep, v.sigma, cfg.mixture.dim, cfg.mixture.n_keep);
    NoiseSchedule schedule = build_linear_schedule(
        v.T, cfg.schedule.beta_min, cfg.schedule.beta_max, gmm.sigma);
    TrainConfig tc;
    tc.n_data = 20000;
    tc.batch = 2000;
    tc.epochs = cfg.full_scale ? 2000 : 400;  // 10 steps per pass
    tc.seed = cfg.seed;
    const TrainResult trained = train_score(gmm, schedule, tc);
    const LearnedScore source(trained.net, schedule);
    const std::uint64_t n = std::max<std::uint64_t>(500, cfg.n_trajectories / 5);
    const auto rate_of = [&](SamplerKind kind) {
      SamplerConfig sc;
      sc.kind = kind;
      sc.seed = cfg.seed;
      sc.grid = kind == SamplerKind::ddpm
                    ? ddpm_full_grid(schedule)
                    : ddim_quadratic_grid(schedule,
                                          std::min(cfg.sampler.n_steps,
                                                   schedule.T()));
      const auto labels = map_ids<int>(n, ctx.workers, [&](std::uint64_t id) {
        const TrajectoryRecord rec =
            sample_trajectory(sc, source, gmm, schedule, id);
        return classify_sample(gmm, rec.states.back()).kind ==
                       LabelKind::interpolation
                   ? 1
                   : 0;
      });
      std::uint64_t s = 0;
      for (const int l : labels) s += l;
      return static_cast<double>(s) / n;
    };
    const double r_ddim = rate_of(SamplerKind::ddim);
    const double r_ddpm = rate_of(SamplerKind::ddpm);
    table.row({static_cast<double>(v.T), v.sigma, v.sep, r_ddim, r_ddpm,
               r_ddim - r_ddpm, static_cast<double>(n)});
  }
  ctx.bundle.csv_paths.push_back(ctx.dir + "/hyper_ablation.csv");
}

}  // namespace

std::shared_ptr<const ScoreSource> build_score_source(
    const ExperimentConfig& config, const GaussianMixture& gmm,
    const NoiseSchedule& schedule) {
  if (config.score.kind == "exact")
    return std::make_shared<ExactScore>(gmm, schedule);
  if (config.score.kind == "learned") {
    ScoreNet net;
    if (!config.score.checkpoint.empty() &&
        file_exists(config.score.checkpoint)) {
      net = ScoreNet::load(config.score.checkpoint);
    } else {
      TrainConfig tc = config.score.train;
      if (config.full_scale) tc.epochs = std::max(tc.epochs, 10000);
      if (tc.seed == 0) tc.seed = config.seed;
      net = train_score(gmm, schedule, tc).net;
      if (!config.score.checkpoint.empty())
        net.save(config.score.checkpoint, tc.seed, tc.epochs, 0.0);
    }
    return std::make_shared<LearnedScore>(std::move(net), schedule);
  }
  // perturbed: exact base plus a configured constant field.
  auto base = std::make_shared<ExactScore>(gmm, schedule);
  const double c = config.score.psi_scale;
  const int dim = gmm.dim;
  PerturbedScore::PsiField psi = [c, dim](const Eigen::VectorXd&, int) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
    v[0] = c;
    return v;
  };
  return std::make_shared<PerturbedScore>(base, psi);
}

Instruments build_instruments(const ExperimentConfig& config) {
  Instruments inst;
  inst.gmm = build_grid_mixture(config.mixture.side, config.mixture.separation,
                                config.mixture.sigma, config.mixture.dim,
                                config.mixture.n_keep);
  inst.schedule =
      build_linear_schedule(config.schedule.T, config.schedule.beta_min,
                            config.schedule.beta_max, inst.gmm.sigma);
  inst.source = build_score_source(config, inst.gmm, inst.schedule);
  inst.grid = make_grid(config, inst.schedule);
  inst.sampler.kind = sampler_kind_from(config.sampler.kind);
  inst.sampler.grid = inst.grid;
  inst.sampler.eta = config.sampler.eta;
  inst.sampler.seed = config.seed;
  if (inst.sampler.kind == SamplerKind::hybrid) {
    inst.sampler.z_extra = config.sampler.z_extra;
    inst.sampler.tau3_index = tau3_time_index(
        config.schedule.T, config.sampler.n_steps, config.sampler.tau3);
  }
  return inst;
}

ResultBundle run(const ExperimentConfig& config_in) {
  ExperimentConfig config = config_in;
  if (config.full_scale)
    config.n_trajectories = std::max<std::uint64_t>(config.n_trajectories, 100000);
  config.validate();

  Ctx ctx;
  ctx.cfg = config;
  ctx.workers = resolve_workers(config.workers);

  const nlohmann::json config_json = config.to_json();
  const std::uint64_t hash = config_hash(config_json);
  ctx.dir = config.out + "/" + experiment_name(config.experiment) + "-" +
            hash_hex(hash);
  ensure_directory(ctx.dir);

  ctx.gmm = build_grid_mixture(config.mixture.side, config.mixture.separation,
                               config.mixture.sigma, config.mixture.dim,
                               config.mixture.n_keep);
  ctx.schedule =
      build_linear_schedule(config.schedule.T, config.schedule.beta_min,
                            config.schedule.beta_max, ctx.gmm.sigma);
  // The train experiment produces the score source itself; everything else
  // needs one up front (which may itself train when no checkpoint exists).
  if (config.experiment != Experiment::train)
    ctx.source = build_score_source(config, ctx.gmm, ctx.schedule);

  // Manifest goes out before any results.
  nlohmann::json manifest;
  manifest["config"] = config_json;
  manifest["config_hash"] = hash_hex(hash);
  manifest["code_version"] = kVersion;
  manifest["mixture"] = mixture_to_json(ctx.gmm);
  manifest["schedule"] =
      schedule_to_json(ctx.schedule, config.schedule.beta_min,
                       config.schedule.beta_max);
  nlohmann::json conventions;
  conventions["quadratic_grid"] = "t_k = round(T (k/n)^2), dedup, endpoints {T,0}";
  conventions["tau3_mapping"] =
      "t3 = floor(T (tau3/n)^2); DDPM restarts at the same t index";
  conventions["normalization"] = "modes and sigma divided by 2 sqrt(dim)";
  conventions["theta_units"] = "theta_frac is a fraction of ell_t";
  conventions["epsilon_extension"] = "xi clamped to [-eps, 1+eps] (v-units)";
  conventions["hybrid_regrid"] =
      "z DDPM spans uniform in DDPM index over [tau3_index, 0]";
  conventions["score_convention"] = "score = -eps_hat / sqrt(1 - alpha_bar)";
  conventions["midpoint_event"] =
      "||x_t - m_t|| <= theta_frac ell_t at a recorded t <= t3";
  const int t3 = tau3_time_index(ctx.schedule.T(), config.sampler.n_steps,
                                 config.analysis.tau3);
  conventions["tau3_t_index"] = t3;
  manifest["conventions"] = conventions;
  manifest["step_grid"] = make_grid(config, ctx.schedule).indices;
  manifest["epsilon_kappa"] =
      epsilon_from_kappa(ctx.gmm.n_modes, config.analysis.kappa);
  manifest["workers"] = ctx.workers;
  ctx.bundle.manifest = manifest;
  ctx.bundle.out_dir = ctx.dir;
  write_text_file(ctx.dir + "/manifest.json", manifest.dump(2) + "\n");

  switch (config.experiment) {
    case Experiment::sample: experiment_sample(ctx); break;
    case Experiment::step_sweep: experiment_step_sweep(ctx); break;
    case Experiment::kappa_sweep: experiment_kappa_sweep(ctx); break;
    case Experiment::convergence: experiment_convergence(ctx); break;
    case Experiment::trap:
      experiment_trap(ctx, {config.analysis.tau3}, {0.0});
      break;
    case Experiment::eta_sweep: experiment_eta_sweep(ctx); break;
    case Experiment::tau3_ablation:
      experiment_trap(ctx, config.analysis.tau3_list, {0.0});
      break;
    case Experiment::bound_check: experiment_bound_check(ctx); break;
    case Experiment::decomposition: experiment_decomposition(ctx); break;
    case Experiment::diagonal: experiment_diagonal(ctx); break;
    case Experiment::perturbation: experiment_perturbation(ctx); break;
    case Experiment::train: experiment_train(ctx); break;
    case Experiment::dim_sweep: experiment_dim_sweep(ctx); break;
    case Experiment::hyper_ablation: experiment_hyper_ablation(ctx); break;
  }
  // Refresh the manifest in case an experiment added fields.
  write_text_file(ctx.dir + "/manifest.json",
                  ctx.bundle.manifest.dump(2) + "\n");
  return ctx.bundle;
}

std::vector<std::string> emit_plot_data(const ResultBundle& bundle,
                                        const std::vector<CurveSpec>& curves) {
  std::vector<std::string> files;
  std::string gp = "# gnuplot script generated by gmdiff\n";
  for (const auto& curve : curves) {
    const std::string src = bundle.out_dir + "/" + curve.csv;
    if (!file_exists(src)) continue;
    const std::string text = read_text_file(src);
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const std::size_t nl = text.find('\n', pos);
      lines.push_back(text.substr(pos, nl - pos));
      if (nl == std::string::npos) break;
      pos = nl + 1;
    }
    if (lines.empty()) continue;
    const auto split = [](const std::string& line) {
      std::vector<std::string> out;
      std::size_t start = 0;
      for (;;) {
        const std::size_t comma = line.find(',', start);
        out.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      return out;
    };
    const auto header = split(lines[0]);
    int xi = -1, yi = -1;
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == curve.x_column) xi = static_cast<int>(c);
      if (header[c] == curve.y_column) yi = static_cast<int>(c);
    }
    if (xi < 0 || yi < 0) continue;
    const std::string path = bundle.out_dir + "/curve_" + curve.name + ".csv";
    std::string out = curve.x_column + "," + curve.y_column + "\n";
    for (std::size_t l = 1; l < lines.size(); ++l) {
      if (lines[l].empty()) continue;
      const auto cells = split(lines[l]);
      if (static_cast<int>(cells.size()) <= std::max(xi, yi)) continue;
      out += cells[xi] + "," + cells[yi] + "\n";
    }
    write_text_file(path, out);
    files.push_back(path);
    gp += "set datafile separator ','\n";
    if (curve.log_y) gp += "set logscale y\n";
    gp += "plot 'curve_" + curve.name + ".csv' using 1:2 with lines title '" +
          curve.name + "'\npause -1\n";
  }
  const std::string gp_path = bundle.out_dir + "/plots.gp";
  write_text_file(gp_path, gp);
  files.push_back(gp_path);
  return files;
}

}  // namespace gmdiff
