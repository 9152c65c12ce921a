#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gmdiff/mixture.hpp"
#include "gmdiff/schedule.hpp"
#include "gmdiff/score_source.hpp"

namespace gmdiff {

enum class ScoreConvention {
  // score = -eps_hat / sqrt(1 - alpha_bar_t)  (matches Tweedie exactly)
  noise_over_sqrt_one_minus_alpha_bar,
  // score = -eps_hat / sigma_t  (absorbs the sigma^2 alpha_bar term)
  noise_over_sigma_t,
};

// 3-layer MLP noise predictor, hidden width 64, smooth (SiLU) activations.
// Inputs are the state plus time features (t/T, sqrt(alpha_bar),
// sqrt(1-alpha_bar)); dims above 2 append 8 sinusoidal log-SNR features.
class ScoreNet {
 public:
  static constexpr int kHidden = 64;

  ScoreNet() = default;
  ScoreNet(int dim, int T, std::uint64_t init_seed);

  int dim() const { return dim_; }
  int input_dim() const { return static_cast<int>(W1_.cols()); }
  std::int64_t parameter_count() const;

  // eps_hat(x, t)
  Eigen::VectorXd predict(const NoiseSchedule& schedule,
                          const Eigen::VectorXd& x, int t) const;
  // Batched forward: X is input_dim x B (already featurized).
  Eigen::MatrixXd forward(const Eigen::MatrixXd& X) const;

  void features(const NoiseSchedule& schedule, const Eigen::VectorXd& x, int t,
                Eigen::Ref<Eigen::VectorXd> out) const;

  void save(const std::string& path, std::uint64_t seed, int epoch,
            double loss) const;
  static ScoreNet load(const std::string& path);

  // Flat parameter access (gradient checks, Adam).
  std::vector<Eigen::MatrixXd*> weight_refs();
  std::vector<Eigen::VectorXd*> bias_refs();

  Eigen::MatrixXd W1_, W2_, W3_;
  Eigen::VectorXd b1_, b2_, b3_;

 private:
  int dim_ = 0;
  int T_ = 0;
};

struct TrainConfig {
  int n_data = 100000;
  int batch = 10000;
  // Passes over the dataset; every step draws a fresh random batch, so one
  // epoch is n_data / batch optimizer steps.
  int epochs = 2000;
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  // Fraction of each batch whose t is drawn from {1 .. T/8} instead of
  // {1 .. T}. The pointwise DSM optimum is unchanged; this only shifts
  // optimization emphasis toward the stiff small-t score field.
  double low_t_fraction = 0.0;
  std::uint64_t seed = 0;

  int total_steps() const { return epochs * std::max(1, n_data / batch); }

  void validate() const;
};

struct TrainResult {
  ScoreNet net;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_curve;  // one entry per 50 steps
};

// Denoising score matching: min E || eps_hat(sqrt(ab) x0 + sqrt(1-ab) eps, t)
// - eps ||^2 over uniform t and x0 ~ p_data, Adam with linear LR decay.
TrainResult train_score(const GaussianMixture& gmm,
                        const NoiseSchedule& schedule,
                        const TrainConfig& config);

// Sampler-facing adapter around a trained net.
class LearnedScore final : public ScoreSource {
 public:
  LearnedScore(ScoreNet net, const NoiseSchedule& schedule,
               ScoreConvention convention =
                   ScoreConvention::noise_over_sqrt_one_minus_alpha_bar)
      : net_(std::move(net)), schedule_(&schedule), convention_(convention) {}

  using ScoreSource::score;
  ScoreKind kind() const override { return ScoreKind::learned; }
  void score(const Eigen::VectorXd& x, int t,
             Eigen::Ref<Eigen::VectorXd> out) const override;
  ScoreConvention convention() const { return convention_; }
  const ScoreNet& net() const { return net_; }

 private:
  ScoreNet net_;
  const NoiseSchedule* schedule_;
  ScoreConvention convention_;
};

enum class PsiShape { constant, linear, trained_residual };

struct ScoreErrorSpec {
  PsiShape shape = PsiShape::trained_residual;
  std::vector<double> rho_bar;  // per-t bound on sigma_t^2 ||psi|| / sqrt(ab)
  std::vector<double> l_psi;    // per-t empirical Lipschitz estimate
};

// Empirical error field of a learned score against the exact one, sampled
// over tube-region states for t in [1, t_max].
ScoreErrorSpec score_error_field(const ScoreSource& learned,
                                 const GaussianMixture& gmm,
                                 const NoiseSchedule& schedule, int t_max,
                                 int samples_per_t, std::uint64_t seed);

}  // namespace gmdiff
