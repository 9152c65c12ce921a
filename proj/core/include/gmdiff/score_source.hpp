#pragma once

#include <functional>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "gmdiff/mixture.hpp"
#include "gmdiff/schedule.hpp"

namespace gmdiff {

enum class ScoreKind { exact, learned, perturbed };

// Read-only score field s(x, t); implementations must be safe to call
// concurrently from any number of workers.
class ScoreSource {
 public:
  virtual ~ScoreSource() = default;
  virtual ScoreKind kind() const = 0;
  virtual void score(const Eigen::VectorXd& x, int t,
                     Eigen::Ref<Eigen::VectorXd> out) const = 0;

  Eigen::VectorXd score(const Eigen::VectorXd& x, int t) const {
    Eigen::VectorXd out(x.size());
    score(x, t, out);
    return out;
  }
};

class ExactScore final : public ScoreSource {
 public:
  ExactScore(const GaussianMixture& gmm, const NoiseSchedule& schedule)
      : gmm_(&gmm), schedule_(&schedule) {}
  using ScoreSource::score;
  ScoreKind kind() const override { return ScoreKind::exact; }
  void score(const Eigen::VectorXd& x, int t,
             Eigen::Ref<Eigen::VectorXd> out) const override {
    score_exact_into(*gmm_, *schedule_, x, t, out);
  }

 private:
  const GaussianMixture* gmm_;
  const NoiseSchedule* schedule_;
};

// Base source plus an additive error field psi(x, t).
class PerturbedScore final : public ScoreSource {
 public:
  using PsiField = std::function<Eigen::VectorXd(const Eigen::VectorXd&, int)>;

  PerturbedScore(std::shared_ptr<const ScoreSource> base, PsiField psi)
      : base_(std::move(base)), psi_(std::move(psi)) {}
  using ScoreSource::score;
  ScoreKind kind() const override { return ScoreKind::perturbed; }
  void score(const Eigen::VectorXd& x, int t,
             Eigen::Ref<Eigen::VectorXd> out) const override {
    base_->score(x, t, out);
    out += psi_(x, t);
  }

 private:
  std::shared_ptr<const ScoreSource> base_;
  PsiField psi_;
};

}  // namespace gmdiff
