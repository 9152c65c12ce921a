#pragma once

#include <Eigen/Core>

namespace gmdiff {

struct GaussianMixture;
class NoiseSchedule;

// Mode pair (i, j) with i < j, in rescaled (static-mode) coordinates.
// `scale` carries sqrt(alpha_bar_t) when the frame is used in x-space.
struct SegmentFrame {
  int i = 0;
  int j = 1;
  double ell = 0.0;          // ||mu_j - mu_i||
  Eigen::VectorXd u;         // (mu_j - mu_i) / ell
  Eigen::VectorXd mode_i;
  Eigen::VectorXd midpoint;  // (mu_i + mu_j) / 2
  double scale = 1.0;

  static SegmentFrame between(const GaussianMixture& gmm, int i, int j);
};

struct SegmentCoordinates {
  double xi = 0.0;    // parallel coordinate, dimensionless
  Eigen::VectorXd w;  // orthogonal residual
  double A = 0.0;     // signed bisector coordinate, length units
};

struct TubeSpec {
  double epsilon = 0.0;
};

struct NearestPair {
  int i = 0;
  int j = 1;
  double margin = 0.0;  // third-smallest minus smallest squared distance
};

// Two nearest modes of x against the time-t mode locations
// sqrt(alpha_bar_t) mu^k; ties broken toward lower indices. For N == 2
// the margin is +infinity.
NearestPair nearest_pair(const GaussianMixture& gmm,
                         const NoiseSchedule& schedule,
                         const Eigen::VectorXd& x, int t);

SegmentCoordinates decompose(const SegmentFrame& segment,
                             const Eigen::VectorXd& y);

Eigen::VectorXd reconstruct(const SegmentFrame& segment,
                            const SegmentCoordinates& coords);

// Distance to the eps-extended segment. The extension uses the paper's
// v-parameterization: xi is clamped to [-eps, 1 + eps], so the physical
// extension length is eps * ell.
double perp_distance(const SegmentFrame& segment, double eps,
                     const Eigen::VectorXd& y);

double epsilon_from_kappa(int n_modes, double kappa);

// Tube membership: within radius eps of the unextended segment.
bool in_tube(const SegmentFrame& segment, double eps,
             const Eigen::VectorXd& y);

}  // namespace gmdiff
