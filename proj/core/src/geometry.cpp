#include "gmdiff/geometry.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "gmdiff/mixture.hpp"
#include "gmdiff/schedule.hpp"

namespace gmdiff {

SegmentFrame SegmentFrame::between(const GaussianMixture& gmm, int i, int j) {
  if (i == j) throw std::invalid_argument("segment: i and j must differ");
  if (i > j) std::swap(i, j);
  SegmentFrame seg;
  seg.i = i;
  seg.j = j;
  seg.mode_i = gmm.modes.row(i).transpose();
  const Eigen::VectorXd diff = gmm.modes.row(j).transpose() - seg.mode_i;
  seg.ell = diff.norm();
  seg.u = diff / seg.ell;
  seg.midpoint = seg.mode_i + 0.5 * diff;
  return seg;
}

NearestPair nearest_pair(const GaussianMixture& gmm,
                         const NoiseSchedule& schedule,
                         const Eigen::VectorXd& x, int t) {
  if (gmm.n_modes < 2)
    throw std::invalid_argument("nearest_pair: need at least two modes");
  const double scale = std::sqrt(schedule.alpha_bar(t));
  int best = 0, second = 1, third = -1;
  double d_best = std::numeric_limits<double>::infinity();
  double d_second = std::numeric_limits<double>::infinity();
  double d_third = std::numeric_limits<double>::infinity();
  for (int k = 0; k < gmm.n_modes; ++k) {
    const double d2 = (x - scale * gmm.modes.row(k).transpose()).squaredNorm();
    if (d2 < d_best) {
      d_third = d_second; third = second;
      d_second = d_best; second = best;
      d_best = d2; best = k;
    } else if (d2 < d_second) {
      d_third = d_second; third = second;
      d_second = d2; second = k;
    } else if (d2 < d_third) {
      d_third = d2; third = k;
    }
  }
  (void)third;
  NearestPair pair;
  pair.i = std::min(best, second);
  pair.j = std::max(best, second);
  pair.margin = gmm.n_modes > 2
                    ? d_third - d_best
                    : std::numeric_limits<double>::infinity();
  return pair;
}

SegmentCoordinates decompose(const SegmentFrame& segment,
                             const Eigen::VectorXd& y) {
  SegmentCoordinates c;
  const Eigen::VectorXd rel = y - segment.mode_i;
  c.xi = rel.dot(segment.u) / segment.ell;
  c.w = rel - c.xi * segment.ell * segment.u;
  c.A = (y - segment.midpoint).dot(segment.u);
  return c;
}

Eigen::VectorXd reconstruct(const SegmentFrame& segment,
                            const SegmentCoordinates& coords) {
  return segment.mode_i + coords.xi * segment.ell * segment.u + coords.w;
}

double perp_distance(const SegmentFrame& segment, double eps,
                     const Eigen::VectorXd& y) {
  if (eps < 0.0) throw std::invalid_argument("perp_distance: eps must be >= 0");
  const Eigen::VectorXd rel = y - segment.mode_i;
  double xi = rel.dot(segment.u) / segment.ell;
  xi = std::clamp(xi, -eps, 1.0 + eps);
  return (rel - xi * segment.ell * segment.u).norm();
}

double epsilon_from_kappa(int n_modes, double kappa) {
  if (!(kappa > 0.0))
    throw std::invalid_argument("epsilon_from_kappa: kappa must be positive");
  return n_modes * std::exp(-kappa);
}

bool in_tube(const SegmentFrame& segment, double eps,
             const Eigen::VectorXd& y) {
  return perp_distance(segment, 0.0, y) <= eps;
}

}  // namespace gmdiff
