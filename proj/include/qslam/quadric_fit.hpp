#pragma once

#include <vector>

#include <Eigen/Dense>

#include "qslam/common.hpp"
#include "qslam/quadric.hpp"

namespace qslam {

/// Centered second-order statistics of a point set, accumulated once and
/// reused by the fit.
struct ScatterSummary {
  int n = 0;
  Vec3 mean_x = Vec3::Zero();
  Vec6 mean_q = Vec6::Zero();
  Mat3 L = Mat3::Zero();   // sum (x - mean_x)(x - mean_x)^T
  Mat6 M = Mat6::Zero();   // sum (q - mean_q)(q - mean_q)^T
  Mat63 N = Mat63::Zero(); // -sum (q - mean_q)(x - mean_x)^T
};

struct FitConfig {
  double tau_eps = 1e-4;   // max mean squared Taubin distance, m^2
  double r2_min = 0.85;    // min depth-correction R^2 to accept
  int area_min = 200;      // min pixel count for acceptance
  int min_points = 10;     // below this the fit is not attempted
  double pinv_tol = 1e-10; // relative eigenvalue cutoff for pseudo-inverse
};

struct QuadricFitResult {
  int segment_id = 0;
  QuadricCoefficients coef;
  double epsilon = 0.0;  // mean squared Taubin distance over the segment
  double r2 = 0.0;       // filled in by depth rectification
  int n_points = 0;
  bool fit_ok = false;   // a quadric was recovered
  bool accepted = false; // passed area/epsilon/r2 gates
};

/// Two-pass accumulation: means first, then centered outer products.
inline ScatterSummary compute_scatter(const std::vector<Vec3>& points) {
  ScatterSummary s;
  s.n = static_cast<int>(points.size());
  if (s.n == 0) return s;
  for (const Vec3& x : points) {
    s.mean_x += x;
    s.mean_q += quadric_term(x);
  }
  s.mean_x /= s.n;
  s.mean_q /= s.n;
  for (const Vec3& x : points) {
    Vec3 dx = x - s.mean_x;
    Vec6 dq = quadric_term(x) - s.mean_q;
    s.L += dx * dx.transpose();
    s.M += dq * dq.transpose();
    s.N -= dq * dx.transpose();
  }
  return s;
}

/// Pseudo-inverse of a symmetric matrix via eigendecomposition. Eigenvalues
/// below rel_tol * max|eigenvalue| are treated as zero.
template <typename Mat>
inline Mat pseudo_inverse_sym(const Mat& m, double rel_tol) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  require(es.info() == Eigen::Success, ErrorKind::NumericalFailure,
          "eigendecomposition failed");
  auto evals = es.eigenvalues();
  double max_abs = evals.cwiseAbs().maxCoeff();
  double cutoff = rel_tol * max_abs;
  Mat inv_diag = Mat::Zero();
  for (int i = 0; i < evals.size(); ++i) {
    if (std::abs(evals(i)) > cutoff) inv_diag(i, i) = 1.0 / evals(i);
  }
  return es.eigenvectors() * inv_diag * es.eigenvectors().transpose();
}

/// Reduced 6x6 system whose minimal eigenvector is cq.
inline Mat6 compute_psi(const ScatterSummary& s, double pinv_tol = 1e-10) {
  Mat3 L_pinv = pseudo_inverse_sym<Mat3>(s.L, pinv_tol);
  return s.M - s.N * L_pinv * s.N.transpose();
}

/// Mean squared Taubin distance over the points.
inline double fitting_error(const QuadricCoefficients& coef,
                            const std::vector<Vec3>& points) {
  require(!points.empty(), ErrorKind::InvalidInput,
          "fitting_error needs points");
  double sum = 0.0;
  for (const Vec3& x : points) sum += taubin_distance(coef, x);
  return sum / static_cast<double>(points.size());
}

/// Fit a quadric to the point set by minimizing the algebraic residual
/// under |cq| = 1. Leaves r2 at 0 and accepted false; depth rectification
/// fills those in.
inline QuadricFitResult fit_quadric(const std::vector<Vec3>& points,
                                    const FitConfig& cfg = FitConfig{}) {
  QuadricFitResult res;
  res.n_points = static_cast<int>(points.size());
  if (res.n_points < cfg.min_points) return res;

  ScatterSummary s = compute_scatter(points);
  Mat6 psi = compute_psi(s, cfg.pinv_tol);
  Eigen::SelfAdjointEigenSolver<Mat6> es(psi);
  require(es.info() == Eigen::Success, ErrorKind::NumericalFailure,
          "quadric eigen solve failed");
  // SelfAdjointEigenSolver sorts ascending; column 0 is the minimizer.
  Vec6 cq = es.eigenvectors().col(0);
  if (cq.norm() < 1e-12) return res;

  QuadricCoefficients coef;
  coef.cq = cq;
  Mat3 L_pinv = pseudo_inverse_sym<Mat3>(s.L, cfg.pinv_tol);
  coef.cl = L_pinv * (s.N.transpose() * cq);
  coef.c = coef.cq.dot(s.mean_q) + coef.cl.dot(s.mean_x);

  res.coef = canonicalize(coef);
  res.epsilon = fitting_error(res.coef, points);
  res.fit_ok = true;
  return res;
}

/// Conjunctive acceptance gate: enough support, small fitting error, and a
/// depth-correction fit that explains the data.
inline bool accept_segment(const QuadricFitResult& res, const FitConfig& cfg) {
  return res.fit_ok && res.n_points >= cfg.area_min &&
         res.epsilon <= cfg.tau_eps && res.r2 >= cfg.r2_min;
}

}  // namespace qslam
