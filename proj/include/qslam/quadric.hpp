#pragma once

#include <cmath>

#include "qslam/common.hpp"

namespace qslam {

/// Implicit quadric surface f(x) = cq . q(x) + cl . x - c = 0 with the
/// squared/cross term vector q(x) = [x^2, y^2, z^2, xy, yz, xz].
struct QuadricCoefficients {
  Vec6 cq = Vec6::Zero();
  Vec3 cl = Vec3::Zero();
  double c = 0.0;
};

inline Vec6 quadric_term(const Vec3& x) {
  Vec6 q;
  q << x.x() * x.x(), x.y() * x.y(), x.z() * x.z(), x.x() * x.y(),
      x.y() * x.z(), x.x() * x.z();
  return q;
}

inline double evaluate_quadric(const QuadricCoefficients& coef, const Vec3& x) {
  return coef.cq.dot(quadric_term(x)) + coef.cl.dot(x) - coef.c;
}

inline Vec3 quadric_gradient(const QuadricCoefficients& coef, const Vec3& x) {
  const Vec6& cq = coef.cq;
  return Vec3(2.0 * cq(0) * x.x() + cq(3) * x.y() + cq(5) * x.z() + coef.cl.x(),
              2.0 * cq(1) * x.y() + cq(3) * x.x() + cq(4) * x.z() + coef.cl.y(),
              2.0 * cq(2) * x.z() + cq(4) * x.y() + cq(5) * x.x() + coef.cl.z());
}

/// First-order (Taubin) squared point-to-surface distance f^2 / |grad f|^2.
/// Returns `degenerate_value` where the gradient vanishes.
inline double taubin_distance(const QuadricCoefficients& coef, const Vec3& x,
                              double degenerate_value = 1e30) {
  double f = evaluate_quadric(coef, x);
  double g2 = quadric_gradient(coef, x).squaredNorm();
  if (g2 < 1e-12) return degenerate_value;
  return f * f / g2;
}

/// Scale so |cq| = 1 and flip sign so the first non-negligible cq component
/// is positive. Fitting determines cq only up to sign and scale; pinning
/// both makes coefficients comparable across runs.
inline QuadricCoefficients canonicalize(const QuadricCoefficients& coef) {
  double n = coef.cq.norm();
  require(n > 1e-12, ErrorKind::NumericalFailure,
          "cannot canonicalize quadric with vanishing cq");
  QuadricCoefficients out;
  out.cq = coef.cq / n;
  out.cl = coef.cl / n;
  out.c = coef.c / n;
  for (int i = 0; i < 6; ++i) {
    if (std::abs(out.cq(i)) > 1e-9) {
      if (out.cq(i) < 0.0) {
        out.cq = -out.cq;
        out.cl = -out.cl;
        out.c = -out.c;
      }
      break;
    }
  }
  return out;
}

}  // namespace qslam
