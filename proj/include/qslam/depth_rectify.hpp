#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <vector>

#include "qslam/common.hpp"
#include "qslam/geometry.hpp"
#include "qslam/quadric_fit.hpp"

namespace qslam {

/// How the per-pixel depth equation is set up.
///  FixedXY: hold the lateral coordinates from the initial backprojection
///           fixed and solve the quadric for Z only.
///  Ray:     substitute the full viewing ray p(z) = z * (X/Z, Y/Z, 1).
enum class SolveDepthMode { FixedXY, Ray };

struct RectifyConfig {
  SolveDepthMode mode = SolveDepthMode::FixedXY;
  double max_rel_correction = 0.2;  // corrections beyond this keep the input
  FitConfig fit;
};

namespace detail {

/// Real roots of a*z^2 + b*z + c0 = 0 in a numerically stable form.
/// Returns the number of roots found (0, 1, or 2).
inline int solve_quadratic(double a, double b, double c0, double& z1,
                           double& z2) {
  if (std::abs(a) < 1e-12) {
    if (std::abs(b) < 1e-12) return 0;
    z1 = -c0 / b;
    return 1;
  }
  double disc = b * b - 4.0 * a * c0;
  if (disc < 0.0) return 0;
  double sq = std::sqrt(disc);
  // q = -(b + sign(b)*sqrt(disc))/2 avoids cancellation when b dominates.
  double q = (b >= 0.0) ? -0.5 * (b + sq) : -0.5 * (b - sq);
  if (std::abs(q) < 1e-300) {
    // b and disc both ~0: double root at -b/(2a).
    z1 = z2 = -b / (2.0 * a);
    return 2;
  }
  z1 = q / a;
  z2 = c0 / q;
  return 2;
}

}  // namespace detail

/// Snap the depth at pixel (u, v) onto the fitted quadric. Returns the
/// input depth unchanged when no usable root exists or the correction
/// exceeds the relative cap. When `predicted` is non-null it receives the
/// raw nearest root (before the cap) if one exists, and is left untouched
/// otherwise.
inline double solve_depth(const QuadricCoefficients& coef,
                          const CameraIntrinsics& cam, double u, double v,
                          double d0, SolveDepthMode mode,
                          double max_rel_correction,
                          double* predicted = nullptr) {
  if (d0 <= 0.0) return d0;
  double a, b, c0;
  if (mode == SolveDepthMode::FixedXY) {
    double X = (u - cam.cx) / cam.fx * d0;
    double Y = (v - cam.cy) / cam.fy * d0;
    const Vec6& cq = coef.cq;
    a = cq(2);
    b = cq(4) * Y + cq(5) * X + coef.cl.z();
    c0 = cq(0) * X * X + cq(1) * Y * Y + cq(3) * X * Y + coef.cl.x() * X +
         coef.cl.y() * Y - coef.c;
  } else {
    Vec3 r((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    a = coef.cq.dot(quadric_term(r));
    b = coef.cl.dot(r);
    c0 = -coef.c;
  }

  double z1 = 0.0, z2 = 0.0;
  int n = detail::solve_quadratic(a, b, c0, z1, z2);
  if (n == 0) return d0;
  double best = z1;
  if (n == 2 && std::abs(z2 - d0) < std::abs(z1 - d0)) best = z2;
  if (predicted) *predicted = best;
  if (std::abs(best - d0) > max_rel_correction * d0) return d0;
  return best;
}

struct RectifiedFrame {
  DepthImage corrected_depth;
  MaskImage correction_mask;  // 1 where a segment's correction was applied
  std::map<int, QuadricFitResult> fits;
};

/// Fit every segment in the mask, solve corrected depths, score each fit,
/// and apply corrections only for segments that pass all acceptance gates.
/// R^2 compares the raw quadric predictions z_i against the corrections
/// f_i that survive the cap/fallback policy: 1 - SS_res/SS_tot with
/// SS_res = sum (z_i - f_i)^2 and SS_tot = sum (z_i - mean z)^2. When the
/// policy keeps the predictions, SS_res vanishes; when predictions are
/// routinely capped back to the input, R^2 collapses and the segment is
/// rejected.
inline RectifiedFrame rectify_frame(const CameraIntrinsics& cam,
                                    const DepthImage& depth,
                                    const MaskImage& mask,
                                    const RectifyConfig& cfg = RectifyConfig{}) {
  cam.validate();
  require(depth.width() == mask.width() && depth.height() == mask.height(),
          ErrorKind::InvalidInput, "depth/mask size mismatch");

  RectifiedFrame out;
  out.corrected_depth = depth;
  out.correction_mask = MaskImage(depth.width(), depth.height(), 0);

  std::set<int> ids;
  for (int v = 0; v < mask.height(); ++v)
    for (int u = 0; u < mask.width(); ++u)
      if (mask(u, v) > 0) ids.insert(mask(u, v));

  for (int id : ids) {
    PointCloud cloud = backproject_segment(cam, depth, mask, id);
    QuadricFitResult fit = fit_quadric(cloud.points, cfg.fit);
    fit.segment_id = id;
    if (!fit.fit_ok) {
      out.fits[id] = fit;
      continue;
    }

    // Solve every pixel of the segment, then score the whole correction.
    struct PixelSolve {
      int u, v;
      double f;     // corrected depth (post cap/fallback)
      double pred;  // raw root, NaN when the pixel ray found none
    };
    std::vector<PixelSolve> solves;
    double sum_pred = 0.0;
    int n_pred = 0;
    for (int v = 0; v < mask.height(); ++v) {
      for (int u = 0; u < mask.width(); ++u) {
        if (mask(u, v) != id) continue;
        double z = depth(u, v);
        if (z <= 0.0) continue;
        double pred = std::numeric_limits<double>::quiet_NaN();
        double f = solve_depth(fit.coef, cam, u, v, z, cfg.mode,
                               cfg.max_rel_correction, &pred);
        solves.push_back({u, v, f, pred});
        if (std::isfinite(pred)) {
          sum_pred += pred;
          ++n_pred;
        }
      }
    }
    if (n_pred > 0) {
      double mean_pred = sum_pred / n_pred;
      double ss_res = 0.0, ss_tot = 0.0;
      for (const PixelSolve& s : solves) {
        if (!std::isfinite(s.pred)) continue;
        ss_res += (s.pred - s.f) * (s.pred - s.f);
        ss_tot += (s.pred - mean_pred) * (s.pred - mean_pred);
      }
      if (ss_tot <= 0.0) {
        fit.r2 = (ss_res == 0.0) ? 1.0 : 0.0;
      } else {
        fit.r2 = 1.0 - ss_res / ss_tot;
      }
    }

    fit.accepted = accept_segment(fit, cfg.fit);
    if (fit.accepted) {
      for (const PixelSolve& s : solves) {
        out.corrected_depth(s.u, s.v) = s.f;
        out.correction_mask(s.u, s.v) = 1;
      }
    }
    out.fits[id] = fit;
  }
  return out;
}

}  // namespace qslam
