#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "qslam/common.hpp"
#include "qslam/image.hpp"
#include "qslam/rng.hpp"
#include "qslam/tsdf.hpp"

namespace qslam {

/// Peak signal-to-noise ratio for images in [0, 1]. Returns 99 dB for
/// (near-)identical inputs instead of diverging.
inline double psnr(const ColorImage& a, const ColorImage& b) {
  require(a.width() == b.width() && a.height() == b.height() && !a.empty(),
          ErrorKind::InvalidInput, "psnr needs matching non-empty images");
  double se = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    se += (a.data()[i] - b.data()[i]).squaredNorm();
  double mse = se / (static_cast<double>(a.size()) * 3.0);
  if (mse < 1e-10) return 99.0;
  return -10.0 * std::log10(mse);
}

/// Mean SSIM with the standard 11x11 Gaussian window (sigma 1.5),
/// evaluated on the valid interior and averaged over channels.
inline double ssim(const ColorImage& a, const ColorImage& b) {
  require(a.width() == b.width() && a.height() == b.height(),
          ErrorKind::InvalidInput, "ssim needs matching images");
  const int half = 5;
  require(a.width() >= 11 && a.height() >= 11, ErrorKind::InvalidInput,
          "ssim needs at least 11x11 images");

  double kernel[11][11];
  double ksum = 0.0;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) {
      double g = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      kernel[dy + half][dx + half] = g;
      ksum += g;
    }
  for (auto& row : kernel)
    for (double& k : row) k /= ksum;

  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  double total = 0.0;
  long count = 0;
  for (int y = half; y < a.height() - half; ++y) {
    for (int x = half; x < a.width() - half; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int dy = -half; dy <= half; ++dy) {
          for (int dx = -half; dx <= half; ++dx) {
            double w = kernel[dy + half][dx + half];
            double pa = a(x + dx, y + dy)(ch);
            double pb = b(x + dx, y + dy)(ch);
            mx += w * pa;
            my += w * pb;
            mxx += w * pa * pa;
            myy += w * pb * pb;
            mxy += w * pa * pb;
          }
        }
        double vx = mxx - mx * mx;
        double vy = myy - my * my;
        double cov = mxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

/// Mean absolute depth difference in centimeters over pixels valid in both.
inline double depth_l1_cm(const DepthImage& a, const DepthImage& b) {
  require(a.width() == b.width() && a.height() == b.height(),
          ErrorKind::InvalidInput, "depth_l1 needs matching images");
  double sum = 0.0;
  long count = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] <= 0.0 || b.data()[i] <= 0.0) continue;
    sum += std::abs(a.data()[i] - b.data()[i]);
    ++count;
  }
  require(count > 0, ErrorKind::DataError, "no jointly valid depth pixels");
  return sum / count * 100.0;
}

/// RMSE of translation residuals in centimeters after aligning the
/// estimated trajectory to the reference with a least-squares rigid (or
/// similarity) transform.
inline double ate_rmse_cm(const std::vector<Vec3>& gt,
                          const std::vector<Vec3>& est, bool with_scale = false) {
  require(gt.size() == est.size() && gt.size() >= 3, ErrorKind::InvalidInput,
          "trajectory alignment needs >= 3 matched poses");
  Eigen::MatrixXd src(3, est.size()), dst(3, gt.size());
  for (size_t i = 0; i < gt.size(); ++i) {
    src.col(i) = est[i];
    dst.col(i) = gt[i];
  }
  Eigen::Matrix4d T = Eigen::umeyama(src, dst, with_scale);
  double se = 0.0;
  for (size_t i = 0; i < gt.size(); ++i) {
    Vec3 aligned = T.topLeftCorner<3, 3>() * est[i] + T.topRightCorner<3, 1>();
    se += (gt[i] - aligned).squaredNorm();
  }
  return std::sqrt(se / gt.size()) * 100.0;
}

// ---- mesh evaluation ----

/// Uniform area-weighted surface samples.
inline std::vector<Vec3> sample_mesh_surface(const TriangleMesh& mesh,
                                             int n_samples, uint64_t seed) {
  require(!mesh.triangles.empty(), ErrorKind::DataError, "empty mesh");
  require(n_samples > 0, ErrorKind::InvalidInput, "n_samples must be positive");

  std::vector<double> cum_area(mesh.triangles.size());
  double total = 0.0;
  for (size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    const Vec3& a = mesh.vertices[static_cast<size_t>(t[0])];
    const Vec3& b = mesh.vertices[static_cast<size_t>(t[1])];
    const Vec3& c = mesh.vertices[static_cast<size_t>(t[2])];
    total += 0.5 * (b - a).cross(c - a).norm();
    cum_area[i] = total;
  }
  require(total > 0.0, ErrorKind::DataError, "mesh has zero area");

  SplitMix64 rng = stream_rng(seed, 0x5e5a);
  std::vector<Vec3> samples;
  samples.reserve(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    double r = rng.uniform() * total;
    size_t idx = static_cast<size_t>(
        std::lower_bound(cum_area.begin(), cum_area.end(), r) -
        cum_area.begin());
    if (idx >= mesh.triangles.size()) idx = mesh.triangles.size() - 1;
    const auto& t = mesh.triangles[idx];
    const Vec3& a = mesh.vertices[static_cast<size_t>(t[0])];
    const Vec3& b = mesh.vertices[static_cast<size_t>(t[1])];
    const Vec3& c = mesh.vertices[static_cast<size_t>(t[2])];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    samples.push_back(a + u * (b - a) + v * (c - a));
  }
  return samples;
}

struct MeshMetrics {
  double accuracy_cm = 0.0;        // mean predicted-to-reference distance
  double completion_cm = 0.0;      // mean reference-to-predicted distance
  double completion_ratio_pct = 0.0;  // reference points within threshold
};

namespace detail {

inline double nearest_dist(const Vec3& p, const std::vector<Vec3>& pts) {
  double best = 1e30;
  for (const Vec3& q : pts) best = std::min(best, (p - q).squaredNorm());
  return std::sqrt(best);
}

}  // namespace detail

/// Two-sided point distances between sampled mesh surface and reference
/// surface points.
inline MeshMetrics mesh_metrics(const TriangleMesh& mesh,
                                const std::vector<Vec3>& reference_points,
                                int n_samples = 5000, uint64_t seed = 13,
                                double threshold_m = 0.05) {
  require(!reference_points.empty(), ErrorKind::InvalidInput,
          "no reference points");
  std::vector<Vec3> samples = sample_mesh_surface(mesh, n_samples, seed);

  MeshMetrics out;
  for (const Vec3& p : samples)
    out.accuracy_cm += detail::nearest_dist(p, reference_points);
  out.accuracy_cm = out.accuracy_cm / samples.size() * 100.0;

  long within = 0;
  for (const Vec3& p : reference_points) {
    double d = detail::nearest_dist(p, samples);
    out.completion_cm += d;
    if (d < threshold_m) ++within;
  }
  out.completion_cm = out.completion_cm / reference_points.size() * 100.0;
  out.completion_ratio_pct =
      100.0 * static_cast<double>(within) / reference_points.size();
  return out;
}

}  // namespace qslam
