#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "qslam/common.hpp"
#include "qslam/geometry.hpp"
#include "qslam/image.hpp"
#include "qslam/quadric.hpp"
#include "qslam/rng.hpp"

namespace qslam {

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  bool contains(const Vec3& p, double tol = 1e-9) const {
    return p.x() >= min.x() - tol && p.x() <= max.x() + tol &&
           p.y() >= min.y() - tol && p.y() <= max.y() + tol &&
           p.z() >= min.z() - tol && p.z() <= max.z() + tol;
  }
};

/// One surface of the synthetic scene: a quadric in world coordinates,
/// clipped to an axis-aligned region so unbounded surfaces stay desk-sized.
struct QuadricPrimitive {
  QuadricCoefficients coef;
  Eigen::Vector3d color = Eigen::Vector3d(0.5, 0.5, 0.5);
  int semantic_id = 1;  // 0 is reserved for background
  Aabb valid_region;
};

struct SyntheticScene {
  std::vector<QuadricPrimitive> primitives;
};

struct NoiseModel {
  double depth_sigma = 0.0;      // additive Gaussian on depth, meters
  double edge_blur_px = 0.0;     // radius of the corrupted band at mask edges
  double pose_rot_sigma = 0.0;   // radians
  double pose_trans_sigma = 0.0; // meters
  uint64_t seed = 1;
};

/// Smallest t > 0 where origin + t*dir lies on the quadric inside its
/// valid region. dir need not be unit length; t is in units of |dir|.
inline bool ray_quadric_intersect(const QuadricPrimitive& prim,
                                  const Vec3& origin, const Vec3& dir,
                                  double& t_out) {
  // f(o + t d) expands to a quadratic in t via the symmetric matrix form.
  const Vec6& cq = prim.coef.cq;
  Mat3 Q;
  Q << cq(0), 0.5 * cq(3), 0.5 * cq(5),
       0.5 * cq(3), cq(1), 0.5 * cq(4),
       0.5 * cq(5), 0.5 * cq(4), cq(2);
  double a = dir.dot(Q * dir);
  double b = 2.0 * origin.dot(Q * dir) + prim.coef.cl.dot(dir);
  double c0 = origin.dot(Q * origin) + prim.coef.cl.dot(origin) - prim.coef.c;

  double roots[2];
  int n = 0;
  if (std::abs(a) < 1e-14) {
    if (std::abs(b) < 1e-14) return false;
    roots[n++] = -c0 / b;
  } else {
    double disc = b * b - 4.0 * a * c0;
    if (disc < 0.0) return false;
    double sq = std::sqrt(disc);
    double q = (b >= 0.0) ? -0.5 * (b + sq) : -0.5 * (b - sq);
    if (std::abs(q) < 1e-300) {
      roots[n++] = -b / (2.0 * a);
    } else {
      roots[n++] = q / a;
      if (sq > 0.0) roots[n++] = c0 / q;
    }
  }

  std::sort(roots, roots + n);
  for (int i = 0; i < n; ++i) {
    if (roots[i] <= 1e-9) continue;
    if (prim.valid_region.contains(origin + roots[i] * dir)) {
      t_out = roots[i];
      return true;
    }
  }
  return false;
}

struct RenderedView {
  ColorImage rgb;
  DepthImage depth;  // camera-frame Z, 0 on miss
  MaskImage mask;    // semantic id of the nearest primitive, 0 on miss
};

/// Exact render: per-pixel nearest quadric intersection. Rays pass through
/// integer pixel coordinates so backprojecting the depth map reproduces
/// surface points exactly.
inline RenderedView render_ground_truth(const SyntheticScene& scene,
                                        const CameraIntrinsics& cam,
                                        const Pose& pose) {
  cam.validate();
  RenderedView view;
  view.rgb = ColorImage(cam.width, cam.height, Eigen::Vector3d::Zero());
  view.depth = DepthImage(cam.width, cam.height, 0.0);
  view.mask = MaskImage(cam.width, cam.height, 0);

  Mat3 R = pose.rotation_matrix();
  for (int v = 0; v < cam.height; ++v) {
    for (int u = 0; u < cam.width; ++u) {
      // Unit-Z camera ray: the ray parameter equals camera-frame depth.
      Vec3 dir_cam((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
      Vec3 dir = R * dir_cam;
      double best_t = 0.0;
      const QuadricPrimitive* best = nullptr;
      for (const QuadricPrimitive& prim : scene.primitives) {
        double t;
        if (!ray_quadric_intersect(prim, pose.translation, dir, t)) continue;
        if (!best || t < best_t) {
          best_t = t;
          best = &prim;
        }
      }
      if (best) {
        view.depth(u, v) = best_t;
        view.mask(u, v) = best->semantic_id;
        view.rgb(u, v) = best->color;
      }
    }
  }
  return view;
}

/// Additive Gaussian depth noise, with a wider uniform corruption in a band
/// around mask boundaries to mimic sensor bleed at object edges. Each pixel
/// draws from its own hashed stream, so results do not depend on traversal
/// order.
inline DepthImage perturb_depth(const DepthImage& depth, const MaskImage& mask,
                                const NoiseModel& noise, int frame_id) {
  require(depth.width() == mask.width() && depth.height() == mask.height(),
          ErrorKind::InvalidInput, "depth/mask size mismatch");
  DepthImage out = depth;
  if (noise.depth_sigma <= 0.0) return out;

  int r = static_cast<int>(std::ceil(noise.edge_blur_px));
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      double z = depth(x, y);
      if (z <= 0.0) continue;
      uint64_t stream = (static_cast<uint64_t>(frame_id) << 40) ^
                        (static_cast<uint64_t>(y) << 20) ^
                        static_cast<uint64_t>(x);
      SplitMix64 rng = stream_rng(noise.seed, stream);
      double zn = z + noise.depth_sigma * rng.gaussian();

      bool edge = false;
      if (r > 0) {
        int id = mask(x, y);
        for (int dy = -r; dy <= r && !edge; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            int nx = x + dx, ny = y + dy;
            if (!mask.contains(nx, ny) || mask(nx, ny) != id) {
              edge = true;
              break;
            }
          }
        }
      }
      if (edge) zn += rng.uniform(-5.0 * noise.depth_sigma, 5.0 * noise.depth_sigma);
      out(x, y) = std::max(zn, 1e-4);
    }
  }
  return out;
}

/// Right-multiply a small random rotation and add Gaussian translation
/// noise. Draws: 3 gaussians (axis), 1 gaussian (angle), 3 gaussians
/// (translation), in that order.
inline Pose perturb_pose(const Pose& pose, const NoiseModel& noise,
                         SplitMix64& rng) {
  Vec3 axis(rng.gaussian(), rng.gaussian(), rng.gaussian());
  double angle = std::abs(rng.gaussian()) * noise.pose_rot_sigma;
  Vec3 dt(rng.gaussian(), rng.gaussian(), rng.gaussian());

  Pose out = pose;
  if (axis.norm() > 1e-12 && angle > 0.0) {
    Eigen::AngleAxisd aa(angle, axis.normalized());
    out.rotation = (pose.rotation * Eigen::Quaterniond(aa)).normalized();
  }
  out.translation += noise.pose_trans_sigma * dt;
  return out;
}

// ---- scene builders ----

inline QuadricPrimitive make_sphere(const Vec3& center, double radius,
                                    const Eigen::Vector3d& color, int id) {
  QuadricPrimitive p;
  p.coef.cq << 1, 1, 1, 0, 0, 0;
  p.coef.cl = -2.0 * center;
  p.coef.c = radius * radius - center.squaredNorm();
  p.color = color;
  p.semantic_id = id;
  p.valid_region.min = center - Vec3::Constant(radius * 1.01);
  p.valid_region.max = center + Vec3::Constant(radius * 1.01);
  return p;
}

inline QuadricPrimitive make_ellipsoid(const Vec3& center, const Vec3& semi,
                                       const Eigen::Vector3d& color, int id) {
  require(semi.minCoeff() > 0.0, ErrorKind::InvalidInput,
          "ellipsoid semi-axes must be positive");
  QuadricPrimitive p;
  Vec3 inv2(1.0 / (semi.x() * semi.x()), 1.0 / (semi.y() * semi.y()),
            1.0 / (semi.z() * semi.z()));
  p.coef.cq << inv2.x(), inv2.y(), inv2.z(), 0, 0, 0;
  p.coef.cl = -2.0 * inv2.cwiseProduct(center);
  p.coef.c = 1.0 - center.cwiseProduct(center).dot(inv2);
  p.color = color;
  p.semantic_id = id;
  p.valid_region.min = center - semi * 1.01;
  p.valid_region.max = center + semi * 1.01;
  return p;
}

/// z = vertex.z + kx (x - vertex.x)^2 + ky (y - vertex.y)^2, clipped to
/// height `h` above the vertex. ky < 0 gives a saddle.
inline QuadricPrimitive make_paraboloid(const Vec3& vertex, double kx,
                                        double ky, double h,
                                        const Eigen::Vector3d& color, int id) {
  QuadricPrimitive p;
  p.coef.cq << kx, ky, 0, 0, 0, 0;
  p.coef.cl = Vec3(-2.0 * kx * vertex.x(), -2.0 * ky * vertex.y(), -1.0);
  p.coef.c = -(kx * vertex.x() * vertex.x() + ky * vertex.y() * vertex.y() +
               vertex.z());
  p.color = color;
  p.semantic_id = id;
  double rx = std::sqrt(std::abs(h / (kx != 0.0 ? kx : 1.0)));
  double ry = std::sqrt(std::abs(h / (ky != 0.0 ? ky : 1.0)));
  p.valid_region.min = vertex - Vec3(rx, ry, (ky < 0.0 || kx < 0.0) ? h : 0.0);
  p.valid_region.max = vertex + Vec3(rx, ry, h);
  return p;
}

/// Plane n . x = n . point, clipped to half-extents. cq stays zero; the
/// intersection code handles the linear case.
inline QuadricPrimitive make_plane(const Vec3& point, const Vec3& normal,
                                   const Vec3& half_extent,
                                   const Eigen::Vector3d& color, int id) {
  QuadricPrimitive p;
  p.coef.cl = normal.normalized();
  p.coef.c = p.coef.cl.dot(point);
  p.color = color;
  p.semantic_id = id;
  p.valid_region.min = point - half_extent;
  p.valid_region.max = point + half_extent;
  return p;
}

/// Desk-scale test scene: a tabletop plane with a sphere, an ellipsoid and
/// a shallow paraboloid cap resting on it. World z is up.
inline SyntheticScene default_desk_scene() {
  SyntheticScene scene;
  scene.primitives.push_back(make_plane(
      Vec3(0, 0, 0), Vec3(0, 0, 1), Vec3(0.5, 0.5, 0.002),
      Eigen::Vector3d(0.45, 0.32, 0.22), 1));
  scene.primitives.push_back(make_sphere(
      Vec3(0.15, 0.10, 0.08), 0.08, Eigen::Vector3d(0.85, 0.20, 0.15), 2));
  scene.primitives.push_back(make_ellipsoid(
      Vec3(-0.18, 0.02, 0.06), Vec3(0.12, 0.08, 0.06),
      Eigen::Vector3d(0.15, 0.55, 0.85), 3));
  scene.primitives.push_back(make_paraboloid(
      Vec3(0.02, -0.20, 0.0), 4.0, 4.0, 0.08,
      Eigen::Vector3d(0.25, 0.75, 0.30), 4));
  return scene;
}

/// Camera-to-world pose looking from `eye` toward `target`, image x right
/// and image y down with respect to world-up.
inline Pose make_lookat_pose(const Vec3& eye, const Vec3& target,
                             const Vec3& up = Vec3(0, 0, 1)) {
  Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  require(x.norm() > 1e-9, ErrorKind::InvalidInput,
          "look direction is parallel to up");
  x.normalize();
  Vec3 y = z.cross(x);
  Mat3 R;
  R.col(0) = x;
  R.col(1) = y;
  R.col(2) = z;
  Pose p;
  p.rotation = Eigen::Quaterniond(R).normalized();
  p.translation = eye;
  return p;
}

/// Poses along a circular arc around `target` at the given radius and
/// height, spanning [angle0, angle1].
inline std::vector<Pose> make_orbit_trajectory(int n_frames, double radius,
                                               double height,
                                               const Vec3& target = Vec3::Zero(),
                                               double angle0 = 0.0,
                                               double angle1 = 0.6) {
  require(n_frames >= 1, ErrorKind::InvalidInput, "need at least one frame");
  std::vector<Pose> poses;
  for (int i = 0; i < n_frames; ++i) {
    double s = (n_frames == 1) ? 0.0 : static_cast<double>(i) / (n_frames - 1);
    double a = angle0 + s * (angle1 - angle0);
    Vec3 eye = target + Vec3(radius * std::cos(a), radius * std::sin(a), height);
    poses.push_back(make_lookat_pose(eye, target));
  }
  return poses;
}

}  // namespace qslam
