#pragma once

#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "qslam/common.hpp"
#include "qslam/image.hpp"

namespace qslam {

struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  void validate() const {
    require(fx > 0.0 && fy > 0.0, ErrorKind::InvalidInput,
            "focal lengths must be positive");
    require(width > 0 && height > 0, ErrorKind::InvalidInput,
            "image size must be positive");
  }
};

/// Camera-to-world rigid transform: p_world = R * p_cam + t.
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.conjugate();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  /// this ∘ other: apply `other` first, then `this`.
  Pose compose(const Pose& other) const {
    Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }
};

struct Frame {
  int frame_id = 0;
  Pose pose;  // camera to world
  ColorImage rgb;
  DepthImage depth;
  MaskImage mask;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;  // optional, empty or same length as points
};

/// Backproject pixel (u, v) at depth z (camera-frame Z, meters) to a
/// camera-frame point.
inline Vec3 backproject_pixel(const CameraIntrinsics& cam, double u, double v,
                              double z) {
  return Vec3((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z);
}

/// Project a camera-frame point to pixel coordinates. Returns false when
/// the point is at or behind the camera plane.
inline bool project_point(const CameraIntrinsics& cam, const Vec3& p, double& u,
                          double& v) {
  if (p.z() <= 1e-12) return false;
  u = cam.fx * p.x() / p.z() + cam.cx;
  v = cam.fy * p.y() / p.z() + cam.cy;
  return true;
}

/// Collect camera-frame points for every valid depth pixel carrying the
/// given segment id.
inline PointCloud backproject_segment(const CameraIntrinsics& cam,
                                      const DepthImage& depth,
                                      const MaskImage& mask, int segment_id) {
  require(depth.width() == mask.width() && depth.height() == mask.height(),
          ErrorKind::InvalidInput, "depth/mask size mismatch");
  PointCloud cloud;
  for (int v = 0; v < depth.height(); ++v) {
    for (int u = 0; u < depth.width(); ++u) {
      if (mask(u, v) != segment_id) continue;
      double z = depth(u, v);
      if (z <= 0.0) continue;
      cloud.points.push_back(backproject_pixel(cam, u, v, z));
    }
  }
  return cloud;
}

}  // namespace qslam
