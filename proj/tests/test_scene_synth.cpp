#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "qslam/scene_synth.hpp"

using namespace qslam;

namespace {

CameraIntrinsics small_camera() {
  CameraIntrinsics cam;
  cam.width = 48;
  cam.height = 36;
  cam.fx = 45.0;
  cam.fy = 45.0;
  cam.cx = 23.5;
  cam.cy = 17.5;
  return cam;
}

TEST(RayQuadric, SphereRootsMatchAnalytic) {
  QuadricPrimitive prim =
      make_sphere(Vec3(0, 0, 2.0), 0.5, Eigen::Vector3d(1, 0, 0), 1);
  double t = 0;
  ASSERT_TRUE(ray_quadric_intersect(prim, Vec3::Zero(), Vec3(0, 0, 1), t));
  EXPECT_NEAR(t, 1.5, 1e-12);  // the near root, not the exit at 2.5

  // From the center the only positive root is the far-side exit.
  ASSERT_TRUE(ray_quadric_intersect(prim, Vec3(0, 0, 2.0), Vec3(0, 0, 1), t));
  EXPECT_NEAR(t, 0.5, 1e-12);

  // Tangent ray: offset by the radius in x.
  ASSERT_TRUE(ray_quadric_intersect(prim, Vec3(0.5, 0, 0), Vec3(0, 0, 1), t));
  EXPECT_NEAR(t, 2.0, 1e-6);

  // Miss.
  EXPECT_FALSE(ray_quadric_intersect(prim, Vec3(2, 0, 0), Vec3(0, 0, 1), t));
}

TEST(RayQuadric, PlaneIsLinearCase) {
  QuadricPrimitive prim =
      make_plane(Vec3(0, 0, 1.75), Vec3(0, 0, 1), Vec3(10, 10, 0.01),
                 Eigen::Vector3d(0.5, 0.5, 0.5), 2);
  double t = 0;
  ASSERT_TRUE(ray_quadric_intersect(prim, Vec3(0.3, -0.2, 0), Vec3(0, 0, 1), t));
  EXPECT_NEAR(t, 1.75, 1e-12);

  // Outside the clipped extent the hit is rejected.
  EXPECT_FALSE(
      ray_quadric_intersect(prim, Vec3(11.0, 0, 0), Vec3(0, 0, 1), t));
}

TEST(RayQuadric, ValidRegionClipsUnboundedSurfaces) {
  QuadricPrimitive prim = make_paraboloid(Vec3(0, 0, 0), 4.0, 4.0, 0.08,
                                          Eigen::Vector3d(0, 1, 0), 3);
  double t = 0;
  // Straight down onto the vertex.
  ASSERT_TRUE(ray_quadric_intersect(prim, Vec3(0, 0, 1), Vec3(0, 0, -1), t));
  EXPECT_NEAR(t, 1.0, 1e-9);
  // Far out in x the surface is above the clip height.
  EXPECT_FALSE(ray_quadric_intersect(prim, Vec3(1.0, 0, 1), Vec3(0, 0, -1), t));
}

TEST(LookatPose, MapsOpticalAxisToTarget) {
  Vec3 eye(1.0, -0.5, 1.4);
  Vec3 target(0.2, 0.1, 0.3);
  Pose pose = make_lookat_pose(eye, target);
  EXPECT_LT((pose.translation - eye).norm(), 1e-12);
  double dist = (target - eye).norm();
  // A camera-frame point straight ahead at the right distance hits the target.
  EXPECT_LT((pose.apply(Vec3(0, 0, dist)) - target).norm(), 1e-9);
  // Rotation stays orthonormal.
  Mat3 R = pose.rotation_matrix();
  EXPECT_LT((R.transpose() * R - Mat3::Identity()).norm(), 1e-12);
}

TEST(OrbitTrajectory, PosesSitOnCircleAndFaceTarget) {
  Vec3 target(0.3, 0.2, 0.1);
  std::vector<Pose> poses =
      make_orbit_trajectory(6, 0.9, 0.6, target, -0.4, 0.4);
  ASSERT_EQ(poses.size(), 6u);
  for (const Pose& p : poses) {
    Vec3 rel = p.translation - target;
    EXPECT_NEAR(std::hypot(rel.x(), rel.y()), 0.9, 1e-9);
    EXPECT_NEAR(rel.z(), 0.6, 1e-9);
    Vec3 fwd = p.rotation_matrix().col(2);
    EXPECT_GT(fwd.dot((target - p.translation).normalized()), 1.0 - 1e-9);
  }
}

TEST(RenderGroundTruth, DepthAndMaskMatchAnalytic) {
  CameraIntrinsics cam = small_camera();
  SyntheticScene scene;
  scene.primitives.push_back(
      make_sphere(Vec3(0, 0, 1.5), 0.4, Eigen::Vector3d(1, 0, 0), 3));
  Pose identity;

  RenderedView view = render_ground_truth(scene, cam, identity);
  // The principal point is off-grid (cx=23.5); check a pixel near center.
  int u = 24, v = 18;
  Vec3 dir((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  double a = dir.squaredNorm();
  double b = -2.0 * 1.5 * dir.z();
  double c0 = 1.5 * 1.5 - 0.16;
  double t = (-b - std::sqrt(b * b - 4 * a * c0)) / (2 * a);
  ASSERT_EQ(view.mask(u, v), 3);
  EXPECT_NEAR(view.depth(u, v), t, 1e-9);
  EXPECT_LT((view.rgb(u, v) - Eigen::Vector3d(1, 0, 0)).norm(), 1e-12);

  // Far corner looks past the sphere.
  EXPECT_EQ(view.mask(0, 0), 0);
  EXPECT_EQ(view.depth(0, 0), 0.0);
}

TEST(RenderGroundTruth, BackprojectedPixelsLieOnPrimitives) {
  CameraIntrinsics cam = small_camera();
  SyntheticScene scene = default_desk_scene();
  std::vector<Pose> poses =
      make_orbit_trajectory(3, 0.85, 0.7, Vec3(0, 0, 0.25), -0.5, 0.5);

  for (const Pose& pose : poses) {
    RenderedView view = render_ground_truth(scene, cam, pose);
    int checked = 0;
    for (int v = 0; v < cam.height; v += 3)
      for (int u = 0; u < cam.width; u += 3) {
        int id = view.mask(u, v);
        if (id == 0) continue;
        const QuadricPrimitive* prim = nullptr;
        for (const auto& p : scene.primitives)
          if (p.semantic_id == id) prim = &p;
        ASSERT_NE(prim, nullptr);
        Vec3 cam_pt = backproject_pixel(cam, u, v, view.depth(u, v));
        Vec3 world = pose.apply(cam_pt);
        EXPECT_LT(std::abs(evaluate_quadric(prim->coef, world)), 1e-8)
            << "id=" << id << " u=" << u << " v=" << v;
        ++checked;
      }
    EXPECT_GT(checked, 30);
  }
}

TEST(RenderGroundTruth, DeskSceneShowsAllSegments) {
  CameraIntrinsics cam = small_camera();
  SyntheticScene scene = default_desk_scene();
  std::vector<Pose> poses =
      make_orbit_trajectory(4, 0.85, 0.7, Vec3(0, 0, 0.25), -0.5, 0.5);
  std::set<int> seen;
  for (const Pose& pose : poses) {
    RenderedView view = render_ground_truth(scene, cam, pose);
    for (int v = 0; v < cam.height; ++v)
      for (int u = 0; u < cam.width; ++u)
        if (view.mask(u, v) != 0) seen.insert(view.mask(u, v));
  }
  EXPECT_EQ(seen, (std::set<int>{1, 2, 3, 4}));
}

TEST(PerturbDepth, DeterministicAndCalibrated) {
  CameraIntrinsics cam = small_camera();
  DepthImage depth(cam.width, cam.height, 1.0);
  MaskImage mask(cam.width, cam.height, 1);

  NoiseModel noise;
  noise.depth_sigma = 0.01;
  noise.edge_blur_px = 0;
  noise.seed = 99;

  DepthImage a = perturb_depth(depth, mask, noise, 0);
  DepthImage b = perturb_depth(depth, mask, noise, 0);
  DepthImage other_frame = perturb_depth(depth, mask, noise, 1);

  double acc = 0, acc2 = 0;
  int n = 0;
  bool differs = false;
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      EXPECT_EQ(a(u, v), b(u, v));
      if (a(u, v) != other_frame(u, v)) differs = true;
      double e = a(u, v) - 1.0;
      acc += e;
      acc2 += e * e;
      ++n;
    }
  EXPECT_TRUE(differs);
  EXPECT_NEAR(acc / n, 0.0, 4 * noise.depth_sigma / std::sqrt((double)n));
  EXPECT_NEAR(std::sqrt(acc2 / n), noise.depth_sigma, 0.15 * noise.depth_sigma);
}

TEST(PerturbDepth, InvalidPixelsStayInvalid) {
  DepthImage depth(8, 8, 0.0);
  depth(3, 3) = 1.0;
  MaskImage mask(8, 8, 0);
  mask(3, 3) = 1;
  NoiseModel noise;
  noise.depth_sigma = 0.05;
  noise.seed = 5;
  DepthImage out = perturb_depth(depth, mask, noise, 0);
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u)
      if (!(u == 3 && v == 3)) EXPECT_EQ(out(u, v), 0.0);
  EXPECT_NE(out(3, 3), 1.0);
  EXPECT_GT(out(3, 3), 0.0);
}

TEST(PerturbPose, ZeroSigmaIsIdentityAndDrawsAreDeterministic) {
  Pose pose = make_lookat_pose(Vec3(1, 0, 1), Vec3::Zero());

  NoiseModel none;
  none.pose_rot_sigma = 0.0;
  none.pose_trans_sigma = 0.0;
  SplitMix64 rng0(7);
  Pose same = perturb_pose(pose, none, rng0);
  EXPECT_LT((same.translation - pose.translation).norm(), 1e-15);
  EXPECT_LT(std::abs(std::abs(same.rotation.dot(pose.rotation)) - 1.0), 1e-15);

  NoiseModel noise;
  noise.pose_rot_sigma = 0.02;
  noise.pose_trans_sigma = 0.01;
  SplitMix64 r1(123), r2(123);
  Pose p1 = perturb_pose(pose, noise, r1);
  Pose p2 = perturb_pose(pose, noise, r2);
  Pose p3 = perturb_pose(pose, noise, r1);  // continues the first stream
  EXPECT_EQ((p1.translation - p2.translation).norm(), 0.0);
  EXPECT_EQ((p1.rotation.coeffs() - p2.rotation.coeffs()).norm(), 0.0);
  EXPECT_GT((p1.translation - p3.translation).norm(), 0.0);

  // Perturbation size is on the order of the sigmas, not wildly off.
  EXPECT_GT((p1.translation - pose.translation).norm(), 1e-5);
  EXPECT_LT((p1.translation - pose.translation).norm(), 10 * 0.01 * 3);
  EXPECT_NEAR(p1.rotation.norm(), 1.0, 1e-12);
}

}  // namespace
