#include <gtest/gtest.h>

#include <cmath>

#include "qslam/depth_rectify.hpp"
#include "qslam/rng.hpp"

using namespace qslam;

namespace {

CameraIntrinsics test_camera() {
  CameraIntrinsics cam;
  cam.width = 64;
  cam.height = 48;
  cam.fx = 60.0;
  cam.fy = 60.0;
  cam.cx = 31.5;
  cam.cy = 23.5;
  return cam;
}

// Unit sphere centered at (0, 0, 1.2), well in front of the camera.
QuadricCoefficients front_sphere() {
  QuadricCoefficients coef;
  coef.cq << 1, 1, 1, 0, 0, 0;
  coef.cl = Vec3(0, 0, -2.4);
  coef.c = 0.25 - 1.44;  // radius 0.5
  return coef;
}

// Depth of the near sphere intersection along the pixel ray, z coordinate.
double sphere_ray_depth(const CameraIntrinsics& cam, double u, double v) {
  Vec3 r((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  // |z r - c|^2 = R^2 with c = (0,0,1.2)
  double a = r.squaredNorm();
  double b = -2.0 * 1.2 * r.z();
  double c0 = 1.44 - 0.25;
  double disc = b * b - 4 * a * c0;
  if (disc < 0) return 0.0;
  return (-b - std::sqrt(disc)) / (2 * a);
}

TEST(SolveQuadratic, KnownRootsAndStability) {
  double r0 = 0, r1 = 0;
  // (z - 2)(z - 5) = z^2 - 7z + 10
  int n = detail::solve_quadratic(1.0, -7.0, 10.0, r0, r1);
  ASSERT_EQ(n, 2);
  EXPECT_NEAR(std::min(r0, r1), 2.0, 1e-12);
  EXPECT_NEAR(std::max(r0, r1), 5.0, 1e-12);

  // Catastrophic-cancellation regime: tiny root next to a huge one.
  n = detail::solve_quadratic(1.0, -1e8, 1.0, r0, r1);
  ASSERT_EQ(n, 2);
  EXPECT_NEAR(std::min(r0, r1), 1e-8, 1e-16);

  // Linear case.
  n = detail::solve_quadratic(0.0, 2.0, -3.0, r0, r1);
  ASSERT_EQ(n, 1);
  EXPECT_NEAR(r0, 1.5, 1e-12);

  // No real roots.
  EXPECT_EQ(detail::solve_quadratic(1.0, 0.0, 1.0, r0, r1), 0);
}

TEST(SolveDepth, FixedXYPointSatisfiesSurface) {
  CameraIntrinsics cam = test_camera();
  QuadricCoefficients coef = front_sphere();
  double u = 33, v = 21;
  double gt = sphere_ray_depth(cam, u, v);
  ASSERT_GT(gt, 0.0);
  double d0 = gt * 1.04;

  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::FixedXY;
  double z = solve_depth(coef, cam, u, v, d0, cfg.mode, cfg.max_rel_correction);

  // X and Y stay pinned at the noisy backprojection; z solves f = 0 there.
  double X = (u - cam.cx) / cam.fx * d0;
  double Y = (v - cam.cy) / cam.fy * d0;
  EXPECT_LT(std::abs(evaluate_quadric(coef, Vec3(X, Y, z))), 1e-10);
  EXPECT_LT(std::abs(z - gt), std::abs(d0 - gt));
}

TEST(SolveDepth, RayModeLandsOnSurfaceExactly) {
  CameraIntrinsics cam = test_camera();
  QuadricCoefficients coef = front_sphere();
  double u = 29, v = 26;
  double gt = sphere_ray_depth(cam, u, v);
  ASSERT_GT(gt, 0.0);

  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  double z = solve_depth(coef, cam, u, v, gt * 0.97, cfg.mode, cfg.max_rel_correction);

  Vec3 r((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  EXPECT_LT(std::abs(evaluate_quadric(coef, z * r)), 1e-10);
  EXPECT_NEAR(z, gt, 1e-10);  // along the ray the root is the true depth
}

TEST(SolveDepth, PicksRootNearestToInput) {
  CameraIntrinsics cam = test_camera();
  QuadricCoefficients coef = front_sphere();
  // Central pixel: ray hits the sphere at z = 0.7 and z = 1.7.
  double u = cam.cx, v = cam.cy;
  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  cfg.max_rel_correction = 0.5;
  EXPECT_NEAR(solve_depth(coef, cam, u, v, 0.72, cfg.mode, cfg.max_rel_correction), 0.7, 1e-9);
  EXPECT_NEAR(solve_depth(coef, cam, u, v, 1.68, cfg.mode, cfg.max_rel_correction), 1.7, 1e-9);
}

TEST(SolveDepth, FallsBackWhenCorrectionTooLarge) {
  CameraIntrinsics cam = test_camera();
  QuadricCoefficients coef = front_sphere();
  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  // Nearest root 0.7 is a 30% move from 1.0: outside the trust region.
  EXPECT_NEAR(solve_depth(coef, cam, cam.cx, cam.cy, 1.0, cfg.mode, cfg.max_rel_correction), 1.0, 1e-12);
}

TEST(SolveDepth, FallsBackWhenNoIntersection) {
  CameraIntrinsics cam = test_camera();
  QuadricCoefficients coef = front_sphere();
  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  // Corner pixel ray misses the sphere entirely.
  double z = solve_depth(coef, cam, 0.0, 0.0, 0.9, cfg.mode, cfg.max_rel_correction);
  EXPECT_NEAR(z, 0.9, 1e-12);
}

struct NoisySphereFrame {
  DepthImage depth;
  DepthImage gt;
  MaskImage mask;
};

NoisySphereFrame make_noisy_sphere_frame(const CameraIntrinsics& cam,
                                         double sigma, uint64_t seed) {
  NoisySphereFrame f;
  f.depth = DepthImage(cam.width, cam.height, 0.0);
  f.gt = DepthImage(cam.width, cam.height, 0.0);
  f.mask = MaskImage(cam.width, cam.height, 0);
  SplitMix64 rng(seed);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      double z = sphere_ray_depth(cam, u, v);
      if (z <= 0) continue;
      f.gt(u, v) = z;
      f.depth(u, v) = z + sigma * rng.gaussian();
      f.mask(u, v) = 1;
    }
  return f;
}

double rmse_vs_gt(const DepthImage& d, const NoisySphereFrame& f) {
  double acc = 0;
  int n = 0;
  for (int v = 0; v < d.height(); ++v)
    for (int u = 0; u < d.width(); ++u)
      if (f.mask(u, v) != 0) {
        double e = d(u, v) - f.gt(u, v);
        acc += e * e;
        ++n;
      }
  return std::sqrt(acc / n);
}

TEST(RectifyFrame, ShrinksNoiseOnQuadricSegment) {
  CameraIntrinsics cam = test_camera();
  NoisySphereFrame f = make_noisy_sphere_frame(cam, 0.004, 21);

  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  cfg.fit.tau_eps = 1e-2;  // noisy fit, loosen the residual gate
  cfg.fit.area_min = 50;

  RectifiedFrame out = rectify_frame(cam, f.depth, f.mask, cfg);
  ASSERT_EQ(out.fits.count(1), 1u);
  EXPECT_TRUE(out.fits.at(1).accepted);

  // Near the silhouette the rays run almost tangent to the surface and a
  // small fit offset turns into a large depth move, so the strong claim is
  // made on transversal pixels and the aggregate only has to improve.
  double se_b = 0, se_a = 0, se_b_int = 0, se_a_int = 0;
  int n = 0, n_int = 0;
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      if (f.mask(u, v) == 0) continue;
      double e0 = f.depth(u, v) - f.gt(u, v);
      double e1 = out.corrected_depth(u, v) - f.gt(u, v);
      se_b += e0 * e0;
      se_a += e1 * e1;
      ++n;
      Vec3 r((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
      Vec3 nrm = (f.gt(u, v) * r - Vec3(0, 0, 1.2)).normalized();
      if (std::abs(r.normalized().dot(nrm)) > 0.5) {
        se_b_int += e0 * e0;
        se_a_int += e1 * e1;
        ++n_int;
      }
    }
  ASSERT_GT(n_int, 500);
  EXPECT_LT(std::sqrt(se_a / n), std::sqrt(se_b / n));
  EXPECT_LT(std::sqrt(se_a_int / n_int), 0.5 * std::sqrt(se_b_int / n_int));

  // Background pixels (invalid depth) stay untouched and unmarked.
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u)
      if (f.mask(u, v) == 0) {
        EXPECT_EQ(out.corrected_depth(u, v), f.depth(u, v));
        EXPECT_EQ(out.correction_mask(u, v), 0);
      }
}

TEST(RectifyFrame, ExactDataIsFixedPoint) {
  CameraIntrinsics cam = test_camera();
  NoisySphereFrame f = make_noisy_sphere_frame(cam, 0.0, 22);

  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  cfg.fit.area_min = 50;

  RectifiedFrame out = rectify_frame(cam, f.gt, f.mask, cfg);
  ASSERT_TRUE(out.fits.at(1).accepted);
  EXPECT_NEAR(out.fits.at(1).r2, 1.0, 1e-9);

  double max_move = 0;
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u)
      if (f.mask(u, v) != 0)
        max_move = std::max(
            max_move, std::abs(out.corrected_depth(u, v) - f.gt(u, v)));
  EXPECT_LT(max_move, 1e-6);
}

TEST(RectifyFrame, R2RejectsUncorrelatedDepth) {
  CameraIntrinsics cam = test_camera();
  DepthImage depth(cam.width, cam.height, 0.0);
  MaskImage mask(cam.width, cam.height, 1);
  SplitMix64 rng(77);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) depth(u, v) = rng.uniform(0.5, 1.5);

  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  cfg.fit.tau_eps = 1e9;  // neutralize the residual gate to isolate R^2
  cfg.fit.area_min = 50;

  RectifiedFrame out = rectify_frame(cam, depth, mask, cfg);
  ASSERT_EQ(out.fits.count(1), 1u);
  EXPECT_LT(out.fits.at(1).r2, 0.85);
  EXPECT_FALSE(out.fits.at(1).accepted);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u)
      EXPECT_EQ(out.corrected_depth(u, v), depth(u, v));
}

TEST(RectifyFrame, SmallSegmentsAreFittedButNotApplied) {
  CameraIntrinsics cam = test_camera();
  NoisySphereFrame f = make_noisy_sphere_frame(cam, 0.002, 30);

  RectifyConfig cfg;
  cfg.mode = SolveDepthMode::Ray;
  cfg.fit.tau_eps = 1e-2;
  cfg.fit.area_min = 100000;  // larger than any segment here

  RectifiedFrame out = rectify_frame(cam, f.depth, f.mask, cfg);
  ASSERT_EQ(out.fits.count(1), 1u);
  EXPECT_TRUE(out.fits.at(1).fit_ok);
  EXPECT_FALSE(out.fits.at(1).accepted);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u)
      EXPECT_EQ(out.corrected_depth(u, v), f.depth(u, v));
}

}  // namespace
