#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "qslam/optim.hpp"

using namespace qslam;

namespace {

TEST(Adam, ConvergesOnQuadraticAndFreezesZeroGradCoords) {
  Eigen::Vector3d x(5.0, 1.0, -3.0);
  Eigen::Vector3d target(1.0, 1.0, 2.0);
  AdamState state;
  state.init(3);
  AdamConfig cfg;
  cfg.lr = 0.05;
  for (int i = 0; i < 800; ++i) {
    Eigen::Vector3d g = x - target;
    g(1) = 0.0;  // this coordinate gets no signal
    ASSERT_TRUE(adam_step(state, cfg, x.data(), g.data(), 3));
  }
  EXPECT_NEAR(x(0), 1.0, 1e-3);
  EXPECT_NEAR(x(2), 2.0, 1e-3);
  EXPECT_EQ(x(1), 1.0);  // bitwise untouched
}

TEST(Adam, SkipsNonFiniteGradients) {
  Eigen::Vector2d x(1.0, 2.0);
  Eigen::Vector2d x_before = x;
  AdamState state;
  state.init(2);
  AdamConfig cfg;
  Eigen::Vector2d g(0.5, std::numeric_limits<double>::quiet_NaN());
  EXPECT_FALSE(adam_step(state, cfg, x.data(), g.data(), 2));
  EXPECT_EQ(x(0), x_before(0));
  EXPECT_EQ(x(1), x_before(1));
  EXPECT_EQ(state.skipped, 1);
  EXPECT_EQ(state.t, 0);

  g(1) = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(adam_step(state, cfg, x.data(), g.data(), 2));
  EXPECT_EQ(state.skipped, 2);
}

TEST(PoseSet, RoundTripsAndRenormalizes) {
  std::vector<Pose> poses(2);
  poses[0].rotation = Eigen::Quaterniond(Eigen::AngleAxisd(0.4, Vec3(1, 2, 3).normalized()));
  poses[0].translation = Vec3(0.1, -0.2, 0.3);
  poses[1].rotation = Eigen::Quaterniond(Eigen::AngleAxisd(-1.1, Vec3(0, 1, 0)));
  poses[1].translation = Vec3(1, 2, 3);

  PoseSet ps = PoseSet::from_poses(poses);
  ASSERT_EQ(ps.n_frames(), 2);
  for (int i = 0; i < 2; ++i) {
    Pose p = ps.pose(i);
    EXPECT_LT((p.translation - poses[i].translation).norm(), 1e-15);
    EXPECT_NEAR(std::abs(p.rotation.dot(poses[i].rotation)), 1.0, 1e-15);
  }

  // Scale a raw quaternion; reads stay normalized, renormalize fixes storage.
  for (int j = 0; j < 4; ++j) ps.params[j] *= 3.0;
  EXPECT_NEAR(ps.pose(0).rotation.norm(), 1.0, 1e-15);
  ps.renormalize();
  double n = 0;
  for (int j = 0; j < 4; ++j) n += ps.params[j] * ps.params[j];
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
}

TEST(RotationGrad, MatchesFiniteDifferences) {
  SplitMix64 rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    double q[4];
    for (double& qi : q) qi = rng.uniform(-1, 1);
    Vec3 v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    Vec3 g(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));

    auto loss = [&](const double* qr) {
      Eigen::Quaterniond qq(qr[3], qr[0], qr[1], qr[2]);
      return g.dot(qq.normalized() * v);
    };

    double analytic[4] = {0, 0, 0, 0};
    rotation_grad(q, v, g, analytic);

    double h = 1e-6;
    for (int j = 0; j < 4; ++j) {
      double qp[4] = {q[0], q[1], q[2], q[3]};
      double qm[4] = {q[0], q[1], q[2], q[3]};
      qp[j] += h;
      qm[j] -= h;
      double fd = (loss(qp) - loss(qm)) / (2 * h);
      EXPECT_NEAR(analytic[j], fd, 1e-6) << "trial " << trial << " j " << j;
    }
  }
}

TEST(RotationGrad, AccumulatesAcrossCalls) {
  double q[4] = {0.1, -0.2, 0.3, 0.9};
  Vec3 v(0.5, 0.6, -0.7), g(1, 0, 0);
  double once[4] = {0, 0, 0, 0};
  double twice[4] = {0, 0, 0, 0};
  rotation_grad(q, v, g, once);
  rotation_grad(q, v, g, twice);
  rotation_grad(q, v, g, twice);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(twice[j], 2 * once[j], 1e-14);
}

CameraIntrinsics flow_camera() {
  CameraIntrinsics cam;
  cam.width = 32;
  cam.height = 24;
  cam.fx = 60.0;
  cam.fy = 60.0;
  cam.cx = 15.5;
  cam.cy = 11.5;
  return cam;
}

TEST(ReprojectionFlow, TranslationGivesExpectedPixels) {
  CameraIntrinsics cam = flow_camera();
  DepthImage depth(cam.width, cam.height, 1.0);
  Pose identity;
  EXPECT_NEAR(mean_reprojection_flow(cam, depth, identity, identity), 0.0, 1e-12);

  // Side-step of 0.1 m at depth 1 m: every pixel shifts fx * 0.1 = 6 px.
  Pose shifted;
  shifted.translation = Vec3(0.1, 0, 0);
  EXPECT_NEAR(mean_reprojection_flow(cam, depth, identity, shifted), 6.0, 1e-9);

  // Camera turned away: nothing reprojects.
  Pose behind;
  behind.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(M_PI, Vec3(0, 1, 0)));
  EXPECT_EQ(mean_reprojection_flow(cam, depth, identity, behind), 1e9);
}

TEST(Keyframes, GreedyThresholdOnFlow) {
  CameraIntrinsics cam = flow_camera();
  std::vector<DepthImage> depths(6, DepthImage(cam.width, cam.height, 1.0));
  std::vector<Pose> poses(6);
  for (int i = 0; i < 6; ++i) poses[i].translation = Vec3(0.05 * i, 0, 0);

  // Steps of 3 px per frame against a 4 px threshold: every second frame.
  std::vector<int> kf = select_keyframes(cam, depths, poses, 4.0);
  EXPECT_EQ(kf, (std::vector<int>{0, 2, 4}));

  std::vector<Pose> still(6);
  EXPECT_EQ(select_keyframes(cam, depths, still, 4.0), std::vector<int>{0});
}

CameraIntrinsics tiny_camera() {
  CameraIntrinsics cam;
  cam.width = 16;
  cam.height = 12;
  cam.fx = 15.0;
  cam.fy = 15.0;
  cam.cx = 7.5;
  cam.cy = 5.5;
  return cam;
}

TrainingFrame flat_frame(const CameraIntrinsics& cam, int index, double z,
                         const Vec3& color) {
  TrainingFrame f;
  f.frame_index = index;
  f.rgb = ColorImage(cam.width, cam.height, color);
  f.guide_depth = DepthImage(cam.width, cam.height, z);
  f.target_depth = DepthImage(cam.width, cam.height, z);
  f.mask = MaskImage(cam.width, cam.height, 1);
  f.segment_epsilon[1] = 5e-5;
  return f;
}

TransformerConfig small_model_config() {
  TransformerConfig cfg;
  cfg.feat_dim = 8;
  cfg.sem_dim = 4;
  cfg.n_heads = 2;
  cfg.pe_bands = 2;
  cfg.n_classes = 3;
  cfg.n_segment_ids = 4;
  cfg.max_rays = 8;
  cfg.pos_scale = 2.0;
  cfg.t_scale = 4.0;
  return cfg;
}

JointOptConfig small_joint_config() {
  JointOptConfig cfg;
  cfg.iterations = 4;
  cfg.map_steps = 2;
  cfg.rays_per_batch = 8;
  cfg.lr_map = 5e-3;
  cfg.lr_pose = 1e-4;
  cfg.seed = 3;
  cfg.sampler.n_stratified = 4;
  cfg.sampler.n_depth_guided = 2;
  cfg.sampler.d_near = 0.1;
  cfg.sampler.d_far = 4.0;
  return cfg;
}

TEST(BuildTransformerInput, WorldGeometryFollowsPoses) {
  CameraIntrinsics cam = tiny_camera();
  TrainingFrame f0 = flat_frame(cam, 0, 1.5, Vec3(0.5, 0.5, 0.5));
  std::vector<Ray> rays = {make_ray(cam, f0, 3, 4), make_ray(cam, f0, 12, 7)};
  rays[1].frame_index = 1;

  std::vector<Pose> poses(2);
  poses[1].rotation =
      Eigen::Quaterniond(Eigen::AngleAxisd(0.3, Vec3(0, 0, 1)));
  poses[1].translation = Vec3(0.2, -0.1, 0.4);

  SamplerConfig sampler;
  sampler.n_stratified = 4;
  sampler.n_depth_guided = 2;
  sampler.d_near = 0.1;
  sampler.d_far = 4.0;

  std::vector<RaySamples> samples;
  TransformerInput in =
      build_transformer_input(cam, rays, poses, sampler, nullptr, samples);
  ASSERT_EQ(in.B, 2);
  ASSERT_EQ(in.N, 6);

  for (int b = 0; b < 2; ++b) {
    const Pose& pose = poses[rays[b].frame_index];
    Vec3 dir = pose.rotation * rays[b].dir_cam;
    EXPECT_LT((in.view_dirs.row(b).transpose() - dir).norm(), 1e-14);
    EXPECT_NEAR(in.view_dirs.row(b).norm(), 1.0, 1e-12);
    for (int n = 0; n < in.N; ++n) {
      Vec3 expect = pose.translation + in.t_values(b, n) * dir;
      EXPECT_LT((in.points.row(b * in.N + n).transpose() - expect).norm(), 1e-13);
    }
  }
  EXPECT_NEAR(in.pixels_norm(0, 0), 3.0 / 15.0, 1e-15);
  EXPECT_NEAR(in.pixels_norm(0, 1), 4.0 / 11.0, 1e-15);
}

TEST(BuildTransformerInput, MixedGuidanceIsRejected) {
  CameraIntrinsics cam = tiny_camera();
  TrainingFrame f0 = flat_frame(cam, 0, 1.5, Vec3(0.5, 0.5, 0.5));
  std::vector<Ray> rays = {make_ray(cam, f0, 3, 4), make_ray(cam, f0, 5, 6)};
  rays[1].guide_depth = 0.0;  // this one would get fewer samples

  SamplerConfig sampler;
  sampler.n_stratified = 4;
  sampler.n_depth_guided = 2;

  std::vector<Pose> poses(1);
  std::vector<RaySamples> samples;
  EXPECT_THROW(
      build_transformer_input(cam, rays, poses, sampler, nullptr, samples),
      Error);
}

TEST(JointOptimize, LossDropsAndTraceIsComplete) {
  CameraIntrinsics cam = tiny_camera();
  std::vector<TrainingFrame> frames = {
      flat_frame(cam, 0, 1.2, Vec3(0.8, 0.3, 0.2)),
      flat_frame(cam, 1, 1.4, Vec3(0.2, 0.7, 0.4))};
  std::vector<Pose> init(2);
  init[1].translation = Vec3(0.05, 0, 0);

  TransformerParams params(small_model_config(), 7);
  JointOptConfig cfg = small_joint_config();
  cfg.iterations = 8;

  JointOptResult res = joint_optimize(cam, frames, init, params, cfg);
  ASSERT_EQ(res.trace.size(), 8u);
  EXPECT_FALSE(res.diverged);
  EXPECT_LT(res.final_loss, res.initial_loss);
  for (size_t i = 0; i < res.trace.size(); ++i) {
    EXPECT_EQ(res.trace[i].iter, static_cast<int>(i));
    EXPECT_GT(res.trace[i].total, 0.0);
    EXPECT_NEAR(res.trace[i].total,
                res.trace[i].l_c + cfg.loss.lambda1 * res.trace[i].l_d +
                    cfg.loss.lambda2 * res.trace[i].l_s,
                1e-12);
    EXPECT_GT(res.trace[i].pose_change, 0.0);
  }
  // Poses moved but stayed sane.
  EXPECT_NEAR(res.poses[0].rotation.norm(), 1.0, 1e-12);
}

TEST(JointOptimize, ZeroPoseLrLeavesPosesBitIdentical) {
  CameraIntrinsics cam = tiny_camera();
  std::vector<TrainingFrame> frames = {
      flat_frame(cam, 0, 1.2, Vec3(0.8, 0.3, 0.2)),
      flat_frame(cam, 1, 1.4, Vec3(0.2, 0.7, 0.4))};
  std::vector<Pose> init(2);
  init[1].rotation = Eigen::Quaterniond(Eigen::AngleAxisd(0.2, Vec3(0, 1, 0)));
  init[1].translation = Vec3(0.05, 0.02, -0.01);

  TransformerParams params(small_model_config(), 7);
  JointOptConfig cfg = small_joint_config();
  cfg.lr_pose = 0.0;

  JointOptResult res = joint_optimize(cam, frames, init, params, cfg);
  ASSERT_EQ(res.poses.size(), init.size());
  for (size_t i = 0; i < init.size(); ++i) {
    Eigen::Quaterniond qi = init[i].rotation.normalized();
    EXPECT_EQ((res.poses[i].translation - init[i].translation).norm(), 0.0);
    EXPECT_EQ((res.poses[i].rotation.coeffs() - qi.coeffs()).norm(), 0.0);
  }
  for (const TraceRow& row : res.trace) EXPECT_EQ(row.pose_change, 0.0);
}

TEST(JointOptimize, DeterministicAcrossRuns) {
  CameraIntrinsics cam = tiny_camera();
  std::vector<TrainingFrame> frames = {
      flat_frame(cam, 0, 1.2, Vec3(0.8, 0.3, 0.2)),
      flat_frame(cam, 1, 1.4, Vec3(0.2, 0.7, 0.4))};
  std::vector<Pose> init(2);
  init[1].translation = Vec3(0.03, -0.02, 0.01);

  JointOptConfig cfg = small_joint_config();
  cfg.sampler.jitter = true;

  TransformerParams p1(small_model_config(), 7);
  JointOptResult r1 = joint_optimize(cam, frames, init, p1, cfg);
  TransformerParams p2(small_model_config(), 7);
  JointOptResult r2 = joint_optimize(cam, frames, init, p2, cfg);

  ASSERT_EQ(r1.trace.size(), r2.trace.size());
  for (size_t i = 0; i < r1.trace.size(); ++i)
    EXPECT_EQ(r1.trace[i].total, r2.trace[i].total);
  EXPECT_EQ(p1.store.values(), p2.store.values());
  for (size_t i = 0; i < r1.poses.size(); ++i) {
    EXPECT_EQ((r1.poses[i].translation - r2.poses[i].translation).norm(), 0.0);
    EXPECT_EQ((r1.poses[i].rotation.coeffs() - r2.poses[i].rotation.coeffs()).norm(),
              0.0);
  }
}

TEST(JointOptimize, RejectsOversizedBatches) {
  CameraIntrinsics cam = tiny_camera();
  std::vector<TrainingFrame> frames = {flat_frame(cam, 0, 1.2, Vec3(0.5, 0.5, 0.5))};
  std::vector<Pose> init(1);
  TransformerParams params(small_model_config(), 7);
  JointOptConfig cfg = small_joint_config();
  cfg.rays_per_batch = params.cfg.max_rays + 1;
  EXPECT_THROW(joint_optimize(cam, frames, init, params, cfg), Error);
}

}  // namespace
