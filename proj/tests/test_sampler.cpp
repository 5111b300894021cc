#include <gtest/gtest.h>

#include <cmath>

#include "qslam/ray_sampler.hpp"
#include "qslam/rng.hpp"

using namespace qslam;

namespace {

SamplerConfig tiny_sampler(int n_s, int n_d) {
  SamplerConfig cfg;
  cfg.n_stratified = n_s;
  cfg.n_depth_guided = n_d;
  return cfg;
}

TEST(SampleRay, StratifiedMidpointsWorkedExample) {
  SamplerConfig cfg = tiny_sampler(4, 0);
  cfg.d_near = 1.0;
  cfg.d_far = 2.0;
  RaySamples s = sample_ray(cfg, 0.0);
  ASSERT_EQ(s.t_values.size(), 4u);
  // Bin midpoints, written as literals: these must be exact doubles.
  EXPECT_EQ(s.t_values[0], 1.125);
  EXPECT_EQ(s.t_values[1], 1.375);
  EXPECT_EQ(s.t_values[2], 1.625);
  EXPECT_EQ(s.t_values[3], 1.875);
  // And bit-exact against the defining formula.
  for (size_t i = 0; i < 4; ++i)
    EXPECT_EQ(s.t_values[i], 1.0 + (i + 0.5) * (2.0 - 1.0) / 4.0);
}

TEST(SampleRay, GuidedBandWorkedExample) {
  // Put the stratified range far past the guide so the first two entries of
  // the sorted merge are the guided band samples.
  SamplerConfig cfg = tiny_sampler(2, 2);
  cfg.d_near = 6.0;
  cfg.d_far = 10.0;
  RaySamples s = sample_ray(cfg, 1.0);
  ASSERT_EQ(s.t_values.size(), 4u);
  EXPECT_EQ(s.t_values[0], 0.95 + 0.5 * (1.05 - 0.95) / 2.0);
  EXPECT_EQ(s.t_values[1], 0.95 + 1.5 * (1.05 - 0.95) / 2.0);
  EXPECT_NEAR(s.t_values[0], 0.975, 1e-15);
  EXPECT_NEAR(s.t_values[1], 1.025, 1e-15);
}

TEST(SampleRay, MergedSortedStrictlyIncreasing) {
  SamplerConfig cfg = tiny_sampler(32, 16);
  RaySamples s = sample_ray(cfg, 3.7);
  ASSERT_EQ(s.t_values.size(), 48u);
  for (size_t i = 1; i < s.t_values.size(); ++i)
    EXPECT_GT(s.t_values[i], s.t_values[i - 1]);
  EXPECT_GE(s.t_values[0], cfg.d_near);
  EXPECT_LE(s.t_values[s.t_values.size() - 1], cfg.d_far);
}

TEST(SampleRay, DeltasAreGapsWithTruncatedTail) {
  SamplerConfig cfg = tiny_sampler(8, 4);
  RaySamples s = sample_ray(cfg, 2.0);
  size_t n = s.t_values.size();
  ASSERT_EQ(s.deltas.size(), n);
  for (size_t i = 0; i + 1 < n; ++i)
    EXPECT_DOUBLE_EQ(s.deltas[i], s.t_values[i + 1] - s.t_values[i]);
  EXPECT_DOUBLE_EQ(s.deltas[n - 1],
                   std::max(0.0, cfg.d_far - s.t_values[n - 1]));
}

TEST(SampleRay, NoGuideDepthMeansNoGuidedSamples) {
  SamplerConfig cfg = tiny_sampler(16, 16);
  RaySamples s = sample_ray(cfg, 0.0);
  EXPECT_EQ(s.t_values.size(), 16u);
  RaySamples s2 = sample_ray(cfg, -1.0);
  EXPECT_EQ(s2.t_values.size(), 16u);
}

TEST(SampleRay, JitterStaysInsideBins) {
  SamplerConfig cfg = tiny_sampler(16, 8);
  cfg.jitter = true;
  SplitMix64 rng(42);
  RaySamples s = sample_ray(cfg, 1.5, &rng);
  ASSERT_EQ(s.t_values.size(), 24u);
  for (size_t i = 1; i < s.t_values.size(); ++i)
    EXPECT_GT(s.t_values[i], s.t_values[i - 1]);

  // Re-running with an identically seeded stream reproduces the draw.
  SplitMix64 rng2(42);
  RaySamples s2 = sample_ray(cfg, 1.5, &rng2);
  for (size_t i = 0; i < s.t_values.size(); ++i)
    EXPECT_EQ(s.t_values[i], s2.t_values[i]);

  // Stratified samples are spread across the range, one per bin.
  double w = (cfg.d_far - cfg.d_near) / cfg.n_stratified;
  SplitMix64 rng3(42);
  RaySamples sg = sample_ray(cfg, 0.0, &rng3);
  ASSERT_EQ(sg.t_values.size(), 16u);
  for (size_t i = 0; i < 16; ++i) {
    EXPECT_GE(sg.t_values[i], cfg.d_near + i * w);
    EXPECT_LE(sg.t_values[i], cfg.d_near + (i + 1) * w);
  }
}

TEST(RangeConversion, RoundTripsThroughUnitRay) {
  CameraIntrinsics cam;
  cam.width = 64;
  cam.height = 48;
  cam.fx = 55.0;
  cam.fy = 52.0;
  cam.cx = 31.5;
  cam.cy = 23.5;
  for (double u : {0.0, 17.0, 63.0})
    for (double v : {0.0, 23.0, 47.0}) {
      double z = 1.3;
      double r = z_to_range(cam, u, v, z);
      EXPECT_GE(r, z);  // range along the ray is never shorter than depth
      EXPECT_NEAR(range_to_z(cam, u, v, r), z, 1e-12);
    }
}

TrainingFrame make_training_frame(const CameraIntrinsics& cam, int index) {
  TrainingFrame f;
  f.frame_index = index;
  f.rgb = ColorImage(cam.width, cam.height, Vec3(0.5, 0.25, 0.75));
  f.guide_depth = DepthImage(cam.width, cam.height, 1.2);
  f.target_depth = DepthImage(cam.width, cam.height, 1.2);
  f.mask = MaskImage(cam.width, cam.height, 2);
  f.segment_epsilon[2] = 3e-5;
  return f;
}

TEST(MakeRay, CarriesDepthAsRangeAndLooksUpEpsilon) {
  CameraIntrinsics cam;
  cam.width = 32;
  cam.height = 24;
  cam.fx = 30.0;
  cam.fy = 30.0;
  cam.cx = 15.5;
  cam.cy = 11.5;
  TrainingFrame f = make_training_frame(cam, 4);

  Ray ray = make_ray(cam, f, 7, 9);
  EXPECT_EQ(ray.frame_index, 4);
  EXPECT_EQ(ray.segment_id, 2);
  EXPECT_DOUBLE_EQ(ray.epsilon, 3e-5);
  EXPECT_NEAR(ray.dir_cam.norm(), 1.0, 1e-12);
  EXPECT_NEAR(ray.gt_depth, z_to_range(cam, 7, 9, 1.2), 1e-12);
  EXPECT_NEAR(ray.guide_depth, z_to_range(cam, 7, 9, 1.2), 1e-12);
  EXPECT_LT((ray.gt_color - Vec3(0.5, 0.25, 0.75)).norm(), 1e-15);

  // Unknown segment id: epsilon reports as unfitted.
  f.mask(7, 9) = 5;
  Ray ray2 = make_ray(cam, f, 7, 9);
  EXPECT_LT(ray2.epsilon, 0.0);
}

TEST(DrawRayBatch, DeterministicAndSkipsInvalidPixels) {
  CameraIntrinsics cam;
  cam.width = 16;
  cam.height = 12;
  cam.fx = 15.0;
  cam.fy = 15.0;
  cam.cx = 7.5;
  cam.cy = 5.5;
  std::vector<TrainingFrame> frames;
  frames.push_back(make_training_frame(cam, 0));
  frames.push_back(make_training_frame(cam, 1));
  // Punch invalid holes in frame 0.
  for (int u = 0; u < 8; ++u) frames[0].target_depth(u, 3) = 0.0;

  SplitMix64 rng_a = stream_rng(9, 100);
  std::vector<Ray> batch_a = draw_ray_batch(cam, frames, 40, rng_a);
  SplitMix64 rng_b = stream_rng(9, 100);
  std::vector<Ray> batch_b = draw_ray_batch(cam, frames, 40, rng_b);

  ASSERT_EQ(batch_a.size(), 40u);
  ASSERT_EQ(batch_b.size(), 40u);
  for (size_t i = 0; i < batch_a.size(); ++i) {
    EXPECT_EQ(batch_a[i].frame_index, batch_b[i].frame_index);
    EXPECT_EQ(batch_a[i].u, batch_b[i].u);
    EXPECT_EQ(batch_a[i].v, batch_b[i].v);
    EXPECT_GT(batch_a[i].gt_depth, 0.0);
  }
}

}  // namespace
