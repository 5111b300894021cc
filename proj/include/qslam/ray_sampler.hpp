#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "qslam/common.hpp"
#include "qslam/geometry.hpp"
#include "qslam/rng.hpp"

namespace qslam {

/// A training ray. Only camera-frame quantities are stored; world origin
/// and direction are derived from the current pose estimate at evaluation
/// time so pose updates propagate into every replay of the ray.
struct Ray {
  int frame_index = 0;  // index into the trainable pose array
  int u = 0;
  int v = 0;
  Vec3 dir_cam = Vec3(0, 0, 1);  // unit direction in the camera frame
  double guide_depth = 0.0;      // range along the ray, 0 disables guidance
  double gt_depth = 0.0;         // range along the ray
  Vec3 gt_color = Vec3::Zero();
  int segment_id = 0;            // mask id, 0 is background
  double epsilon = -1.0;         // segment fitting error, <= 0 means unfitted
};

/// Depth along the optical axis vs. range along the pixel ray.
inline double z_to_range(const CameraIntrinsics& cam, double u, double v,
                         double z) {
  return z * Vec3((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0).norm();
}

inline double range_to_z(const CameraIntrinsics& cam, double u, double v,
                         double range) {
  return range / Vec3((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0).norm();
}

struct SamplerConfig {
  int n_stratified = 32;
  int n_depth_guided = 16;
  double d_near = 0.1;
  double d_far = 10.0;
  double guide_lo = 0.95;  // guided band is [guide_lo*d, guide_hi*d]
  double guide_hi = 1.05;
  bool jitter = false;     // false: bin midpoints; true: uniform within bins
};

struct RaySamples {
  std::vector<double> t_values;  // strictly increasing
  std::vector<double> deltas;    // deltas[i] = t[i+1]-t[i], last vs d_far
};

namespace detail {

inline void stratified(double lo, double hi, int n, bool jitter,
                       SplitMix64* rng, std::vector<double>& out) {
  double span = (hi - lo) / n;
  for (int i = 0; i < n; ++i) {
    double frac = jitter ? rng->uniform() : 0.5;
    out.push_back(lo + (i + frac) * span);
  }
}

}  // namespace detail

/// Coarse stratified samples over [d_near, d_far], plus a fine band around
/// the guide depth when one is available. Sorted, strictly increasing.
inline RaySamples sample_ray(const SamplerConfig& cfg, double guide_depth,
                             SplitMix64* rng = nullptr) {
  require(cfg.n_stratified > 0, ErrorKind::InvalidInput,
          "need at least one stratified sample");
  require(cfg.d_far > cfg.d_near && cfg.d_near > 0.0, ErrorKind::InvalidInput,
          "bad sampling interval");
  require(!cfg.jitter || rng != nullptr, ErrorKind::InvalidInput,
          "jitter needs an rng");

  RaySamples s;
  s.t_values.reserve(cfg.n_stratified + cfg.n_depth_guided);
  detail::stratified(cfg.d_near, cfg.d_far, cfg.n_stratified, cfg.jitter, rng,
                     s.t_values);
  if (guide_depth > 0.0 && cfg.n_depth_guided > 0) {
    detail::stratified(cfg.guide_lo * guide_depth, cfg.guide_hi * guide_depth,
                       cfg.n_depth_guided, cfg.jitter, rng, s.t_values);
  }
  std::sort(s.t_values.begin(), s.t_values.end());
  for (size_t i = 1; i < s.t_values.size(); ++i) {
    if (s.t_values[i] <= s.t_values[i - 1] + 1e-9)
      s.t_values[i] = s.t_values[i - 1] + 1e-9;
  }

  size_t n = s.t_values.size();
  s.deltas.resize(n);
  for (size_t i = 0; i + 1 < n; ++i) s.deltas[i] = s.t_values[i + 1] - s.t_values[i];
  s.deltas[n - 1] = std::max(0.0, cfg.d_far - s.t_values[n - 1]);
  return s;
}

/// Per-frame training data. Guide depth drives sampling; target depth and
/// color supervise the losses. They are usually the same rectified frame.
struct TrainingFrame {
  int frame_index = 0;
  ColorImage rgb;
  DepthImage guide_depth;
  DepthImage target_depth;
  MaskImage mask;
  std::map<int, double> segment_epsilon;  // fitting error per segment id
};

inline Ray make_ray(const CameraIntrinsics& cam, const TrainingFrame& frame,
                    int u, int v) {
  Ray r;
  r.frame_index = frame.frame_index;
  r.u = u;
  r.v = v;
  Vec3 d((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  r.dir_cam = d.normalized();
  double gz = frame.guide_depth(u, v);
  double tz = frame.target_depth(u, v);
  r.guide_depth = gz > 0.0 ? z_to_range(cam, u, v, gz) : 0.0;
  r.gt_depth = tz > 0.0 ? z_to_range(cam, u, v, tz) : 0.0;
  r.gt_color = frame.rgb(u, v);
  r.segment_id = frame.mask(u, v);
  auto it = frame.segment_epsilon.find(r.segment_id);
  r.epsilon = (it != frame.segment_epsilon.end()) ? it->second : -1.0;
  return r;
}

/// Uniformly draw rays with valid target depth across the given frames.
inline std::vector<Ray> draw_ray_batch(const CameraIntrinsics& cam,
                                       const std::vector<TrainingFrame>& frames,
                                       int batch_size, SplitMix64& rng) {
  require(!frames.empty(), ErrorKind::InvalidInput, "no frames to sample");
  std::vector<Ray> rays;
  rays.reserve(batch_size);
  int guard = 0;
  while (static_cast<int>(rays.size()) < batch_size) {
    require(++guard < batch_size * 1000, ErrorKind::DataError,
            "could not find enough pixels with valid depth");
    const TrainingFrame& f =
        frames[static_cast<size_t>(rng.next() % frames.size())];
    int u = static_cast<int>(rng.next() % static_cast<uint64_t>(cam.width));
    int v = static_cast<int>(rng.next() % static_cast<uint64_t>(cam.height));
    if (f.target_depth(u, v) <= 0.0) continue;
    rays.push_back(make_ray(cam, f, u, v));
  }
  return rays;
}

}  // namespace qslam
