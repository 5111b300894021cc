#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "qslam/common.hpp"
#include "qslam/geometry.hpp"
#include "qslam/ray_sampler.hpp"
#include "qslam/render.hpp"
#include "qslam/transformer.hpp"

namespace qslam {

// ---- Adam ----

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m, v;
  long t = 0;
  int skipped = 0;  // steps dropped because of non-finite gradients

  void init(size_t n) {
    m = Eigen::VectorXd::Zero(static_cast<long>(n));
    v = Eigen::VectorXd::Zero(static_cast<long>(n));
    t = 0;
    skipped = 0;
  }
};

/// One bias-corrected Adam update. Returns false (and changes nothing)
/// when any gradient is non-finite.
inline bool adam_step(AdamState& state, const AdamConfig& cfg, double* values,
                      const double* grads, size_t n) {
  require(state.m.size() == static_cast<long>(n), ErrorKind::ContractViolation,
          "adam state size mismatch");
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grads[i])) {
      ++state.skipped;
      return false;
    }
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < n; ++i) {
    double g = grads[i];
    state.m(i) = cfg.beta1 * state.m(i) + (1.0 - cfg.beta1) * g;
    state.v(i) = cfg.beta2 * state.v(i) + (1.0 - cfg.beta2) * g * g;
    double mhat = state.m(i) / bc1;
    double vhat = state.v(i) / bc2;
    values[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  return true;
}

// ---- trainable poses ----

/// Flat pose parameters, 7 per frame: qx qy qz qw tx ty tz. The raw
/// quaternion is free; it is normalized on read and gradients are chained
/// through the normalization.
struct PoseSet {
  std::vector<double> params;

  static PoseSet from_poses(const std::vector<Pose>& poses) {
    PoseSet ps;
    ps.params.resize(poses.size() * 7);
    for (size_t i = 0; i < poses.size(); ++i) {
      const Eigen::Quaterniond& q = poses[i].rotation;
      double* p = &ps.params[i * 7];
      p[0] = q.x();
      p[1] = q.y();
      p[2] = q.z();
      p[3] = q.w();
      p[4] = poses[i].translation.x();
      p[5] = poses[i].translation.y();
      p[6] = poses[i].translation.z();
    }
    return ps;
  }

  int n_frames() const { return static_cast<int>(params.size() / 7); }

  Pose pose(int i) const {
    const double* p = &params[static_cast<size_t>(i) * 7];
    Pose out;
    out.rotation = Eigen::Quaterniond(p[3], p[0], p[1], p[2]).normalized();
    out.translation = Vec3(p[4], p[5], p[6]);
    return out;
  }

  std::vector<Pose> to_poses() const {
    std::vector<Pose> out;
    for (int i = 0; i < n_frames(); ++i) out.push_back(pose(i));
    return out;
  }

  void renormalize() {
    for (int i = 0; i < n_frames(); ++i) {
      double* p = &params[static_cast<size_t>(i) * 7];
      double n = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3]);
      require(n > 1e-12, ErrorKind::NumericalFailure, "quaternion collapsed");
      for (int j = 0; j < 4; ++j) p[j] /= n;
    }
  }
};

/// Accumulate dL/d(raw quaternion) for a rotation applied to vector v,
/// given g = dL/d(R(q_hat) v). Index order matches PoseSet: x y z w.
inline void rotation_grad(const double* q_raw, const Vec3& v, const Vec3& g,
                          double* d_q_raw) {
  Eigen::Vector4d qr(q_raw[0], q_raw[1], q_raw[2], q_raw[3]);
  double norm = qr.norm();
  Eigen::Vector4d qh = qr / norm;
  Vec3 qv(qh(0), qh(1), qh(2));
  double w = qh(3);

  // R(q) v = (w^2 - qv.qv) v + 2 (qv.v) qv + 2 w (qv x v), for unit q.
  Eigen::Vector4d d_qh;
  d_qh(3) = g.dot(2.0 * w * v + 2.0 * qv.cross(v));
  Vec3 d_qv = -2.0 * qv * v.dot(g) + 2.0 * v * qv.dot(g) +
              2.0 * qv.dot(v) * g + 2.0 * w * v.cross(g);
  d_qh.head<3>() = d_qv;

  // Through normalization: d/dq_raw = (I - qh qh^T)/|q_raw| applied to d_qh.
  Eigen::Vector4d d_qr = (d_qh - qh * qh.dot(d_qh)) / norm;
  for (int j = 0; j < 4; ++j) d_q_raw[j] += d_qr(j);
}

// ---- keyframe selection ----

/// Mean pixel displacement when reprojecting the keyframe's depth into the
/// candidate view. Sampled on a stride grid. Returns a large value when
/// nothing reprojects into the candidate image.
inline double mean_reprojection_flow(const CameraIntrinsics& cam,
                                     const DepthImage& kf_depth,
                                     const Pose& kf_pose,
                                     const Pose& cand_pose, int stride = 4) {
  require(stride >= 1, ErrorKind::InvalidInput, "stride must be >= 1");
  Pose cand_inv = cand_pose.inverse();
  double sum = 0.0;
  int count = 0;
  for (int v = 0; v < kf_depth.height(); v += stride) {
    for (int u = 0; u < kf_depth.width(); u += stride) {
      double z = kf_depth(u, v);
      if (z <= 0.0) continue;
      Vec3 pw = kf_pose.apply(backproject_pixel(cam, u, v, z));
      Vec3 pc = cand_inv.apply(pw);
      double pu, pv;
      if (!project_point(cam, pc, pu, pv)) continue;
      sum += std::sqrt((pu - u) * (pu - u) + (pv - v) * (pv - v));
      ++count;
    }
  }
  if (count == 0) return 1e9;
  return sum / count;
}

/// Greedy selection: frame 0 is a keyframe; a frame becomes one when its
/// flow relative to the last keyframe exceeds tau_flow pixels.
inline std::vector<int> select_keyframes(
    const CameraIntrinsics& cam, const std::vector<DepthImage>& depths,
    const std::vector<Pose>& poses, double tau_flow = 4.0, int stride = 4) {
  require(depths.size() == poses.size() && !depths.empty(),
          ErrorKind::InvalidInput, "depths/poses mismatch");
  std::vector<int> keyframes{0};
  for (size_t i = 1; i < poses.size(); ++i) {
    int last = keyframes.back();
    double flow = mean_reprojection_flow(cam, depths[last], poses[last],
                                         poses[i], stride);
    if (flow > tau_flow) keyframes.push_back(static_cast<int>(i));
  }
  return keyframes;
}

// ---- alternating map / pose optimization ----

struct JointOptConfig {
  int iterations = 100;
  int map_steps = 5;        // map updates per outer iteration
  int rays_per_batch = 64;  // must not exceed TransformerConfig::max_rays
  double lr_map = 1e-3;
  double lr_pose = 1e-4;    // 0 freezes the poses entirely
  uint64_t seed = 1;
  double divergence_factor = 1e3;
  SamplerConfig sampler;
  LossConfig loss;
};

struct TraceRow {
  int iter = 0;
  double l_c = 0.0, l_d = 0.0, l_s = 0.0, total = 0.0;
  double pose_change = 0.0;  // parameter-space step size this iteration
};

struct JointOptResult {
  std::vector<Pose> poses;
  std::vector<TraceRow> trace;
  bool diverged = false;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Assemble a transformer chunk from rays under the current poses. All
/// rays must agree on the sample count, which holds when either every ray
/// has a guide depth or none does.
inline TransformerInput build_transformer_input(const CameraIntrinsics& cam,
                                                const std::vector<Ray>& rays,
                                                const std::vector<Pose>& poses,
                                                const SamplerConfig& sampler,
                                                SplitMix64* jitter_rng,
                                                std::vector<RaySamples>& samples_out) {
  int B = static_cast<int>(rays.size());
  require(B > 0, ErrorKind::InvalidInput, "empty ray chunk");

  samples_out.clear();
  samples_out.reserve(B);
  int N = -1;
  for (const Ray& r : rays) {
    samples_out.push_back(sample_ray(sampler, r.guide_depth, jitter_rng));
    int n = static_cast<int>(samples_out.back().t_values.size());
    if (N < 0) N = n;
    require(n == N, ErrorKind::ContractViolation,
            "rays in a chunk must share the sample count");
  }

  TransformerInput in;
  in.B = B;
  in.N = N;
  in.points.resize(B * N, 3);
  in.view_dirs.resize(B, 3);
  in.t_values.resize(B, N);
  in.pixels_norm.resize(B, 2);
  in.seg_ids.resize(B);
  for (int b = 0; b < B; ++b) {
    const Ray& r = rays[b];
    const Pose& pose = poses[r.frame_index];
    Vec3 dir = pose.rotation * r.dir_cam;
    in.view_dirs.row(b) = dir.transpose();
    in.pixels_norm(b, 0) = cam.width > 1 ? r.u / (cam.width - 1.0) : 0.0;
    in.pixels_norm(b, 1) = cam.height > 1 ? r.v / (cam.height - 1.0) : 0.0;
    in.seg_ids[b] = r.segment_id;
    for (int n = 0; n < N; ++n) {
      double t = samples_out[b].t_values[static_cast<size_t>(n)];
      in.t_values(b, n) = t;
      in.points.row(b * N + n) = (pose.translation + t * dir).transpose();
    }
  }
  return in;
}

namespace detail {

struct BatchEval {
  LossTerms loss;
  std::vector<RenderOutput> outputs;
  std::vector<RayTarget> targets;
  TransformerInput input;
  std::vector<RaySamples> samples;
};

/// Forward + loss for one batch; fills gradient vectors for the backward
/// pass when requested.
inline BatchEval eval_batch(const CameraIntrinsics& cam,
                            const std::vector<Ray>& rays,
                            const std::vector<Pose>& poses,
                            TransformerParams& params,
                            const JointOptConfig& cfg,
                            TransformerWorkspace& ws, SplitMix64* jitter_rng,
                            std::vector<Vec3>* d_color,
                            std::vector<double>* d_depth,
                            std::vector<Eigen::VectorXd>* d_logits) {
  BatchEval ev;
  ev.input = build_transformer_input(cam, rays, poses, cfg.sampler, jitter_rng,
                                     ev.samples);
  transformer_forward(params, ev.input, ws);

  int B = ev.input.B, N = ev.input.N;
  ev.outputs.reserve(B);
  ev.targets.reserve(B);
  for (int b = 0; b < B; ++b) {
    Eigen::VectorXd t(N), deltas(N);
    for (int n = 0; n < N; ++n) {
      t(n) = ev.samples[b].t_values[static_cast<size_t>(n)];
      deltas(n) = ev.samples[b].deltas[static_cast<size_t>(n)];
    }
    ev.outputs.push_back(render_ray(ws.sigma.segment(b * N, N),
                                    ws.rgb.middleRows(b * N, N),
                                    ws.logits.middleRows(b * N, N), t, deltas));
    RayTarget tgt;
    tgt.frame_index = rays[b].frame_index;
    tgt.segment_id = rays[b].segment_id;
    tgt.epsilon = rays[b].epsilon;
    tgt.color = rays[b].gt_color;
    tgt.depth = rays[b].gt_depth;
    tgt.sem_class = rays[b].segment_id;
    ev.targets.push_back(tgt);
  }
  ev.loss = compute_loss(ev.outputs, ev.targets, cfg.loss, d_color, d_depth,
                         d_logits);
  return ev;
}

/// Ray-level gradients back through rendering into per-sample gradients,
/// then through the transformer. Returns input grads when `igrads` given.
inline void backward_batch(const BatchEval& ev, TransformerParams& params,
                           const TransformerWorkspace& ws,
                           const std::vector<Vec3>& d_color,
                           const std::vector<double>& d_depth,
                           const std::vector<Eigen::VectorXd>& d_logits_agg,
                           InputGrads* igrads) {
  int B = ev.input.B, N = ev.input.N;
  Eigen::VectorXd d_sigma_all(B * N);
  Eigen::MatrixXd d_rgb_all(B * N, 3);
  Eigen::MatrixXd d_logits_all(B * N, params.cfg.n_classes);
  for (int b = 0; b < B; ++b) {
    Eigen::VectorXd t(N), deltas(N);
    for (int n = 0; n < N; ++n) {
      t(n) = ev.samples[b].t_values[static_cast<size_t>(n)];
      deltas(n) = ev.samples[b].deltas[static_cast<size_t>(n)];
    }
    Eigen::VectorXd d_sigma;
    Eigen::MatrixXd d_rgb, d_logits;
    render_ray_backward(ws.sigma.segment(b * N, N), ws.rgb.middleRows(b * N, N),
                        ws.logits.middleRows(b * N, N), t, deltas,
                        ev.outputs[b], d_color[b], d_depth[b], d_logits_agg[b],
                        d_sigma, d_rgb, d_logits);
    d_sigma_all.segment(b * N, N) = d_sigma;
    d_rgb_all.middleRows(b * N, N) = d_rgb;
    d_logits_all.middleRows(b * N, N) = d_logits;
  }
  transformer_backward(params, ev.input, ws, d_sigma_all, d_rgb_all,
                       d_logits_all, igrads);
}

}  // namespace detail

/// Alternating optimization. Each iteration runs `map_steps` Adam updates
/// of the model on fresh ray batches, then re-evaluates those same batches
/// at the frozen updated model to take a single pose step. lr_pose = 0
/// skips the pose phase entirely, leaving poses bit-identical.
inline JointOptResult joint_optimize(const CameraIntrinsics& cam,
                                     const std::vector<TrainingFrame>& frames,
                                     const std::vector<Pose>& init_poses,
                                     TransformerParams& params,
                                     const JointOptConfig& cfg) {
  require(cfg.rays_per_batch <= params.cfg.max_rays, ErrorKind::InvalidInput,
          "rays_per_batch exceeds the transformer chunk size");
  require(cfg.iterations > 0 && cfg.map_steps > 0, ErrorKind::InvalidInput,
          "bad schedule");

  PoseSet poses = PoseSet::from_poses(init_poses);
  AdamState map_state, pose_state;
  map_state.init(params.store.size());
  pose_state.init(poses.params.size());
  AdamConfig map_adam{cfg.lr_map, 0.9, 0.999, 1e-8};
  AdamConfig pose_adam{cfg.lr_pose, 0.9, 0.999, 1e-8};

  JointOptResult result;
  TransformerWorkspace ws;

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    std::vector<std::vector<Ray>> batches;
    double sum_lc = 0.0, sum_ld = 0.0, sum_ls = 0.0, sum_total = 0.0;

    // Map phase: fresh batch per step, poses frozen.
    for (int s = 0; s < cfg.map_steps; ++s) {
      SplitMix64 rng = stream_rng(cfg.seed, 0x10000u + static_cast<uint64_t>(
                                                iter) * cfg.map_steps + s);
      batches.push_back(draw_ray_batch(cam, frames, cfg.rays_per_batch, rng));
      SplitMix64 jitter = stream_rng(cfg.seed, 0x20000u + static_cast<uint64_t>(
                                                   iter) * cfg.map_steps + s);
      SplitMix64* jit = cfg.sampler.jitter ? &jitter : nullptr;

      std::vector<Vec3> d_color;
      std::vector<double> d_depth;
      std::vector<Eigen::VectorXd> d_logits;
      std::vector<Pose> cur = poses.to_poses();
      detail::BatchEval ev =
          detail::eval_batch(cam, batches.back(), cur, params, cfg, ws, jit,
                             &d_color, &d_depth, &d_logits);
      params.store.zero_grads();
      detail::backward_batch(ev, params, ws, d_color, d_depth, d_logits,
                             nullptr);
      adam_step(map_state, map_adam, params.store.values().data(),
                params.store.grads().data(), params.store.size());

      sum_lc += ev.loss.l_c;
      sum_ld += ev.loss.l_d;
      sum_ls += ev.loss.l_s;
      sum_total += ev.loss.total;
    }

    double pose_change = 0.0;
    if (cfg.lr_pose > 0.0) {
      // Pose phase: same batches, frozen updated model, one Adam step.
      std::vector<double> pose_grads(poses.params.size(), 0.0);
      std::vector<Pose> cur = poses.to_poses();
      for (int s = 0; s < cfg.map_steps; ++s) {
        SplitMix64 jitter = stream_rng(cfg.seed, 0x30000u + static_cast<uint64_t>(
                                                     iter) * cfg.map_steps + s);
        SplitMix64* jit = cfg.sampler.jitter ? &jitter : nullptr;
        std::vector<Vec3> d_color;
        std::vector<double> d_depth;
        std::vector<Eigen::VectorXd> d_logits;
        detail::BatchEval ev =
            detail::eval_batch(cam, batches[static_cast<size_t>(s)], cur,
                               params, cfg, ws, jit, &d_color, &d_depth,
                               &d_logits);
        params.store.zero_grads();  // map grads from this pass are discarded
        InputGrads igrads;
        detail::backward_batch(ev, params, ws, d_color, d_depth, d_logits,
                               &igrads);

        int B = ev.input.B, N = ev.input.N;
        for (int b = 0; b < B; ++b) {
          const Ray& r = batches[static_cast<size_t>(s)][static_cast<size_t>(b)];
          Vec3 d_origin = Vec3::Zero();
          Vec3 d_dir = Vec3::Zero();
          for (int n = 0; n < N; ++n) {
            Vec3 dp = igrads.d_points.row(b * N + n).transpose();
            d_origin += dp;
            d_dir += ev.input.t_values(b, n) * dp;
          }
          d_dir += igrads.d_view_dirs.row(b).transpose();

          double* pg = &pose_grads[static_cast<size_t>(r.frame_index) * 7];
          rotation_grad(&poses.params[static_cast<size_t>(r.frame_index) * 7],
                        r.dir_cam, d_dir, pg);
          pg[4] += d_origin.x();
          pg[5] += d_origin.y();
          pg[6] += d_origin.z();
        }
      }
      std::vector<double> before = poses.params;
      adam_step(pose_state, pose_adam, poses.params.data(), pose_grads.data(),
                poses.params.size());
      poses.renormalize();
      for (size_t i = 0; i < before.size(); ++i) {
        double d = poses.params[i] - before[i];
        pose_change += d * d;
      }
      pose_change = std::sqrt(pose_change);
    }

    TraceRow row;
    row.iter = iter;
    row.l_c = sum_lc / cfg.map_steps;
    row.l_d = sum_ld / cfg.map_steps;
    row.l_s = sum_ls / cfg.map_steps;
    row.total = sum_total / cfg.map_steps;
    row.pose_change = pose_change;
    result.trace.push_back(row);

    if (iter == 0) result.initial_loss = row.total;
    result.final_loss = row.total;
    if (row.total > cfg.divergence_factor * result.initial_loss) {
      result.diverged = true;
      break;
    }
  }

  result.poses = poses.to_poses();
  return result;
}

}  // namespace qslam
