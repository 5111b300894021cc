#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "qslam/checkpoint.hpp"
#include "qslam/config.hpp"
#include "qslam/dataset_io.hpp"
#include "qslam/depth_rectify.hpp"
#include "qslam/metrics.hpp"
#include "qslam/optim.hpp"
#include "qslam/scene_synth.hpp"
#include "qslam/tsdf.hpp"

namespace qslam {

// ---- synth ----

struct SynthOptions {
  int n_frames = 8;
  int width = 64;
  int height = 48;
  double focal_scale = 0.9;  // fx = fy = focal_scale * width
  double orbit_radius = 0.85;
  double orbit_height = 0.7;
  double angle0 = -0.5;
  double angle1 = 0.5;
  NoiseModel noise;
};

inline CameraIntrinsics synth_camera(const SynthOptions& opt) {
  CameraIntrinsics cam;
  cam.width = opt.width;
  cam.height = opt.height;
  cam.fx = cam.fy = opt.focal_scale * opt.width;
  cam.cx = 0.5 * (opt.width - 1);
  cam.cy = 0.5 * (opt.height - 1);
  return cam;
}

/// Render the scene along an orbit and corrupt depth and poses per the
/// noise model. Ground truth is kept alongside whenever noise is active.
inline Dataset synthesize_dataset(const SyntheticScene& scene,
                                  const SynthOptions& opt) {
  Dataset ds;
  ds.cam = synth_camera(opt);
  std::vector<Pose> gt_poses =
      make_orbit_trajectory(opt.n_frames, opt.orbit_radius, opt.orbit_height,
                            Vec3::Zero(), opt.angle0, opt.angle1);

  bool noisy_depth = opt.noise.depth_sigma > 0.0;
  bool noisy_pose =
      opt.noise.pose_rot_sigma > 0.0 || opt.noise.pose_trans_sigma > 0.0;

  for (int i = 0; i < opt.n_frames; ++i) {
    RenderedView view = render_ground_truth(scene, ds.cam, gt_poses[i]);
    ds.rgb.push_back(view.rgb);
    ds.mask.push_back(view.mask);
    if (noisy_depth) {
      ds.depth.push_back(perturb_depth(view.depth, view.mask, opt.noise, i));
      ds.gt_depth.push_back(view.depth);
    } else {
      ds.depth.push_back(view.depth);
    }
    if (noisy_pose) {
      SplitMix64 rng = stream_rng(opt.noise.seed,
                                  0x9000u + static_cast<uint64_t>(i));
      ds.poses.push_back(perturb_pose(gt_poses[i], opt.noise, rng));
    } else {
      ds.poses.push_back(gt_poses[i]);
    }
  }
  if (noisy_depth || noisy_pose) ds.gt_poses = gt_poses;
  if (!noisy_depth && noisy_pose) ds.gt_depth = ds.depth;
  return ds;
}

inline json run_synth(const fs::path& root, const SyntheticScene& scene,
                      const SynthOptions& opt) {
  Dataset ds = synthesize_dataset(scene, opt);
  fs::create_directories(root);
  write_dataset(root, ds);
  write_json(root / "scene.json", scene_to_json(scene));
  json report;
  report["n_frames"] = opt.n_frames;
  report["width"] = opt.width;
  report["height"] = opt.height;
  report["depth_sigma"] = opt.noise.depth_sigma;
  report["pose_rot_sigma"] = opt.noise.pose_rot_sigma;
  report["pose_trans_sigma"] = opt.noise.pose_trans_sigma;
  report["has_ground_truth"] = !ds.gt_poses.empty();
  return report;
}

// ---- fit / rectify ----

/// Rectify every frame. Writes fit records and a summary; when out_root is
/// non-empty also writes the corrected dataset there.
inline json run_rectify(const fs::path& in_root, const fs::path& out_root,
                        const AppConfig& cfg) {
  Dataset ds = read_dataset(in_root);
  RectifyConfig rc = cfg.rectify_config();

  std::vector<FitRecord> records;
  int n_accepted = 0, n_segments = 0;
  long n_corrected_px = 0;
  Dataset out = ds;
  for (size_t i = 0; i < ds.poses.size(); ++i) {
    RectifiedFrame rf = rectify_frame(ds.cam, ds.depth[i], ds.mask[i], rc);
    out.depth[i] = rf.corrected_depth;
    for (const auto& [id, fit] : rf.fits) {
      records.push_back({static_cast<int>(i), fit});
      ++n_segments;
      if (fit.accepted) ++n_accepted;
    }
    for (int m : rf.correction_mask.data()) n_corrected_px += m;
  }

  json report;
  report["n_frames"] = ds.poses.size();
  report["n_segments"] = n_segments;
  report["n_accepted"] = n_accepted;
  report["n_corrected_pixels"] = n_corrected_px;
  report["config"] = config_to_json(cfg);

  if (!out_root.empty()) {
    fs::create_directories(out_root);
    write_dataset(out_root, out);
    if (fs::exists(in_root / "scene.json"))
      fs::copy_file(in_root / "scene.json", out_root / "scene.json",
                    fs::copy_options::overwrite_existing);
    write_fit_records(out_root / "fits.jsonl", records);
    write_json(out_root / "rectify_report.json", report);
  }
  return report;
}

/// Fit-only view of rectification: same records, no image output.
inline json run_fit(const fs::path& in_root, const fs::path& out_jsonl,
                    const AppConfig& cfg) {
  Dataset ds = read_dataset(in_root);
  RectifyConfig rc = cfg.rectify_config();
  std::vector<FitRecord> records;
  int n_accepted = 0;
  for (size_t i = 0; i < ds.poses.size(); ++i) {
    RectifiedFrame rf = rectify_frame(ds.cam, ds.depth[i], ds.mask[i], rc);
    for (const auto& [id, fit] : rf.fits) {
      records.push_back({static_cast<int>(i), fit});
      if (fit.accepted) ++n_accepted;
    }
  }
  write_fit_records(out_jsonl, records);
  json report;
  report["n_frames"] = ds.poses.size();
  report["n_segments"] = records.size();
  report["n_accepted"] = n_accepted;
  report["config"] = config_to_json(cfg);
  return report;
}

// ---- train ----

inline std::vector<TrainingFrame> build_training_frames(
    const Dataset& ds, const std::vector<FitRecord>& fits) {
  std::vector<TrainingFrame> frames;
  for (size_t i = 0; i < ds.poses.size(); ++i) {
    TrainingFrame f;
    f.frame_index = static_cast<int>(i);
    f.rgb = ds.rgb[i];
    f.guide_depth = ds.depth[i];
    f.target_depth = ds.depth[i];
    f.mask = ds.mask[i];
    for (const FitRecord& r : fits)
      if (r.frame == static_cast<int>(i) && r.fit.fit_ok)
        f.segment_epsilon[r.fit.segment_id] = r.fit.epsilon;
    frames.push_back(std::move(f));
  }
  return frames;
}

struct TrainArtifacts {
  JointOptResult result;
  std::vector<int> keyframes;
};

inline void write_trace_csv(const fs::path& path,
                            const std::vector<TraceRow>& trace) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::DataError, "cannot write " + path.string());
  out << "iter,l_c,l_d,l_s,total,pose_change\n";
  char buf[256];
  for (const TraceRow& r : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.iter,
                  r.l_c, r.l_d, r.l_s, r.total, r.pose_change);
    out << buf;
  }
}

inline TrainArtifacts run_train(const fs::path& data_root,
                                const fs::path& out_dir, const AppConfig& cfg) {
  Dataset ds = read_dataset(data_root);
  std::vector<FitRecord> fits;
  if (fs::exists(data_root / "fits.jsonl"))
    fits = read_fit_records(data_root / "fits.jsonl");

  int max_id = 0;
  for (const MaskImage& m : ds.mask)
    for (int v : m.data()) max_id = std::max(max_id, v);
  require(max_id < cfg.model.n_classes, ErrorKind::DataError,
          "model.n_classes must exceed the largest segment id");
  require(max_id < cfg.model.n_segment_ids, ErrorKind::DataError,
          "model.n_segment_ids must exceed the largest segment id");

  std::vector<TrainingFrame> all = build_training_frames(ds, fits);
  TrainArtifacts art;
  std::vector<TrainingFrame> frames;
  if (cfg.use_keyframes) {
    art.keyframes = select_keyframes(ds.cam, ds.depth, ds.poses, cfg.tau_flow);
    if (static_cast<int>(art.keyframes.size()) > cfg.window_size)
      art.keyframes.erase(art.keyframes.begin(),
                          art.keyframes.end() - cfg.window_size);
    for (int k : art.keyframes) frames.push_back(all[static_cast<size_t>(k)]);
  } else {
    for (size_t i = 0; i < all.size(); ++i)
      art.keyframes.push_back(static_cast<int>(i));
    frames = all;
  }

  TransformerParams params(cfg.model, static_cast<uint64_t>(cfg.seed));
  art.result = joint_optimize(ds.cam, frames, ds.poses, params,
                              cfg.joint_config());

  fs::create_directories(out_dir);
  save_checkpoint(out_dir / "checkpoint.json", params);
  write_poses(out_dir / "poses_opt.txt", art.result.poses);
  write_trace_csv(out_dir / "trace.csv", art.result.trace);

  json report;
  report["iterations_run"] = art.result.trace.size();
  report["initial_loss"] = art.result.initial_loss;
  report["final_loss"] = art.result.final_loss;
  report["diverged"] = art.result.diverged;
  report["n_training_frames"] = frames.size();
  report["keyframes"] = art.keyframes;
  report["config"] = config_to_json(cfg);
  write_json(out_dir / "train_report.json", report);
  return art;
}

// ---- render ----

/// Render every dataset frame from a trained model into a new mini
/// dataset (rgb / depth / mask / camera / poses), so downstream fusion
/// and evaluation treat it like any other capture.
inline json run_render(const fs::path& data_root, const fs::path& checkpoint,
                       const fs::path& poses_override, const fs::path& out_root,
                       const AppConfig& cfg) {
  Dataset ds = read_dataset(data_root);
  TransformerParams params = load_checkpoint(checkpoint);
  std::vector<Pose> poses =
      poses_override.empty() ? ds.poses : read_poses(poses_override);
  require(poses.size() == ds.poses.size(), ErrorKind::DataError,
          "pose file frame count mismatch");

  Dataset out;
  out.cam = ds.cam;
  out.poses = poses;

  // Rendering is deterministic: midpoint sampling regardless of the
  // training-time jitter setting (there is no rng stream at eval).
  SamplerConfig sample_cfg = cfg.sample;
  sample_cfg.jitter = false;

  TransformerWorkspace ws;
  for (size_t f = 0; f < poses.size(); ++f) {
    ColorImage rgb(ds.cam.width, ds.cam.height, Eigen::Vector3d::Zero());
    DepthImage depth(ds.cam.width, ds.cam.height, 0.0);
    MaskImage mask(ds.cam.width, ds.cam.height, 0);

    TrainingFrame tf;
    tf.frame_index = static_cast<int>(f);
    tf.rgb = ds.rgb[f];
    tf.guide_depth = ds.depth[f];
    tf.target_depth = ds.depth[f];
    tf.mask = ds.mask[f];

    // Guided and unguided pixels take different sample counts, so chunk
    // them separately.
    std::vector<Ray> guided, unguided;
    for (int v = 0; v < ds.cam.height; ++v)
      for (int u = 0; u < ds.cam.width; ++u) {
        Ray r = make_ray(ds.cam, tf, u, v);
        (r.guide_depth > 0.0 ? guided : unguided).push_back(r);
      }

    auto render_chunks = [&](const std::vector<Ray>& rays) {
      for (size_t start = 0; start < rays.size();
           start += static_cast<size_t>(params.cfg.max_rays)) {
        size_t count = std::min(rays.size() - start,
                                static_cast<size_t>(params.cfg.max_rays));
        std::vector<Ray> chunk(rays.begin() + static_cast<long>(start),
                               rays.begin() + static_cast<long>(start + count));
        std::vector<RaySamples> samples;
        TransformerInput in = build_transformer_input(
            ds.cam, chunk, poses, sample_cfg, nullptr, samples);
        transformer_forward(params, in, ws);
        for (int b = 0; b < in.B; ++b) {
          int N = in.N;
          Eigen::VectorXd t(N), deltas(N);
          for (int n = 0; n < N; ++n) {
            t(n) = samples[static_cast<size_t>(b)].t_values[static_cast<size_t>(n)];
            deltas(n) = samples[static_cast<size_t>(b)].deltas[static_cast<size_t>(n)];
          }
          RenderOutput ro =
              render_ray(ws.sigma.segment(b * N, N), ws.rgb.middleRows(b * N, N),
                         ws.logits.middleRows(b * N, N), t, deltas);
          const Ray& r = chunk[static_cast<size_t>(b)];
          rgb(r.u, r.v) = ro.color;
          depth(r.u, r.v) = range_to_z(ds.cam, r.u, r.v, ro.depth);
          int best = 0;
          ro.sem_probs.maxCoeff(&best);
          mask(r.u, r.v) = best;
        }
      }
    };
    render_chunks(guided);
    render_chunks(unguided);

    out.rgb.push_back(rgb);
    out.depth.push_back(depth);
    out.mask.push_back(mask);
  }

  fs::create_directories(out_root);
  write_dataset(out_root, out);
  json report;
  report["n_frames"] = out.poses.size();
  report["config"] = config_to_json(cfg);
  write_json(out_root / "render_report.json", report);
  return report;
}

// ---- fuse ----

/// Depth bounds of the dataset, padded, as a fusion volume.
inline TsdfVolume volume_for_dataset(const Dataset& ds, double voxel,
                                     bool use_gt_depth) {
  const std::vector<DepthImage>& depths =
      use_gt_depth ? ds.gt_depth : ds.depth;
  const std::vector<Pose>& poses =
      use_gt_depth && !ds.gt_poses.empty() ? ds.gt_poses : ds.poses;
  Vec3 lo = Vec3::Constant(1e30), hi = Vec3::Constant(-1e30);
  for (size_t f = 0; f < depths.size(); ++f) {
    for (int v = 0; v < depths[f].height(); v += 2) {
      for (int u = 0; u < depths[f].width(); u += 2) {
        double z = depths[f](u, v);
        if (z <= 0.0) continue;
        Vec3 p = poses[f].apply(backproject_pixel(ds.cam, u, v, z));
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
    }
  }
  require(lo.x() < hi.x(), ErrorKind::DataError, "no valid depth to fuse");
  lo -= Vec3::Constant(3.0 * voxel);
  hi += Vec3::Constant(3.0 * voxel);
  return make_volume(lo, hi, voxel);
}

inline json run_fuse(const fs::path& data_root, const fs::path& out_ply,
                     const AppConfig& cfg, bool use_gt_depth = false,
                     const fs::path& poses_override = {}) {
  Dataset ds = read_dataset(data_root);
  if (use_gt_depth)
    require(!ds.gt_depth.empty(), ErrorKind::DataError,
            "dataset has no gt_depth");
  std::vector<Pose> poses =
      poses_override.empty()
          ? (use_gt_depth && !ds.gt_poses.empty() ? ds.gt_poses : ds.poses)
          : read_poses(poses_override);

  TsdfVolume vol = volume_for_dataset(ds, cfg.voxel_size, use_gt_depth);
  vol.truncation = cfg.trunc_voxels * cfg.voxel_size;
  const std::vector<DepthImage>& depths =
      use_gt_depth ? ds.gt_depth : ds.depth;
  for (size_t f = 0; f < depths.size(); ++f)
    tsdf_integrate(vol, ds.cam, poses[f], depths[f]);

  TriangleMesh mesh = marching_cubes(vol);
  write_ply(out_ply.string(), mesh);

  json report;
  report["grid"] = {vol.nx, vol.ny, vol.nz};
  report["n_vertices"] = mesh.vertices.size();
  report["n_triangles"] = mesh.triangles.size();
  report["config"] = config_to_json(cfg);
  return report;
}

// ---- eval ----

/// World points seen by the reference depth maps, subsampled to roughly
/// `target` points. This is the observed-surface reference for mesh
/// accuracy and completion.
inline std::vector<Vec3> observed_surface_points(const Dataset& ds,
                                                 int target = 8000) {
  const std::vector<DepthImage>& depths =
      ds.gt_depth.empty() ? ds.depth : ds.gt_depth;
  const std::vector<Pose>& poses =
      ds.gt_poses.empty() ? ds.poses : ds.gt_poses;

  long valid = 0;
  for (const DepthImage& d : depths)
    for (double z : d.data())
      if (z > 0.0) ++valid;
  require(valid > 0, ErrorKind::DataError, "reference has no valid depth");
  int stride = std::max(1, static_cast<int>(std::sqrt(
                               static_cast<double>(valid) / target)));

  std::vector<Vec3> points;
  for (size_t f = 0; f < depths.size(); ++f)
    for (int v = 0; v < depths[f].height(); v += stride)
      for (int u = 0; u < depths[f].width(); u += stride) {
        double z = depths[f](u, v);
        if (z <= 0.0) continue;
        points.push_back(poses[f].apply(backproject_pixel(ds.cam, u, v, z)));
      }
  return points;
}

struct EvalInputs {
  fs::path dataset;      // reference dataset (with ground truth when noisy)
  fs::path render_root;  // optional rendered mini dataset
  fs::path mesh_ply;     // optional fused mesh
  fs::path poses;        // optional estimated trajectory
};

inline json run_eval(const EvalInputs& in, const AppConfig& cfg) {
  Dataset ds = read_dataset(in.dataset);
  json out;
  out["ate_cm"] = nullptr;
  out["psnr"] = nullptr;
  out["ssim"] = nullptr;
  out["depth_l1_cm"] = nullptr;
  out["accuracy_cm"] = nullptr;
  out["completion_cm"] = nullptr;
  out["completion_ratio_pct"] = nullptr;

  if (!in.poses.empty()) {
    require(!ds.gt_poses.empty(), ErrorKind::DataError,
            "dataset has no gt_poses.txt to score against");
    std::vector<Pose> est = read_poses(in.poses);
    require(est.size() == ds.gt_poses.size(), ErrorKind::DataError,
            "trajectory length mismatch");
    std::vector<Vec3> gt_t, est_t;
    for (size_t i = 0; i < est.size(); ++i) {
      gt_t.push_back(ds.gt_poses[i].translation);
      est_t.push_back(est[i].translation);
    }
    out["ate_cm"] = ate_rmse_cm(gt_t, est_t, cfg.ate_scale);
  }

  if (!in.render_root.empty()) {
    Dataset rd = read_dataset(in.render_root);
    require(rd.poses.size() == ds.poses.size(), ErrorKind::DataError,
            "rendered frame count mismatch");
    double sum_psnr = 0.0, sum_ssim = 0.0, sum_l1 = 0.0;
    const std::vector<DepthImage>& ref_depth =
        ds.gt_depth.empty() ? ds.depth : ds.gt_depth;
    for (size_t i = 0; i < rd.poses.size(); ++i) {
      sum_psnr += psnr(ds.rgb[i], rd.rgb[i]);
      sum_ssim += ssim(ds.rgb[i], rd.rgb[i]);
      sum_l1 += depth_l1_cm(ref_depth[i], rd.depth[i]);
    }
    out["psnr"] = sum_psnr / rd.poses.size();
    out["ssim"] = sum_ssim / rd.poses.size();
    out["depth_l1_cm"] = sum_l1 / rd.poses.size();
  }

  if (!in.mesh_ply.empty()) {
    TriangleMesh mesh = read_ply(in.mesh_ply.string());
    std::vector<Vec3> reference = observed_surface_points(ds);
    MeshMetrics mm = mesh_metrics(mesh, reference, cfg.mesh_samples,
                                  static_cast<uint64_t>(cfg.seed),
                                  cfg.mesh_threshold);
    out["accuracy_cm"] = mm.accuracy_cm;
    out["completion_cm"] = mm.completion_cm;
    out["completion_ratio_pct"] = mm.completion_ratio_pct;
  }

  out["config"] = config_to_json(cfg);
  return out;
}

/// Merge named report files into one document.
inline json run_report(const std::vector<fs::path>& inputs) {
  json out;
  for (const fs::path& p : inputs) {
    require(fs::exists(p), ErrorKind::DataError, "missing report " + p.string());
    out[p.stem().string()] = read_json(p);
  }
  return out;
}

}  // namespace qslam
