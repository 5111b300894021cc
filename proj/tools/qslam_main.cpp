// Command line front end: dataset synthesis, quadric fitting and depth
// rectification, model training, rendering, fusion and evaluation. Every
// subcommand prints a JSON report to stdout and exits 0 on success, 1 on
// usage errors, 2 on bad data, 3 on numerical failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "qslam/config.hpp"
#include "qslam/pipeline.hpp"

namespace {

int exit_code_for(qslam::ErrorKind kind) {
  switch (kind) {
    case qslam::ErrorKind::InvalidInput:
      return 1;
    case qslam::ErrorKind::DataError:
      return 2;
    case qslam::ErrorKind::NumericalFailure:
    case qslam::ErrorKind::ContractViolation:
      return 3;
  }
  return 3;
}

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "INI config file");
  cmd->add_option("--set", opts.overrides,
                  "Override a config value, section.key=value");
}

qslam::AppConfig make_config(const CommonOpts& opts) {
  qslam::AppConfig cfg;
  if (!opts.config_file.empty()) qslam::load_config_file(cfg, opts.config_file);
  for (const std::string& s : opts.overrides)
    qslam::apply_config_override(cfg, s);
  return cfg;
}

void emit(const qslam::json& report, const std::string& report_path) {
  if (!report_path.empty()) qslam::write_json(report_path, report);
  std::cout << report.dump(2) << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quadric-field mapping pipeline"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_out;
  qslam::SynthOptions sopt;
  std::string report_path;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--frames", sopt.n_frames, "Number of frames");
  synth->add_option("--width", sopt.width, "Image width");
  synth->add_option("--height", sopt.height, "Image height");
  synth->add_option("--radius", sopt.orbit_radius, "Orbit radius (m)");
  synth->add_option("--orbit-height", sopt.orbit_height, "Camera height (m)");
  synth->add_option("--angle0", sopt.angle0, "Orbit start angle (rad)");
  synth->add_option("--angle1", sopt.angle1, "Orbit end angle (rad)");
  synth->add_option("--depth-sigma", sopt.noise.depth_sigma,
                    "Depth noise stddev (m)");
  synth->add_option("--edge-blur", sopt.noise.edge_blur_px,
                    "Edge corruption radius (px)");
  synth->add_option("--pose-rot-sigma", sopt.noise.pose_rot_sigma,
                    "Pose rotation noise (rad)");
  synth->add_option("--pose-trans-sigma", sopt.noise.pose_trans_sigma,
                    "Pose translation noise (m)");
  synth->add_option("--seed", sopt.noise.seed, "Noise seed");
  synth->add_option("--report", report_path, "Also write the report here");

  // fit
  auto* fit = app.add_subcommand("fit", "Fit quadrics to every segment");
  std::string fit_data, fit_out;
  CommonOpts fit_common;
  fit->add_option("--data", fit_data, "Dataset directory")->required();
  fit->add_option("--out", fit_out, "Output fits.jsonl path")->required();
  fit->add_option("--report", report_path, "Also write the report here");
  add_common(fit, fit_common);

  // rectify
  auto* rectify = app.add_subcommand("rectify", "Snap depth onto fitted quadrics");
  std::string rect_data, rect_out;
  CommonOpts rect_common;
  rectify->add_option("--data", rect_data, "Input dataset directory")->required();
  rectify->add_option("--out", rect_out, "Output dataset directory")->required();
  rectify->add_option("--report", report_path, "Also write the report here");
  add_common(rectify, rect_common);

  // sample-check
  auto* sample = app.add_subcommand("sample-check",
                                    "Print ray sample positions for a config");
  double sample_guide = 0.0;
  uint64_t sample_seed = 1;
  CommonOpts sample_common;
  sample->add_option("--guide", sample_guide, "Guide depth along the ray (m)");
  sample->add_option("--seed", sample_seed, "Jitter seed");
  sample->add_option("--report", report_path, "Also write the report here");
  add_common(sample, sample_common);

  // train
  auto* train = app.add_subcommand("train", "Joint map and pose optimization");
  std::string train_data, train_out;
  CommonOpts train_common;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--report", report_path, "Also write the report here");
  add_common(train, train_common);

  // render
  auto* render = app.add_subcommand("render", "Render frames from a checkpoint");
  std::string render_data, render_ckpt, render_poses, render_out;
  CommonOpts render_common;
  render->add_option("--data", render_data, "Dataset directory")->required();
  render->add_option("--checkpoint", render_ckpt, "checkpoint.json")->required();
  render->add_option("--poses", render_poses, "Pose file overriding the dataset");
  render->add_option("--out", render_out, "Output dataset directory")->required();
  render->add_option("--report", report_path, "Also write the report here");
  add_common(render, render_common);

  // fuse
  auto* fuse = app.add_subcommand("fuse", "TSDF-fuse depth into a mesh");
  std::string fuse_data, fuse_out, fuse_poses;
  bool fuse_gt = false;
  CommonOpts fuse_common;
  fuse->add_option("--data", fuse_data, "Dataset directory")->required();
  fuse->add_option("--out", fuse_out, "Output PLY path")->required();
  fuse->add_option("--poses", fuse_poses, "Pose file overriding the dataset");
  fuse->add_flag("--gt-depth", fuse_gt, "Fuse gt_depth instead of depth");
  fuse->add_option("--report", report_path, "Also write the report here");
  add_common(fuse, fuse_common);

  // eval
  auto* eval = app.add_subcommand("eval", "Score trajectories, renders, meshes");
  qslam::EvalInputs eval_in;
  std::string eval_data, eval_render, eval_mesh, eval_poses;
  CommonOpts eval_common;
  eval->add_option("--data", eval_data, "Reference dataset")->required();
  eval->add_option("--render", eval_render, "Rendered dataset to score");
  eval->add_option("--mesh", eval_mesh, "Mesh PLY to score");
  eval->add_option("--poses", eval_poses, "Trajectory to score");
  eval->add_option("--report", report_path, "Also write the report here");
  add_common(eval, eval_common);

  // report
  auto* report = app.add_subcommand("report", "Merge report JSON files");
  std::vector<std::string> report_inputs;
  std::string report_out;
  report->add_option("--out", report_out, "Merged report path");
  report->add_option("inputs", report_inputs, "Report files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      emit(qslam::run_synth(synth_out, qslam::default_desk_scene(), sopt),
           report_path);
    } else if (fit->parsed()) {
      emit(qslam::run_fit(fit_data, fit_out, make_config(fit_common)),
           report_path);
    } else if (rectify->parsed()) {
      emit(qslam::run_rectify(rect_data, rect_out, make_config(rect_common)),
           report_path);
    } else if (sample->parsed()) {
      qslam::AppConfig cfg = make_config(sample_common);
      qslam::SplitMix64 rng(sample_seed);
      qslam::RaySamples s = qslam::sample_ray(
          cfg.sample, sample_guide, cfg.sample.jitter ? &rng : nullptr);
      qslam::json j;
      j["t_values"] = s.t_values;
      j["deltas"] = s.deltas;
      j["config"] = qslam::config_to_json(cfg)["sample"];
      emit(j, report_path);
    } else if (train->parsed()) {
      qslam::TrainArtifacts art =
          qslam::run_train(train_data, train_out, make_config(train_common));
      emit(qslam::read_json(qslam::fs::path(train_out) / "train_report.json"),
           report_path);
      if (art.result.diverged) {
        std::cerr << "error: optimization diverged" << std::endl;
        return 3;
      }
    } else if (render->parsed()) {
      emit(qslam::run_render(render_data, render_ckpt, render_poses,
                             render_out, make_config(render_common)),
           report_path);
    } else if (fuse->parsed()) {
      emit(qslam::run_fuse(fuse_data, fuse_out, make_config(fuse_common),
                           fuse_gt, fuse_poses),
           report_path);
    } else if (eval->parsed()) {
      eval_in.dataset = eval_data;
      eval_in.render_root = eval_render;
      eval_in.mesh_ply = eval_mesh;
      eval_in.poses = eval_poses;
      emit(qslam::run_eval(eval_in, make_config(eval_common)), report_path);
    } else if (report->parsed()) {
      std::vector<qslam::fs::path> paths(report_inputs.begin(),
                                         report_inputs.end());
      qslam::json merged = qslam::run_report(paths);
      if (!report_out.empty()) qslam::write_json(report_out, merged);
      std::cout << merged.dump(2) << std::endl;
    }
  } catch (const qslam::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
  return 0;
}
