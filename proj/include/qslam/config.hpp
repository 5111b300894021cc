#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "qslam/common.hpp"
#include "qslam/depth_rectify.hpp"
#include "qslam/optim.hpp"
#include "qslam/quadric_fit.hpp"
#include "qslam/ray_sampler.hpp"
#include "qslam/transformer.hpp"

namespace qslam {

/// Everything the CLI subcommands can configure, with the defaults used
/// throughout. Loaded from an INI file and overridable one key at a time
/// with section.key=value strings.
struct AppConfig {
  // [fit]
  FitConfig fit;
  // [rectify]
  std::string rectify_mode = "fixedxy";  // fixedxy | ray
  double max_rel_correction = 0.2;
  // [sample]
  SamplerConfig sample;
  // [model]
  TransformerConfig model;
  // [train]
  int iterations = 100;
  int map_steps = 5;
  int rays_per_batch = 64;
  double lr_map = 1e-3;
  double lr_pose = 1e-4;
  long long seed = 1;
  double lambda1 = 0.1;
  double lambda2 = 0.05;
  double eps0 = 1e-4;
  double tau_flow = 4.0;
  int window_size = 25;
  bool use_keyframes = false;  // train on keyframes only
  // [fuse]
  double voxel_size = 0.01;
  double trunc_voxels = 5.0;
  // [eval]
  int mesh_samples = 5000;
  double mesh_threshold = 0.05;
  bool ate_scale = false;

  RectifyConfig rectify_config() const {
    RectifyConfig rc;
    if (rectify_mode == "fixedxy") {
      rc.mode = SolveDepthMode::FixedXY;
    } else if (rectify_mode == "ray") {
      rc.mode = SolveDepthMode::Ray;
    } else {
      raise(ErrorKind::DataError, "rectify.mode must be fixedxy or ray");
    }
    rc.max_rel_correction = max_rel_correction;
    rc.fit = fit;
    return rc;
  }

  JointOptConfig joint_config() const {
    JointOptConfig jc;
    jc.iterations = iterations;
    jc.map_steps = map_steps;
    jc.rays_per_batch = rays_per_batch;
    jc.lr_map = lr_map;
    jc.lr_pose = lr_pose;
    jc.seed = static_cast<uint64_t>(seed);
    jc.sampler = sample;
    jc.loss.lambda1 = lambda1;
    jc.loss.lambda2 = lambda2;
    jc.loss.eps0 = eps0;
    return jc;
  }
};

namespace detail {

struct KeyBinding {
  const char* section;
  const char* key;
  enum Kind { Int, LLong, Double, Bool, Str } kind;
  void* ptr;
};

inline std::vector<KeyBinding> config_bindings(AppConfig& c) {
  using K = KeyBinding;
  return {
      {"fit", "tau_eps", K::Double, &c.fit.tau_eps},
      {"fit", "r2_min", K::Double, &c.fit.r2_min},
      {"fit", "area_min", K::Int, &c.fit.area_min},
      {"fit", "min_points", K::Int, &c.fit.min_points},
      {"rectify", "mode", K::Str, &c.rectify_mode},
      {"rectify", "max_rel_correction", K::Double, &c.max_rel_correction},
      {"sample", "n_stratified", K::Int, &c.sample.n_stratified},
      {"sample", "n_depth_guided", K::Int, &c.sample.n_depth_guided},
      {"sample", "d_near", K::Double, &c.sample.d_near},
      {"sample", "d_far", K::Double, &c.sample.d_far},
      {"sample", "jitter", K::Bool, &c.sample.jitter},
      {"model", "feat_dim", K::Int, &c.model.feat_dim},
      {"model", "sem_dim", K::Int, &c.model.sem_dim},
      {"model", "n_heads", K::Int, &c.model.n_heads},
      {"model", "pe_bands", K::Int, &c.model.pe_bands},
      {"model", "n_classes", K::Int, &c.model.n_classes},
      {"model", "n_segment_ids", K::Int, &c.model.n_segment_ids},
      {"model", "max_rays", K::Int, &c.model.max_rays},
      {"model", "quadric_masking", K::Bool, &c.model.quadric_masking},
      {"model", "pos_scale", K::Double, &c.model.pos_scale},
      {"model", "t_scale", K::Double, &c.model.t_scale},
      {"train", "iterations", K::Int, &c.iterations},
      {"train", "map_steps", K::Int, &c.map_steps},
      {"train", "rays_per_batch", K::Int, &c.rays_per_batch},
      {"train", "lr_map", K::Double, &c.lr_map},
      {"train", "lr_pose", K::Double, &c.lr_pose},
      {"train", "seed", K::LLong, &c.seed},
      {"train", "lambda1", K::Double, &c.lambda1},
      {"train", "lambda2", K::Double, &c.lambda2},
      {"train", "eps0", K::Double, &c.eps0},
      {"train", "tau_flow", K::Double, &c.tau_flow},
      {"train", "window_size", K::Int, &c.window_size},
      {"train", "use_keyframes", K::Bool, &c.use_keyframes},
      {"fuse", "voxel_size", K::Double, &c.voxel_size},
      {"fuse", "trunc_voxels", K::Double, &c.trunc_voxels},
      {"eval", "mesh_samples", K::Int, &c.mesh_samples},
      {"eval", "mesh_threshold", K::Double, &c.mesh_threshold},
      {"eval", "ate_scale", K::Bool, &c.ate_scale},
  };
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline void apply_value(const KeyBinding& b, const std::string& raw) {
  std::string v = trim(raw);
  const std::string where = std::string(b.section) + "." + b.key;
  try {
    size_t used = 0;
    switch (b.kind) {
      case KeyBinding::Int:
        *static_cast<int*>(b.ptr) = std::stoi(v, &used);
        break;
      case KeyBinding::LLong:
        *static_cast<long long*>(b.ptr) = std::stoll(v, &used);
        break;
      case KeyBinding::Double:
        *static_cast<double*>(b.ptr) = std::stod(v, &used);
        break;
      case KeyBinding::Bool: {
        if (v == "true" || v == "1") {
          *static_cast<bool*>(b.ptr) = true;
        } else if (v == "false" || v == "0") {
          *static_cast<bool*>(b.ptr) = false;
        } else {
          raise(ErrorKind::DataError, where + " expects a boolean, got " + v);
        }
        used = v.size();
        break;
      }
      case KeyBinding::Str:
        *static_cast<std::string*>(b.ptr) = v;
        used = v.size();
        break;
    }
    require(used == v.size(), ErrorKind::DataError,
            where + " has trailing characters: " + v);
  } catch (const std::invalid_argument&) {
    raise(ErrorKind::DataError, where + " has a malformed value: " + v);
  } catch (const std::out_of_range&) {
    raise(ErrorKind::DataError, where + " value out of range: " + v);
  }
}

inline void set_config_key(AppConfig& cfg, const std::string& section,
                           const std::string& key, const std::string& value) {
  for (const KeyBinding& b : config_bindings(cfg)) {
    if (section == b.section && key == b.key) {
      apply_value(b, value);
      return;
    }
  }
  raise(ErrorKind::DataError, "unknown config key " + section + "." + key);
}

}  // namespace detail

/// INI-style config: [section] headers, key = value lines, # or ;
/// comments. Unknown sections or keys are rejected.
inline void load_config_file(AppConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::DataError, "cannot read config " + path);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      require(s.back() == ']', ErrorKind::DataError,
              path + ":" + std::to_string(lineno) + ": bad section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      continue;
    }
    size_t eq = s.find('=');
    require(eq != std::string::npos, ErrorKind::DataError,
            path + ":" + std::to_string(lineno) + ": expected key = value");
    require(!section.empty(), ErrorKind::DataError,
            path + ":" + std::to_string(lineno) + ": key outside any section");
    detail::set_config_key(cfg, section, detail::trim(s.substr(0, eq)),
                           s.substr(eq + 1));
  }
}

/// "section.key=value" override, as accepted on the command line.
inline void apply_config_override(AppConfig& cfg, const std::string& spec) {
  size_t eq = spec.find('=');
  require(eq != std::string::npos, ErrorKind::DataError,
          "override must look like section.key=value: " + spec);
  std::string path = detail::trim(spec.substr(0, eq));
  size_t dot = path.find('.');
  require(dot != std::string::npos, ErrorKind::DataError,
          "override must look like section.key=value: " + spec);
  detail::set_config_key(cfg, path.substr(0, dot), path.substr(dot + 1),
                         spec.substr(eq + 1));
}

/// Full configuration echo, nested by section, for report files.
inline nlohmann::json config_to_json(const AppConfig& cfg) {
  AppConfig& mut = const_cast<AppConfig&>(cfg);
  nlohmann::json j;
  for (const detail::KeyBinding& b : detail::config_bindings(mut)) {
    switch (b.kind) {
      case detail::KeyBinding::Int:
        j[b.section][b.key] = *static_cast<const int*>(b.ptr);
        break;
      case detail::KeyBinding::LLong:
        j[b.section][b.key] = *static_cast<const long long*>(b.ptr);
        break;
      case detail::KeyBinding::Double:
        j[b.section][b.key] = *static_cast<const double*>(b.ptr);
        break;
      case detail::KeyBinding::Bool:
        j[b.section][b.key] = *static_cast<const bool*>(b.ptr);
        break;
      case detail::KeyBinding::Str:
        j[b.section][b.key] = *static_cast<const std::string*>(b.ptr);
        break;
    }
  }
  return j;
}

}  // namespace qslam
