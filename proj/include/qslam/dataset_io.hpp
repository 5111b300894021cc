#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "qslam/common.hpp"
#include "qslam/geometry.hpp"
#include "qslam/png_io.hpp"
#include "qslam/quadric_fit.hpp"
#include "qslam/scene_synth.hpp"

namespace qslam {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string frame_name(int frame_id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d.png", frame_id);
  return buf;
}

// ---- camera.txt: "fx fy cx cy width height" ----

inline void write_camera(const fs::path& path, const CameraIntrinsics& cam) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::DataError, "cannot write " + path.string());
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g %d %d\n", cam.fx,
                cam.fy, cam.cx, cam.cy, cam.width, cam.height);
  out << buf;
}

inline CameraIntrinsics read_camera(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::DataError, "cannot read " + path.string());
  CameraIntrinsics cam;
  in >> cam.fx >> cam.fy >> cam.cx >> cam.cy >> cam.width >> cam.height;
  require(!in.fail(), ErrorKind::DataError, "malformed " + path.string());
  cam.validate();
  return cam;
}

// ---- poses.txt: "frame_id tx ty tz qx qy qz qw", camera to world ----

inline void write_poses(const fs::path& path, const std::vector<Pose>& poses) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::DataError, "cannot write " + path.string());
  for (size_t i = 0; i < poses.size(); ++i) {
    const Pose& p = poses[i];
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%zu %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", i,
                  p.translation.x(), p.translation.y(), p.translation.z(),
                  p.rotation.x(), p.rotation.y(), p.rotation.z(),
                  p.rotation.w());
    out << buf;
  }
}

inline std::vector<Pose> read_poses(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::DataError, "cannot read " + path.string());
  std::vector<Pose> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    long id;
    double tx, ty, tz, qx, qy, qz, qw;
    ss >> id >> tx >> ty >> tz >> qx >> qy >> qz >> qw;
    require(!ss.fail(), ErrorKind::DataError, "malformed pose line: " + line);
    require(id == static_cast<long>(poses.size()), ErrorKind::DataError,
            "pose frame ids must be contiguous from 0");
    Pose p;
    p.translation = Vec3(tx, ty, tz);
    p.rotation = Eigen::Quaterniond(qw, qx, qy, qz).normalized();
    poses.push_back(p);
  }
  require(!poses.empty(), ErrorKind::DataError, "no poses in " + path.string());
  return poses;
}

// ---- depth (16-bit millimeters, 0 invalid) and mask (16-bit ids) ----

inline GrayImage16 depth_to_mm(const DepthImage& depth) {
  GrayImage16 out(depth.width(), depth.height());
  for (size_t i = 0; i < depth.size(); ++i) {
    double mm = depth.data()[i] * 1000.0;
    long v = std::lround(std::min(std::max(mm, 0.0), 65535.0));
    out.data()[i] = static_cast<uint16_t>(v);
  }
  return out;
}

inline DepthImage mm_to_depth(const GrayImage16& img) {
  DepthImage out(img.width(), img.height());
  for (size_t i = 0; i < img.size(); ++i)
    out.data()[i] = img.data()[i] / 1000.0;
  return out;
}

inline GrayImage16 mask_to_png(const MaskImage& mask) {
  GrayImage16 out(mask.width(), mask.height());
  for (size_t i = 0; i < mask.size(); ++i) {
    int id = mask.data()[i];
    require(id >= 0 && id <= 65535, ErrorKind::DataError,
            "segment id out of 16-bit range");
    out.data()[i] = static_cast<uint16_t>(id);
  }
  return out;
}

inline MaskImage png_to_mask(const GrayImage16& img) {
  MaskImage out(img.width(), img.height());
  for (size_t i = 0; i < img.size(); ++i)
    out.data()[i] = static_cast<int>(img.data()[i]);
  return out;
}

// ---- scene description ----

inline json scene_to_json(const SyntheticScene& scene) {
  json j;
  j["primitives"] = json::array();
  for (const QuadricPrimitive& p : scene.primitives) {
    json e;
    e["cq"] = std::vector<double>(p.coef.cq.data(), p.coef.cq.data() + 6);
    e["cl"] = std::vector<double>(p.coef.cl.data(), p.coef.cl.data() + 3);
    e["c"] = p.coef.c;
    e["color"] = {p.color.x(), p.color.y(), p.color.z()};
    e["semantic_id"] = p.semantic_id;
    e["bbox_min"] = {p.valid_region.min.x(), p.valid_region.min.y(),
                     p.valid_region.min.z()};
    e["bbox_max"] = {p.valid_region.max.x(), p.valid_region.max.y(),
                     p.valid_region.max.z()};
    j["primitives"].push_back(e);
  }
  return j;
}

inline SyntheticScene scene_from_json(const json& j) {
  SyntheticScene scene;
  require(j.contains("primitives") && j["primitives"].is_array(),
          ErrorKind::DataError, "scene json lacks primitives");
  for (const json& e : j["primitives"]) {
    QuadricPrimitive p;
    for (int i = 0; i < 6; ++i) p.coef.cq(i) = e.at("cq").at(i).get<double>();
    for (int i = 0; i < 3; ++i) p.coef.cl(i) = e.at("cl").at(i).get<double>();
    p.coef.c = e.at("c").get<double>();
    for (int i = 0; i < 3; ++i) {
      p.color(i) = e.at("color").at(i).get<double>();
      p.valid_region.min(i) = e.at("bbox_min").at(i).get<double>();
      p.valid_region.max(i) = e.at("bbox_max").at(i).get<double>();
    }
    p.semantic_id = e.at("semantic_id").get<int>();
    scene.primitives.push_back(p);
  }
  return scene;
}

// ---- whole datasets ----

struct Dataset {
  CameraIntrinsics cam;
  std::vector<Pose> poses;
  std::vector<ColorImage> rgb;
  std::vector<DepthImage> depth;
  std::vector<MaskImage> mask;
  std::vector<DepthImage> gt_depth;  // empty when not available
  std::vector<Pose> gt_poses;        // empty when not available
};

inline void write_dataset(const fs::path& root, const Dataset& ds) {
  size_t n = ds.poses.size();
  require(ds.rgb.size() == n && ds.depth.size() == n && ds.mask.size() == n,
          ErrorKind::InvalidInput, "dataset arrays disagree on frame count");
  fs::create_directories(root / "rgb");
  fs::create_directories(root / "depth");
  fs::create_directories(root / "mask");
  write_camera(root / "camera.txt", ds.cam);
  write_poses(root / "poses.txt", ds.poses);
  for (size_t i = 0; i < n; ++i) {
    std::string name = frame_name(static_cast<int>(i));
    write_png_rgb8((root / "rgb" / name).string(), ds.rgb[i]);
    write_png_gray16((root / "depth" / name).string(), depth_to_mm(ds.depth[i]));
    write_png_gray16((root / "mask" / name).string(), mask_to_png(ds.mask[i]));
  }
  if (!ds.gt_depth.empty()) {
    require(ds.gt_depth.size() == n, ErrorKind::InvalidInput,
            "gt_depth frame count mismatch");
    fs::create_directories(root / "gt_depth");
    for (size_t i = 0; i < n; ++i)
      write_png_gray16((root / "gt_depth" / frame_name(static_cast<int>(i))).string(),
                       depth_to_mm(ds.gt_depth[i]));
  }
  if (!ds.gt_poses.empty()) {
    require(ds.gt_poses.size() == n, ErrorKind::InvalidInput,
            "gt_poses frame count mismatch");
    write_poses(root / "gt_poses.txt", ds.gt_poses);
  }
}

inline Dataset read_dataset(const fs::path& root) {
  require(fs::exists(root / "camera.txt"), ErrorKind::DataError,
          "no camera.txt under " + root.string());
  Dataset ds;
  ds.cam = read_camera(root / "camera.txt");
  ds.poses = read_poses(root / "poses.txt");
  for (size_t i = 0; i < ds.poses.size(); ++i) {
    std::string name = frame_name(static_cast<int>(i));
    ds.rgb.push_back(read_png_rgb8((root / "rgb" / name).string()));
    ds.depth.push_back(mm_to_depth(read_png_gray16((root / "depth" / name).string())));
    ds.mask.push_back(png_to_mask(read_png_gray16((root / "mask" / name).string())));
    require(ds.rgb.back().width() == ds.cam.width &&
                ds.rgb.back().height() == ds.cam.height &&
                ds.depth.back().width() == ds.cam.width &&
                ds.mask.back().width() == ds.cam.width,
            ErrorKind::DataError, "frame size does not match camera.txt");
    if (fs::exists(root / "gt_depth" / name))
      ds.gt_depth.push_back(
          mm_to_depth(read_png_gray16((root / "gt_depth" / name).string())));
  }
  if (!ds.gt_depth.empty())
    require(ds.gt_depth.size() == ds.poses.size(), ErrorKind::DataError,
            "incomplete gt_depth directory");
  if (fs::exists(root / "gt_poses.txt"))
    ds.gt_poses = read_poses(root / "gt_poses.txt");
  return ds;
}

// ---- per-segment fit records, one json object per line ----

struct FitRecord {
  int frame = 0;
  QuadricFitResult fit;
};

inline json fit_to_json(int frame, const QuadricFitResult& f) {
  json e;
  e["frame"] = frame;
  e["segment"] = f.segment_id;
  e["cq"] = std::vector<double>(f.coef.cq.data(), f.coef.cq.data() + 6);
  e["cl"] = std::vector<double>(f.coef.cl.data(), f.coef.cl.data() + 3);
  e["c"] = f.coef.c;
  e["epsilon"] = f.epsilon;
  e["r2"] = f.r2;
  e["n_points"] = f.n_points;
  e["fit_ok"] = f.fit_ok;
  e["accepted"] = f.accepted;
  return e;
}

inline void write_fit_records(const fs::path& path,
                              const std::vector<FitRecord>& records) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::DataError, "cannot write " + path.string());
  for (const FitRecord& r : records) out << fit_to_json(r.frame, r.fit).dump() << "\n";
}

inline std::vector<FitRecord> read_fit_records(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::DataError, "cannot read " + path.string());
  std::vector<FitRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json e = json::parse(line);
    FitRecord r;
    r.frame = e.at("frame").get<int>();
    r.fit.segment_id = e.at("segment").get<int>();
    for (int i = 0; i < 6; ++i) r.fit.coef.cq(i) = e.at("cq").at(i).get<double>();
    for (int i = 0; i < 3; ++i) r.fit.coef.cl(i) = e.at("cl").at(i).get<double>();
    r.fit.coef.c = e.at("c").get<double>();
    r.fit.epsilon = e.at("epsilon").get<double>();
    r.fit.r2 = e.at("r2").get<double>();
    r.fit.n_points = e.at("n_points").get<int>();
    r.fit.fit_ok = e.at("fit_ok").get<bool>();
    r.fit.accepted = e.at("accepted").get<bool>();
    records.push_back(r);
  }
  return records;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::DataError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::DataError, "cannot read " + path.string());
  return json::parse(in);
}

}  // namespace qslam
