#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qslam/common.hpp"
#include "qslam/geometry.hpp"

namespace qslam {

/// Truncated signed distance volume sampled at grid nodes. Node (i,j,k)
/// sits at origin + voxel_size * (i,j,k); values are normalized to [-1,1].
struct TsdfVolume {
  Vec3 origin = Vec3::Zero();
  double voxel_size = 0.01;
  double truncation = 0.05;  // meters, typically 5 voxels
  int nx = 0, ny = 0, nz = 0;
  std::vector<double> tsdf;
  std::vector<double> weight;

  TsdfVolume() = default;
  TsdfVolume(const Vec3& org, double voxel, int x, int y, int z)
      : origin(org), voxel_size(voxel), truncation(5.0 * voxel),
        nx(x), ny(y), nz(z),
        tsdf(static_cast<size_t>(x) * y * z, 1.0),
        weight(static_cast<size_t>(x) * y * z, 0.0) {
    require(voxel > 0.0 && x > 1 && y > 1 && z > 1, ErrorKind::InvalidInput,
            "bad volume shape");
  }

  size_t index(int i, int j, int k) const {
    return (static_cast<size_t>(k) * ny + j) * nx + i;
  }
  Vec3 node(int i, int j, int k) const {
    return origin + voxel_size * Vec3(i, j, k);
  }
};

/// Covers the axis-aligned box [lo, hi] with the given voxel size.
inline TsdfVolume make_volume(const Vec3& lo, const Vec3& hi, double voxel) {
  Vec3 span = hi - lo;
  require(span.minCoeff() > 0.0, ErrorKind::InvalidInput, "empty volume box");
  return TsdfVolume(lo, voxel, static_cast<int>(std::ceil(span.x() / voxel)) + 1,
                    static_cast<int>(std::ceil(span.y() / voxel)) + 1,
                    static_cast<int>(std::ceil(span.z() / voxel)) + 1);
}

/// Project every node into the depth map and fold the truncated
/// z-difference into the running average. Points more than one truncation
/// band behind the observed surface are left untouched (occluded space).
inline void tsdf_integrate(TsdfVolume& vol, const CameraIntrinsics& cam,
                           const Pose& pose, const DepthImage& depth) {
  cam.validate();
  Pose world_to_cam = pose.inverse();
  for (int k = 0; k < vol.nz; ++k) {
    for (int j = 0; j < vol.ny; ++j) {
      for (int i = 0; i < vol.nx; ++i) {
        Vec3 pc = world_to_cam.apply(vol.node(i, j, k));
        if (pc.z() <= 1e-9) continue;
        double u, v;
        if (!project_point(cam, pc, u, v)) continue;
        int px = static_cast<int>(std::lround(u));
        int py = static_cast<int>(std::lround(v));
        if (!depth.contains(px, py)) continue;
        double d = depth(px, py);
        if (d <= 0.0) continue;
        double sdf = d - pc.z();
        if (sdf < -vol.truncation) continue;
        double val = std::min(std::max(sdf, -vol.truncation), vol.truncation) /
                     vol.truncation;
        size_t idx = vol.index(i, j, k);
        double w = vol.weight[idx];
        vol.tsdf[idx] = (vol.tsdf[idx] * w + val) / (w + 1.0);
        vol.weight[idx] = w + 1.0;
      }
    }
  }
}

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
};

namespace detail {

/// Tetrahedra of the uniform six-fold cube decomposition. Corner bits are
/// x + 2y + 4z. Every tet contains the 0-7 main diagonal, and opposite
/// cube faces are split along matching diagonals, so adjacent cubes always
/// agree on the shared face and the surface comes out crack-free.
inline const int (&cube_tets())[6][4] {
  static const int tets[6][4] = {{0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7},
                                 {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7}};
  return tets;
}

struct EdgeKey {
  size_t a, b;
  bool operator<(const EdgeKey& o) const {
    return a != o.a ? a < o.a : b < o.b;
  }
};

}  // namespace detail

/// Zero-level surface of the volume via per-tetrahedron marching over a
/// six-tet cube decomposition. Only cubes whose 8 corners were all
/// observed contribute. Shared edge vertices are welded by construction.
inline TriangleMesh marching_cubes(const TsdfVolume& vol) {
  TriangleMesh mesh;
  std::map<detail::EdgeKey, int> edge_vertex;

  auto corner_of = [&](int i, int j, int k, int bit) {
    return std::array<int, 3>{i + (bit & 1), j + ((bit >> 1) & 1),
                              k + ((bit >> 2) & 1)};
  };

  auto keyed_vertex = [&](detail::EdgeKey key, const Vec3& p) {
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    mesh.vertices.push_back(p);
    int id = static_cast<int>(mesh.vertices.size()) - 1;
    edge_vertex.emplace(key, id);
    return id;
  };

  auto edge_point = [&](size_t ia, size_t ib, const Vec3& pa, const Vec3& pb,
                        double fa, double fb) {
    double t = fa / (fa - fb);
    // A crossing at (or within rounding of) an endpoint means the surface
    // passes through the grid node itself. Key that vertex by the node, not
    // the edge, so every tet touching the node reuses one copy; coincident
    // twins would otherwise open seams in the mesh.
    const double t_eps = 1e-9;
    if (t <= t_eps) return keyed_vertex({ia, ia}, pa);
    if (t >= 1.0 - t_eps) return keyed_vertex({ib, ib}, pb);
    detail::EdgeKey key = ia < ib ? detail::EdgeKey{ia, ib}
                                  : detail::EdgeKey{ib, ia};
    return keyed_vertex(key, pa + t * (pb - pa));
  };

  auto emit = [&](int v0, int v1, int v2, const Vec3& grad) {
    if (v0 == v1 || v1 == v2 || v0 == v2) return;  // collapsed at a node
    const Vec3& a = mesh.vertices[static_cast<size_t>(v0)];
    const Vec3& b = mesh.vertices[static_cast<size_t>(v1)];
    const Vec3& c = mesh.vertices[static_cast<size_t>(v2)];
    Vec3 n = (b - a).cross(c - a);
    if (n.norm() <= 2e-12) return;  // degenerate sliver
    // Orient the face normal toward increasing field value (free space).
    if (n.dot(grad) < 0.0) std::swap(v1, v2);
    mesh.triangles.push_back({v0, v1, v2});
  };

  for (int k = 0; k + 1 < vol.nz; ++k) {
    for (int j = 0; j + 1 < vol.ny; ++j) {
      for (int i = 0; i + 1 < vol.nx; ++i) {
        bool ok = true;
        double f[8];
        size_t gi[8];
        Vec3 pos[8];
        for (int c = 0; c < 8 && ok; ++c) {
          auto [ci, cj, ck] = corner_of(i, j, k, c);
          gi[c] = vol.index(ci, cj, ck);
          if (vol.weight[gi[c]] <= 0.0) ok = false;
          f[c] = vol.tsdf[gi[c]];
          pos[c] = vol.node(ci, cj, ck);
        }
        if (!ok) continue;

        for (const auto& tet : detail::cube_tets()) {
          int inside[4], n_in = 0;
          for (int t = 0; t < 4; ++t)
            if (f[tet[t]] < 0.0) inside[n_in++] = t;
          if (n_in == 0 || n_in == 4) continue;

          // Least-squares field gradient inside the tet for orientation.
          Mat3 dp;
          Vec3 df;
          for (int t = 1; t < 4; ++t) {
            dp.row(t - 1) = (pos[tet[t]] - pos[tet[0]]).transpose();
            df(t - 1) = f[tet[t]] - f[tet[0]];
          }
          Vec3 grad = dp.fullPivLu().solve(df);

          auto ep = [&](int ta, int tb) {
            return edge_point(gi[tet[ta]], gi[tet[tb]], pos[tet[ta]],
                              pos[tet[tb]], f[tet[ta]], f[tet[tb]]);
          };

          if (n_in == 1 || n_in == 3) {
            // One vertex separated from the other three.
            int lone = -1;
            if (n_in == 1) {
              lone = inside[0];
            } else {
              for (int t = 0; t < 4; ++t) {
                if (f[tet[t]] >= 0.0) lone = t;
              }
            }
            int others[3], m = 0;
            for (int t = 0; t < 4; ++t)
              if (t != lone) others[m++] = t;
            emit(ep(lone, others[0]), ep(lone, others[1]), ep(lone, others[2]),
                 grad);
          } else {
            // Two-two split: quad across the tet.
            int in0 = inside[0], in1 = inside[1];
            int outs[2], m = 0;
            for (int t = 0; t < 4; ++t)
              if (t != in0 && t != in1) outs[m++] = t;
            int v_ac = ep(in0, outs[0]);
            int v_ad = ep(in0, outs[1]);
            int v_bc = ep(in1, outs[0]);
            int v_bd = ep(in1, outs[1]);
            emit(v_ac, v_ad, v_bd, grad);
            emit(v_ac, v_bd, v_bc, grad);
          }
        }
      }
    }
  }
  return mesh;
}

/// Minimal ASCII PLY reader for meshes produced by write_ply.
inline TriangleMesh read_ply(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::DataError, "cannot read " + path);
  std::string line;
  size_t n_verts = 0, n_faces = 0;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "format") {
      std::string fmt;
      ss >> fmt;
      ascii = (fmt == "ascii");
    } else if (tok == "element") {
      std::string what;
      size_t count;
      ss >> what >> count;
      if (what == "vertex") n_verts = count;
      if (what == "face") n_faces = count;
    } else if (tok == "end_header") {
      break;
    }
  }
  require(ascii, ErrorKind::DataError, path + " is not ascii ply");

  TriangleMesh mesh;
  mesh.vertices.reserve(n_verts);
  for (size_t i = 0; i < n_verts; ++i) {
    double x, y, z;
    in >> x >> y >> z;
    require(!in.fail(), ErrorKind::DataError, "truncated ply vertices");
    mesh.vertices.push_back(Vec3(x, y, z));
  }
  for (size_t i = 0; i < n_faces; ++i) {
    int n, a, b, c;
    in >> n >> a >> b >> c;
    require(!in.fail() && n == 3, ErrorKind::DataError,
            "ply faces must be triangles");
    mesh.triangles.push_back({a, b, c});
  }
  return mesh;
}

/// ASCII PLY with a fixed numeric format, so identical meshes produce
/// byte-identical files.
inline void write_ply(const std::string& path, const TriangleMesh& mesh) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  require(fp != nullptr, ErrorKind::DataError, "cannot open " + path);
  std::fprintf(fp,
               "ply\nformat ascii 1.0\nelement vertex %zu\n"
               "property float x\nproperty float y\nproperty float z\n"
               "element face %zu\nproperty list uchar int vertex_indices\n"
               "end_header\n",
               mesh.vertices.size(), mesh.triangles.size());
  for (const Vec3& v : mesh.vertices)
    std::fprintf(fp, "%.9g %.9g %.9g\n", v.x(), v.y(), v.z());
  for (const auto& t : mesh.triangles)
    std::fprintf(fp, "3 %d %d %d\n", t[0], t[1], t[2]);
  std::fclose(fp);
}

}  // namespace qslam
