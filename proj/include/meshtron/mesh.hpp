#pragma once

// Mesh containers and the geometric preprocessing chain
// (triangulate -> normalize -> quantize), plus the inverse dequantize.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "meshtron/error.hpp"

namespace meshtron {

using Vec3 = Eigen::Vector3d;
using Polygon = std::vector<std::uint32_t>;

/// Floating-point polygon mesh as read from disk or produced by a generator.
struct RawMesh {
  std::vector<Vec3> vertices;
  std::vector<Polygon> faces;
  /// Share of faces that were quads before triangulation.
  double quad_ratio = 0.0;

  bool is_triangulated() const {
    return std::all_of(faces.begin(), faces.end(), [](const Polygon& f) { return f.size() == 3; });
  }
};

using IVec3 = std::array<std::int32_t, 3>;
using Triangle = std::array<std::uint32_t, 3>;

/// Triangle mesh on a Q-level integer grid.
struct QuantizedMesh {
  std::int32_t quant_level = 128;
  std::vector<IVec3> vertices;
  std::vector<Triangle> faces;
};

inline void validate(const RawMesh& m) {
  if (!(m.quad_ratio >= 0.0 && m.quad_ratio <= 1.0))
    throw InvalidArgument("quad_ratio outside [0,1]");
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const auto& face = m.faces[f];
    if (face.size() < 3) throw InvalidArgument("face " + std::to_string(f) + " has fewer than 3 vertices");
    for (auto i : face)
      if (i >= m.vertices.size()) throw InvalidArgument("face " + std::to_string(f) + " index out of range");
    Polygon sorted = face;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw InvalidArgument("face " + std::to_string(f) + " repeats a vertex");
  }
}

/// Throws if any QuantizedMesh invariant is broken.
inline void validate(const QuantizedMesh& m) {
  const std::int32_t q = m.quant_level;
  if (q < 2) throw InvalidArgument("quant_level must be >= 2");
  std::set<IVec3> seen;
  for (const auto& v : m.vertices) {
    for (auto c : v)
      if (c < 0 || c >= q) throw InvalidArgument("quantized coordinate outside [0, Q-1]");
    if (!seen.insert(v).second) throw InvalidArgument("duplicate quantized vertex");
  }
  std::set<Triangle> faces;
  for (auto f : m.faces) {
    for (auto i : f)
      if (i >= m.vertices.size()) throw InvalidArgument("face index out of range");
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) throw InvalidArgument("degenerate face");
    std::sort(f.begin(), f.end());
    if (!faces.insert(f).second) throw InvalidArgument("duplicate face");
  }
}

struct TriangulationReport {
  std::size_t polygons_split = 0;
  std::size_t degenerate_dropped = 0;
};

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

/// Fan-triangulates every n-gon from its first vertex. quad_ratio is carried over.
inline RawMesh triangulate(const RawMesh& mesh, TriangulationReport* report = nullptr) {
  RawMesh out;
  out.vertices = mesh.vertices;
  out.quad_ratio = mesh.quad_ratio;
  TriangulationReport rep;
  for (const auto& face : mesh.faces) {
    if (face.size() == 3) {
      out.faces.push_back(face);
      continue;
    }
    ++rep.polygons_split;
    for (std::size_t k = 1; k + 1 < face.size(); ++k) {
      const auto a = face[0], b = face[k], c = face[k + 1];
      if (triangle_area(mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]) == 0.0) {
        ++rep.degenerate_dropped;
        continue;
      }
      out.faces.push_back({a, b, c});
    }
  }
  if (report) *report = rep;
  return out;
}

struct Aabb {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());
  void extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
};

inline Aabb bounds(const std::vector<Vec3>& pts) {
  Aabb box;
  for (const auto& p : pts) box.extend(p);
  return box;
}

/// Centers the bounding box at the origin and scales its longest side to 1.
inline RawMesh normalize(const RawMesh& mesh) {
  if (mesh.vertices.empty()) throw InvalidArgument("normalize: mesh has no vertices");
  const Aabb box = bounds(mesh.vertices);
  const double extent = (box.hi - box.lo).maxCoeff();
  if (!(extent > 0.0)) throw InvalidArgument("normalize: zero-extent mesh");
  const Vec3 center = 0.5 * (box.lo + box.hi);
  RawMesh out = mesh;
  for (auto& v : out.vertices) {
    v = (v - center) / extent;
    // Pin the longest axis exactly; rounding can otherwise leave 0.5000000001.
    v = v.cwiseMax(Vec3::Constant(-0.5)).cwiseMin(Vec3::Constant(0.5));
  }
  return out;
}

inline std::int32_t quantize_coord(double x, std::int32_t q) {
  const auto v = static_cast<std::int64_t>(std::floor((x + 0.5) * q));
  return static_cast<std::int32_t>(std::clamp<std::int64_t>(v, 0, q - 1));
}

inline double dequantize_coord(std::int32_t c, std::int32_t q) {
  return (static_cast<double>(c) + 0.5) / q - 0.5;
}

struct QuantizationReport {
  std::size_t vertices_merged = 0;
  std::size_t degenerate_faces_dropped = 0;
  std::size_t duplicate_faces_dropped = 0;
};

/// Snaps a normalized triangle mesh to a Q-level grid. Coincident vertices are
/// merged; faces that collapse or duplicate another face are dropped.
inline QuantizedMesh quantize(const RawMesh& mesh, std::int32_t q, QuantizationReport* report = nullptr) {
  if (q < 2) throw InvalidArgument("quantize: Q must be >= 2");
  constexpr double tol = 1e-6;
  QuantizationReport rep;
  QuantizedMesh out;
  out.quant_level = q;

  std::vector<IVec3> snapped(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      const double x = mesh.vertices[i][a];
      if (!(x >= -0.5 - tol && x <= 0.5 + tol))
        throw InvalidArgument("quantize: vertex " + std::to_string(i) + " outside [-0.5, 0.5]");
      snapped[i][a] = quantize_coord(x, q);
    }
  }

  // Only referenced vertices survive; ids follow first use.
  std::map<IVec3, std::uint32_t> ids;
  std::set<Triangle> seen;
  std::size_t referenced = 0;
  std::vector<char> counted(mesh.vertices.size(), 0);
  for (const auto& face : mesh.faces) {
    if (face.size() != 3) throw InvalidArgument("quantize: mesh must be triangulated");
    Triangle t{};
    for (int k = 0; k < 3; ++k) {
      const auto src = face[k];
      if (src >= mesh.vertices.size()) throw InvalidArgument("quantize: face index out of range");
      if (!counted[src]) {
        counted[src] = 1;
        ++referenced;
      }
      auto [it, inserted] = ids.try_emplace(snapped[src], static_cast<std::uint32_t>(out.vertices.size()));
      if (inserted) out.vertices.push_back(snapped[src]);
      t[k] = it->second;
    }
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
      ++rep.degenerate_faces_dropped;
      continue;
    }
    Triangle key = t;
    std::sort(key.begin(), key.end());
    if (!seen.insert(key).second) {
      ++rep.duplicate_faces_dropped;
      continue;
    }
    out.faces.push_back(t);
  }
  rep.vertices_merged = referenced - out.vertices.size();

  // Vertices used only by dropped faces are removed.
  std::vector<std::int64_t> remap(out.vertices.size(), -1);
  std::vector<IVec3> kept;
  for (auto& f : out.faces)
    for (auto& i : f) {
      if (remap[i] < 0) {
        remap[i] = static_cast<std::int64_t>(kept.size());
        kept.push_back(out.vertices[i]);
      }
      i = static_cast<std::uint32_t>(remap[i]);
    }
  out.vertices = std::move(kept);
  if (report) *report = rep;
  return out;
}

/// Maps grid coordinates back to bin centers.
inline RawMesh dequantize(const QuantizedMesh& mesh) {
  RawMesh out;
  out.vertices.reserve(mesh.vertices.size());
  for (const auto& v : mesh.vertices)
    out.vertices.emplace_back(dequantize_coord(v[0], mesh.quant_level), dequantize_coord(v[1], mesh.quant_level),
                              dequantize_coord(v[2], mesh.quant_level));
  for (const auto& f : mesh.faces) out.faces.push_back({f[0], f[1], f[2]});
  return out;
}

inline double surface_area(const RawMesh& mesh) {
  double area = 0.0;
  for (const auto& f : mesh.faces)
    for (std::size_t k = 1; k + 1 < f.size(); ++k)
      area += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[k]], mesh.vertices[f[k + 1]]);
  return area;
}

/// Set of triangles as sorted coordinate triples; orientation-free comparison key.
inline std::set<std::array<IVec3, 3>> face_set(const QuantizedMesh& mesh) {
  std::set<std::array<IVec3, 3>> out;
  for (const auto& f : mesh.faces) {
    std::array<IVec3, 3> t{mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]};
    std::sort(t.begin(), t.end());
    out.insert(t);
  }
  return out;
}

}  // namespace meshtron
