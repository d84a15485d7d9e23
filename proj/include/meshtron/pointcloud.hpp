#pragma once

// Conditioning point clouds: surface sampling, exterior-visibility filtering,
// farthest-point subsampling and training-time noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "meshtron/geometry.hpp"
#include "meshtron/mesh.hpp"
#include "meshtron/rng.hpp"

namespace meshtron {

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;  // unit length, or all exactly zero

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
};

/// Area-weighted uniform samples; each point carries its triangle's normal.
inline PointCloud sample_surface(const RawMesh& mesh, std::size_t count, std::uint64_t seed) {
  std::vector<double> cumulative;
  std::vector<Vec3> face_normals;
  cumulative.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    if (f.size() != 3) throw InvalidArgument("sample_surface: mesh must be triangulated");
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3 n = (mesh.vertices[f[1]] - a).cross(mesh.vertices[f[2]] - a);
    const double area = 0.5 * n.norm();
    total += area;
    cumulative.push_back(total);
    face_normals.push_back(area > 0.0 ? Vec3(n.normalized()) : Vec3::Zero());
  }
  if (!(total > 0.0)) throw InvalidArgument("sample_surface: mesh has zero surface area");
  Rng rng(seed);
  PointCloud pc;
  pc.positions.reserve(count);
  pc.normals.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    if (it == cumulative.end()) --it;
    const auto fi = static_cast<std::size_t>(it - cumulative.begin());
    const auto& f = mesh.faces[fi];
    const double s = std::sqrt(rng.uniform()), t = rng.uniform();
    pc.positions.push_back((1.0 - s) * mesh.vertices[f[0]] + s * (1.0 - t) * mesh.vertices[f[1]] +
                           s * t * mesh.vertices[f[2]]);
    pc.normals.push_back(face_normals[fi]);
  }
  return pc;
}

/// True if a ray leaving p (offset by epsilon) along any icosahedron face
/// direction escapes without hitting the mesh.
template <typename Occluder>
bool visible_from_outside(const Vec3& p, const Occluder& occluded, double epsilon) {
  for (const auto& d : icosahedron_directions())
    if (!occluded(Ray{p + epsilon * d, d})) return true;
  return false;
}

/// Keeps the points that can see out of the mesh along one of the 20 view directions.
inline PointCloud visibility_filter(const PointCloud& points, const RawMesh& mesh, double epsilon = 1e-4) {
  const Bvh bvh(mesh);
  auto occluded = [&](const Ray& r) { return bvh.occluded(r); };
  PointCloud out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!visible_from_outside(points.positions[i], occluded, epsilon)) continue;
    out.positions.push_back(points.positions[i]);
    out.normals.push_back(points.normals[i]);
  }
  return out;
}

/// Greedy farthest-point selection from a given start index. Returns indices
/// in selection order; distance ties go to the lowest index.
inline std::vector<std::size_t> fps_indices(const std::vector<Vec3>& pts, std::size_t k, std::size_t start) {
  const std::size_t n = pts.size();
  if (k > n) throw InvalidArgument("fps: k exceeds point count");
  if (k == 0) return {};
  if (start >= n) throw InvalidArgument("fps: start index out of range");
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::size_t current = start;
  for (;;) {
    chosen.push_back(current);
    if (chosen.size() == k) break;
    dist[current] = -1.0;
    std::size_t best = n;
    double best_d = -1.0;
    const Vec3 c = pts[current];
    for (std::size_t i = 0; i < n; ++i) {
      if (dist[i] < 0.0) continue;
      dist[i] = std::min(dist[i], (pts[i] - c).squaredNorm());
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

inline PointCloud subset(const PointCloud& pc, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.positions.reserve(idx.size());
  out.normals.reserve(idx.size());
  for (auto i : idx) {
    out.positions.push_back(pc.positions[i]);
    out.normals.push_back(pc.normals[i]);
  }
  return out;
}

inline PointCloud fps(const PointCloud& pc, std::size_t k, std::uint64_t seed) {
  if (k > pc.size()) throw InvalidArgument("fps: k exceeds point count");
  if (k == 0) return {};
  Rng rng(seed);
  return subset(pc, fps_indices(pc.positions, k, static_cast<std::size_t>(rng.below(pc.size()))));
}

struct AugmentOptions {
  double sigma_pos = 0.1;
  double sigma_normal = 0.2;
  double p_zero_normals = 0.5;
};

struct AugmentReport {
  double sigma_pos = 0.0;     // drawn for this cloud
  double sigma_normal = 0.0;
  bool normals_zeroed = false;
};

/// Gaussian jitter with per-cloud noise scales drawn from [0, sigma]; with
/// probability p_zero_normals every normal is replaced by zero.
inline PointCloud augment(const PointCloud& pc, const AugmentOptions& opt, std::uint64_t seed,
                          AugmentReport* report = nullptr) {
  Rng rng(seed);
  AugmentReport rep;
  rep.sigma_pos = rng.uniform(0.0, opt.sigma_pos);
  rep.sigma_normal = rng.uniform(0.0, opt.sigma_normal);
  rep.normals_zeroed = rng.bernoulli(opt.p_zero_normals);
  PointCloud out = pc;
  for (auto& p : out.positions) p += rep.sigma_pos * Vec3(rng.normal(), rng.normal(), rng.normal());
  for (auto& n : out.normals) {
    if (rep.normals_zeroed) {
      n.setZero();
      continue;
    }
    if (n.squaredNorm() == 0.0 || rep.sigma_normal == 0.0) continue;
    const Vec3 noisy = n + rep.sigma_normal * Vec3(rng.normal(), rng.normal(), rng.normal());
    if (noisy.squaredNorm() > 0.0) n = noisy.normalized();
  }
  if (report) *report = rep;
  return out;
}

struct PointPipelineOptions {
  std::size_t candidates = 8192;
  std::size_t points = 1024;
  double epsilon = 1e-4;
  bool noise = false;
  AugmentOptions augment{};
};

/// sample -> visibility filter -> FPS (-> optional noise). Returns fewer than
/// `points` points when fewer survive the visibility test; an entirely hidden
/// surface falls back to the unfiltered candidates.
inline PointCloud point_pipeline(const RawMesh& mesh, const PointPipelineOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  const PointCloud raw = sample_surface(mesh, opt.candidates, rng.bits());
  PointCloud visible = visibility_filter(raw, mesh, opt.epsilon);
  if (visible.empty()) visible = raw;
  PointCloud out = fps(visible, std::min(opt.points, visible.size()), rng.bits());
  if (opt.noise) out = augment(out, opt.augment, rng.bits());
  return out;
}

// ---- binary PLY (x y z nx ny nz as float32) --------------------------------

inline void write_ply(std::ostream& out, const PointCloud& pc) {
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << pc.size()
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property float nx\nproperty float ny\nproperty float nz\nend_header\n";
  auto put = [&](double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
  };
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (int a = 0; a < 3; ++a) put(pc.positions[i][a]);
    for (int a = 0; a < 3; ++a) put(pc.normals[i][a]);
  }
}

inline PointCloud read_ply(std::istream& in) {
  std::string line;
  std::size_t count = 0;
  std::vector<std::string> props;
  std::size_t lineno = 0;
  if (!std::getline(in, line) || line != "ply") throw ParseError("not a PLY file", 1);
  while (std::getline(in, line)) {
    ++lineno;
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian") throw ParseError("only binary_little_endian PLY is supported", lineno + 1);
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw ParseError("unexpected PLY element " + name, lineno + 1);
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      if (type != "float") throw ParseError("only float properties are supported", lineno + 1);
      props.push_back(name);
    }
  }
  if (props != std::vector<std::string>{"x", "y", "z", "nx", "ny", "nz"})
    throw ParseError("PLY must have properties x y z nx ny nz");
  PointCloud pc;
  auto get = [&] {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
      const int c = in.get();
      if (c == std::char_traits<char>::eof()) throw ParseError("truncated PLY payload");
      bits |= static_cast<std::uint32_t>(c) << (8 * i);
    }
    float f;
    std::memcpy(&f, &bits, 4);
    return static_cast<double>(f);
  };
  for (std::size_t i = 0; i < count; ++i) {
    Vec3 p, n;
    for (int a = 0; a < 3; ++a) p[a] = get();
    for (int a = 0; a < 3; ++a) n[a] = get();
    pc.positions.push_back(p);
    pc.normals.push_back(n);
  }
  return pc;
}

inline void save_ply(const std::filesystem::path& path, const PointCloud& pc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_ply(out, pc);
}

inline PointCloud load_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_ply(in);
}

}  // namespace meshtron
