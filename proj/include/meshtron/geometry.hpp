#pragma once

// Ray casting against triangle soups: Moller-Trumbore intersection and a
// median-split AABB hierarchy for any-hit queries.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "meshtron/mesh.hpp"

namespace meshtron {

struct Ray {
  Vec3 origin;
  Vec3 dir;
};

/// Hit distance along the ray, or a negative value on a miss. Hits at t <= 0 are ignored.
inline double intersect(const Ray& ray, const Vec3& a, const Vec3& b, const Vec3& c) {
  constexpr double eps = 1e-12;
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = ray.dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < eps) return -1.0;
  const double inv = 1.0 / det;
  const Vec3 s = ray.origin - a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return -1.0;
  const Vec3 q = s.cross(e1);
  const double v = ray.dir.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return -1.0;
  const double t = e2.dot(q) * inv;
  return t > 0.0 ? t : -1.0;
}

/// The 20 unit face normals of a regular icosahedron.
inline const std::array<Vec3, 20>& icosahedron_directions() {
  static const std::array<Vec3, 20> dirs = [] {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    const Vec3 v[12] = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                        {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    const int f[20][3] = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                          {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                          {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    std::array<Vec3, 20> out;
    for (int i = 0; i < 20; ++i) out[i] = (v[f[i][0]] + v[f[i][1]] + v[f[i][2]]).normalized();
    return out;
  }();
  return dirs;
}

class Bvh {
 public:
  explicit Bvh(const RawMesh& mesh) {
    for (const auto& f : mesh.faces) {
      if (f.size() != 3) throw InvalidArgument("Bvh: mesh must be triangulated");
      tris_.push_back({mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]});
    }
    order_.resize(tris_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    if (!tris_.empty()) build(0, static_cast<std::uint32_t>(tris_.size()));
  }

  /// True if the ray hits any triangle at t > 0.
  bool occluded(const Ray& ray) const {
    if (nodes_.empty()) return false;
    const Vec3 inv = ray.dir.cwiseInverse();
    std::uint32_t stack[64];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
      const Node& n = nodes_[stack[--top]];
      if (!hits_box(n.box, ray.origin, inv)) continue;
      if (n.count > 0) {
        for (std::uint32_t i = n.first; i < n.first + n.count; ++i) {
          const auto& t = tris_[order_[i]];
          if (intersect(ray, t[0], t[1], t[2]) > 0.0) return true;
        }
      } else {
        stack[top++] = n.first;
        stack[top++] = n.first + 1;
      }
    }
    return false;
  }

  std::size_t size() const { return tris_.size(); }

 private:
  struct Node {
    Aabb box;
    std::uint32_t first = 0;  // children index (inner) or first triangle (leaf)
    std::uint32_t count = 0;  // 0 for inner nodes
  };

  static bool hits_box(const Aabb& b, const Vec3& o, const Vec3& inv) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      double lo = (b.lo[a] - o[a]) * inv[a];
      double hi = (b.hi[a] - o[a]) * inv[a];
      if (std::isnan(lo) || std::isnan(hi)) {  // axis-parallel ray touching a slab plane
        if (o[a] < b.lo[a] || o[a] > b.hi[a]) return false;
        continue;
      }
      if (lo > hi) std::swap(lo, hi);
      t0 = std::max(t0, lo);
      t1 = std::min(t1, hi);
      // Slack keeps grazing rays that Moller-Trumbore may still report as hits.
      if (t0 > t1 * (1.0 + 1e-12) + 1e-12) return false;
    }
    return true;
  }

  // Nodes are stored with both children adjacent; the root is nodes_[0].
  void build(std::uint32_t first, std::uint32_t count) {
    nodes_.reserve(2 * tris_.size());
    nodes_.push_back({});
    build_node(0, first, count, 0);
  }

  void build_node(std::uint32_t index, std::uint32_t first, std::uint32_t count, int depth) {
    Aabb box, centroids;
    for (std::uint32_t i = first; i < first + count; ++i) {
      const auto& t = tris_[order_[i]];
      for (const auto& p : t) box.extend(p);
      centroids.extend((t[0] + t[1] + t[2]) / 3.0);
    }
    // Pad by a relative epsilon so boundary hits are never culled.
    const Vec3 pad = Vec3::Constant(1e-9) + 1e-9 * (box.hi - box.lo);
    box.lo -= pad;
    box.hi += pad;
    nodes_[index].box = box;
    if (count <= 4 || depth >= 60) {
      nodes_[index].first = first;
      nodes_[index].count = count;
      return;
    }
    int axis = 0;
    const Vec3 ext = centroids.hi - centroids.lo;
    if (ext[1] > ext[axis]) axis = 1;
    if (ext[2] > ext[axis]) axis = 2;
    const std::uint32_t mid = first + count / 2;
    std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                     [&](std::uint32_t a, std::uint32_t b) {
                       const auto& ta = tris_[a];
                       const auto& tb = tris_[b];
                       return (ta[0] + ta[1] + ta[2])[axis] < (tb[0] + tb[1] + tb[2])[axis];
                     });
    const auto child = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back({});
    nodes_.push_back({});
    nodes_[index].first = child;
    nodes_[index].count = 0;
    build_node(child, first, mid - first, depth + 1);
    build_node(child + 1, mid, first + count - mid, depth + 1);
  }

  std::vector<std::array<Vec3, 3>> tris_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace meshtron
