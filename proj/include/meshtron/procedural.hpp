#pragma once

// Seeded procedural shape families used as the training/evaluation corpus.

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "meshtron/mesh.hpp"
#include "meshtron/rng.hpp"

namespace meshtron {

enum class ShapeFamily { box, cylinder, icosphere, extrusion, box_union, mixed };

inline const char* to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::box: return "box";
    case ShapeFamily::cylinder: return "cylinder";
    case ShapeFamily::icosphere: return "icosphere";
    case ShapeFamily::extrusion: return "extrusion";
    case ShapeFamily::box_union: return "box_union";
    case ShapeFamily::mixed: return "mixed";
  }
  return "?";
}

inline ShapeFamily parse_family(const std::string& s) {
  for (auto f : {ShapeFamily::box, ShapeFamily::cylinder, ShapeFamily::icosphere, ShapeFamily::extrusion,
                 ShapeFamily::box_union, ShapeFamily::mixed})
    if (s == to_string(f)) return f;
  throw InvalidArgument("unknown shape family '" + s + "'");
}

/// Generator parameters. Integer ranges are inclusive.
struct GeneratorSpec {
  ShapeFamily family = ShapeFamily::mixed;
  double size_min = 0.2;
  double size_max = 1.0;
  int box_grid_min = 1, box_grid_max = 1;
  int cyl_segments_min = 6, cyl_segments_max = 24;
  int cyl_rings_min = 1, cyl_rings_max = 4;
  int ico_subdiv_min = 0, ico_subdiv_max = 2;
  int extrude_sides_min = 5, extrude_sides_max = 16;
  int extrude_rings_min = 1, extrude_rings_max = 3;
  int union_count_min = 2, union_count_max = 4;
  bool rotate = true;

  void check() const {
    auto range = [](int lo, int hi, int floor, const char* name) {
      if (lo < floor || hi < lo) throw InvalidArgument(std::string("generator spec: bad range for ") + name);
    };
    if (!(size_min > 0.0 && size_max >= size_min)) throw InvalidArgument("generator spec: bad size range");
    range(box_grid_min, box_grid_max, 1, "box_grid");
    range(cyl_segments_min, cyl_segments_max, 3, "cyl_segments");
    range(cyl_rings_min, cyl_rings_max, 1, "cyl_rings");
    range(ico_subdiv_min, ico_subdiv_max, 0, "ico_subdiv");
    range(extrude_sides_min, extrude_sides_max, 3, "extrude_sides");
    range(extrude_rings_min, extrude_rings_max, 1, "extrude_rings");
    range(union_count_min, union_count_max, 1, "union_count");
  }
};

/// Reads a generator spec from `key = value` lines (an optional [generator]
/// section is accepted). Unknown keys are rejected.
inline GeneratorSpec parse_generator_spec(const boost::property_tree::ptree& tree) {
  GeneratorSpec spec;
  const auto& root = tree.get_child_optional("generator") ? tree.get_child("generator") : tree;
  std::map<std::string, int*> ints{
      {"box_grid_min", &spec.box_grid_min},           {"box_grid_max", &spec.box_grid_max},
      {"cyl_segments_min", &spec.cyl_segments_min},   {"cyl_segments_max", &spec.cyl_segments_max},
      {"cyl_rings_min", &spec.cyl_rings_min},         {"cyl_rings_max", &spec.cyl_rings_max},
      {"ico_subdiv_min", &spec.ico_subdiv_min},       {"ico_subdiv_max", &spec.ico_subdiv_max},
      {"extrude_sides_min", &spec.extrude_sides_min}, {"extrude_sides_max", &spec.extrude_sides_max},
      {"extrude_rings_min", &spec.extrude_rings_min}, {"extrude_rings_max", &spec.extrude_rings_max},
      {"union_count_min", &spec.union_count_min},     {"union_count_max", &spec.union_count_max}};
  for (const auto& [key, node] : root) {
    if (!node.empty()) continue;  // other sections
    const auto value = node.get_value<std::string>();
    try {
      if (key == "family") spec.family = parse_family(value);
      else if (key == "size_min") spec.size_min = std::stod(value);
      else if (key == "size_max") spec.size_max = std::stod(value);
      else if (key == "rotate") spec.rotate = (value == "true" || value == "1");
      else if (auto it = ints.find(key); it != ints.end()) *it->second = std::stoi(value);
      else throw InvalidArgument("generator spec: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw InvalidArgument("generator spec: bad value for '" + key + "'");
    }
  }
  spec.check();
  return spec;
}

inline GeneratorSpec load_generator_spec(const std::filesystem::path& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(e.message(), e.line());
  }
  return parse_generator_spec(tree);
}

namespace detail {

inline std::uint32_t add_vertex(RawMesh& m, const Vec3& p) {
  m.vertices.push_back(p);
  return static_cast<std::uint32_t>(m.vertices.size() - 1);
}

/// Axis-aligned box with each side split into an n x n grid of quads.
inline void append_box(RawMesh& m, const Vec3& center, const Vec3& half, int grid) {
  // Corners of the unit cube, one quad per side, outward winding.
  static const int sides[6][4][3] = {
      {{-1, -1, -1}, {-1, -1, 1}, {-1, 1, 1}, {-1, 1, -1}}, {{1, -1, -1}, {1, 1, -1}, {1, 1, 1}, {1, -1, 1}},
      {{-1, -1, -1}, {1, -1, -1}, {1, -1, 1}, {-1, -1, 1}}, {{-1, 1, -1}, {-1, 1, 1}, {1, 1, 1}, {1, 1, -1}},
      {{-1, -1, -1}, {-1, 1, -1}, {1, 1, -1}, {1, -1, -1}}, {{-1, -1, 1}, {1, -1, 1}, {1, 1, 1}, {-1, 1, 1}}};
  std::map<std::array<int, 3>, std::uint32_t> ids;  // shared grid points along edges
  auto vertex = [&](const Vec3& unit) {
    // Grid points live on an integer lattice of step 2/grid.
    std::array<int, 3> key{};
    for (int a = 0; a < 3; ++a) key[a] = static_cast<int>(std::lround((unit[a] + 1.0) * grid * 0.5));
    auto [it, inserted] = ids.try_emplace(key, 0);
    if (inserted) it->second = add_vertex(m, center + unit.cwiseProduct(half));
    return it->second;
  };
  for (const auto& side : sides) {
    const Vec3 c0(side[0][0], side[0][1], side[0][2]);
    const Vec3 c1(side[1][0], side[1][1], side[1][2]);
    const Vec3 c3(side[3][0], side[3][1], side[3][2]);
    const Vec3 du = (c1 - c0) / grid, dv = (c3 - c0) / grid;
    for (int i = 0; i < grid; ++i)
      for (int j = 0; j < grid; ++j) {
        const Vec3 p = c0 + du * i + dv * j;
        m.faces.push_back({vertex(p), vertex(p + du), vertex(p + du + dv), vertex(p + dv)});
      }
  }
}

inline void append_cylinder(RawMesh& m, const Vec3& half, int segments, int rings) {
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  for (int r = 0; r <= rings; ++r) {
    const double y = -half.y() + 2.0 * half.y() * r / rings;
    for (int s = 0; s < segments; ++s) {
      const double t = 2.0 * M_PI * s / segments;
      add_vertex(m, Vec3(half.x() * std::cos(t), y, half.z() * std::sin(t)));
    }
  }
  auto id = [&](int r, int s) { return base + static_cast<std::uint32_t>(r * segments + (s % segments)); };
  for (int r = 0; r < rings; ++r)
    for (int s = 0; s < segments; ++s) m.faces.push_back({id(r, s), id(r + 1, s), id(r + 1, s + 1), id(r, s + 1)});
  Polygon bottom, top;
  for (int s = 0; s < segments; ++s) {
    bottom.push_back(id(0, s));
    top.push_back(id(rings, segments - 1 - s));
  }
  m.faces.push_back(std::move(bottom));
  m.faces.push_back(std::move(top));
}

inline void append_icosphere(RawMesh& m, const Vec3& half, int subdiv) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> pts = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                           {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : pts) p.normalize();
  std::vector<Triangle> tris = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                                {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                                {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int level = 0; level < subdiv; ++level) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mid;
    auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
      const auto key = std::minmax(a, b);
      auto [it, inserted] = mid.try_emplace({key.first, key.second}, 0);
      if (inserted) {
        pts.push_back((pts[a] + pts[b]).normalized());
        it->second = static_cast<std::uint32_t>(pts.size() - 1);
      }
      return it->second;
    };
    std::vector<Triangle> next;
    next.reserve(tris.size() * 4);
    for (const auto& f : tris) {
      const auto ab = midpoint(f[0], f[1]), bc = midpoint(f[1], f[2]), ca = midpoint(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    tris = std::move(next);
  }
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  for (const auto& p : pts) add_vertex(m, p.cwiseProduct(half));
  for (const auto& f : tris) m.faces.push_back({base + f[0], base + f[1], base + f[2]});
}

/// Star-shaped random polygon extruded along y; caps are fanned from a center vertex.
inline void append_extrusion(RawMesh& m, Rng& rng, const Vec3& half, int sides, int rings) {
  std::vector<double> angle(sides), radius(sides);
  for (int s = 0; s < sides; ++s) {
    angle[s] = 2.0 * M_PI * (s + rng.uniform(0.1, 0.9)) / sides;
    radius[s] = rng.uniform(0.4, 1.0);
  }
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  for (int r = 0; r <= rings; ++r) {
    const double y = -half.y() + 2.0 * half.y() * r / rings;
    for (int s = 0; s < sides; ++s)
      add_vertex(m, Vec3(half.x() * radius[s] * std::cos(angle[s]), y, half.z() * radius[s] * std::sin(angle[s])));
  }
  auto id = [&](int r, int s) { return base + static_cast<std::uint32_t>(r * sides + (s % sides)); };
  for (int r = 0; r < rings; ++r)
    for (int s = 0; s < sides; ++s) m.faces.push_back({id(r, s), id(r + 1, s), id(r + 1, s + 1), id(r, s + 1)});
  const auto bottom = add_vertex(m, Vec3(0, -half.y(), 0));
  const auto top = add_vertex(m, Vec3(0, half.y(), 0));
  for (int s = 0; s < sides; ++s) {
    m.faces.push_back({bottom, id(0, s + 1), id(0, s)});
    m.faces.push_back({top, id(rings, s), id(rings, s + 1)});
  }
}

inline Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

inline void recompute_quad_ratio(RawMesh& m) {
  std::size_t quads = 0;
  for (const auto& f : m.faces) quads += f.size() == 4;
  m.quad_ratio = m.faces.empty() ? 0.0 : static_cast<double>(quads) / static_cast<double>(m.faces.size());
}

}  // namespace detail

/// Draws one mesh from the spec's family. Polygons are kept (not triangulated)
/// so that quad_ratio reflects the pre-triangulation topology.
inline RawMesh gen_procedural(std::uint64_t seed, const GeneratorSpec& spec) {
  spec.check();
  Rng rng(seed);
  ShapeFamily family = spec.family;
  if (family == ShapeFamily::mixed) family = static_cast<ShapeFamily>(rng.below(5));
  auto size = [&] { return rng.uniform(spec.size_min, spec.size_max); };
  auto range = [&](int lo, int hi) { return static_cast<int>(rng.integer(lo, hi)); };

  RawMesh m;
  const Vec3 half(0.5 * size(), 0.5 * size(), 0.5 * size());
  switch (family) {
    case ShapeFamily::box: detail::append_box(m, Vec3::Zero(), half, range(spec.box_grid_min, spec.box_grid_max)); break;
    case ShapeFamily::cylinder: {
      const int segments = range(spec.cyl_segments_min, spec.cyl_segments_max);
      detail::append_cylinder(m, half, segments, range(spec.cyl_rings_min, spec.cyl_rings_max));
      break;
    }
    case ShapeFamily::icosphere: detail::append_icosphere(m, half, range(spec.ico_subdiv_min, spec.ico_subdiv_max)); break;
    case ShapeFamily::extrusion: {
      const int sides = range(spec.extrude_sides_min, spec.extrude_sides_max);
      detail::append_extrusion(m, rng, half, sides, range(spec.extrude_rings_min, spec.extrude_rings_max));
      break;
    }
    case ShapeFamily::box_union: {
      const int count = range(spec.union_count_min, spec.union_count_max);
      const int grid = range(spec.box_grid_min, spec.box_grid_max);
      for (int k = 0; k < count; ++k) {
        const Vec3 h(0.5 * size(), 0.5 * size(), 0.5 * size());
        const Vec3 c(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
        detail::append_box(m, c * spec.size_max, h, grid);
      }
      break;
    }
    case ShapeFamily::mixed: break;
  }
  if (spec.rotate) {
    const Eigen::Matrix3d r = detail::random_rotation(rng);
    for (auto& v : m.vertices) v = r * v;
  }
  detail::recompute_quad_ratio(m);
  return m;
}

/// Procedural mesh run through triangulate -> normalize -> quantize.
inline QuantizedMesh gen_quantized(std::uint64_t seed, const GeneratorSpec& spec, std::int32_t q,
                                   RawMesh* normalized = nullptr) {
  RawMesh tri = normalize(triangulate(gen_procedural(seed, spec)));
  QuantizedMesh out = quantize(tri, q);
  if (normalized) *normalized = std::move(tri);
  return out;
}

}  // namespace meshtron
