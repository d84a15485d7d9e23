#pragma once

// Wavefront OBJ reading and writing. Only `v` and `f` records are
// interpreted; everything else is skipped.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "meshtron/mesh.hpp"

namespace meshtron {

namespace detail {

inline std::string_view next_field(std::string_view& line) {
  const auto start = line.find_first_not_of(" \t\r");
  if (start == std::string_view::npos) {
    line = {};
    return {};
  }
  line.remove_prefix(start);
  const auto end = line.find_first_of(" \t\r");
  const auto field = line.substr(0, end);
  line.remove_prefix(end == std::string_view::npos ? line.size() : end);
  return field;
}

}  // namespace detail

/// Parses OBJ text. quad_ratio is taken from face arities before any triangulation.
inline RawMesh parse_obj(std::istream& in) {
  RawMesh mesh;
  std::size_t quads = 0;
  std::string buffer;
  std::size_t lineno = 0;
  while (std::getline(in, buffer)) {
    ++lineno;
    std::string_view line(buffer);
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tag = detail::next_field(line);
    if (tag == "v") {
      Vec3 p;
      for (int a = 0; a < 3; ++a) {
        const auto field = detail::next_field(line);
        if (field.empty()) throw ParseError("vertex record needs 3 coordinates", lineno);
        // from_chars for double is available in libstdc++ 11.
        double value = 0.0;
        const auto res = std::from_chars(field.data(), field.data() + field.size(), value);
        if (res.ec != std::errc() || res.ptr != field.data() + field.size() || !std::isfinite(value))
          throw ParseError("bad vertex coordinate '" + std::string(field) + "'", lineno);
        p[a] = value;
      }
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      Polygon face;
      for (auto field = detail::next_field(line); !field.empty(); field = detail::next_field(line)) {
        const auto slash = field.find('/');
        const auto head = field.substr(0, slash);
        long long idx = 0;
        const auto res = std::from_chars(head.data(), head.data() + head.size(), idx);
        if (res.ec != std::errc() || res.ptr != head.data() + head.size() || idx == 0)
          throw ParseError("bad face index '" + std::string(field) + "'", lineno);
        const auto n = static_cast<long long>(mesh.vertices.size());
        const long long resolved = idx > 0 ? idx - 1 : n + idx;
        if (resolved < 0 || resolved >= n) throw ParseError("face index out of range", lineno);
        face.push_back(static_cast<std::uint32_t>(resolved));
      }
      if (face.size() < 3) throw ParseError("face record needs at least 3 indices", lineno);
      Polygon sorted = face;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ParseError("face repeats a vertex", lineno);
      if (face.size() == 4) ++quads;
      mesh.faces.push_back(std::move(face));
    }
  }
  if (mesh.vertices.empty() || mesh.faces.empty()) throw ParseError("empty mesh");
  mesh.quad_ratio = static_cast<double>(quads) / static_cast<double>(mesh.faces.size());
  return mesh;
}

inline RawMesh load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_obj(in);
}

inline void write_obj(std::ostream& out, const RawMesh& mesh) {
  char buf[96];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& f : mesh.faces) {
    out << 'f';
    for (auto i : f) out << ' ' << (i + 1);
    out << '\n';
  }
}

inline void write_obj(const std::filesystem::path& path, const RawMesh& mesh) {
  if (path.empty()) throw IoError("write_obj: empty path");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_obj(out, mesh);
  if (!out) throw IoError("write failed for " + path.string());
}

/// Quantized meshes are written at their bin centers.
inline void write_obj(const std::filesystem::path& path, const QuantizedMesh& mesh) {
  write_obj(path, dequantize(mesh));
}

}  // namespace meshtron
