#pragma once

// Canonical mesh <-> token sequence conversion.
//
// Layout: 9 x S, then per face three vertices of (y, z, x) coordinate tokens,
// then 9 x E, then optional P padding. Vertices inside a face are sorted by
// their (y, z, x) key and faces by their 9-token tuple.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "meshtron/mesh.hpp"

namespace meshtron {

using Token = std::uint16_t;

inline constexpr int kGroup = 9;        // tokens per face
inline constexpr int kVertexTokens = 3;  // tokens per vertex

struct VocabSpec {
  std::int32_t quant_level = 128;

  explicit constexpr VocabSpec(std::int32_t q = 128) : quant_level(q) {}
  constexpr Token start() const { return static_cast<Token>(quant_level); }
  constexpr Token end() const { return static_cast<Token>(quant_level + 1); }
  constexpr Token pad() const { return static_cast<Token>(quant_level + 2); }
  constexpr int size() const { return quant_level + 3; }
  constexpr bool is_coord(int t) const { return t >= 0 && t < quant_level; }
};

struct TokenSequence {
  std::int32_t quant_level = 128;
  std::vector<Token> tokens;

  VocabSpec vocab() const { return VocabSpec(quant_level); }
  bool operator==(const TokenSequence&) const = default;
};

/// One face as emitted: three vertices of (y, z, x).
using FaceKey = std::array<std::int32_t, kGroup>;

inline std::array<std::int32_t, 3> yzx(const IVec3& v) { return {v[1], v[2], v[0]}; }
inline IVec3 from_yzx(std::int32_t y, std::int32_t z, std::int32_t x) { return {x, y, z}; }

/// Faces in canonical order, as (y, z, x) tuples, duplicates removed.
inline std::vector<FaceKey> canonical_order(const QuantizedMesh& mesh) {
  std::vector<FaceKey> faces;
  faces.reserve(mesh.faces.size());
  for (const auto& f : mesh.faces) {
    std::array<std::array<std::int32_t, 3>, 3> verts{yzx(mesh.vertices.at(f[0])), yzx(mesh.vertices.at(f[1])),
                                                     yzx(mesh.vertices.at(f[2]))};
    std::sort(verts.begin(), verts.end());
    FaceKey key{};
    for (int v = 0; v < 3; ++v)
      for (int c = 0; c < 3; ++c) key[v * 3 + c] = verts[v][c];
    faces.push_back(key);
  }
  std::sort(faces.begin(), faces.end());
  faces.erase(std::unique(faces.begin(), faces.end()), faces.end());
  return faces;
}

inline TokenSequence encode(const QuantizedMesh& mesh) {
  const VocabSpec vocab(mesh.quant_level);
  const auto faces = canonical_order(mesh);
  if (faces.empty()) throw InvalidArgument("encode: mesh has no faces");
  TokenSequence seq;
  seq.quant_level = mesh.quant_level;
  seq.tokens.reserve(2 * kGroup + kGroup * faces.size());
  seq.tokens.insert(seq.tokens.end(), kGroup, vocab.start());
  for (const auto& f : faces)
    for (auto c : f) seq.tokens.push_back(static_cast<Token>(c));
  seq.tokens.insert(seq.tokens.end(), kGroup, vocab.end());
  return seq;
}

/// Checks S/E/P framing and returns the [begin, end) range of coordinate tokens.
inline std::pair<std::size_t, std::size_t> coordinate_span(const TokenSequence& seq) {
  const VocabSpec vocab = seq.vocab();
  const auto& t = seq.tokens;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] >= vocab.size()) throw FramingError("token id " + std::to_string(t[i]) + " >= vocab size at " + std::to_string(i));
  if (t.size() < 2 * kGroup) throw FramingError("sequence shorter than the S and E groups");
  for (int i = 0; i < kGroup; ++i)
    if (t[i] != vocab.start()) throw FramingError("expected S at position " + std::to_string(i));
  std::size_t i = kGroup;
  while (i < t.size() && vocab.is_coord(t[i])) ++i;
  const std::size_t coord_end = i;
  if ((coord_end - kGroup) % kGroup != 0) throw FramingError("coordinate count not divisible by 9");
  for (int k = 0; k < kGroup; ++k, ++i)
    if (i >= t.size() || t[i] != vocab.end()) throw FramingError("expected E at position " + std::to_string(i));
  for (; i < t.size(); ++i)
    if (t[i] != vocab.pad()) throw FramingError("expected P at position " + std::to_string(i));
  return {kGroup, coord_end};
}

/// Rebuilds a mesh from a framed sequence. Faces that repeat a vertex or repeat
/// an earlier face are dropped so the result is always a valid QuantizedMesh.
inline QuantizedMesh decode(const TokenSequence& seq) {
  const auto [begin, end] = coordinate_span(seq);
  QuantizedMesh mesh;
  mesh.quant_level = seq.quant_level;
  std::map<IVec3, std::uint32_t> ids;
  std::set<Triangle> seen;
  for (std::size_t g = begin; g < end; g += kGroup) {
    Triangle tri{};
    for (int v = 0; v < 3; ++v) {
      const auto* p = &seq.tokens[g + v * 3];
      const IVec3 pos = from_yzx(p[0], p[1], p[2]);
      auto [it, inserted] = ids.try_emplace(pos, static_cast<std::uint32_t>(mesh.vertices.size()));
      if (inserted) mesh.vertices.push_back(pos);
      tri[v] = it->second;
    }
    if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) continue;
    Triangle key = tri;
    std::sort(key.begin(), key.end());
    if (!seen.insert(key).second) continue;
    mesh.faces.push_back(tri);
  }
  // Vertices referenced only by dropped faces.
  std::vector<std::int64_t> remap(mesh.vertices.size(), -1);
  std::vector<IVec3> kept;
  for (auto& f : mesh.faces)
    for (auto& i : f) {
      if (remap[i] < 0) {
        remap[i] = static_cast<std::int64_t>(kept.size());
        kept.push_back(mesh.vertices[i]);
      }
      i = static_cast<std::uint32_t>(remap[i]);
    }
  mesh.vertices = std::move(kept);
  return mesh;
}

/// Fixed-length training window cut from a sequence.
struct Segment {
  std::size_t offset = 0;  // absolute position of tokens[0]
  std::vector<Token> tokens;
};

/// Face-aligned windows of `window` tokens every `stride` tokens; the last one is P-padded.
inline std::vector<Segment> chunk(const TokenSequence& seq, std::size_t window, std::size_t stride) {
  if (window < kGroup || window % kGroup != 0) throw InvalidArgument("chunk: window must be a positive multiple of 9");
  if (stride == 0 || stride % kGroup != 0) throw InvalidArgument("chunk: stride must be a positive multiple of 9");
  const Token pad = seq.vocab().pad();
  std::vector<Segment> out;
  for (std::size_t offset = 0;; offset += stride) {
    Segment s;
    s.offset = offset;
    s.tokens.assign(window, pad);
    const std::size_t n = offset < seq.tokens.size() ? std::min(window, seq.tokens.size() - offset) : 0;
    std::copy_n(seq.tokens.begin() + static_cast<std::ptrdiff_t>(offset), n, s.tokens.begin());
    out.push_back(std::move(s));
    if (offset + window >= seq.tokens.size()) break;
  }
  return out;
}

// ---- MTOK binary format --------------------------------------------------
// "MTOK" | version u32 | Q u32 | count u64 | count x u16, all little-endian.

inline constexpr std::uint32_t kMtokVersion = 1;

namespace detail {
template <typename U>
void put_le(std::ostream& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
template <typename U>
U get_le(std::istream& in) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw ParseError("unexpected end of binary stream");
    v |= static_cast<U>(static_cast<U>(c) << (8 * i));
  }
  return v;
}
}  // namespace detail

inline void write_mtok(std::ostream& out, const TokenSequence& seq) {
  out.write("MTOK", 4);
  detail::put_le<std::uint32_t>(out, kMtokVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(seq.quant_level));
  detail::put_le<std::uint64_t>(out, seq.tokens.size());
  for (auto t : seq.tokens) detail::put_le<std::uint16_t>(out, t);
}

inline TokenSequence read_mtok(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "MTOK") throw ParseError("not an MTOK stream");
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kMtokVersion) throw ParseError("unsupported MTOK version " + std::to_string(version));
  TokenSequence seq;
  const auto q = detail::get_le<std::uint32_t>(in);
  if (q < 2 || q > 65533) throw ParseError("MTOK: bad quantization level");
  seq.quant_level = static_cast<std::int32_t>(q);
  const auto count = detail::get_le<std::uint64_t>(in);
  seq.tokens.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(count, 1u << 24)));
  for (std::uint64_t i = 0; i < count; ++i) seq.tokens.push_back(detail::get_le<std::uint16_t>(in));
  return seq;
}

inline void save_mtok(const std::filesystem::path& path, const TokenSequence& seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_mtok(out, seq);
  if (!out) throw IoError("write failed for " + path.string());
}

inline TokenSequence load_mtok(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_mtok(in);
}

}  // namespace meshtron
