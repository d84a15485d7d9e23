#pragma once

// Checkpoint file: "MTCK" magic, u32 version, u64 manifest length, the JSON
// manifest (config, tensor names, shapes, dtype), then raw little-endian
// float32 tensors in manifest order. Encoder tensors live under "encoder/".

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "meshtron/hourglass.hpp"

namespace meshtron {

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const HourglassConfig& c) {
  return {{"depths", c.depths},
          {"channels", c.channels},
          {"head_channels", c.head_channels},
          {"ffn_hidden", c.ffn_hidden},
          {"rope_theta", c.rope_theta},
          {"cross_attention_interval", c.cross_attention_interval},
          {"window", c.window},
          {"quant_level", c.quant_level},
          {"cond_queries", c.cond_queries},
          {"encoder_depth", c.encoder_depth}};
}

inline HourglassConfig config_from_json(const nlohmann::json& j) {
  HourglassConfig c;
  try {
    c.depths = j.at("depths").get<std::array<int, 3>>();
    c.channels = j.at("channels").get<int>();
    c.head_channels = j.at("head_channels").get<int>();
    c.ffn_hidden = j.at("ffn_hidden").get<int>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.cross_attention_interval = j.at("cross_attention_interval").get<int>();
    c.window = j.at("window").get<std::size_t>();
    c.quant_level = j.at("quant_level").get<std::int32_t>();
    c.cond_queries = j.at("cond_queries").get<int>();
    c.encoder_depth = j.at("encoder_depth").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }
  c.check();
  return c;
}

template <typename T>
void write_checkpoint(std::ostream& out, const ParameterSet<T>& p, const HourglassConfig& cfg) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  nlohmann::json tensors = nlohmann::json::array();
  visit_parameters(p, [&](const std::string& name, const Mat<T>& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
  });
  const std::string manifest =
      nlohmann::json{{"config", config_to_json(cfg)}, {"dtype", "f32"}, {"tensors", tensors}}.dump();
  out.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = manifest.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(manifest.data(), static_cast<std::streamsize>(len));
  visit_parameters(p, [&](const std::string&, const Mat<T>& m) {
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = m.template cast<float>();
    out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  });
  if (!out) throw IoError("checkpoint: write failed");
}

template <typename T>
struct Checkpoint {
  HourglassConfig config;
  ParameterSet<T> params;
};

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in) {
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw ParseError("checkpoint: bad magic");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in) throw ParseError("checkpoint: truncated header");
  if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  if (len > (1u << 26)) throw ParseError("checkpoint: manifest too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }
  if (manifest.value("dtype", "") != "f32") throw ParseError("checkpoint: dtype must be f32");
  Checkpoint<T> ck;
  ck.config = config_from_json(manifest.at("config"));
  ck.params = init_model<T>(ck.config, 0);  // allocates every tensor with its shape
  const auto& listed = manifest.at("tensors");
  std::size_t i = 0;
  visit_parameters(ck.params, [&](const std::string& name, Mat<T>& m) {
    if (i >= listed.size()) throw ParseError("checkpoint: missing tensor " + name);
    const auto& e = listed[i++];
    const auto shape = e.at("shape").get<std::array<Eigen::Index, 2>>();
    if (e.at("name").get<std::string>() != name || shape[0] != m.rows() || shape[1] != m.cols())
      throw ParseError("checkpoint: tensor " + e.at("name").get<std::string>() + " does not match " + name);
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(m.rows(), m.cols());
    in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
    if (!in) throw ParseError("checkpoint: truncated tensor " + name);
    m = f.template cast<T>();
  });
  if (i != listed.size()) throw ParseError("checkpoint: unexpected extra tensors");
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& p, const HourglassConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_checkpoint(out, p, cfg);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_checkpoint<T>(in);
}

}  // namespace meshtron
