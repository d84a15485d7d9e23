#pragma once

// Run configuration: an INI file with sections data, model, training,
// sampling and eval, merged over built-in defaults and then over
// `section.key=value` overrides. Unknown sections and keys are rejected.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "meshtron/hourglass.hpp"
#include "meshtron/procedural.hpp"
#include "meshtron/train.hpp"

namespace meshtron {

/// Unknown keys, malformed values and inconsistent settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class RunConfig {
 public:
  RunConfig() : tree_(defaults()) {}

  static RunConfig from_file(const std::filesystem::path& path) {
    RunConfig c;
    c.merge_file(path);
    return c;
  }

  void merge_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path.string());
    boost::property_tree::ptree t;
    try {
      boost::property_tree::read_ini(path.string(), t);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ParseError(e.message(), e.line());
    }
    for (const auto& [section, node] : t) {
      if (node.empty()) throw ParseError("config: key '" + section + "' outside any section");
      for (const auto& [key, value] : node) set(section + "." + key, value.get_value<std::string>());
    }
  }

  /// "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: " + assignment);
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
  }

  void set(const std::string& dotted, const std::string& value) {
    const auto dot = dotted.find('.');
    if (dot == std::string::npos) throw ConfigError("config key must be section.key: " + dotted);
    const std::string section = dotted.substr(0, dot);
    if (!tree_.get_child_optional(section)) throw ConfigError("config: unknown section '" + section + "'");
    if (!tree_.get_child(section).get_child_optional(dotted.substr(dot + 1)))
      throw ConfigError("config: unknown key '" + dotted + "'");
    tree_.put(dotted, value);
  }

  std::string get(const std::string& dotted) const { return tree_.get<std::string>(dotted); }

  template <typename V>
  V as(const std::string& dotted) const {
    try {
      return tree_.get<V>(dotted);
    } catch (const boost::property_tree::ptree_error&) {
      throw ConfigError("config: bad value for '" + dotted + "': " + get(dotted));
    }
  }

  GeneratorSpec generator() const {
    boost::property_tree::ptree g = tree_.get_child("data");
    for (const char* k : {"quant_level", "count", "val_count", "seed", "min_faces", "candidates", "points"}) g.erase(k);
    try {
      return parse_generator_spec(g);
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  }

  std::int32_t quant_level() const { return as<std::int32_t>("data.quant_level"); }

  PointPipelineOptions points() const {
    PointPipelineOptions o;
    o.candidates = as<std::size_t>("data.candidates");
    o.points = as<std::size_t>("data.points");
    o.augment = augment();
    return o;
  }

  AugmentOptions augment() const {
    return {as<double>("training.sigma_pos"), as<double>("training.sigma_normal"),
            as<double>("training.p_zero_normals")};
  }

  HourglassConfig model() const {
    HourglassConfig c;
    std::stringstream depths(get("model.depths"));
    std::string part;
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(depths, part, ',')) throw ConfigError("config: model.depths needs three values");
      try {
        c.depths[i] = std::stoi(part);
      } catch (const std::logic_error&) {
        throw ConfigError("config: bad value for 'model.depths'");
      }
    }
    if (std::getline(depths, part, ',')) throw ConfigError("config: model.depths needs three values");
    c.channels = as<int>("model.channels");
    c.head_channels = as<int>("model.head_channels");
    c.ffn_hidden = as<int>("model.ffn_hidden");
    c.rope_theta = as<double>("model.rope_theta");
    c.cross_attention_interval = as<int>("model.cross_attention_interval");
    c.window = as<std::size_t>("model.window");
    c.cond_queries = as<int>("model.cond_queries");
    c.encoder_depth = as<int>("model.encoder_depth");
    c.quant_level = quant_level();
    try {
      c.check();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
  }

  TrainOptions training() const {
    TrainOptions o;
    o.steps = as<std::size_t>("training.steps");
    o.batch = as<std::size_t>("training.batch");
    o.chunk = as<std::size_t>("training.chunk");
    o.lr = as<double>("training.lr");
    o.min_lr = as<double>("training.min_lr");
    o.warmup = as<std::size_t>("training.warmup");
    o.weight_decay = as<double>("training.weight_decay");
    o.clip = as<double>("training.clip");
    o.seed = as<std::uint64_t>("training.seed");
    o.noise = as<bool>("training.noise");
    o.augment = augment();
    return o;
  }

  /// Cross-field checks.
  void check() const {
    const HourglassConfig m = model();
    const TrainOptions t = training();
    generator();
    if (t.chunk % kGroup != 0) throw ConfigError("training.chunk must be a multiple of 9");
    if (as<std::size_t>("eval.window") % kGroup != 0) throw ConfigError("eval.window must be a multiple of 9");
    if (as<std::size_t>("sampling.window") % kGroup != 0) throw ConfigError("sampling.window must be a multiple of 9");
    if (t.min_lr > t.lr) throw ConfigError("training.min_lr exceeds training.lr");
    if (m.has_cross() && as<std::size_t>("data.points") == 0)
      throw ConfigError("a conditioned model needs data.points > 0");
    if (as<std::size_t>("data.points") > as<std::size_t>("data.candidates"))
      throw ConfigError("data.points exceeds data.candidates");
  }

  void write(std::ostream& out) const { boost::property_tree::write_ini(out, tree_); }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    write(out);
  }

 private:
  static boost::property_tree::ptree defaults() {
    boost::property_tree::ptree t;
    const GeneratorSpec g;
    t.put("data.family", to_string(g.family));
    t.put("data.size_min", g.size_min);
    t.put("data.size_max", g.size_max);
    t.put("data.rotate", g.rotate);
    t.put("data.box_grid_min", g.box_grid_min);
    t.put("data.box_grid_max", g.box_grid_max);
    t.put("data.cyl_segments_min", g.cyl_segments_min);
    t.put("data.cyl_segments_max", g.cyl_segments_max);
    t.put("data.cyl_rings_min", g.cyl_rings_min);
    t.put("data.cyl_rings_max", g.cyl_rings_max);
    t.put("data.ico_subdiv_min", g.ico_subdiv_min);
    t.put("data.ico_subdiv_max", g.ico_subdiv_max);
    t.put("data.extrude_sides_min", g.extrude_sides_min);
    t.put("data.extrude_sides_max", g.extrude_sides_max);
    t.put("data.extrude_rings_min", g.extrude_rings_min);
    t.put("data.extrude_rings_max", g.extrude_rings_max);
    t.put("data.union_count_min", g.union_count_min);
    t.put("data.union_count_max", g.union_count_max);
    t.put("data.quant_level", 128);
    t.put("data.count", 1000);
    t.put("data.val_count", 100);
    t.put("data.seed", 0);
    t.put("data.min_faces", 1);
    t.put("data.candidates", 8192);
    t.put("data.points", 1024);

    const HourglassConfig m;
    t.put("model.depths", std::to_string(m.depths[0]) + "," + std::to_string(m.depths[1]) + "," +
                              std::to_string(m.depths[2]));
    t.put("model.channels", m.channels);
    t.put("model.head_channels", m.head_channels);
    t.put("model.ffn_hidden", m.ffn_hidden);
    t.put("model.rope_theta", m.rope_theta);
    t.put("model.cross_attention_interval", m.cross_attention_interval);
    t.put("model.window", m.window);
    t.put("model.cond_queries", m.cond_queries);
    t.put("model.encoder_depth", m.encoder_depth);
    t.put("model.seed", 0);

    const TrainOptions o;
    t.put("training.steps", o.steps);
    t.put("training.batch", o.batch);
    t.put("training.chunk", o.chunk);
    t.put("training.lr", o.lr);
    t.put("training.min_lr", o.min_lr);
    t.put("training.warmup", o.warmup);
    t.put("training.weight_decay", o.weight_decay);
    t.put("training.clip", o.clip);
    t.put("training.seed", o.seed);
    t.put("training.noise", o.noise);
    t.put("training.sigma_pos", o.augment.sigma_pos);
    t.put("training.sigma_normal", o.augment.sigma_normal);
    t.put("training.p_zero_normals", o.augment.p_zero_normals);

    t.put("sampling.temperature", 1.0);
    t.put("sampling.seed", 0);
    t.put("sampling.min_faces", 0);
    t.put("sampling.window", m.window);

    t.put("eval.samples", 10000);
    t.put("eval.window", m.window);
    t.put("eval.seed", 0);
    return t;
  }

  boost::property_tree::ptree tree_;
};

}  // namespace meshtron
