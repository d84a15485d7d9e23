// meshtron: command-line entry point.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "meshtron/checkpoint.hpp"
#include "meshtron/eval_bench.hpp"
#include "meshtron/obj_io.hpp"
#include "meshtron/order_fsm.hpp"
#include "meshtron/run_config.hpp"

namespace fs = std::filesystem;
using namespace meshtron;

namespace {

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,
  kParse = 4,
  kInvalid = 5,
  kConflict = 6,
  kRejected = 7,
  kNumeric = 8,
};

constexpr const char* kExitHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  invalid command-line flags\n"
    "  3  missing or unwritable file\n"
    "  4  malformed input file (OBJ, MTOK, PLY, config, checkpoint)\n"
    "  5  invalid argument value\n"
    "  6  configuration error (unknown key, bad value, conflicting settings)\n"
    "  7  sequence rejected by the order automaton or framing check\n"
    "  8  numerical failure (non-finite loss or gradient)\n"
    "Errors are reported on stderr as one line:\n"
    "  error code=<n> kind=<kind> message=\"<text>\"\n";

[[noreturn]] void fail(int code, const std::string& kind, const std::string& message) {
  std::string m = message;
  for (auto& c : m)
    if (c == '"' || c == '\n') c = '\'';
  std::cerr << "error code=" << code << " kind=" << kind << " message=\"" << m << "\"\n";
  std::exit(code);
}

/// Shared --config / --set handling.
struct ConfigFlags {
  std::string path;
  std::vector<std::string> overrides;

  void add(CLI::App* app) {
    app->add_option("--config", path, "INI run configuration");
    app->add_option("--set", overrides, "override, section.key=value (repeatable)");
  }
  RunConfig resolve() const {
    RunConfig c;
    if (!path.empty()) c.merge_file(path);
    for (const auto& o : overrides) c.apply_override(o);
    c.check();
    return c;
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::vector<TokenSequence> load_sequences(const std::vector<std::string>& paths) {
  std::vector<TokenSequence> out;
  for (const auto& p : paths) out.push_back(load_mtok(p));
  return out;
}

std::vector<TrainExample> dataset(const RunConfig& rc, bool validation) {
  const auto count = rc.as<std::size_t>(validation ? "data.val_count" : "data.count");
  const auto seed = rc.as<std::uint64_t>("data.seed") + (validation ? 1'000'000u : 0u);
  return build_dataset(rc.generator(), rc.quant_level(), count, seed, rc.points(), rc.as<std::size_t>("data.min_faces"));
}

Checkpoint<float> model_from(const std::string& checkpoint, const RunConfig& rc) {
  if (!checkpoint.empty()) return load_checkpoint<float>(checkpoint);
  Checkpoint<float> c;
  c.config = rc.model();
  c.params = init_model<float>(c.config, rc.as<std::uint64_t>("model.seed"));
  return c;
}

Mat<float> conditioning_for(const Checkpoint<float>& m, const PointCloud& pts, int faces, double quad) {
  if (!m.config.has_cross()) return {};
  return condition(m.params.encoder, m.config.head_channels, pts, faces, quad);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hourglass mesh-sequence toolkit"};
  app.footer(kExitHelp);
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (kernels are single-threaded; only 1 is supported)")
      ->check(CLI::PositiveNumber);

  // encode
  std::string in, out;
  int q = 128;
  auto* encode_cmd = app.add_subcommand("encode", "OBJ -> MTOK (triangulate, normalize, quantize, order)");
  encode_cmd->add_option("input", in, "OBJ file")->required();
  encode_cmd->add_option("output", out, "MTOK file")->required();
  encode_cmd->add_option("-q,--quant", q, "quantization level")->check(CLI::Range(2, 65533));

  auto* decode_cmd = app.add_subcommand("decode", "MTOK -> OBJ at bin centers");
  decode_cmd->add_option("input", in, "MTOK file")->required();
  decode_cmd->add_option("output", out, "OBJ file")->required();

  std::vector<std::string> inputs;
  auto* validate_cmd = app.add_subcommand("validate", "check MTOK files against the order automaton");
  validate_cmd->add_option("inputs", inputs, "MTOK files")->required();

  auto* stats_cmd = app.add_subcommand("stats", "invalid-fraction statistics as CSV");
  stats_cmd->add_option("inputs", inputs, "MTOK files (all with the same Q)");
  std::vector<int> stat_levels;
  std::size_t stat_count = 200;
  ConfigFlags stats_cfg;
  stats_cfg.add(stats_cmd);
  stats_cmd->add_option("--levels", stat_levels, "re-quantize the configured procedural set at these Q values");
  stats_cmd->add_option("--count", stat_count, "procedural meshes when --levels is given");

  std::size_t points = 1024, candidates = 8192;
  std::uint64_t seed = 0;
  bool noise = false;
  auto* sample_cmd = app.add_subcommand("sample-points", "OBJ -> binary PLY (visibility filter, FPS, noise)");
  sample_cmd->add_option("input", in, "OBJ file")->required();
  sample_cmd->add_option("output", out, "PLY file")->required();
  sample_cmd->add_option("--points", points, "points kept after FPS");
  sample_cmd->add_option("--candidates", candidates, "surface samples before filtering");
  sample_cmd->add_option("--seed", seed, "random seed");
  sample_cmd->add_flag("--noise", noise, "apply training-time noise");

  ConfigFlags gen_cfg;
  auto* gen_cmd = app.add_subcommand("gen-dataset", "procedural corpus: OBJ, MTOK and PLY per mesh plus manifest.json");
  gen_cfg.add(gen_cmd);
  gen_cmd->add_option("output", out, "output directory")->required();

  ConfigFlags train_cfg;
  auto* train_cmd = app.add_subcommand("train", "train on the configured procedural set");
  train_cfg.add(train_cmd);
  train_cmd->add_option("output", out, "output directory (checkpoint, metrics.csv, resolved.ini)")->required();

  ConfigFlags generate_cfg;
  std::string checkpoint, points_path;
  int faces = 0;
  double quad = 0.0;
  std::optional<double> temperature;
  auto* generate_cmd = app.add_subcommand("generate", "sample a mesh; writes OBJ and a JSON record beside it");
  generate_cfg.add(generate_cmd);
  generate_cmd->add_option("--checkpoint", checkpoint, "checkpoint (random init from --config when absent)")
      ;
  generate_cmd->add_option("--points", points_path, "conditioning PLY");
  generate_cmd->add_option("--faces", faces, "face-count condition")->required()->check(CLI::PositiveNumber);
  generate_cmd->add_option("--quad-ratio", quad, "quad-ratio condition")->check(CLI::Range(0.0, 1.0));
  generate_cmd->add_option("--seed", seed, "sampling seed");
  generate_cmd->add_option("--temperature", temperature, "0 selects greedy decoding");
  generate_cmd->add_option("output", out, "OBJ file")->required();

  ConfigFlags eval_cfg;
  auto* eval_cmd = app.add_subcommand("eval", "Chamfer and per-position loss CSVs on the validation set");
  eval_cfg.add(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  eval_cmd->add_option("output", out, "output directory")->required();

  std::vector<std::string> depth_specs{"24,0,0", "8,8,8", "4,8,12"};
  std::size_t length = 9216, window = 0;
  int channels = 1024, ffn = 2816, heads = 16;
  std::string csv;
  auto* cost_cmd = app.add_subcommand("cost-model", "analytic FLOP and KV-memory comparison");
  cost_cmd->add_option("--depths", depth_specs, "depth triples, e.g. 24,0,0 8,8,8");
  cost_cmd->add_option("--length", length, "sequence length L");
  cost_cmd->add_option("--window", window, "attention window (default L)");
  cost_cmd->add_option("--channels", channels, "model width");
  cost_cmd->add_option("--ffn", ffn, "FFN hidden width");
  cost_cmd->add_option("--heads", heads, "attention heads");
  cost_cmd->add_option("--csv", csv, "also write CSV here");

  ConfigFlags bench_cfg;
  std::vector<std::size_t> lengths;
  bool no_cache = false;
  std::size_t block = 36;
  auto* bench_cmd = app.add_subcommand("bench", "decode throughput CSV (length, tokens/s, peak cache entries)");
  bench_cfg.add(bench_cmd);
  bench_cmd->add_option("--checkpoint", checkpoint, "checkpoint (random init from --config when absent)")
      ;
  bench_cmd->add_option("--lengths", lengths, "lengths in tokens (default W, 2W, 4W, 8W)");
  bench_cmd->add_option("--block", block, "tokens timed at each length");
  bench_cmd->add_flag("--no-cache", no_cache, "recompute the prefix for every token");
  bench_cmd->add_option("output", out, "CSV file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail(kUsage, "usage", e.what());
  }
  if (threads != 1) fail(kInvalid, "invalid_argument", "--threads: only 1 thread is supported by this build");

  try {
    if (*encode_cmd) {
      QuantizationReport rep;
      const QuantizedMesh qm = quantize(normalize(triangulate(load_obj(in))), q, &rep);
      save_mtok(out, encode(qm));
      std::cout << "faces " << qm.faces.size() << " vertices " << qm.vertices.size() << " merged_vertices "
                << rep.vertices_merged << " dropped_degenerate " << rep.degenerate_faces_dropped << " dropped_duplicate "
                << rep.duplicate_faces_dropped << '\n';
    } else if (*decode_cmd) {
      write_obj(fs::path(out), decode(load_mtok(in)));
    } else if (*validate_cmd) {
      for (const auto& p : inputs) {
        validate_sequence(load_mtok(p));
        std::cout << p << " ok\n";
      }
    } else if (*stats_cmd) {
      std::cout << "quant_level,sequences,predictions,invalid_fraction";
      for (int k = 0; k < kGroup; ++k) std::cout << ",slot" << k;
      std::cout << '\n';
      auto row = [](const InvalidFractionStats& s, std::size_t n) {
        std::cout << s.quant_level << ',' << n << ',' << s.predictions << ',' << s.mean;
        for (double v : s.by_slot) std::cout << ',' << v;
        std::cout << '\n';
      };
      if (!stat_levels.empty()) {
        const RunConfig rc = stats_cfg.resolve();
        const GeneratorSpec spec = rc.generator();
        for (int level : stat_levels) {
          std::vector<TokenSequence> seqs;
          for (std::size_t i = 0; i < stat_count; ++i)
            seqs.push_back(encode(gen_quantized(rc.as<std::uint64_t>("data.seed") + i, spec, level)));
          row(invalid_fraction(seqs, level), seqs.size());
        }
      } else {
        if (inputs.empty()) throw InvalidArgument("stats: give MTOK files or --levels");
        const auto seqs = load_sequences(inputs);
        row(invalid_fraction(seqs, seqs.front().quant_level), seqs.size());
      }
    } else if (*sample_cmd) {
      PointPipelineOptions o;
      o.points = points;
      o.candidates = candidates;
      o.noise = noise;
      if (points > candidates) throw ConfigError("--points exceeds --candidates");
      save_ply(out, point_pipeline(normalize(triangulate(load_obj(in))), o, seed));
    } else if (*gen_cmd) {
      const RunConfig rc = gen_cfg.resolve();
      ensure_dir(out);
      const GeneratorSpec spec = rc.generator();
      const auto count = rc.as<std::size_t>("data.count");
      const auto first = rc.as<std::uint64_t>("data.seed");
      nlohmann::json manifest = nlohmann::json::array();
      for (std::uint64_t s = first; s < first + count; ++s) {
        RawMesh normalized;
        const QuantizedMesh qm = gen_quantized(s, spec, rc.quant_level(), &normalized);
        const std::string stem = "mesh_" + std::to_string(s);
        write_obj(fs::path(out) / (stem + ".obj"), normalized);
        save_mtok(fs::path(out) / (stem + ".mtok"), encode(qm));
        save_ply(fs::path(out) / (stem + ".ply"), point_pipeline(normalized, rc.points(), s));
        manifest.push_back({{"seed", s}, {"stem", stem}, {"faces", qm.faces.size()},
                            {"quad_ratio", normalized.quad_ratio}});
      }
      write_text(fs::path(out) / "manifest.json", manifest.dump(1) + "\n");
      rc.write(fs::path(out) / "resolved.ini");
    } else if (*train_cmd) {
      const RunConfig rc = train_cfg.resolve();
      ensure_dir(out);
      rc.write(fs::path(out) / "resolved.ini");
      const HourglassConfig cfg = rc.model();
      const auto data = dataset(rc, false);
      MetricsCsv metrics(fs::path(out) / "metrics.csv");
      const auto params = train(init_model<float>(cfg, rc.as<std::uint64_t>("model.seed")), cfg, rc.training(),
                                std::span<const TrainExample>(data), &metrics);
      save_checkpoint(fs::path(out) / "model.mtck", params, cfg);
    } else if (*generate_cmd) {
      const RunConfig rc = generate_cfg.resolve();
      const auto model = model_from(checkpoint, rc);
      PointCloud pts;
      if (model.config.has_cross()) {
        if (points_path.empty()) throw ConfigError("generate: this model is conditioned; --points is required");
        pts = load_ply(points_path);
      }
      GenerateOptions opt;
      opt.face_count = faces;
      opt.seed = seed;
      opt.temperature = temperature.value_or(rc.as<double>("sampling.temperature"));
      opt.min_faces = rc.as<int>("sampling.min_faces");
      opt.window = rc.as<std::size_t>("sampling.window");
      const Generation g = generate(model.params, model.config, conditioning_for(model, pts, faces, quad), opt);
      const fs::path obj(out);
      write_obj(obj, decode(g.sequence));
      save_mtok(fs::path(obj).replace_extension(".mtok"), g.sequence);
      const nlohmann::json record{{"faces", g.faces},           {"halt", to_string(g.halt)},
                                  {"face_condition", faces},    {"quad_ratio", quad},
                                  {"seed", seed},               {"temperature", opt.temperature},
                                  {"tokens", g.sequence.tokens.size()}};
      write_text(fs::path(obj).replace_extension(".json"), record.dump(1) + "\n");
      std::cout << "faces " << g.faces << " halt " << to_string(g.halt) << '\n';
    } else if (*eval_cmd) {
      const RunConfig rc = eval_cfg.resolve();
      ensure_dir(out);
      rc.write(fs::path(out) / "resolved.ini");
      const auto model = load_checkpoint<float>(checkpoint);
      if (model.config.quant_level != rc.quant_level())
        throw ConfigError("eval: checkpoint Q differs from data.quant_level");
      const auto samples = rc.as<std::size_t>("eval.samples");
      const auto eval_seed = rc.as<std::uint64_t>("eval.seed");
      const auto window = rc.as<std::size_t>("eval.window");
      const GeneratorSpec spec = rc.generator();
      const auto first = rc.as<std::uint64_t>("data.seed") + 1'000'000u;
      std::ofstream ch(fs::path(out) / "chamfer.csv");
      if (!ch) throw IoError("cannot write chamfer.csv");
      ch << "seed,faces,generated_faces,halt,chamfer_x1e2,floor_x1e2\n";
      std::vector<std::vector<double>> losses;
      for (std::uint64_t s = first; s < first + rc.as<std::size_t>("data.val_count"); ++s) {
        RawMesh normalized;
        gen_quantized(s, spec, rc.quant_level(), &normalized);
        const TrainExample ex = make_example(normalized, rc.quant_level(), rc.points(), s);
        losses.push_back(coordinate_losses(model.params, model.config, ex, window));
        GenerateOptions opt;
        opt.face_count = ex.face_count;
        opt.seed = eval_seed + s;
        opt.temperature = rc.as<double>("sampling.temperature");
        opt.min_faces = rc.as<int>("sampling.min_faces");
        opt.window = rc.as<std::size_t>("sampling.window");
        const Generation g = generate(model.params, model.config,
                                      conditioning_for(model, ex.points, ex.face_count, ex.quad_ratio), opt);
        const double floor = quantization_floor(normalized, rc.quant_level(), samples, eval_seed);
        const double cd = mesh_chamfer(normalized, dequantize(decode(g.sequence)), samples, eval_seed);
        ch << s << ',' << ex.face_count << ',' << g.faces << ',' << to_string(g.halt) << ','
           << chamfer_reported(cd) << ',' << chamfer_reported(floor) << '\n';
      }
      std::ofstream pp(fs::path(out) / "ppl_profile.csv");
      if (!pp) throw IoError("cannot write ppl_profile.csv");
      pp << "slot,mean_loss\n";
      const auto prof = ppl_profile(losses);
      for (int k = 0; k < kGroup; ++k) pp << k << ',' << prof[k] << '\n';
    } else if (*cost_cmd) {
      std::vector<CostReport> rows;
      for (const auto& spec : depth_specs) {
        RunConfig tmp;
        tmp.set("model.depths", spec);
        CostShape s;
        s.depths = tmp.model().depths;
        s.channels = channels;
        s.ffn_hidden = ffn;
        s.heads = heads;
        rows.push_back(cost_model(s, length, window ? window : length));
      }
      std::cout << "threads 1\n";
      write_cost_table(std::cout, rows);
      if (!csv.empty()) {
        std::ofstream f(csv);
        if (!f) throw IoError("cannot write " + csv);
        write_cost_csv(f, rows);
      }
    } else if (*bench_cmd) {
      const RunConfig rc = bench_cfg.resolve();
      const auto model = model_from(checkpoint, rc);
      const std::size_t w = model.config.window;
      if (lengths.empty()) lengths = {w, 2 * w, 4 * w, 8 * w};
      Mat<float> cond;
      if (model.config.has_cross()) {
        Rng rng(seed);
        PointCloud pts;
        for (int i = 0; i < 256; ++i) {
          pts.positions.emplace_back(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
          pts.normals.push_back(Vec3::UnitY());
        }
        cond = conditioning_for(model, pts, 1000, 0.0);
      }
      const auto rows = throughput_bench(model.params, model.config, cond, lengths, !no_cache, block, w, seed);
      std::ofstream f(out);
      if (!f) throw IoError("cannot write " + out);
      write_throughput_csv(f, rows);
      std::cout << "threads 1\n";
      write_throughput_csv(std::cout, rows);
    }
  } catch (const IoError& e) {
    fail(kIo, "io", e.what());
  } catch (const ParseError& e) {
    fail(kParse, "parse", e.what());
  } catch (const ConfigError& e) {
    fail(kConflict, "config", e.what());
  } catch (const OrderViolation& e) {
    fail(kRejected, "order_violation", e.what());
  } catch (const FramingError& e) {
    fail(kRejected, "framing", e.what());
  } catch (const NumericError& e) {
    fail(kNumeric, "numeric", e.what());
  } catch (const InvalidArgument& e) {
    fail(kInvalid, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    fail(kInternal, "internal", e.what());
  }
  return kOk;
}
