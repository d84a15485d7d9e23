#pragma once

// Evaluation metrics and efficiency instrumentation: Chamfer distance,
// per-position loss folding, the analytic cost model and timing benches.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "meshtron/decode.hpp"
#include "meshtron/pointcloud.hpp"
#include "meshtron/train.hpp"

namespace meshtron {

// ---------------------------------------------------------------------------
// Chamfer distance

/// Static 3-d tree for exact nearest-neighbour queries.
class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& pts) : pts_(pts), idx_(pts.size()) {
    std::iota(idx_.begin(), idx_.end(), std::size_t{0});
    build(0, idx_.size(), 0);
  }

  /// Squared distance to the nearest stored point.
  double nearest_sq(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(0, idx_.size(), 0, q, best);
    return best;
  }

 private:
  static constexpr std::size_t kLeaf = 8;

  void build(std::size_t lo, std::size_t hi, int axis) {
    if (hi - lo <= kLeaf) return;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(idx_.begin() + static_cast<std::ptrdiff_t>(lo), idx_.begin() + static_cast<std::ptrdiff_t>(mid),
                     idx_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t a, std::size_t b) { return pts_[a][axis] < pts_[b][axis]; });
    build(lo, mid, (axis + 1) % 3);
    build(mid + 1, hi, (axis + 1) % 3);
  }

  void search(std::size_t lo, std::size_t hi, int axis, const Vec3& q, double& best) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t i = lo; i < hi; ++i) best = std::min(best, (pts_[idx_[i]] - q).squaredNorm());
      return;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    const Vec3& m = pts_[idx_[mid]];
    best = std::min(best, (m - q).squaredNorm());
    const double d = q[axis] - m[axis];
    const int next = (axis + 1) % 3;
    if (d < 0) {
      search(lo, mid, next, q, best);
      if (d * d < best) search(mid + 1, hi, next, q, best);
    } else {
      search(mid + 1, hi, next, q, best);
      if (d * d < best) search(lo, mid, next, q, best);
    }
  }

  const std::vector<Vec3>& pts_;
  std::vector<std::size_t> idx_;
};

namespace detail {
inline double mean_nearest(const std::vector<Vec3>& from, const KdTree& to) {
  double s = 0.0;
  for (const auto& p : from) s += std::sqrt(to.nearest_sq(p));
  return s / static_cast<double>(from.size());
}
}  // namespace detail

/// 0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|), non-squared distances.
inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) throw InvalidArgument("chamfer: empty point set");
  const KdTree ta(a), tb(b);
  return 0.5 * (detail::mean_nearest(a, tb) + detail::mean_nearest(b, ta));
}

/// Reference double loop; same arithmetic as the tree, so results are identical.
inline double chamfer_brute_force(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) throw InvalidArgument("chamfer: empty point set");
  auto one_way = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    double s = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, (q - p).squaredNorm());
      s += std::sqrt(best);
    }
    return s / static_cast<double>(from.size());
  };
  return 0.5 * (one_way(a, b) + one_way(b, a));
}

/// Chamfer in the usual reporting unit (x 10^-2).
inline double chamfer_reported(double value) { return value * 100.0; }

inline double mesh_chamfer(const RawMesh& a, const RawMesh& b, std::size_t samples = 10000, std::uint64_t seed = 0) {
  return chamfer(sample_surface(a, samples, seed).positions, sample_surface(b, samples, seed + 1).positions);
}

/// Chamfer between a normalized mesh and its own quantize-dequantize image.
inline double quantization_floor(const RawMesh& normalized, std::int32_t q, std::size_t samples = 10000,
                                 std::uint64_t seed = 0) {
  return mesh_chamfer(normalized, dequantize(quantize(normalized, q)), samples, seed);
}

// ---------------------------------------------------------------------------
// Per-position loss folding

/// losses[s][i] is the loss of the i-th coordinate token of sequence s.
inline std::array<double, kGroup> ppl_profile(const std::vector<std::vector<double>>& losses) {
  std::array<double, kGroup> sum{}, n{};
  for (const auto& seq : losses)
    for (std::size_t i = 0; i < seq.size(); ++i) {
      sum[i % kGroup] += seq[i];
      n[i % kGroup] += 1.0;
    }
  std::array<double, kGroup> out{};
  for (int k = 0; k < kGroup; ++k) out[k] = n[k] > 0 ? sum[k] / n[k] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

/// Loss of every coordinate token of one sequence, in order, from a single
/// forward pass over the whole sequence with the given window.
template <typename T>
std::vector<double> coordinate_losses(const ParameterSet<T>& p, const HourglassConfig& cfg, const TrainExample& ex,
                                      std::size_t window) {
  const TokenSequence& seq = ex.sequence;
  const std::size_t n = seq.tokens.size() - seq.tokens.size() % kGroup;
  Mat<T> cond;
  if (cfg.has_cross()) cond = condition(p.encoder, cfg.head_channels, ex.points, ex.face_count, ex.quad_ratio);
  const std::span<const Token> input(seq.tokens.data(), n);
  const Mat<T> logits = forward(p, cfg, input, 0, cond, window);
  const auto r = cross_entropy(logits, next_tokens(seq, 0, n), seq.vocab().pad());
  const auto [lo, hi] = coordinate_span(seq);
  std::vector<double> out;
  // per_token[i] predicts token i + 1.
  for (std::size_t t = std::max<std::size_t>(lo, 1); t < hi && t <= n; ++t) out.push_back(r.per_token[t - 1]);
  return out;
}

/// Percentile bootstrap over per-mesh values: the `alpha` lower quantile of
/// the resampled mean.
inline double bootstrap_lower(const std::vector<double>& values, double alpha, std::size_t reps, std::uint64_t seed) {
  if (values.empty()) throw InvalidArgument("bootstrap: no values");
  Rng rng(seed);
  std::vector<double> means(reps);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[rng.below(values.size())];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  return means[static_cast<std::size_t>(std::floor(alpha * static_cast<double>(reps - 1)))];
}

// ---------------------------------------------------------------------------
// Analytic cost model

struct CostReport {
  std::string label;
  std::size_t length = 0;
  double attention_flops = 0.0;
  double ffn_flops = 0.0;
  double resample_flops = 0.0;  // shortening and upsampling projections
  double total_flops = 0.0;
  double kv_entries = 0.0;      // cached key/value rows over all layers at the end of generation
  double kv_bytes = 0.0;
  double activation_elements = 0.0;
};

struct CostShape {
  std::string label;
  std::array<int, 3> depths{24, 0, 0};
  int channels = 1024;
  int ffn_hidden = 2816;
  int heads = 16;
};

inline std::string depth_label(const std::array<int, 3>& d) {
  if (d[1] == 0 && d[2] == 0) return "Plain-" + std::to_string(d[0]);
  return "HG-" + std::to_string(d[0]) + "-" + std::to_string(d[1]) + "-" + std::to_string(d[2]);
}

inline CostShape cost_shape(const HourglassConfig& cfg) {
  return {depth_label(cfg.depths), cfg.depths, cfg.channels, cfg.ffn_hidden, cfg.heads()};
}

/// Closed-form FLOPs and memory for a sequence of L tokens with base window W.
/// Level l runs depth_l layers over L / 3^l rows with window W / 3^l.
inline CostReport cost_model(const CostShape& s, std::size_t length, std::size_t window) {
  if (length == 0 || window == 0) throw InvalidArgument("cost_model: L and W must be positive");
  CostReport r;
  r.label = s.label.empty() ? depth_label(s.depths) : s.label;
  r.length = length;
  const double c = s.channels, h = s.ffn_hidden;
  double scale = 1.0;
  for (int level = 0; level < 3; ++level, scale *= 3.0) {
    const double d = s.depths[level];
    const double rows = static_cast<double>(length) / scale;
    const double w = static_cast<double>(window) / scale;
    const double span = std::min(rows, w);
    r.attention_flops += d * (2.0 * rows * span * c * 2.0 + 4.0 * rows * c * c);
    r.ffn_flops += d * (2.0 * rows * c * h * 3.0);
    r.kv_entries += d * span;
    r.activation_elements += d * rows * (6.0 * c + 3.0 * h + static_cast<double>(s.heads) * span);
    if (level > 0 && d + (level == 1 ? s.depths[2] : 0) > 0) r.resample_flops += 2.0 * 2.0 * rows * 3.0 * c * c;
  }
  r.kv_bytes = r.kv_entries * 2.0 * c * 4.0;
  r.total_flops = r.attention_flops + r.ffn_flops + r.resample_flops;
  return r;
}

inline void write_cost_csv(std::ostream& out, const std::vector<CostReport>& rows) {
  out << "label,length,attention_flops,ffn_flops,resample_flops,total_flops,kv_entries,kv_bytes,activation_elements\n";
  for (const auto& r : rows)
    out << r.label << ',' << r.length << ',' << r.attention_flops << ',' << r.ffn_flops << ',' << r.resample_flops
        << ',' << r.total_flops << ',' << r.kv_entries << ',' << r.kv_bytes << ',' << r.activation_elements << '\n';
}

/// Human-readable table; ratios are relative to the first row.
inline void write_cost_table(std::ostream& out, const std::vector<CostReport>& rows) {
  if (rows.empty()) return;
  out << std::left << std::setw(12) << "config" << std::right << std::setw(8) << "L" << std::setw(14) << "GFLOP"
      << std::setw(10) << "ratio" << std::setw(12) << "KV MiB" << std::setw(10) << "ratio" << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(12) << r.label << std::right << std::setw(8) << r.length << std::fixed
        << std::setprecision(1) << std::setw(14) << r.total_flops / 1e9 << std::setprecision(3) << std::setw(10)
        << r.total_flops / rows.front().total_flops << std::setprecision(1) << std::setw(12)
        << r.kv_bytes / (1024.0 * 1024.0) << std::setprecision(3) << std::setw(10)
        << r.kv_bytes / rows.front().kv_bytes << '\n';
    out.unsetf(std::ios::floatfield);
  }
}

// ---------------------------------------------------------------------------
// Timing benches

struct ThroughputRow {
  std::size_t length = 0;
  double tokens_per_s = 0.0;
  std::size_t peak_cache_entries = 0;
};

/// Decoding rate measured over the last `block` tokens ending at each length.
/// With the rolling cache every token goes through decode_step; without it,
/// each of those tokens is a full windowed recompute of its prefix. The token
/// stream is fixed so both modes do identical work per position. Each block is
/// timed `repeats` times and the median is kept.
template <typename T>
std::vector<ThroughputRow> throughput_bench(const ParameterSet<T>& p, const HourglassConfig& cfg, const Mat<T>& cond,
                                            std::vector<std::size_t> lengths, bool with_cache, std::size_t block = 36,
                                            std::size_t window = 0, std::uint64_t seed = 0, std::size_t repeats = 1) {
  if (window == 0) window = cfg.window;
  if (repeats == 0) throw InvalidArgument("throughput_bench: repeats must be positive");
  std::sort(lengths.begin(), lengths.end());
  if (lengths.empty()) return {};
  Rng rng(seed);
  std::vector<Token> stream(lengths.back());
  for (auto& t : stream) t = static_cast<Token>(rng.below(static_cast<std::uint64_t>(cfg.quant_level)));
  using clock = std::chrono::steady_clock;
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  std::vector<ThroughputRow> out;
  if (with_cache) {
    // Snapshot the cache where each block starts, then time the blocks round
    // robin so drift in machine speed hits every length alike.
    RollingCache<T> cache = make_cache(p, cfg, cond, window);
    std::vector<RollingCache<T>> snaps;
    std::vector<std::size_t> begins;
    std::size_t pos = 0;
    for (std::size_t len : lengths) {
      const std::size_t begin = std::max(pos, len > block ? len - block : 0);
      for (; pos < begin; ++pos) decode_step(p, cfg, cache, stream[pos], static_cast<std::int64_t>(pos));
      snaps.push_back(cache);
      begins.push_back(begin);
    }
    std::vector<std::vector<double>> secs(lengths.size());
    std::vector<std::size_t> peak(lengths.size(), 0);
    // One working copy, assigned in place, so every block runs on the same buffers.
    RollingCache<T> run = snaps.back();
    for (std::size_t r = 0; r < repeats; ++r)
      for (std::size_t k = 0; k < lengths.size(); ++k) {
        run = snaps[k];
        const auto t0 = clock::now();
        for (std::size_t i = begins[k]; i < lengths[k]; ++i)
          decode_step(p, cfg, run, stream[i], static_cast<std::int64_t>(i));
        secs[k].push_back(std::chrono::duration<double>(clock::now() - t0).count());
        peak[k] = run.level0_entries();
      }
    for (std::size_t k = 0; k < lengths.size(); ++k)
      out.push_back({lengths[k], static_cast<double>(lengths[k] - begins[k]) / median(secs[k]), peak[k]});
  } else {
    for (std::size_t len : lengths) {
      const std::size_t begin = len > block ? len - block : 0;
      std::vector<double> secs;
      for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        for (std::size_t i = begin; i < len; ++i) {
          const std::vector<Token> prefix(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(i + 1));
          recompute_last(p, cfg, prefix, cond, window);
        }
        secs.push_back(std::chrono::duration<double>(clock::now() - t0).count());
      }
      out.push_back({len, static_cast<double>(len - begin) / median(secs), 0});
    }
  }
  return out;
}

inline void write_throughput_csv(std::ostream& out, const std::vector<ThroughputRow>& rows) {
  out << "length,tokens_per_s,peak_cache_entries\n";
  for (const auto& r : rows) out << r.length << ',' << r.tokens_per_s << ',' << r.peak_cache_entries << '\n';
}

// ---------------------------------------------------------------------------
// Context extrapolation

struct ExtrapolationCurve {
  std::vector<double> swa_loss;   // mean loss per position, windowed attention
  std::vector<double> full_loss;  // mean loss per position, unlimited attention
  std::vector<std::size_t> count; // sequences contributing to each position
};

/// Per-position mean next-token loss over sequences truncated to `length`
/// tokens, evaluated once with `window` and once with unlimited attention.
template <typename T>
ExtrapolationCurve swa_extrapolation_eval(const ParameterSet<T>& p, const HourglassConfig& cfg,
                                          std::span<const TrainExample> data, std::size_t length, std::size_t window) {
  if (length == 0 || length % kGroup != 0) throw InvalidArgument("swa_extrapolation_eval: length must be a multiple of 9");
  ExtrapolationCurve c;
  c.swa_loss.assign(length, 0.0);
  c.full_loss.assign(length, 0.0);
  c.count.assign(length, 0);
  for (const auto& ex : data) {
    const std::size_t n = std::min(length, ex.sequence.tokens.size() - ex.sequence.tokens.size() % kGroup);
    Mat<T> cond;
    if (cfg.has_cross()) cond = condition(p.encoder, cfg.head_channels, ex.points, ex.face_count, ex.quad_ratio);
    const std::span<const Token> input(ex.sequence.tokens.data(), n);
    const auto targets = next_tokens(ex.sequence, 0, n);
    const auto pad = ex.sequence.vocab().pad();
    const auto swa = cross_entropy(forward(p, cfg, input, 0, cond, window), targets, pad);
    const auto full = cross_entropy(forward(p, cfg, input, 0, cond, kNoWindow), targets, pad);
    for (std::size_t i = 0; i < n; ++i) {
      if (std::isnan(swa.per_token[i])) continue;
      c.swa_loss[i] += swa.per_token[i];
      c.full_loss[i] += full.per_token[i];
      ++c.count[i];
    }
  }
  for (std::size_t i = 0; i < length; ++i)
    if (c.count[i]) {
      c.swa_loss[i] /= static_cast<double>(c.count[i]);
      c.full_loss[i] /= static_cast<double>(c.count[i]);
    }
  return c;
}

/// Perplexity of the count-weighted mean loss over positions [lo, hi).
inline double curve_perplexity(const std::vector<double>& loss, const std::vector<std::size_t>& count, std::size_t lo,
                               std::size_t hi) {
  double s = 0.0, n = 0.0;
  for (std::size_t i = lo; i < std::min(hi, loss.size()); ++i) {
    s += loss[i] * static_cast<double>(count[i]);
    n += static_cast<double>(count[i]);
  }
  if (n == 0) throw InvalidArgument("curve_perplexity: empty range");
  return std::exp(s / n);
}

inline void write_extrapolation_csv(std::ostream& out, const ExtrapolationCurve& c) {
  out << "position,count,ppl_swa,ppl_full\n";
  for (std::size_t i = 0; i < c.count.size(); ++i)
    if (c.count[i])
      out << i << ',' << c.count[i] << ',' << std::exp(c.swa_loss[i]) << ',' << std::exp(c.full_loss[i]) << '\n';
}

}  // namespace meshtron
