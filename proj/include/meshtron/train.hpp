#pragma once

// Training data preparation and the optimization loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "meshtron/conditioning.hpp"
#include "meshtron/hourglass.hpp"
#include "meshtron/optim.hpp"
#include "meshtron/pointcloud.hpp"
#include "meshtron/procedural.hpp"
#include "meshtron/sequencer.hpp"

namespace meshtron {

/// One training mesh: its token sequence and everything the conditioning needs.
struct TrainExample {
  TokenSequence sequence;
  PointCloud points;
  int face_count = 1;
  double quad_ratio = 0.0;
};

/// normalized: a triangulated mesh already inside the unit cube.
inline TrainExample make_example(const RawMesh& normalized, std::int32_t q, const PointPipelineOptions& points,
                                 std::uint64_t seed) {
  TrainExample ex;
  const QuantizedMesh qm = quantize(normalized, q);
  ex.sequence = encode(qm);
  ex.face_count = static_cast<int>((ex.sequence.tokens.size() - 2 * kGroup) / kGroup);
  ex.quad_ratio = std::clamp(normalized.quad_ratio, 0.0, 1.0);
  PointPipelineOptions clean = points;
  clean.noise = false;  // noise is drawn per step during training
  ex.points = point_pipeline(normalized, clean, seed);
  return ex;
}

/// `count` procedural meshes with seeds first_seed, first_seed + 1, ... Meshes
/// with fewer than min_faces faces after quantization are skipped.
inline std::vector<TrainExample> build_dataset(const GeneratorSpec& spec, std::int32_t q, std::size_t count,
                                               std::uint64_t first_seed, const PointPipelineOptions& points,
                                               std::size_t min_faces = 1) {
  std::vector<TrainExample> out;
  for (std::uint64_t seed = first_seed; out.size() < count; ++seed) {
    RawMesh normalized;
    const QuantizedMesh qm = gen_quantized(seed, spec, q, &normalized);
    if (qm.faces.size() < min_faces) continue;
    out.push_back(make_example(normalized, q, points, seed));
  }
  return out;
}

/// Loss of next-token prediction on seq[offset, offset + length). When grads is
/// given, the gradient of scale * loss is accumulated into it (encoder included).
template <typename T>
LossResult example_loss(const ParameterSet<T>& p, const HourglassConfig& cfg, const TokenSequence& seq,
                        std::size_t offset, std::size_t length, const PointCloud& points, int face_count,
                        double quad_ratio, std::size_t window, ParameterSet<T>* grads = nullptr, double scale = 1.0) {
  if (offset + length > seq.tokens.size()) throw InvalidArgument("example_loss: segment beyond sequence end");
  const std::span<const Token> input(seq.tokens.data() + offset, length);
  const std::vector<Token> targets = next_tokens(seq, offset, length);
  const bool conditioned = cfg.has_cross();
  ConditionCache<T> ccache;
  Mat<T> cond;
  if (conditioned)
    cond = condition(p.encoder, cfg.head_channels, points, face_count, quad_ratio, grads ? &ccache : nullptr);
  if (!grads) {
    const Mat<T> logits = forward(p, cfg, input, static_cast<std::int64_t>(offset), cond, window);
    return cross_entropy(logits, targets, seq.vocab().pad());
  }
  HourglassCache<T> cache;
  const Mat<T> logits = forward(p, cfg, input, static_cast<std::int64_t>(offset), cond, window, &cache);
  Mat<T> dlogits;
  LossResult r = cross_entropy(logits, targets, seq.vocab().pad(), &dlogits);
  dlogits *= static_cast<T>(scale);
  Mat<T> dcond;
  if (conditioned) dcond = Mat<T>::Zero(cond.rows(), cond.cols());
  backward(p, cfg, cache, cond, dlogits, *grads, conditioned ? &dcond : nullptr);
  if (conditioned) condition_backward(p.encoder, cfg.head_channels, ccache, dcond, grads->encoder);
  return r;
}

struct TrainOptions {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  std::size_t chunk = 1152;  // tokens per training segment
  double lr = 1e-3;
  double min_lr = 1e-4;
  std::size_t warmup = 100;
  double weight_decay = 1e-2;
  double clip = 1.0;
  std::uint64_t seed = 0;
  bool noise = true;
  AugmentOptions augment{};
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double tokens_per_s = 0.0;
  double grad_norm = 0.0;
  std::size_t tokens = 0;

  double perplexity() const { return std::exp(loss); }
};

/// Appends one row per step: step,loss,ppl,lr,tokens_per_s.
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::filesystem::path& path) : out_(path) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << "step,loss,ppl,lr,tokens_per_s\n";
  }
  void write(const StepMetrics& m) {
    out_ << m.step << ',' << m.loss << ',' << m.perplexity() << ',' << m.lr << ',' << m.tokens_per_s << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

/// Picks a random face-aligned segment of at most `chunk` tokens.
inline std::pair<std::size_t, std::size_t> pick_segment(const TokenSequence& seq, std::size_t chunk, Rng& rng) {
  const std::size_t n = seq.tokens.size();
  if (n <= chunk) return {0, n};
  const std::size_t starts = (n - chunk) / kGroup + 1;
  return {kGroup * static_cast<std::size_t>(rng.below(starts)), chunk};
}

template <typename T>
class Trainer {
 public:
  Trainer(ParameterSet<T> params, HourglassConfig cfg, TrainOptions opt)
      : params_(std::move(params)), cfg_(std::move(cfg)), opt_(opt), adam_(params_), rng_(opt.seed) {
    if (opt_.chunk == 0 || opt_.chunk % kGroup != 0) throw InvalidArgument("train: chunk must be a multiple of 9");
    if (opt_.batch == 0) throw InvalidArgument("train: batch must be positive");
    schedule_ = CosineSchedule{opt_.lr, opt_.min_lr, opt_.warmup, opt_.steps};
  }

  /// One optimizer step on `batch` segments drawn from data.
  StepMetrics step(std::span<const TrainExample> data) {
    if (data.empty()) throw InvalidArgument("train: empty dataset");
    const auto t0 = std::chrono::steady_clock::now();
    ParameterSet<T> grads = zeros_like(params_);
    StepMetrics m;
    m.step = step_;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < opt_.batch; ++b) {
      const TrainExample& ex = data[rng_.below(data.size())];
      const auto [offset, length] = pick_segment(ex.sequence, opt_.chunk, rng_);
      const std::uint64_t noise_seed = rng_.bits();
      const PointCloud pts = opt_.noise ? augment(ex.points, opt_.augment, noise_seed) : ex.points;
      LossResult r;
      try {
        r = example_loss(params_, cfg_, ex.sequence, offset, length, pts, ex.face_count, ex.quad_ratio, cfg_.window,
                         &grads, 1.0 / static_cast<double>(opt_.batch));
      } catch (const NumericError& e) {
        throw NumericError("train step " + std::to_string(step_) + ", segment offset " + std::to_string(offset) +
                           ": " + e.what());
      }
      loss_sum += r.mean;
      m.tokens += length;
    }
    m.loss = loss_sum / static_cast<double>(opt_.batch);
    m.grad_norm = clip_grad_norm(grads, opt_.clip);
    m.lr = schedule_.at(step_);
    adamw_step(params_, grads, adam_, m.lr, AdamWOptions{0.9, 0.95, 1e-8, opt_.weight_decay});
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.tokens_per_s = secs > 0.0 ? static_cast<double>(m.tokens) / secs : 0.0;
    ++step_;
    return m;
  }

  const ParameterSet<T>& params() const { return params_; }
  ParameterSet<T>& params() { return params_; }
  const HourglassConfig& config() const { return cfg_; }
  std::size_t steps_done() const { return step_; }

 private:
  ParameterSet<T> params_;
  HourglassConfig cfg_;
  TrainOptions opt_;
  AdamState<T> adam_;
  Rng rng_;
  CosineSchedule schedule_;
  std::size_t step_ = 0;
};

/// Runs opt.steps steps, writing metrics when a CSV is given.
template <typename T>
ParameterSet<T> train(ParameterSet<T> params, const HourglassConfig& cfg, const TrainOptions& opt,
                      std::span<const TrainExample> data, MetricsCsv* csv = nullptr) {
  Trainer<T> trainer(std::move(params), cfg, opt);
  for (std::size_t s = 0; s < opt.steps; ++s) {
    const StepMetrics m = trainer.step(data);
    if (csv) csv->write(m);
  }
  return trainer.params();
}

}  // namespace meshtron
