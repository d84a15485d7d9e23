#pragma once

// Three-level Hourglass decoder. Level 0 runs on tokens, level 1 on groups of
// 3 tokens (vertices), level 2 on groups of 9 (faces). Blocks are executed as
// five stacks: level-0 pre, level-1 pre, level 2, level-1 post, level-0 post.
//
// Shortening is a linear map of the 3 concatenated rows of a group. The
// upsampled rows of group g land on fine rows 3g+2, 3g+3, 3g+4 (a shift by 2),
// so a group only reaches outputs at or after its own last member.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "meshtron/conditioning.hpp"
#include "meshtron/layers.hpp"
#include "meshtron/sequencer.hpp"

namespace meshtron {

constexpr int kShorten = 3;
constexpr int kStacks = 5;
constexpr std::array<int, kStacks> kStackLevel = {0, 1, 2, 1, 0};

struct HourglassConfig {
  std::array<int, 3> depths{2, 2, 2};
  int channels = 128;
  int head_channels = 32;
  int ffn_hidden = 352;
  double rope_theta = 1e6;
  int cross_attention_interval = 4;  // 0 disables cross-attention
  std::size_t window = 1152;         // tokens
  std::int32_t quant_level = 128;
  int cond_queries = 64;
  int encoder_depth = 2;

  VocabSpec vocab() const { return VocabSpec(quant_level); }
  int heads() const { return channels / head_channels; }
  bool level_active(int level) const {
    if (level == 0) return true;
    if (level == 1) return depths[1] + depths[2] > 0;
    return depths[2] > 0;
  }

  void check() const {
    if (depths[0] < 0 || depths[1] < 0 || depths[2] < 0) throw InvalidArgument("depths must be non-negative");
    if (channels <= 0 || head_channels <= 0 || channels % head_channels != 0)
      throw InvalidArgument("channels must be a positive multiple of head_channels");
    if (head_channels % 2 != 0) throw InvalidArgument("head_channels must be even for rotary embedding");
    if (ffn_hidden <= 0) throw InvalidArgument("ffn_hidden must be positive");
    if (window == 0 || window % 9 != 0) throw InvalidArgument("window must be a positive multiple of 9");
    if (cross_attention_interval < 0) throw InvalidArgument("cross_attention_interval must be >= 0");
    if (!(rope_theta > 0.0)) throw InvalidArgument("rope_theta must be positive");
    if (cond_queries <= 0 || encoder_depth < 0) throw InvalidArgument("invalid encoder shape");
    if (quant_level < 2 || quant_level > 65533) throw InvalidArgument("quant_level out of range");
  }

  /// Blocks per stack in execution order.
  std::array<int, kStacks> stack_depths() const {
    const int d0 = depths[0], d1 = depths[1], d2 = depths[2];
    if (!level_active(1)) return {d0 / 2, 0, 0, 0, d0 - d0 / 2};
    return {d0 / 2, d1 / 2, d2, d1 - d1 / 2, d0 - d0 / 2};
  }

  /// Whether block i of stack s is a cross-attention block. Blocks are numbered
  /// 1.. in execution order; every interval-th one is replaced.
  std::array<std::vector<bool>, kStacks> cross_plan() const {
    std::array<std::vector<bool>, kStacks> plan;
    int k = 0;
    const auto sd = stack_depths();
    for (int s = 0; s < kStacks; ++s)
      for (int i = 0; i < sd[s]; ++i) {
        ++k;
        plan[s].push_back(cross_attention_interval > 0 && k % cross_attention_interval == 0);
      }
    return plan;
  }

  bool has_cross() const {
    for (const auto& s : cross_plan())
      for (bool c : s)
        if (c) return true;
    return false;
  }

  EncoderConfig encoder() const { return {cond_queries, encoder_depth, channels, head_channels, ffn_hidden}; }

  /// Window at a level: W, W/3, W/9 entries.
  static std::size_t level_window(std::size_t window, int level) {
    if (window == kNoWindow) return kNoWindow;
    return level == 0 ? window : level == 1 ? window / 3 : window / 9;
  }
};

template <typename T>
struct ParameterSet {
  Mat<T> embed;  // V x C
  std::array<std::vector<BlockWeights<T>>, kStacks> stacks;
  Mat<T> shorten1, shorten2;    // 3C x C
  Mat<T> upsample1, upsample2;  // C x 3C
  Mat<T> final_norm;            // 1 x C
  Mat<T> head_w;                // C x V
  Mat<T> head_b;                // 1 x V
  EncoderWeights<T> encoder;
};

/// Calls f(name, matrix) for every tensor; encoder tensors live under "encoder/".
template <typename P, typename F>
void visit_parameters(P& p, F&& f) {
  f("embed", p.embed);
  static const char* stack_names[kStacks] = {"l0_pre", "l1_pre", "l2", "l1_post", "l0_post"};
  for (int s = 0; s < kStacks; ++s)
    for (std::size_t i = 0; i < p.stacks[s].size(); ++i)
      visit_block(p.stacks[s][i], std::string(stack_names[s]) + "." + std::to_string(i) + ".", f);
  if (p.shorten1.size()) {
    f("shorten1", p.shorten1);
    f("upsample1", p.upsample1);
  }
  if (p.shorten2.size()) {
    f("shorten2", p.shorten2);
    f("upsample2", p.upsample2);
  }
  f("final_norm", p.final_norm);
  f("head.w", p.head_w);
  f("head.b", p.head_b);
  visit_encoder(p.encoder, "encoder/", f);
}

template <typename T>
ParameterSet<T> init_model(const HourglassConfig& cfg, std::uint64_t seed) {
  cfg.check();
  Rng rng(seed);
  const int c = cfg.channels;
  const int v = cfg.vocab().size();
  const double sd = 1.0 / std::sqrt(static_cast<double>(c));
  ParameterSet<T> p;
  p.embed = gaussian<T>(v, c, 1.0, rng);
  const auto plan = cfg.cross_plan();
  for (int s = 0; s < kStacks; ++s)
    for (bool cross : plan[s]) p.stacks[s].push_back(init_block<T>(c, cfg.ffn_hidden, cross, rng));
  if (cfg.level_active(1)) {
    p.shorten1 = gaussian<T>(kShorten * c, c, 1.0 / std::sqrt(3.0 * c), rng);
    p.upsample1 = gaussian<T>(c, kShorten * c, sd, rng);
  }
  if (cfg.level_active(2)) {
    p.shorten2 = gaussian<T>(kShorten * c, c, 1.0 / std::sqrt(3.0 * c), rng);
    p.upsample2 = gaussian<T>(c, kShorten * c, sd, rng);
  }
  p.final_norm = Mat<T>::Ones(1, c);
  p.head_w = gaussian<T>(c, v, sd, rng);
  p.head_b = Mat<T>::Zero(1, v);
  if (cfg.has_cross()) {
    Rng enc_rng = rng.split(1);
    p.encoder = init_encoder<T>(cfg.encoder(), enc_rng);
  }
  return p;
}

template <typename T>
ParameterSet<T> zeros_like(const ParameterSet<T>& p) {
  ParameterSet<T> g = p;
  visit_parameters(g, [](const std::string&, Mat<T>& m) { m.setZero(); });
  return g;
}

template <typename T>
std::size_t parameter_count(const ParameterSet<T>& p) {
  std::size_t n = 0;
  visit_parameters(p, [&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename To, typename From>
ParameterSet<To> cast_parameters(const ParameterSet<From>& p) {
  ParameterSet<To> out;
  out.stacks = {};
  for (int s = 0; s < kStacks; ++s) out.stacks[s].resize(p.stacks[s].size());
  out.encoder.blocks.resize(p.encoder.blocks.size());
  for (int s = 0; s < kStacks; ++s)
    for (std::size_t i = 0; i < p.stacks[s].size(); ++i) out.stacks[s][i].cross = p.stacks[s][i].cross;
  for (std::size_t i = 0; i < p.encoder.blocks.size(); ++i) out.encoder.blocks[i].cross = p.encoder.blocks[i].cross;
  std::vector<const Mat<From>*> src;
  visit_parameters(p, [&](const std::string&, const Mat<From>& m) { src.push_back(&m); });
  std::size_t i = 0;
  // Empty optional tensors (shortening maps of inactive levels) must stay empty in
  // the same visiting order, so size them before the second pass.
  if (p.shorten1.size()) {
    out.shorten1.resize(1, 1);
    out.upsample1.resize(1, 1);
  }
  if (p.shorten2.size()) {
    out.shorten2.resize(1, 1);
    out.upsample2.resize(1, 1);
  }
  visit_parameters(out, [&](const std::string&, Mat<To>& m) { m = src[i++]->template cast<To>(); });
  return out;
}

// ---- forward / backward ----------------------------------------------------------

namespace detail {

/// Reinterprets rows (3i, 3i+1, 3i+2) of an L x C row-major matrix as row i of L/3 x 3C.
template <typename T>
Mat<T> group_rows(const Mat<T>& x) {
  return Eigen::Map<const Mat<T>>(x.data(), x.rows() / kShorten, x.cols() * kShorten);
}

template <typename T>
Mat<T> ungroup_rows(const Mat<T>& x) {
  return Eigen::Map<const Mat<T>>(x.data(), x.rows() * kShorten, x.cols() / kShorten);
}

/// y[i] = x[i - 2], zero for i < 2.
template <typename T>
Mat<T> shift_down(const Mat<T>& x) {
  Mat<T> y = Mat<T>::Zero(x.rows(), x.cols());
  const Eigen::Index s = kShorten - 1;
  if (x.rows() > s) y.bottomRows(x.rows() - s) = x.topRows(x.rows() - s);
  return y;
}

template <typename T>
Mat<T> shift_up(const Mat<T>& dy) {
  Mat<T> dx = Mat<T>::Zero(dy.rows(), dy.cols());
  const Eigen::Index s = kShorten - 1;
  if (dy.rows() > s) dx.topRows(dy.rows() - s) = dy.bottomRows(dy.rows() - s);
  return dx;
}

inline std::vector<std::int64_t> level_positions(std::int64_t offset, Eigen::Index count, int level) {
  const std::int64_t div = level == 0 ? 1 : level == 1 ? 3 : 9;
  std::vector<std::int64_t> pos(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) pos[static_cast<std::size_t>(i)] = offset / div + i;
  return pos;
}

}  // namespace detail

template <typename T>
struct HourglassCache {
  std::vector<Token> tokens;
  std::array<Rope<T>, 3> rope;
  std::array<std::vector<BlockCache<T>>, kStacks> blocks;
  Mat<T> x0pre, x1pre;
  Mat<T> g1, g2;            // grouped inputs of the shortening maps
  Mat<T> x2out, x1out;      // inputs of the upsampling maps
  RmsCache<T> final;
  Mat<T> final_out;
  std::size_t window = 0;
};

/// Logits (L x V) for a segment whose first token sits at absolute position `offset`.
/// cond holds the conditioning rows (may be empty when the model has no cross blocks).
template <typename T>
Mat<T> forward(const ParameterSet<T>& p, const HourglassConfig& cfg, std::span<const Token> tokens,
               std::int64_t offset, const Mat<T>& cond, std::size_t window, HourglassCache<T>* cache = nullptr) {
  const auto L = static_cast<Eigen::Index>(tokens.size());
  if (L == 0 || L % 9 != 0) throw InvalidArgument("forward: segment length must be a positive multiple of 9");
  if (offset < 0 || offset % 9 != 0) throw InvalidArgument("forward: offset must be a non-negative multiple of 9");
  if (cfg.has_cross() && (cond.rows() == 0 || cond.cols() != cfg.channels))
    throw InvalidArgument("forward: conditioning rows missing or wrong width");
  const int vsize = cfg.vocab().size();
  const int hd = cfg.head_channels;

  Mat<T> x(L, cfg.channels);
  for (Eigen::Index i = 0; i < L; ++i) {
    const Token t = tokens[static_cast<std::size_t>(i)];
    if (t >= vsize) throw InvalidArgument("forward: token outside vocabulary");
    x.row(i) = p.embed.row(t);
  }

  std::array<Rope<T>, 3> local_rope;
  auto& rope = cache ? cache->rope : local_rope;
  const Eigen::Index lens[3] = {L, L / 3, L / 9};
  for (int l = 0; l < 3; ++l)
    if (cfg.level_active(l)) {
      const auto pos = detail::level_positions(offset, lens[l], l);
      rope[l] = Rope<T>(pos, hd, cfg.rope_theta);
    }

  auto run_stack = [&](int s, Mat<T> h) {
    const int level = kStackLevel[s];
    BlockContext<T> ctx;
    ctx.rope = &rope[level];
    ctx.head_dim = hd;
    ctx.mask = AttnMask{true, HourglassConfig::level_window(window, level)};
    ctx.mem = &cond;
    if (cache) cache->blocks[s].assign(p.stacks[s].size(), {});
    for (std::size_t i = 0; i < p.stacks[s].size(); ++i)
      h = block_forward(p.stacks[s][i], h, ctx, cache ? &cache->blocks[s][i] : nullptr);
    return h;
  };

  Mat<T> x0pre = run_stack(0, std::move(x));
  Mat<T> h0 = x0pre;
  if (cfg.level_active(1)) {
    Mat<T> g1 = detail::group_rows(x0pre);
    Mat<T> x1pre = run_stack(1, g1 * p.shorten1);
    Mat<T> h1 = x1pre;
    if (cfg.level_active(2)) {
      Mat<T> g2 = detail::group_rows(x1pre);
      Mat<T> x2out = run_stack(2, g2 * p.shorten2);
      h1 += detail::shift_down(detail::ungroup_rows(Mat<T>(x2out * p.upsample2)));
      if (cache) {
        cache->g2 = std::move(g2);
        cache->x2out = std::move(x2out);
      }
    }
    Mat<T> x1out = run_stack(3, std::move(h1));
    h0 += detail::shift_down(detail::ungroup_rows(Mat<T>(x1out * p.upsample1)));
    if (cache) {
      cache->g1 = std::move(g1);
      cache->x1pre = std::move(x1pre);
      cache->x1out = std::move(x1out);
    }
  }
  Mat<T> x0out = run_stack(4, std::move(h0));
  Mat<T> xf = rms_norm(x0out, p.final_norm, cache ? &cache->final : nullptr);
  Mat<T> logits = xf * p.head_w;
  logits.rowwise() += p.head_b.row(0);
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->x0pre = std::move(x0pre);
    cache->final_out = std::move(xf);
    cache->window = window;
  }
  return logits;
}

/// Accumulates parameter gradients into g and, when dcond is non-null, the
/// gradient with respect to the conditioning rows.
template <typename T>
void backward(const ParameterSet<T>& p, const HourglassConfig& cfg, const HourglassCache<T>& c, const Mat<T>& cond,
              const Mat<T>& dlogits, ParameterSet<T>& g, Mat<T>* dcond = nullptr) {
  const int hd = cfg.head_channels;
  g.head_w.noalias() += c.final_out.transpose() * dlogits;
  g.head_b += dlogits.colwise().sum();
  Mat<T> dxf = dlogits * p.head_w.transpose();
  Mat<T> dh = rms_norm_backward(c.final, p.final_norm, dxf, g.final_norm);
  Mat<T> dmem_local;
  if (dcond) dmem_local = Mat<T>::Zero(cond.rows(), cond.cols());

  auto back_stack = [&](int s, Mat<T> d) {
    const int level = kStackLevel[s];
    BlockContext<T> ctx;
    ctx.rope = &c.rope[level];
    ctx.head_dim = hd;
    ctx.mask = AttnMask{true, HourglassConfig::level_window(c.window, level)};
    ctx.mem = &cond;
    for (std::size_t i = p.stacks[s].size(); i-- > 0;)
      d = block_backward(p.stacks[s][i], c.blocks[s][i], ctx, d, g.stacks[s][i], dcond ? &dmem_local : nullptr);
    return d;
  };

  Mat<T> d0 = back_stack(4, std::move(dh));  // gradient w.r.t. x0pre + upsampled level 1
  Mat<T> dx0pre = d0;
  if (cfg.level_active(1)) {
    const Mat<T> du1 = detail::group_rows(detail::shift_up(d0));  // L/3 x 3C
    g.upsample1.noalias() += c.x1out.transpose() * du1;
    Mat<T> d1 = back_stack(3, Mat<T>(du1 * p.upsample1.transpose()));
    Mat<T> dx1pre = d1;
    if (cfg.level_active(2)) {
      const Mat<T> du2 = detail::group_rows(detail::shift_up(d1));
      g.upsample2.noalias() += c.x2out.transpose() * du2;
      const Mat<T> d2 = back_stack(2, Mat<T>(du2 * p.upsample2.transpose()));
      g.shorten2.noalias() += c.g2.transpose() * d2;
      dx1pre += detail::ungroup_rows(Mat<T>(d2 * p.shorten2.transpose()));
    }
    const Mat<T> d1in = back_stack(1, std::move(dx1pre));
    g.shorten1.noalias() += c.g1.transpose() * d1in;
    dx0pre += detail::ungroup_rows(Mat<T>(d1in * p.shorten1.transpose()));
  }
  const Mat<T> dx = back_stack(0, std::move(dx0pre));
  for (std::size_t i = 0; i < c.tokens.size(); ++i) g.embed.row(c.tokens[i]) += dx.row(static_cast<Eigen::Index>(i));
  if (dcond) *dcond += dmem_local;
}

// ---- loss ------------------------------------------------------------------------

struct LossResult {
  double mean = 0.0;
  std::size_t count = 0;
  std::vector<double> per_token;  // NaN where the target is padding

  double perplexity() const { return std::exp(mean); }
};

/// Mean next-token cross-entropy over rows whose target is not padding. When
/// dlogits is given it receives d(mean)/d(logits).
template <typename T>
LossResult cross_entropy(const Mat<T>& logits, std::span<const Token> targets, Token pad, Mat<T>* dlogits = nullptr) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size())
    throw InvalidArgument("cross_entropy: target count differs from logit rows");
  LossResult r;
  r.per_token.assign(targets.size(), std::nan(""));
  if (dlogits) *dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == pad) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    const T m = row.maxCoeff();
    const T lse = m + std::log((row.array() - m).exp().sum());
    const double nll = static_cast<double>(lse - row[targets[i]]);
    r.per_token[i] = nll;
    total += nll;
    ++r.count;
  }
  if (r.count == 0) throw InvalidArgument("cross_entropy: every target is padding");
  r.mean = total / static_cast<double>(r.count);
  if (!std::isfinite(r.mean)) throw NumericError("cross_entropy: non-finite loss");
  if (dlogits) {
    const T inv = T(1) / static_cast<T>(r.count);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] == pad) continue;
      const auto ii = static_cast<Eigen::Index>(i);
      const auto row = logits.row(ii);
      const T m = row.maxCoeff();
      Eigen::Matrix<T, 1, Eigen::Dynamic> e = (row.array() - m).exp();
      e /= e.sum();
      e[targets[i]] -= T(1);
      dlogits->row(ii) = e * inv;
    }
  }
  return r;
}

/// Targets for next-token prediction on seq[offset, offset + length): the
/// token one step ahead, or padding past the end.
inline std::vector<Token> next_tokens(const TokenSequence& seq, std::size_t offset, std::size_t length) {
  std::vector<Token> t(length, seq.vocab().pad());
  for (std::size_t i = 0; i < length; ++i)
    if (offset + i + 1 < seq.tokens.size()) t[i] = seq.tokens[offset + i + 1];
  return t;
}

}  // namespace meshtron
