#pragma once

// Incremental decoding with a rolling key/value cache, and order-enforced
// generation on top of it.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meshtron/hourglass.hpp"
#include "meshtron/order_fsm.hpp"

namespace meshtron {

/// Fixed-capacity ring of key/value rows. kNoWindow capacity grows without bound.
template <typename T>
class KvRing {
 public:
  KvRing() = default;
  KvRing(std::size_t capacity, Eigen::Index channels) : capacity_(capacity), channels_(channels) {
    const std::size_t initial = capacity == kNoWindow ? 64 : capacity;
    k_.resize(static_cast<Eigen::Index>(initial), channels);
    v_.resize(static_cast<Eigen::Index>(initial), channels);
  }

  void push(const Mat<T>& k, const Mat<T>& v, std::int64_t position) {
    if (pushed_ > 0 && position <= last_position_) throw InvalidArgument("KvRing: positions must increase");
    last_position_ = position;
    std::size_t slot;
    if (capacity_ == kNoWindow) {
      if (pushed_ == static_cast<std::size_t>(k_.rows())) {
        k_.conservativeResize(2 * k_.rows(), Eigen::NoChange);
        v_.conservativeResize(2 * v_.rows(), Eigen::NoChange);
      }
      slot = pushed_;
    } else {
      slot = pushed_ % capacity_;
    }
    k_.row(static_cast<Eigen::Index>(slot)) = k.row(0);
    v_.row(static_cast<Eigen::Index>(slot)) = v.row(0);
    ++pushed_;
  }

  std::size_t size() const { return capacity_ == kNoWindow ? pushed_ : std::min(pushed_, capacity_); }
  std::size_t capacity() const { return capacity_; }
  auto keys() const { return k_.topRows(static_cast<Eigen::Index>(size())); }
  auto values() const { return v_.topRows(static_cast<Eigen::Index>(size())); }

 private:
  std::size_t capacity_ = 0;
  Eigen::Index channels_ = 0;
  std::size_t pushed_ = 0;
  std::int64_t last_position_ = 0;
  Mat<T> k_, v_;
};

template <typename T>
struct BlockState {
  KvRing<T> ring;     // self blocks
  Mat<T> mem_k, mem_v;  // cross blocks: projected conditioning rows
};

template <typename T>
struct RollingCache {
  std::array<std::vector<BlockState<T>>, kStacks> blocks;
  std::size_t window = 0;
  std::int64_t start = -1;  // absolute position of the first decoded token
  std::int64_t next = -1;
  Mat<T> group0, group1;        // pending rows of the current level-1 / level-2 group
  Mat<T> pending1, pending2;    // 3 upsampled rows from the latest finished group

  /// Entries held by the first level-0 self-attention layer.
  std::size_t level0_entries() const {
    for (int s : {0, 4})
      for (const auto& b : blocks[s])
        if (b.ring.capacity()) return b.ring.size();
    return 0;
  }
};

template <typename T>
RollingCache<T> make_cache(const ParameterSet<T>& p, const HourglassConfig& cfg, const Mat<T>& cond,
                           std::size_t window) {
  if (cfg.has_cross() && (cond.rows() == 0 || cond.cols() != cfg.channels))
    throw InvalidArgument("make_cache: conditioning rows missing or wrong width");
  RollingCache<T> c;
  c.window = window;
  for (int s = 0; s < kStacks; ++s)
    for (const auto& w : p.stacks[s]) {
      BlockState<T> st;
      if (w.cross) {
        const Mat<T> mem = rms_norm<T>(cond, w.norm_mem, nullptr);
        st.mem_k = mem * w.attn.wk;
        st.mem_v = mem * w.attn.wv;
      } else {
        st.ring = KvRing<T>(HourglassConfig::level_window(window, kStackLevel[s]), cfg.channels);
      }
      c.blocks[s].push_back(std::move(st));
    }
  c.group0 = Mat<T>::Zero(kShorten, cfg.channels);
  c.group1 = Mat<T>::Zero(kShorten, cfg.channels);
  return c;
}

namespace detail {

template <typename T, typename K, typename V>
Mat<T> attend_row(const Mat<T>& q, const Eigen::MatrixBase<K>& keys, const Eigen::MatrixBase<V>& values, int head_dim) {
  const Eigen::Index heads = q.cols() / head_dim;
  const T scale = T(1) / std::sqrt(T(head_dim));
  Mat<T> out(1, q.cols());
  for (Eigen::Index h = 0; h < heads; ++h) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> s =
        keys.middleCols(h * head_dim, head_dim) * q.block(0, h * head_dim, 1, head_dim).transpose();
    s *= scale;
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    out.block(0, h * head_dim, 1, head_dim).noalias() = s.transpose() * values.middleCols(h * head_dim, head_dim);
  }
  return out;
}

template <typename T>
Mat<T> block_step(const BlockWeights<T>& w, BlockState<T>& st, const Mat<T>& x, const Rope<T>& rope,
                  std::int64_t position, int head_dim) {
  const Mat<T> xn = rms_norm<T>(x, w.norm1, nullptr);
  Mat<T> q = xn * w.attn.wq;
  Mat<T> h = x;
  if (w.cross) {
    h.noalias() += attend_row<T>(q, st.mem_k, st.mem_v, head_dim) * w.attn.wo;
  } else {
    Mat<T> k = xn * w.attn.wk;
    const Mat<T> v = xn * w.attn.wv;
    rope.apply(q, head_dim);
    rope.apply(k, head_dim);
    st.ring.push(k, v, position);
    h.noalias() += attend_row<T>(q, st.ring.keys(), st.ring.values(), head_dim) * w.attn.wo;
  }
  const Mat<T> hn = rms_norm<T>(h, w.norm2, nullptr);
  h += ffn<T>(w.ffn, hn, nullptr);
  return h;
}

template <typename T>
Mat<T> flatten_group(const Mat<T>& g) {
  return Eigen::Map<const Mat<T>>(g.data(), 1, g.size());
}

}  // namespace detail

/// Logits (1 x V) for the token at `position`. The first call may start at any
/// multiple of 9; later calls must advance the position by exactly one.
template <typename T>
Mat<T> decode_step(const ParameterSet<T>& p, const HourglassConfig& cfg, RollingCache<T>& cache, Token token,
                   std::int64_t position) {
  if (cache.next < 0) {
    if (position < 0 || position % 9 != 0) throw InvalidArgument("decode_step: first position must be a multiple of 9");
    cache.start = position;
  } else if (position != cache.next) {
    throw InvalidArgument("decode_step: out-of-order position " + std::to_string(position) + ", expected " +
                          std::to_string(cache.next));
  }
  if (token >= cfg.vocab().size()) throw InvalidArgument("decode_step: token outside vocabulary");
  cache.next = position + 1;
  const int hd = cfg.head_channels;
  const std::int64_t t = position - cache.start;

  auto run = [&](int s, Mat<T> h, std::int64_t pos) {
    if (p.stacks[s].empty()) return h;
    const std::int64_t one[1] = {pos};
    const Rope<T> rope(one, hd, cfg.rope_theta);
    for (std::size_t i = 0; i < p.stacks[s].size(); ++i)
      h = detail::block_step(p.stacks[s][i], cache.blocks[s][i], h, rope, pos, hd);
    return h;
  };

  const Mat<T> x0pre = run(0, Mat<T>(p.embed.row(token)), position);
  Mat<T> h0 = x0pre;
  if (cfg.level_active(1)) {
    cache.group0.row(t % 3) = x0pre.row(0);
    if (t % 3 == 2) {
      const std::int64_t u = t / 3;
      const Mat<T> x1pre = run(1, Mat<T>(detail::flatten_group(cache.group0) * p.shorten1), cache.start / 3 + u);
      Mat<T> h1 = x1pre;
      if (cfg.level_active(2)) {
        cache.group1.row(u % 3) = x1pre.row(0);
        if (u % 3 == 2) {
          const std::int64_t v = u / 3;
          const Mat<T> x2 = run(2, Mat<T>(detail::flatten_group(cache.group1) * p.shorten2), cache.start / 9 + v);
          const Mat<T> up = x2 * p.upsample2;
          cache.pending2 = Eigen::Map<const Mat<T>>(up.data(), kShorten, cfg.channels);
        }
        if (u >= 2) h1 += cache.pending2.row((u - 2) % 3);
      }
      const Mat<T> x1out = run(3, std::move(h1), cache.start / 3 + u);
      const Mat<T> up = x1out * p.upsample1;
      cache.pending1 = Eigen::Map<const Mat<T>>(up.data(), kShorten, cfg.channels);
    }
    if (t >= 2) h0 += cache.pending1.row((t - 2) % 3);
  }
  const Mat<T> x0out = run(4, std::move(h0), position);
  Mat<T> logits = rms_norm<T>(x0out, p.final_norm, nullptr) * p.head_w;
  logits += p.head_b;
  return logits;
}

// ---- generation --------------------------------------------------------------------

enum class HaltReason { end_token, face_limit };

inline std::string to_string(HaltReason r) { return r == HaltReason::end_token ? "end_token" : "face_limit"; }

struct GenerateOptions {
  int face_count = 1;        // F; generation stops after 2F faces
  int min_faces = 0;         // E is masked until this many faces exist
  double temperature = 1.0;  // 0 selects the masked argmax
  std::uint64_t seed = 0;
  std::size_t window = 1152;
};

struct Generation {
  TokenSequence sequence;
  HaltReason halt = HaltReason::end_token;
  std::size_t faces = 0;
};

namespace detail {

template <typename T>
int pick_token(std::span<const T> logits, const DecoderState& s, const GenerateOptions& opt, Rng& rng) {
  const ValidSet v = valid_set(s);
  std::vector<T> masked;
  std::span<const T> use = logits;
  if (v.end_allowed && !v.coords_empty() && s.faces_emitted < static_cast<std::size_t>(opt.min_faces)) {
    masked.assign(logits.begin(), logits.end());
    masked[s.vocab.end()] = -std::numeric_limits<T>::infinity();
    use = masked;
  }
  return opt.temperature == 0.0 ? masked_argmax(use, s) : masked_sample(use, s, opt.temperature, rng);
}

inline void finish_with_end(TokenSequence& seq, std::size_t already) {
  for (std::size_t i = already; i < kGroup; ++i) seq.tokens.push_back(seq.vocab().end());
}

}  // namespace detail

/// Order-enforced sampling with the rolling cache. The result always decodes.
template <typename T>
Generation generate(const ParameterSet<T>& p, const HourglassConfig& cfg, const Mat<T>& cond,
                    const GenerateOptions& opt) {
  if (opt.face_count < 1) throw InvalidArgument("generate: face count must be >= 1");
  if (opt.temperature < 0.0) throw InvalidArgument("generate: temperature must be >= 0");
  const VocabSpec vocab = cfg.vocab();
  const auto limit = 2 * static_cast<std::size_t>(opt.face_count);
  RollingCache<T> cache = make_cache(p, cfg, cond, opt.window);
  Rng rng(opt.seed);
  Generation g;
  g.sequence.quant_level = vocab.quant_level;
  g.sequence.tokens.assign(kGroup, vocab.start());
  Mat<T> logits;
  for (int i = 0; i < kGroup; ++i) logits = decode_step(p, cfg, cache, vocab.start(), i);
  DecoderState s = new_state(vocab);
  for (;;) {
    const int tok = detail::pick_token<T>(std::span<const T>(logits.data(), logits.size()), s, opt, rng);
    s = advance(std::move(s), tok);
    g.sequence.tokens.push_back(static_cast<Token>(tok));
    if (tok == vocab.end()) {
      detail::finish_with_end(g.sequence, 1);
      g.halt = HaltReason::end_token;
      break;
    }
    if (s.pos_in_face == 0 && s.faces_emitted >= limit) {
      detail::finish_with_end(g.sequence, 0);
      g.halt = HaltReason::face_limit;
      break;
    }
    logits = decode_step(p, cfg, cache, static_cast<Token>(tok), static_cast<std::int64_t>(g.sequence.tokens.size() - 1));
  }
  g.faces = s.faces_emitted;
  return g;
}

/// Logits for the last token of `prefix` by a full windowed forward pass (no cache).
template <typename T>
Mat<T> recompute_last(const ParameterSet<T>& p, const HourglassConfig& cfg, const std::vector<Token>& prefix,
                      const Mat<T>& cond, std::size_t window) {
  std::vector<Token> padded = prefix;
  while (padded.size() % kGroup) padded.push_back(cfg.vocab().pad());
  const Mat<T> logits = forward(p, cfg, padded, 0, cond, window);
  return logits.row(static_cast<Eigen::Index>(prefix.size() - 1));
}

}  // namespace meshtron
