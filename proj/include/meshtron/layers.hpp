#pragma once

// Dense building blocks with hand-written backward passes: linear maps,
// RMS normalization, SwiGLU, rotary embeddings and blocked attention with an
// optional causal window. Every forward takes an optional cache pointer; a
// null cache means inference only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "meshtron/error.hpp"
#include "meshtron/rng.hpp"

namespace meshtron {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr std::size_t kNoWindow = std::numeric_limits<std::size_t>::max();

template <typename T>
Mat<T> gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
  return m;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// ---- RMS normalization ------------------------------------------------------

template <typename T>
struct RmsCache {
  Mat<T> x;
  Col<T> inv_rms;
};

template <typename T>
Mat<T> rms_norm(const Mat<T>& x, const Mat<T>& gain, RmsCache<T>* cache) {
  constexpr double eps = 1e-6;
  const auto n = x.cols();
  Col<T> inv(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    inv[i] = T(1) / std::sqrt(x.row(i).squaredNorm() / T(n) + T(eps));
  Mat<T> y = inv.asDiagonal() * x;
  y.array().rowwise() *= gain.row(0).array();
  if (cache) {
    cache->x = x;
    cache->inv_rms = std::move(inv);
  }
  return y;
}

template <typename T>
Mat<T> rms_norm_backward(const RmsCache<T>& c, const Mat<T>& gain, const Mat<T>& dy, Mat<T>& dgain) {
  const auto n = c.x.cols();
  Mat<T> gdy = dy;
  gdy.array().rowwise() *= gain.row(0).array();
  Mat<T> dx(c.x.rows(), n);
  for (Eigen::Index i = 0; i < c.x.rows(); ++i) {
    const T r = c.inv_rms[i];
    const T dot = gdy.row(i).dot(c.x.row(i));
    dx.row(i) = r * gdy.row(i) - (r * r * r * dot / T(n)) * c.x.row(i);
    dgain.row(0).array() += dy.row(i).array() * c.x.row(i).array() * r;
  }
  return dx;
}

// ---- SwiGLU feed-forward ----------------------------------------------------

template <typename T>
struct FfnWeights {
  Mat<T> w1, w3;  // channels x hidden
  Mat<T> w2;      // hidden x channels
};

template <typename T>
struct FfnCache {
  Mat<T> x, a, b, h;
};

template <typename T>
Mat<T> ffn(const FfnWeights<T>& w, const Mat<T>& x, FfnCache<T>* cache) {
  Mat<T> a = x * w.w1;
  Mat<T> b = x * w.w3;
  Mat<T> h(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const T v = a.data()[i];
    h.data()[i] = v * sigmoid(v) * b.data()[i];
  }
  Mat<T> y = h * w.w2;
  if (cache) {
    cache->x = x;
    cache->a = std::move(a);
    cache->b = std::move(b);
    cache->h = std::move(h);
  }
  return y;
}

template <typename T>
Mat<T> ffn_backward(const FfnWeights<T>& w, const FfnCache<T>& c, const Mat<T>& dy, FfnWeights<T>& g) {
  g.w2.noalias() += c.h.transpose() * dy;
  Mat<T> dh = dy * w.w2.transpose();
  Mat<T> da(dh.rows(), dh.cols()), db(dh.rows(), dh.cols());
  for (Eigen::Index i = 0; i < dh.size(); ++i) {
    const T a = c.a.data()[i], s = sigmoid(a);
    db.data()[i] = dh.data()[i] * a * s;
    da.data()[i] = dh.data()[i] * c.b.data()[i] * s * (T(1) + a * (T(1) - s));
  }
  g.w1.noalias() += c.x.transpose() * da;
  g.w3.noalias() += c.x.transpose() * db;
  Mat<T> dx = da * w.w1.transpose();
  dx.noalias() += db * w.w3.transpose();
  return dx;
}

// ---- rotary position embedding ----------------------------------------------

/// cos/sin table for one list of positions. Pairs are (m, m + d/2) inside each
/// head; angles are evaluated in double so large positions stay accurate.
template <typename T>
struct Rope {
  Mat<T> cos, sin;  // rows = positions, cols = head_dim / 2

  Rope() = default;
  Rope(std::span<const std::int64_t> positions, int head_dim, double theta)
      : cos(static_cast<Eigen::Index>(positions.size()), head_dim / 2),
        sin(static_cast<Eigen::Index>(positions.size()), head_dim / 2) {
    const int half = head_dim / 2;
    for (std::size_t i = 0; i < positions.size(); ++i)
      for (int m = 0; m < half; ++m) {
        const double freq = std::pow(theta, -2.0 * m / head_dim);
        const double angle = static_cast<double>(positions[i]) * freq;
        cos(static_cast<Eigen::Index>(i), m) = static_cast<T>(std::cos(angle));
        sin(static_cast<Eigen::Index>(i), m) = static_cast<T>(std::sin(angle));
      }
  }

  /// Rotates every head of x in place; inverse applies the transpose (used in backward).
  void apply(Mat<T>& x, int head_dim, bool inverse = false) const {
    const int half = head_dim / 2;
    const Eigen::Index heads = x.cols() / head_dim;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      T* row = x.row(i).data();
      for (Eigen::Index h = 0; h < heads; ++h) {
        T* v = row + h * head_dim;
        for (int m = 0; m < half; ++m) {
          const T c = cos(i, m), s = inverse ? -sin(i, m) : sin(i, m);
          const T x1 = v[m], x2 = v[m + half];
          v[m] = x1 * c - x2 * s;
          v[m + half] = x1 * s + x2 * c;
        }
      }
    }
  }
};

// ---- blocked attention --------------------------------------------------------

/// Query i sees key j iff (not causal) or (j <= i and i - j < window).
struct AttnMask {
  bool causal = true;
  std::size_t window = kNoWindow;
};

template <typename T>
struct AttnCoreCache {
  std::vector<Mat<T>> probs;  // per (query block, head)
};

namespace detail {

constexpr Eigen::Index kQueryBlock = 64;

inline std::pair<Eigen::Index, Eigen::Index> key_range(Eigen::Index i0, Eigen::Index i1, Eigen::Index nk,
                                                       const AttnMask& mask) {
  if (!mask.causal) return {0, nk};
  const auto w = static_cast<Eigen::Index>(std::min<std::size_t>(mask.window, static_cast<std::size_t>(nk)));
  const Eigen::Index lo = i0 + 1 > w ? i0 + 1 - w : 0;
  return {lo, std::min(i1, nk)};
}

template <typename T>
void masked_softmax(Mat<T>& s, Eigen::Index i0, Eigen::Index j0, const AttnMask& mask) {
  const T neg = -std::numeric_limits<T>::infinity();
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Eigen::Index i = i0 + r;
    auto row = s.row(r);
    if (mask.causal)
      for (Eigen::Index c = 0; c < s.cols(); ++c) {
        const Eigen::Index j = j0 + c;
        if (j > i || static_cast<std::size_t>(i - j) >= mask.window) row[c] = neg;
      }
    const T m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
  }
}

}  // namespace detail

/// softmax(q k^T / sqrt(d)) v per head. q: Lq x C, k/v: Lk x C.
template <typename T>
Mat<T> attention_core(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int head_dim, const AttnMask& mask,
                      AttnCoreCache<T>* cache) {
  const Eigen::Index lq = q.rows(), nk = k.rows(), heads = q.cols() / head_dim;
  const T scale = T(1) / std::sqrt(T(head_dim));
  Mat<T> out(lq, q.cols());
  if (cache) cache->probs.clear();
  for (Eigen::Index i0 = 0; i0 < lq; i0 += detail::kQueryBlock) {
    const Eigen::Index bl = std::min(detail::kQueryBlock, lq - i0);
    const auto [j0, j1] = detail::key_range(i0, i0 + bl, nk, mask);
    for (Eigen::Index h = 0; h < heads; ++h) {
      Mat<T> s = q.block(i0, h * head_dim, bl, head_dim) * k.block(j0, h * head_dim, j1 - j0, head_dim).transpose();
      s *= scale;
      detail::masked_softmax(s, i0, j0, mask);
      out.block(i0, h * head_dim, bl, head_dim).noalias() = s * v.block(j0, h * head_dim, j1 - j0, head_dim);
      if (cache) cache->probs.push_back(std::move(s));
    }
  }
  return out;
}

template <typename T>
void attention_core_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int head_dim, const AttnMask& mask,
                             const AttnCoreCache<T>& cache, const Mat<T>& dout, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv) {
  const Eigen::Index lq = q.rows(), nk = k.rows(), heads = q.cols() / head_dim;
  const T scale = T(1) / std::sqrt(T(head_dim));
  dq = Mat<T>::Zero(lq, q.cols());
  dk = Mat<T>::Zero(nk, k.cols());
  dv = Mat<T>::Zero(nk, v.cols());
  std::size_t idx = 0;
  for (Eigen::Index i0 = 0; i0 < lq; i0 += detail::kQueryBlock) {
    const Eigen::Index bl = std::min(detail::kQueryBlock, lq - i0);
    const auto [j0, j1] = detail::key_range(i0, i0 + bl, nk, mask);
    for (Eigen::Index h = 0; h < heads; ++h) {
      const Mat<T>& p = cache.probs[idx++];
      const auto dob = dout.block(i0, h * head_dim, bl, head_dim);
      dv.block(j0, h * head_dim, j1 - j0, head_dim).noalias() += p.transpose() * dob;
      Mat<T> dp = dob * v.block(j0, h * head_dim, j1 - j0, head_dim).transpose();
      const Col<T> rowdot = (dp.array() * p.array()).rowwise().sum();
      Mat<T> ds = p.array() * (dp.colwise() - rowdot).array();
      ds *= scale;
      dq.block(i0, h * head_dim, bl, head_dim).noalias() += ds * k.block(j0, h * head_dim, j1 - j0, head_dim);
      dk.block(j0, h * head_dim, j1 - j0, head_dim).noalias() += ds.transpose() * q.block(i0, h * head_dim, bl, head_dim);
    }
  }
}

// ---- attention sublayers ----------------------------------------------------------

template <typename T>
struct AttnWeights {
  Mat<T> wq, wk, wv, wo;  // channels x channels
};

template <typename T>
struct SelfAttnCache {
  Mat<T> x, q, k, v, o;
  AttnCoreCache<T> core;
};

/// Rotary self-attention over x (already normalized).
template <typename T>
Mat<T> self_attention(const AttnWeights<T>& w, const Mat<T>& x, const Rope<T>& rope, int head_dim,
                      const AttnMask& mask, SelfAttnCache<T>* cache) {
  Mat<T> q = x * w.wq, k = x * w.wk, v = x * w.wv;
  rope.apply(q, head_dim);
  rope.apply(k, head_dim);
  Mat<T> o = attention_core(q, k, v, head_dim, mask, cache ? &cache->core : nullptr);
  Mat<T> y = o * w.wo;
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
  }
  return y;
}

template <typename T>
Mat<T> self_attention_backward(const AttnWeights<T>& w, const SelfAttnCache<T>& c, const Rope<T>& rope, int head_dim,
                               const AttnMask& mask, const Mat<T>& dy, AttnWeights<T>& g) {
  g.wo.noalias() += c.o.transpose() * dy;
  const Mat<T> dout = dy * w.wo.transpose();
  Mat<T> dq, dk, dv;
  attention_core_backward(c.q, c.k, c.v, head_dim, mask, c.core, dout, dq, dk, dv);
  rope.apply(dq, head_dim, true);
  rope.apply(dk, head_dim, true);
  g.wq.noalias() += c.x.transpose() * dq;
  g.wk.noalias() += c.x.transpose() * dk;
  g.wv.noalias() += c.x.transpose() * dv;
  Mat<T> dx = dq * w.wq.transpose();
  dx.noalias() += dk * w.wk.transpose();
  dx.noalias() += dv * w.wv.transpose();
  return dx;
}

template <typename T>
struct CrossAttnCache {
  Mat<T> x, mem, q, k, v, o;
  AttnCoreCache<T> core;
};

/// Queries from x, keys and values from mem; no positions, no mask.
template <typename T>
Mat<T> cross_attention(const AttnWeights<T>& w, const Mat<T>& x, const Mat<T>& mem, int head_dim,
                       CrossAttnCache<T>* cache) {
  Mat<T> q = x * w.wq, k = mem * w.wk, v = mem * w.wv;
  Mat<T> o = attention_core(q, k, v, head_dim, AttnMask{false, kNoWindow}, cache ? &cache->core : nullptr);
  Mat<T> y = o * w.wo;
  if (cache) {
    cache->x = x;
    cache->mem = mem;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
  }
  return y;
}

/// Returns dx; accumulates the memory gradient into dmem.
template <typename T>
Mat<T> cross_attention_backward(const AttnWeights<T>& w, const CrossAttnCache<T>& c, int head_dim, const Mat<T>& dy,
                                AttnWeights<T>& g, Mat<T>& dmem) {
  g.wo.noalias() += c.o.transpose() * dy;
  const Mat<T> dout = dy * w.wo.transpose();
  Mat<T> dq, dk, dv;
  attention_core_backward(c.q, c.k, c.v, head_dim, AttnMask{false, kNoWindow}, c.core, dout, dq, dk, dv);
  g.wq.noalias() += c.x.transpose() * dq;
  g.wk.noalias() += c.mem.transpose() * dk;
  g.wv.noalias() += c.mem.transpose() * dv;
  dmem.noalias() += dk * w.wk.transpose();
  dmem.noalias() += dv * w.wv.transpose();
  return dq * w.wq.transpose();
}

// ---- residual blocks --------------------------------------------------------------

/// Pre-norm block. A self block is x + attn(norm(x)) then + ffn(norm(.)); a
/// cross block swaps the self-attention for attention to the conditioning rows.
template <typename T>
struct BlockWeights {
  bool cross = false;
  Mat<T> norm1, norm2, norm_mem;  // 1 x channels; norm_mem only used by cross blocks
  AttnWeights<T> attn;
  FfnWeights<T> ffn;
};

template <typename T>
struct BlockCache {
  RmsCache<T> n1, n2, nm;
  SelfAttnCache<T> self;
  CrossAttnCache<T> cross;
  FfnCache<T> ffn;
};

template <typename T>
struct BlockContext {
  const Rope<T>* rope = nullptr;
  int head_dim = 0;
  AttnMask mask;
  const Mat<T>* mem = nullptr;  // conditioning rows for cross blocks
};

template <typename T>
Mat<T> block_forward(const BlockWeights<T>& w, const Mat<T>& x, const BlockContext<T>& ctx, BlockCache<T>* cache) {
  const Mat<T> xn = rms_norm(x, w.norm1, cache ? &cache->n1 : nullptr);
  Mat<T> h = x;
  if (w.cross) {
    if (!ctx.mem || ctx.mem->rows() == 0) throw InvalidArgument("cross-attention block needs conditioning rows");
    const Mat<T> mem = rms_norm(*ctx.mem, w.norm_mem, cache ? &cache->nm : nullptr);
    h += cross_attention(w.attn, xn, mem, ctx.head_dim, cache ? &cache->cross : nullptr);
  } else {
    h += self_attention(w.attn, xn, *ctx.rope, ctx.head_dim, ctx.mask, cache ? &cache->self : nullptr);
  }
  const Mat<T> hn = rms_norm(h, w.norm2, cache ? &cache->n2 : nullptr);
  h += ffn(w.ffn, hn, cache ? &cache->ffn : nullptr);
  return h;
}

/// Returns dx. dmem (cross blocks only) receives the conditioning gradient.
template <typename T>
Mat<T> block_backward(const BlockWeights<T>& w, const BlockCache<T>& c, const BlockContext<T>& ctx, const Mat<T>& dy,
                      BlockWeights<T>& g, Mat<T>* dmem) {
  Mat<T> dh = dy;
  dh += rms_norm_backward(c.n2, w.norm2, ffn_backward(w.ffn, c.ffn, dy, g.ffn), g.norm2);
  Mat<T> dxn;
  if (w.cross) {
    Mat<T> dmn = Mat<T>::Zero(c.cross.mem.rows(), c.cross.mem.cols());
    dxn = cross_attention_backward(w.attn, c.cross, ctx.head_dim, dh, g.attn, dmn);
    const Mat<T> dm = rms_norm_backward(c.nm, w.norm_mem, dmn, g.norm_mem);
    if (dmem) *dmem += dm;
  } else {
    dxn = self_attention_backward(w.attn, c.self, *ctx.rope, ctx.head_dim, ctx.mask, dh, g.attn);
  }
  dh += rms_norm_backward(c.n1, w.norm1, dxn, g.norm1);
  return dh;
}

template <typename T>
BlockWeights<T> init_block(int channels, int hidden, bool cross, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(channels));
  BlockWeights<T> b;
  b.cross = cross;
  b.norm1 = Mat<T>::Ones(1, channels);
  b.norm2 = Mat<T>::Ones(1, channels);
  b.norm_mem = cross ? Mat<T>::Ones(1, channels) : Mat<T>();
  b.attn.wq = gaussian<T>(channels, channels, sd, rng);
  b.attn.wk = gaussian<T>(channels, channels, sd, rng);
  b.attn.wv = gaussian<T>(channels, channels, sd, rng);
  b.attn.wo = gaussian<T>(channels, channels, sd, rng);
  b.ffn.w1 = gaussian<T>(channels, hidden, sd, rng);
  b.ffn.w3 = gaussian<T>(channels, hidden, sd, rng);
  b.ffn.w2 = gaussian<T>(hidden, channels, sd, rng);
  return b;
}

/// Calls f(name, matrix) for every tensor of a block.
template <typename B, typename F>
void visit_block(B& b, const std::string& prefix, F&& f) {
  f(prefix + "norm1", b.norm1);
  if (b.cross) f(prefix + "norm_mem", b.norm_mem);
  f(prefix + (b.cross ? "cross.wq" : "attn.wq"), b.attn.wq);
  f(prefix + (b.cross ? "cross.wk" : "attn.wk"), b.attn.wk);
  f(prefix + (b.cross ? "cross.wv" : "attn.wv"), b.attn.wv);
  f(prefix + (b.cross ? "cross.wo" : "attn.wo"), b.attn.wo);
  f(prefix + "norm2", b.norm2);
  f(prefix + "ffn.w1", b.ffn.w1);
  f(prefix + "ffn.w3", b.ffn.w3);
  f(prefix + "ffn.w2", b.ffn.w2);
}

}  // namespace meshtron
