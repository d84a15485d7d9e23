#pragma once

// Conditioning rows for the decoder: K learned queries cross-attend to the
// lifted (position, normal) features of a point cloud, followed by one row for
// the face count and one for the quad ratio.

#include <cmath>
#include <string>
#include <vector>

#include "meshtron/layers.hpp"
#include "meshtron/pointcloud.hpp"

namespace meshtron {

struct EncoderConfig {
  int queries = 64;  // K
  int depth = 2;
  int channels = 128;
  int head_channels = 32;
  int ffn_hidden = 352;
};

template <typename T>
struct ScalarMlp {
  Mat<T> w1, b1;  // 1 x C
  Mat<T> w2;      // C x C
  Mat<T> b2;      // 1 x C
};

template <typename T>
struct EncoderWeights {
  Mat<T> lift_w;  // 6 x C
  Mat<T> lift_b;  // 1 x C
  Mat<T> queries;  // K x C
  std::vector<BlockWeights<T>> blocks;
  Mat<T> out_norm;
  ScalarMlp<T> face_count, quad_ratio;
};

template <typename T>
EncoderWeights<T> init_encoder(const EncoderConfig& cfg, Rng& rng) {
  const int c = cfg.channels;
  EncoderWeights<T> e;
  e.lift_w = gaussian<T>(6, c, 1.0 / std::sqrt(6.0), rng);
  e.lift_b = Mat<T>::Zero(1, c);
  e.queries = gaussian<T>(cfg.queries, c, 1.0, rng);
  for (int i = 0; i < cfg.depth; ++i) e.blocks.push_back(init_block<T>(c, cfg.ffn_hidden, true, rng));
  e.out_norm = Mat<T>::Ones(1, c);
  for (ScalarMlp<T>* m : {&e.face_count, &e.quad_ratio}) {
    m->w1 = gaussian<T>(1, c, 1.0, rng);
    m->b1 = gaussian<T>(1, c, 1.0, rng);
    m->w2 = gaussian<T>(c, c, 1.0 / std::sqrt(static_cast<double>(c)), rng);
    m->b2 = Mat<T>::Zero(1, c);
  }
  return e;
}

template <typename E, typename F>
void visit_encoder(E& e, const std::string& prefix, F&& f) {
  f(prefix + "lift.w", e.lift_w);
  f(prefix + "lift.b", e.lift_b);
  f(prefix + "queries", e.queries);
  for (std::size_t i = 0; i < e.blocks.size(); ++i)
    visit_block(e.blocks[i], prefix + "block" + std::to_string(i) + ".", f);
  f(prefix + "out_norm", e.out_norm);
  for (auto [name, m] : {std::pair{"face_count", &e.face_count}, std::pair{"quad_ratio", &e.quad_ratio}}) {
    f(prefix + name + ".w1", m->w1);
    f(prefix + name + ".b1", m->b1);
    f(prefix + name + ".w2", m->w2);
    f(prefix + name + ".b2", m->b2);
  }
}

template <typename T>
struct PointEncoderCache {
  Mat<T> input;  // N x 6
  Mat<T> feats;  // N x C
  std::vector<Mat<T>> block_in;
  std::vector<BlockCache<T>> blocks;
  RmsCache<T> out;
};

template <typename T>
Mat<T> point_features(const PointCloud& points) {
  Mat<T> in(static_cast<Eigen::Index>(points.size()), 6);
  for (std::size_t i = 0; i < points.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      in(static_cast<Eigen::Index>(i), a) = static_cast<T>(points.positions[i][a]);
      in(static_cast<Eigen::Index>(i), 3 + a) = static_cast<T>(points.normals[i][a]);
    }
  return in;
}

/// K x C embeddings of a point cloud; invariant to point order.
template <typename T>
Mat<T> encode_pointcloud(const EncoderWeights<T>& w, int head_dim, const PointCloud& points,
                         PointEncoderCache<T>* cache = nullptr) {
  if (points.empty()) throw InvalidArgument("encode_pointcloud: empty point cloud");
  Mat<T> in = point_features<T>(points);
  Mat<T> feats = in * w.lift_w;
  feats.rowwise() += w.lift_b.row(0);
  BlockContext<T> ctx;
  ctx.head_dim = head_dim;
  ctx.mem = &feats;
  Mat<T> q = w.queries;
  if (cache) {
    cache->blocks.assign(w.blocks.size(), {});
    cache->block_in.clear();
  }
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    if (cache) cache->block_in.push_back(q);
    q = block_forward(w.blocks[i], q, ctx, cache ? &cache->blocks[i] : nullptr);
  }
  Mat<T> out = rms_norm(q, w.out_norm, cache ? &cache->out : nullptr);
  if (cache) {
    cache->input = std::move(in);
    cache->feats = std::move(feats);
  }
  return out;
}

template <typename T>
void encode_pointcloud_backward(const EncoderWeights<T>& w, int head_dim, const PointEncoderCache<T>& c,
                                const Mat<T>& dout, EncoderWeights<T>& g) {
  BlockContext<T> ctx;
  ctx.head_dim = head_dim;
  ctx.mem = &c.feats;
  Mat<T> dq = rms_norm_backward(c.out, w.out_norm, dout, g.out_norm);
  Mat<T> dfeats = Mat<T>::Zero(c.feats.rows(), c.feats.cols());
  for (std::size_t i = w.blocks.size(); i-- > 0;)
    dq = block_backward(w.blocks[i], c.blocks[i], ctx, dq, g.blocks[i], &dfeats);
  g.queries += dq;
  g.lift_w.noalias() += c.input.transpose() * dfeats;
  g.lift_b += dfeats.colwise().sum();
}

template <typename T>
struct ScalarCache {
  T x{};
  Mat<T> pre, act;
};

template <typename T>
Mat<T> scalar_mlp(const ScalarMlp<T>& m, T x, ScalarCache<T>* cache) {
  Mat<T> pre = x * m.w1 + m.b1;
  Mat<T> act = pre.unaryExpr([](T v) { return v * sigmoid(v); });
  Mat<T> y = act * m.w2 + m.b2;
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <typename T>
void scalar_mlp_backward(const ScalarMlp<T>& m, const ScalarCache<T>& c, const Mat<T>& dy, ScalarMlp<T>& g) {
  g.b2 += dy;
  g.w2.noalias() += c.act.transpose() * dy;
  const Mat<T> dact = dy * m.w2.transpose();
  Mat<T> dpre(1, dact.cols());
  for (Eigen::Index j = 0; j < dact.cols(); ++j) {
    const T a = c.pre(0, j), s = sigmoid(a);
    dpre(0, j) = dact(0, j) * s * (T(1) + a * (T(1) - s));
  }
  g.b1 += dpre;
  g.w1 += c.x * dpre;
}

inline double face_count_feature(int face_count) {
  if (face_count < 1) throw InvalidArgument("face_count must be >= 1");
  return std::log10(static_cast<double>(face_count));
}

inline void check_quad_ratio(double r) {
  if (!(r >= 0.0 && r <= 1.0)) throw InvalidArgument("quad_ratio must lie in [0, 1]");
}

/// Rows [face-count embedding, quad-ratio embedding].
template <typename T>
Mat<T> encode_scalars(const EncoderWeights<T>& w, int face_count, double quad_ratio,
                      ScalarCache<T>* fc_cache = nullptr, ScalarCache<T>* qr_cache = nullptr) {
  const double f = face_count_feature(face_count);
  check_quad_ratio(quad_ratio);
  Mat<T> out(2, w.out_norm.cols());
  out.row(0) = scalar_mlp(w.face_count, static_cast<T>(f), fc_cache);
  out.row(1) = scalar_mlp(w.quad_ratio, static_cast<T>(quad_ratio), qr_cache);
  return out;
}

/// [point rows..., face count, quad ratio].
template <typename T>
Mat<T> bundle(const Mat<T>& point_emb, const Mat<T>& scalar_embs) {
  if (point_emb.cols() != scalar_embs.cols() || scalar_embs.rows() != 2)
    throw InvalidArgument("bundle: channel or row mismatch");
  Mat<T> out(point_emb.rows() + 2, point_emb.cols());
  out.topRows(point_emb.rows()) = point_emb;
  out.bottomRows(2) = scalar_embs;
  return out;
}

template <typename T>
struct ConditionCache {
  PointEncoderCache<T> points;
  ScalarCache<T> face_count, quad_ratio;
};

template <typename T>
Mat<T> condition(const EncoderWeights<T>& w, int head_dim, const PointCloud& points, int face_count,
                 double quad_ratio, ConditionCache<T>* cache = nullptr) {
  return bundle(encode_pointcloud(w, head_dim, points, cache ? &cache->points : nullptr),
                encode_scalars(w, face_count, quad_ratio, cache ? &cache->face_count : nullptr,
                               cache ? &cache->quad_ratio : nullptr));
}

template <typename T>
void condition_backward(const EncoderWeights<T>& w, int head_dim, const ConditionCache<T>& c, const Mat<T>& dbundle,
                        EncoderWeights<T>& g) {
  const Eigen::Index k = dbundle.rows() - 2;
  encode_pointcloud_backward(w, head_dim, c.points, Mat<T>(dbundle.topRows(k)), g);
  scalar_mlp_backward(w.face_count, c.face_count, Mat<T>(dbundle.row(k)), g.face_count);
  scalar_mlp_backward(w.quad_ratio, c.quad_ratio, Mat<T>(dbundle.row(k + 1)), g.quad_ratio);
}

}  // namespace meshtron
