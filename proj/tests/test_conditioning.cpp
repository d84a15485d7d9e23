#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "meshtron/conditioning.hpp"

using namespace meshtron;

namespace {

EncoderConfig small() {
  EncoderConfig c;
  c.queries = 8;
  c.depth = 2;
  c.channels = 32;
  c.head_channels = 16;
  c.ffn_hidden = 48;
  return c;
}

PointCloud cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) {
    pc.positions.emplace_back(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    pc.normals.push_back(Vec3(rng.normal(), rng.normal(), rng.normal()).normalized());
  }
  return pc;
}

}  // namespace

TEST(PointEncoder, PermutationInvariant) {
  Rng rng(1);
  const auto w = init_encoder<double>(small(), rng);
  const PointCloud pc = cloud(200, 2);
  const Mat<double> a = encode_pointcloud(w, 16, pc);
  std::vector<std::size_t> perm(pc.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng shuffle(3);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);
  PointCloud shuffled;
  for (auto i : perm) {
    shuffled.positions.push_back(pc.positions[i]);
    shuffled.normals.push_back(pc.normals[i]);
  }
  EXPECT_LT((a - encode_pointcloud(w, 16, shuffled)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(PointEncoder, DuplicatingEveryPointChangesNothing) {
  Rng rng(4);
  const auto w = init_encoder<double>(small(), rng);
  const PointCloud pc = cloud(100, 5);
  PointCloud twice = pc;
  twice.positions.insert(twice.positions.end(), pc.positions.begin(), pc.positions.end());
  twice.normals.insert(twice.normals.end(), pc.normals.begin(), pc.normals.end());
  EXPECT_LT((encode_pointcloud(w, 16, pc) - encode_pointcloud(w, 16, twice)).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(PointEncoder, OutputShapeAndErrors) {
  Rng rng(6);
  const auto w = init_encoder<float>(small(), rng);
  const Mat<float> out = encode_pointcloud(w, 16, cloud(10, 1));
  EXPECT_EQ(out.rows(), 8);
  EXPECT_EQ(out.cols(), 32);
  EXPECT_THROW(encode_pointcloud(w, 16, PointCloud{}), InvalidArgument);
}

TEST(Scalars, FaceCountFeatureIsLog10) {
  EXPECT_DOUBLE_EQ(face_count_feature(1000) - face_count_feature(100), 1.0);
  EXPECT_DOUBLE_EQ(face_count_feature(1), 0.0);
  EXPECT_THROW(face_count_feature(0), InvalidArgument);
  EXPECT_THROW(check_quad_ratio(1.5), InvalidArgument);
  EXPECT_THROW(check_quad_ratio(-0.1), InvalidArgument);
  EXPECT_THROW(check_quad_ratio(std::nan("")), InvalidArgument);
  EXPECT_NO_THROW(check_quad_ratio(0.0));
  EXPECT_NO_THROW(check_quad_ratio(1.0));
}

TEST(Scalars, DistinctConditionsGiveDistinctRows) {
  Rng rng(7);
  const auto w = init_encoder<double>(small(), rng);
  const Mat<double> a = encode_scalars(w, 100, 0.0);
  const Mat<double> b = encode_scalars(w, 1000, 0.0);
  const Mat<double> c = encode_scalars(w, 100, 0.5);
  EXPECT_GT((a.row(0) - b.row(0)).norm(), 1e-3);
  EXPECT_EQ(a.row(1), b.row(1));
  EXPECT_EQ(a.row(0), c.row(0));
  EXPECT_GT((a.row(1) - c.row(1)).norm(), 1e-3);
}

TEST(Bundle, OrderIsPointsThenFaceCountThenQuadRatio) {
  Rng rng(8);
  const auto w = init_encoder<double>(small(), rng);
  const PointCloud pc = cloud(30, 9);
  const Mat<double> all = condition(w, 16, pc, 250, 0.25);
  ASSERT_EQ(all.rows(), 10);
  EXPECT_EQ(Mat<double>(all.topRows(8)), encode_pointcloud(w, 16, pc));
  const Mat<double> s = encode_scalars(w, 250, 0.25);
  EXPECT_EQ(Mat<double>(all.bottomRows(2)), s);
  EXPECT_THROW(bundle(Mat<double>(Mat<double>::Zero(4, 32)), Mat<double>(Mat<double>::Zero(2, 16))),
               InvalidArgument);
  EXPECT_THROW(bundle(Mat<double>(Mat<double>::Zero(4, 32)), Mat<double>(Mat<double>::Zero(3, 32))),
               InvalidArgument);
}

TEST(Bundle, ZeroNormalsAreAccepted) {
  Rng rng(10);
  const auto w = init_encoder<float>(small(), rng);
  PointCloud pc = cloud(20, 11);
  for (auto& n : pc.normals) n.setZero();
  EXPECT_TRUE(condition(w, 16, pc, 10, 0.0).allFinite());
}
