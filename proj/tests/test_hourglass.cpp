#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "meshtron/decode.hpp"
#include "meshtron/gradcheck.hpp"

using namespace meshtron;

namespace {

HourglassConfig tiny_config() {
  HourglassConfig c;
  c.depths = {2, 2, 2};
  c.channels = 32;
  c.head_channels = 16;
  c.ffn_hidden = 48;
  c.window = 36;
  c.quant_level = 32;
  c.cond_queries = 8;
  c.encoder_depth = 2;
  return c;
}

PointCloud random_cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) {
    pc.positions.emplace_back(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    pc.normals.push_back(Vec3(rng.normal(), rng.normal(), rng.normal()).normalized());
  }
  return pc;
}

std::vector<Token> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Token> t(n);
  for (auto& x : t) x = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

TrainExample tiny_example(const HourglassConfig& cfg, std::uint64_t seed) {
  GeneratorSpec spec;
  spec.family = ShapeFamily::icosphere;
  spec.ico_subdiv_min = spec.ico_subdiv_max = 1;
  RawMesh normalized;
  gen_quantized(seed, spec, cfg.quant_level, &normalized);
  TrainExample ex;
  ex.sequence = encode(quantize(normalized, cfg.quant_level));
  ex.points = random_cloud(40, seed);
  ex.face_count = 80;
  ex.quad_ratio = 0.25;
  return ex;
}

template <typename T>
Mat<T> cond_for(const ParameterSet<T>& p, const HourglassConfig& cfg, std::uint64_t seed) {
  return condition(p.encoder, cfg.head_channels, random_cloud(50, seed), 100, 0.5);
}

}  // namespace

TEST(HourglassConfig, StackLayoutAndCrossPlan) {
  HourglassConfig c;
  c.depths = {4, 8, 12};
  EXPECT_EQ(c.stack_depths(), (std::array<int, 5>{2, 4, 12, 4, 2}));
  const auto plan = c.cross_plan();
  int crosses = 0;
  for (const auto& s : plan) crosses += static_cast<int>(std::count(s.begin(), s.end(), true));
  EXPECT_EQ(crosses, 6);  // blocks 4, 8, ..., 24
  EXPECT_TRUE(plan[4][1]);
  c.depths = {24, 0, 0};
  EXPECT_FALSE(c.level_active(1));
  EXPECT_EQ(c.stack_depths(), (std::array<int, 5>{12, 0, 0, 0, 12}));
  c.window = 100;
  EXPECT_THROW(c.check(), InvalidArgument);
  c.window = 99;
  c.head_channels = 48;
  EXPECT_THROW(c.check(), InvalidArgument);
}

TEST(InitModel, DeterministicAndCountMatchesShapes) {
  const auto cfg = tiny_config();
  const auto a = init_model<float>(cfg, 5);
  const auto b = init_model<float>(cfg, 5);
  const auto ta = tensors(a), tb = tensors(b);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(*ta[i], *tb[i]);
    EXPECT_TRUE(ta[i]->allFinite());
  }
  // Closed-form count.
  const std::size_t c = 32, h = 48, v = 35, k = 8;
  const std::size_t self_block = 2 * c + 4 * c * c + 3 * c * h;
  const std::size_t cross_block = self_block + c;
  const std::size_t decoder = v * c + 5 * self_block + cross_block + 4 * (3 * c * c) + c + c * v + v;
  const std::size_t encoder = 6 * c + c + k * c + 2 * cross_block + c + 2 * (c + c + c * c + c);
  EXPECT_EQ(parameter_count(a), decoder + encoder);
  EXPECT_TRUE(a.head_b.isZero());
}

TEST(Loss, UniformLogitsAndMasking) {
  const int v = 35;
  Mat<double> logits = Mat<double>::Zero(3, v);
  const std::vector<Token> t = {1, 2, 3};
  EXPECT_NEAR(cross_entropy(logits, std::span<const Token>(t), Token(34)).mean, std::log(35.0), 1e-12);

  // Rows: target 0 with logit margin, padding, target 5 uniform.
  logits(0, 0) = std::log(34.0);  // p(0) = 34 / (34 + 34) = 0.5
  const std::vector<Token> masked = {0, 34, 5};
  const auto r = cross_entropy(logits, std::span<const Token>(masked), Token(34));
  EXPECT_EQ(r.count, 2u);
  EXPECT_NEAR(r.mean, 0.5 * (std::log(2.0) + std::log(35.0)), 1e-12);
  EXPECT_TRUE(std::isnan(r.per_token[1]));

  Mat<double> sharp = Mat<double>::Zero(1, v);
  sharp(0, 7) = 200.0;
  const std::vector<Token> seven = {7};
  EXPECT_LT(cross_entropy(sharp, std::span<const Token>(seven), Token(34)).mean, 1e-60);

  const std::vector<Token> all_pad = {34, 34, 34};
  EXPECT_THROW(cross_entropy(Mat<double>(Mat<double>::Zero(3, v)), std::span<const Token>(all_pad), Token(34)),
               InvalidArgument);
}

TEST(Forward, GradientMatchesFiniteDifferences) {
  const auto cfg = tiny_config();
  auto p = init_model<double>(cfg, 3);
  const auto ex = tiny_example(cfg, 4);
  const auto r = grad_check(p, cfg, ex, 9, 72, cfg.window, 240, 1e-5, 7);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  for (const char* role : {"embed", "attention", "cross_attention", "ffn", "norm", "shortening", "upsampling", "head",
                           "encoder"})
    EXPECT_TRUE(r.roles.count(role)) << role;
}

TEST(Forward, ShorteningGradientsNonzero) {
  const auto cfg = tiny_config();
  const auto p = init_model<double>(cfg, 3);
  const auto ex = tiny_example(cfg, 4);
  auto g = zeros_like(p);
  example_loss(p, cfg, ex.sequence, 0, 72, ex.points, ex.face_count, ex.quad_ratio, cfg.window, &g);
  EXPECT_GT(g.shorten1.norm(), 0.0);
  EXPECT_GT(g.shorten2.norm(), 0.0);
  EXPECT_GT(g.upsample1.norm(), 0.0);
  EXPECT_GT(g.encoder.queries.norm(), 0.0);
}

TEST(Forward, ZeroHeadWeightsStopGradient) {
  auto cfg = tiny_config();
  auto p = init_model<double>(cfg, 3);
  p.head_w.setZero();
  const auto ex = tiny_example(cfg, 4);
  auto g = zeros_like(p);
  example_loss(p, cfg, ex.sequence, 0, 72, ex.points, ex.face_count, ex.quad_ratio, cfg.window, &g);
  EXPECT_GT(g.head_w.norm(), 0.0);
  EXPECT_EQ(g.embed.norm(), 0.0);
  EXPECT_EQ(g.shorten1.norm(), 0.0);
  EXPECT_EQ(g.encoder.lift_w.norm(), 0.0);
}

TEST(Forward, StrictCausalityUnderPerturbation) {
  const auto cfg = tiny_config();
  const auto p = init_model<float>(cfg, 11);
  const Mat<float> cond = cond_for(p, cfg, 2);
  Rng rng(99);
  const auto base = random_tokens(108, cfg.vocab().size(), 1);
  const Mat<float> ref = forward(p, cfg, base, 0, cond, cfg.window);
  for (int trial = 0; trial < 100; ++trial) {
    auto tok = base;
    const auto j = static_cast<std::size_t>(rng.below(tok.size()));
    tok[j] = static_cast<Token>((tok[j] + 1 + rng.below(cfg.vocab().size() - 1)) % cfg.vocab().size());
    const Mat<float> out = forward(p, cfg, tok, 0, cond, cfg.window);
    for (std::size_t i = 0; i < j; ++i) ASSERT_EQ(out.row(i), ref.row(i)) << "j=" << j << " i=" << i;
    EXPECT_NE(out.row(j), ref.row(j));
  }
}

TEST(Forward, JacobianIsLowerTriangular) {
  // d logits_i / d embed(token_j) vanishes for j > i, in double precision.
  auto cfg = tiny_config();
  auto p = init_model<double>(cfg, 12);
  const Mat<double> cond = cond_for(p, cfg, 3);
  std::vector<Token> tok(27);
  std::iota(tok.begin(), tok.end(), 0);  // distinct tokens: one embedding row per position
  for (std::size_t i = 0; i < 18; ++i) {
    HourglassCache<double> cache;
    const Mat<double> logits = forward(p, cfg, tok, 0, cond, kNoWindow, &cache);
    Mat<double> d = Mat<double>::Zero(logits.rows(), logits.cols());
    d.row(static_cast<Eigen::Index>(i)).setOnes();
    auto g = zeros_like(p);
    backward(p, cfg, cache, cond, d, g);
    for (std::size_t j = i + 1; j < tok.size(); ++j) EXPECT_LT(g.embed.row(tok[j]).norm(), 1e-10) << i << "," << j;
    EXPECT_GT(g.embed.row(tok[i]).norm(), 0.0);
  }
}

TEST(Forward, ZeroDepthIsPositionwise) {
  HourglassConfig cfg = tiny_config();
  cfg.depths = {0, 0, 0};
  const auto p = init_model<double>(cfg, 1);
  const auto tok = random_tokens(27, cfg.vocab().size(), 2);
  const Mat<double> a = forward(p, cfg, tok, 0, Mat<double>(), cfg.window);
  auto other = random_tokens(27, cfg.vocab().size(), 3);
  other[13] = tok[13];
  const Mat<double> b = forward(p, cfg, other, 0, Mat<double>(), cfg.window);
  EXPECT_EQ(a.row(13), b.row(13));
}

TEST(Forward, StaticRoutingUnitCounts) {
  const auto cfg = tiny_config();
  const auto p = init_model<float>(cfg, 1);
  const Mat<float> cond = cond_for(p, cfg, 1);
  for (std::size_t len : {9u, 36u, 117u}) {
    HourglassCache<float> cache;
    forward(p, cfg, random_tokens(len, cfg.vocab().size(), len), 0, cond, cfg.window, &cache);
    EXPECT_EQ(static_cast<std::size_t>(cache.x2out.rows()), (len + 8) / 9);
    EXPECT_EQ(static_cast<std::size_t>(cache.x1out.rows()), len / 3);
  }
  EXPECT_THROW(forward(p, cfg, random_tokens(10, cfg.vocab().size(), 1), 0, cond, cfg.window), InvalidArgument);
  EXPECT_THROW(forward(p, cfg, random_tokens(9, cfg.vocab().size(), 1), 3, cond, cfg.window), InvalidArgument);
  EXPECT_THROW(forward(p, cfg, random_tokens(9, cfg.vocab().size(), 1), 0, Mat<float>(), cfg.window),
               InvalidArgument);
}

TEST(Rope, RelativeUnderShiftsOfNine) {
  const auto cfg = tiny_config();
  const auto p = init_model<float>(cfg, 21);
  const Mat<float> cond = cond_for(p, cfg, 4);
  const auto tok = random_tokens(72, cfg.vocab().size(), 5);
  const Mat<float> a = forward(p, cfg, tok, 0, cond, cfg.window);
  for (std::int64_t shift : {9, 900, 9009}) {
    const Mat<float> b = forward(p, cfg, tok, shift, cond, cfg.window);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5) << shift;
  }
}

TEST(Rope, RotationPreservesNormAndInverts) {
  const std::vector<std::int64_t> pos = {0, 7, 123456};
  const Rope<double> rope(pos, 8, 1e6);
  Rng rng(1);
  Mat<double> x = gaussian<double>(3, 16, 1.0, rng);
  const Mat<double> orig = x;
  rope.apply(x, 8);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(x.row(i).norm(), orig.row(i).norm(), 1e-12);
  EXPECT_EQ(x.row(0), orig.row(0));
  rope.apply(x, 8, true);
  EXPECT_LT((x - orig).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, PrefixSegmentMatchesFullSequence) {
  auto cfg = tiny_config();
  cfg.window = 117;
  const auto p = init_model<float>(cfg, 8);
  const Mat<float> cond = cond_for(p, cfg, 5);
  const auto tok = random_tokens(117, cfg.vocab().size(), 6);
  const Mat<float> full = forward(p, cfg, tok, 0, cond, cfg.window);
  const std::vector<Token> head(tok.begin(), tok.begin() + 54);
  const Mat<float> part = forward(p, cfg, head, 0, cond, cfg.window);
  EXPECT_LT((part - full.topRows(54)).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Forward, WindowInactiveWhenShorter) {
  const auto cfg = tiny_config();
  const auto p = init_model<double>(cfg, 8);
  const Mat<double> cond = cond_for(p, cfg, 5);
  const auto tok = random_tokens(36, cfg.vocab().size(), 6);
  const Mat<double> a = forward(p, cfg, tok, 0, cond, 36);
  const Mat<double> b = forward(p, cfg, tok, 0, cond, kNoWindow);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
  const auto longer = random_tokens(90, cfg.vocab().size(), 7);
  EXPECT_GT((forward(p, cfg, longer, 0, cond, 36) - forward(p, cfg, longer, 0, cond, kNoWindow))
                .bottomRows(9).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(DecodeStep, MatchesForwardInsideAndBeyondWindow) {
  const auto cfg = tiny_config();
  const auto pf = init_model<float>(cfg, 31);
  const auto pd = cast_parameters<double>(pf);
  const auto tok = random_tokens(144, cfg.vocab().size(), 9);
  {
    const Mat<float> cond = cond_for(pf, cfg, 6);
    const Mat<float> full = forward(pf, cfg, std::span<const Token>(tok.data(), 36), 0, cond, cfg.window);
    auto cache = make_cache(pf, cfg, cond, cfg.window);
    for (std::size_t i = 0; i < 36; ++i) {
      const Mat<float> row = decode_step(pf, cfg, cache, tok[i], static_cast<std::int64_t>(i));
      EXPECT_LT((row - full.row(i)).cwiseAbs().maxCoeff(), 1e-4) << i;
    }
  }
  // Beyond the window the cache and the windowed forward pass agree as well.
  const Mat<double> cond = cond_for(pd, cfg, 6);
  const Mat<double> full = forward(pd, cfg, tok, 0, cond, cfg.window);
  auto cache = make_cache(pd, cfg, cond, cfg.window);
  for (std::size_t i = 0; i < tok.size(); ++i) {
    const Mat<double> row = decode_step(pd, cfg, cache, tok[i], static_cast<std::int64_t>(i));
    ASSERT_LT((row - full.row(i)).cwiseAbs().maxCoeff(), 1e-9) << i;
    ASSERT_LE(cache.level0_entries(), cfg.window);
  }
  EXPECT_EQ(cache.level0_entries(), cfg.window);
  EXPECT_THROW(decode_step(pd, cfg, cache, tok[0], 500), InvalidArgument);
}

TEST(DecodeStep, OffsetStartMatchesChunkForward) {
  const auto cfg = tiny_config();
  const auto p = init_model<double>(cfg, 32);
  const Mat<double> cond = cond_for(p, cfg, 7);
  const auto tok = random_tokens(45, cfg.vocab().size(), 10);
  const Mat<double> full = forward(p, cfg, tok, 90, cond, cfg.window);
  auto cache = make_cache(p, cfg, cond, cfg.window);
  for (std::size_t i = 0; i < tok.size(); ++i) {
    const Mat<double> row = decode_step(p, cfg, cache, tok[i], static_cast<std::int64_t>(90 + i));
    ASSERT_LT((row - full.row(i)).cwiseAbs().maxCoeff(), 1e-9) << i;
  }
}

TEST(Generate, FaceLimitHaltsAtTwiceTheCondition) {
  const auto cfg = tiny_config();
  auto p = init_model<float>(cfg, 41);
  // Never E, and a strong preference for small coordinates so the face order
  // cannot saturate (a saturated order leaves E as the only valid token).
  p.head_b(0, cfg.vocab().end()) = -1e4f;
  for (int k = 0; k < cfg.quant_level; ++k) p.head_b(0, k) = -4.0f * static_cast<float>(k);
  const Mat<float> cond = cond_for(p, cfg, 8);
  GenerateOptions opt;
  opt.face_count = 10;
  opt.seed = 3;
  opt.window = cfg.window;
  const auto g = generate(p, cfg, cond, opt);
  EXPECT_EQ(g.halt, HaltReason::face_limit);
  EXPECT_EQ(g.faces, 20u);
  EXPECT_EQ(g.sequence.tokens.size(), 9u + 20u * 9u + 9u);
  EXPECT_NO_THROW(validate_sequence(g.sequence));
  EXPECT_NO_THROW(decode(g.sequence));
  const auto again = generate(p, cfg, cond, opt);
  EXPECT_EQ(again.sequence, g.sequence);
}

TEST(Generate, FinishedSequencesValidate) {
  const auto cfg = tiny_config();
  const auto p = init_model<float>(cfg, 42);
  const Mat<float> cond = cond_for(p, cfg, 9);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GenerateOptions opt;
    opt.face_count = 5;
    opt.seed = seed;
    opt.window = cfg.window;
    const auto g = generate(p, cfg, cond, opt);
    EXPECT_NO_THROW(validate_sequence(g.sequence));
    EXPECT_LE(g.faces, 10u);
  }
}

TEST(Generate, GreedyCacheEqualsRecompute) {
  const auto cfg = tiny_config();
  const auto p = init_model<double>(cfg, 43);
  const Mat<double> cond = cond_for(p, cfg, 10);
  GenerateOptions opt;
  opt.face_count = 8;
  opt.min_faces = 16;
  opt.temperature = 0.0;
  opt.window = cfg.window;
  const auto g = generate(p, cfg, cond, opt);
  ASSERT_GT(g.sequence.tokens.size(), cfg.window);
  DecoderState s = new_state(cfg.vocab());
  std::vector<Token> prefix(g.sequence.tokens.begin(), g.sequence.tokens.begin() + kGroup);
  for (std::size_t i = kGroup; i < g.sequence.tokens.size(); ++i) {
    const Mat<double> logits = recompute_last(p, cfg, prefix, cond, cfg.window);
    const Token next = g.sequence.tokens[i];
    if (next == cfg.vocab().end()) break;  // remaining E tokens are forced
    std::vector<double> row(logits.data(), logits.data() + logits.size());
    const ValidSet v = valid_set(s);
    if (v.end_allowed && !v.coords_empty() && s.faces_emitted < 16) row[cfg.vocab().end()] = -INFINITY;
    ASSERT_EQ(masked_argmax(std::span<const double>(row), s), next) << i;
    s = advance(std::move(s), next);
    prefix.push_back(next);
  }
}

TEST(Optim, ZeroLearningRateLeavesParameters) {
  const auto cfg = tiny_config();
  auto p = init_model<float>(cfg, 1);
  const auto before = p;
  auto g = zeros_like(p);
  for (auto* m : tensors(g)) m->setConstant(0.3f);
  AdamState<float> st(p);
  adamw_step(p, g, st, 0.0, AdamWOptions{});
  const auto a = tensors(p);
  const auto b = tensors(before);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);
}

TEST(Optim, ScheduleAndClipping) {
  CosineSchedule s{1e-3, 1e-4, 10, 110};
  EXPECT_NEAR(s.at(0), 1e-4, 1e-15);
  EXPECT_NEAR(s.at(9), 1e-3, 1e-15);
  EXPECT_NEAR(s.at(60), 0.5 * (1e-3 + 1e-4), 1e-12);
  EXPECT_NEAR(s.at(110), 1e-4, 1e-15);
  const auto cfg = tiny_config();
  auto g = zeros_like(init_model<double>(cfg, 1));
  g.embed.setConstant(1.0);
  const double before = clip_grad_norm(g, 1.0);
  EXPECT_NEAR(before, std::sqrt(static_cast<double>(g.embed.size())), 1e-9);
  EXPECT_NEAR(grad_norm(g), 1.0, 1e-12);
}

TEST(Train, DeterministicAndLossDecreases) {
  auto cfg = tiny_config();
  cfg.window = 117;
  GeneratorSpec spec;
  spec.family = ShapeFamily::box;
  PointPipelineOptions pts;
  pts.candidates = 512;
  pts.points = 64;
  const auto data = build_dataset(spec, cfg.quant_level, 20, 0, pts);
  TrainOptions opt;
  opt.steps = 60;
  opt.batch = 4;
  opt.chunk = 117;
  opt.lr = 3e-3;
  opt.warmup = 5;
  std::vector<double> a, b;
  for (auto* out : {&a, &b}) {
    Trainer<float> t(init_model<float>(cfg, 2), cfg, opt);
    for (std::size_t s = 0; s < opt.steps; ++s) out->push_back(t.step(data).loss);
  }
  EXPECT_EQ(a, b);
  const double first = std::accumulate(a.begin(), a.begin() + 10, 0.0) / 10;
  const double last = std::accumulate(a.end() - 10, a.end(), 0.0) / 10;
  EXPECT_LT(last, 0.8 * first);
}
