#include "kinediff/denoiser.h"
#include "kinediff/errors.h"
#include "kinediff/skeleton.h"
#include "test_support.h"

#include <gtest/gtest.h>

#include <cmath>

namespace kinediff {
namespace {

AttentionWeights random_attention(std::size_t c, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(c));
  AttentionWeights w;
  w.wq = testing::random_tensor({c, c}, rng, s, true);
  w.bq = testing::random_tensor({c}, rng, 0.1, true);
  w.wk = testing::random_tensor({c, c}, rng, s, true);
  w.bk = testing::random_tensor({c}, rng, 0.1, true);
  w.wv = testing::random_tensor({c, c}, rng, s, true);
  w.bv = testing::random_tensor({c}, rng, 0.1, true);
  w.wo = testing::random_tensor({c, c}, rng, s, true);
  w.bo = testing::random_tensor({c}, rng, 0.1, true);
  return w;
}

Tensor eye(std::size_t n) {
  Tensor t({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    t.mutable_values()[i * n + i] = 1.0;
  }
  return t;
}

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.channels = 8;
  c.heads = 2;
  c.depth = 1;
  c.mlp_ratio = 2;
  c.frames = 2;
  c.joints = 17;
  return c;
}

TEST(Fuse, LayoutAndRootPadding) {
  const Skeleton s = build_h36m_skeleton();
  Rng rng(1);
  const Tensor x = testing::random_tensor({3, 17, 2}, rng);
  const Tensor l = testing::random_tensor({3, 16}, rng);
  const Tensor d = testing::random_tensor({3, 16, 3}, rng);
  const Tensor f = fuse_inputs(s, x, l, d);
  ASSERT_EQ(f.shape(), (Shape{3, 17, 6}));
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(f.at({n, 0, 0}), x.at({n, 0, 0}));
    EXPECT_EQ(f.at({n, 0, 1}), x.at({n, 0, 1}));
    for (std::size_t k = 2; k < 6; ++k) {
      EXPECT_EQ(f.at({n, 0, k}), 0.0);
    }
    for (std::size_t q = 1; q < 17; ++q) {
      const auto b = static_cast<std::size_t>(s.bone_of_joint(q));
      EXPECT_EQ(f.at({n, q, 2}), l.at({n, b}));
      EXPECT_EQ(f.at({n, q, 5}), d.at({n, b, 2}));
    }
  }
  const Tensor z = fuse_inputs(s, Tensor({2, 17, 2}, 0.0), Tensor({2, 16}, 0.0), Tensor({2, 16, 3}, 0.0));
  for (double v : z.values()) {
    EXPECT_EQ(v, 0.0);
  }
  EXPECT_THROW(fuse_inputs(s, x, Tensor({3, 15}, 0.0), d), ContractError);
  EXPECT_EQ(fuse_joint_inputs(x, testing::random_tensor({3, 17, 3}, rng)).shape(), (Shape{3, 17, 5}));
}

TEST(Khst, ZeroAlphaIsPlainAttention) {
  const Skeleton s = build_h36m_skeleton();
  const Tensor adj = adjacency_stack(graph_distance_banks(s));
  Rng rng(2);
  const AttentionWeights w = random_attention(16, rng);
  const Tensor h = testing::random_tensor({3, 17, 16}, rng);
  const Tensor plain = multi_head_attention(h, w, 4);
  const Tensor block = khst_attention(h, adj, Tensor({4}, 0.0), w, 4);
  const Tensor head = khst_attention(h, adj, Tensor({4, 4}, 0.0), w, 4);
  EXPECT_LT(testing::max_abs_diff(plain.values(), block.values()), 1e-12);
  EXPECT_LT(testing::max_abs_diff(plain.values(), head.values()), 1e-12);
}

TEST(Khst, FirstOrderBiasAddsNeighbourRows) {
  const Skeleton s = build_h36m_skeleton();
  const AdjacencyBank bank = graph_distance_banks(s);
  const Tensor adj = adjacency_stack(bank);
  Rng rng(3);
  // Identity value/output projections with V = h = I make the output equal
  // to the refined attention map itself.
  AttentionWeights w = random_attention(17, rng);
  w.wv = eye(17);
  w.bv = Tensor({17}, 0.0);
  w.wo = eye(17);
  w.bo = Tensor({17}, 0.0);
  const Tensor h = eye(17);
  Tensor a_orig;
  multi_head_attention(h, w, 1, nullptr, &a_orig);
  const Tensor out = khst_attention(h, adj, Tensor({4}, std::vector<double>{1, 0, 0, 0}), w, 1);
  for (std::size_t u = 0; u < 17; ++u) {
    for (std::size_t v = 0; v < 17; ++v) {
      EXPECT_NEAR(out.at({u, v}) - a_orig.at({0, 0, u, v}), bank.at(0, u, v), 1e-12);
    }
  }
  // The right knee gains exactly its hip and ankle rows.
  double gained = 0.0;
  for (std::size_t v = 0; v < 17; ++v) {
    gained += out.at({2, v}) - a_orig.at({0, 0, 2, v});
  }
  EXPECT_NEAR(gained, 2.0, 1e-12);
  EXPECT_NEAR(out.at({2, 1}) - a_orig.at({0, 0, 2, 1}), 1.0, 1e-12);
  EXPECT_NEAR(out.at({2, 3}) - a_orig.at({0, 0, 2, 3}), 1.0, 1e-12);
}

TEST(Khst, AlphaGradient) {
  const Skeleton s = build_h36m_skeleton();
  const Tensor adj = adjacency_stack(graph_distance_banks(s));
  Rng rng(4);
  const AttentionWeights w = random_attention(8, rng);
  const Tensor h = testing::random_tensor({2, 17, 8}, rng);
  const Tensor alpha = testing::random_tensor({4}, rng, 0.3, true);
  const Tensor target = testing::random_tensor({2, 17, 8}, rng);
  const auto checks = testing::check_gradients(
      [&] { return mean(square(khst_attention(h, adj, alpha, w, 2) - target)); }, {{"alpha", alpha}});
  EXPECT_LT(checks[0].rel_err, 1e-4);
  EXPECT_GT(checks[0].analytic_norm, 0.0);
}

TEST(Khtt, SingleFrameIsValueProjection) {
  Rng rng(5);
  const AttentionWeights w = random_attention(8, rng);
  const Tensor h = testing::random_tensor({17, 1, 8}, rng);
  const Tensor out = khtt_attention(h, w, 2);
  const Tensor expect = linear(linear(h, w.wv, w.bv), w.wo, w.bo);
  EXPECT_LT(testing::max_abs_diff(out.values(), expect.values()), 1e-12);
}

TEST(Khtt, ConstantInTimeAndRowsSumToOne) {
  Rng rng(6);
  const AttentionWeights w = random_attention(8, rng);
  const Tensor frame = testing::random_tensor({4, 1, 8}, rng);
  const Tensor h = concat({frame, frame, frame, frame, frame}, 1);
  Tensor a;
  const Tensor out = khtt_attention(h, w, 2, &a);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t n = 1; n < 5; ++n) {
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_NEAR(out.at({j, n, c}), out.at({j, 0, c}), 1e-12);
      }
    }
  }
  const Tensor r = khtt_attention(testing::random_tensor({4, 6, 8}, rng), w, 2, &a);
  const Tensor rows = sum(a, 3);
  for (double v : rows.values()) {
    EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(Denoiser, ShapeDeterminismAndErrors) {
  DenoiserConfig cfg = small_config();
  cfg.frames = 3;
  const Denoiser d(cfg, build_h36m_skeleton(), 9);
  Rng rng(7);
  const Tensor in = testing::random_tensor({2, 3, 17, 6}, rng);
  const std::vector<int> ts = {5, 700};
  const Tensor a = d.forward(in, ts);
  const Tensor b = d.forward(in, ts);
  EXPECT_EQ(a.shape(), (Shape{2, 3, 17, 3}));
  EXPECT_EQ(testing::max_abs_diff(a.values(), b.values()), 0.0);
  EXPECT_THROW(d.forward(in, std::vector<int>{1}), ContractError);
  EXPECT_THROW(d.forward(testing::random_tensor({2, 3, 17, 5}, rng), ts), ContractError);

  DenoiserConfig bad = cfg;
  bad.channels = 10;
  bad.heads = 4;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(Denoiser(cfg, Skeleton::from_parents({-1, 0, 1}), 1), ConfigError);
}

TEST(Denoiser, SameSeedSameParameters) {
  const Denoiser a(small_config(), build_h36m_skeleton(), 42);
  const Denoiser b(small_config(), build_h36m_skeleton(), 42);
  const Denoiser c(small_config(), build_h36m_skeleton(), 43);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
    EXPECT_EQ(testing::max_abs_diff(a.parameters()[i].tensor.values(), b.parameters()[i].tensor.values()), 0.0);
    differs |= testing::max_abs_diff(a.parameters()[i].tensor.values(), c.parameters()[i].tensor.values()) > 0.0;
  }
  EXPECT_TRUE(differs);
}

TEST(Denoiser, TiedHieZeroAlphaReducesToPlainTransformer) {
  DenoiserConfig cfg = small_config();
  cfg.frames = 4;
  cfg.depth = 2;
  Denoiser full(cfg, build_h36m_skeleton(), 11);
  DenoiserConfig plain_cfg = cfg;
  plain_cfg.use_hie = false;
  plain_cfg.use_khst = false;
  Denoiser plain(plain_cfg, build_h36m_skeleton(), 11);

  // Tie every HiE row to the first one and fold it into the joint embedding
  // of the reference network.
  auto hie = full.parameter("hie").mutable_values();
  for (std::size_t r = 1; r < 6; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      hie[r * 8 + c] = hie[c];
    }
  }
  const auto je = full.parameter("joint_embed").values();
  auto ref_je = plain.parameter("joint_embed").mutable_values();
  for (std::size_t i = 0; i < ref_je.size(); ++i) {
    ref_je[i] = je[i] + hie[i % 8];
  }
  Rng rng(12);
  const Tensor in = testing::random_tensor({2, 4, 17, 6}, rng);
  const std::vector<int> ts = {1, 999};
  const Tensor a = full.forward(in, ts);
  const Tensor b = plain.forward(in, ts);
  EXPECT_LT(testing::max_abs_diff(a.values(), b.values()), 1e-12);

  full.parameter("loop1.khst.alpha").mutable_values()[2] = 0.5;
  EXPECT_GT(testing::max_abs_diff(full.forward(in, ts).values(), b.values()), 1e-6);
}

TEST(Denoiser, LegSwapEquivariance) {
  // Swapping the left and right legs maps the tree onto itself and keeps
  // hierarchy levels, so the permuted network must permute its output.
  const std::vector<std::size_t> perm = {0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
  DenoiserConfig cfg = small_config();
  cfg.frames = 3;
  Denoiser d(cfg, build_h36m_skeleton(), 21);
  for (std::size_t b = 0; b < 2; ++b) {
    d.parameter("loop0.khst.alpha").mutable_values()[b] = 0.3 + 0.2 * static_cast<double>(b);
  }
  Rng rng(22);
  const Tensor in = testing::random_tensor({1, 3, 17, 6}, rng);
  const std::vector<int> ts = {321};
  const Tensor out = d.forward(in, ts);

  Denoiser swapped(cfg, build_h36m_skeleton(), 21);
  std::vector<NamedTensor> params;
  for (const auto& nt : d.parameters()) {
    params.push_back({nt.name, nt.tensor.detach()});
  }
  for (auto& nt : params) {
    if (nt.name == "joint_embed") {
      nt.tensor = gather(nt.tensor, 0, perm);
    }
  }
  swapped.load_parameters(params);
  const Tensor out_p = swapped.forward(gather(in, 2, perm), ts);
  EXPECT_LT(testing::max_abs_diff(out_p.values(), gather(out, 2, perm).values()), 1e-12);
}

TEST(Denoiser, HeadSharingAndBonesOutput) {
  DenoiserConfig cfg = small_config();
  cfg.alpha_sharing = AlphaSharing::Head;
  cfg.output_mode = OutputMode::Bones;
  Denoiser d(cfg, build_h36m_skeleton(), 5);
  EXPECT_EQ(d.parameter("loop0.khst.alpha").shape(), (Shape{2, 4}));
  Rng rng(6);
  const Tensor out = d.forward(testing::random_tensor({1, 2, 17, 6}, rng), std::vector<int>{10});
  ASSERT_EQ(out.shape(), (Shape{1, 2, 17, 3}));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(out.at({0, 1, 0, k}), 0.0);
  }
  EXPECT_EQ(parse_alpha_sharing("head"), AlphaSharing::Head);
  EXPECT_THROW(parse_output_mode("joints"), ConfigError);
}

TEST(Denoiser, EveryParameterGradientMatchesFiniteDifferences) {
  DenoiserConfig cfg = small_config();
  Denoiser d(cfg, build_h36m_skeleton(), 31);
  Rng rng(32);
  // Nonzero mixing coefficients so their gradient path is exercised away
  // from the reduction point.
  for (double& a : d.parameter("loop0.khst.alpha").mutable_values()) {
    a = 0.2 * rng.normal();
  }
  const Tensor in = testing::random_tensor({1, 2, 17, 6}, rng);
  const Tensor target = testing::random_tensor({1, 2, 17, 3}, rng);
  const std::vector<int> ts = {417};
  std::vector<std::pair<std::string, Tensor>> inputs;
  for (const auto& nt : d.parameters()) {
    inputs.emplace_back(nt.name, nt.tensor);
  }
  const auto checks = testing::check_gradients(
      [&] { return mean(square(d.forward(in, ts) - target)); }, inputs);
  ASSERT_EQ(checks.size(), d.parameters().size());
  for (const auto& c : checks) {
    EXPECT_LT(c.rel_err, 1e-4) << c.name;
    EXPECT_GT(c.analytic_norm, 0.0) << c.name;
  }
}

TEST(TimestepEmbedding, SinCosLayout) {
  const std::vector<int> ts = {0, 7};
  const Tensor e = timestep_embedding(ts, 8);
  ASSERT_EQ(e.shape(), (Shape{2, 8}));
  EXPECT_EQ(e.at({0, 0}), 0.0);
  EXPECT_EQ(e.at({0, 4}), 1.0);
  EXPECT_NEAR(e.at({1, 0}), std::sin(7.0), 1e-15);
  EXPECT_NEAR(e.at({1, 5}), std::cos(7.0 * std::exp(-std::log(10000.0) / 4.0)), 1e-15);
}

} // namespace
} // namespace kinediff
