#include <gtest/gtest.h>

#include <cmath>

#include "defdet/deform_conv.hpp"
#include "defdet/gradcheck.hpp"
#include "defdet/rng.hpp"
#include "oracles.hpp"

using namespace defdet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t{std::move(shape)};
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

DeformConvLayer random_dc_layer(std::size_t in_c, std::size_t out_c, int k, int stride,
                                Rng& rng, double offset_scale) {
  DeformConvLayer l = make_dc_layer(in_c, out_c, k, stride, rng.raw());
  for (double& b : l.main.bias) b = rng.uniform(-0.3, 0.3);
  for (double& w : l.offset_branch.weights.data) w = rng.uniform(-offset_scale, offset_scale);
  for (double& b : l.offset_branch.bias) b = rng.uniform(-offset_scale, offset_scale);
  return l;
}

}  // namespace

TEST(DeformConv, ZeroOffsetsEqualPlainConv) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tensor in = random_tensor({1, 2, 6, 6}, rng);
    DeformConvLayer l = make_dc_layer(2, 3, 3, 1, rng.raw());
    for (double& b : l.main.bias) b = rng.uniform(-0.3, 0.3);
    DeformConvResult r = dc_forward(in, l);
    for (double v : r.offsets.data) EXPECT_EQ(v, 0.0);
    Tensor plain = conv2d(in, l.main);
    ASSERT_EQ(r.output.shape, plain.shape);
    for (std::size_t i = 0; i < plain.numel(); ++i)
      EXPECT_NEAR(r.output.data[i], plain.data[i], 1e-12);
  }
}

TEST(DeformConv, InjectedUnitOffsetShiftsInputUp) {
  Tensor in{{1, 1, 3, 3}};
  for (std::size_t i = 0; i < 9; ++i) in.data[i] = static_cast<double>(i + 1);
  ConvParams main;
  main.weights = Tensor{{1, 1, 1, 1}, {1.0}};
  main.bias = {0.0};
  Tensor offsets{{1, 2, 3, 3}};
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) offsets.at(0, 0, y, x) = 1.0;  // dy = 1
  Tensor out = dc_core_forward(in, main, offsets);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 3; ++x)
      EXPECT_DOUBLE_EQ(out.at(0, 0, y, x), in.at(0, 0, y + 1, x));
  for (std::size_t x = 0; x < 3; ++x) EXPECT_DOUBLE_EQ(out.at(0, 0, 2, x), 0.0);
}

TEST(DeformConv, MatchesNaivePerPositionLoop) {
  Rng rng(21);
  Tensor in = random_tensor({1, 2, 8, 8}, rng);
  DeformConvLayer l = random_dc_layer(2, 3, 3, 1, rng, 0.4);
  DeformConvResult r = dc_forward(in, l);
  Tensor offsets = conv2d(in, l.offset_branch);
  Tensor want = oracle::deform_conv_naive(in, l.main, offsets);
  ASSERT_EQ(r.output.shape, want.shape);
  for (std::size_t i = 0; i < want.numel(); ++i)
    EXPECT_NEAR(r.output.data[i], want.data[i], 1e-12);
}

TEST(DeformConvBackward, ZeroUpstreamGivesZeroGrads) {
  Rng rng(22);
  Tensor in = random_tensor({1, 2, 5, 5}, rng);
  DeformConvLayer l = random_dc_layer(2, 2, 3, 1, rng, 0.3);
  DeformConvResult r = dc_forward(in, l);
  Tensor up = r.output.zeros_like();
  DeformGradBundle g = dc_backward(in, l, r.offsets, up);
  for (double v : g.d_input.data) EXPECT_EQ(v, 0.0);
  for (double v : g.d_main_weights.data) EXPECT_EQ(v, 0.0);
  for (double v : g.d_offset_weights.data) EXPECT_EQ(v, 0.0);
  for (double v : g.d_offsets.data) EXPECT_EQ(v, 0.0);
}

TEST(DeformConvBackward, FrozenZeroOffsetsMatchPlainConvGrads) {
  Rng rng(23);
  Tensor in = random_tensor({1, 2, 5, 5}, rng);
  DeformConvLayer l = make_dc_layer(2, 3, 3, 1, rng.raw());
  DeformConvResult r = dc_forward(in, l);
  Tensor up = random_tensor(r.output.shape, rng);
  DeformGradBundle g = dc_backward(in, l, r.offsets, up);
  GradBundle plain = conv2d_backward(in, l.main, up);
  for (std::size_t i = 0; i < plain.d_weights.numel(); ++i)
    EXPECT_NEAR(g.d_main_weights.data[i], plain.d_weights.data[i], 1e-12);
  for (std::size_t i = 0; i < plain.d_bias.size(); ++i)
    EXPECT_NEAR(g.d_main_bias[i], plain.d_bias[i], 1e-12);
}

// Finite-difference check over every parameter group of the full layer.
TEST(DeformConvBackward, AllParameterGroupsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 101);
    Tensor in = random_tensor({1, 2, 6, 6}, rng);
    DeformConvLayer l = random_dc_layer(2, 2, 3, 1, rng, 0.4);
    Tensor weight;
    {
      DeformConvResult probe = dc_forward(in, l);
      weight = random_tensor(probe.output.shape, rng);
    }
    auto scalar = [&]() {
      DeformConvResult r = dc_forward(in, l);
      double s = 0.0;
      for (std::size_t i = 0; i < r.output.numel(); ++i)
        s += weight.data[i] * r.output.data[i];
      return s;
    };
    DeformConvResult r = dc_forward(in, l);
    DeformGradBundle g = dc_backward(in, l, r.offsets, weight);

    auto fd_in = finite_diff_grad_span(scalar, in.data.data(), in.numel(), 1e-5);
    EXPECT_LT(max_rel_err(g.d_input.data, fd_in), 1e-4) << "input, seed " << seed;

    auto fd_mw = finite_diff_grad_span(scalar, l.main.weights.data.data(),
                                       l.main.weights.numel(), 1e-5);
    EXPECT_LT(max_rel_err(g.d_main_weights.data, fd_mw), 1e-4) << "main w, seed " << seed;

    auto fd_mb = finite_diff_grad_span(scalar, l.main.bias.data(), l.main.bias.size(), 1e-5);
    EXPECT_LT(max_rel_err(g.d_main_bias, fd_mb), 1e-4) << "main b, seed " << seed;

    auto fd_ow = finite_diff_grad_span(scalar, l.offset_branch.weights.data.data(),
                                       l.offset_branch.weights.numel(), 1e-5);
    EXPECT_LT(max_rel_err(g.d_offset_weights.data, fd_ow), 1e-4)
        << "offset w, seed " << seed;

    auto fd_ob = finite_diff_grad_span(scalar, l.offset_branch.bias.data(),
                                       l.offset_branch.bias.size(), 1e-5);
    EXPECT_LT(max_rel_err(g.d_offset_bias, fd_ob), 1e-4) << "offset b, seed " << seed;
  }
}

TEST(DeformConvBackward, OffsetFieldGradMatchesFiniteDifferences) {
  Rng rng(77);
  Tensor in = random_tensor({1, 2, 5, 5}, rng);
  ConvParams main;
  main.weights = random_tensor({2, 2, 3, 3}, rng);
  main.bias = {0.1, -0.2};
  main.padding = 1;
  Tensor offsets = random_tensor({1, 18, 5, 5}, rng, -0.7, 0.7);
  Tensor weight = random_tensor({1, 2, 5, 5}, rng);
  auto scalar = [&](const Tensor& off) {
    Tensor out = dc_core_forward(in, main, off);
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += weight.data[i] * out.data[i];
    return s;
  };
  DeformGradBundle g = dc_core_backward(in, main, offsets, weight);
  Tensor fd = finite_diff_grad(scalar, offsets, 1e-5);
  EXPECT_LT(max_rel_err(g.d_offsets, fd), 1e-4);
}

TEST(MakeDcLayer, DeterministicAndZeroOffsetBranch) {
  DeformConvLayer a = make_dc_layer(3, 4, 3, 1, 42);
  DeformConvLayer b = make_dc_layer(3, 4, 3, 1, 42);
  EXPECT_EQ(a.main.weights.data, b.main.weights.data);
  DeformConvLayer c = make_dc_layer(3, 4, 3, 1, 43);
  EXPECT_NE(a.main.weights.data, c.main.weights.data);
  for (double v : c.offset_branch.weights.data) EXPECT_EQ(v, 0.0);
  for (double v : c.offset_branch.bias) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(make_dc_layer(3, 4, 4, 1, 1), ShapeError);
}

TEST(MakeDcLayer, FreshLayerEqualsPlainConv) {
  Rng rng(31);
  Tensor in = random_tensor({2, 3, 8, 8}, rng);
  DeformConvLayer l = make_dc_layer(3, 5, 3, 2, 7);
  DeformConvResult r = dc_forward(in, l);
  Tensor plain = conv2d(in, l.main);
  for (std::size_t i = 0; i < plain.numel(); ++i)
    EXPECT_NEAR(r.output.data[i], plain.data[i], 1e-12);
}

TEST(DeformConv, TranslationConsistencyWithZeroOffsets) {
  Rng rng(33);
  const int H = 8, W = 8;
  Tensor in = random_tensor({1, 1, H, W}, rng);
  Tensor shifted{{1, 1, H, W}};
  for (int y = 0; y + 1 < H; ++y)
    for (int x = 0; x < W; ++x) shifted.at(0, 0, y, x) = in.at(0, 0, y + 1, x);
  DeformConvLayer l = make_dc_layer(1, 1, 3, 1, 5);
  Tensor out = dc_forward(in, l).output;
  Tensor out_shifted = dc_forward(shifted, l).output;
  // Interior rows of the shifted output equal rows one lower of the original.
  for (int y = 1; y + 2 < H; ++y)
    for (int x = 1; x + 1 < W; ++x)
      EXPECT_NEAR(out_shifted.at(0, 0, y, x), out.at(0, 0, y + 1, x), 1e-12);
}

TEST(DeformConv, ClampKeepsSamplesInsideHalo) {
  Rng rng(34);
  Tensor in = random_tensor({1, 1, 6, 6}, rng);
  DeformConvLayer l = make_dc_layer(1, 1, 3, 1, 9);
  l.clamp_offsets = true;
  for (double& b : l.offset_branch.bias) b = 50.0;  // would sample far outside
  DeformConvResult r = dc_forward(in, l);
  for (double v : r.output.data) EXPECT_TRUE(std::isfinite(v));
  // Unclamped, offset +50 samples only zeros; clamped at k+1=4 some taps
  // still land inside, so the outputs differ.
  l.clamp_offsets = false;
  DeformConvResult r2 = dc_forward(in, l);
  bool differs = false;
  for (std::size_t i = 0; i < r.output.numel(); ++i)
    differs |= std::fabs(r.output.data[i] - r2.output.data[i]) > 1e-9;
  EXPECT_TRUE(differs);
}
