#include <gtest/gtest.h>

#include "defdet/backbone.hpp"
#include "defdet/gradcheck.hpp"
#include "defdet/layers.hpp"
#include "defdet/rng.hpp"

using namespace defdet;

namespace {

Tensor random_image(int h, int w, Rng& rng) {
  Tensor t{{1, 3, (std::size_t)h, (std::size_t)w}};
  for (double& v : t.data) v = rng.uniform(0.0, 1.0);
  return t;
}

std::size_t count_params(Backbone& bb) {
  std::vector<ParamRef> refs;
  bb.collect(refs);
  return total_params(refs);
}

}  // namespace

TEST(Backbone, ForwardShapes256) {
  Backbone bb = build_backbone(BackboneConfig::tiny({}), 1);
  Rng rng(5);
  Tensor img = random_image(256, 256, rng);
  std::map<int, Tensor> C = bb.forward(img);
  ASSERT_EQ(C.size(), 4u);
  EXPECT_EQ(C.at(2).shape, (std::vector<std::size_t>{1, 32, 64, 64}));
  EXPECT_EQ(C.at(3).shape, (std::vector<std::size_t>{1, 64, 32, 32}));
  EXPECT_EQ(C.at(4).shape, (std::vector<std::size_t>{1, 128, 16, 16}));
  EXPECT_EQ(C.at(5).shape, (std::vector<std::size_t>{1, 256, 8, 8}));
}

TEST(Backbone, IndivisibleInputRejected) {
  Backbone bb = build_backbone(BackboneConfig::tiny({}), 1);
  Tensor img{{1, 3, 48, 64}};
  EXPECT_THROW(bb.forward(img), ShapeError);
}

TEST(Backbone, ZeroImageZeroBiasGivesZeroMaps) {
  Backbone bb = build_backbone(BackboneConfig::tiny({4, 5}), 3);
  Tensor img{{1, 3, 64, 64}};  // zeros; biases are zero-initialized
  std::map<int, Tensor> C = bb.forward(img);
  for (const auto& [level, c] : C) {
    for (double v : c.data) EXPECT_EQ(v, 0.0) << "level " << level;
  }
}

TEST(Backbone, SameSeedSameParameterBytes) {
  Backbone a = build_backbone(BackboneConfig::tiny({4, 5}), 42);
  Backbone b = build_backbone(BackboneConfig::tiny({4, 5}), 42);
  std::vector<ParamRef> ra, rb;
  a.collect(ra);
  b.collect(rb);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].name, rb[i].name);
    EXPECT_TRUE(std::equal(ra[i].value, ra[i].value + ra[i].n, rb[i].value));
  }
}

TEST(Backbone, DcParameterCountClosedForm) {
  Backbone plain = build_backbone(BackboneConfig::tiny({}), 7);
  Backbone dc5 = build_backbone(BackboneConfig::tiny({5}), 7);
  // Offset branch per DC block at stage 5: outC = 2*3*3 = 18, inC = 256,
  // k = 3 weights plus bias.
  const std::size_t expected_extra = 18 * 256 * 3 * 3 + 18;
  EXPECT_EQ(count_params(dc5), count_params(plain) + expected_extra);

  Backbone dc45 = build_backbone(BackboneConfig::tiny({4, 5}), 7);
  const std::size_t extra4 = 18 * 128 * 3 * 3 + 18;
  EXPECT_EQ(count_params(dc45), count_params(dc5) + extra4);
}

TEST(Backbone, DcToggleChangesOnlyThatStageManifest) {
  Backbone plain = build_backbone(BackboneConfig::tiny({}), 7);
  Backbone dc5 = build_backbone(BackboneConfig::tiny({5}), 7);
  std::vector<ParamRef> rp, rd;
  plain.collect(rp);
  dc5.collect(rd);
  std::map<std::string, std::string> mp, md;
  for (const ParamRef& r : rp) mp[r.name] = shape_to_string(r.shape);
  for (const ParamRef& r : rd) md[r.name] = shape_to_string(r.shape);
  for (const auto& [name, shape] : mp) {
    ASSERT_TRUE(md.count(name)) << name;
    EXPECT_EQ(md.at(name), shape) << name;
  }
  for (const auto& [name, shape] : md) {
    if (!mp.count(name)) {
      EXPECT_NE(name.find("backbone.s5"), std::string::npos) << name;
      EXPECT_NE(name.find(".off."), std::string::npos) << name;
    }
  }
  // Unchanged layers keep identical values (per-name seeding).
  for (const ParamRef& a : rp) {
    for (const ParamRef& b : rd) {
      if (a.name == b.name) {
        EXPECT_TRUE(std::equal(a.value, a.value + a.n, b.value)) << a.name;
      }
    }
  }
}

TEST(Backbone, ProbePixelGradientMatchesFiniteDifferences) {
  BackboneConfig cfg;
  cfg.stem_channels = 2;
  cfg.stages = {{2, 2, 1, false}, {3, 3, 1, false}, {4, 3, 1, true}, {5, 4, 1, false}};
  Backbone bb = build_backbone(cfg, 11);
  Rng rng(13);
  // Nudge DC offsets off the integer-coordinate kink of the sampler.
  for (auto& st : bb.stages) {
    for (auto& blk : st.blocks) {
      if (!blk.is_dc) continue;
      for (double& w : blk.dc.l.offset_branch.weights.data) w = rng.uniform(-0.2, 0.2);
      for (double& b : blk.dc.l.offset_branch.bias) b = rng.uniform(-0.2, 0.2);
    }
  }
  Tensor img = random_image(32, 32, rng);
  Tensor w5{{1, 4, 1, 1}, {0.7, -0.3, 0.5, 1.1}};
  auto scalar = [&]() {
    std::map<int, Tensor> C = bb.forward(img);
    double s = 0.0;
    for (std::size_t i = 0; i < w5.numel(); ++i) s += w5.data[i] * C.at(5).data[i];
    return s;
  };
  BackboneCache cache;
  bb.forward(img, cache);
  bb.zero_grad();
  Tensor d_img = bb.backward(cache, {{5, w5}});
  const double eps = 1e-5;
  for (std::size_t probe : {7u, 311u, 1024u, 2047u}) {
    const double saved = img.data[probe];
    img.data[probe] = saved + eps;
    const double fp = scalar();
    img.data[probe] = saved - eps;
    const double fm = scalar();
    img.data[probe] = saved;
    EXPECT_LT(rel_err(d_img.data[probe], (fp - fm) / (2 * eps)), 1e-4) << probe;
  }
}

TEST(BackboneConfig, Validation) {
  BackboneConfig cfg = BackboneConfig::tiny({});
  cfg.stages[2].channels = 8;  // decreasing
  EXPECT_THROW(cfg.validate(), ConfigError);
  BackboneConfig two;
  two.stages = {{2, 8, 1, false}, {3, 16, 1, false}};
  EXPECT_THROW(two.validate(), ConfigError);
}
