#include <gtest/gtest.h>

#include <cmath>

#include "defdet/gradcheck.hpp"
#include "defdet/head.hpp"
#include "defdet/rng.hpp"

using namespace defdet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t{std::move(shape)};
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

std::map<int, Tensor> toy_n_maps(Rng& rng, std::size_t ch, int img = 64) {
  std::map<int, Tensor> N;
  for (int lvl : {3, 4, 5}) {
    const std::size_t g = img >> lvl;
    N[lvl] = random_tensor({1, ch, g, g}, rng);
  }
  return N;
}

}  // namespace

TEST(HeadForward, ZeroWeightsGiveZeroLogitsAndHalfScores) {
  HeadConfig cfg;
  cfg.in_channels = 8;
  cfg.width = 8;
  Head head = build_head(cfg, 3);
  for (ConvUnit* u : {&head.cls_hidden, &head.cls_out, &head.box_hidden, &head.box_out}) {
    std::fill(u->p.weights.data.begin(), u->p.weights.data.end(), 0.0);
  }
  Rng rng(4);
  HeadOutput out = head.forward(toy_n_maps(rng, 8));
  for (const auto& [lvl, z] : out.cls) {
    for (double v : z.data) {
      EXPECT_EQ(v, 0.0);
      EXPECT_DOUBLE_EQ(sigmoid(v), 0.5);
    }
  }
}

TEST(HeadForward, ShapesFollowStrideArithmetic) {
  HeadConfig cfg;
  cfg.in_channels = 16;
  cfg.width = 16;
  cfg.num_classes = 6;
  Head head = build_head(cfg, 5);
  Rng rng(6);
  std::map<int, Tensor> N = toy_n_maps(rng, 16, 256);
  HeadOutput out = head.forward(N);
  EXPECT_EQ(out.cls.at(3).shape, (std::vector<std::size_t>{1, 6, 32, 32}));
  EXPECT_EQ(out.cls.at(4).shape, (std::vector<std::size_t>{1, 6, 16, 16}));
  EXPECT_EQ(out.cls.at(5).shape, (std::vector<std::size_t>{1, 6, 8, 8}));
  EXPECT_EQ(out.box.at(3).shape, (std::vector<std::size_t>{1, 4, 32, 32}));
}

TEST(HeadBackward, BothBranchesMatchFiniteDifferences) {
  HeadConfig cfg;
  cfg.in_channels = 3;
  cfg.width = 4;
  cfg.num_classes = 2;
  Head head = build_head(cfg, 7);
  Rng rng(8);
  std::map<int, Tensor> N = {{3, random_tensor({1, 3, 4, 4}, rng)}};
  std::map<int, Tensor> wc = {{3, random_tensor({1, 2, 4, 4}, rng)}};
  std::map<int, Tensor> wb = {{3, random_tensor({1, 4, 4, 4}, rng)}};
  auto scalar = [&]() {
    HeadOutput out = head.forward(N);
    double s = 0.0;
    for (std::size_t i = 0; i < out.cls.at(3).numel(); ++i)
      s += wc.at(3).data[i] * out.cls.at(3).data[i];
    for (std::size_t i = 0; i < out.box.at(3).numel(); ++i)
      s += wb.at(3).data[i] * out.box.at(3).data[i];
    return s;
  };
  HeadCache cache;
  head.forward(N, cache);
  head.zero_grad();
  std::map<int, Tensor> d_N = head.backward(cache, wc, wb);
  Tensor fd = finite_diff_grad(
      [&](const Tensor& probe) {
        std::map<int, Tensor> N2 = {{3, probe}};
        HeadOutput out = head.forward(N2);
        double s = 0.0;
        for (std::size_t i = 0; i < out.cls.at(3).numel(); ++i)
          s += wc.at(3).data[i] * out.cls.at(3).data[i];
        for (std::size_t i = 0; i < out.box.at(3).numel(); ++i)
          s += wb.at(3).data[i] * out.box.at(3).data[i];
        return s;
      },
      N.at(3), 1e-5);
  EXPECT_LT(max_rel_err(d_N.at(3), fd), 1e-4);
  std::vector<ParamRef> refs;
  head.collect(refs);
  for (ParamRef& r : refs) {
    auto fd_p = finite_diff_grad_span(scalar, r.value, r.n, 1e-5);
    EXPECT_LT(max_rel_err(std::vector<double>(r.grad, r.grad + r.n), fd_p), 1e-4)
        << r.name;
  }
}

TEST(AssignTargets, CenterBoxLandsOnLevel4Cell88) {
  // 256x256 image, box spanning 1/8 of the image at the centre.
  BBox b{0.5, 0.5, 0.125, 0.125, 2};
  EXPECT_EQ(assign_level(b, 256, 256, {3, 4, 5}), 4);
  Targets t = assign_targets({{b}}, {3, 4, 5}, 256, 256, 6);
  EXPECT_DOUBLE_EQ(t.at(4).pos.at(0, 0, 8, 8), 1.0);
  EXPECT_DOUBLE_EQ(t.at(4).cls.at(0, 2, 8, 8), 1.0);
  double pos_total = 0.0;
  for (int lvl : {3, 4, 5}) {
    for (double v : t.at(lvl).pos.data) pos_total += v;
  }
  EXPECT_DOUBLE_EQ(pos_total, 1.0);
}

TEST(AssignTargets, EmptyGtGivesAllBackground) {
  Targets t = assign_targets({{}}, {3, 4, 5}, 64, 64, 6);
  for (const auto& [lvl, lt] : t) {
    for (double v : lt.pos.data) EXPECT_EQ(v, 0.0);
    for (double v : lt.cls.data) EXPECT_EQ(v, 0.0);
  }
}

TEST(AssignTargets, CollidingBoxesKeepLargerArea) {
  BBox small{0.5, 0.5, 0.10, 0.10, 1};
  BBox big{0.5, 0.5, 0.12, 0.12, 3};
  // Same centre, same level (sides 25.6 and 30.7 px on 256 round to level 4).
  for (const auto& order : {std::vector<BBox>{small, big}, std::vector<BBox>{big, small}}) {
    Targets t = assign_targets({order}, {3, 4, 5}, 256, 256, 6);
    EXPECT_DOUBLE_EQ(t.at(4).cls.at(0, 3, 8, 8), 1.0);
    EXPECT_DOUBLE_EQ(t.at(4).cls.at(0, 1, 8, 8), 0.0);
  }
}

TEST(Loss, AllZeroLogitsNoGtIsLogHalf) {
  HeadConfig cfg;
  cfg.num_classes = 6;
  Targets t = assign_targets({{}}, {3, 4, 5}, 64, 64, 6);
  HeadOutput pred;
  for (int lvl : {3, 4, 5}) {
    pred.cls[lvl] = t.at(lvl).cls.zeros_like();
    pred.box[lvl] = t.at(lvl).box.zeros_like();
  }
  LossParts parts = compute_loss(pred, t);
  EXPECT_NEAR(parts.cls, std::log(2.0), 1e-12);  // -log(0.5)
  EXPECT_DOUBLE_EQ(parts.box, 0.0);
  EXPECT_NEAR(parts.total, std::log(2.0), 1e-12);
}

TEST(Loss, PerfectPredictionLimit) {
  BBox b{0.5, 0.5, 0.25, 0.25, 1};
  Targets t = assign_targets({{b}}, {3, 4, 5}, 64, 64, 6);
  HeadOutput pred;
  for (int lvl : {3, 4, 5}) {
    Tensor cls = t.at(lvl).cls;
    for (double& v : cls.data) v = v > 0.5 ? 60.0 : -60.0;  // saturated logits
    pred.cls[lvl] = cls;
    pred.box[lvl] = t.at(lvl).box;  // exact regression
  }
  LossParts parts = compute_loss(pred, t);
  EXPECT_DOUBLE_EQ(parts.box, 0.0);
  EXPECT_LT(parts.cls, 1e-20);
}

TEST(Loss, GradientsMatchFiniteDifferencesOnOneGtToy) {
  Rng rng(17);
  BBox b{0.45, 0.6, 0.3, 0.2, 1};
  Targets t = assign_targets({{b}}, {3}, 32, 32, 3);
  HeadOutput pred;
  pred.cls[3] = random_tensor({1, 3, 4, 4}, rng);
  pred.box[3] = random_tensor({1, 4, 4, 4}, rng);
  std::map<int, Tensor> d_cls, d_box;
  compute_loss_grads(pred, t, d_cls, d_box);
  Tensor fd_cls = finite_diff_grad(
      [&](const Tensor& probe) {
        HeadOutput p2 = pred;
        p2.cls[3] = probe;
        return compute_loss(p2, t).total;
      },
      pred.cls.at(3), 1e-6);
  EXPECT_LT(max_rel_err(d_cls.at(3), fd_cls), 1e-4);
  Tensor fd_box = finite_diff_grad(
      [&](const Tensor& probe) {
        HeadOutput p2 = pred;
        p2.box[3] = probe;
        return compute_loss(p2, t).total;
      },
      pred.box.at(3), 1e-6);
  EXPECT_LT(max_rel_err(d_box.at(3), fd_box), 1e-4);
}

TEST(EncodeDecode, RoundTripIsIdentity) {
  Rng rng(23);
  for (int i = 0; i < 200; ++i) {
    BBox b;
    b.cx = rng.uniform(0.02, 0.98);
    b.cy = rng.uniform(0.02, 0.98);
    b.w = rng.uniform(0.02, 0.9);
    b.h = rng.uniform(0.02, 0.9);
    b.class_id = rng.uniform_int(0, 5);
    const int gh = 1 << rng.uniform_int(2, 4), gw = 1 << rng.uniform_int(2, 4);
    int row, col;
    double enc[4];
    encode_box(b, gh, gw, row, col, enc);
    BBox back = decode_box(row, col, enc, gh, gw, b.class_id);
    EXPECT_NEAR(back.cx, b.cx, 1e-9);
    EXPECT_NEAR(back.cy, b.cy, 1e-9);
    EXPECT_NEAR(back.w, b.w, 1e-9);
    EXPECT_NEAR(back.h, b.h, 1e-9);
  }
}

TEST(Decode, EmptyBelowThreshold) {
  HeadOutput pred;
  pred.cls[3] = Tensor{{1, 2, 4, 4}};  // zero logits, score 0.5 everywhere
  pred.box[3] = Tensor{{1, 4, 4, 4}};
  DecodeParams dp;
  dp.score_thresh = 0.9;
  EXPECT_TRUE(decode(pred, 0, dp).empty());
}

TEST(Decode, HotCellRoundTripsEncodedGt) {
  BBox gt{0.52, 0.47, 0.3, 0.22, 1};
  const int gh = 8, gw = 8;
  int row, col;
  double enc[4];
  encode_box(gt, gh, gw, row, col, enc);
  HeadOutput pred;
  pred.cls[3] = Tensor{{1, 3, gh, gw}};
  for (double& v : pred.cls[3].data) v = -40.0;
  pred.cls[3].at(0, 1, row, col) = 40.0;
  pred.box[3] = Tensor{{1, 4, gh, gw}};
  for (int k = 0; k < 4; ++k) pred.box[3].at(0, k, row, col) = enc[k];
  DecodeParams dp;
  dp.score_thresh = 0.5;
  std::vector<Detection> dets = decode(pred, 0, dp);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].bbox.class_id, 1);
  EXPECT_NEAR(dets[0].bbox.cx, gt.cx, 1e-9);
  EXPECT_NEAR(dets[0].bbox.cy, gt.cy, 1e-9);
  EXPECT_NEAR(dets[0].bbox.w, gt.w, 1e-9);
  EXPECT_NEAR(dets[0].bbox.h, gt.h, 1e-9);
}

TEST(Decode, NmsSuppressesOverlapSameClassOnly) {
  HeadOutput pred;
  const int gh = 4, gw = 4;
  pred.cls[3] = Tensor{{1, 2, gh, gw}};
  for (double& v : pred.cls[3].data) v = -40.0;
  pred.box[3] = Tensor{{1, 4, gh, gw}};
  // Two same-class candidates in adjacent cells decoding to overlapping
  // boxes (IoU ~0.9), plus one other-class candidate on the same spot.
  auto put = [&](int cls, int row, int col, double cls_logit, double w, double h,
                 double fx) {
    pred.cls[3].at(0, cls, row, col) = cls_logit;
    pred.box[3].at(0, 0, row, col) = logit(fx);
    pred.box[3].at(0, 1, row, col) = 0.0;  // centre of cell in y
    pred.box[3].at(0, 2, row, col) = std::log(w);
    pred.box[3].at(0, 3, row, col) = std::log(h);
  };
  put(0, 1, 1, 4.0, 0.5, 0.5, 0.9);   // score ~0.982
  put(0, 1, 2, 2.0, 0.5, 0.52, 0.1);  // overlapping, lower score
  put(1, 1, 2, 1.0, 0.5, 0.52, 0.1);  // different class, survives
  DecodeParams dp;
  dp.score_thresh = 0.6;
  dp.iou_thresh = 0.5;
  std::vector<Detection> dets = decode(pred, 0, dp);
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[0].bbox.class_id, 0);
  EXPECT_EQ(dets[1].bbox.class_id, 1);
  EXPECT_GE(dets[0].score, dets[1].score);
  // Kept same-class pairs stay under the NMS threshold.
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (dets[i].bbox.class_id == dets[j].bbox.class_id) {
        EXPECT_LT(iou(dets[i].bbox, dets[j].bbox), dp.iou_thresh);
      }
    }
  }
}

TEST(Decode, DeterministicTieBreakOrder) {
  HeadOutput pred;
  pred.cls[3] = Tensor{{1, 2, 2, 2}};
  pred.box[3] = Tensor{{1, 4, 2, 2}};
  // Small disjoint boxes so nothing is suppressed.
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      pred.box[3].at(0, 2, y, x) = std::log(0.05);
      pred.box[3].at(0, 3, y, x) = std::log(0.05);
    }
  DecodeParams dp;
  dp.score_thresh = 0.4;  // all logits 0 -> score 0.5, all tie
  std::vector<Detection> dets = decode(pred, 0, dp);
  ASSERT_EQ(dets.size(), 8u);
  // (level,row,col,class) lexicographic under equal scores.
  int idx = 0;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      for (int c = 0; c < 2; ++c) {
        EXPECT_EQ(dets[idx].bbox.class_id, c);
        ++idx;
      }
}
