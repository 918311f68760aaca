#include <gtest/gtest.h>

#include <cmath>

#include "defdet/eval.hpp"
#include "defdet/rng.hpp"
#include "oracles.hpp"

using namespace defdet;

namespace {

BBox box(double cx, double cy, double w, double h, int cls = 0) {
  return {cx, cy, w, h, cls};
}

Detection det(double cx, double cy, double w, double h, double score, int cls = 0) {
  return {{cx, cy, w, h, cls}, score};
}

// Shared fixture: 5 images, 30 detections, 2 classes.
struct Fixture {
  std::map<int, std::vector<Detection>> dets;
  std::map<int, std::vector<BBox>> gts;
};

Fixture random_fixture(std::uint64_t seed) {
  Rng rng(seed);
  Fixture f;
  for (int img = 0; img < 5; ++img) {
    const int n_gt = rng.uniform_int(1, 3);
    for (int g = 0; g < n_gt; ++g) {
      f.gts[img].push_back(box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                               rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3),
                               rng.uniform_int(0, 1)));
    }
    for (int d = 0; d < 6; ++d) {
      // Half the detections hug a gt box, the rest are random.
      if (d % 2 == 0 && !f.gts[img].empty()) {
        const BBox& g = f.gts[img][d % f.gts[img].size()];
        f.dets[img].push_back(det(g.cx + rng.uniform(-0.03, 0.03),
                                  g.cy + rng.uniform(-0.03, 0.03),
                                  g.w * rng.uniform(0.85, 1.15),
                                  g.h * rng.uniform(0.85, 1.15), rng.uniform(0.3, 1.0),
                                  g.class_id));
      } else {
        f.dets[img].push_back(det(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                  rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3),
                                  rng.uniform(0.0, 1.0), rng.uniform_int(0, 1)));
      }
    }
  }
  return f;
}

double oracle_ap(const std::vector<DetRecord>& ranked, const std::vector<GtRecord>& gts,
                 double thresh) {
  std::vector<oracle::RankedDet> rd;
  for (const DetRecord& r : ranked) {
    rd.push_back({r.image_id, r.det.score, r.det.bbox.cx, r.det.bbox.cy, r.det.bbox.w,
                  r.det.bbox.h});
  }
  std::vector<oracle::GtBox> gb;
  for (const GtRecord& g : gts) {
    gb.push_back({g.image_id, g.box.cx, g.box.cy, g.box.w, g.box.h});
  }
  return oracle::average_precision_naive(rd, gb, thresh);
}

}  // namespace

TEST(Iou, IdenticalDisjointAndHalfOffset) {
  BBox a = box(0.5, 0.5, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(box(0.2, 0.2, 0.1, 0.1), box(0.8, 0.8, 0.1, 0.1)), 0.0);
  // Unit boxes offset by half their width: intersection 0.5, union 1.5.
  EXPECT_NEAR(iou(box(0.5, 0.5, 1.0, 1.0), box(1.0, 0.5, 1.0, 1.0)), 1.0 / 3.0, 1e-12);
}

TEST(AveragePrecision, SinglePerfectDetection) {
  std::vector<DetRecord> dets = {{0, det(0.5, 0.5, 0.2, 0.2, 0.9)}};
  std::vector<GtRecord> gts = {{0, box(0.5, 0.5, 0.2, 0.2)}};
  EXPECT_DOUBLE_EQ(average_precision(dets, gts, 0.5), 1.0);
}

TEST(AveragePrecision, FalseThenTrueGivesHalf) {
  // First-ranked detection misses, second hits the only gt:
  // PR points (0,0) then (1, 0.5); envelope AP = 0.5.
  std::vector<DetRecord> dets = {{0, det(0.1, 0.1, 0.05, 0.05, 0.9)},
                                 {0, det(0.5, 0.5, 0.2, 0.2, 0.8)}};
  std::vector<GtRecord> gts = {{0, box(0.5, 0.5, 0.2, 0.2)}};
  EXPECT_DOUBLE_EQ(average_precision(dets, gts, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(oracle_ap(dets, gts, 0.5), 0.5);
}

TEST(AveragePrecision, MatchesBruteForceOnRandomCases) {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(seed * 77);
    std::vector<DetRecord> dets;
    std::vector<GtRecord> gts;
    for (int g = 0; g < 3; ++g) {
      gts.push_back({g % 2, box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4))});
    }
    for (int d = 0; d < 10; ++d) {
      dets.push_back({d % 2, det(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                                 rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4),
                                 rng.uniform(0.0, 1.0))});
    }
    sort_by_score(dets);
    for (double thresh : {0.3, 0.5, 0.75}) {
      EXPECT_NEAR(average_precision(dets, gts, thresh), oracle_ap(dets, gts, thresh),
                  1e-12)
          << "seed " << seed << " thresh " << thresh;
    }
  }
}

TEST(Evaluate, PerfectDetectorScoresOne) {
  Fixture f = random_fixture(3);
  std::map<int, std::vector<Detection>> perfect;
  for (const auto& [img, gts] : f.gts) {
    for (const BBox& g : gts) perfect[img].push_back({g, 0.95});
  }
  EvalReport rep = evaluate(perfect, f.gts, 6);
  EXPECT_DOUBLE_EQ(rep.map50, 1.0);
  EXPECT_DOUBLE_EQ(rep.map5095, 1.0);
}

TEST(Evaluate, EmptyDetectionsScoreZero) {
  Fixture f = random_fixture(4);
  EvalReport rep = evaluate({}, f.gts, 6);
  EXPECT_DOUBLE_EQ(rep.map50, 0.0);
  EXPECT_DOUBLE_EQ(rep.map5095, 0.0);
}

TEST(Evaluate, FixtureMatchesOracleEverywhere) {
  Fixture f = random_fixture(9);
  EvalReport rep = evaluate(f.dets, f.gts, 6);
  for (int cls : rep.classes_evaluated) {
    std::vector<DetRecord> ranked;
    std::vector<GtRecord> gts;
    for (const auto& [img, dets] : f.dets) {
      for (const Detection& d : dets) {
        if (d.bbox.class_id == cls) ranked.push_back({img, d});
      }
    }
    for (const auto& [img, boxes] : f.gts) {
      for (const BBox& b : boxes) {
        if (b.class_id == cls) gts.push_back({img, b});
      }
    }
    sort_by_score(ranked);
    for (std::size_t ti = 0; ti < rep.thresholds.size(); ++ti) {
      EXPECT_NEAR(rep.per_class_ap.at(cls)[ti],
                  oracle_ap(ranked, gts, rep.thresholds[ti]), 1e-12)
          << "class " << cls << " t " << rep.thresholds[ti];
    }
  }
  // Classes 2..5 have no gt and stay out of the means.
  EXPECT_EQ(rep.classes_evaluated.size(), 2u);
  EXPECT_EQ(rep.classes_excluded.size(), 4u);
}

TEST(Evaluate, UnknownClassRejected) {
  std::map<int, std::vector<BBox>> gts = {{0, {box(0.5, 0.5, 0.2, 0.2, 7)}}};
  EXPECT_THROW(evaluate({}, gts, 6), ConfigError);
}

TEST(Evaluate, ScoreMonotoneTransformInvariance) {
  Fixture f = random_fixture(11);
  EvalReport a = evaluate(f.dets, f.gts, 6);
  std::map<int, std::vector<Detection>> squashed = f.dets;
  for (auto& [img, dets] : squashed) {
    for (Detection& d : dets) d.score = 1.0 / (1.0 + std::exp(-4.0 * d.score));
  }
  EvalReport b = evaluate(squashed, f.gts, 6);
  EXPECT_DOUBLE_EQ(a.map50, b.map50);
  EXPECT_DOUBLE_EQ(a.map5095, b.map5095);
}

TEST(Evaluate, TrailingFalsePositiveNeverIncreasesAp) {
  for (std::uint64_t seed = 21; seed <= 25; ++seed) {
    Fixture f = random_fixture(seed);
    EvalReport base = evaluate(f.dets, f.gts, 6);
    std::map<int, std::vector<Detection>> more = f.dets;
    // Score below every existing detection, far from any gt.
    more[0].push_back(det(0.02, 0.02, 0.01, 0.01, -1.0, 0));
    EvalReport worse = evaluate(more, f.gts, 6);
    EXPECT_LE(worse.map50, base.map50 + 1e-12);
  }
}

TEST(Evaluate, SweepMeanNeverExceedsMap50) {
  for (std::uint64_t seed = 31; seed <= 40; ++seed) {
    Fixture f = random_fixture(seed);
    EvalReport rep = evaluate(f.dets, f.gts, 6);
    EXPECT_LE(rep.map5095, rep.map50 + 1e-12);
    // Per class, AP is non-increasing in the IoU threshold.
    for (int cls : rep.classes_evaluated) {
      const auto& aps = rep.per_class_ap.at(cls);
      for (std::size_t i = 1; i < aps.size(); ++i) {
        EXPECT_LE(aps[i], aps[i - 1] + 1e-12);
      }
    }
  }
}

TEST(Evaluate, IouMaxFlagShortensSweep) {
  Fixture f = random_fixture(5);
  EvalReport rep = evaluate(f.dets, f.gts, 6, 0.90);
  EXPECT_EQ(rep.thresholds.size(), 9u);
  EXPECT_DOUBLE_EQ(rep.thresholds.back(), 0.90);
}
