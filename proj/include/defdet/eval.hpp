#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "defdet/boxes.hpp"
#include "defdet/tensor.hpp"

namespace defdet {

struct DetRecord {
  int image_id = 0;
  Detection det;
};

struct GtRecord {
  int image_id = 0;
  BBox box;
};

struct EvalReport {
  std::vector<double> thresholds;                       // 0.50 .. iou_max step 0.05
  std::map<int, std::vector<double>> per_class_ap;      // class -> AP per threshold
  std::vector<int> classes_evaluated;                   // classes present in gt
  std::vector<int> classes_excluded;                    // absent from gt, left out of means
  double map50 = 0.0;
  double map5095 = 0.0;
  // (recall, precision) after each ranked detection, at IoU 0.50
  std::map<int, std::vector<std::pair<double, double>>> pr_curves;
};

/// Greedy matching at one IoU threshold: detections in rank order take the
/// highest-IoU unmatched gt of their image (ties to the lower gt index).
/// Returns per-rank true/false-positive flags.
inline std::vector<bool> greedy_match(const std::vector<DetRecord>& ranked,
                                      const std::vector<GtRecord>& gts,
                                      double iou_thresh) {
  std::vector<bool> tp(ranked.size(), false);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j] || gts[j].image_id != ranked[i].image_id) continue;
      const double v = iou(ranked[i].det.bbox, gts[j].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      used[best] = true;
      tp[i] = true;
    }
  }
  return tp;
}

inline void sort_by_score(std::vector<DetRecord>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const DetRecord& a, const DetRecord& b) {
    if (a.det.score != b.det.score) return a.det.score > b.det.score;
    return a.image_id < b.image_id;
  });
}

/// All-point interpolated AP (precision envelope over the PR curve).
/// dets must already be sorted by descending score. Returns 0 when there
/// are no ground truths.
inline double average_precision(const std::vector<DetRecord>& ranked,
                                const std::vector<GtRecord>& gts, double iou_thresh,
                                std::vector<std::pair<double, double>>* pr_points = nullptr) {
  if (gts.empty()) return 0.0;
  const std::vector<bool> tp = greedy_match(ranked, gts, iou_thresh);
  const std::size_t n = ranked.size();
  std::vector<double> prec(n), rec(n);
  std::size_t tp_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tp[i]) ++tp_count;
    prec[i] = static_cast<double>(tp_count) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp_count) / static_cast<double>(gts.size());
  }
  if (pr_points) {
    pr_points->clear();
    for (std::size_t i = 0; i < n; ++i) pr_points->push_back({rec[i], prec[i]});
  }
  // Suffix max turns precision into its envelope; sum recall increments.
  double ap = 0.0, env = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    env = std::max(env, prec[k]);
    const double prev_r = k == 0 ? 0.0 : rec[k - 1];
    if (rec[k] > prev_r) ap += (rec[k] - prev_r) * env;
  }
  return ap;
}

inline std::vector<double> iou_sweep(double iou_max = 0.95) {
  std::vector<double> t;
  for (int i = 0;; ++i) {
    const double v = 0.50 + 0.05 * i;
    if (v > iou_max + 1e-9) break;
    t.push_back(v);
  }
  return t;
}

/// Full report: per-class AP across the IoU sweep, mAP@50 and the sweep
/// mean. Classes absent from the ground truth are excluded from the means.
inline EvalReport evaluate(const std::map<int, std::vector<Detection>>& dets_per_image,
                           const std::map<int, std::vector<BBox>>& gts_per_image,
                           std::size_t num_classes, double iou_max = 0.95) {
  EvalReport rep;
  rep.thresholds = iou_sweep(iou_max);
  std::map<int, std::vector<DetRecord>> dets_by_class;
  std::map<int, std::vector<GtRecord>> gts_by_class;
  for (const auto& [img, dets] : dets_per_image) {
    for (const Detection& d : dets) {
      if (d.bbox.class_id < 0 || d.bbox.class_id >= static_cast<int>(num_classes)) {
        throw ConfigError("evaluate: unknown class id " +
                          std::to_string(d.bbox.class_id));
      }
      dets_by_class[d.bbox.class_id].push_back({img, d});
    }
  }
  for (const auto& [img, gts] : gts_per_image) {
    for (const BBox& g : gts) {
      if (g.class_id < 0 || g.class_id >= static_cast<int>(num_classes)) {
        throw ConfigError("evaluate: unknown class id " + std::to_string(g.class_id));
      }
      gts_by_class[g.class_id].push_back({img, g});
    }
  }
  double sum50 = 0.0, sum_all = 0.0;
  for (int c = 0; c < static_cast<int>(num_classes); ++c) {
    if (gts_by_class[c].empty()) {
      rep.classes_excluded.push_back(c);
      continue;
    }
    rep.classes_evaluated.push_back(c);
    std::vector<DetRecord>& ranked = dets_by_class[c];
    sort_by_score(ranked);
    std::vector<double>& aps = rep.per_class_ap[c];
    for (std::size_t ti = 0; ti < rep.thresholds.size(); ++ti) {
      std::vector<std::pair<double, double>>* pr =
          ti == 0 ? &rep.pr_curves[c] : nullptr;
      aps.push_back(average_precision(ranked, gts_by_class[c], rep.thresholds[ti], pr));
    }
    sum50 += aps[0];
    for (double a : aps) sum_all += a;
  }
  const std::size_t nc = rep.classes_evaluated.size();
  if (nc > 0) {
    rep.map50 = sum50 / static_cast<double>(nc);
    rep.map5095 = sum_all / static_cast<double>(nc * rep.thresholds.size());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline std::string format_report(const EvalReport& rep,
                                 const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "class            ap50    ap" << std::setprecision(0)
     << rep.thresholds.back() * 100 << std::setprecision(4) << "    ap-mean\n";
  for (int c : rep.classes_evaluated) {
    const auto& aps = rep.per_class_ap.at(c);
    double mean = 0.0;
    for (double a : aps) mean += a;
    mean /= static_cast<double>(aps.size());
    std::string name = c < static_cast<int>(class_names.size())
                           ? class_names[c]
                           : "class" + std::to_string(c);
    name.resize(16, ' ');
    os << name << " " << aps.front() << "  " << aps.back() << "  " << mean << "\n";
  }
  for (int c : rep.classes_excluded) {
    std::string name = c < static_cast<int>(class_names.size())
                           ? class_names[c]
                           : "class" + std::to_string(c);
    name.resize(16, ' ');
    os << name << " (no ground truth; excluded from means)\n";
  }
  os << "mAP@50    " << rep.map50 << "\n";
  os << "mAP@50:" << std::setprecision(0) << rep.thresholds.back() * 100
     << std::setprecision(4) << "  " << rep.map5095 << "\n";
  return os.str();
}

inline void write_pr_csv(const std::string& path, const EvalReport& rep) {
  std::ofstream os(path);
  if (!os) throw IoError("write_pr_csv: cannot open " + path);
  os << "class,recall,precision\n";
  os << std::setprecision(17);
  for (const auto& [c, points] : rep.pr_curves) {
    for (const auto& [r, p] : points) {
      os << c << "," << r << "," << p << "\n";
    }
  }
}

}  // namespace defdet
