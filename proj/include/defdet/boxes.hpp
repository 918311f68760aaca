#pragma once

#include <algorithm>
#include <cmath>

namespace defdet {

/// Axis-aligned box in normalized image coordinates, centre + size.
struct BBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
  int class_id = 0;

  bool valid() const {
    return cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0 && w > 0.0 && w <= 1.0 &&
           h > 0.0 && h <= 1.0;
  }
};

struct Detection {
  BBox bbox;
  double score = 0.0;
};

/// Intersection over union; 0 for degenerate unions.
inline double iou(const BBox& a, const BBox& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
  const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
  const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

}  // namespace defdet
