#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "defdet/boxes.hpp"
#include "defdet/layers.hpp"
#include "defdet/ops.hpp"
#include "defdet/tensor.hpp"

namespace defdet {

constexpr double kHeadLeakySlope = 0.1;

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

struct HeadConfig {
  std::size_t in_channels = 64;
  std::size_t width = 64;
  std::size_t num_classes = 6;
};

/// Per level: class logits (B, num_classes, h, w) and box regression
/// (B, 4, h, w) with channels (dx, dy, log w, log h). dx/dy place the centre
/// inside the cell after a sigmoid; log w / log h are relative to the image.
struct HeadOutput {
  std::map<int, Tensor> cls;
  std::map<int, Tensor> box;
};

struct HeadCache {
  struct Branch {
    Tensor in;
    Tensor hidden_pre;
    Tensor hidden_act;
  };
  std::map<int, Branch> cls;
  std::map<int, Branch> box;
};

/// Decoupled detection head: separate conv3x3 + leaky + conv1x1 branches
/// for classification and box regression, shared across pyramid levels.
struct Head {
  HeadConfig cfg;
  ConvUnit cls_hidden, cls_out, box_hidden, box_out;

  HeadOutput forward(const std::map<int, Tensor>& N, HeadCache& cache) const {
    HeadOutput out;
    for (const auto& [level, n] : N) {
      auto& cb = cache.cls[level];
      cb.in = n;
      cb.hidden_pre = cls_hidden.forward(n);
      cb.hidden_act = leaky(cb.hidden_pre, kHeadLeakySlope);
      out.cls[level] = cls_out.forward(cb.hidden_act);
      auto& bb = cache.box[level];
      bb.in = n;
      bb.hidden_pre = box_hidden.forward(n);
      bb.hidden_act = leaky(bb.hidden_pre, kHeadLeakySlope);
      out.box[level] = box_out.forward(bb.hidden_act);
    }
    return out;
  }

  HeadOutput forward(const std::map<int, Tensor>& N) const {
    HeadCache cache;
    return forward(N, cache);
  }

  std::map<int, Tensor> backward(const HeadCache& cache,
                                 const std::map<int, Tensor>& d_cls,
                                 const std::map<int, Tensor>& d_box) {
    std::map<int, Tensor> d_N;
    for (const auto& [level, cb] : cache.cls) {
      Tensor d_hidden = cls_out.backward(cb.hidden_act, d_cls.at(level));
      Tensor d_pre = leaky_backward(cb.hidden_pre, d_hidden, kHeadLeakySlope);
      d_N[level] = cls_hidden.backward(cb.in, d_pre);
    }
    for (const auto& [level, bb] : cache.box) {
      Tensor d_hidden = box_out.backward(bb.hidden_act, d_box.at(level));
      Tensor d_pre = leaky_backward(bb.hidden_pre, d_hidden, kHeadLeakySlope);
      d_N[level] = add(d_N[level], box_hidden.backward(bb.in, d_pre));
    }
    return d_N;
  }

  void zero_grad() {
    cls_hidden.zero_grad();
    cls_out.zero_grad();
    box_hidden.zero_grad();
    box_out.zero_grad();
  }

  void collect(std::vector<ParamRef>& out) {
    cls_hidden.collect(out);
    cls_out.collect(out);
    box_hidden.collect(out);
    box_out.collect(out);
  }
};

inline Head build_head(const HeadConfig& cfg, std::uint64_t seed) {
  Head h;
  h.cfg = cfg;
  h.cls_hidden.name = "head.cls.hidden";
  h.cls_hidden.role = "head_cls";
  h.cls_hidden.init(cfg.in_channels, cfg.width, 3, 1, 1, seed);
  // Output layers start near zero: initial scores sit at 0.5 and box
  // errors stay inside the smooth-L1 quadratic region.
  h.cls_out.name = "head.cls.out";
  h.cls_out.role = "head_cls";
  h.cls_out.init(cfg.width, cfg.num_classes, 1, 1, 0, seed, 0.03);
  h.box_hidden.name = "head.box.hidden";
  h.box_hidden.role = "head_box";
  h.box_hidden.init(cfg.in_channels, cfg.width, 3, 1, 1, seed);
  h.box_out.name = "head.box.out";
  h.box_out.role = "head_box";
  h.box_out.init(cfg.width, 4, 1, 1, 0, seed, 0.03);
  return h;
}

// ---------------------------------------------------------------------------
// Target assignment
// ---------------------------------------------------------------------------

/// A box lands on the level whose cells it spans about twice over:
/// round(log2(side_px)) - 1, clamped into the available levels, where
/// side_px = sqrt(w*h*W*H) is the geometric-mean side in pixels.
inline int assign_level(const BBox& b, int img_h, int img_w,
                        const std::vector<int>& levels) {
  const double side = std::sqrt(b.w * b.h * img_w * img_h);
  const int raw = static_cast<int>(std::lround(std::log2(std::max(side, 1.0)))) - 1;
  return std::clamp(raw, levels.front(), levels.back());
}

struct LevelTargets {
  Tensor cls;  // (B, num_classes, h, w) one-hot at assigned cells
  Tensor box;  // (B, 4, h, w) encoded regression targets
  Tensor pos;  // (B, 1, h, w) 1.0 at assigned cells
};

using Targets = std::map<int, LevelTargets>;

/// Encoded regression target for a box at its assigned cell.
inline void encode_box(const BBox& b, int grid_h, int grid_w, int& row, int& col,
                       double enc[4]) {
  col = std::clamp(static_cast<int>(b.cx * grid_w), 0, grid_w - 1);
  row = std::clamp(static_cast<int>(b.cy * grid_h), 0, grid_h - 1);
  const double eps = 1e-12;
  const double fx = std::clamp(b.cx * grid_w - col, eps, 1.0 - eps);
  const double fy = std::clamp(b.cy * grid_h - row, eps, 1.0 - eps);
  enc[0] = logit(fx);
  enc[1] = logit(fy);
  enc[2] = std::log(b.w);
  enc[3] = std::log(b.h);
}

inline BBox decode_box(int row, int col, const double enc[4], int grid_h, int grid_w,
                       int class_id) {
  BBox b;
  b.cx = (col + sigmoid(enc[0])) / grid_w;
  b.cy = (row + sigmoid(enc[1])) / grid_h;
  b.w = std::exp(enc[2]);
  b.h = std::exp(enc[3]);
  b.class_id = class_id;
  return b;
}

/// Single-cell anchor-free assignment: every gt box goes to the cell
/// containing its centre at its assigned level; cell collisions keep the
/// larger-area box.
inline Targets assign_targets(const std::vector<std::vector<BBox>>& gt_per_image,
                              const std::vector<int>& levels, int img_h, int img_w,
                              std::size_t num_classes) {
  const std::size_t batch = gt_per_image.size();
  Targets t;
  for (int level : levels) {
    const int gh = img_h >> level, gw = img_w >> level;
    t[level].cls = Tensor{{batch, num_classes, (std::size_t)gh, (std::size_t)gw}};
    t[level].box = Tensor{{batch, 4, (std::size_t)gh, (std::size_t)gw}};
    t[level].pos = Tensor{{batch, 1, (std::size_t)gh, (std::size_t)gw}};
  }
  // area of the box currently owning each positive cell
  std::map<int, Tensor> owner_area;
  for (int level : levels) owner_area[level] = t[level].pos.zeros_like();

  for (std::size_t b = 0; b < batch; ++b) {
    for (const BBox& gt : gt_per_image[b]) {
      if (!gt.valid() || gt.class_id < 0 ||
          gt.class_id >= static_cast<int>(num_classes)) {
        throw ConfigError("assign_targets: invalid ground-truth box (class " +
                          std::to_string(gt.class_id) + ")");
      }
      const int level = assign_level(gt, img_h, img_w, levels);
      const int gh = img_h >> level, gw = img_w >> level;
      int row, col;
      double enc[4];
      encode_box(gt, gh, gw, row, col, enc);
      // Centres at a cell edge encode to unbounded logits; saturate the
      // training target at |logit| = 7 (within 1e-3 of a cell, sub-pixel
      // at every grid size used here).
      enc[0] = std::clamp(enc[0], -7.0, 7.0);
      enc[1] = std::clamp(enc[1], -7.0, 7.0);
      LevelTargets& lt = t[level];
      const double area = gt.w * gt.h;
      double& owned = owner_area[level].at(b, 0, row, col);
      if (lt.pos.at(b, 0, row, col) != 0.0 && owned >= area) continue;
      // Claim (or re-claim) the cell.
      for (std::size_t c = 0; c < num_classes; ++c) lt.cls.at(b, c, row, col) = 0.0;
      lt.cls.at(b, gt.class_id, row, col) = 1.0;
      for (int k = 0; k < 4; ++k) lt.box.at(b, k, row, col) = enc[k];
      lt.pos.at(b, 0, row, col) = 1.0;
      owned = area;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Loss: binary cross-entropy on every class logit (mean over cells and
// classes), smooth-L1 on box parameters at positive cells (mean over
// positives), combined 1:5. Positive-class terms inside the BCE carry a
// fixed up-weight; with one object in hundreds of cells a plain mean buries
// the positives under the background gradient.
// ---------------------------------------------------------------------------

constexpr double kBoxLossWeight = 5.0;
constexpr double kClsPositiveWeight = 100.0;

struct LossParts {
  double total = 0.0;
  double cls = 0.0;
  double box = 0.0;
};

inline double bce_with_logits(double z, double t) {
  // max(z,0) - z*t + log(1+exp(-|z|)), stable for large |z|
  return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
}

inline double smooth_l1(double d) {
  const double a = std::fabs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

inline double smooth_l1_grad(double d) {
  return d > 1.0 ? 1.0 : (d < -1.0 ? -1.0 : d);
}

/// Normalizer counts; override to keep per-image slices consistent with a
/// whole-batch computation.
struct LossNorms {
  std::size_t n_logits = 0;
  std::size_t n_pos = 0;
};

inline LossNorms count_loss_norms(const Targets& targets) {
  LossNorms n;
  for (const auto& [level, lt] : targets) {
    n.n_logits += lt.cls.numel();
    for (double v : lt.pos.data) {
      if (v != 0.0) ++n.n_pos;
    }
  }
  return n;
}

/// When d_cls / d_box are non-null they receive the loss gradients.
inline LossParts compute_loss_impl(const HeadOutput& pred, const Targets& targets,
                                   std::map<int, Tensor>* d_cls,
                                   std::map<int, Tensor>* d_box,
                                   const LossNorms* norms = nullptr) {
  double cls_sum = 0.0, box_sum = 0.0;
  const LossNorms n = norms ? *norms : count_loss_norms(targets);
  const double cls_norm = 1.0 / static_cast<double>(n.n_logits);
  const double box_norm = 1.0 / static_cast<double>(std::max<std::size_t>(n.n_pos, 1));

  for (const auto& [level, lt] : targets) {
    const Tensor& zc = pred.cls.at(level);
    const Tensor& zb = pred.box.at(level);
    check_same_shape("compute_loss cls", zc, lt.cls);
    check_same_shape("compute_loss box", zb, lt.box);
    Tensor* gc = nullptr;
    Tensor* gb = nullptr;
    if (d_cls) {
      (*d_cls)[level] = zc.zeros_like();
      gc = &(*d_cls)[level];
    }
    if (d_box) {
      (*d_box)[level] = zb.zeros_like();
      gb = &(*d_box)[level];
    }
    for (std::size_t i = 0; i < zc.numel(); ++i) {
      const double w = lt.cls.data[i] != 0.0 ? kClsPositiveWeight : 1.0;
      cls_sum += w * bce_with_logits(zc.data[i], lt.cls.data[i]);
      if (gc) gc->data[i] = w * (sigmoid(zc.data[i]) - lt.cls.data[i]) * cls_norm;
    }
    const std::size_t B = zb.dim(0), gh = zb.dim(2), gw = zb.dim(3);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t y = 0; y < gh; ++y) {
        for (std::size_t x = 0; x < gw; ++x) {
          if (lt.pos.at(b, 0, y, x) == 0.0) continue;
          for (std::size_t k = 0; k < 4; ++k) {
            const double d = zb.at(b, k, y, x) - lt.box.at(b, k, y, x);
            box_sum += smooth_l1(d);
            if (gb) gb->at(b, k, y, x) = smooth_l1_grad(d) * box_norm * kBoxLossWeight;
          }
        }
      }
    }
  }
  LossParts parts;
  parts.cls = cls_sum * cls_norm;
  parts.box = box_sum * box_norm;
  parts.total = parts.cls + kBoxLossWeight * parts.box;
  return parts;
}

inline LossParts compute_loss(const HeadOutput& pred, const Targets& targets) {
  return compute_loss_impl(pred, targets, nullptr, nullptr);
}

inline LossParts compute_loss_grads(const HeadOutput& pred, const Targets& targets,
                                    std::map<int, Tensor>& d_cls,
                                    std::map<int, Tensor>& d_box,
                                    const LossNorms* norms = nullptr) {
  return compute_loss_impl(pred, targets, &d_cls, &d_box, norms);
}

// ---------------------------------------------------------------------------
// Decode + class-wise greedy NMS
// ---------------------------------------------------------------------------

struct DecodeParams {
  double score_thresh = 0.25;
  double iou_thresh = 0.5;
  std::size_t max_dets = 100;
};

/// Candidates above score_thresh, class-wise greedy NMS, descending score,
/// ties broken by (level, row, col, class).
inline std::vector<Detection> decode(const HeadOutput& pred, std::size_t batch_index,
                                     const DecodeParams& dp) {
  struct Candidate {
    Detection det;
    int level, row, col, cls;
  };
  std::vector<Candidate> cands;
  for (const auto& [level, zc] : pred.cls) {
    const Tensor& zb = pred.box.at(level);
    const int gh = static_cast<int>(zc.dim(2)), gw = static_cast<int>(zc.dim(3));
    const int num_classes = static_cast<int>(zc.dim(1));
    for (int y = 0; y < gh; ++y) {
      for (int x = 0; x < gw; ++x) {
        double enc[4];
        for (int k = 0; k < 4; ++k) enc[k] = zb.at(batch_index, k, y, x);
        for (int c = 0; c < num_classes; ++c) {
          const double s = sigmoid(zc.at(batch_index, c, y, x));
          if (s < dp.score_thresh) continue;
          Candidate cand;
          cand.det.score = s;
          cand.det.bbox = decode_box(y, x, enc, gh, gw, c);
          cand.level = level;
          cand.row = y;
          cand.col = x;
          cand.cls = c;
          cands.push_back(cand);
        }
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.det.score != b.det.score) return a.det.score > b.det.score;
    if (a.level != b.level) return a.level < b.level;
    if (a.row != b.row) return a.row < b.row;
    if (a.col != b.col) return a.col < b.col;
    return a.cls < b.cls;
  });
  std::vector<Detection> kept;
  for (const Candidate& c : cands) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.bbox.class_id == c.det.bbox.class_id && iou(k.bbox, c.det.bbox) >= dp.iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(c.det);
      if (kept.size() >= dp.max_dets) break;
    }
  }
  return kept;
}

}  // namespace defdet
