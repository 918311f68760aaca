#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "defdet/tensor.hpp"

namespace defdet {

/// Weights are (outC, inC, kH, kW); kernel sides must be odd so that
/// padding = k/2 keeps "same" spatial alignment at stride 1.
struct ConvParams {
  Tensor weights;
  std::vector<double> bias;
  int stride = 1;
  int padding = 0;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  int kh() const { return static_cast<int>(weights.dim(2)); }
  int kw() const { return static_cast<int>(weights.dim(3)); }

  void validate(const char* op) const {
    if (weights.rank() != 4) {
      throw ShapeError(std::string(op) + ": weights must be 4-d, got " +
                       weights.shape_str());
    }
    if (kh() % 2 == 0 || kw() % 2 == 0) {
      throw ShapeError(std::string(op) + ": kernel sides must be odd, got " +
                       std::to_string(kh()) + "x" + std::to_string(kw()));
    }
    if (bias.size() != out_channels()) {
      throw ShapeError(std::string(op) + ": bias size " +
                       std::to_string(bias.size()) + " != outC " +
                       std::to_string(out_channels()));
    }
    if (stride < 1 || padding < 0) {
      throw ShapeError(std::string(op) + ": invalid stride/padding");
    }
  }
};

struct GradBundle {
  Tensor d_input;
  Tensor d_weights;
  std::vector<double> d_bias;
  Tensor d_offsets;  // only filled by the deformable operator
};

namespace detail {
inline int div_floor(int a, int b) {  // b > 0
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline int div_ceil(int a, int b) {  // b > 0
  return a > 0 ? (a + b - 1) / b : -(-a / b);
}
// Output index range [lo, hi) with 0 <= out*stride + k0 < limit.
inline void tap_range(int k0, int stride, int limit, int out_n, int& lo, int& hi) {
  lo = std::max(0, div_ceil(-k0, stride));
  hi = std::min(out_n, div_floor(limit - 1 - k0, stride) + 1);
  if (hi < lo) hi = lo;
}
}  // namespace detail

inline void check_conv_input(const char* op, const Tensor& input,
                             const ConvParams& p) {
  p.validate(op);
  if (input.rank() != 4) {
    throw ShapeError(std::string(op) + ": input must be 4-d, got " +
                     input.shape_str());
  }
  if (input.dim(1) != p.in_channels()) {
    throw ShapeError(std::string(op) + ": input channels " +
                     std::to_string(input.dim(1)) + " != kernel inC " +
                     std::to_string(p.in_channels()));
  }
  int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));
  if ((h + 2 * p.padding - p.kh()) / p.stride + 1 < 1 ||
      (w + 2 * p.padding - p.kw()) / p.stride + 1 < 1) {
    throw ShapeError(std::string(op) + ": kernel larger than padded input " +
                     input.shape_str());
  }
}

inline std::vector<std::size_t> conv_out_shape(const Tensor& input,
                                               const ConvParams& p) {
  int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));
  int oh = (h + 2 * p.padding - p.kh()) / p.stride + 1;
  int ow = (w + 2 * p.padding - p.kw()) / p.stride + 1;
  return {input.dim(0), p.out_channels(), static_cast<std::size_t>(oh),
          static_cast<std::size_t>(ow)};
}

/// Plain cross-correlation with zero padding, plus per-channel bias.
inline Tensor conv2d(const Tensor& input, const ConvParams& p) {
  check_conv_input("conv2d", input, p);
  Tensor out{conv_out_shape(input, p)};
  const int B = static_cast<int>(input.dim(0)), C = static_cast<int>(input.dim(1));
  const int H = static_cast<int>(input.dim(2)), W = static_cast<int>(input.dim(3));
  const int OC = static_cast<int>(out.dim(1));
  const int OH = static_cast<int>(out.dim(2)), OW = static_cast<int>(out.dim(3));
  const int s = p.stride, pad = p.padding, kh = p.kh(), kw = p.kw();

  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < OC; ++oc) {
      double* op_ = out.plane(b, oc);
      std::fill(op_, op_ + OH * OW, p.bias[oc]);
      for (int ic = 0; ic < C; ++ic) {
        const double* ip = input.plane(b, ic);
        const double* wrow = &p.weights.at(oc, ic, 0, 0);
        for (int ky = 0; ky < kh; ++ky) {
          int oy_lo, oy_hi;
          detail::tap_range(ky - pad, s, H, OH, oy_lo, oy_hi);
          for (int kx = 0; kx < kw; ++kx) {
            const double wv = wrow[ky * kw + kx];
            if (wv == 0.0) continue;
            int ox_lo, ox_hi;
            detail::tap_range(kx - pad, s, W, OW, ox_lo, ox_hi);
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const double* irow = ip + (oy * s + ky - pad) * W + (kx - pad);
              double* orow = op_ + oy * OW;
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                orow[ox] += wv * irow[ox * s];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Analytic gradients of conv2d w.r.t. input, weights and bias.
inline GradBundle conv2d_backward(const Tensor& input, const ConvParams& p,
                                  const Tensor& upstream) {
  check_conv_input("conv2d_backward", input, p);
  auto os = conv_out_shape(input, p);
  if (upstream.shape != os) {
    throw ShapeError("conv2d_backward: upstream " + upstream.shape_str() +
                     " != output shape " + Tensor(os).shape_str());
  }
  GradBundle g;
  g.d_input = input.zeros_like();
  g.d_weights = p.weights.zeros_like();
  g.d_bias.assign(p.bias.size(), 0.0);

  const int B = static_cast<int>(input.dim(0)), C = static_cast<int>(input.dim(1));
  const int H = static_cast<int>(input.dim(2)), W = static_cast<int>(input.dim(3));
  const int OC = static_cast<int>(upstream.dim(1));
  const int OH = static_cast<int>(upstream.dim(2)), OW = static_cast<int>(upstream.dim(3));
  const int s = p.stride, pad = p.padding, kh = p.kh(), kw = p.kw();

  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < OC; ++oc) {
      const double* up = upstream.plane(b, oc);
      double acc = 0.0;
      for (int i = 0; i < OH * OW; ++i) acc += up[i];
      g.d_bias[oc] += acc;
      for (int ic = 0; ic < C; ++ic) {
        const double* ip = input.plane(b, ic);
        double* dip = g.d_input.plane(b, ic);
        const double* wrow = &p.weights.at(oc, ic, 0, 0);
        double* dwrow = &g.d_weights.at(oc, ic, 0, 0);
        for (int ky = 0; ky < kh; ++ky) {
          int oy_lo, oy_hi;
          detail::tap_range(ky - pad, s, H, OH, oy_lo, oy_hi);
          for (int kx = 0; kx < kw; ++kx) {
            int ox_lo, ox_hi;
            detail::tap_range(kx - pad, s, W, OW, ox_lo, ox_hi);
            const double wv = wrow[ky * kw + kx];
            double dw = 0.0;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const double* irow = ip + (oy * s + ky - pad) * W + (kx - pad);
              double* dirow = dip + (oy * s + ky - pad) * W + (kx - pad);
              const double* urow = up + oy * OW;
              for (int ox = ox_lo; ox < ox_hi; ++ox) {
                dw += urow[ox] * irow[ox * s];
                dirow[ox * s] += wv * urow[ox];
              }
            }
            dwrow[ky * kw + kx] += dw;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear sampling with zero padding beyond the borders; neighbours that
// fall outside [0,H-1]x[0,W-1] contribute 0.
// ---------------------------------------------------------------------------

inline double bilinear_sample(const double* m, int h, int w, double y, double x) {
  // Negated form so non-finite coordinates also land in the zero branch.
  if (!(y > -1.0 && y < h && x > -1.0 && x < w)) return 0.0;
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double ly = y - y0, lx = x - x0;
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  double acc = 0.0;
  if (y0 >= 0) {
    if (x0 >= 0) acc += hy * hx * m[y0 * w + x0];
    if (x0 + 1 <= w - 1) acc += hy * lx * m[y0 * w + x0 + 1];
  }
  if (y0 + 1 <= h - 1) {
    if (x0 >= 0) acc += ly * hx * m[(y0 + 1) * w + x0];
    if (x0 + 1 <= w - 1) acc += ly * lx * m[(y0 + 1) * w + x0 + 1];
  }
  return acc;
}

inline double bilinear_sample(const Tensor& map, double y, double x) {
  if (map.rank() != 2) {
    throw ShapeError("bilinear_sample: map must be 2-d, got " + map.shape_str());
  }
  return bilinear_sample(map.data.data(), static_cast<int>(map.dim(0)),
                         static_cast<int>(map.dim(1)), y, x);
}

/// Scatters upstream * (corner weight) into d_map and adds the analytic
/// coordinate partials into d_y / d_x.
inline void bilinear_sample_grads(const double* m, int h, int w, double y,
                                  double x, double upstream, double* d_map,
                                  double& d_y, double& d_x) {
  if (!(y > -1.0 && y < h && x > -1.0 && x < w)) return;
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double ly = y - y0, lx = x - x0;
  const double hy = 1.0 - ly, hx = 1.0 - lx;

  double v00 = 0.0, v01 = 0.0, v10 = 0.0, v11 = 0.0;
  const bool r0 = y0 >= 0, r1 = y0 + 1 <= h - 1;
  const bool c0 = x0 >= 0, c1 = x0 + 1 <= w - 1;
  if (r0 && c0) v00 = m[y0 * w + x0];
  if (r0 && c1) v01 = m[y0 * w + x0 + 1];
  if (r1 && c0) v10 = m[(y0 + 1) * w + x0];
  if (r1 && c1) v11 = m[(y0 + 1) * w + x0 + 1];

  if (d_map) {
    if (r0 && c0) d_map[y0 * w + x0] += upstream * hy * hx;
    if (r0 && c1) d_map[y0 * w + x0 + 1] += upstream * hy * lx;
    if (r1 && c0) d_map[(y0 + 1) * w + x0] += upstream * ly * hx;
    if (r1 && c1) d_map[(y0 + 1) * w + x0 + 1] += upstream * ly * lx;
  }
  d_y += upstream * (hx * (v10 - v00) + lx * (v11 - v01));
  d_x += upstream * (hy * (v01 - v00) + ly * (v11 - v10));
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

inline Tensor upsample_nearest2x(const Tensor& input) {
  if (input.rank() != 4) {
    throw ShapeError("upsample_nearest2x: input must be 4-d, got " + input.shape_str());
  }
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  Tensor out{{B, C, H * 2, W * 2}};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* ip = input.plane(b, c);
      double* op = out.plane(b, c);
      for (std::size_t y = 0; y < 2 * H; ++y) {
        const double* irow = ip + (y / 2) * W;
        double* orow = op + y * 2 * W;
        for (std::size_t x = 0; x < 2 * W; ++x) orow[x] = irow[x / 2];
      }
    }
  }
  return out;
}

/// Backward of nearest 2x upsampling: each 2x2 block of upstream sums into
/// one source cell.
inline Tensor upsample_nearest2x_backward(const Tensor& upstream) {
  if (upstream.rank() != 4 || upstream.dim(2) % 2 || upstream.dim(3) % 2) {
    throw ShapeError("upsample_nearest2x_backward: bad upstream " + upstream.shape_str());
  }
  const std::size_t B = upstream.dim(0), C = upstream.dim(1);
  const std::size_t H = upstream.dim(2) / 2, W = upstream.dim(3) / 2;
  Tensor out{{B, C, H, W}};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* up = upstream.plane(b, c);
      double* op = out.plane(b, c);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          op[y * W + x] = up[(2 * y) * 2 * W + 2 * x] + up[(2 * y) * 2 * W + 2 * x + 1] +
                          up[(2 * y + 1) * 2 * W + 2 * x] +
                          up[(2 * y + 1) * 2 * W + 2 * x + 1];
        }
      }
    }
  }
  return out;
}

/// 2x2 max pooling, stride 2. Requires even spatial dims. Ties go to the
/// first element in row-major order.
inline Tensor downsample_maxpool2x(const Tensor& input) {
  if (input.rank() != 4) {
    throw ShapeError("downsample_maxpool2x: input must be 4-d, got " + input.shape_str());
  }
  if (input.dim(2) % 2 || input.dim(3) % 2) {
    throw ShapeError("downsample_maxpool2x: odd spatial dims " + input.shape_str());
  }
  const std::size_t B = input.dim(0), C = input.dim(1);
  const std::size_t H = input.dim(2) / 2, W = input.dim(3) / 2;
  Tensor out{{B, C, H, W}};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* ip = input.plane(b, c);
      double* op = out.plane(b, c);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double* blk = ip + (2 * y) * 2 * W + 2 * x;
          double m = blk[0];
          if (blk[1] > m) m = blk[1];
          if (blk[2 * W] > m) m = blk[2 * W];
          if (blk[2 * W + 1] > m) m = blk[2 * W + 1];
          op[y * W + x] = m;
        }
      }
    }
  }
  return out;
}

/// Routes upstream to the argmax position of each 2x2 block (first in
/// row-major order on ties).
inline Tensor downsample_maxpool2x_backward(const Tensor& input, const Tensor& upstream) {
  const std::size_t B = input.dim(0), C = input.dim(1);
  const std::size_t H = input.dim(2) / 2, W = input.dim(3) / 2;
  if (upstream.shape != std::vector<std::size_t>{B, C, H, W}) {
    throw ShapeError("downsample_maxpool2x_backward: upstream " + upstream.shape_str() +
                     " does not match pooled " + input.shape_str());
  }
  Tensor out = input.zeros_like();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* ip = input.plane(b, c);
      const double* up = upstream.plane(b, c);
      double* op = out.plane(b, c);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t base = (2 * y) * 2 * W + 2 * x;
          const std::size_t idx[4] = {base, base + 1, base + 2 * W, base + 2 * W + 1};
          std::size_t best = idx[0];
          for (int i = 1; i < 4; ++i) {
            if (ip[idx[i]] > ip[best]) best = idx[i];
          }
          op[best] += up[y * W + x];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise add, channel concatenation / slicing, leaky activation
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  const Tensor& first = *parts[0];
  std::size_t totc = 0;
  for (const Tensor* t : parts) {
    if (t->rank() != 4 || t->dim(0) != first.dim(0) || t->dim(2) != first.dim(2) ||
        t->dim(3) != first.dim(3)) {
      throw ShapeError("concat_channels: incompatible part " + t->shape_str() +
                       " vs " + first.shape_str());
    }
    totc += t->dim(1);
  }
  const std::size_t B = first.dim(0), H = first.dim(2), W = first.dim(3);
  Tensor out{{B, totc, H, W}};
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t c_off = 0;
    for (const Tensor* t : parts) {
      for (std::size_t c = 0; c < t->dim(1); ++c) {
        std::copy(t->plane(b, c), t->plane(b, c) + H * W, out.plane(b, c_off + c));
      }
      c_off += t->dim(1);
    }
  }
  return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  for (const Tensor& t : parts) ptrs.push_back(&t);
  return concat_channels(ptrs);
}

/// Channels [c0, c1) of t; the inverse of concat_channels.
inline Tensor slice_channels(const Tensor& t, std::size_t c0, std::size_t c1) {
  if (t.rank() != 4 || c0 >= c1 || c1 > t.dim(1)) {
    throw ShapeError("slice_channels: bad range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + t.shape_str());
  }
  const std::size_t B = t.dim(0), H = t.dim(2), W = t.dim(3);
  Tensor out{{B, c1 - c0, H, W}};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = c0; c < c1; ++c) {
      std::copy(t.plane(b, c), t.plane(b, c) + H * W, out.plane(b, c - c0));
    }
  }
  return out;
}

inline Tensor leaky(const Tensor& t, double slope = 0.1) {
  Tensor out = t;
  for (double& v : out.data) {
    if (v < 0.0) v *= slope;
  }
  return out;
}

inline Tensor leaky_backward(const Tensor& pre, const Tensor& upstream,
                             double slope = 0.1) {
  check_same_shape("leaky_backward", pre, upstream);
  Tensor out = upstream;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (pre.data[i] < 0.0) out.data[i] *= slope;
  }
  return out;
}

}  // namespace defdet
