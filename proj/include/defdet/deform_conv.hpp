#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "defdet/ops.hpp"
#include "defdet/rng.hpp"
#include "defdet/tensor.hpp"

namespace defdet {

/// Deformable convolution: the sampling grid of an ordinary convolution is
/// displaced per output position by a learned 2-d offset for every kernel
/// tap, and the input is read at the fractional positions by bilinear
/// interpolation.
///
/// The offset field has shape (B, 2*kH*kW, outH, outW). For tap index n
/// (row-major over the kernel grid), channel 2n holds dy and channel 2n+1
/// holds dx. One offset field is shared by all input and output channels.
struct DeformConvLayer {
  ConvParams main;           // the convolution kernel itself
  ConvParams offset_branch;  // produces the 2*|R| offset channels from the input
  bool clamp_offsets = false;  // optional training-stability clamp at +-(k+1)

  void validate() const {
    main.validate("deform_conv");
    offset_branch.validate("deform_conv offset branch");
    const std::size_t want = 2 * static_cast<std::size_t>(main.kh()) * main.kw();
    if (offset_branch.out_channels() != want) {
      throw ShapeError("deform_conv: offset branch outC " +
                       std::to_string(offset_branch.out_channels()) + " != 2*kH*kW = " +
                       std::to_string(want));
    }
    if (main.in_channels() != offset_branch.in_channels()) {
      throw ShapeError("deform_conv: main/offset inC mismatch");
    }
    if (main.stride != offset_branch.stride || main.padding != offset_branch.padding) {
      throw ShapeError("deform_conv: main/offset stride or padding mismatch");
    }
  }

  double clamp_limit() const { return static_cast<double>(main.kh() + 1); }
};

struct DeformConvResult {
  Tensor output;
  Tensor offsets;  // returned for reuse in the backward pass
};

struct DeformGradBundle {
  Tensor d_input;
  Tensor d_main_weights;
  std::vector<double> d_main_bias;
  Tensor d_offset_weights;
  std::vector<double> d_offset_bias;
  Tensor d_offsets;
};

namespace detail {
inline double clamp_val(double v, double lim) {
  return v < -lim ? -lim : (v > lim ? lim : v);
}
}  // namespace detail

/// Forward pass given an explicit offset field (offsets as an independent
/// input). This is the core operator; dc_forward wires the offset branch in
/// front of it.
inline Tensor dc_core_forward(const Tensor& input, const ConvParams& main,
                              const Tensor& offsets, bool clamp_offsets = false) {
  check_conv_input("deform_conv", input, main);
  auto os = conv_out_shape(input, main);
  const std::size_t n_off = 2 * static_cast<std::size_t>(main.kh()) * main.kw();
  if (offsets.shape != std::vector<std::size_t>{input.dim(0), n_off, os[2], os[3]}) {
    throw ShapeError("deform_conv: offset field " + offsets.shape_str() +
                     " does not match (B," + std::to_string(n_off) + "," +
                     std::to_string(os[2]) + "," + std::to_string(os[3]) + ")");
  }
  Tensor out{os};
  const int B = static_cast<int>(input.dim(0)), C = static_cast<int>(input.dim(1));
  const int H = static_cast<int>(input.dim(2)), W = static_cast<int>(input.dim(3));
  const int OC = static_cast<int>(out.dim(1));
  const int OH = static_cast<int>(out.dim(2)), OW = static_cast<int>(out.dim(3));
  const int s = main.stride, pad = main.padding, kh = main.kh(), kw = main.kw();
  const double lim = static_cast<double>(kh + 1);

  for (int b = 0; b < B; ++b) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        for (int n = 0; n < kh * kw; ++n) {
          double dy = offsets.at(b, 2 * n, oy, ox);
          double dx = offsets.at(b, 2 * n + 1, oy, ox);
          if (clamp_offsets) {
            dy = detail::clamp_val(dy, lim);
            dx = detail::clamp_val(dx, lim);
          }
          const double sy = oy * s - pad + n / kw + dy;
          const double sx = ox * s - pad + n % kw + dx;
          for (int ic = 0; ic < C; ++ic) {
            const double v = bilinear_sample(input.plane(b, ic), H, W, sy, sx);
            if (v == 0.0) continue;
            for (int oc = 0; oc < OC; ++oc) {
              out.at(b, oc, oy, ox) += main.weights.at(oc, ic, n / kw, n % kw) * v;
            }
          }
        }
        for (int oc = 0; oc < OC; ++oc) out.at(b, oc, oy, ox) += main.bias[oc];
      }
    }
  }
  return out;
}

/// Backward of the core operator: gradients w.r.t. input (sampling path
/// only), main weights/bias, and the offset field itself.
inline DeformGradBundle dc_core_backward(const Tensor& input, const ConvParams& main,
                                         const Tensor& offsets, const Tensor& upstream,
                                         bool clamp_offsets = false) {
  auto os = conv_out_shape(input, main);
  if (upstream.shape != os) {
    throw ShapeError("deform_conv backward: upstream " + upstream.shape_str() +
                     " != output shape");
  }
  DeformGradBundle g;
  g.d_input = input.zeros_like();
  g.d_main_weights = main.weights.zeros_like();
  g.d_main_bias.assign(main.bias.size(), 0.0);
  g.d_offsets = offsets.zeros_like();

  const int B = static_cast<int>(input.dim(0)), C = static_cast<int>(input.dim(1));
  const int H = static_cast<int>(input.dim(2)), W = static_cast<int>(input.dim(3));
  const int OC = static_cast<int>(upstream.dim(1));
  const int OH = static_cast<int>(upstream.dim(2)), OW = static_cast<int>(upstream.dim(3));
  const int s = main.stride, pad = main.padding, kh = main.kh(), kw = main.kw();
  const double lim = static_cast<double>(kh + 1);

  for (int b = 0; b < B; ++b) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        for (int oc = 0; oc < OC; ++oc) {
          g.d_main_bias[oc] += upstream.at(b, oc, oy, ox);
        }
        for (int n = 0; n < kh * kw; ++n) {
          double dy = offsets.at(b, 2 * n, oy, ox);
          double dx = offsets.at(b, 2 * n + 1, oy, ox);
          bool sat_y = false, sat_x = false;
          if (clamp_offsets) {
            sat_y = std::fabs(dy) > lim;
            sat_x = std::fabs(dx) > lim;
            dy = detail::clamp_val(dy, lim);
            dx = detail::clamp_val(dx, lim);
          }
          const double sy = oy * s - pad + n / kw + dy;
          const double sx = ox * s - pad + n % kw + dx;
          double dcoord_y = 0.0, dcoord_x = 0.0;
          for (int ic = 0; ic < C; ++ic) {
            // Chain the upstream through every output channel that uses
            // this (tap, input-channel) sample.
            double up_w = 0.0;  // sum over oc of upstream * w
            for (int oc = 0; oc < OC; ++oc) {
              up_w += upstream.at(b, oc, oy, ox) *
                      main.weights.at(oc, ic, n / kw, n % kw);
            }
            const double v = bilinear_sample(input.plane(b, ic), H, W, sy, sx);
            for (int oc = 0; oc < OC; ++oc) {
              g.d_main_weights.at(oc, ic, n / kw, n % kw) +=
                  upstream.at(b, oc, oy, ox) * v;
            }
            bilinear_sample_grads(input.plane(b, ic), H, W, sy, sx, up_w,
                                  g.d_input.plane(b, ic), dcoord_y, dcoord_x);
          }
          if (!sat_y) g.d_offsets.at(b, 2 * n, oy, ox) += dcoord_y;
          if (!sat_x) g.d_offsets.at(b, 2 * n + 1, oy, ox) += dcoord_x;
        }
      }
    }
  }
  return g;
}

/// Full forward: offsets come from the layer's own offset branch.
inline DeformConvResult dc_forward(const Tensor& input, const DeformConvLayer& layer) {
  layer.validate();
  Tensor offsets = conv2d(input, layer.offset_branch);
  Tensor out = dc_core_forward(input, layer.main, offsets, layer.clamp_offsets);
  return {std::move(out), std::move(offsets)};
}

/// Full backward: the input gradient combines the direct sampling path and
/// the path through the offset branch.
inline DeformGradBundle dc_backward(const Tensor& input, const DeformConvLayer& layer,
                                    const Tensor& offsets, const Tensor& upstream) {
  DeformGradBundle g =
      dc_core_backward(input, layer.main, offsets, upstream, layer.clamp_offsets);
  GradBundle ob = conv2d_backward(input, layer.offset_branch, g.d_offsets);
  g.d_offset_weights = std::move(ob.d_weights);
  g.d_offset_bias = std::move(ob.d_bias);
  for (std::size_t i = 0; i < g.d_input.numel(); ++i) {
    g.d_input.data[i] += ob.d_input.data[i];
  }
  return g;
}

/// He-uniform bound for a (outC, inC, kH, kW) kernel.
inline double he_uniform_bound(std::size_t in_c, int k) {
  return std::sqrt(6.0 / (static_cast<double>(in_c) * k * k));
}

/// Uniform init: gain_sq 6 is the He bound (convs feeding an activation),
/// gain_sq 3 the variance-preserving bound for linear layers.
inline ConvParams make_conv_params(std::size_t in_c, std::size_t out_c, int k,
                                   int stride, int padding, std::uint64_t seed,
                                   double gain_sq = 6.0) {
  if (k < 1 || k % 2 == 0) {
    throw ShapeError("make_conv_params: kernel size must be odd, got " +
                     std::to_string(k));
  }
  ConvParams p;
  p.weights = Tensor{{out_c, in_c, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}};
  p.bias.assign(out_c, 0.0);
  p.stride = stride;
  p.padding = padding;
  Rng rng(seed);
  const double b = std::sqrt(gain_sq / (static_cast<double>(in_c) * k * k));
  for (double& w : p.weights.data) w = rng.uniform(-b, b);
  return p;
}

/// Fresh layer: He-uniform main kernel, zero-initialized offset branch, so
/// the layer starts out exactly equivalent to a plain convolution.
inline DeformConvLayer make_dc_layer(std::size_t in_c, std::size_t out_c, int k,
                                     int stride, std::uint64_t seed) {
  DeformConvLayer l;
  l.main = make_conv_params(in_c, out_c, k, stride, k / 2, seed);
  l.offset_branch.weights =
      Tensor{{2 * static_cast<std::size_t>(k) * k, in_c, static_cast<std::size_t>(k),
              static_cast<std::size_t>(k)}};
  l.offset_branch.bias.assign(2 * static_cast<std::size_t>(k) * k, 0.0);
  l.offset_branch.stride = stride;
  l.offset_branch.padding = k / 2;
  return l;
}

}  // namespace defdet
