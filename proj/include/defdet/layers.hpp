#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "defdet/deform_conv.hpp"
#include "defdet/ops.hpp"
#include "defdet/rng.hpp"
#include "defdet/tensor.hpp"

namespace defdet {

/// View of one learnable parameter buffer plus its gradient, for SGD,
/// checkpointing and the parameter manifest.
struct ParamRef {
  std::string name;
  std::string role;
  int stage = -1;  // pyramid level / backbone stage, -1 where not applicable
  std::vector<std::size_t> shape;
  double* value = nullptr;
  double* grad = nullptr;
  std::size_t n = 0;
};

inline std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s;
}

/// Named plain convolution with gradient accumulators.
struct ConvUnit {
  std::string name;
  std::string role;
  int stage = -1;
  ConvParams p;
  ConvParams g;  // same shapes, gradient accumulators

  /// gain_sq 6 for convs feeding an activation, 3 for linear layers.
  void init(std::size_t in_c, std::size_t out_c, int k, int stride, int pad,
            std::uint64_t model_seed, double gain_sq = 6.0) {
    p = make_conv_params(in_c, out_c, k, stride, pad,
                         mix_seed(model_seed, hash_name(name)), gain_sq);
    g = p;
    zero_grad();
  }

  void zero_grad() {
    std::fill(g.weights.data.begin(), g.weights.data.end(), 0.0);
    std::fill(g.bias.begin(), g.bias.end(), 0.0);
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, p); }

  /// Accumulates weight/bias grads, returns d_input.
  Tensor backward(const Tensor& x, const Tensor& upstream) {
    GradBundle gb = conv2d_backward(x, p, upstream);
    for (std::size_t i = 0; i < gb.d_weights.numel(); ++i)
      g.weights.data[i] += gb.d_weights.data[i];
    for (std::size_t i = 0; i < gb.d_bias.size(); ++i) g.bias[i] += gb.d_bias[i];
    return std::move(gb.d_input);
  }

  void collect(std::vector<ParamRef>& out) {
    out.push_back({name + ".w", role, stage, p.weights.shape, p.weights.data.data(),
                   g.weights.data.data(), p.weights.numel()});
    out.push_back({name + ".b", role, stage, {p.bias.size()}, p.bias.data(),
                   g.bias.data(), p.bias.size()});
  }
};

/// Named deformable convolution with gradient accumulators for both the
/// main kernel and the offset branch.
struct DeformUnit {
  std::string name;
  std::string role;
  int stage = -1;
  DeformConvLayer l;
  Tensor g_main_w;
  std::vector<double> g_main_b;
  Tensor g_off_w;
  std::vector<double> g_off_b;

  void init(std::size_t in_c, std::size_t out_c, int k, int stride,
            std::uint64_t model_seed, bool clamp_offsets) {
    l = make_dc_layer(in_c, out_c, k, stride, mix_seed(model_seed, hash_name(name)));
    l.clamp_offsets = clamp_offsets;
    g_main_w = l.main.weights.zeros_like();
    g_main_b.assign(l.main.bias.size(), 0.0);
    g_off_w = l.offset_branch.weights.zeros_like();
    g_off_b.assign(l.offset_branch.bias.size(), 0.0);
  }

  void zero_grad() {
    std::fill(g_main_w.data.begin(), g_main_w.data.end(), 0.0);
    std::fill(g_main_b.begin(), g_main_b.end(), 0.0);
    std::fill(g_off_w.data.begin(), g_off_w.data.end(), 0.0);
    std::fill(g_off_b.begin(), g_off_b.end(), 0.0);
  }

  DeformConvResult forward(const Tensor& x) const { return dc_forward(x, l); }

  Tensor backward(const Tensor& x, const Tensor& offsets, const Tensor& upstream) {
    DeformGradBundle gb = dc_backward(x, l, offsets, upstream);
    for (std::size_t i = 0; i < gb.d_main_weights.numel(); ++i)
      g_main_w.data[i] += gb.d_main_weights.data[i];
    for (std::size_t i = 0; i < gb.d_main_bias.size(); ++i)
      g_main_b[i] += gb.d_main_bias[i];
    for (std::size_t i = 0; i < gb.d_offset_weights.numel(); ++i)
      g_off_w.data[i] += gb.d_offset_weights.data[i];
    for (std::size_t i = 0; i < gb.d_offset_bias.size(); ++i)
      g_off_b[i] += gb.d_offset_bias[i];
    return std::move(gb.d_input);
  }

  void collect(std::vector<ParamRef>& out) {
    out.push_back({name + ".w", role, stage, l.main.weights.shape,
                   l.main.weights.data.data(), g_main_w.data.data(),
                   l.main.weights.numel()});
    out.push_back({name + ".b", role, stage, {l.main.bias.size()}, l.main.bias.data(),
                   g_main_b.data(), l.main.bias.size()});
    out.push_back({name + ".off.w", role + "_offset", stage,
                   l.offset_branch.weights.shape, l.offset_branch.weights.data.data(),
                   g_off_w.data.data(), l.offset_branch.weights.numel()});
    out.push_back({name + ".off.b", role + "_offset", stage,
                   {l.offset_branch.bias.size()}, l.offset_branch.bias.data(),
                   g_off_b.data(), l.offset_branch.bias.size()});
  }
};

inline std::size_t total_params(const std::vector<ParamRef>& refs) {
  std::size_t n = 0;
  for (const ParamRef& r : refs) n += r.n;
  return n;
}

/// One manifest line per parameter tensor: name shape role stage.
inline std::vector<std::string> manifest_lines(const std::vector<ParamRef>& refs) {
  std::vector<std::string> lines;
  lines.reserve(refs.size());
  for (const ParamRef& r : refs) {
    lines.push_back(r.name + " " + shape_to_string(r.shape) + " " + r.role + " " +
                    std::to_string(r.stage));
  }
  return lines;
}

}  // namespace defdet
