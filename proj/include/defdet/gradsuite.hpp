#pragma once

#include <functional>
#include <string>
#include <vector>

#include "defdet/backbone.hpp"
#include "defdet/deform_conv.hpp"
#include "defdet/gradcheck.hpp"
#include "defdet/head.hpp"
#include "defdet/model.hpp"
#include "defdet/neck.hpp"

namespace defdet {

struct GradCheckResult {
  std::string module;
  std::string group;
  double max_err = 0.0;
  bool pass = false;
};

struct GradSuiteOptions {
  std::uint64_t seed = 1;
  double eps = 1e-5;
  double tol = 1e-4;
  // Test hook: negates the analytic offset-field gradient to prove the
  // suite catches a wrong sign.
  bool flip_doffset_sign = false;
};

namespace gradsuite_detail {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t{std::move(shape)};
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline double weighted_sum(const Tensor& t, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) s += t.data[i] * w.data[i];
  return s;
}

}  // namespace gradsuite_detail

/// Finite-difference verification of every analytic gradient path:
/// tensor-core ops, the deformable operator (all five parameter groups plus
/// the offset field), the neck end-to-end, the head + loss, and a backbone
/// probe. Runs at toy sizes; one call per seed.
inline std::vector<GradCheckResult> run_gradcheck_suite(const GradSuiteOptions& opt) {
  using gradsuite_detail::random_tensor;
  using gradsuite_detail::weighted_sum;
  std::vector<GradCheckResult> results;
  auto record = [&](const std::string& module, const std::string& group, double err) {
    results.push_back({module, group, err, err < opt.tol});
  };
  Rng rng(mix_seed(opt.seed, 0xce11));

  // --- tensor-core: conv2d ---
  {
    Tensor in = random_tensor({1, 2, 6, 5}, rng);
    ConvParams p = make_conv_params(2, 3, 3, 1, 1, rng.raw());
    for (double& b : p.bias) b = rng.uniform(-0.3, 0.3);
    Tensor w = random_tensor(conv_out_shape(in, p), rng);
    auto scalar = [&]() { return weighted_sum(conv2d(in, p), w); };
    GradBundle g = conv2d_backward(in, p, w);
    record("tensor-core", "conv2d.input",
           max_rel_err(g.d_input.data,
                       finite_diff_grad_span(scalar, in.data.data(), in.numel(), opt.eps)));
    record("tensor-core", "conv2d.weights",
           max_rel_err(g.d_weights.data,
                       finite_diff_grad_span(scalar, p.weights.data.data(),
                                             p.weights.numel(), opt.eps)));
    record("tensor-core", "conv2d.bias",
           max_rel_err(g.d_bias,
                       finite_diff_grad_span(scalar, p.bias.data(), p.bias.size(), opt.eps)));
  }

  // --- tensor-core: bilinear sampler coordinates ---
  {
    Tensor map = random_tensor({6, 7}, rng);
    const double y = rng.uniform(-0.5, 5.5);
    const double x = rng.uniform(-0.5, 6.5);
    Tensor d_map{{6, 7}};
    double d_y = 0.0, d_x = 0.0;
    bilinear_sample_grads(map.data.data(), 6, 7, y, x, 1.0, d_map.data.data(), d_y, d_x);
    Tensor fd_map = finite_diff_grad(
        [&](const Tensor& m) { return bilinear_sample(m, y, x); }, map, opt.eps);
    record("tensor-core", "bilinear.map", max_rel_err(d_map, fd_map));
    const double fy =
        (bilinear_sample(map, y + opt.eps, x) - bilinear_sample(map, y - opt.eps, x)) /
        (2 * opt.eps);
    const double fx =
        (bilinear_sample(map, y, x + opt.eps) - bilinear_sample(map, y, x - opt.eps)) /
        (2 * opt.eps);
    record("tensor-core", "bilinear.dy", rel_err(d_y, fy));
    record("tensor-core", "bilinear.dx", rel_err(d_x, fx));
  }

  // --- tensor-core: resampling + concat ---
  {
    Tensor in = random_tensor({1, 2, 4, 4}, rng);
    Tensor w_up = random_tensor({1, 2, 8, 8}, rng);
    auto up_scalar = [&]() { return weighted_sum(upsample_nearest2x(in), w_up); };
    record("tensor-core", "upsample2x",
           max_rel_err(upsample_nearest2x_backward(w_up).data,
                       finite_diff_grad_span(up_scalar, in.data.data(), in.numel(), opt.eps)));
    Tensor w_dn = random_tensor({1, 2, 2, 2}, rng);
    auto dn_scalar = [&]() { return weighted_sum(downsample_maxpool2x(in), w_dn); };
    record("tensor-core", "maxpool2x",
           max_rel_err(downsample_maxpool2x_backward(in, w_dn).data,
                       finite_diff_grad_span(dn_scalar, in.data.data(), in.numel(), opt.eps)));
    Tensor other = random_tensor({1, 3, 4, 4}, rng);
    Tensor w_cat = random_tensor({1, 5, 4, 4}, rng);
    auto cat_scalar = [&]() { return weighted_sum(concat_channels({in, other}), w_cat); };
    record("tensor-core", "concat",
           max_rel_err(slice_channels(w_cat, 0, 2).data,
                       finite_diff_grad_span(cat_scalar, in.data.data(), in.numel(), opt.eps)));
  }

  // --- deform-conv: all parameter groups ---
  {
    Tensor in = random_tensor({1, 2, 6, 6}, rng);
    DeformConvLayer l = make_dc_layer(2, 2, 3, 1, rng.raw());
    for (double& b : l.main.bias) b = rng.uniform(-0.3, 0.3);
    for (double& w : l.offset_branch.weights.data) w = rng.uniform(-0.4, 0.4);
    for (double& b : l.offset_branch.bias) b = rng.uniform(-0.4, 0.4);
    Tensor w;
    {
      DeformConvResult probe = dc_forward(in, l);
      w = random_tensor(probe.output.shape, rng);
    }
    auto scalar = [&]() { return weighted_sum(dc_forward(in, l).output, w); };
    DeformConvResult r = dc_forward(in, l);
    DeformGradBundle g = dc_backward(in, l, r.offsets, w);
    record("deform-conv", "dc.input",
           max_rel_err(g.d_input.data,
                       finite_diff_grad_span(scalar, in.data.data(), in.numel(), opt.eps)));
    record("deform-conv", "dc.main_weights",
           max_rel_err(g.d_main_weights.data,
                       finite_diff_grad_span(scalar, l.main.weights.data.data(),
                                             l.main.weights.numel(), opt.eps)));
    record("deform-conv", "dc.main_bias",
           max_rel_err(g.d_main_bias, finite_diff_grad_span(scalar, l.main.bias.data(),
                                                            l.main.bias.size(), opt.eps)));
    record("deform-conv", "dc.offset_weights",
           max_rel_err(g.d_offset_weights.data,
                       finite_diff_grad_span(scalar, l.offset_branch.weights.data.data(),
                                             l.offset_branch.weights.numel(), opt.eps)));
    record("deform-conv", "dc.offset_bias",
           max_rel_err(g.d_offset_bias,
                       finite_diff_grad_span(scalar, l.offset_branch.bias.data(),
                                             l.offset_branch.bias.size(), opt.eps)));
    // Offset field as an independent input.
    Tensor offsets = random_tensor({1, 18, 6, 6}, rng, -0.6, 0.6);
    auto off_scalar = [&](const Tensor& off) {
      return weighted_sum(dc_core_forward(in, l.main, off), w);
    };
    DeformGradBundle gc = dc_core_backward(in, l.main, offsets, w);
    Tensor d_off = gc.d_offsets;
    if (opt.flip_doffset_sign) {
      for (double& v : d_off.data) v = -v;
    }
    record("deform-conv", "dc.offset_field",
           max_rel_err(d_off, finite_diff_grad(off_scalar, offsets, opt.eps)));
  }

  // --- dfpn: end-to-end gradient from sum(N) to every C level ---
  {
    NeckConfig ncfg;
    ncfg.kind = NeckKind::dfpn;
    ncfg.levels = {3, 4, 5};
    ncfg.out_channels = 4;
    std::map<int, std::size_t> in_ch = {{3, 3}, {4, 5}, {5, 6}};
    Neck neck = build_neck(ncfg, in_ch, rng.raw());
    // 32x32 image scale: C3 4x4, C4 2x2, C5 1x1
    std::map<int, Tensor> C = {{3, random_tensor({1, 3, 4, 4}, rng)},
                               {4, random_tensor({1, 5, 2, 2}, rng)},
                               {5, random_tensor({1, 6, 1, 1}, rng)}};
    std::map<int, Tensor> w;
    {
      PyramidMaps probe = neck.forward(C);
      for (const auto& [lvl, n] : probe.N) w[lvl] = random_tensor(n.shape, rng);
    }
    auto scalar = [&]() {
      PyramidMaps maps = neck.forward(C);
      double s = 0.0;
      for (const auto& [lvl, n] : maps.N) s += weighted_sum(n, w.at(lvl));
      return s;
    };
    NeckCache cache;
    neck.forward(C, cache);
    neck.zero_grad();
    std::map<int, Tensor> d_C = neck.backward(cache, w);
    for (int lvl : ncfg.levels) {
      double nonzero = 0.0;
      for (double v : d_C.at(lvl).data) nonzero += std::fabs(v);
      record("dfpn", "dfpn.dC" + std::to_string(lvl) + ".nonzero", nonzero > 0.0 ? 0.0 : 1.0);
      record("dfpn", "dfpn.dC" + std::to_string(lvl),
             max_rel_err(d_C.at(lvl).data,
                         finite_diff_grad_span(scalar, C.at(lvl).data.data(),
                                               C.at(lvl).numel(), opt.eps)));
    }
    std::vector<ParamRef> refs;
    neck.collect(refs);
    // One fusion conv and one lateral, spot-checked per seed.
    for (const ParamRef& r : refs) {
      if (r.name == "neck.lat4.w" || r.name == "neck.fuse5.w") {
        record("dfpn", "dfpn." + r.name,
               max_rel_err(std::vector<double>(r.grad, r.grad + r.n),
                           finite_diff_grad_span(scalar, r.value, r.n, opt.eps)));
      }
    }
  }

  // --- head + loss ---
  {
    HeadConfig hcfg;
    hcfg.in_channels = 3;
    hcfg.width = 4;
    hcfg.num_classes = 3;
    Head head = build_head(hcfg, rng.raw());
    std::map<int, Tensor> N = {{3, random_tensor({1, 3, 4, 4}, rng)},
                               {4, random_tensor({1, 3, 2, 2}, rng)}};
    std::vector<std::vector<BBox>> gt(1);
    gt[0].push_back({0.4, 0.55, 0.3, 0.25, 1});
    Targets targets = assign_targets(gt, {3, 4}, 32, 32, hcfg.num_classes);
    auto scalar = [&]() { return compute_loss(head.forward(N), targets).total; };
    HeadCache cache;
    HeadOutput out = head.forward(N, cache);
    std::map<int, Tensor> d_cls, d_box;
    compute_loss_grads(out, targets, d_cls, d_box);
    head.zero_grad();
    std::map<int, Tensor> d_N = head.backward(cache, d_cls, d_box);
    for (const auto& [lvl, d] : d_N) {
      record("head-loss", "head.dN" + std::to_string(lvl),
             max_rel_err(d.data, finite_diff_grad_span(scalar, N.at(lvl).data.data(),
                                                       N.at(lvl).numel(), opt.eps)));
    }
    std::vector<ParamRef> refs;
    head.collect(refs);
    for (const ParamRef& r : refs) {
      if (r.name == "head.cls.out.w" || r.name == "head.box.out.w" ||
          r.name == "head.cls.hidden.b") {
        record("head-loss", "head." + r.name,
               max_rel_err(std::vector<double>(r.grad, r.grad + r.n),
                           finite_diff_grad_span(scalar, r.value, r.n, opt.eps)));
      }
    }
  }

  // --- backbone: probe pixels through the full stage stack ---
  {
    BackboneConfig bcfg;
    bcfg.stem_channels = 2;
    bcfg.stages = {{2, 2, 1, false}, {3, 3, 1, false}, {4, 3, 1, true}, {5, 4, 1, true}};
    Backbone bb = build_backbone(bcfg, rng.raw());
    // Fresh DC blocks sample exactly at integer coordinates, where the
    // bilinear interpolant has its kink; nudge the offset branches so the
    // check runs at generic fractional positions.
    for (auto& st : bb.stages) {
      for (auto& blk : st.blocks) {
        if (!blk.is_dc) continue;
        for (double& w : blk.dc.l.offset_branch.weights.data) w = rng.uniform(-0.2, 0.2);
        for (double& b : blk.dc.l.offset_branch.bias) b = rng.uniform(-0.2, 0.2);
      }
    }
    Tensor img = random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
    Tensor w5 = random_tensor({1, 4, 1, 1}, rng);
    auto scalar = [&]() {
      std::map<int, Tensor> C = bb.forward(img);
      return weighted_sum(C.at(5), w5);
    };
    BackboneCache cache;
    bb.forward(img, cache);
    bb.zero_grad();
    Tensor d_img = bb.backward(cache, {{5, w5}});
    // Probe a handful of input pixels; full finite differences over the
    // image would dominate the suite's runtime.
    double worst = 0.0;
    for (int probe = 0; probe < 5; ++probe) {
      const std::size_t idx = rng.raw() % img.numel();
      const double saved = img.data[idx];
      img.data[idx] = saved + opt.eps;
      const double fp = scalar();
      img.data[idx] = saved - opt.eps;
      const double fm = scalar();
      img.data[idx] = saved;
      worst = std::max(worst, rel_err(d_img.data[idx], (fp - fm) / (2 * opt.eps)));
    }
    record("backbone", "backbone.dimage", worst);
    std::vector<ParamRef> refs;
    bb.collect(refs);
    for (const ParamRef& r : refs) {
      if (r.name == "backbone.s4.b0.off.w" || r.name == "backbone.s5.b0.w") {
        record("backbone", "backbone." + r.name,
               max_rel_err(std::vector<double>(r.grad, r.grad + r.n),
                           finite_diff_grad_span(scalar, r.value, r.n, opt.eps)));
      }
    }
  }

  return results;
}

}  // namespace defdet
