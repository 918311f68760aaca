#pragma once

#include <map>
#include <set>
#include <vector>

#include "defdet/layers.hpp"
#include "defdet/ops.hpp"
#include "defdet/tensor.hpp"

namespace defdet {

constexpr double kLeakySlope = 0.1;

struct StageSpec {
  int index = 2;            // 2..5; stage i emits C_i at stride 2^i
  std::size_t channels = 32;
  int blocks = 1;
  bool use_dc = false;
};

/// Staged feature extractor: stride-2 stem (C1), then four stages each
/// entered through a stride-2 conv and refined by residual conv blocks.
/// Stages flagged use_dc swap their 3x3 block convolutions for deformable
/// ones; entry convolutions stay plain.
struct BackboneConfig {
  std::size_t stem_channels = 16;
  std::vector<StageSpec> stages;  // exactly indices 2,3,4,5 in order
  bool export_c1 = false;
  bool clamp_offsets = false;

  static BackboneConfig tiny(const std::set<int>& dc_stages = {4, 5}) {
    BackboneConfig c;
    c.stages = {{2, 32, 1, false}, {3, 64, 1, false}, {4, 128, 1, false}, {5, 256, 1, false}};
    for (StageSpec& s : c.stages) s.use_dc = dc_stages.count(s.index) > 0;
    return c;
  }

  void validate() const {
    if (stages.size() != 4) {
      throw ConfigError("backbone: expected stages 2..5, got " +
                        std::to_string(stages.size()) + " stages");
    }
    std::size_t prev_ch = 0;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].index != static_cast<int>(i) + 2) {
        throw ConfigError("backbone: stage indices must be 2,3,4,5 in order");
      }
      if (stages[i].channels < prev_ch) {
        throw ConfigError("backbone: channels must be non-decreasing with stage index");
      }
      if (stages[i].blocks < 1 || stages[i].channels < 1) {
        throw ConfigError("backbone: blocks and channels must be positive");
      }
      prev_ch = stages[i].channels;
    }
  }

  std::size_t channels_at(int level) const {
    if (level == 1) return stem_channels;
    return stages.at(level - 2).channels;
  }
};

namespace detail {

struct ConvCache {
  Tensor in;
  Tensor pre;
};

struct BlockCache {
  ConvCache c;
  Tensor offsets;  // only for deformable blocks
};

}  // namespace detail

/// One residual unit: x + leaky(conv3x3(x)).
struct BackboneBlock {
  bool is_dc = false;
  ConvUnit conv;
  DeformUnit dc;

  Tensor forward(const Tensor& x, detail::BlockCache& cache) const {
    cache.c.in = x;
    if (is_dc) {
      DeformConvResult r = dc.forward(x);
      cache.c.pre = std::move(r.output);
      cache.offsets = std::move(r.offsets);
    } else {
      cache.c.pre = conv.forward(x);
    }
    return add(x, leaky(cache.c.pre, kLeakySlope));
  }

  Tensor backward(const detail::BlockCache& cache, const Tensor& d_out) {
    Tensor d_pre = leaky_backward(cache.c.pre, d_out, kLeakySlope);
    Tensor d_in = is_dc ? dc.backward(cache.c.in, cache.offsets, d_pre)
                        : conv.backward(cache.c.in, d_pre);
    return add(d_in, d_out);  // residual path
  }
};

struct BackboneStage {
  int index = 2;
  ConvUnit entry;
  std::vector<BackboneBlock> blocks;
};

struct BackboneCache {
  detail::ConvCache stem;
  Tensor stem_act;
  struct StageCache {
    detail::ConvCache entry;
    std::vector<detail::BlockCache> blocks;
  };
  std::vector<StageCache> stages;
};

struct Backbone {
  BackboneConfig cfg;
  ConvUnit stem;
  std::vector<BackboneStage> stages;

  /// Multi-resolution maps keyed by level; C_i has spatial size (H/2^i, W/2^i).
  std::map<int, Tensor> forward(const Tensor& image, BackboneCache& cache) const {
    if (image.rank() != 4 || image.dim(1) != stem.p.in_channels()) {
      throw ShapeError("backbone: image must be (B," +
                       std::to_string(stem.p.in_channels()) + ",H,W), got " +
                       image.shape_str());
    }
    if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
      throw ShapeError("backbone: spatial size must be divisible by 32, got " +
                       image.shape_str());
    }
    std::map<int, Tensor> C;
    cache.stem.in = image;
    cache.stem.pre = stem.forward(image);
    cache.stem_act = leaky(cache.stem.pre, kLeakySlope);
    Tensor x = cache.stem_act;
    if (cfg.export_c1) C[1] = x;
    cache.stages.resize(stages.size());
    for (std::size_t s = 0; s < stages.size(); ++s) {
      auto& sc = cache.stages[s];
      sc.entry.in = x;
      sc.entry.pre = stages[s].entry.forward(x);
      x = leaky(sc.entry.pre, kLeakySlope);
      sc.blocks.resize(stages[s].blocks.size());
      for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
        x = stages[s].blocks[b].forward(x, sc.blocks[b]);
      }
      C[stages[s].index] = x;
    }
    return C;
  }

  std::map<int, Tensor> forward(const Tensor& image) const {
    BackboneCache cache;
    return forward(image, cache);
  }

  /// d_C holds upstream gradients per level (missing levels mean zero).
  /// Returns the gradient w.r.t. the input image; parameter gradients
  /// accumulate into the units.
  Tensor backward(const BackboneCache& cache, const std::map<int, Tensor>& d_C) {
    Tensor d_x;  // gradient flowing into the current stage output
    for (int s = static_cast<int>(stages.size()) - 1; s >= 0; --s) {
      const auto& sc = cache.stages[s];
      const int level = stages[s].index;
      auto it = d_C.find(level);
      if (it != d_C.end()) {
        d_x = d_x.numel() ? add(d_x, it->second) : it->second;
      }
      if (!d_x.numel()) {
        // No gradient reaches this stage from above; start a zero buffer
        // shaped like the stage output.
        const auto& last =
            sc.blocks.empty() ? sc.entry.pre : sc.blocks.back().c.pre;
        d_x = last.zeros_like();
      }
      for (int b = static_cast<int>(stages[s].blocks.size()) - 1; b >= 0; --b) {
        d_x = stages[s].blocks[b].backward(sc.blocks[b], d_x);
      }
      Tensor d_pre = leaky_backward(sc.entry.pre, d_x, kLeakySlope);
      d_x = stages[s].entry.backward(sc.entry.in, d_pre);
    }
    if (cfg.export_c1) {
      auto it = d_C.find(1);
      if (it != d_C.end()) d_x = add(d_x, it->second);
    }
    Tensor d_stem_pre = leaky_backward(cache.stem.pre, d_x, kLeakySlope);
    return stem.backward(cache.stem.in, d_stem_pre);
  }

  void zero_grad() {
    stem.zero_grad();
    for (auto& st : stages) {
      st.entry.zero_grad();
      for (auto& b : st.blocks) {
        if (b.is_dc) b.dc.zero_grad();
        else b.conv.zero_grad();
      }
    }
  }

  void collect(std::vector<ParamRef>& out) {
    stem.collect(out);
    for (auto& st : stages) {
      st.entry.collect(out);
      for (auto& b : st.blocks) {
        if (b.is_dc) b.dc.collect(out);
        else b.conv.collect(out);
      }
    }
  }
};

/// Deterministic build: every unit draws its weights from a seed derived
/// from (seed, unit name), so toggling DC on one stage leaves all other
/// parameter values untouched.
inline Backbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed,
                               std::size_t image_channels = 3) {
  cfg.validate();
  Backbone bb;
  bb.cfg = cfg;
  bb.stem.name = "backbone.stem";
  bb.stem.role = "stem";
  bb.stem.stage = 1;
  bb.stem.init(image_channels, cfg.stem_channels, 3, 2, 1, seed);
  std::size_t in_c = cfg.stem_channels;
  for (const StageSpec& spec : cfg.stages) {
    BackboneStage st;
    st.index = spec.index;
    const std::string prefix = "backbone.s" + std::to_string(spec.index);
    st.entry.name = prefix + ".entry";
    st.entry.role = "stage_entry";
    st.entry.stage = spec.index;
    st.entry.init(in_c, spec.channels, 3, 2, 1, seed);
    for (int b = 0; b < spec.blocks; ++b) {
      BackboneBlock blk;
      blk.is_dc = spec.use_dc;
      const std::string bname = prefix + ".b" + std::to_string(b);
      if (spec.use_dc) {
        blk.dc.name = bname;
        blk.dc.role = "stage_block";
        blk.dc.stage = spec.index;
        blk.dc.init(spec.channels, spec.channels, 3, 1, seed, cfg.clamp_offsets);
      } else {
        blk.conv.name = bname;
        blk.conv.role = "stage_block";
        blk.conv.stage = spec.index;
        blk.conv.init(spec.channels, spec.channels, 3, 1, 1, seed);
      }
      st.blocks.push_back(std::move(blk));
    }
    bb.stages.push_back(std::move(st));
    in_c = spec.channels;
  }
  return bb;
}

}  // namespace defdet
