#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "defdet/layers.hpp"
#include "defdet/ops.hpp"
#include "defdet/tensor.hpp"

namespace defdet {

enum class NeckKind { pafpn, dfpn };

inline std::string neck_kind_name(NeckKind k) {
  return k == NeckKind::pafpn ? "pafpn" : "dfpn";
}

struct NeckConfig {
  NeckKind kind = NeckKind::dfpn;
  std::vector<int> levels = {3, 4, 5};  // contiguous, ascending, within 2..5
  std::size_t out_channels = 64;
  // The top-down fusion adds the upsampled P of the next level (standard
  // FPN). literal_topdown instead upsamples the next level's lateral
  // output directly.
  bool literal_topdown = false;
  // DFPN only: with dense links severed the bottom-up pass keeps just the
  // preliminary wiring, for structural comparison against PAFPN.
  bool dense_links = true;

  void validate() const {
    if (levels.size() < 2) throw ConfigError("neck: need at least 2 levels");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (levels[i] < 2 || levels[i] > 5) {
        throw ConfigError("neck: levels must lie in 2..5");
      }
      if (i && levels[i] != levels[i - 1] + 1) {
        throw ConfigError("neck: levels must be contiguous ascending");
      }
    }
    if (out_channels < 1) throw ConfigError("neck: out_channels must be positive");
  }
};

struct PyramidMaps {
  std::map<int, Tensor> P;
  std::map<int, Tensor> N;
};

namespace detail {

// Repeated 2x max-pool; keeps each stage input for the backward pass.
struct PoolChain {
  std::vector<Tensor> ins;
  Tensor out;
};

inline PoolChain pool_down(const Tensor& t, int times) {
  PoolChain ch;
  Tensor cur = t;
  for (int i = 0; i < times; ++i) {
    ch.ins.push_back(cur);
    cur = downsample_maxpool2x(cur);
  }
  ch.out = cur;
  return ch;
}

inline Tensor pool_down_backward(const PoolChain& ch, const Tensor& d_out) {
  Tensor d = d_out;
  for (int i = static_cast<int>(ch.ins.size()) - 1; i >= 0; --i) {
    d = downsample_maxpool2x_backward(ch.ins[i], d);
  }
  return d;
}

}  // namespace detail

struct NeckCache {
  std::map<int, Tensor> lat_in;   // C_i
  std::map<int, Tensor> lat_out;  // 1x1 conv result
  std::map<int, Tensor> P;
  // Bottom-up bookkeeping per level above the bottom:
  struct FuseCache {
    std::vector<detail::PoolChain> chains;  // pooled inputs, in concat order
    std::vector<int> chain_src;             // source level of each chain
    std::vector<bool> chain_from_N;         // chain input is N (vs P)
    Tensor p_direct;                        // the P_i part (no pooling)
    Tensor cat;                             // fusion conv input
  };
  std::map<int, FuseCache> fuse;
  std::map<int, Tensor> N;
};

/// Feature pyramid neck. Top-down: 1x1 laterals + upsampled addition into
/// P maps. Bottom-up: PAFPN chains down(N_{i-1}) into each level; DFPN
/// follows the dense wiring where the preliminary map concatenates
/// down(P_{i-1}) with P_i and every earlier N level joins through
/// parameter-free downsampling, then a 3x3 fusion conv restores the
/// unified channel width.
struct Neck {
  NeckConfig cfg;
  std::map<int, ConvUnit> lateral;
  std::map<int, ConvUnit> fuse;

  int bottom() const { return cfg.levels.front(); }
  int top() const { return cfg.levels.back(); }

  /// Channel count entering the fusion conv at levels[pos].
  std::size_t fuse_in_channels(std::size_t pos) const {
    if (cfg.kind == NeckKind::pafpn || !cfg.dense_links) return 2 * cfg.out_channels;
    return (2 + pos) * cfg.out_channels;  // pre_i (2 parts) + all earlier N levels
  }

  PyramidMaps forward(const std::map<int, Tensor>& C, NeckCache& cache) const {
    // Top-down pass.
    for (int i : cfg.levels) {
      auto it = C.find(i);
      if (it == C.end()) throw ShapeError("neck: missing C" + std::to_string(i));
      cache.lat_in[i] = it->second;
      cache.lat_out[i] = lateral.at(i).forward(it->second);
    }
    for (auto it = cfg.levels.rbegin(); it != cfg.levels.rend(); ++it) {
      const int i = *it;
      if (i == top()) {
        cache.P[i] = cache.lat_out[i];
      } else {
        const Tensor& higher = cfg.literal_topdown ? cache.lat_out.at(i + 1)
                                                   : cache.P.at(i + 1);
        cache.P[i] = add(cache.lat_out[i], upsample_nearest2x(higher));
      }
    }
    // Bottom-up pass.
    cache.N[bottom()] = cache.P[bottom()];
    for (std::size_t pos = 1; pos < cfg.levels.size(); ++pos) {
      const int i = cfg.levels[pos];
      const int prev = cfg.levels[pos - 1];
      NeckCache::FuseCache fc;
      if (cfg.kind == NeckKind::pafpn) {
        fc.chains.push_back(detail::pool_down(cache.N.at(prev), 1));
        fc.chain_src.push_back(prev);
        fc.chain_from_N.push_back(true);
      } else {
        fc.chains.push_back(detail::pool_down(cache.P.at(prev), 1));
        fc.chain_src.push_back(prev);
        fc.chain_from_N.push_back(false);
      }
      fc.p_direct = cache.P.at(i);
      if (cfg.kind == NeckKind::dfpn && cfg.dense_links) {
        for (std::size_t q = 0; q < pos; ++q) {
          const int j = cfg.levels[q];
          fc.chains.push_back(detail::pool_down(cache.N.at(j), static_cast<int>(pos - q)));
          fc.chain_src.push_back(j);
          fc.chain_from_N.push_back(true);
        }
      }
      // Concat order: the preliminary chain, P_i, then the dense chains.
      std::vector<const Tensor*> parts = {&fc.chains[0].out, &fc.p_direct};
      for (std::size_t k = 1; k < fc.chains.size(); ++k) parts.push_back(&fc.chains[k].out);
      fc.cat = concat_channels(parts);
      cache.N[i] = fuse.at(i).forward(fc.cat);
      cache.fuse[i] = std::move(fc);
    }
    return {cache.P, cache.N};
  }

  PyramidMaps forward(const std::map<int, Tensor>& C) const {
    NeckCache cache;
    return forward(C, cache);
  }

  /// d_N: upstream per level (missing = zero). Returns d_C per level.
  std::map<int, Tensor> backward(const NeckCache& cache,
                                 const std::map<int, Tensor>& d_N_in) {
    std::map<int, Tensor> d_N;
    for (int i : cfg.levels) {
      auto it = d_N_in.find(i);
      d_N[i] = it != d_N_in.end() ? it->second : cache.N.at(i).zeros_like();
    }
    std::map<int, Tensor> d_P;
    for (int i : cfg.levels) d_P[i] = cache.P.at(i).zeros_like();

    // Bottom-up backward, top level first.
    for (std::size_t pos = cfg.levels.size() - 1; pos >= 1; --pos) {
      const int i = cfg.levels[pos];
      const auto& fc = cache.fuse.at(i);
      Tensor d_cat = fuse.at(i).backward(fc.cat, d_N.at(i));
      std::size_t c0 = 0;
      auto take = [&](std::size_t width) {
        Tensor part = slice_channels(d_cat, c0, c0 + width);
        c0 += width;
        return part;
      };
      // Concat order: chains[0], P_i, chains[1..].
      {
        Tensor d0 = take(fc.chains[0].out.dim(1));
        Tensor d_src = detail::pool_down_backward(fc.chains[0], d0);
        if (fc.chain_from_N[0]) d_N[fc.chain_src[0]] = add(d_N[fc.chain_src[0]], d_src);
        else d_P[fc.chain_src[0]] = add(d_P[fc.chain_src[0]], d_src);
      }
      d_P[i] = add(d_P[i], take(fc.p_direct.dim(1)));
      for (std::size_t k = 1; k < fc.chains.size(); ++k) {
        Tensor dk = take(fc.chains[k].out.dim(1));
        Tensor d_src = detail::pool_down_backward(fc.chains[k], dk);
        d_N[fc.chain_src[k]] = add(d_N[fc.chain_src[k]], d_src);
      }
    }
    d_P[bottom()] = add(d_P[bottom()], d_N[bottom()]);  // N_bottom aliases P_bottom

    // Top-down backward, bottom level first.
    std::map<int, Tensor> d_lat;
    for (int i : cfg.levels) d_lat[i] = cache.lat_out.at(i).zeros_like();
    for (std::size_t pos = 0; pos < cfg.levels.size(); ++pos) {
      const int i = cfg.levels[pos];
      d_lat[i] = add(d_lat[i], d_P[i]);
      if (i != top()) {
        Tensor d_up = upsample_nearest2x_backward(d_P[i]);
        if (cfg.literal_topdown) d_lat[i + 1] = add(d_lat[i + 1], d_up);
        else d_P[i + 1] = add(d_P[i + 1], d_up);
      }
    }
    std::map<int, Tensor> d_C;
    for (int i : cfg.levels) {
      d_C[i] = lateral.at(i).backward(cache.lat_in.at(i), d_lat[i]);
    }
    return d_C;
  }

  void zero_grad() {
    for (auto& [_, u] : lateral) u.zero_grad();
    for (auto& [_, u] : fuse) u.zero_grad();
  }

  void collect(std::vector<ParamRef>& out) {
    for (int i : cfg.levels) lateral.at(i).collect(out);
    for (std::size_t pos = 1; pos < cfg.levels.size(); ++pos) {
      fuse.at(cfg.levels[pos]).collect(out);
    }
  }

  /// Build-time wiring manifest, one line per node:
  ///   <name> <op> <comma-separated inputs or -> <out_channels>
  std::vector<std::string> graph_manifest() const {
    std::vector<std::string> g;
    auto line = [&](const std::string& name, const std::string& op,
                    const std::string& inputs, std::size_t ch) {
      g.push_back(name + " " + op + " " + inputs + " " + std::to_string(ch));
    };
    const std::size_t ch = cfg.out_channels;
    for (int i : cfg.levels) {
      line("C" + std::to_string(i), "source", "-", lateral.at(i).p.in_channels());
      line("lat" + std::to_string(i), "conv1x1", "C" + std::to_string(i), ch);
    }
    for (auto it = cfg.levels.rbegin(); it != cfg.levels.rend(); ++it) {
      const int i = *it;
      if (i == top()) {
        line("P" + std::to_string(i), "alias", "lat" + std::to_string(i), ch);
      } else {
        const std::string src = cfg.literal_topdown ? "lat" + std::to_string(i + 1)
                                                    : "P" + std::to_string(i + 1);
        line("up" + std::to_string(i), "upsample2x", src, ch);
        line("P" + std::to_string(i), "add",
             "lat" + std::to_string(i) + ",up" + std::to_string(i), ch);
      }
    }
    line("N" + std::to_string(bottom()), "alias", "P" + std::to_string(bottom()), ch);
    for (std::size_t pos = 1; pos < cfg.levels.size(); ++pos) {
      const int i = cfg.levels[pos];
      const int prev = cfg.levels[pos - 1];
      std::vector<std::string> parts;
      auto chain = [&](const std::string& src, int times) {
        std::string cur = src;
        for (int t = 0; t < times; ++t) {
          const std::string node = "dn" + std::to_string(i) + "_" + src + "_" + std::to_string(t);
          line(node, "pool2x", cur, ch);
          cur = node;
        }
        return cur;
      };
      if (cfg.kind == NeckKind::pafpn) {
        parts.push_back(chain("N" + std::to_string(prev), 1));
      } else {
        parts.push_back(chain("P" + std::to_string(prev), 1));
      }
      parts.push_back("P" + std::to_string(i));
      std::size_t width = 2 * ch;
      if (cfg.kind == NeckKind::dfpn && cfg.dense_links) {
        for (std::size_t q = 0; q < pos; ++q) {
          parts.push_back(chain("N" + std::to_string(cfg.levels[q]),
                                static_cast<int>(pos - q)));
          width += ch;
        }
      }
      std::string inputs;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (k) inputs += ",";
        inputs += parts[k];
      }
      line("cat" + std::to_string(i), "concat", inputs, width);
      line("N" + std::to_string(i), "conv3x3", "cat" + std::to_string(i), ch);
    }
    return g;
  }
};

/// in_channels: channel count of each incoming C level.
inline Neck build_neck(const NeckConfig& cfg, const std::map<int, std::size_t>& in_channels,
                       std::uint64_t seed) {
  cfg.validate();
  Neck n;
  n.cfg = cfg;
  // Laterals and fusion convs are linear; variance-preserving init.
  for (int i : cfg.levels) {
    ConvUnit u;
    u.name = "neck.lat" + std::to_string(i);
    u.role = "lateral";
    u.stage = i;
    u.init(in_channels.at(i), cfg.out_channels, 1, 1, 0, seed, 3.0);
    n.lateral[i] = std::move(u);
  }
  for (std::size_t pos = 1; pos < cfg.levels.size(); ++pos) {
    const int i = cfg.levels[pos];
    ConvUnit u;
    u.name = "neck.fuse" + std::to_string(i);
    u.role = "fuse";
    u.stage = i;
    u.init(n.fuse_in_channels(pos), cfg.out_channels, 3, 1, 1, seed, 3.0);
    n.fuse[i] = std::move(u);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Graph-manifest queries used by the structural tests.
// ---------------------------------------------------------------------------

struct GraphNode {
  std::string name;
  std::string op;
  std::vector<std::string> inputs;
  std::size_t out_channels = 0;
};

inline std::vector<GraphNode> parse_graph_manifest(const std::vector<std::string>& lines) {
  std::vector<GraphNode> nodes;
  for (const std::string& l : lines) {
    std::istringstream is(l);
    GraphNode n;
    std::string inputs;
    if (!(is >> n.name >> n.op >> inputs >> n.out_channels)) {
      throw ConfigError("graph manifest: malformed line '" + l + "'");
    }
    if (inputs != "-") {
      std::stringstream ss(inputs);
      std::string tok;
      while (std::getline(ss, tok, ',')) n.inputs.push_back(tok);
    }
    nodes.push_back(std::move(n));
  }
  return nodes;
}

/// True when N<src> reaches N<dst> along edges that pass through no other
/// N node; this is the "direct feed" the dense wiring adds.
inline bool feeds_directly(const std::vector<GraphNode>& nodes, int src, int dst) {
  std::map<std::string, std::vector<std::string>> consumers;
  for (const GraphNode& n : nodes) {
    for (const std::string& in : n.inputs) consumers[in].push_back(n.name);
  }
  const std::string start = "N" + std::to_string(src);
  const std::string goal = "N" + std::to_string(dst);
  std::vector<std::string> stack = {start};
  std::vector<std::string> seen;
  while (!stack.empty()) {
    std::string cur = stack.back();
    stack.pop_back();
    for (const std::string& nxt : consumers[cur]) {
      if (nxt == goal) return true;
      if (nxt.size() > 1 && nxt[0] == 'N' && isdigit(static_cast<unsigned char>(nxt[1]))) {
        continue;  // blocked by another N node
      }
      if (std::find(seen.begin(), seen.end(), nxt) == seen.end()) {
        seen.push_back(nxt);
        stack.push_back(nxt);
      }
    }
  }
  return false;
}

}  // namespace defdet
