#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "defdet/backbone.hpp"
#include "defdet/config.hpp"
#include "defdet/head.hpp"
#include "defdet/neck.hpp"

namespace defdet {

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::tiny();
  NeckConfig neck;
  HeadConfig head;

  void validate() const {
    backbone.validate();
    neck.validate();
    if (head.in_channels != neck.out_channels) {
      throw ConfigError("model: head in_channels must equal neck out_channels");
    }
    if (head.num_classes < 1) throw ConfigError("model: num_classes must be positive");
  }

  /// Consumes the model keys of a config file; callers decide when to
  /// reject leftovers.
  static ModelConfig from_kv(KvConfig& kv) {
    ModelConfig m;
    m.backbone.stem_channels =
        static_cast<std::size_t>(kv.get_int("stem_channels", 16));
    const std::vector<int> chans = kv.get_int_list("stage_channels", {32, 64, 128, 256});
    const std::vector<int> blocks = kv.get_int_list("stage_blocks", {1, 1, 1, 1});
    if (chans.size() != 4 || blocks.size() != 4) {
      throw ConfigError("model: stage_channels and stage_blocks need 4 entries");
    }
    m.backbone.stages.clear();
    for (int i = 0; i < 4; ++i) {
      m.backbone.stages.push_back(
          {i + 2, static_cast<std::size_t>(chans[i]), blocks[i], false});
    }
    for (int s : kv.get_int_list("dc_stages", {4, 5})) {
      if (s < 2 || s > 5) throw ConfigError("model: dc_stages entries must lie in 2..5");
      m.backbone.stages[s - 2].use_dc = true;
    }
    m.backbone.export_c1 = kv.get_bool("export_c1", false);
    m.backbone.clamp_offsets = kv.get_bool("clamp_offsets", false);

    const std::string kind = kv.get_string("neck", "dfpn");
    if (kind == "dfpn") m.neck.kind = NeckKind::dfpn;
    else if (kind == "pafpn") m.neck.kind = NeckKind::pafpn;
    else throw ConfigError("model: neck must be dfpn or pafpn, got '" + kind + "'");
    m.neck.levels = kv.get_int_list("levels", {3, 4, 5});
    m.neck.out_channels = static_cast<std::size_t>(kv.get_int("out_channels", 64));
    m.neck.literal_topdown = kv.get_bool("literal_topdown", false);
    m.neck.dense_links = kv.get_bool("dense_links", true);

    m.head.in_channels = m.neck.out_channels;
    m.head.width = static_cast<std::size_t>(kv.get_int("head_width", 64));
    m.head.num_classes = static_cast<std::size_t>(kv.get_int("num_classes", 6));
    m.validate();
    return m;
  }

  std::string echo() const {
    std::ostringstream os;
    os << "stem_channels = " << backbone.stem_channels << "\n";
    os << "stage_channels = ";
    for (int i = 0; i < 4; ++i) os << (i ? "," : "") << backbone.stages[i].channels;
    os << "\nstage_blocks = ";
    for (int i = 0; i < 4; ++i) os << (i ? "," : "") << backbone.stages[i].blocks;
    os << "\ndc_stages = ";
    bool first = true;
    for (int i = 0; i < 4; ++i) {
      if (backbone.stages[i].use_dc) {
        os << (first ? "" : ",") << backbone.stages[i].index;
        first = false;
      }
    }
    if (first) os << "";
    os << "\nexport_c1 = " << (backbone.export_c1 ? "true" : "false") << "\n";
    os << "clamp_offsets = " << (backbone.clamp_offsets ? "true" : "false") << "\n";
    os << "neck = " << neck_kind_name(neck.kind) << "\n";
    os << "levels = ";
    for (std::size_t i = 0; i < neck.levels.size(); ++i) os << (i ? "," : "") << neck.levels[i];
    os << "\nout_channels = " << neck.out_channels << "\n";
    os << "literal_topdown = " << (neck.literal_topdown ? "true" : "false") << "\n";
    os << "dense_links = " << (neck.dense_links ? "true" : "false") << "\n";
    os << "head_width = " << head.width << "\n";
    os << "num_classes = " << head.num_classes << "\n";
    return os.str();
  }
};

struct ModelCache {
  BackboneCache backbone;
  NeckCache neck;
  HeadCache head;
};

/// Backbone -> neck -> decoupled head, with hand-wired backward passes.
struct Model {
  ModelConfig cfg;
  Backbone backbone;
  Neck neck;
  Head head;

  HeadOutput forward(const Tensor& image, ModelCache& cache) const {
    std::map<int, Tensor> C = backbone.forward(image, cache.backbone);
    PyramidMaps maps = neck.forward(C, cache.neck);
    return head.forward(maps.N, cache.head);
  }

  HeadOutput forward(const Tensor& image) const {
    ModelCache cache;
    return forward(image, cache);
  }

  Tensor backward(ModelCache& cache, const std::map<int, Tensor>& d_cls,
                  const std::map<int, Tensor>& d_box) {
    std::map<int, Tensor> d_N = head.backward(cache.head, d_cls, d_box);
    std::map<int, Tensor> d_C = neck.backward(cache.neck, d_N);
    return backbone.backward(cache.backbone, d_C);
  }

  void zero_grad() {
    backbone.zero_grad();
    neck.zero_grad();
    head.zero_grad();
  }

  std::vector<ParamRef> param_refs() {
    std::vector<ParamRef> refs;
    backbone.collect(refs);
    neck.collect(refs);
    head.collect(refs);
    return refs;
  }

  std::size_t param_count() { return total_params(param_refs()); }

  std::vector<std::string> manifest() { return manifest_lines(param_refs()); }
};

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.backbone = build_backbone(cfg.backbone, seed);
  std::map<int, std::size_t> in_ch;
  for (int level : cfg.neck.levels) in_ch[level] = cfg.backbone.channels_at(level);
  m.neck = build_neck(cfg.neck, in_ch, seed);
  m.head = build_head(cfg.head, seed);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of one .dtns file per parameter plus manifest.txt
// (name shape role stage) and config.txt (the model config). Optimizer
// state, when present, lives under optstate/.
// ---------------------------------------------------------------------------

inline void save_checkpoint(Model& model, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("save_checkpoint: cannot create " + dir);
  std::ofstream mf(fs::path(dir) / "manifest.txt");
  if (!mf) throw IoError("save_checkpoint: cannot write manifest in " + dir);
  for (const ParamRef& r : model.param_refs()) {
    mf << r.name << " " << shape_to_string(r.shape) << " " << r.role << " " << r.stage
       << "\n";
    Tensor t{r.shape, std::vector<double>(r.value, r.value + r.n)};
    save_tensor((fs::path(dir) / (r.name + ".dtns")).string(), t);
  }
  std::ofstream cf(fs::path(dir) / "config.txt");
  cf << model.cfg.echo();
}

/// Rebuilds the model from the checkpoint's own config, then loads every
/// parameter tensor.
inline Model load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string cfg_path = (fs::path(dir) / "config.txt").string();
  KvConfig kv = KvConfig::from_file(cfg_path);
  ModelConfig cfg = ModelConfig::from_kv(kv);
  kv.reject_unknown_keys();
  Model m = build_model(cfg, 0);
  for (const ParamRef& r : m.param_refs()) {
    Tensor t = load_tensor((fs::path(dir) / (r.name + ".dtns")).string());
    if (t.shape != r.shape) {
      throw IoError("load_checkpoint: shape mismatch for " + r.name);
    }
    std::copy(t.data.begin(), t.data.end(), r.value);
  }
  return m;
}

struct ManifestEntry {
  std::string name, shape, role;
  int stage = -1;
};

inline std::vector<ManifestEntry> parse_manifest(const std::vector<std::string>& lines) {
  std::vector<ManifestEntry> out;
  for (const std::string& l : lines) {
    std::istringstream is(l);
    ManifestEntry e;
    if (!(is >> e.name >> e.shape >> e.role >> e.stage)) {
      throw ConfigError("manifest: malformed line '" + l + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace defdet
