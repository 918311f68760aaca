#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "defdet/eval.hpp"
#include "defdet/model.hpp"
#include "defdet/synth.hpp"

namespace defdet {

struct TrainConfig {
  ModelConfig model;
  double lr = 0.05;
  double momentum = 0.9;
  int steps = 500;
  int batch_size = 2;
  std::uint64_t seed = 7;
  bool shuffle = true;
  int threads = 1;
  std::string dataset;
  std::string train_split = "train";
  std::string eval_split = "val";
  int eval_every = 0;  // 0 disables periodic evaluation
  DecodeParams decode;
  double iou_max = 0.95;
  std::string checkpoint_dir;
  std::string log_path;

  void validate() const {
    model.validate();
    if (!(lr >= 0.0)) throw ConfigError("train: lr must be >= 0");
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
    if (dataset.empty()) throw ConfigError("train: dataset path required");
  }

  static TrainConfig from_file(const std::string& path) {
    KvConfig kv = KvConfig::from_file(path);
    TrainConfig c;
    c.model = ModelConfig::from_kv(kv);
    c.lr = kv.get_double("lr", c.lr);
    c.momentum = kv.get_double("momentum", c.momentum);
    c.steps = kv.get_int("steps", c.steps);
    c.batch_size = kv.get_int("batch_size", c.batch_size);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(c.seed)));
    c.shuffle = kv.get_bool("shuffle", c.shuffle);
    c.threads = kv.get_int("threads", c.threads);
    c.dataset = kv.require_string("dataset");
    c.train_split = kv.get_string("train_split", c.train_split);
    c.eval_split = kv.get_string("eval_split", c.eval_split);
    c.eval_every = kv.get_int("eval_every", c.eval_every);
    c.decode.score_thresh = kv.get_double("score_thresh", c.decode.score_thresh);
    c.decode.iou_thresh = kv.get_double("iou_thresh", c.decode.iou_thresh);
    c.decode.max_dets = static_cast<std::size_t>(kv.get_int("max_dets", 100));
    c.iou_max = kv.get_double("iou_max", c.iou_max);
    c.checkpoint_dir = kv.get_string("checkpoint", "");
    c.log_path = kv.get_string("log", "");
    kv.reject_unknown_keys();
    c.validate();
    return c;
  }
};

struct Sample {
  int id = 0;
  Tensor image;  // (1, 3, H, W)
  std::vector<BBox> boxes;
};

inline std::vector<Sample> load_split(const std::string& dataset_dir,
                                      const std::string& split,
                                      std::size_t num_classes) {
  namespace fs = std::filesystem;
  std::vector<Sample> out;
  for (const auto& [stem, s] : load_manifest(dataset_dir)) {
    if (s != split) continue;
    Sample sample;
    sample.id = std::stoi(stem);
    sample.image =
        image_to_tensor(load_ppm((fs::path(dataset_dir) / "images" / (stem + ".ppm")).string()));
    sample.boxes = load_annotations(
        (fs::path(dataset_dir) / "labels" / (stem + ".txt")).string(),
        static_cast<int>(num_classes));
    out.push_back(std::move(sample));
  }
  return out;
}

namespace detail {

/// Sample index for global position `pos` in the deterministic stream:
/// epoch-wise permutations derived from (seed, epoch).
inline std::size_t stream_index(std::uint64_t seed, bool shuffle, std::size_t n,
                                std::uint64_t pos) {
  const std::uint64_t epoch = pos / n;
  const std::size_t k = static_cast<std::size_t>(pos % n);
  if (!shuffle) return k;
  Rng rng(mix_seed(seed ^ 0x6f72646572ULL, epoch));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)));
    std::swap(order[i], order[j]);
  }
  return order[k];
}

}  // namespace detail

/// SGD with momentum over every model parameter, deterministic batching,
/// resumable state.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_(cfg), model_(build_model(cfg.model, cfg.seed)) {
    cfg_.validate();
    train_set_ = load_split(cfg_.dataset, cfg_.train_split, cfg_.model.head.num_classes);
    if (train_set_.empty()) {
      throw IoError("train: split '" + cfg_.train_split + "' of " + cfg_.dataset +
                    " is empty or missing");
    }
    const Tensor& first = train_set_.front().image;
    img_h_ = static_cast<int>(first.dim(2));
    img_w_ = static_cast<int>(first.dim(3));
    for (const Sample& s : train_set_) {
      if (static_cast<int>(s.image.dim(2)) != img_h_ ||
          static_cast<int>(s.image.dim(3)) != img_w_) {
        throw ConfigError("train: images in a split must share one size");
      }
    }
    for (const ParamRef& r : model_.param_refs()) {
      velocity_.push_back(std::vector<double>(r.n, 0.0));
    }
  }

  Model& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int step_count() const { return step_; }
  const std::vector<Sample>& train_set() const { return train_set_; }

  /// One SGD step over the next deterministic batch. Returns the batch loss.
  LossParts step() {
    const std::size_t n = train_set_.size();
    std::vector<std::size_t> batch;
    for (int i = 0; i < cfg_.batch_size; ++i) {
      const std::uint64_t pos = static_cast<std::uint64_t>(step_) * cfg_.batch_size + i;
      batch.push_back(detail::stream_index(cfg_.seed, cfg_.shuffle, n, pos));
    }
    model_.zero_grad();
    LossParts parts = accumulate_batch(batch);
    if (!std::isfinite(parts.total)) {
      throw DivergenceError("train: non-finite loss at step " + std::to_string(step_ + 1) +
                            " (total=" + std::to_string(parts.total) + "); lower lr");
    }
    std::vector<ParamRef> refs = model_.param_refs();
    for (std::size_t r = 0; r < refs.size(); ++r) {
      double* v = velocity_[r].data();
      for (std::size_t i = 0; i < refs[r].n; ++i) {
        v[i] = cfg_.momentum * v[i] + refs[r].grad[i];
        refs[r].value[i] -= cfg_.lr * v[i];
      }
    }
    ++step_;
    return parts;
  }

  EvalReport evaluate_split(const std::string& split) {
    std::vector<Sample> samples =
        split == cfg_.train_split ? train_set_
                                  : load_split(cfg_.dataset, split, cfg_.model.head.num_classes);
    std::map<int, std::vector<Detection>> dets;
    std::map<int, std::vector<BBox>> gts;
    for (const Sample& s : samples) {
      HeadOutput out = model_.forward(s.image);
      dets[s.id] = decode(out, 0, cfg_.decode);
      gts[s.id] = s.boxes;
    }
    return evaluate(dets, gts, cfg_.model.head.num_classes, cfg_.iou_max);
  }

  void save(const std::string& dir) {
    namespace fs = std::filesystem;
    save_checkpoint(model_, dir);
    fs::create_directories(fs::path(dir) / "optstate");
    std::vector<ParamRef> refs = model_.param_refs();
    for (std::size_t r = 0; r < refs.size(); ++r) {
      Tensor t{{velocity_[r].size()}, velocity_[r]};
      save_tensor((fs::path(dir) / "optstate" / (refs[r].name + ".v.dtns")).string(), t);
    }
    std::ofstream meta(fs::path(dir) / "optstate" / "meta.txt");
    meta << "step = " << step_ << "\n";
  }

  /// Restores parameters and, when present, optimizer state + step count.
  void load(const std::string& dir) {
    namespace fs = std::filesystem;
    Model loaded = load_checkpoint(dir);
    if (loaded.cfg.echo() != model_.cfg.echo()) {
      throw ConfigError("load: checkpoint model config differs from trainer config");
    }
    std::vector<ParamRef> dst = model_.param_refs();
    std::vector<ParamRef> src = loaded.param_refs();
    for (std::size_t r = 0; r < dst.size(); ++r) {
      std::copy(src[r].value, src[r].value + src[r].n, dst[r].value);
    }
    const fs::path opt = fs::path(dir) / "optstate";
    if (fs::exists(opt)) {
      for (std::size_t r = 0; r < dst.size(); ++r) {
        Tensor t = load_tensor((opt / (dst[r].name + ".v.dtns")).string());
        velocity_[r] = t.data;
      }
      KvConfig kv = KvConfig::from_file((opt / "meta.txt").string());
      step_ = kv.get_int("step", 0);
    }
  }

 private:
  LossParts accumulate_batch(const std::vector<std::size_t>& batch) {
    // Stack the batch into one (B,3,H,W) tensor.
    const std::size_t B = batch.size();
    Tensor images{{B, 3, (std::size_t)img_h_, (std::size_t)img_w_}};
    std::vector<std::vector<BBox>> gt(B);
    for (std::size_t i = 0; i < B; ++i) {
      const Sample& s = train_set_[batch[i]];
      std::copy(s.image.data.begin(), s.image.data.end(),
                images.data.begin() + i * s.image.numel());
      gt[i] = s.boxes;
    }
    Targets targets = assign_targets(gt, cfg_.model.neck.levels, img_h_, img_w_,
                                     cfg_.model.head.num_classes);
    if (cfg_.threads <= 1 || B == 1) {
      ModelCache cache;
      HeadOutput out = model_.forward(images, cache);
      std::map<int, Tensor> d_cls, d_box;
      LossParts parts = compute_loss_grads(out, targets, d_cls, d_box);
      model_.backward(cache, d_cls, d_box);
      return parts;
    }
    return accumulate_batch_threaded(images, targets, B);
  }

  /// Batch-parallel path: each image runs forward/backward on its own model
  /// copy with the whole-batch loss normalizers; gradients reduce in image
  /// order so the result does not depend on the thread count beyond
  /// rounding inside a single image.
  LossParts accumulate_batch_threaded(const Tensor& images, const Targets& targets,
                                      std::size_t B) {
    const LossNorms norms = count_loss_norms(targets);
    std::vector<Model> workers(B, model_);
    std::vector<LossParts> parts(B);
    auto run = [&](std::size_t i) {
      Tensor img = slice_batch(images, i);
      Targets t1 = slice_targets(targets, i);
      workers[i].zero_grad();
      ModelCache cache;
      HeadOutput out = workers[i].forward(img, cache);
      std::map<int, Tensor> d_cls, d_box;
      parts[i] = compute_loss_grads(out, t1, d_cls, d_box, &norms);
      workers[i].backward(cache, d_cls, d_box);
    };
    std::vector<std::thread> pool;
    std::size_t next = 0;
    const std::size_t nt = std::min<std::size_t>(cfg_.threads, B);
    std::mutex mu;
    for (std::size_t t = 0; t < nt; ++t) {
      pool.emplace_back([&]() {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= B) return;
            i = next++;
          }
          run(i);
        }
      });
    }
    for (auto& th : pool) th.join();
    // Ordered reduction; the normalizers are already batch-global, so the
    // per-image pieces just sum.
    std::vector<ParamRef> dst = model_.param_refs();
    for (std::size_t i = 0; i < B; ++i) {
      std::vector<ParamRef> src = workers[i].param_refs();
      for (std::size_t r = 0; r < dst.size(); ++r) {
        for (std::size_t k = 0; k < dst[r].n; ++k) {
          dst[r].grad[k] += src[r].grad[k];
        }
      }
    }
    LossParts total;
    for (std::size_t i = 0; i < B; ++i) {
      total.cls += parts[i].cls;
      total.box += parts[i].box;
      total.total += parts[i].total;
    }
    return total;
  }

  static Tensor slice_batch(const Tensor& images, std::size_t i) {
    Tensor out{{1, images.dim(1), images.dim(2), images.dim(3)}};
    const std::size_t n = out.numel();
    std::copy(images.data.begin() + i * n, images.data.begin() + (i + 1) * n,
              out.data.begin());
    return out;
  }

  static Targets slice_targets(const Targets& t, std::size_t i) {
    Targets out;
    for (const auto& [level, lt] : t) {
      auto slice4 = [&](const Tensor& src) {
        Tensor dst{{1, src.dim(1), src.dim(2), src.dim(3)}};
        const std::size_t n = dst.numel();
        std::copy(src.data.begin() + i * n, src.data.begin() + (i + 1) * n,
                  dst.data.begin());
        return dst;
      };
      out[level] = {slice4(lt.cls), slice4(lt.box), slice4(lt.pos)};
    }
    return out;
  }

  TrainConfig cfg_;
  Model model_;
  std::vector<Sample> train_set_;
  std::vector<std::vector<double>> velocity_;
  int step_ = 0;
  int img_h_ = 0, img_w_ = 0;
};

struct TrainResult {
  LossParts final_loss;
  EvalReport final_eval;
  bool evaluated = false;
  int steps = 0;
};

/// Full training run with metric logging: one `step total cls box` line per
/// step and one `step map50 map5095` line per periodic evaluation.
inline TrainResult train(const TrainConfig& cfg, std::ostream* console = nullptr) {
  Trainer trainer(cfg);
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    std::filesystem::path p(cfg.log_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    log.open(cfg.log_path, std::ios::app);
    if (!log) throw IoError("train: cannot open log " + cfg.log_path);
  }
  auto emit = [&](const std::string& line) {
    if (log.is_open()) log << line << "\n";
    if (console) *console << line << "\n";
  };
  TrainResult result;
  std::ostringstream fmt;
  for (int s = 0; s < cfg.steps; ++s) {
    LossParts parts = trainer.step();
    fmt.str("");
    fmt << trainer.step_count() << " " << parts.total << " " << parts.cls << " "
        << parts.box;
    emit(fmt.str());
    result.final_loss = parts;
    if (cfg.eval_every > 0 && trainer.step_count() % cfg.eval_every == 0) {
      EvalReport rep = trainer.evaluate_split(cfg.eval_split);
      fmt.str("");
      fmt << trainer.step_count() << " " << rep.map50 << " " << rep.map5095;
      emit(fmt.str());
      result.final_eval = rep;
      result.evaluated = true;
    }
  }
  if (cfg.eval_every > 0 && !result.evaluated) {
    result.final_eval = trainer.evaluate_split(cfg.eval_split);
    result.evaluated = true;
  }
  if (!cfg.checkpoint_dir.empty()) trainer.save(cfg.checkpoint_dir);
  result.steps = trainer.step_count();
  return result;
}

// ---------------------------------------------------------------------------
// Ablation runs
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string name;
  NeckKind neck = NeckKind::pafpn;
  std::set<int> dc_stages;
};

/// One variant per line: `<name> <pafpn|dfpn> <dc stages: "4,5" or "-">`.
inline std::vector<AblationVariant> parse_variants_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("variants: cannot open " + path);
  std::vector<AblationVariant> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    AblationVariant v;
    std::string neck, stages, extra;
    if (!(ls >> v.name >> neck >> stages) || (ls >> extra)) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected '<name> <pafpn|dfpn> <stages|->'");
    }
    if (neck == "pafpn") v.neck = NeckKind::pafpn;
    else if (neck == "dfpn") v.neck = NeckKind::dfpn;
    else throw ConfigError(path + ":" + std::to_string(lineno) + ": bad neck '" + neck + "'");
    if (stages != "-") {
      std::stringstream ss(stages);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        int s;
        try {
          s = std::stoi(tok);
        } catch (const std::exception&) {
          throw ConfigError(path + ":" + std::to_string(lineno) + ": bad stage '" + tok + "'");
        }
        if (s < 2 || s > 5) {
          throw ConfigError(path + ":" + std::to_string(lineno) + ": stage out of 2..5");
        }
        v.dc_stages.insert(s);
      }
    }
    out.push_back(std::move(v));
  }
  return out;
}

inline TrainConfig apply_variant(const TrainConfig& base, const AblationVariant& v) {
  TrainConfig cfg = base;
  cfg.model.neck.kind = v.neck;
  for (StageSpec& s : cfg.model.backbone.stages) {
    s.use_dc = v.dc_stages.count(s.index) > 0;
  }
  return cfg;
}

struct AblationRow {
  std::string name;
  std::size_t param_count = 0;
  LossParts final_loss;
  EvalReport report;
};

/// Trains every variant from the same seed and data; per-variant artifacts
/// (checkpoint, manifest, log) land under workdir/<name>/.
inline std::vector<AblationRow> ablation_run(const TrainConfig& base,
                                             const std::vector<AblationVariant>& variants,
                                             const std::string& workdir,
                                             std::ostream* console = nullptr) {
  namespace fs = std::filesystem;
  std::vector<AblationRow> rows;
  for (const AblationVariant& v : variants) {
    TrainConfig cfg = apply_variant(base, v);
    const fs::path vdir = fs::path(workdir) / v.name;
    fs::create_directories(vdir);
    cfg.checkpoint_dir = (vdir / "checkpoint").string();
    cfg.log_path = (vdir / "train.log").string();
    cfg.eval_every = cfg.eval_every > 0 ? cfg.eval_every : cfg.steps;
    if (console) *console << "variant " << v.name << "\n";
    TrainResult res = train(cfg, nullptr);
    AblationRow row;
    row.name = v.name;
    Model m = build_model(cfg.model, cfg.seed);
    row.param_count = m.param_count();
    {
      std::ofstream mf(vdir / "params_manifest.txt");
      for (const std::string& l : m.manifest()) mf << l << "\n";
    }
    row.final_loss = res.final_loss;
    row.report = res.final_eval;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows,
                               std::size_t num_classes) {
  std::ofstream os(path);
  if (!os) throw IoError("ablate: cannot open " + path);
  os << "variant,params,map50,map5095";
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto& names = defect_class_names();
    os << ",ap50_" << (c < names.size() ? names[c] : "class" + std::to_string(c));
  }
  os << "\n";
  for (const AblationRow& r : rows) {
    os << r.name << "," << r.param_count << "," << r.report.map50 << ","
       << r.report.map5095;
    for (std::size_t c = 0; c < num_classes; ++c) {
      auto it = r.report.per_class_ap.find(static_cast<int>(c));
      if (it == r.report.per_class_ap.end()) os << ",-";
      else os << "," << it->second.front();
    }
    os << "\n";
  }
}

}  // namespace defdet
