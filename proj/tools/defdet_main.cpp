// defdet: desk-scale surface-defect detection toolkit.
//
// Subcommands: gen-data, train, eval, infer, gradcheck, ablate.
// Exit codes: 0 ok, 1 failed check, 2 invalid config/usage, 3 IO error,
// 4 numeric divergence.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "defdet/eval.hpp"
#include "defdet/gradsuite.hpp"
#include "defdet/model.hpp"
#include "defdet/svg.hpp"
#include "defdet/synth.hpp"
#include "defdet/trainer.hpp"

namespace fs = std::filesystem;
using namespace defdet;

namespace {

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir, int count) {
  GenSpec spec = GenSpec::from_file(spec_path);
  std::map<int, int> counts = generate_dataset(spec, count, out_dir);
  int total = 0;
  for (const auto& [c, n] : counts) total += n;
  std::cout << "dataset: " << out_dir << "\nimages: " << count
            << "\ndefects: " << total << "\n";
  for (std::size_t c = 0; c < defect_class_names().size(); ++c) {
    const int n = counts.count(static_cast<int>(c)) ? counts.at(static_cast<int>(c)) : 0;
    std::cout << "  " << defect_class_names()[c] << ": " << n << "\n";
  }
  return 0;
}

int cmd_train(const std::string& config_path) {
  TrainConfig cfg = TrainConfig::from_file(config_path);
  TrainResult res = train(cfg, &std::cout);
  std::cout << "done: " << res.steps << " steps, final loss " << res.final_loss.total
            << " (cls " << res.final_loss.cls << ", box " << res.final_loss.box << ")\n";
  if (res.evaluated) {
    std::cout << "eval[" << cfg.eval_split << "]: mAP@50 " << res.final_eval.map50
              << ", mAP@50:95 " << res.final_eval.map5095 << "\n";
  }
  if (!cfg.checkpoint_dir.empty()) {
    std::cout << "checkpoint: " << cfg.checkpoint_dir << "\n";
  }
  return 0;
}

std::map<int, std::vector<Detection>> read_detections_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("detections: cannot open " + path);
  std::map<int, std::vector<Detection>> dets;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    int image_id;
    Detection d;
    if (!(ls >> image_id >> d.bbox.class_id >> d.score >> d.bbox.cx >> d.bbox.cy >>
          d.bbox.w >> d.bbox.h)) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed detection line");
    }
    dets[image_id].push_back(d);
  }
  return dets;
}

void write_detections_file(const std::string& path,
                           const std::map<int, std::vector<Detection>>& dets) {
  std::ofstream os(path);
  if (!os) throw IoError("detections: cannot open " + path);
  os << std::setprecision(17);
  for (const auto& [img, list] : dets) {
    for (const Detection& d : list) {
      os << img << " " << d.bbox.class_id << " " << d.score << " " << d.bbox.cx << " "
         << d.bbox.cy << " " << d.bbox.w << " " << d.bbox.h << "\n";
    }
  }
}

int cmd_eval(const std::string& checkpoint, const std::string& detections_path,
             const std::string& data_dir, const std::string& split,
             const std::string& out_path, bool svg, const DecodeParams& dp,
             double iou_max) {
  if (checkpoint.empty() == detections_path.empty()) {
    throw ConfigError("eval: pass exactly one of --checkpoint or --detections");
  }
  std::map<int, std::vector<BBox>> gts;
  std::map<int, std::vector<Detection>> dets;
  std::vector<std::pair<std::string, std::string>> manifest = load_manifest(data_dir);
  Model model;
  const bool run_model = !checkpoint.empty();
  if (run_model) model = load_checkpoint(checkpoint);
  const std::size_t num_classes = run_model ? model.cfg.head.num_classes : 6;
  for (const auto& [stem, s] : manifest) {
    if (s != split) continue;
    const int id = std::stoi(stem);
    gts[id] = load_annotations((fs::path(data_dir) / "labels" / (stem + ".txt")).string(),
                               static_cast<int>(num_classes));
    if (run_model) {
      Tensor img = image_to_tensor(
          load_ppm((fs::path(data_dir) / "images" / (stem + ".ppm")).string()));
      dets[id] = decode(model.forward(img), 0, dp);
    }
  }
  if (gts.empty()) throw IoError("eval: split '" + split + "' of " + data_dir + " is empty");
  if (!run_model) {
    for (auto& [id, list] : read_detections_file(detections_path)) {
      if (gts.count(id)) dets[id] = list;
    }
  }
  EvalReport rep = evaluate(dets, gts, num_classes, iou_max);
  const std::string text = format_report(rep, defect_class_names());
  std::cout << text;
  if (!out_path.empty()) {
    fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(out_path);
    if (!os) throw IoError("eval: cannot open " + out_path);
    os << text;
    write_pr_csv(out_path + "_pr.csv", rep);
    if (svg) {
      std::vector<SvgSeries> series;
      std::size_t ci = 0;
      for (const auto& [c, points] : rep.pr_curves) {
        SvgSeries s;
        s.label = c < static_cast<int>(defect_class_names().size())
                      ? defect_class_names()[c]
                      : "class" + std::to_string(c);
        s.color = svg_palette()[ci++ % svg_palette().size()];
        s.points = points;
        series.push_back(std::move(s));
      }
      write_svg_chart(out_path + "_pr.svg", "precision vs recall (IoU 0.50)", "recall",
                      "precision", series);
    }
  }
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& image_path,
              const std::string& out_path, const DecodeParams& dp) {
  Model model = load_checkpoint(checkpoint);
  Image img = load_ppm(image_path);
  Tensor t = image_to_tensor(img);
  std::vector<Detection> dets = decode(model.forward(t), 0, dp);
  int image_id = 0;
  try {
    image_id = std::stoi(fs::path(image_path).stem().string());
  } catch (const std::exception&) {
    image_id = 0;
  }
  write_detections_file(out_path, {{image_id, dets}});
  std::cout << dets.size() << " detections -> " << out_path << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, bool flip_doffset_sign) {
  GradSuiteOptions opt;
  opt.seed = seed;
  opt.flip_doffset_sign = flip_doffset_sign;
  std::vector<GradCheckResult> results = run_gradcheck_suite(opt);
  std::string failed_module;
  std::cout << std::scientific << std::setprecision(3);
  for (const GradCheckResult& r : results) {
    std::cout << (r.pass ? "  ok  " : " FAIL ") << std::left << std::setw(24) << r.group
              << " max rel err " << r.max_err << "\n";
    if (!r.pass && failed_module.empty()) failed_module = r.module;
  }
  if (!failed_module.empty()) {
    std::cout << "gradcheck FAILED in module " << failed_module << "\n";
    return 1;
  }
  std::cout << "gradcheck passed (" << results.size() << " groups, seed " << seed << ")\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& variants_path,
               const std::string& out_csv, std::string workdir) {
  TrainConfig base = TrainConfig::from_file(config_path);
  std::vector<AblationVariant> variants = parse_variants_file(variants_path);
  if (variants.empty()) throw ConfigError("ablate: variants file lists no variants");
  if (workdir.empty()) workdir = out_csv + ".work";
  std::vector<AblationRow> rows = ablation_run(base, variants, workdir, &std::cout);
  fs::path p(out_csv);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_ablation_csv(out_csv, rows, base.model.head.num_classes);
  std::cout << "wrote " << rows.size() << " rows to " << out_csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"defdet: desk-scale surface-defect detection toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, config_path, checkpoint, data_dir, image_path;
  std::string detections_path, out_path, variants_path, workdir, split = "test";
  int count = 200;
  bool svg = false, flip_doffset = false;
  std::uint64_t seed = 1;
  DecodeParams dp;
  double iou_max = 0.95;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic defect dataset");
  gen->add_option("--spec", spec_path, "generator spec (key = value file)")->required();
  gen->add_option("--out", out_dir, "output dataset directory")->required();
  gen->add_option("--count", count, "number of images");

  CLI::App* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "training config (key = value file)")->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint or detections file");
  ev->add_option("--checkpoint", checkpoint, "checkpoint directory");
  ev->add_option("--detections", detections_path, "detections file to score instead");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "dataset split (default test)");
  ev->add_option("--out", out_path, "report file; PR CSV lands beside it");
  ev->add_flag("--svg", svg, "emit PR-curve SVG beside the report");
  ev->add_option("--score-thresh", dp.score_thresh, "decode score threshold");
  ev->add_option("--nms-iou", dp.iou_thresh, "NMS IoU threshold");
  ev->add_option("--iou-max", iou_max, "upper bound of the AP IoU sweep (0.95 or 0.90)");

  CLI::App* in = app.add_subcommand("infer", "run detection on one image");
  in->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  in->add_option("--image", image_path, "input image (PPM P6)")->required();
  in->add_option("--out", out_path, "detections output file")->required();
  in->add_option("--score-thresh", dp.score_thresh, "decode score threshold");
  in->add_option("--nms-iou", dp.iou_thresh, "NMS IoU threshold");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient self-check");
  gc->add_option("--seed", seed, "random seed");
  gc->add_flag("--flip-doffset-sign", flip_doffset)->group("");  // test hook

  CLI::App* ab = app.add_subcommand("ablate", "train and compare model variants");
  ab->add_option("--config", config_path, "base training config")->required();
  ab->add_option("--variants", variants_path, "variants file: name neck dc_stages")->required();
  ab->add_option("--out", out_path, "output CSV")->required();
  ab->add_option("--workdir", workdir, "per-variant artifact directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec_path, out_dir, count);
    if (tr->parsed()) return cmd_train(config_path);
    if (ev->parsed())
      return cmd_eval(checkpoint, detections_path, data_dir, split, out_path, svg, dp,
                      iou_max);
    if (in->parsed()) return cmd_infer(checkpoint, image_path, out_path, dp);
    if (gc->parsed()) return cmd_gradcheck(seed, flip_doffset);
    if (ab->parsed()) return cmd_ablate(config_path, variants_path, out_path, workdir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
