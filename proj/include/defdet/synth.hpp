#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "defdet/boxes.hpp"
#include "defdet/config.hpp"
#include "defdet/rng.hpp"
#include "defdet/tensor.hpp"

namespace defdet {

// Class ids are stable: 0 Inkiness (ink traces), 1 Vitium (missing edges or
// corners), 2 Crease (creases and cracks), 3 Defaced (water or oil stains),
// 4 Patch (tape repairs), 5 Signature (seals and stamps).
inline const std::vector<std::string>& defect_class_names() {
  static const std::vector<std::string> names = {"Inkiness", "Vitium", "Crease",
                                                 "Defaced", "Patch", "Signature"};
  return names;
}

struct Image {
  int w = 0, h = 0;
  std::vector<unsigned char> rgb;  // w*h*3, row-major

  Image() = default;
  Image(int w_, int h_) : w(w_), h(h_), rgb(static_cast<std::size_t>(w_) * h_ * 3, 0) {}

  unsigned char* px(int x, int y) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * w + x); }
  const unsigned char* px(int x, int y) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(y) * w + x);
  }
};

// ---------------------------------------------------------------------------
// PPM (P6) image IO
// ---------------------------------------------------------------------------

inline void save_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_ppm: cannot open " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw IoError("save_ppm: write failed for " + path);
}

inline Image load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError("load_ppm: not a P6 file: " + path);
  int w, h, maxval;
  is >> w >> h >> maxval;
  if (!is || w < 1 || h < 1 || maxval != 255) {
    throw IoError("load_ppm: bad header in " + path);
  }
  is.get();  // single whitespace after maxval
  Image img(w, h);
  is.read(reinterpret_cast<char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!is) throw IoError("load_ppm: truncated pixel data in " + path);
  return img;
}

/// (1, 3, H, W) tensor scaled to [0, 1].
inline Tensor image_to_tensor(const Image& img) {
  Tensor t{{1, 3, static_cast<std::size_t>(img.h), static_cast<std::size_t>(img.w)}};
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const unsigned char* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) {
        t.at(0, c, y, x) = p[c] / 255.0;
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Annotation files: one `class_id cx cy w h` line per defect, normalized.
// ---------------------------------------------------------------------------

inline void save_annotations(const std::string& path, const std::vector<BBox>& boxes) {
  std::ofstream os(path);
  if (!os) throw IoError("save_annotations: cannot open " + path);
  os << std::setprecision(17);
  for (const BBox& b : boxes) {
    os << b.class_id << " " << b.cx << " " << b.cy << " " << b.w << " " << b.h << "\n";
  }
}

inline std::vector<BBox> load_annotations(const std::string& path,
                                          int num_classes = 6) {
  std::ifstream is(path);
  if (!is) throw IoError("load_annotations: cannot open " + path);
  std::vector<BBox> boxes;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    BBox b;
    std::string extra;
    if (!(ls >> b.class_id >> b.cx >> b.cy >> b.w >> b.h) || (ls >> extra)) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed annotation '" +
                    line + "'");
    }
    if (b.class_id < 0 || b.class_id >= num_classes) {
      throw IoError(path + ":" + std::to_string(lineno) + ": class id " +
                    std::to_string(b.class_id) + " out of range 0.." +
                    std::to_string(num_classes - 1));
    }
    if (!b.valid()) {
      throw IoError(path + ":" + std::to_string(lineno) + ": box outside [0,1]");
    }
    boxes.push_back(b);
  }
  return boxes;
}

// ---------------------------------------------------------------------------
// Generator spec
// ---------------------------------------------------------------------------

struct GenSpec {
  int image_size = 64;  // divisible by 32
  int min_defects = 1;
  int max_defects = 3;
  std::vector<double> class_weights = {1, 1, 1, 1, 1, 1};  // normalized on validate
  double min_frac = 0.15;  // defect side, fraction of image dimension
  double max_frac = 0.40;
  std::uint64_t seed = 1;

  void validate() {
    if (image_size < 32 || image_size % 32 != 0) {
      throw ConfigError("genspec: image_size must be a positive multiple of 32");
    }
    if (min_defects < 0 || max_defects < min_defects) {
      throw ConfigError("genspec: need 0 <= min_defects <= max_defects");
    }
    if (class_weights.size() != 6) {
      throw ConfigError("genspec: class_weights must list 6 values");
    }
    double sum = 0.0;
    for (double w : class_weights) {
      if (w < 0.0) throw ConfigError("genspec: class weights must be non-negative");
      sum += w;
    }
    if (sum <= 0.0) throw ConfigError("genspec: class weights sum to zero");
    for (double& w : class_weights) w /= sum;
    if (!(min_frac > 0.0) || min_frac > max_frac || max_frac > 0.9) {
      throw ConfigError("genspec: need 0 < min_frac <= max_frac <= 0.9");
    }
  }

  static GenSpec from_file(const std::string& path) {
    KvConfig kv = KvConfig::from_file(path);
    return from_kv(kv);
  }

  static GenSpec from_kv(KvConfig& kv) {
    GenSpec s;
    s.image_size = kv.get_int("image_size", s.image_size);
    s.min_defects = kv.get_int("min_defects", s.min_defects);
    s.max_defects = kv.get_int("max_defects", s.max_defects);
    s.class_weights = kv.get_double_list("class_weights", s.class_weights);
    s.min_frac = kv.get_double("min_frac", s.min_frac);
    s.max_frac = kv.get_double("max_frac", s.max_frac);
    s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<int>(s.seed)));
    kv.reject_unknown_keys();
    s.validate();
    return s;
  }

  std::string echo() const {
    std::ostringstream os;
    os << "image_size = " << image_size << "\n";
    os << "min_defects = " << min_defects << "\n";
    os << "max_defects = " << max_defects << "\n";
    os << "class_weights = ";
    for (std::size_t i = 0; i < class_weights.size(); ++i) {
      if (i) os << ",";
      os << class_weights[i];
    }
    os << "\nmin_frac = " << min_frac << "\n";
    os << "max_frac = " << max_frac << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Painting
// ---------------------------------------------------------------------------

namespace paint {

struct Extent {
  int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
  bool empty() const { return x1 < x0; }
  void grow(int x, int y) {
    x0 = std::min(x0, x);
    y0 = std::min(y0, y);
    x1 = std::max(x1, x);
    y1 = std::max(y1, y);
  }
};

struct Brush {
  Image& img;
  Extent ext;

  void set(int x, int y, int r, int g, int b) {
    if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
    unsigned char* p = img.px(x, y);
    p[0] = static_cast<unsigned char>(std::clamp(r, 0, 255));
    p[1] = static_cast<unsigned char>(std::clamp(g, 0, 255));
    p[2] = static_cast<unsigned char>(std::clamp(b, 0, 255));
    ext.grow(x, y);
  }

  void shift(int x, int y, int dr, int dg, int db) {
    if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
    unsigned char* p = img.px(x, y);
    set(x, y, p[0] + dr, p[1] + dg, p[2] + db);
  }

  void fill_rect(int x0, int y0, int x1, int y1, int r, int g, int b) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, r, g, b);
  }

  void disc(double cx, double cy, double rad, int r, int g, int b) {
    for (int y = static_cast<int>(cy - rad); y <= static_cast<int>(cy + rad) + 1; ++y)
      for (int x = static_cast<int>(cx - rad); x <= static_cast<int>(cx + rad) + 1; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad) set(x, y, r, g, b);
  }

  void line(double ax, double ay, double bx, double by, double thick, int r, int g, int b) {
    const double len = std::max(1.0, std::hypot(bx - ax, by - ay));
    const int steps = static_cast<int>(len * 2) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      disc(ax + t * (bx - ax), ay + t * (by - ay), thick / 2.0, r, g, b);
    }
  }
};

/// Paper-like page: warm base tone with a soft gradient, light noise and
/// faint rule lines.
inline void render_background(Image& img, Rng& rng) {
  const int base = rng.uniform_int(225, 240);
  const double gx = rng.uniform(-8.0, 8.0);
  const double gy = rng.uniform(-8.0, 8.0);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const double grad = gx * x / img.w + gy * y / img.h;
      const int noise = rng.uniform_int(-5, 5);
      const int v = std::clamp(base + static_cast<int>(grad) + noise, 0, 255);
      unsigned char* p = img.px(x, y);
      p[0] = static_cast<unsigned char>(v);
      p[1] = static_cast<unsigned char>(v);
      p[2] = static_cast<unsigned char>(std::clamp(v - 6, 0, 255));  // slight warm cast
    }
  }
  const int rule_gap = rng.uniform_int(10, 18);
  const int rule_shift = rng.uniform_int(0, rule_gap - 1);
  for (int y = rule_shift; y < img.h; y += rule_gap) {
    for (int x = 0; x < img.w; ++x) {
      unsigned char* p = img.px(x, y);
      p[0] = static_cast<unsigned char>(std::max(0, p[0] - 10));
      p[1] = static_cast<unsigned char>(std::max(0, p[1] - 10));
      p[2] = static_cast<unsigned char>(std::max(0, p[2] - 4));
    }
  }
}

// Each renderer paints inside the allotted square (x0, y0, side) and the
// brush extent becomes the annotation box.

inline void draw_inkiness(Brush& br, Rng& rng, int x0, int y0, int side) {
  const int r = rng.uniform_int(10, 40), g = rng.uniform_int(10, 40);
  const int b = rng.uniform_int(40, 90);
  const double thick = std::max(1.0, side / 10.0);
  const int strokes = rng.uniform_int(2, 4);
  double px = x0, py = y0 + rng.uniform(0.0, side - 1.0);
  for (int s = 0; s < strokes; ++s) {
    const double nx = x0 + rng.uniform(0.0, side - 1.0);
    const double ny = y0 + rng.uniform(0.0, side - 1.0);
    br.line(px, py, nx, ny, thick, r, g, b);
    px = nx;
    py = ny;
  }
  br.line(px, py, x0 + side - 1, y0 + rng.uniform(0.0, side - 1.0), thick, r, g, b);
}

inline void draw_vitium(Brush& br, Rng& rng, int x0, int y0, int side, int img_w,
                        int img_h) {
  // Missing material at the page border: a dark notch carved inward.
  const int v = rng.uniform_int(35, 55);
  const int edge = rng.uniform_int(0, 3);  // 0 top, 1 bottom, 2 left, 3 right
  for (int i = 0; i < side; ++i) {
    // Notch depth follows a half-ellipse profile along the edge.
    const double t = (i + 0.5) / side * 2.0 - 1.0;
    const int depth = static_cast<int>(std::sqrt(std::max(0.0, 1.0 - t * t)) * side * 0.8) + 1;
    for (int d = 0; d < depth; ++d) {
      switch (edge) {
        case 0: br.set(x0 + i, d, v, v, v + 5); break;
        case 1: br.set(x0 + i, img_h - 1 - d, v, v, v + 5); break;
        case 2: br.set(d, y0 + i, v, v, v + 5); break;
        default: br.set(img_w - 1 - d, y0 + i, v, v, v + 5); break;
      }
    }
  }
}

inline void draw_crease(Brush& br, Rng& rng, int x0, int y0, int side) {
  // Thin high-contrast fold: a dark line with a bright highlight beside it.
  const bool diag = rng.uniform() < 0.5;
  double ax, ay, bx, by;
  if (diag) {
    ax = x0;
    ay = y0 + rng.uniform(0.0, side * 0.3);
    bx = x0 + side - 1;
    by = y0 + side - 1 - rng.uniform(0.0, side * 0.3);
  } else {
    ax = x0 + rng.uniform(0.0, side * 0.3);
    ay = y0;
    bx = x0 + side - 1 - rng.uniform(0.0, side * 0.3);
    by = y0 + side - 1;
  }
  const double thick = std::max(1.0, side / 16.0);
  br.line(ax, ay, bx, by, thick, 90, 88, 80);
  br.line(ax + 1, ay + 1, bx + 1, by + 1, thick, 252, 252, 248);
}

inline void draw_defaced(Brush& br, Rng& rng, int x0, int y0, int side) {
  // Deliberately low contrast: the stain only darkens the paper a little.
  const int delta = rng.uniform_int(10, 20);
  const double cx = x0 + side / 2.0, cy = y0 + side / 2.0;
  const double rx = side / 2.0, ry = side / 2.0 * rng.uniform(0.7, 1.0);
  const double tilt = rng.uniform(0.0, M_PI);
  const double ct = std::cos(tilt), st = std::sin(tilt);
  for (int y = y0; y < y0 + side; ++y) {
    for (int x = x0; x < x0 + side; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (dx * ct + dy * st) / rx;
      const double v = (-dx * st + dy * ct) / ry;
      if (u * u + v * v <= 1.0) br.shift(x, y, -delta, -delta, -delta / 2);
    }
  }
}

inline void draw_patch(Brush& br, Rng& rng, int x0, int y0, int side) {
  // Repair tape: bright rectangle with a visible border.
  const int wr = side - 1;
  const int hr = std::max(2, static_cast<int>(side * rng.uniform(0.5, 1.0)) - 1);
  const int yy0 = y0 + (side - 1 - hr) / 2;
  br.fill_rect(x0, yy0, x0 + wr, yy0 + hr, 250, 248, 240);
  const int bw = std::max(1, side / 12);
  for (int t = 0; t < bw; ++t) {
    for (int x = x0; x <= x0 + wr; ++x) {
      br.set(x, yy0 + t, 168, 158, 130);
      br.set(x, yy0 + hr - t, 168, 158, 130);
    }
    for (int y = yy0; y <= yy0 + hr; ++y) {
      br.set(x0 + t, y, 168, 158, 130);
      br.set(x0 + wr - t, y, 168, 158, 130);
    }
  }
}

inline void draw_signature(Brush& br, Rng& rng, int x0, int y0, int side) {
  // Dark square stamp: thick ring plus an inner bar motif, spanning the
  // full allotted square.
  const int r = rng.uniform_int(90, 140), g = rng.uniform_int(20, 45);
  const int b = rng.uniform_int(20, 45);
  const int x1 = x0 + side - 1, y1 = y0 + side - 1;
  const int bw = std::max(1, side / 7);
  for (int t = 0; t < bw; ++t) {
    for (int x = x0; x <= x1; ++x) {
      br.set(x, y0 + t, r, g, b);
      br.set(x, y1 - t, r, g, b);
    }
    for (int y = y0; y <= y1; ++y) {
      br.set(x0 + t, y, r, g, b);
      br.set(x1 - t, y, r, g, b);
    }
  }
  const int mid = y0 + side / 2;
  const int inset = bw + std::max(1, side / 10);
  for (int t = -bw / 2; t <= bw / 2; ++t) {
    for (int x = x0 + inset; x <= x1 - inset; ++x) br.set(x, mid + t, r, g, b);
  }
}

}  // namespace paint

// ---------------------------------------------------------------------------
// Image + annotation synthesis
// ---------------------------------------------------------------------------

struct GeneratedImage {
  Image image;
  std::vector<BBox> boxes;
};

/// Deterministic per index: the RNG stream is derived from (seed, index),
/// so images are independent of generation order.
inline GeneratedImage generate_image(const GenSpec& spec, int index) {
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  GeneratedImage out;
  out.image = Image(spec.image_size, spec.image_size);
  paint::render_background(out.image, rng);
  const int S = spec.image_size;
  const int n_defects = rng.uniform_int(spec.min_defects, spec.max_defects);
  for (int d = 0; d < n_defects; ++d) {
    const int cls = static_cast<int>(rng.weighted_choice(spec.class_weights));
    const double frac = rng.log_uniform(spec.min_frac, spec.max_frac);
    const int side = std::max(3, static_cast<int>(frac * S));
    const int place_max = std::max(1, S - side - 2);
    paint::Brush br{out.image, {}};
    if (cls == 1) {
      // Vitium sits on a border: the along-edge position is free, the
      // cross-edge position is pinned by the renderer.
      const int pos = rng.uniform_int(1, place_max);
      paint::draw_vitium(br, rng, pos, pos, side, S, S);
    } else {
      const int x0 = rng.uniform_int(1, place_max);
      const int y0 = rng.uniform_int(1, place_max);
      switch (cls) {
        case 0: paint::draw_inkiness(br, rng, x0, y0, side); break;
        case 2: paint::draw_crease(br, rng, x0, y0, side); break;
        case 3: paint::draw_defaced(br, rng, x0, y0, side); break;
        case 4: paint::draw_patch(br, rng, x0, y0, side); break;
        default: paint::draw_signature(br, rng, x0, y0, side); break;
      }
    }
    if (br.ext.empty()) continue;
    BBox b;
    b.class_id = cls;
    b.cx = (br.ext.x0 + br.ext.x1 + 1) / 2.0 / S;
    b.cy = (br.ext.y0 + br.ext.y1 + 1) / 2.0 / S;
    b.w = (br.ext.x1 - br.ext.x0 + 1) / static_cast<double>(S);
    b.h = (br.ext.y1 - br.ext.y0 + 1) / static_cast<double>(S);
    out.boxes.push_back(b);
  }
  return out;
}

inline std::string image_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

/// Split by position: first 70% train, next 15% val, rest test.
inline std::string split_of(int index, int count) {
  const int n_train = static_cast<int>(count * 0.7);
  const int n_val = static_cast<int>(count * 0.15);
  if (index < n_train) return "train";
  if (index < n_train + n_val) return "val";
  return "test";
}

/// Writes images/NNNNNN.ppm, labels/NNNNNN.txt, manifest.txt (split
/// assignments) and genspec.txt (spec echo). Returns per-class counts.
inline std::map<int, int> generate_dataset(const GenSpec& spec, int count,
                                           const std::string& out_dir) {
  if (count < 0) throw ConfigError("generate_dataset: count must be >= 0");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "labels", ec);
  if (ec) throw IoError("generate_dataset: cannot create " + out_dir);
  std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
  if (!manifest) throw IoError("generate_dataset: cannot write manifest in " + out_dir);
  std::map<int, int> class_counts;
  for (int i = 0; i < count; ++i) {
    GeneratedImage gi = generate_image(spec, i);
    const std::string stem = image_stem(i);
    save_ppm((fs::path(out_dir) / "images" / (stem + ".ppm")).string(), gi.image);
    save_annotations((fs::path(out_dir) / "labels" / (stem + ".txt")).string(), gi.boxes);
    manifest << stem << " " << split_of(i, count) << "\n";
    for (const BBox& b : gi.boxes) ++class_counts[b.class_id];
  }
  std::ofstream echo(fs::path(out_dir) / "genspec.txt");
  echo << spec.echo();
  return class_counts;
}

/// manifest.txt entries: stem -> split.
inline std::vector<std::pair<std::string, std::string>> load_manifest(
    const std::string& dataset_dir) {
  const std::string path = (std::filesystem::path(dataset_dir) / "manifest.txt").string();
  std::ifstream is(path);
  if (!is) throw IoError("load_manifest: cannot open " + path);
  std::vector<std::pair<std::string, std::string>> entries;
  std::string stem, split;
  while (is >> stem >> split) entries.push_back({stem, split});
  return entries;
}

}  // namespace defdet
