#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "defdet/tensor.hpp"

namespace defdet {

struct SvgSeries {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

/// Minimal polyline chart: axes, ticks, one polyline per series. Axis
/// ranges are [0, max] for x and [0, 1] unless data exceeds them.
inline void write_svg_chart(const std::string& path, const std::string& title,
                            const std::string& x_label, const std::string& y_label,
                            const std::vector<SvgSeries>& series) {
  const int w = 640, h = 480, ml = 60, mr = 20, mt = 40, mb = 50;
  double x_max = 1.0, y_max = 1.0;
  for (const SvgSeries& s : series) {
    for (const auto& [x, y] : s.points) {
      x_max = std::max(x_max, x);
      y_max = std::max(y_max, y);
    }
  }
  auto sx = [&](double x) { return ml + x / x_max * (w - ml - mr); };
  auto sy = [&](double y) { return h - mb - y / y_max * (h - mt - mb); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  os << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
     << title << "</text>\n";
  // axes
  os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
     << h - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
     << h - mb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = x_max * i / 5.0, fy = y_max * i / 5.0;
    os << "<line x1=\"" << sx(fx) << "\" y1=\"" << h - mb << "\" x2=\"" << sx(fx)
       << "\" y2=\"" << h - mb + 5 << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << sx(fx) << "\" y=\"" << h - mb + 20
       << "\" text-anchor=\"middle\" font-size=\"11\">" << fx << "</text>\n";
    os << "<line x1=\"" << ml - 5 << "\" y1=\"" << sy(fy) << "\" x2=\"" << ml
       << "\" y2=\"" << sy(fy) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << ml - 8 << "\" y=\"" << sy(fy) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << fy << "</text>\n";
  }
  os << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  os << "<text x=\"16\" y=\"" << (mt + h - mb) / 2
     << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (mt + h - mb) / 2 << ")\">" << y_label << "</text>\n";
  int legend_y = mt + 8;
  for (const SvgSeries& s : series) {
    if (s.points.empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : s.points) os << sx(x) << "," << sy(y) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << w - mr - 4 << "\" y=\"" << legend_y
       << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << s.color << "\">" << s.label
       << "</text>\n";
    legend_y += 14;
  }
  os << "</svg>\n";
  std::ofstream f(path);
  if (!f) throw IoError("write_svg_chart: cannot open " + path);
  f << os.str();
}

inline const std::vector<std::string>& svg_palette() {
  static const std::vector<std::string> colors = {"#1f77b4", "#d62728", "#2ca02c",
                                                  "#9467bd", "#ff7f0e", "#8c564b"};
  return colors;
}

}  // namespace defdet
