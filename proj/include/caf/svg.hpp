#pragma once

// SVG 1.1 rendering of 2-D couplings and sampled trajectories.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "caf/datasets.hpp"
#include "caf/error.hpp"
#include "caf/sampling.hpp"

namespace caf {

struct PlotOptions {
  double size = 800.0;
  double margin = 40.0;
  bool draw_chords = true;
  std::string title;
};

/// Path stroke color for an initial-velocity scale: blue at h <= 0.5, red at h >= 2.
inline std::string h_color(double h) {
  const double s = std::clamp((h - 0.5) / 1.5, 0.0, 1.0);
  const std::array<double, 3> lo{40, 70, 200}, hi{210, 40, 40};
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(lo[0] + s * (hi[0] - lo[0]))),
                static_cast<int>(std::lround(lo[1] + s * (hi[1] - lo[1]))),
                static_cast<int>(std::lround(lo[2] + s * (hi[2] - lo[2]))));
  return buf;
}

namespace detail {

class SvgFrame {
 public:
  SvgFrame(double xmin, double xmax, double ymin, double ymax, const PlotOptions& opt) : opt_(opt) {
    const double span = std::max({xmax - xmin, ymax - ymin, 1e-9});
    scale_ = (opt.size - 2.0 * opt.margin) / span;
    cx_ = 0.5 * (xmin + xmax);
    cy_ = 0.5 * (ymin + ymax);
  }
  double x(double v) const { return 0.5 * opt_.size + (v - cx_) * scale_; }
  double y(double v) const { return 0.5 * opt_.size - (v - cy_) * scale_; }

 private:
  const PlotOptions& opt_;
  double scale_ = 1.0, cx_ = 0.0, cy_ = 0.0;
};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Source points, target points, x0 -> x1 chords and sampled paths.
inline void plot_trajectories(const std::vector<TrajectoryLog>& logs, const Coupling& coupling, std::ostream& os,
                              const PlotOptions& opt = {}) {
  if (!coupling.empty() && coupling.dim() != 2) throw ShapeError("plot: coupling must be 2-D");
  for (const auto& log : logs)
    for (const auto& p : log.points)
      if (p.size() != 2) throw ShapeError("plot: trajectories must be 2-D");

  double xmin = -1, xmax = 1, ymin = -1, ymax = 1;
  bool first = true;
  auto grow = [&](const Vec& p) {
    if (!p.allFinite()) return;
    if (first) {
      xmin = xmax = p(0);
      ymin = ymax = p(1);
      first = false;
    }
    xmin = std::min(xmin, p(0));
    xmax = std::max(xmax, p(0));
    ymin = std::min(ymin, p(1));
    ymax = std::max(ymax, p(1));
  };
  for (const auto& pr : coupling.pairs) {
    grow(pr.x0);
    grow(pr.x1);
  }
  for (const auto& log : logs)
    for (const auto& p : log.points) grow(p);
  const detail::SvgFrame f(xmin, xmax, ymin, ymax, opt);
  using detail::fmt;

  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << fmt(opt.size) << "\" height=\""
     << fmt(opt.size) << "\" viewBox=\"0 0 " << fmt(opt.size) << " " << fmt(opt.size) << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty())
    os << "<text x=\"" << fmt(opt.margin) << "\" y=\"" << fmt(0.6 * opt.margin)
       << "\" font-family=\"sans-serif\" font-size=\"14\">" << detail::xml_escape(opt.title) << "</text>\n";

  if (opt.draw_chords) {
    os << "<g id=\"chords\" stroke=\"#bbbbbb\" stroke-width=\"0.5\" stroke-dasharray=\"3,3\">\n";
    for (const auto& pr : coupling.pairs)
      os << "<line x1=\"" << fmt(f.x(pr.x0(0))) << "\" y1=\"" << fmt(f.y(pr.x0(1))) << "\" x2=\"" << fmt(f.x(pr.x1(0)))
         << "\" y2=\"" << fmt(f.y(pr.x1(1))) << "\"/>\n";
    os << "</g>\n";
  }
  os << "<g id=\"sources\" fill=\"#555555\">\n";
  for (const auto& pr : coupling.pairs)
    os << "<circle cx=\"" << fmt(f.x(pr.x0(0))) << "\" cy=\"" << fmt(f.y(pr.x0(1))) << "\" r=\"2\"/>\n";
  os << "</g>\n<g id=\"targets\" fill=\"#e69f00\">\n";
  for (const auto& pr : coupling.pairs)
    os << "<circle cx=\"" << fmt(f.x(pr.x1(0))) << "\" cy=\"" << fmt(f.y(pr.x1(1))) << "\" r=\"2\"/>\n";
  os << "</g>\n<g id=\"paths\" fill=\"none\" stroke-width=\"1\">\n";
  std::map<double, std::string> legend;
  for (const auto& log : logs) {
    const auto color = h_color(log.h);
    legend.emplace(log.h, color);
    os << "<polyline stroke=\"" << color << "\" points=\"";
    for (std::size_t k = 0; k < log.points.size(); ++k) {
      if (!log.points[k].allFinite()) continue;
      os << (k ? " " : "") << fmt(f.x(log.points[k](0))) << "," << fmt(f.y(log.points[k](1)));
    }
    os << "\"/>\n";
  }
  os << "</g>\n";
  if (!legend.empty()) {
    os << "<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
    double y = opt.size - opt.margin * 0.4;
    for (const auto& [h, color] : legend) {
      os << "<text x=\"" << fmt(opt.size - 4 * opt.margin) << "\" y=\"" << fmt(y) << "\" fill=\"" << color
         << "\">h = " << fmt(h) << "</text>\n";
      y -= 16;
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
}

inline void plot_trajectories(const std::vector<TrajectoryLog>& logs, const Coupling& coupling,
                              const std::string& path, const PlotOptions& opt = {}) {
  std::ostringstream os;
  plot_trajectories(logs, coupling, os, opt);
  const auto s = os.str();
  detail::write_file(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

}  // namespace caf
