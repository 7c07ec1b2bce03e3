#pragma once

// SVG rendering of maze runs: walls, dataset trajectories shaded light to
// dark along time (the dark end is the direction of motion), generated
// branches in a distinct color with their condition windows highlighted, and
// the goal marked with a star.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "bg/common.hpp"
#include "bg/dataset.hpp"
#include "bg/maze.hpp"

namespace bg::svg {

struct BranchOverlay {
  std::vector<env::Vec2> condition;  // anchor window, drawn as the lead-in
  std::vector<env::Vec2> branch;     // generated continuation
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

// linear blend between two hex colors, t in [0, 1]
inline std::string blend(int r0, int g0, int b0, int r1, int g1, int b1, double t) {
  const auto mix = [t](int a, int b) {
    return static_cast<int>(a + (b - a) * t + 0.5);
  };
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", mix(r0, r1), mix(g0, g1),
                mix(b0, b1));
  return buf;
}

inline std::string points_attr(const std::vector<env::Vec2>& pts) {
  std::string out;
  for (size_t i = 0; i < pts.size(); ++i) {
    if (i) out += " ";
    out += num(pts[i].x) + "," + num(pts[i].y);
  }
  return out;
}

inline std::string polyline(const std::string& cls, const std::vector<env::Vec2>& pts,
                            const std::string& stroke, double width,
                            double opacity = 1.0) {
  std::string out = "<polyline class=\"" + cls + "\" points=\"" + points_attr(pts) +
                    "\" fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"" +
                    num(width) + "\"";
  if (opacity < 1.0) out += " stroke-opacity=\"" + num(opacity) + "\"";
  out += " stroke-linecap=\"round\" stroke-linejoin=\"round\"/>\n";
  return out;
}

inline std::string goal_star(const env::Vec2& center, double radius) {
  // five-pointed star: alternate outer and inner vertices
  std::vector<env::Vec2> pts;
  const double inner = radius * 0.382;
  for (int i = 0; i < 10; ++i) {
    const double r = (i % 2 == 0) ? radius : inner;
    const double a = -1.5707963267948966 + i * 0.6283185307179586;
    pts.push_back(env::Vec2{center.x + r * std::cos(a), center.y + r * std::sin(a)});
  }
  std::string d = "M " + num(pts[0].x) + " " + num(pts[0].y);
  for (size_t i = 1; i < pts.size(); ++i)
    d += " L " + num(pts[i].x) + " " + num(pts[i].y);
  d += " Z";
  return "<path class=\"goal\" d=\"" + d +
         "\" fill=\"#f5b301\" stroke=\"#7a5800\" stroke-width=\"0.04\"/>\n";
}

}  // namespace detail

// Renders the full figure. Trajectory polylines are chunked so the stroke
// color can step from light to dark along the time axis.
inline std::string render_svg(const env::MazeSpec& spec, const data::Dataset& dataset,
                              const std::vector<BranchOverlay>& branches) {
  using namespace detail;
  const double w = spec.cols() * spec.cell;
  const double h = spec.rows() * spec.cell;
  const int px = 80;

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " + num(w) + " " +
         num(h) + "\" width=\"" + std::to_string(int(spec.cols()) * px) +
         "\" height=\"" + std::to_string(int(spec.rows()) * px) + "\">\n";
  out += "<rect class=\"bg\" x=\"0\" y=\"0\" width=\"" + num(w) + "\" height=\"" +
         num(h) + "\" fill=\"#fbfaf7\"/>\n";

  for (size_t r = 0; r < spec.rows(); ++r)
    for (size_t c = 0; c < spec.cols(); ++c)
      if (spec.walls[r][c])
        out += "<rect class=\"wall\" x=\"" + num(c * spec.cell) + "\" y=\"" +
               num(r * spec.cell) + "\" width=\"" + num(spec.cell) + "\" height=\"" +
               num(spec.cell) + "\" fill=\"#2b3440\"/>\n";

  // dataset trajectories, light-to-dark blue along time
  for (size_t pos : dataset.ordered()) {
    const data::Trajectory& traj = dataset.trajectories[pos];
    const size_t T = traj.length();
    if (T < 2) continue;
    const size_t chunk = 6;
    for (size_t i = 0; i + 1 < T; i += chunk) {
      const size_t end = std::min(i + chunk, T - 1);
      std::vector<env::Vec2> pts;
      for (size_t k = i; k <= end; ++k)
        pts.push_back(env::Vec2{traj.states.at(k, 0), traj.states.at(k, 1)});
      const double t = double(i + end) / 2.0 / double(T - 1);
      out += polyline("traj", pts, blend(0xc8, 0xdc, 0xf0, 0x0a, 0x30, 0x6b, t),
                      0.05, 0.75);
    }
  }

  for (const BranchOverlay& b : branches) {
    if (b.condition.size() >= 2)
      out += polyline("condition", b.condition, "#1e9e4a", 0.09);
    if (b.branch.size() >= 2) out += polyline("branch", b.branch, "#d93025", 0.09);
  }

  out += goal_star(spec.goal, spec.goal_radius);
  out += "</svg>\n";
  return out;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_file: cannot open '" + path + "'");
  out << content;
  require(out.good(), "write_file: write failed for '" + path + "'");
}

}  // namespace bg::svg
