#pragma once

// Minimal self-contained SVG line plots for the bundle diagnostics. Series
// can carry a symmetric band (typically a standard error) drawn as a shaded
// region behind the line.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace svgplot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> band;  // optional half-width around y; empty = none
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Range {
  double lo = 0.0, hi = 1.0;
  void widen(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
};

}  // namespace detail

inline std::string line_plot(const std::string& title, const std::string& xlabel,
                             const std::string& ylabel,
                             const std::vector<Series>& series) {
  constexpr double kW = 720, kH = 440;
  constexpr double kL = 64, kR = 150, kT = 40, kB = 52;
  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                   "#9467bd", "#ff7f0e", "#8c564b"};
  constexpr int kColors = 6;

  detail::Range rx, ry;
  bool any = false;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!any) {
        rx.lo = rx.hi = s.x[i];
        ry.lo = ry.hi = s.y[i];
        any = true;
      }
      rx.widen(s.x[i]);
      const double b = i < s.band.size() && std::isfinite(s.band[i]) ? s.band[i] : 0.0;
      ry.widen(s.y[i] - b);
      ry.widen(s.y[i] + b);
    }
  if (!any) {
    rx = {0, 1};
    ry = {0, 1};
  }
  if (rx.hi == rx.lo) {
    rx.lo -= 1;
    rx.hi += 1;
  }
  if (ry.hi == ry.lo) {
    ry.lo -= 1;
    ry.hi += 1;
  }
  const double pad = 0.04 * (ry.hi - ry.lo);
  ry.lo -= pad;
  ry.hi += pad;

  const auto px = [&](double v) {
    return kL + (v - rx.lo) / (rx.hi - rx.lo) * (kW - kL - kR);
  };
  const auto py = [&](double v) {
    return kH - kB - (v - ry.lo) / (ry.hi - ry.lo) * (kH - kT - kB);
  };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         detail::num(kW) + "\" height=\"" + detail::num(kH) +
         "\" viewBox=\"0 0 " + detail::num(kW) + " " + detail::num(kH) +
         "\" font-family=\"sans-serif\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + detail::num(kW / 2) +
         "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + title +
         "</text>\n";

  // Gridlines and tick labels, five divisions per axis.
  for (int i = 0; i <= 5; ++i) {
    const double xv = rx.lo + (rx.hi - rx.lo) * i / 5;
    const double yv = ry.lo + (ry.hi - ry.lo) * i / 5;
    out += "<line x1=\"" + detail::num(px(xv)) + "\" y1=\"" + detail::num(kT) +
           "\" x2=\"" + detail::num(px(xv)) + "\" y2=\"" +
           detail::num(kH - kB) + "\" stroke=\"#e5e5e5\"/>\n";
    out += "<line x1=\"" + detail::num(kL) + "\" y1=\"" + detail::num(py(yv)) +
           "\" x2=\"" + detail::num(kW - kR) + "\" y2=\"" +
           detail::num(py(yv)) + "\" stroke=\"#e5e5e5\"/>\n";
    out += "<text x=\"" + detail::num(px(xv)) + "\" y=\"" +
           detail::num(kH - kB + 18) +
           "\" text-anchor=\"middle\" font-size=\"11\">" + detail::tick(xv) +
           "</text>\n";
    out += "<text x=\"" + detail::num(kL - 6) + "\" y=\"" +
           detail::num(py(yv) + 4) +
           "\" text-anchor=\"end\" font-size=\"11\">" + detail::tick(yv) +
           "</text>\n";
  }
  out += "<rect x=\"" + detail::num(kL) + "\" y=\"" + detail::num(kT) +
         "\" width=\"" + detail::num(kW - kL - kR) + "\" height=\"" +
         detail::num(kH - kT - kB) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  out += "<text x=\"" + detail::num((kL + kW - kR) / 2) + "\" y=\"" +
         detail::num(kH - 12) + "\" text-anchor=\"middle\" font-size=\"13\">" +
         xlabel + "</text>\n";
  out += "<text x=\"16\" y=\"" + detail::num((kT + kH - kB) / 2) +
         "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 " +
         detail::num((kT + kH - kB) / 2) + ")\">" + ylabel + "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const Series& s = series[si];
    const char* color = kPalette[si % kColors];

    if (!s.band.empty()) {
      std::string pts;
      for (size_t i = 0; i < s.x.size(); ++i)
        if (std::isfinite(s.y[i]) && std::isfinite(s.band[i]))
          pts += detail::num(px(s.x[i])) + "," +
                 detail::num(py(s.y[i] + s.band[i])) + " ";
      for (size_t i = s.x.size(); i-- > 0;)
        if (std::isfinite(s.y[i]) && std::isfinite(s.band[i]))
          pts += detail::num(px(s.x[i])) + "," +
                 detail::num(py(s.y[i] - s.band[i])) + " ";
      if (!pts.empty())
        out += "<polygon points=\"" + pts + "\" fill=\"" + color +
               "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
    }

    // Break the polyline at non-finite samples instead of bridging them.
    std::string seg;
    const auto flush = [&] {
      if (!seg.empty())
        out += "<polyline points=\"" + seg + "\" fill=\"none\" stroke=\"" +
               color + "\" stroke-width=\"1.8\"/>\n";
      seg.clear();
    };
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        flush();
        continue;
      }
      seg += detail::num(px(s.x[i])) + "," + detail::num(py(s.y[i])) + " ";
    }
    flush();

    const double ly = kT + 16 + 18 * si;
    out += "<line x1=\"" + detail::num(kW - kR + 10) + "\" y1=\"" +
           detail::num(ly - 4) + "\" x2=\"" + detail::num(kW - kR + 34) +
           "\" y2=\"" + detail::num(ly - 4) + "\" stroke=\"" + color +
           "\" stroke-width=\"2.5\"/>\n";
    out += "<text x=\"" + detail::num(kW - kR + 40) + "\" y=\"" +
           detail::num(ly) + "\" font-size=\"12\">" + s.label + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace svgplot
