#pragma once

// SVG charts written as plain markup: KL against iteration with a min/max
// band, and histogram panels from evaluation reports. Output depends only
// on the input rows.

#include "error.hpp"
#include "gan.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pcgan::plot {

//! mean / min / max of a set of KL values.
struct Band
{
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;

  static Band from_values(const std::vector<double>& v)
  {
    if (v.empty())
      throw UsageError("band of an empty value set");
    Band b{ 0.0, v.front(), v.front() };
    for (double x : v) {
      b.mean += x;
      b.min = std::min(b.min, x);
      b.max = std::max(b.max, x);
    }
    b.mean /= static_cast<double>(v.size());
    return b;
  }
};

namespace detail {

inline std::string
num(double v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline const char*
color(std::size_t i)
{
  static const char* palette[] = { "#1f77b4", "#d62728", "#2ca02c",
                                   "#9467bd", "#ff7f0e", "#8c564b" };
  return palette[i % 6];
}

inline std::string
escape(const std::string& s)
{
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

// Plot area inside an SVG, mapping data coordinates to pixels.
struct Frame
{
  double left, top, width, height;
  double x0, x1, y0, y1;
  bool log_y = false;

  double px(double x) const
  {
    return left + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * width;
  }
  double py(double y) const
  {
    double a = y0, b = y1, v = y;
    if (log_y) {
      a = std::log10(a);
      b = std::log10(b);
      v = std::log10(std::max(v, y0));
    }
    return top + height - (b > a ? (v - a) / (b - a) : 0.5) * height;
  }

  std::string axes(const std::string& title,
                   const std::string& xlabel,
                   const std::string& ylabel) const
  {
    std::string s;
    s += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" +
         num(width) + "\" height=\"" + num(height) +
         "\" fill=\"none\" stroke=\"#333\"/>\n";
    s += "<text x=\"" + num(left + width / 2) + "\" y=\"" + num(top - 8) +
         "\" text-anchor=\"middle\" font-size=\"13\">" + escape(title) +
         "</text>\n";
    if (!xlabel.empty())
      s += "<text x=\"" + num(left + width / 2) + "\" y=\"" +
           num(top + height + 32) +
           "\" text-anchor=\"middle\" font-size=\"11\">" + escape(xlabel) +
           "</text>\n";
    if (!ylabel.empty())
      s += "<text x=\"" + num(left - 44) + "\" y=\"" + num(top + height / 2) +
           "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 " +
           num(left - 44) + " " + num(top + height / 2) + ")\">" +
           escape(ylabel) + "</text>\n";
    return s;
  }

  std::string ticks() const
  {
    std::string s;
    for (int i = 0; i <= 4; ++i) {
      const double x = x0 + (x1 - x0) * i / 4.0;
      s += "<text x=\"" + num(px(x)) + "\" y=\"" + num(top + height + 14) +
           "\" text-anchor=\"middle\" font-size=\"9\">" + num(x) + "</text>\n";
    }
    if (log_y) {
      for (int e = static_cast<int>(std::ceil(std::log10(y0)));
           e <= static_cast<int>(std::floor(std::log10(y1)));
           ++e)
        s += "<text x=\"" + num(left - 4) + "\" y=\"" +
             num(py(std::pow(10.0, e)) + 3) +
             "\" text-anchor=\"end\" font-size=\"9\">1e" + std::to_string(e) +
             "</text>\n";
    } else {
      for (int i = 0; i <= 4; ++i) {
        const double y = y0 + (y1 - y0) * i / 4.0;
        s += "<text x=\"" + num(left - 4) + "\" y=\"" + num(py(y) + 3) +
             "\" text-anchor=\"end\" font-size=\"9\">" + num(y) + "</text>\n";
      }
    }
    return s;
  }
};

inline std::string
header(double w, double h)
{
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) +
         "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) + " " +
         num(h) + "\" font-family=\"sans-serif\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline std::string
polyline(const std::vector<std::pair<double, double>>& pts,
         const std::string& stroke,
         const std::string& extra = {})
{
  std::string s = "<polyline fill=\"none\" stroke=\"" + stroke +
                  "\" stroke-width=\"1.5\"" + extra + " points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i)
      s += ' ';
    s += num(pts[i].first) + ',' + num(pts[i].second);
  }
  return s + "\"/>\n";
}

// Stair outline of a histogram over [lo, hi].
inline std::vector<std::pair<double, double>>
stairs(const Frame& f, const std::vector<double>& h, double lo, double hi)
{
  std::vector<std::pair<double, double>> pts;
  if (h.empty())
    return pts;
  const double w = (hi - lo) / static_cast<double>(h.size());
  pts.emplace_back(f.px(lo), f.py(0.0));
  for (std::size_t b = 0; b < h.size(); ++b) {
    const double a = lo + w * static_cast<double>(b);
    pts.emplace_back(f.px(a), f.py(h[b]));
    pts.emplace_back(f.px(a + w), f.py(h[b]));
  }
  pts.emplace_back(f.px(hi), f.py(0.0));
  return pts;
}

} // namespace detail

//! Mean KL per logged iteration for each named run, with its min/max band
//! shaded, on a logarithmic axis. `reference` adds the real-data band.
inline std::string
kl_curves_svg(
  const std::vector<std::pair<std::string, std::vector<gan::MetricsRow>>>& runs,
  const std::optional<Band>& reference = std::nullopt)
{
  using detail::num;
  double xmax = 1.0;
  double ymin = std::numeric_limits<double>::infinity();
  double ymax = -std::numeric_limits<double>::infinity();
  for (const auto& [name, rows] : runs)
    for (const auto& r : rows) {
      if (!(r.kl_min <= r.kl_mean && r.kl_mean <= r.kl_max))
        throw UsageError(name + " metrics row at iteration " +
                         std::to_string(r.iteration) +
                         " violates min <= mean <= max");
      xmax = std::max(xmax, static_cast<double>(r.iteration));
      ymin = std::min(ymin, r.kl_min);
      ymax = std::max(ymax, r.kl_max);
    }
  if (reference) {
    ymin = std::min(ymin, reference->min);
    ymax = std::max(ymax, reference->max);
  }
  // positive log-axis range, whole decades
  const double floor_v = 1e-6;
  if (!(ymax > floor_v)) {
    ymin = 1e-3;
    ymax = 1.0;
  }
  ymin = std::pow(10.0, std::floor(std::log10(std::max(ymin, floor_v))));
  ymax = std::pow(10.0, std::ceil(std::log10(ymax)));
  if (!(ymax > ymin))
    ymax = ymin * 10.0;

  detail::Frame f{ 70, 40, 560, 320, 0.0, xmax, ymin, ymax, true };
  std::string s = detail::header(720, 420);
  s += f.axes("constraint KL vs iteration", "iteration", "KL (mean, min-max)");
  s += f.ticks();
  if (reference) {
    s += "<rect x=\"" + num(f.left) + "\" y=\"" + num(f.py(reference->max)) +
         "\" width=\"" + num(f.width) + "\" height=\"" +
         num(f.py(reference->min) - f.py(reference->max)) +
         "\" fill=\"#888\" fill-opacity=\"0.2\"/>\n";
    s += detail::polyline({ { f.px(0.0), f.py(reference->mean) },
                            { f.px(xmax), f.py(reference->mean) } },
                          "#555",
                          " stroke-dasharray=\"6 4\"");
  }
  double ly = f.top + 12;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& rows = runs[i].second;
    const char* c = detail::color(i);
    if (!rows.empty()) {
      std::string band = "<polygon fill=\"" + std::string(c) +
                         "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
      for (const auto& r : rows)
        band += num(f.px(static_cast<double>(r.iteration))) + ',' +
                num(f.py(r.kl_max)) + ' ';
      for (auto it = rows.rbegin(); it != rows.rend(); ++it)
        band += num(f.px(static_cast<double>(it->iteration))) + ',' +
                num(f.py(it->kl_min)) + ' ';
      band.pop_back();
      s += band + "\"/>\n";
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : rows)
        pts.emplace_back(f.px(static_cast<double>(r.iteration)),
                         f.py(r.kl_mean));
      s += detail::polyline(pts, c);
    }
    s += "<text x=\"" + num(f.left + f.width + 8) + "\" y=\"" + num(ly) +
         "\" font-size=\"11\" fill=\"" + c + "\">" +
         detail::escape(runs[i].first) + "</text>\n";
    ly += 16;
  }
  if (reference)
    s += "<text x=\"" + num(f.left + f.width + 8) + "\" y=\"" + num(ly) +
         "\" font-size=\"11\" fill=\"#555\">real data</text>\n";
  return s + "</svg>\n";
}

namespace detail {

inline std::string
panel(const gan::ReportRow& r, double left, double top, double w, double h)
{
  double ymax = 0.0;
  for (const auto* v : { &r.true_hist, &r.gen_hist, &r.ebm_density })
    for (double x : *v)
      ymax = std::max(ymax, x);
  if (!(ymax > 0.0))
    ymax = 1.0;
  Frame f{ left, top, w, h, r.lo, r.hi, 0.0, ymax * 1.05, false };
  std::string title = r.name;
  if (!std::isnan(r.kl))
    title += "  KL " + num(r.kl);
  std::string s = f.axes(title, "", "");
  s += polyline(stairs(f, r.true_hist, r.lo, r.hi), "#333");
  s += polyline(stairs(f, r.gen_hist, r.lo, r.hi), "#d62728");
  if (!r.ebm_density.empty()) {
    std::vector<std::pair<double, double>> pts;
    const double bw = (r.hi - r.lo) / static_cast<double>(r.ebm_density.size());
    for (std::size_t b = 0; b < r.ebm_density.size(); ++b)
      pts.emplace_back(f.px(r.lo + (static_cast<double>(b) + 0.5) * bw),
                       f.py(r.ebm_density[b]));
    s += polyline(pts, "#1f77b4", " stroke-dasharray=\"4 2\"");
  }
  return s;
}

inline std::string
panels(const std::vector<const gan::ReportRow*>& rows,
       const std::string& title,
       std::size_t columns)
{
  const double pw = 170, ph = 110, gap_x = 30, gap_y = 40;
  const std::size_t n_rows =
    rows.empty() ? 1 : (rows.size() + columns - 1) / columns;
  const double w = 20 + static_cast<double>(columns) * (pw + gap_x);
  const double h = 60 + static_cast<double>(n_rows) * (ph + gap_y);
  std::string s = header(w, h);
  s += "<text x=\"" + num(w / 2) +
       "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
       escape(title) + "</text>\n";
  s += "<text x=\"" + num(w / 2) +
       "\" y=\"40\" text-anchor=\"middle\" font-size=\"10\">black: true  "
       "red: generated  blue dashed: learned density</text>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double left = 20 + static_cast<double>(i % columns) * (pw + gap_x);
    const double top = 70 + static_cast<double>(i / columns) * (ph + gap_y);
    s += panel(*rows[i], left, top, pw, ph);
  }
  return s + "</svg>\n";
}

} // namespace detail

//! One panel per constraint: true and generated histograms with the
//! learned density.
inline std::string
constraint_histograms_svg(const std::vector<gan::ReportRow>& rows,
                          const std::string& label)
{
  std::vector<const gan::ReportRow*> sel;
  for (const auto& r : rows)
    if (r.kind == "constraint")
      sel.push_back(&r);
  return detail::panels(sel, "constraint histograms (" + label + ")", 8);
}

inline std::string
metric_histograms_svg(const std::vector<gan::ReportRow>& rows,
                      const std::string& label)
{
  std::vector<const gan::ReportRow*> sel;
  for (const auto& r : rows)
    if (r.kind == "metric")
      sel.push_back(&r);
  return detail::panels(sel, "performance metrics (" + label + ")", 3);
}

} // namespace pcgan::plot
