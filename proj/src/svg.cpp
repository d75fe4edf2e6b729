#include "ctxsel/svg.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

namespace ctxsel {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Unit square plot area with axes, ticks every 0.1 of the range.
struct Plot {
  double left = 60, top = 40, size_w = 400, size_h = 300;
  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;

  double px(double x) const { return left + (x - x_lo) / (x_hi - x_lo) * size_w; }
  double py(double y) const { return top + size_h - (y - y_lo) / (y_hi - y_lo) * size_h; }

  void frame(std::ostringstream& o, const std::string& title, const std::string& xlabel,
             const std::string& ylabel) const {
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(left + size_w + 160)
      << "\" height=\"" << num(top + size_h + 60) << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << num(left) << "\" y=\"24\" font-size=\"14\">" << escape(title) << "</text>\n";
    o << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(size_w)
      << "\" height=\"" << num(size_h) << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 10; ++k) {
      const double fx = x_lo + (x_hi - x_lo) * k / 10.0;
      const double fy = y_lo + (y_hi - y_lo) * k / 10.0;
      o << "<text x=\"" << num(px(fx)) << "\" y=\"" << num(top + size_h + 16)
        << "\" font-size=\"10\" text-anchor=\"middle\">" << num(fx).substr(0, 4) << "</text>\n";
      o << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py(fy) + 3)
        << "\" font-size=\"10\" text-anchor=\"end\">" << num(fy).substr(0, 4) << "</text>\n";
    }
    o << "<text x=\"" << num(left + size_w / 2) << "\" y=\"" << num(top + size_h + 36)
      << "\" font-size=\"12\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n";
    o << "<text x=\"14\" y=\"" << num(top + size_h / 2) << "\" font-size=\"12\">" << escape(ylabel)
      << "</text>\n";
  }

  void series(std::ostringstream& o, const std::vector<std::pair<double, double>>& pts,
              const std::string& label, std::size_t k) const {
    const char* color = kPalette[k % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i) o << ' ';
      o << num(px(pts[i].first)) << ',' << num(py(pts[i].second));
    }
    o << "\"/>\n";
    const double ly = top + 14 + 16 * static_cast<double>(k);
    o << "<line x1=\"" << num(left + size_w + 12) << "\" y1=\"" << num(ly - 4) << "\" x2=\""
      << num(left + size_w + 32) << "\" y2=\"" << num(ly - 4) << "\" stroke=\"" << color
      << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << num(left + size_w + 36) << "\" y=\"" << num(ly) << "\" font-size=\"11\">"
      << escape(label) << "</text>\n";
  }
};

void box(std::ostringstream& o, const BBox& b, const char* color, bool dashed, double width) {
  o << "<rect x=\"" << num(b.x) << "\" y=\"" << num(b.y) << "\" width=\"" << num(b.w)
    << "\" height=\"" << num(b.h) << "\" fill=\"none\" stroke=\"" << color
    << "\" stroke-width=\"" << num(width) << "\"";
  if (dashed) o << " stroke-dasharray=\"" << num(3 * width) << ',' << num(2 * width) << "\"";
  o << "/>\n";
}

}  // namespace

std::string pr_curves_svg(const std::vector<std::pair<std::string, PrCurve>>& curves,
                          const std::string& title) {
  std::ostringstream o;
  Plot plot;
  plot.frame(o, title, "recall", "precision");
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& c = curves[k].second;
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < c.recall.size(); ++i) pts.emplace_back(c.recall[i], c.precision[i]);
    plot.series(o, pts, curves[k].first + " AP " + num(c.ap), k);
  }
  o << "</svg>\n";
  return o.str();
}

std::string sweep_svg(const std::vector<SweepRow>& rows) {
  std::map<std::string, std::vector<std::pair<double, double>>> by_method;
  std::vector<std::string> order;
  double lo = 1.0;
  double hi = 0.0;
  double p_lo = 1.0;
  double p_hi = 0.0;
  for (const auto& r : rows) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].emplace_back(r.precision, r.map);
    lo = std::min(lo, r.map);
    hi = std::max(hi, r.map);
    p_lo = std::min(p_lo, r.precision);
    p_hi = std::max(p_hi, r.precision);
  }
  Plot plot;
  if (!rows.empty()) {
    plot.y_lo = std::max(0.0, lo - 0.05);
    plot.y_hi = std::min(1.0, hi + 0.05);
    if (plot.y_hi <= plot.y_lo) plot.y_hi = plot.y_lo + 0.1;
    plot.x_lo = p_lo;
    plot.x_hi = p_hi > p_lo ? p_hi : p_lo + 0.1;
  }
  std::ostringstream o;
  plot.frame(o, "mAP vs precision threshold", "precision threshold", "mAP");
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto pts = by_method[order[k]];
    std::stable_sort(pts.begin(), pts.end());
    plot.series(o, pts, order[k], k);
  }
  o << "</svg>\n";
  return o.str();
}

std::string trace_svg(const TraceRecord& trace, int width, int height, const ClassVocab& vocab) {
  const double stroke = std::max(0.5, 0.005 * std::max(width, height));
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << width << ' ' << height
    << "\" width=\"" << std::max(width, 640) << "\" height=\""
    << static_cast<int>(std::max(width, 640) * static_cast<double>(height) / width) << "\">\n";
  o << "<title>" << escape(trace.image_id) << " " << escape(vocab.name(trace.target.class_id)) << " "
    << side_name(trace.side) << " " << num(trace.score) << "</title>\n";
  o << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"#f4f4f4\"/>\n";
  for (const auto& c : trace.contexts) {
    o << "<g class=\"" << (c.selected ? "selected" : "unselected") << "\" data-class=\""
      << escape(vocab.name(c.det.class_id)) << "\" data-contribution=\"" << num(c.contribution)
      << "\">\n";
    box(o, c.det.box, c.selected ? "red" : "blue", !c.selected, stroke);
    o << "</g>\n";
  }
  o << "<g class=\"target\" data-class=\"" << escape(vocab.name(trace.target.class_id)) << "\">\n";
  box(o, trace.target.box, "yellow", false, 1.5 * stroke);
  o << "</g>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace ctxsel
