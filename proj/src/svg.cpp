#include "seqrec/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "seqrec/errors.hpp"

namespace seqrec {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
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

struct Frame {
  double x0, x1, y0, y1;

  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void widen(double& lo, double& hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (!(lo < hi)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

void open_svg(std::ostringstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
}

void axes(std::ostringstream& os, const Frame& f, const std::string& x_label, const std::string& y_label) {
  const double left = kLeft, right = kWidth - kRight, top = kTop, bottom = kHeight - kBottom;
  os << "<g stroke=\"#333\" fill=\"none\"><line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right
     << "\" y2=\"" << bottom << "\"/><line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
     << bottom << "\"/></g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << bottom + 16 << "\" text-anchor=\"middle\">" << num(xv)
       << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
       << "</text>\n";
  }
  os << "<text x=\"" << (left + right) / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
     << escape(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << (top + bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (top + bottom) / 2 << ")\">" << escape(y_label) << "</text>\n";
}

void legend(std::ostringstream& os, std::size_t index, const std::string& label, const std::string& colour) {
  const double x = kWidth - kRight + 14, y = kTop + 10 + 18.0 * static_cast<double>(index);
  os << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\"" << colour << "\"/>"
     << "<text x=\"" << x + 18 << "\" y=\"" << y + 1 << "\">" << escape(label) << "</text>\n";
}

}  // namespace

std::string line_chart_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& x_label,
                           const std::string& y_label) {
  if (curves.empty()) throw ContractError("line_chart_svg: no curves");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& c : curves) {
    if (c.x.size() != c.y.size()) throw ContractError("line_chart_svg: x and y lengths differ for " + c.label);
    for (double v : c.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : c.y) {
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
  }
  widen(x0, x1);
  widen(y0, y1);
  y0 = std::min(y0, 0.0);
  const Frame f{x0, x1, y0, y1};

  std::ostringstream os;
  open_svg(os, title);
  axes(os, f, x_label, y_label);

  if (curves.size() >= 2) {
    std::map<double, std::pair<double, double>> band;
    std::map<double, std::size_t> seen;
    for (const auto& c : curves) {
      for (std::size_t i = 0; i < c.x.size(); ++i) {
        if (!std::isfinite(c.y[i])) continue;
        auto [it, fresh] = band.try_emplace(c.x[i], c.y[i], c.y[i]);
        if (!fresh) {
          it->second.first = std::min(it->second.first, c.y[i]);
          it->second.second = std::max(it->second.second, c.y[i]);
        }
        ++seen[c.x[i]];
      }
    }
    std::vector<std::pair<double, std::pair<double, double>>> shared;
    for (const auto& [x, range] : band) {
      if (seen[x] == curves.size()) shared.emplace_back(x, range);
    }
    if (shared.size() >= 2) {
      os << "<polygon class=\"band\" fill=\"#1f77b4\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
      for (const auto& [x, r] : shared) os << num(f.px(x)) << ',' << num(f.py(r.second)) << ' ';
      for (auto it = shared.rbegin(); it != shared.rend(); ++it) {
        os << num(f.px(it->first)) << ',' << num(f.py(it->second.first)) << ' ';
      }
      os << "\"/>\n";
    }
  }

  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const std::string colour = kPalette[i % std::size(kPalette)];
    os << "<polyline class=\"curve\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.6\" points=\"";
    for (std::size_t j = 0; j < c.x.size(); ++j) {
      if (std::isfinite(c.y[j])) os << num(f.px(c.x[j])) << ',' << num(f.py(c.y[j])) << ' ';
    }
    os << "\"/>\n";
    legend(os, i, c.label, colour);
  }
  os << "</svg>\n";
  return os.str();
}

std::string q_histogram_svg(const QDistributionReport& report, const std::string& title) {
  if (report.edges.size() < 2) throw ContractError("q_histogram_svg: report has no bins");
  const std::size_t bins = report.edges.size() - 1;
  auto density = [](const QGroupStats& g, std::size_t b) {
    return g.total ? static_cast<double>(g.counts[b]) / static_cast<double>(g.total) : 0.0;
  };
  double top = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    top = std::max({top, density(report.positive, b), density(report.negative, b)});
  }
  if (top <= 0.0) top = 1.0;
  const Frame f{report.edges.front(), report.edges.back(), 0.0, top * 1.05};

  std::ostringstream os;
  open_svg(os, title);
  axes(os, f, "Q value", "fraction of pairs");
  const std::pair<const QGroupStats*, const char*> groups[] = {{&report.negative, "#d62728"},
                                                               {&report.positive, "#1f77b4"}};
  for (const auto& [g, colour] : groups) {
    for (std::size_t b = 0; b < bins; ++b) {
      const double d = density(*g, b);
      if (d <= 0.0) continue;
      const double x = f.px(report.edges[b]), w = f.px(report.edges[b + 1]) - x;
      const double y = f.py(d);
      os << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\""
         << num(f.py(0.0) - y) << "\" fill=\"" << colour << "\" fill-opacity=\"0.45\"/>\n";
    }
  }
  legend(os, 0, "logged actions (" + std::to_string(report.positive.total) + ")", "#1f77b4");
  legend(os, 1, "negative actions (" + std::to_string(report.negative.total) + ")", "#d62728");
  legend(os, 2, "pos mean " + num(report.positive.mean), "#ffffff");
  legend(os, 3, "neg mean " + num(report.negative.mean), "#ffffff");
  os << "</svg>\n";
  return os.str();
}

}  // namespace seqrec
