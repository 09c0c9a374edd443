#pragma once

// CSV tables and self-contained SVG line charts.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "kalrecon/error.hpp"
#include "kalrecon/metrics.hpp"

namespace kalrecon {

inline std::string format_number(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
  return out;
}

/// One row per feature: name, kind, loss, scaled_mse (or N/A), recon_error[, recon_error_enforced].
inline void write_metrics_csv(const MetricsTable& t, const std::filesystem::path& path) {
  if (t.features.empty()) throw Error(Errc::EmptyInput, "empty metrics table");
  auto out = open_for_write(path);
  const bool enforced = t.features.front().recon_error_enforced.has_value();
  out << "feature,kind,loss,scaled_mse,recon_error";
  if (enforced) out << ",recon_error_enforced";
  out << '\n';
  for (const auto& f : t.features) {
    out << feature_name(f.id) << ',' << kind_name(f.kind) << ',' << format_number(f.loss) << ','
        << (f.scaled_mse ? format_number(*f.scaled_mse) : "N/A") << ',' << format_number(f.recon_error);
    if (enforced) out << ',' << format_number(f.recon_error_enforced.value_or(0.0));
    out << '\n';
  }
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
  int width = 720;
  int height = 440;
};

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

inline std::string render_svg(const std::vector<Series>& series, const ChartOptions& opt) {
  if (series.empty()) throw Error(Errc::EmptyInput, "no series to plot");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  auto ty = [&](double y) { return opt.log_y ? std::log10(std::max(y, 1e-12)) : y; };
  for (const auto& s : series) {
    if (s.x.empty() || s.x.size() != s.y.size()) throw Error(Errc::EmptyInput, "series '" + s.label + "' is empty");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  }
  if (!std::isfinite(x0)) throw Error(Errc::EmptyInput, "no finite points to plot");
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) y1 = y0 + 1.0;
  const double left = 70, right = 170, top = 40, bottom = 50;
  const double pw = opt.width - left - right, ph = opt.height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (ty(y) - y0) / (y1 - y0) * ph; };
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << opt.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << xml_escape(opt.title) << "</text>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double fx = x0 + (x1 - x0) * t / 4.0;
    const double fy = y0 + (y1 - y0) * t / 4.0;
    const double sx = left + pw * t / 4.0;
    const double sy = top + ph - ph * t / 4.0;
    svg << "<line x1=\"" << sx << "\" y1=\"" << top + ph << "\" x2=\"" << sx << "\" y2=\"" << top + ph + 5
        << "\" stroke=\"black\"/>";
    svg << "<text x=\"" << sx << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << format_number(fx)
        << "</text>\n";
    svg << "<line x1=\"" << left - 5 << "\" y1=\"" << sy << "\" x2=\"" << left << "\" y2=\"" << sy
        << "\" stroke=\"black\"/>";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << sy + 4 << "\" text-anchor=\"end\">"
        << format_number(opt.log_y ? std::pow(10.0, fy) : fy) << "</text>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << opt.height - 10 << "\" text-anchor=\"middle\">"
      << xml_escape(opt.x_label) << "</text>\n";
  svg << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(opt.y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kColors[k % std::size(kColors)];
    const auto& s = series[k];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) svg << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    svg << "\"/>\n";
    if (s.x.size() <= 12) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
          svg << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << color
              << "\"/>";
        }
      }
      svg << '\n';
    }
    const double ly = top + 14 + 18.0 * static_cast<double>(k);
    svg << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\""
        << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>";
    svg << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly << "\">" << xml_escape(s.label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_svg(const std::vector<Series>& series, const ChartOptions& opt, const std::filesystem::path& path) {
  const std::string text = render_svg(series, opt);  // throws before any file is created
  auto out = open_for_write(path);
  out << text;
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

/// Long-format CSV: label,x,y.
inline void write_series_csv(const std::vector<Series>& series, const std::string& x_name,
                             const std::string& y_name, const std::filesystem::path& path) {
  if (series.empty()) throw Error(Errc::EmptyInput, "no series to write");
  auto out = open_for_write(path);
  out << "series," << x_name << ',' << y_name << '\n';
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      out << s.label << ',' << format_number(s.x[i]) << ',' << format_number(s.y[i]) << '\n';
    }
  }
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

}  // namespace kalrecon
