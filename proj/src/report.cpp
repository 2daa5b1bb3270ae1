#include "vermouth/report.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace vermouth {

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
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

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace

ReportFormat report_format_for(const std::string& path) {
  const auto dot = path.rfind('.');
  const auto ext = dot == std::string::npos ? std::string() : path.substr(dot + 1);
  if (ext == "json") return ReportFormat::kJson;
  if (ext == "csv") return ReportFormat::kCsv;
  throw std::invalid_argument("report path must end in .csv or .json: " + path);
}

std::string format_value(double v) { return fmt("%.6g", v); }

std::string report_csv(const SweepReport& report) {
  std::string out = "factor,setting,task,metric,value,seed,walltime_s\n";
  for (const auto& r : report.rows) {
    out += csv_field(r.factor) + "," + csv_field(r.setting) + "," + csv_field(r.task) + "," + csv_field(r.metric) +
           "," + format_value(r.value) + "," + std::to_string(r.seed) + "," + format_value(r.walltime_s) + "\n";
  }
  return out;
}

std::string report_json(const SweepReport& report) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"factor", r.factor},
                    {"setting", r.setting},
                    {"task", r.task},
                    {"metric", r.metric},
                    {"value", r.value},
                    {"seed", r.seed},
                    {"walltime_s", r.walltime_s}});
  }
  nlohmann::ordered_json j{{"version", report.version}, {"config_hash", report.config_hash}, {"rows", rows}};
  return j.dump(2) + "\n";
}

void write_report(const SweepReport& report, const std::string& path, ReportFormat format) {
  write_file(path, format == ReportFormat::kCsv ? report_csv(report) : report_json(report));
}

SweepReport parse_report_json(const std::string& text) {
  SweepReport report;
  try {
    const auto j = nlohmann::json::parse(text);
    report.version = j.at("version").get<std::string>();
    report.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& r : j.at("rows")) {
      report.rows.push_back({r.at("factor").get<std::string>(), r.at("setting").get<std::string>(),
                             r.at("task").get<std::string>(), r.at("metric").get<std::string>(),
                             r.at("value").get<double>(), r.at("seed").get<std::uint64_t>(),
                             r.at("walltime_s").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed report: ") + e.what());
  }
  return report;
}

SweepReport read_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_report_json(ss.str());
}

std::string render_curves_svg(const SweepReport& report, const std::string& x_factor) {
  // (task, metric) -> x -> values over seeds
  std::map<std::pair<std::string, std::string>, std::map<double, std::vector<double>>> series;
  for (const auto& r : report.rows) {
    if (r.factor != x_factor) continue;
    char* end = nullptr;
    const double x = std::strtod(r.setting.c_str(), &end);
    if (r.setting.empty() || end != r.setting.c_str() + r.setting.size()) {
      throw std::invalid_argument("factor " + x_factor + " is not numeric (setting '" + r.setting + "')");
    }
    series[{r.task, r.metric}][x].push_back(r.value);
  }
  if (series.empty()) throw std::invalid_argument("report has no rows for factor " + x_factor);

  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  std::map<std::pair<std::string, std::string>, std::vector<std::pair<double, double>>> points;
  for (const auto& [key, xs] : series) {
    for (const auto& [x, vals] : xs) {
      double mean = 0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      points[key].emplace_back(x, mean);
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, mean);
      y1 = std::max(y1, mean);
    }
  }
  if (x1 == x0) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto px = [&](double x) { return kPlotLeft + (x - x0) / (x1 - x0) * kPlotWidth; };
  auto py = [&](double y) { return kPlotTop + (y1 - y) / (y1 - y0) * kPlotHeight; };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotCanvasWidth << "\" height=\""
      << kPlotCanvasHeight << "\" viewBox=\"0 0 " << kPlotCanvasWidth << " " << kPlotCanvasHeight << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << kPlotCanvasWidth << "\" height=\"" << kPlotCanvasHeight
      << "\" fill=\"white\"/>\n";
  const double bottom = kPlotTop + kPlotHeight, right = kPlotLeft + kPlotWidth;
  svg << "<g stroke=\"black\" stroke-width=\"1\">\n"
      << "<line x1=\"" << fmt("%.2f", kPlotLeft) << "\" y1=\"" << fmt("%.2f", bottom) << "\" x2=\"" << fmt("%.2f", right)
      << "\" y2=\"" << fmt("%.2f", bottom) << "\"/>\n"
      << "<line x1=\"" << fmt("%.2f", kPlotLeft) << "\" y1=\"" << fmt("%.2f", kPlotTop) << "\" x2=\""
      << fmt("%.2f", kPlotLeft) << "\" y2=\"" << fmt("%.2f", bottom) << "\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    svg << "<line x1=\"" << fmt("%.2f", px(xv)) << "\" y1=\"" << fmt("%.2f", bottom) << "\" x2=\""
        << fmt("%.2f", px(xv)) << "\" y2=\"" << fmt("%.2f", bottom + 5) << "\"/>\n"
        << "<line x1=\"" << fmt("%.2f", kPlotLeft - 5) << "\" y1=\"" << fmt("%.2f", py(yv)) << "\" x2=\""
        << fmt("%.2f", kPlotLeft) << "\" y2=\"" << fmt("%.2f", py(yv)) << "\"/>\n";
  }
  svg << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\" fill=\"black\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    svg << "<text x=\"" << fmt("%.2f", px(xv)) << "\" y=\"" << fmt("%.2f", bottom + 18)
        << "\" text-anchor=\"middle\">" << fmt("%.4g", xv) << "</text>\n"
        << "<text x=\"" << fmt("%.2f", kPlotLeft - 8) << "\" y=\"" << fmt("%.2f", py(yv) + 4)
        << "\" text-anchor=\"end\">" << fmt("%.4g", yv) << "</text>\n";
  }
  svg << "<text x=\"" << fmt("%.2f", kPlotLeft + kPlotWidth / 2) << "\" y=\"" << fmt("%.2f", bottom + 40)
      << "\" text-anchor=\"middle\">" << xml_escape(x_factor) << "</text>\n</g>\n";

  std::size_t i = 0;
  for (const auto& [key, pts] : points) {
    const char* color = kColors[i % (sizeof kColors / sizeof kColors[0])];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < pts.size(); ++k) {
      svg << (k ? " " : "") << fmt("%.2f", px(pts[k].first)) << "," << fmt("%.2f", py(pts[k].second));
    }
    svg << "\"/>\n";
    for (const auto& [x, y] : pts) {
      svg << "<circle cx=\"" << fmt("%.2f", px(x)) << "\" cy=\"" << fmt("%.2f", py(y)) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
    }
    const double ly = kPlotTop + 10 + 18.0 * static_cast<double>(i);
    svg << "<rect x=\"" << fmt("%.2f", right + 15) << "\" y=\"" << fmt("%.2f", ly - 8) << "\" width=\"12\" height=\"4\" fill=\""
        << color << "\"/>\n"
        << "<text x=\"" << fmt("%.2f", right + 32) << "\" y=\"" << fmt("%.2f", ly - 2)
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(key.first + " / " + key.second)
        << "</text>\n";
    ++i;
  }
  svg << "</svg>\n";
  return svg.str();
}

void plot_curves(const SweepReport& report, const std::string& x_factor, const std::string& path) {
  write_file(path, render_curves_svg(report, x_factor));
}

}  // namespace vermouth
