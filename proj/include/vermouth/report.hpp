#pragma once

#include <string>

#include "vermouth/sweep.hpp"

namespace vermouth {

enum class ReportFormat { kCsv, kJson };
ReportFormat report_format_for(const std::string& path);

// %.6g
std::string format_value(double v);
std::string report_csv(const SweepReport& report);
std::string report_json(const SweepReport& report);
void write_report(const SweepReport& report, const std::string& path, ReportFormat format);
SweepReport parse_report_json(const std::string& text);
SweepReport read_report(const std::string& path);

// Plot frame: 640x400 canvas, plot area from (kPlotLeft, kPlotTop) with size
// kPlotWidth x kPlotHeight. Data ranges map linearly; a degenerate range is
// widened by 0.5 on each side.
inline constexpr double kPlotCanvasWidth = 640, kPlotCanvasHeight = 400;
inline constexpr double kPlotLeft = 70, kPlotTop = 30, kPlotWidth = 420, kPlotHeight = 310;

std::string render_curves_svg(const SweepReport& report, const std::string& x_factor);
void plot_curves(const SweepReport& report, const std::string& x_factor, const std::string& path);

}  // namespace vermouth
