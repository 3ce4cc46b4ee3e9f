#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dfd {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Standalone SVG line chart with axes, ticks and a legend.
std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series);

struct Report {
  std::string markdown;
  std::map<std::string, std::string> figures;  // file name -> SVG
};

/// Summarizes a sweep directory, a run directory, or any directory holding
/// runs (curve.csv), evaluations (eval.json) or profiles (profile.json).
/// Throws ValidationError("no runs found ...") when there is nothing to report.
Report build_report(const std::filesystem::path& dir);

/// Writes report.md and the figures into `out_dir`; returns the report path.
std::filesystem::path write_report(const Report& report, const std::filesystem::path& out_dir);

}  // namespace dfd
