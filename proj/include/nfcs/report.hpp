#pragma once

#include <string>
#include <vector>

#include "nfcs/orchestrator.hpp"

namespace nfcs {

// Post-hoc report files: CSV series plus small self-contained SVG line/scatter
// charts (reward trend, head weight-sharing trend, reward/AP correlation).

std::vector<double> moving_average(const std::vector<double>& xs, int window);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label,
                           const std::vector<Series>& series);
std::string scatter_svg(const std::string& title, const std::string& x_label,
                        const std::string& y_label, const std::vector<double>& x,
                        const std::vector<double>& y);

// Writes reward_trend.{csv,svg}, sharing_trend.{csv,svg} (when head records
// exist) and summary.json under out_dir. Returns the summary.
nlohmann::json write_search_report(const std::vector<SearchRecord>& log,
                                   const std::string& out_dir, int window = 50);

void write_correlation_report(const CorrelationResult& corr, const std::string& out_dir);

}  // namespace nfcs
