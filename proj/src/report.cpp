#include "nfcs/report.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nfcs {

std::vector<double> moving_average(const std::vector<double>& xs, int window) {
  std::vector<double> out;
  if (window <= 0 || xs.size() < static_cast<size_t>(window)) return out;
  double acc = 0;
  for (size_t i = 0; i < xs.size(); i++) {
    acc += xs[i];
    if (i >= static_cast<size_t>(window)) acc -= xs[i - static_cast<size_t>(window)];
    if (i + 1 >= static_cast<size_t>(window)) out.push_back(acc / window);
  }
  return out;
}

namespace {

constexpr int kW = 640, kH = 400, kPad = 56;

struct Range {
  double lo = 0, hi = 1;
  double map(double v, int from, int to) const {
    double f = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return from + f * (to - from);
  }
};

Range find_range(const std::vector<const std::vector<double>*>& vs) {
  Range r{1e300, -1e300};
  for (const auto* v : vs)
    for (double x : *v) {
      r.lo = std::min(r.lo, x);
      r.hi = std::max(r.hi, x);
    }
  if (r.lo > r.hi) r = {0, 1};
  if (r.lo == r.hi) {
    r.lo -= 1;
    r.hi += 1;
  }
  return r;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

void svg_header(std::ostringstream& os, const std::string& title,
                const std::string& x_label, const std::string& y_label,
                const Range& xr, const Range& yr) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW
     << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" "
        "font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad
     << "\" y2=\"" << kH - kPad << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad
     << "\" y2=\"" << kH - kPad << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  os << "<text x=\"16\" y=\"" << kH / 2
     << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << kH / 2 << ")\">" << y_label << "</text>\n";
  for (int t = 0; t <= 4; t++) {
    double xv = xr.lo + (xr.hi - xr.lo) * t / 4.0;
    double yv = yr.lo + (yr.hi - yr.lo) * t / 4.0;
    double xx = xr.map(xv, kPad, kW - kPad);
    double yy = yr.map(yv, kH - kPad, kPad);
    os << "<text x=\"" << xx << "\" y=\"" << kH - kPad + 16
       << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(xv) << "</text>\n";
    os << "<text x=\"" << kPad - 6 << "\" y=\"" << yy + 3
       << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(yv) << "</text>\n";
  }
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label,
                           const std::vector<Series>& series) {
  std::vector<const std::vector<double>*> xs, ys;
  for (const Series& s : series) {
    xs.push_back(&s.x);
    ys.push_back(&s.y);
  }
  Range xr = find_range(xs), yr = find_range(ys);
  std::ostringstream os;
  svg_header(os, title, x_label, y_label, xr, yr);
  const char* colors[] = {"#d43f3f", "#3f6fd4", "#3fa05a", "#8c4fd4"};
  for (size_t si = 0; si < series.size(); si++) {
    const Series& s = series[si];
    os << "<polyline fill=\"none\" stroke=\"" << colors[si % 4]
       << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.x.size(); i++)
      os << fmt(xr.map(s.x[i], kPad, kW - kPad)) << ","
         << fmt(yr.map(s.y[i], kH - kPad, kPad)) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << kW - kPad << "\" y=\"" << kPad + 14 * (si + 1)
       << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << colors[si % 4]
       << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string scatter_svg(const std::string& title, const std::string& x_label,
                        const std::string& y_label, const std::vector<double>& x,
                        const std::vector<double>& y) {
  Range xr = find_range({&x}), yr = find_range({&y});
  std::ostringstream os;
  svg_header(os, title, x_label, y_label, xr, yr);
  for (size_t i = 0; i < x.size(); i++)
    os << "<circle cx=\"" << fmt(xr.map(x[i], kPad, kW - kPad)) << "\" cy=\""
       << fmt(yr.map(y[i], kH - kPad, kPad)) << "\" r=\"4\" fill=\"#d43f3f\"/>\n";
  os << "</svg>\n";
  return os.str();
}

namespace {

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  NFCS_REQUIRE(f.good(), "cannot write '", path, "'");
  f << text;
}

}  // namespace

nlohmann::json write_search_report(const std::vector<SearchRecord>& log,
                                   const std::string& out_dir, int window) {
  std::filesystem::create_directories(out_dir);
  std::vector<double> rewards, seqs;
  for (const SearchRecord& r : log) {
    if (r.status != "ok") continue;
    rewards.push_back(r.reward);
    seqs.push_back(static_cast<double>(r.seq));
  }
  std::vector<double> ma = moving_average(rewards, window);

  std::ostringstream csv;
  csv << "seq,reward,moving_avg_" << window << "\n";
  for (size_t i = 0; i < rewards.size(); i++) {
    csv << seqs[i] << "," << rewards[i] << ",";
    if (i + 1 >= static_cast<size_t>(window)) csv << ma[i + 1 - static_cast<size_t>(window)];
    csv << "\n";
  }
  write_file(out_dir + "/reward_trend.csv", csv.str());

  Series raw{"reward", seqs, rewards};
  Series avg{"moving avg", {}, ma};
  for (size_t i = 0; i < ma.size(); i++)
    avg.x.push_back(seqs[i + static_cast<size_t>(window) - 1]);
  write_file(out_dir + "/reward_trend.svg",
             line_chart_svg("proxy reward over the search", "architecture",
                            "reward", {raw, avg}));

  nlohmann::json summary;
  summary["records"] = log.size();
  summary["ok_records"] = rewards.size();
  if (!ma.empty()) {
    summary["first_window_avg"] = ma.front();
    summary["last_window_avg"] = ma.back();
  }
  double best = -1e300;
  for (double r : rewards) best = std::max(best, r);
  if (!rewards.empty()) summary["best_reward"] = best;

  std::vector<double> share = sharing_trend(log, window);
  if (!share.empty()) {
    std::ostringstream scsv;
    scsv << "period,fully_shared_fraction\n";
    Series s{"fraction share_from=0", {}, share};
    for (size_t i = 0; i < share.size(); i++) {
      scsv << i + 1 << "," << share[i] << "\n";
      s.x.push_back(static_cast<double>(i + 1));
    }
    write_file(out_dir + "/sharing_trend.csv", scsv.str());
    write_file(out_dir + "/sharing_trend.svg",
               line_chart_svg("fully shared heads per period", "period",
                              "fraction", {s}));
    summary["sharing_trend"] = share;
  }
  write_file(out_dir + "/summary.json", summary.dump(2) + "\n");
  return summary;
}

void write_correlation_report(const CorrelationResult& corr, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ostringstream csv;
  csv << "seq,proxy_reward,toy_ap\n";
  std::vector<double> xs, ys;
  for (const auto& p : corr.points) {
    csv << p.seq << "," << p.reward << "," << p.toy_ap << "\n";
    xs.push_back(p.reward);
    ys.push_back(p.toy_ap);
  }
  write_file(out_dir + "/correlation.csv", csv.str());
  write_file(out_dir + "/correlation.svg",
             scatter_svg("proxy reward vs toy AP (spearman " +
                             std::to_string(corr.spearman) + ")",
                         "proxy reward", "toy AP", xs, ys));
  nlohmann::json j{{"spearman", corr.spearman}, {"points", corr.points.size()}};
  write_file(out_dir + "/correlation.json", j.dump(2) + "\n");
}

}  // namespace nfcs
