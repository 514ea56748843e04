#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "solar/io/csv.hpp"
#include "solar/probe.hpp"

namespace solar::io {

struct RunReport {
  std::string run_id;
  AccuracyReport accuracy;
  std::optional<double> deviation;
  std::optional<double> overlap;
};

inline RunReport read_run(const std::filesystem::path& dir) {
  RunReport r;
  r.run_id = dir.filename().string();
  const auto acc = read_csv((dir / "accuracy.csv").string());
  const auto col = acc.column("accuracy");
  std::vector<double> values;
  for (const auto& row : acc.rows) values.push_back(std::stod(row.at(col)));
  r.accuracy = summarize(values);
  const auto mpath = dir / "metrics.csv";
  if (std::filesystem::exists(mpath)) {
    const auto m = read_csv(mpath.string());
    if (!m.rows.empty()) {
      r.deviation = std::stod(m.rows.back().at(m.column("deviation_mean")));
      r.overlap = std::stod(m.rows.back().at(m.column("avg_overlap_count")));
    }
  }
  return r;
}

/// Prints one row per run found at `dir` (the run itself, or its immediate
/// subdirectories holding accuracy.csv). Returns 1 when nothing is found.
inline int report(const std::filesystem::path& dir, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  std::vector<fs::path> runs;
  if (fs::exists(dir / "accuracy.csv")) {
    runs.push_back(dir);
  } else if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && fs::exists(e.path() / "accuracy.csv")) runs.push_back(e.path());
    std::sort(runs.begin(), runs.end());
  }
  if (runs.empty()) {
    err << "no accuracy.csv under " << dir.string() << "\n";
    return 1;
  }
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("n/a"); };
  out << "run_id,final_accuracy,average_accuracy,deviation,avg_overlap_count\n";
  for (const auto& d : runs) {
    try {
      const auto r = read_run(d);
      out << r.run_id << "," << fmt(r.accuracy.final_accuracy) << "," << fmt(r.accuracy.average_accuracy) << ","
          << opt(r.deviation) << "," << opt(r.overlap) << "\n";
    } catch (const std::exception& e) {
      err << d.string() << ": " << e.what() << "\n";
      return 1;
    }
  }
  return 0;
}

}  // namespace solar::io
