#pragma once

// Static plots (SVG) and a markdown summary of a training run directory.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mgc/trainer.hpp"

namespace mgc::report {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series);
std::string confusion_chart(const std::string& title, const std::vector<std::vector<std::size_t>>& confusion);

std::vector<trainer::EpochRecord> read_run_record(const std::filesystem::path& path);
// (branch, class) -> per-epoch cosine to the initial prototype
std::map<std::pair<std::string, int>, Series> read_drift(const std::filesystem::path& path);
std::vector<std::vector<std::size_t>> read_confusion(const std::filesystem::path& path);

// Writes loss.svg, accuracy.svg, drift.svg (when drift rows exist),
// confusion.svg (when confusion_test.tsv exists) and report.md into out_dir.
// Returns the markdown text.
std::string write_report(const std::filesystem::path& run_dir, const std::filesystem::path& out_dir);

}  // namespace mgc::report
