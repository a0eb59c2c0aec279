#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace trajdistill {

/// One long-format observation.
struct ReportRow {
  std::string run_id;
  std::string phase;  // buffer, distill, distill_eval, eval
  long long iteration = 0;
  std::string metric;
  double value = 0.0;

  bool operator==(const ReportRow&) const = default;
};

struct ReportResult {
  std::vector<ReportRow> rows;
  std::vector<std::string> warnings;  // one per skipped directory
};

/// Gathers every run directory written by the buffer, distill and eval
/// commands. Unrecognized or malformed directories are skipped with a warning.
ReportResult collect_report(std::span<const std::filesystem::path> run_dirs);

/// run_id,phase,iteration,metric,value with round-trip precision.
std::string report_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_report_csv(const std::string& text);

/// Minimal CSV table: header plus rows of cells (no quoting).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable read_csv_table(const std::filesystem::path& path);

}  // namespace trajdistill
