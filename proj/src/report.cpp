#include "trajdistill/report.hpp"

#include "trajdistill/buffer.hpp"
#include "trajdistill/serialize.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace trajdistill {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s, const std::string& where) {
  if (s == "nan" || s == "NaN" || s == "-nan") return std::nan("");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw std::runtime_error(where + ": '" + s + "' is not a number");
  return v;
}

std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void add_trajectory(const Trajectory& t, const std::string& run_id, std::vector<ReportRow>& rows) {
  const auto epoch_rows = [&](long long e, const char* metric, double v) {
    rows.push_back({run_id, "buffer", e, metric, v});
  };
  epoch_rows(0, "train_accuracy", t.meta.initial_train_accuracy);
  epoch_rows(0, "test_accuracy", t.meta.initial_test_accuracy);
  for (const auto& m : t.meta.metrics) {
    epoch_rows(m.epoch, "loss", m.loss);
    epoch_rows(m.epoch, "train_accuracy", m.train_accuracy);
    epoch_rows(m.epoch, "test_accuracy", m.test_accuracy);
    epoch_rows(m.epoch, "learning_rate", m.learning_rate);
    epoch_rows(m.epoch, "lambda", m.lambda);
    epoch_rows(m.epoch, "delta_sq_mean", m.delta_sq_mean);
    epoch_rows(m.epoch, "weight_change_sq",
               param_distance_sq(t.checkpoints[static_cast<std::size_t>(m.epoch - 1)],
                                 t.checkpoints[static_cast<std::size_t>(m.epoch)]));
  }
  epoch_rows(t.epochs(), "avg_var", avg_var(t));
}

// Every column except `iteration` becomes a metric.
void add_log(const fs::path& file, const std::string& run_id, const std::string& phase,
             std::vector<ReportRow>& rows) {
  const CsvTable t = read_csv_table(file);
  const auto it = std::find(t.header.begin(), t.header.end(), "iteration");
  if (it == t.header.end()) throw std::runtime_error(file.string() + ": no iteration column");
  const std::size_t ic = static_cast<std::size_t>(it - t.header.begin());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = file.string() + " row " + std::to_string(r + 2);
    const auto iteration = static_cast<long long>(to_double(row[ic], where));
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == ic || row[c].empty()) continue;
      rows.push_back({run_id, phase, iteration, t.header[c], to_double(row[c], where)});
    }
  }
}

void add_eval(const fs::path& file, const std::string& run_id, std::vector<ReportRow>& rows) {
  std::ifstream in(file);
  const auto j = nlohmann::json::parse(in);
  for (const auto& rep : j.at("reports")) {
    const std::string tag = rep.at("tag").get<std::string>();
    const auto& accs = rep.at("accuracies");
    for (std::size_t k = 0; k < accs.size(); ++k) {
      const double v = accs[k].is_null() ? std::nan("") : accs[k].get<double>();
      rows.push_back({run_id, "eval", static_cast<long long>(k), tag + ".accuracy", v});
    }
  }
}

std::vector<fs::path> expert_dirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

CsvTable read_csv_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
  t.header = split_cells(line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_cells(line);
    if (cells.size() != t.header.size()) {
      throw std::runtime_error(path.string() + " line " + std::to_string(lineno) + ": expected " +
                               std::to_string(t.header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

ReportResult collect_report(std::span<const fs::path> run_dirs) {
  ReportResult res;
  std::map<std::string, int> seen;
  for (const auto& dir : run_dirs) {
    std::string base = fs::path(dir).lexically_normal().filename().string();
    if (base.empty()) base = fs::path(dir).lexically_normal().parent_path().filename().string();
    const int dup = seen[base]++;
    const std::string run_id = dup == 0 ? base : base + "#" + std::to_string(dup + 1);
    std::vector<ReportRow> rows;
    try {
      if (!fs::is_directory(dir)) throw std::runtime_error("not a directory");
      bool known = false;
      if (fs::exists(dir / "run_log.csv")) {
        add_log(dir / "run_log.csv", run_id, "distill", rows);
        if (fs::exists(dir / "eval_log.csv")) add_log(dir / "eval_log.csv", run_id, "distill_eval", rows);
        known = true;
      }
      if (fs::exists(dir / "report.json")) {
        add_eval(dir / "report.json", run_id, rows);
        known = true;
      }
      if (fs::exists(dir / "manifest.json")) {
        add_trajectory(load_trajectory(dir), run_id, rows);
        known = true;
      } else if (!known) {
        for (const auto& e : expert_dirs(dir)) {
          add_trajectory(load_trajectory(e), run_id + "/" + e.filename().string(), rows);
          known = true;
        }
      }
      if (!known) throw std::runtime_error("no run_log.csv, report.json or trajectory manifest");
    } catch (const std::exception& e) {
      res.warnings.push_back("skipping " + dir.string() + ": " + e.what());
      continue;
    }
    res.rows.insert(res.rows.end(), rows.begin(), rows.end());
  }
  return res;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "run_id,phase,iteration,metric,value\n";
  for (const auto& r : rows)
    os << r.run_id << ',' << r.phase << ',' << r.iteration << ',' << r.metric << ',' << format_value(r.value) << '\n';
  return os.str();
}

std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "run_id,phase,iteration,metric,value") throw std::runtime_error("report csv: unexpected header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_cells(line);
    if (c.size() != 5) throw std::runtime_error("report csv: expected 5 cells in '" + line + "'");
    rows.push_back({c[0], c[1], std::stoll(c[2]), c[3], to_double(c[4], "report csv")});
  }
  return rows;
}

}  // namespace trajdistill
