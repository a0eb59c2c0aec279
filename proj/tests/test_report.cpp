#include <doctest.h>

#include "helpers.hpp"
#include "trajdistill/report.hpp"
#include "trajdistill/serialize.hpp"

#include <cmath>
#include <fstream>
#include <set>

using namespace trajdistill;
namespace fs = std::filesystem;

namespace {

Trajectory tiny(std::uint64_t seed) {
  const LabeledDataset d = gen_blobs(2, 6, {3}, 0.3, 1);
  return train_expert(d, ModelSpec{ModelKind::mlp, 1, 4, {3}, 2}, SmoothnessConfig::off(),
                      ExpertOptimizer{0.05, 0.9, 6, true}, 3, seed, &d);
}

}  // namespace

TEST_CASE("trajectory directories become per-epoch buffer rows") {
  testing::TempDir dir("rep_traj");
  const Trajectory t = tiny(1);
  save_trajectory(t, dir / "expert_000");
  const fs::path runs[] = {dir / "expert_000"};
  const ReportResult r = collect_report(runs);
  CHECK(r.warnings.empty());
  // 2 initial rows, 7 metrics per epoch, 1 avg_var
  CHECK(r.rows.size() == 2 + 7 * 3 + 1);
  CHECK(r.rows.back().metric == "avg_var");
  CHECK(r.rows.back().value == avg_var(t));
  for (const auto& row : r.rows) CHECK(row.phase == "buffer");
}

TEST_CASE("a buffer root expands to its experts, duplicates get distinct ids") {
  testing::TempDir dir("rep_root");
  save_trajectory(tiny(1), dir / "buf/expert_000");
  save_trajectory(tiny(2), dir / "buf/expert_001");
  const fs::path runs[] = {dir / "buf", dir / "buf"};
  const ReportResult r = collect_report(runs);
  std::set<std::string> ids;
  for (const auto& row : r.rows) ids.insert(row.run_id);
  CHECK(ids.size() == 4);
}

TEST_CASE("malformed runs are skipped with a warning") {
  testing::TempDir dir("rep_bad");
  fs::create_directories(dir / "empty");
  fs::create_directories(dir / "broken");
  std::ofstream(dir / "broken/run_log.csv") << "iteration,loss\n1,abc\n";
  fs::create_directories(dir / "good");
  std::ofstream(dir / "good/run_log.csv") << "iteration,loss,alpha\n1,0.5,0.01\n2,nan,0.01\n";
  const fs::path runs[] = {dir / "empty", dir / "broken", dir / "good", dir / "absent"};
  const ReportResult r = collect_report(runs);
  CHECK(r.warnings.size() == 3);
  CHECK(r.rows.size() == 4);
  CHECK(std::isnan(r.rows[2].value));
}

TEST_CASE("CSV output re-parses to identical rows") {
  std::vector<ReportRow> rows{{"a", "distill", 1, "loss", 0.1 + 0.2},
                              {"a", "distill", 2, "loss", 1e-300},
                              {"b", "eval", 0, "synthetic.accuracy", 2.0 / 3.0}};
  const std::string text = report_csv(rows);
  CHECK(parse_report_csv(text) == rows);
}
