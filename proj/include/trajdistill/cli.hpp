#pragma once

#include "trajdistill/config.hpp"

#include <filesystem>
#include <ostream>
#include <span>

namespace trajdistill {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,      // invalid config or input
  kExitNumerical = 3,   // training or distillation aborted
  kExitVerification = 4,
};

/// Entry point of the `trajdistill` executable.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Subcommands. Each writes its outputs and config.json under `out_dir`, and
// reports failures by throwing; run_cli maps exceptions to exit codes.
void cmd_buffer(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void cmd_distill(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void cmd_eval(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
/// Returns false when any check fails. `out_dir` may be empty.
bool cmd_gradcheck(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void cmd_report(std::span<const std::filesystem::path> runs, const std::filesystem::path& out_dir,
                std::ostream& log, std::ostream& warn);

/// Worker cap: TOOL_THREADS when set to a positive integer, else the
/// hardware concurrency (at least 1).
int thread_cap();

}  // namespace trajdistill
