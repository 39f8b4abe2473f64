#pragma once

// Command-line harness: `sep gen`, `sep run`, `sep eval`.

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "sep/expfam.hpp"

namespace sep::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kOutputDirEnv = "SEP_OUTPUT_DIR";

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
  kExitInterrupted = 130,
};

/// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

nlohmann::json blocks_to_json(const MomentBlocks& blocks);
MomentBlocks blocks_from_json(const nlohmann::json& j);

/// Shortest decimal form that reads back to the same double; "nan" for NaN.
std::string format_double(double v);

}  // namespace sep::cli
