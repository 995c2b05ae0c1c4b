#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "aspf/model.hpp"
#include "aspf/training.hpp"

namespace aspf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Runs one command line; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct RunConfig {
  ModelSpec model;
  TrainConfig train;
};

// {"model": {...}, "train": {...}}. "train" may be omitted for defaults; any
// other top-level key is rejected with kConfig.
RunConfig parse_run_config(std::string_view json);

}  // namespace aspf::cli
