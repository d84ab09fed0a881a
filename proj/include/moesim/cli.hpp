// cli.hpp - the moesim command line: generate, run, sweep, calibrate, analyze
//
// Every command accepts --config FILE with flat key=value lines whose keys are
// the long flag names; flags given on the command line win. List-valued
// flags take comma-separated values.
//
// Policies are written as a preset name optionally followed by overrides,
// e.g. "full:cache=lru+prefetch=0". Override keys: scheduling, cache,
// prefetch, accuracy, horizon, alpha, decay, fill, frozen, split, pin.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "moesim/engine.hpp"

namespace moesim {

enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitData = 2,
    kExitInternal = 3,
};

// Throws ContractError on an unknown preset, key, or malformed value.
EnginePolicy parse_policy_spec(const std::string& spec);

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace moesim
