#pragma once

#include "nsim/engine.hpp"

#include <string>

namespace nsim {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One run = one engine + one solver scheme + a network (+ optional stimulus),
// loadable from a key=value file with CLI overrides applied on top.
struct RunConfig {
    EngineConfig engine;
    SolverConfig solver;
    std::string network_path;
    std::string stimulus_path;
    std::string out_dir = "out";
    bool comm_auto = true;  // comm interval follows the network min delay
};

// Applies one key=value setting; throws ConfigError on unknown keys or
// unparseable values.
void apply_setting(RunConfig& rc, const std::string& key, const std::string& value);

RunConfig load_run_config(const std::string& path);

// Executes the configured run and writes spikes, counters, traces, audit
// log, and a machine-readable summary into out_dir.
SimulationOutput run(const RunConfig& rc);

}  // namespace nsim
