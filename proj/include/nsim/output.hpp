#pragma once

#include "nsim/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nsim {

struct SpikeRecord {
    Gid gid = 0;
    double time = 0.0;
};

struct NeuronCounters {
    std::uint64_t steps = 0;
    std::uint64_t rejections = 0;
    std::uint64_t newton_iters = 0;
    std::uint64_t resets = 0;
    std::uint64_t backsteps = 0;
    std::uint64_t events_applied = 0;
    std::uint64_t event_batches = 0;
    std::uint64_t notifications_sent = 0;
    std::uint64_t spikes = 0;
};

struct EngineTotals {
    std::uint64_t steps = 0;
    std::uint64_t rejections = 0;
    std::uint64_t newton_iters = 0;
    std::uint64_t resets = 0;
    std::uint64_t backsteps = 0;
    std::uint64_t events_sent = 0;
    std::uint64_t events_received = 0;
    std::uint64_t events_applied = 0;
    std::uint64_t event_batches = 0;
    std::uint64_t notifications = 0;
    std::uint64_t max_queue_depth = 0;
    std::uint64_t watchdog_fires = 0;
};

using Trace = std::vector<std::pair<double, double>>;  // (t, V_soma)

struct SimulationOutput {
    std::vector<SpikeRecord> spikes;                  // sorted by (time, gid)
    std::vector<std::pair<Gid, Trace>> traces;        // sorted by gid
    std::vector<NeuronCounters> per_neuron;
    EngineTotals totals;
    double wall_seconds = 0.0;
    std::vector<std::string> audit;                   // protocol audit lines

    // Recomputes the per-neuron sums in totals (message counters are owned
    // by the engine and left untouched).
    void fold_neuron_totals();
};

void write_spikes(const SimulationOutput& out, const std::string& path);
std::vector<SpikeRecord> read_spikes(const std::string& path);
void write_traces(const SimulationOutput& out, const std::string& dir);
void write_counters(const SimulationOutput& out, const std::string& path);
void write_audit(const SimulationOutput& out, const std::string& path);
void write_summary_json(const SimulationOutput& out, const std::string& path);

}  // namespace nsim
