#pragma once

#include "nsim/bdf.hpp"
#include "nsim/fixed_step.hpp"
#include "nsim/network.hpp"
#include "nsim/output.hpp"

#include <cstdint>
#include <utility>
#include <vector>

// The four execution models over an in-process multi-worker message fabric:
// BSP fixed-step, BSP variable-step with speculation and backstepping, FAP
// fixed-step, and FAP variable-step with dependency maps and
// earliest-neuron-first scheduling. Workers are long-lived threads owning
// disjoint neuron sets; reliable per-pair-FIFO queues are the only
// cross-worker channel, and single-worker runs go through the same queues.

namespace nsim {

struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class EventKind { spike_delivery, step_notification, stimulus };

struct Event {
    EventKind kind = EventKind::spike_delivery;
    Gid sender = -1;
    Gid receiver = -1;
    double time = 0.0;        // delivery time (spike/stimulus) or notified time
    std::int64_t grid = -1;   // delivery step index in fixed-step engines
    int edge_index = -1;      // spike_delivery: index into Network::edges
    double value = 0.0;       // stimulus: voltage jump at the target compartment
    int compartment = 0;      // stimulus target compartment
};

// Smallest multiple of cell >= t, with a snap tolerance so values already on
// the grid stay put.
inline std::int64_t grid_ceil_index(double t, double cell) {
    const double q = t / cell;
    double k = std::ceil(q);
    if (k - q > 1.0 - 1e-9) k -= 1.0;
    return std::int64_t(k);
}

enum class Grouping { precise, half_step, full_step };

// Event-grouping map: precise keeps the exact delivery instant; half_step /
// full_step ceil it to the dt/2 / dt grid so one integrator reset serves
// every event mapped to the same instant.
inline double group_delivery_time(double t_event, Grouping mode, double dt) {
    switch (mode) {
        case Grouping::precise: return t_event;
        case Grouping::half_step: return double(grid_ceil_index(t_event, dt / 2)) * (dt / 2);
        case Grouping::full_step: return double(grid_ceil_index(t_event, dt)) * dt;
    }
    return t_event;
}

// Per-neuron knowledge of its pre-synaptic neurons' time advancement.
struct DependencyMap {
    struct Entry {
        Gid pre = -1;
        double last_known_time = 0.0;
        double min_edge_delay = 0.0;       // over all edges from pre to this neuron
        double notification_interval = 0.0;
    };
    std::vector<Entry> entries;  // sorted by pre gid

    Entry* find(Gid pre);
};

// Furthest time this neuron may safely reach: min over dependencies of
// (last known time + min edge delay); t_stop when it has none.
double max_step_time(const DependencyMap& dep, double t_stop);

// Min-priority queue of (neuron time, gid), ties broken by gid.
class SchedulerHeap {
public:
    void push(double t, Gid g);
    std::pair<double, Gid> pop();
    bool empty() const { return heap_.empty(); }
    std::size_t size() const { return heap_.size(); }

private:
    std::vector<std::pair<double, Gid>> heap_;
};

enum class EngineModel { bsp_fixed, bsp_vardt, fap_fixed, fap_vardt };

struct EngineConfig {
    EngineModel model = EngineModel::fap_vardt;
    int workers = 1;
    double comm_interval = 0.1;  // ms; BSP window, must equal the network min delay
    Grouping grouping = Grouping::precise;
    double t_stop = 100.0;       // ms; simulated interval is [0, t_stop)
    std::uint64_t seed = 0;
    bool random_placement = false;        // default round-robin by gid
    double notification_factor = 0.5;     // interval = factor * min edge delay
    std::uint64_t watchdog_limit = 1'000'000;

    std::vector<Gid> trace_gids;
    double trace_sample_dt = 0.025;  // ms
};

struct SolverConfig {
    FixedStepConfig fixed;
    BdfOptions bdf;
};

SimulationOutput bsp_fixed_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim = {});
SimulationOutput bsp_vardt_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim = {});
SimulationOutput fap_fixed_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim = {});
SimulationOutput fap_vardt_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim = {});

// Dispatches on cfg.model.
SimulationOutput run_engine(const Network& net, const EngineConfig& cfg,
                            const SolverConfig& solver, const StimulusSet& stim = {});

}  // namespace nsim
