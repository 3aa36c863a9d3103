#pragma once

#include "nsim/engine.hpp"
#include "nsim/network.hpp"

#include <cstdint>
#include <vector>

// Synthetic network and stimulus generation: desk-scale stand-ins for the
// reconstructed morphology datasets, with the delay statistics shaped to the
// same qualitative form (hard 0.1 ms floor, long tail, 7 ms cap).

namespace nsim {

struct NetgenError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NetworkSpec {
    int n_neurons = 64;
    double out_degree_mean = 16.0;
    double out_degree_jitter = 0.25;    // relative spread
    double excitatory_fraction = 0.34;  // AMPA/(AMPA+GABA) ratio of the reference data
    double weight_min = 0.0005;         // uS
    double weight_max = 0.002;
    double tau_exc = 2.0;  // ms
    double tau_inh = 8.0;
    double e_exc = 0.0;  // mV
    double e_inh = -80.0;

    // Delay model: point mass at the 0.1 ms floor plus a shifted log-normal
    // tail capped at 7 ms.
    double delay_floor_mass = 0.2;   // fraction of edges in the first 0.1 ms bin
    double delay_log_mu = 0.0;       // of the log-normal tail (ms)
    double delay_log_sigma = 0.8;
    double delay_cap = 7.0;

    // Per-neuron morphology: HH soma plus a small random dendritic tree.
    int compartments = 5;
    double scale_jitter = 0.3;  // relative cell-size heterogeneity

    std::uint64_t seed = 1;
};

struct StimulusProtocol {
    enum class Kind { continuous_clamp, pulse_train, regime_drive };
    Kind kind = Kind::continuous_clamp;
    std::vector<Gid> targets;

    double fraction_of_threshold = 0.0;  // continuous_clamp
    double amplitude = 0.0;              // pulse_train, nA
    double frequency = 0.0;              // pulse_train, Hz
    double target_rate = 0.0;            // regime_drive, Hz
    double duration = 1000.0;            // ms
};

struct GenerationSummary {
    std::vector<std::uint64_t> delay_histogram;  // 0.1 ms bins up to the cap
    std::vector<std::uint64_t> degree_histogram;
    double min_sampled_delay = 0.0;
    std::uint64_t n_edges = 0;
};

// Deterministic for a fixed spec (single RNG stream); self-edges excluded,
// every delay >= 0.1 ms.
Network generate_network(const NetworkSpec& spec, GenerationSummary* summary = nullptr);

// Minimum continuous soma current that elicits a spike, found by bisection
// on a 1000 ms reference run at dt = 0.001 ms until the bracket is within
// 0.1% of the threshold. Returns the upper bracket.
double find_threshold_current(const MorphologySpec& morph, double i_max = 100.0);

// Realizes a pulse-train protocol as instantaneous charge events at times
// k/frequency; each pulse jumps the soma voltage by amplitude*1us/C.
std::vector<PulseTrain> pulse_event_stream(const StimulusProtocol& protocol);

struct CalibrationResult {
    double drive = 0.0;          // common amplitude, nA
    double measured_rate = 0.0;  // Hz on the probe run
    std::vector<double> per_neuron_drive;
    std::vector<std::pair<double, double>> search_trace;  // (amplitude, rate)
};

// Secant/bisection search on a common drive amplitude (with fixed seeded
// per-neuron jitter) until the network mean rate over a 1 s fixed-step probe
// is within +-20% of the target. Throws NetgenError with the achieved rate
// when the target is unreachable.
CalibrationResult calibrate_regime_drive(const Network& net, double target_rate_hz,
                                         double anchor_current, std::uint64_t seed = 0,
                                         double tolerance = 0.2);

}  // namespace nsim
