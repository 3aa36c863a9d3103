#pragma once

#include "nsim/netgen.hpp"
#include "nsim/output.hpp"

#include <string>
#include <vector>

// The four experiment suites: numerical accuracy (peak phase shift),
// stiffness sweep (step count vs drive), discontinuity-rate sweep (step
// count vs pulse frequency), and the five-regime network benchmark.

namespace nsim {

struct ExperimentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Signed time differences between paired voltage peaks of two traces.
// Both traces must contain the same nonzero number of spikes; a dropped or
// extra spike is itself a failure signal and raises ExperimentError.
struct PhaseShiftResult {
    double max_abs_shift = 0.0;
    std::vector<double> shifts;  // test peak time minus reference peak time
};

PhaseShiftResult phase_shift(const Trace& reference, const Trace& test,
                             double threshold = kSpikeThreshold);

// ---------------------------------------------------------------------------

struct AccuracyParams {
    MorphologySpec cell = MorphologySpec::hh_soma();
    double amplitude = 0.0;  // nA; 0 = 1.5x the cell threshold
    double t_stop = 100.0;
    double sample_dt = 0.025;
    double ref_dt = 0.001;
    double atol = 1e-3;
};

struct AccuracyCell {
    std::string name;
    double max_abs_shift = 0.0;
    double first_shift = 0.0;
    double last_shift = 0.0;
    std::uint64_t steps = 0;
    std::vector<double> shifts;
};

struct AccuracyResult {
    std::size_t ref_spikes = 0;
    double amplitude = 0.0;
    std::vector<AccuracyCell> cells;  // euler dt=0.025, cnexp dt=0.025, vardt atol
};

AccuracyResult accuracy_study(const AccuracyParams& p);

// ---------------------------------------------------------------------------

struct StiffnessParams {
    MorphologySpec cell = MorphologySpec::hh_soma();
    std::vector<double> fractions = {0.0, 0.25, 0.5, 0.75, 1.0, 1.5};
    double t_stop = 1000.0;
    double dt = 0.025;
    double atol = 1e-3;
    double threshold_current = 0.0;  // 0 = find it
};

struct StiffnessCell {
    double fraction = 0.0;
    double amplitude = 0.0;
    std::uint64_t fixed_steps = 0;
    std::uint64_t vardt_steps = 0;
    std::uint64_t vardt_spikes = 0;
    double fixed_wall = 0.0;
    double vardt_wall = 0.0;
    double reduction() const { return double(fixed_steps) / double(std::max<std::uint64_t>(vardt_steps, 1)); }
};

struct StiffnessResult {
    double threshold_current = 0.0;
    std::vector<StiffnessCell> cells;
};

StiffnessResult stiffness_sweep(const StiffnessParams& p);

// ---------------------------------------------------------------------------

struct CrossoverParams {
    MorphologySpec cell = MorphologySpec::hh_soma();
    std::vector<double> frequencies = {10.0, 31.62, 100.0, 316.2, 1000.0, 3162.0, 10000.0};
    double amplitude = 0.5;  // nA pulse amplitude
    double t_stop = 1000.0;
    double dt = 0.025;
    double atol = 1e-3;
};

struct CrossoverCell {
    double frequency = 0.0;
    std::uint64_t fixed_steps = 0;
    std::uint64_t vardt_steps = 0;
    std::uint64_t vardt_resets = 0;
    double ratio = 0.0;  // vardt / fixed
};

struct CrossoverResult {
    std::vector<CrossoverCell> cells;
    double crossover_hz = 0.0;  // log-interpolated ratio==1 frequency; 0 if none
};

CrossoverResult discontinuity_sweep(const CrossoverParams& p);

// ---------------------------------------------------------------------------

struct RegimeParams {
    NetworkSpec netspec;
    std::vector<double> target_rates = {0.25, 1.5, 6.5, 38.0, 55.8};
    double t_stop = 1000.0;
    double dt = 0.025;
    double atol = 1e-3;
    int repeats = 3;  // wall times are min-of-repeats
    int workers = 1;
    bool run_bsp_vardt = true;
};

struct RegimeCell {
    double target_rate = 0.0;
    double probe_rate = 0.0;
    double drive = 0.0;
    double measured_rate_vardt = 0.0;
    std::uint64_t fixed_steps = 0;
    std::uint64_t vardt_steps = 0;
    std::uint64_t vardt_resets = 0;
    std::uint64_t vardt_events = 0;
    std::uint64_t bsp_backsteps = 0;
    double fixed_wall = 0.0;  // min over repeats
    double vardt_wall = 0.0;
    std::uint64_t watchdog_fires = 0;
    std::vector<std::uint64_t> vardt_spikes_per_neuron;
    std::vector<SpikeRecord> vardt_spikes;
};

struct RegimeResult {
    double anchor_current = 0.0;
    std::vector<RegimeCell> cells;
    Network net;
    std::vector<CalibrationResult> calibrations;
};

RegimeResult regime_benchmark(const RegimeParams& p);

// ---------------------------------------------------------------------------

// CLI entry: runs the named suite with default parameters and writes
// delimited tables plus per-metric series files under out_dir. Returns false
// when any cell failed (the suite keeps going).
bool experiment_suite(const std::string& name, const std::string& out_dir, std::uint64_t seed);

}  // namespace nsim
