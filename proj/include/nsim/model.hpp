#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Biophysical model core: compartmental trees, ion-channel mechanisms,
// conductance synapses, and the right-hand side of the coupled ODE system.
//
// Canonical units (consistent throughout): voltage mV, time ms,
// capacitance nF, conductance uS, axial resistance MOhm, current nA.
// With these, g*(V-E) [uS*mV] and (V-V')/r [mV/MOhm] are both nA, and
// nA/nF = mV/ms.

namespace nsim {

using Gid = std::int32_t;

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hodgkin-Huxley gate kinetics (classic squid-axon rates, shifted so that the
// resting potential sits near -65 mV).

enum class MechKind { Na, K, Leak };
enum class GateKind { m, h, n };

namespace hh {

// x/(1-exp(-x)) with the removable singularity at x=0 handled explicitly.
inline double exprelr(double x) {
    if (std::abs(x) < 1e-7) return 1.0 + 0.5 * x;
    return x / (-std::expm1(-x));
}

inline double alpha(GateKind g, double v) {
    switch (g) {
        case GateKind::m: return exprelr((v + 40.0) / 10.0);
        case GateKind::h: return 0.07 * std::exp(-(v + 65.0) / 20.0);
        case GateKind::n: return 0.1 * exprelr((v + 55.0) / 10.0);
    }
    return 0.0;
}

inline double beta(GateKind g, double v) {
    switch (g) {
        case GateKind::m: return 4.0 * std::exp(-(v + 65.0) / 18.0);
        case GateKind::h: return 1.0 / (1.0 + std::exp(-(v + 35.0) / 10.0));
        case GateKind::n: return 0.125 * std::exp(-(v + 65.0) / 80.0);
    }
    return 0.0;
}

inline double x_inf(GateKind g, double v) {
    const double a = alpha(g, v), b = beta(g, v);
    return a / (a + b);
}

inline double tau_x(GateKind g, double v) {
    return 1.0 / (alpha(g, v) + beta(g, v));
}

}  // namespace hh

// ---------------------------------------------------------------------------
// Domain types

struct MechanismInstance {
    MechKind kind = MechKind::Leak;
    double g_max = 0.0;   // maximal conductance, uS
    double e_rev = 0.0;   // reversal potential, mV
    int n_gates = 0;      // 0..2
    std::array<int, 2> gate_exponents{0, 0};
    std::array<GateKind, 2> gates{GateKind::m, GateKind::m};

    static MechanismInstance na(double g_max, double e_rev = 50.0) {
        return {MechKind::Na, g_max, e_rev, 2, {3, 1}, {GateKind::m, GateKind::h}};
    }
    static MechanismInstance k(double g_max, double e_rev = -77.0) {
        return {MechKind::K, g_max, e_rev, 1, {4, 0}, {GateKind::n, GateKind::m}};
    }
    static MechanismInstance leak(double g_max, double e_rev = -54.387) {
        return {MechKind::Leak, g_max, e_rev, 0, {0, 0}, {GateKind::m, GateKind::m}};
    }
};

// One exponential-decay conductance state; spikes arriving through an edge
// targeting this slot add the edge weight to the conductance.
struct SynapseSlot {
    int compartment = 0;
    double e_rev = 0.0;  // mV; 0 excitatory, -80 inhibitory
    double tau = 2.0;    // ms
};

// Branched morphology in topological order: parent[c] < c for every
// non-root compartment, parent[root] = -1.
struct CompartmentTree {
    int n_compartments = 0;
    std::vector<int> parent;                                // -1 for the root
    Eigen::VectorXd capacitance;                            // nF
    Eigen::VectorXd axial_resistance;                       // MOhm toward parent
    int soma_index = 0;                                     // spike-detection site
    std::vector<std::vector<MechanismInstance>> mechanisms; // per compartment
    std::vector<SynapseSlot> synapses;

    // Flat state layout: [V_0..V_{N-1} | gates (per compartment, per
    // mechanism, in order) | synapse conductances].
    std::vector<int> gate_offset;  // per compartment, start of its gate block
    int n_gates_total = 0;

    int n_states() const { return n_compartments + n_gates_total + int(synapses.size()); }
    int v_index(int c) const { return c; }
    int gate_index(int c, int mech, int gate) const;
    int syn_index(int slot) const { return n_compartments + n_gates_total + slot; }

    // Throws ModelError naming the offending compartment on any violated
    // structural invariant.
    void validate() const;
    void finalize_layout();
};

// Time-stamped flat state vector for one neuron.
struct NeuronState {
    double t = 0.0;      // ms
    Eigen::VectorXd y;
};

// Weighted, delayed connection between two neurons.
struct SynapseEdge {
    Gid pre_gid = 0;
    Gid post_gid = 0;
    int target_compartment = 0;
    double weight = 0.0;  // peak conductance jump, uS
    double e_syn = 0.0;   // mV
    double tau = 2.0;     // ms
    double delay = 0.1;   // ms; never below the network minimum delay
    int slot = -1;        // synapse slot index on the post neuron
};

constexpr double kMinDelay = 0.1;          // ms
constexpr double kSpikeThreshold = -30.0;  // mV, upward crossing at the soma
constexpr double kRestPotential = -65.0;   // mV

// ---------------------------------------------------------------------------
// Morphology construction

struct MorphologySpec {
    enum class Topology { chain, balanced_tree, random_tree };

    int n_compartments = 1;
    Topology topology = Topology::chain;
    std::uint64_t seed = 0;

    double soma_capacitance = 1.0;  // nF
    double gbar_na = 120.0;         // uS on the soma (0 disables)
    double gbar_k = 36.0;
    double gbar_leak = 0.3;
    double e_na = 50.0;
    double e_k = -77.0;
    double e_leak = -54.387;        // puts the HH rest near -65 mV

    double dend_capacitance = 0.2;  // nF per dendritic compartment
    double dend_gbar_leak = 0.02;
    double dend_e_leak = -65.0;
    double axial_res = 1.0;         // MOhm; jittered for random trees

    // Multiplies all capacitances and conductances (cell-size heterogeneity).
    double scale = 1.0;

    std::vector<SynapseSlot> synapses;

    static MorphologySpec passive_single(double c_nf, double g_us, double e_mv);
    static MorphologySpec hh_soma(double scale = 1.0);
    static MorphologySpec hh_tree(int n_compartments, std::uint64_t seed, double scale = 1.0);
};

// Instantiates a neuron at rest: V = -65 mV everywhere, gates at
// x_inf(-65), synaptic conductances at zero.
std::pair<CompartmentTree, NeuronState> build_neuron(const MorphologySpec& spec);

// ---------------------------------------------------------------------------
// Operations

// dy/dt of the full coupled system. i_inj is a per-compartment injected
// current (nA); pass an empty vector for none. Throws ModelError on
// non-finite input, identifying the state index.
void rhs_into(const CompartmentTree& tree, double t, const Eigen::VectorXd& y,
              const Eigen::VectorXd& i_inj, Eigen::VectorXd& dydt);

Eigen::VectorXd rhs(const CompartmentTree& tree, double t, const Eigen::VectorXd& y,
                    const Eigen::VectorXd& i_inj = Eigen::VectorXd());

// Upward threshold crossings of a time-ordered (t, V) trace, linearly
// interpolated between samples. No crossing is reported while V stays above
// threshold.
std::vector<double> detect_spike(const std::vector<std::pair<double, double>>& segment,
                                 double threshold);

// Applies a synaptic discontinuity: the targeted conductance state jumps by
// the edge weight; every other entry is untouched.
void apply_synaptic_event(const CompartmentTree& tree, NeuronState& state,
                          int slot, double weight);

}  // namespace nsim
