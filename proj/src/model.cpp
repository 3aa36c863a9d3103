#include "nsim/model.hpp"

#include <cmath>
#include <random>

namespace nsim {

int CompartmentTree::gate_index(int c, int mech, int gate) const {
    int idx = gate_offset[c];
    for (int m = 0; m < mech; ++m) idx += mechanisms[c][m].n_gates;
    return n_compartments + idx + gate;
}

void CompartmentTree::finalize_layout() {
    gate_offset.assign(n_compartments, 0);
    int running = 0;
    for (int c = 0; c < n_compartments; ++c) {
        gate_offset[c] = running;
        for (const auto& m : mechanisms[c]) running += m.n_gates;
    }
    n_gates_total = running;
}

void CompartmentTree::validate() const {
    const int n = n_compartments;
    if (n < 1) throw ModelError("tree has no compartments");
    if (int(parent.size()) != n || int(mechanisms.size()) != n ||
        capacitance.size() != n || axial_resistance.size() != n)
        throw ModelError("tree arrays disagree on compartment count");

    int roots = 0;
    for (int c = 0; c < n; ++c) {
        const int p = parent[c];
        if (p < 0) {
            ++roots;
        } else if (p >= c) {
            throw ModelError("compartment " + std::to_string(c) +
                             ": parent index " + std::to_string(p) +
                             " violates topological order");
        }
        if (!(capacitance[c] > 0.0))
            throw ModelError("compartment " + std::to_string(c) + ": capacitance must be positive");
        if (!(axial_resistance[c] > 0.0))
            throw ModelError("compartment " + std::to_string(c) + ": axial resistance must be positive");
        for (const auto& m : mechanisms[c]) {
            if (m.g_max < 0.0)
                throw ModelError("compartment " + std::to_string(c) + ": negative conductance");
            if (m.n_gates < 0 || m.n_gates > 2)
                throw ModelError("compartment " + std::to_string(c) + ": gate count out of range");
        }
    }
    if (roots != 1) throw ModelError("tree must have exactly one root, found " + std::to_string(roots));
    for (const auto& s : synapses) {
        if (s.compartment < 0 || s.compartment >= n)
            throw ModelError("synapse slot targets unknown compartment " + std::to_string(s.compartment));
        if (!(s.tau > 0.0)) throw ModelError("synapse slot tau must be positive");
    }
    if (soma_index < 0 || soma_index >= n) throw ModelError("soma index out of range");
}

// ---------------------------------------------------------------------------

MorphologySpec MorphologySpec::passive_single(double c_nf, double g_us, double e_mv) {
    MorphologySpec s;
    s.n_compartments = 1;
    s.soma_capacitance = c_nf;
    s.gbar_na = 0.0;
    s.gbar_k = 0.0;
    s.gbar_leak = g_us;
    s.e_leak = e_mv;
    return s;
}

MorphologySpec MorphologySpec::hh_soma(double scale) {
    MorphologySpec s;
    s.n_compartments = 1;
    s.scale = scale;
    return s;
}

MorphologySpec MorphologySpec::hh_tree(int n_compartments, std::uint64_t seed, double scale) {
    MorphologySpec s;
    s.n_compartments = n_compartments;
    s.topology = Topology::random_tree;
    s.seed = seed;
    s.scale = scale;
    return s;
}

std::pair<CompartmentTree, NeuronState> build_neuron(const MorphologySpec& spec) {
    const int n = spec.n_compartments;
    if (n < 1) throw ModelError("morphology spec: compartment count must be >= 1");

    CompartmentTree tree;
    tree.n_compartments = n;
    tree.parent.assign(n, -1);
    tree.capacitance.resize(n);
    tree.axial_resistance.resize(n);
    tree.mechanisms.resize(n);
    tree.soma_index = 0;
    tree.synapses = spec.synapses;

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> jitter(0.7, 1.3);

    for (int c = 1; c < n; ++c) {
        switch (spec.topology) {
            case MorphologySpec::Topology::chain:
                tree.parent[c] = c - 1;
                break;
            case MorphologySpec::Topology::balanced_tree:
                tree.parent[c] = (c - 1) / 2;
                break;
            case MorphologySpec::Topology::random_tree: {
                // Pick any earlier compartment with fewer than two children.
                std::vector<int> child_count(c, 0);
                for (int k = 1; k < c; ++k) ++child_count[tree.parent[k]];
                std::vector<int> open;
                for (int k = 0; k < c; ++k)
                    if (child_count[k] < 2) open.push_back(k);
                tree.parent[c] = open[std::uniform_int_distribution<int>(0, int(open.size()) - 1)(rng)];
                break;
            }
        }
    }

    const bool random = spec.topology == MorphologySpec::Topology::random_tree;
    tree.capacitance[0] = spec.soma_capacitance * spec.scale;
    tree.axial_resistance[0] = 1.0;  // root entry, unused by the model
    tree.mechanisms[0] = {MechanismInstance::na(spec.gbar_na * spec.scale, spec.e_na),
                          MechanismInstance::k(spec.gbar_k * spec.scale, spec.e_k),
                          MechanismInstance::leak(spec.gbar_leak * spec.scale, spec.e_leak)};
    if (spec.gbar_na == 0.0 && spec.gbar_k == 0.0)
        tree.mechanisms[0] = {MechanismInstance::leak(spec.gbar_leak * spec.scale, spec.e_leak)};

    for (int c = 1; c < n; ++c) {
        const double j1 = random ? jitter(rng) : 1.0;
        const double j2 = random ? jitter(rng) : 1.0;
        tree.capacitance[c] = spec.dend_capacitance * spec.scale * j1;
        tree.axial_resistance[c] = spec.axial_res * j2;
        tree.mechanisms[c] = {MechanismInstance::leak(spec.dend_gbar_leak * spec.scale * j1, spec.dend_e_leak)};
    }

    tree.finalize_layout();
    tree.validate();

    NeuronState state;
    state.t = 0.0;
    state.y.resize(tree.n_states());
    for (int c = 0; c < n; ++c) state.y[tree.v_index(c)] = kRestPotential;
    for (int c = 0; c < n; ++c)
        for (int m = 0; m < int(tree.mechanisms[c].size()); ++m) {
            const auto& mech = tree.mechanisms[c][m];
            for (int g = 0; g < mech.n_gates; ++g)
                state.y[tree.gate_index(c, m, g)] = hh::x_inf(mech.gates[g], kRestPotential);
        }
    for (int s = 0; s < int(tree.synapses.size()); ++s) state.y[tree.syn_index(s)] = 0.0;
    return {std::move(tree), std::move(state)};
}

// ---------------------------------------------------------------------------

void rhs_into(const CompartmentTree& tree, double /*t*/, const Eigen::VectorXd& y,
              const Eigen::VectorXd& i_inj, Eigen::VectorXd& dydt) {
    const int n = tree.n_compartments;
    for (int i = 0; i < y.size(); ++i)
        if (!std::isfinite(y[i]))
            throw ModelError("non-finite state entry at index " + std::to_string(i));

    dydt.resize(y.size());
    dydt.setZero();

    // Accumulate membrane currents in nA, divide by C at the end.
    for (int c = 0; c < n; ++c) {
        const double v = y[c];
        double current = 0.0;

        for (int m = 0; m < int(tree.mechanisms[c].size()); ++m) {
            const auto& mech = tree.mechanisms[c][m];
            double open = 1.0;
            for (int g = 0; g < mech.n_gates; ++g) {
                const int gi = tree.gate_index(c, m, g);
                const double x = y[gi];
                double p = 1.0;
                for (int e = 0; e < mech.gate_exponents[g]; ++e) p *= x;
                open *= p;
                dydt[gi] = hh::alpha(mech.gates[g], v) * (1.0 - x) - hh::beta(mech.gates[g], v) * x;
            }
            current -= mech.g_max * open * (v - mech.e_rev);
        }
        if (i_inj.size() > c) current += i_inj[c];
        dydt[c] = current;
    }

    // Axial currents: equal and opposite transfer across each parent link.
    for (int c = 1; c < n; ++c) {
        const int p = tree.parent[c];
        const double ax = (y[p] - y[c]) / tree.axial_resistance[c];
        dydt[c] += ax;
        dydt[p] -= ax;
    }

    for (int s = 0; s < int(tree.synapses.size()); ++s) {
        const auto& slot = tree.synapses[s];
        const double g = y[tree.syn_index(s)];
        dydt[tree.syn_index(s)] = -g / slot.tau;
        dydt[slot.compartment] -= g * (y[slot.compartment] - slot.e_rev);
    }

    for (int c = 0; c < n; ++c) dydt[c] /= tree.capacitance[c];
}

Eigen::VectorXd rhs(const CompartmentTree& tree, double t, const Eigen::VectorXd& y,
                    const Eigen::VectorXd& i_inj) {
    Eigen::VectorXd dydt;
    rhs_into(tree, t, y, i_inj, dydt);
    return dydt;
}

std::vector<double> detect_spike(const std::vector<std::pair<double, double>>& segment,
                                 double threshold) {
    std::vector<double> spikes;
    if (segment.empty()) return spikes;
    bool armed = segment.front().second < threshold;
    for (std::size_t i = 1; i < segment.size(); ++i) {
        const auto [t0, v0] = segment[i - 1];
        const auto [t1, v1] = segment[i];
        if (armed && v1 >= threshold && v0 < threshold) {
            spikes.push_back(t0 + (t1 - t0) * (threshold - v0) / (v1 - v0));
            armed = false;
        } else if (!armed && v1 < threshold) {
            armed = true;
        }
    }
    return spikes;
}

void apply_synaptic_event(const CompartmentTree& tree, NeuronState& state,
                          int slot, double weight) {
    if (slot < 0 || slot >= int(tree.synapses.size()))
        throw ModelError("synaptic event targets unknown slot " + std::to_string(slot));
    state.y[tree.syn_index(slot)] += weight;
}

}  // namespace nsim
