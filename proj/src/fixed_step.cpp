#include "nsim/fixed_step.hpp"

#include <cmath>

namespace nsim {

void tree_solve_inplace(TreeMatrix& m, Eigen::VectorXd& x) {
    const int n = int(m.parent.size());
    x.resize(n);
    for (int c = n - 1; c >= 1; --c) {
        if (m.diag[c] == 0.0)
            throw SolverError("singular tree matrix: zero pivot at compartment " + std::to_string(c));
        const int p = m.parent[c];
        const double f = m.off[c] / m.diag[c];
        m.diag[p] -= f * m.off[c];
        m.rhs[p] -= f * m.rhs[c];
    }
    if (m.diag[0] == 0.0) throw SolverError("singular tree matrix: zero pivot at compartment 0");
    x[0] = m.rhs[0] / m.diag[0];
    for (int c = 1; c < n; ++c) x[c] = (m.rhs[c] - m.off[c] * x[m.parent[c]]) / m.diag[c];
}

namespace {

// Implicit voltage advance with conductances frozen at the current gate
// values. Fills ws.v_new; leaves gates untouched.
void advance_voltage(const CompartmentTree& tree, const NeuronState& state, double dt,
                     const Eigen::VectorXd& i_inj, FixedStepWorkspace& ws) {
    const int n = tree.n_compartments;
    const Eigen::VectorXd& y = state.y;
    TreeMatrix& m = ws.m;
    if (int(m.parent.size()) != n) m = TreeMatrix::like(tree);

    for (int c = 0; c < n; ++c) {
        double g_tot = 0.0, ge_tot = 0.0;
        for (int k = 0; k < int(tree.mechanisms[c].size()); ++k) {
            const auto& mech = tree.mechanisms[c][k];
            double open = 1.0;
            for (int g = 0; g < mech.n_gates; ++g) {
                const double x = y[tree.gate_index(c, k, g)];
                for (int e = 0; e < mech.gate_exponents[g]; ++e) open *= x;
            }
            g_tot += mech.g_max * open;
            ge_tot += mech.g_max * open * mech.e_rev;
        }
        const double cdt = tree.capacitance[c] / dt;
        m.diag[c] = cdt + g_tot;
        m.rhs[c] = cdt * y[c] + ge_tot;
        if (i_inj.size() > c) m.rhs[c] += i_inj[c];
        m.off[c] = 0.0;
    }
    for (int s = 0; s < int(tree.synapses.size()); ++s) {
        const auto& slot = tree.synapses[s];
        const double g = y[tree.syn_index(s)];
        m.diag[slot.compartment] += g;
        m.rhs[slot.compartment] += g * slot.e_rev;
    }
    for (int c = 1; c < n; ++c) {
        const double inv_r = 1.0 / tree.axial_resistance[c];
        m.off[c] = -inv_r;
        m.diag[c] += inv_r;
        m.diag[tree.parent[c]] += inv_r;
    }
    tree_solve_inplace(m, ws.v_new);
    for (int c = 0; c < n; ++c)
        if (!std::isfinite(ws.v_new[c]))
            throw SolverError("fixed step diverged: non-finite voltage at compartment " + std::to_string(c));
}

double scalar_backward_euler(double x0, double dt, double a, double b,
                             double tol, int max_iters, const char* what) {
    // Solves x = x0 + dt*(a*(1-x) - b*x) by Newton iteration.
    double x = x0;
    for (int it = 0; it < max_iters; ++it) {
        const double f = a * (1.0 - x) - b * x;
        const double res = x - x0 - dt * f;
        const double slope = 1.0 + dt * (a + b);
        const double step = res / slope;
        x -= step;
        if (std::abs(step) <= tol) return x;
    }
    throw SolverError(std::string("backward-Euler Newton failed to converge for ") + what);
}

}  // namespace

void staggered_step_inplace(const CompartmentTree& tree, NeuronState& state, double dt,
                            const Eigen::VectorXd& i_inj, FixedStepWorkspace& ws,
                            bool euler_gates) {
    advance_voltage(tree, state, dt, i_inj, ws);
    Eigen::VectorXd& y = state.y;

    for (int c = 0; c < tree.n_compartments; ++c) {
        const double v = ws.v_new[c];
        for (int k = 0; k < int(tree.mechanisms[c].size()); ++k) {
            const auto& mech = tree.mechanisms[c][k];
            for (int g = 0; g < mech.n_gates; ++g) {
                const int gi = tree.gate_index(c, k, g);
                const double a = hh::alpha(mech.gates[g], v);
                const double b = hh::beta(mech.gates[g], v);
                const double x = y[gi];
                if (euler_gates) {
                    y[gi] = x + dt * (a * (1.0 - x) - b * x);
                } else {
                    const double xinf = a / (a + b);
                    y[gi] = xinf + (x - xinf) * std::exp(-dt * (a + b));
                }
            }
        }
    }
    for (int s = 0; s < int(tree.synapses.size()); ++s) {
        const int si = tree.syn_index(s);
        if (euler_gates)
            y[si] *= 1.0 - dt / tree.synapses[s].tau;
        else
            y[si] *= std::exp(-dt / tree.synapses[s].tau);
    }
    for (int c = 0; c < tree.n_compartments; ++c) y[c] = ws.v_new[c];
    state.t += dt;
}

void deriv_implicit_step_inplace(const CompartmentTree& tree, NeuronState& state, double dt,
                                 const Eigen::VectorXd& i_inj, FixedStepWorkspace& ws,
                                 double newton_tol, int newton_max_iters) {
    advance_voltage(tree, state, dt, i_inj, ws);
    Eigen::VectorXd& y = state.y;

    for (int c = 0; c < tree.n_compartments; ++c) {
        const double v = ws.v_new[c];
        for (int k = 0; k < int(tree.mechanisms[c].size()); ++k) {
            const auto& mech = tree.mechanisms[c][k];
            for (int g = 0; g < mech.n_gates; ++g) {
                const int gi = tree.gate_index(c, k, g);
                y[gi] = scalar_backward_euler(y[gi], dt, hh::alpha(mech.gates[g], v),
                                              hh::beta(mech.gates[g], v), newton_tol,
                                              newton_max_iters, "gate state");
            }
        }
    }
    for (int s = 0; s < int(tree.synapses.size()); ++s) {
        const int si = tree.syn_index(s);
        y[si] = scalar_backward_euler(y[si], dt, 0.0, 1.0 / tree.synapses[s].tau, newton_tol,
                                      newton_max_iters, "synapse state");
    }
    for (int c = 0; c < tree.n_compartments; ++c) y[c] = ws.v_new[c];
    state.t += dt;
}

NeuronState staggered_step(const CompartmentTree& tree, const NeuronState& state, double dt,
                           const Eigen::VectorXd& i_inj, bool euler_gates) {
    NeuronState out = state;
    FixedStepWorkspace ws;
    staggered_step_inplace(tree, out, dt, i_inj, ws, euler_gates);
    return out;
}

NeuronState deriv_implicit_step(const CompartmentTree& tree, const NeuronState& state, double dt,
                                const Eigen::VectorXd& i_inj, double newton_tol,
                                int newton_max_iters) {
    NeuronState out = state;
    FixedStepWorkspace ws;
    deriv_implicit_step_inplace(tree, out, dt, i_inj, ws, newton_tol, newton_max_iters);
    return out;
}

void fixed_step_inplace(const CompartmentTree& tree, NeuronState& state,
                        const FixedStepConfig& cfg, const Eigen::VectorXd& i_inj,
                        FixedStepWorkspace& ws) {
    switch (cfg.scheme) {
        case FixedScheme::staggered_linear:
            staggered_step_inplace(tree, state, cfg.dt, i_inj, ws, false);
            break;
        case FixedScheme::explicit_staggered_euler:
            staggered_step_inplace(tree, state, cfg.dt, i_inj, ws, true);
            break;
        case FixedScheme::deriv_implicit:
            deriv_implicit_step_inplace(tree, state, cfg.dt, i_inj, ws, cfg.newton_tol,
                                        cfg.newton_max_iters);
            break;
    }
}

}  // namespace nsim
