#pragma once

#include "nsim/model.hpp"

#include <Eigen/Dense>

namespace nsim {

struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class FixedScheme { staggered_linear, explicit_staggered_euler, deriv_implicit };

struct FixedStepConfig {
    double dt = 0.025;  // ms
    FixedScheme scheme = FixedScheme::staggered_linear;
    double newton_tol = 1e-9;  // deriv_implicit per-state stop threshold
    int newton_max_iters = 50;
};

// Symmetric tree-structured linear system: one diagonal entry per
// compartment, one off-diagonal entry per parent link (entry c couples c and
// parent[c]; entry 0 is unused). Solvable in one sweep whenever the parent
// indices are topologically ordered.
struct TreeMatrix {
    std::vector<int> parent;
    Eigen::VectorXd diag;
    Eigen::VectorXd off;
    Eigen::VectorXd rhs;

    static TreeMatrix like(const CompartmentTree& tree) {
        TreeMatrix m;
        m.parent = tree.parent;
        const int n = tree.n_compartments;
        m.diag.setZero(n);
        m.off.setZero(n);
        m.rhs.setZero(n);
        return m;
    }
};

// Destructive elimination + back-substitution, linear in the compartment
// count. Throws SolverError with the compartment index on a zero pivot.
void tree_solve_inplace(TreeMatrix& m, Eigen::VectorXd& x);

inline Eigen::VectorXd tree_solve(TreeMatrix m) {
    Eigen::VectorXd x;
    tree_solve_inplace(m, x);
    return x;
}

// Scratch space shared by the fixed-step schemes; reuse across steps to keep
// the hot loop allocation-free.
struct FixedStepWorkspace {
    TreeMatrix m;
    Eigen::VectorXd v_new;
};

// One fixed step of the staggered scheme: voltage advanced implicitly with
// channel conductances frozen at the (staggered) gate values, then gates and
// synapse states advanced at the new voltage -- analytically
// (staggered_linear) or by one explicit Euler update
// (explicit_staggered_euler).
void staggered_step_inplace(const CompartmentTree& tree, NeuronState& state, double dt,
                            const Eigen::VectorXd& i_inj, FixedStepWorkspace& ws,
                            bool euler_gates = false);

// One fixed step of the fully-implicit mechanism scheme: voltage as above,
// then every gate and synapse state advanced by one Backward-Euler solve
// (per-state scalar Newton). Newton failure is fatal; the fixed-step
// contract has no step-size recourse.
void deriv_implicit_step_inplace(const CompartmentTree& tree, NeuronState& state, double dt,
                                 const Eigen::VectorXd& i_inj, FixedStepWorkspace& ws,
                                 double newton_tol = 1e-9, int newton_max_iters = 50);

// Convenience copies for tests and one-off callers.
NeuronState staggered_step(const CompartmentTree& tree, const NeuronState& state, double dt,
                           const Eigen::VectorXd& i_inj = Eigen::VectorXd(),
                           bool euler_gates = false);
NeuronState deriv_implicit_step(const CompartmentTree& tree, const NeuronState& state, double dt,
                                const Eigen::VectorXd& i_inj = Eigen::VectorXd(),
                                double newton_tol = 1e-9, int newton_max_iters = 50);

// Dispatches on cfg.scheme.
void fixed_step_inplace(const CompartmentTree& tree, NeuronState& state,
                        const FixedStepConfig& cfg, const Eigen::VectorXd& i_inj,
                        FixedStepWorkspace& ws);

}  // namespace nsim
