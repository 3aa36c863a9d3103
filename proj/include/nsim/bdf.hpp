#pragma once

#include "nsim/fixed_step.hpp"
#include "nsim/model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

// Variable-order (1..5) variable-step BDF integrator with modified Newton
// iterations, weighted-norm local error control, and discontinuity-driven
// restart. History is kept as explicit (t, y) pairs and the method
// coefficients are regenerated from the actual past step ratios, which keeps
// restart semantics trivial -- restarts dominate this workload.

namespace nsim {

struct BdfOptions {
    double atol = 1e-3;
    double rtol = 0.0;
    int q_max = 5;
    double newton_tol = 0.1;   // nonlinear stop threshold, weighted norm
    int newton_max_iters = 4;
    double h_min = 1e-9;       // ms
    double h_max = 1e9;        // ms
    double safety = 0.9;
};

// Coefficients of Sum_i alpha_i * y_{n-i} = h * beta * f(t_n, y_n),
// normalized so alpha[0] = 1.
struct BdfCoeffs {
    Eigen::VectorXd alpha;  // size q+1
    double beta = 1.0;
};

// Fixed-step BDF-q coefficients (uniform history).
BdfCoeffs bdf_coefficients(int q);

// Variable-coefficient BDF-q from the actual history spacing;
// offsets[i-1] = t_n - t_{n-i} for i = 1..q, strictly increasing.
BdfCoeffs bdf_coefficients(int q, std::span<const double> offsets);

// The implicit system hook: right-hand side plus an approximate solve of
// (I - gamma*J) x = b used by the modified Newton iteration.
class BdfSystem {
public:
    virtual ~BdfSystem() = default;
    virtual int size() const = 0;
    virtual void rhs(double t, const Eigen::VectorXd& y, Eigen::VectorXd& dydt) = 0;
    virtual void lin_setup(double t, const Eigen::VectorXd& y, double gamma) = 0;
    virtual void lin_solve(Eigen::VectorXd& b) = 0;  // in place
};

struct BdfCounters {
    std::uint64_t steps_taken = 0;
    std::uint64_t rejections = 0;
    std::uint64_t newton_iters = 0;
    std::uint64_t resets = 0;
};

struct BdfState {
    // History of accepted points, ascending in time, newest last; never
    // longer than q_max + 1.
    std::vector<double> ht;
    std::vector<Eigen::VectorXd> hy;

    int q = 1;
    double h = 0.0;  // proposed size of the next step
    BdfOptions opt;
    BdfCounters counters;

    // Order-raise bookkeeping: corrector-predictor difference of the last
    // accepted step, valid only while the order is unchanged.
    Eigen::VectorXd prev_delta;
    double prev_h = 0.0;
    bool prev_delta_valid = false;
    int steps_at_q = 0;
    int consecutive_rejections = 0;
    bool rejected_since_accept = false;
    bool just_reset = true;

    double t() const { return ht.back(); }
    const Eigen::VectorXd& y() const { return hy.back(); }
};

// Weighted RMS norm with weights 1/(atol + rtol*|ref_i|).
double wrms_norm(const Eigen::VectorXd& v, const Eigen::VectorXd& ref, const BdfOptions& opt);

// Starts the integrator at (t0, y0): single-point history, order 1, initial
// step from the gradient heuristic h0 = 0.01 * atol / ||f||_w.
void bdf_init(BdfState& bdf, BdfSystem& sys, double t0, const Eigen::VectorXd& y0);

// Discontinuity restart: history cleared to the single post-jump point.
// Counts as a reset regardless of the jump magnitude.
void ivp_reset(BdfState& bdf, BdfSystem& sys, double t, const Eigen::VectorXd& y_post_jump);

// Dense output: evaluates the history polynomial through the newest
// min(q+1, len) points at time t.
Eigen::VectorXd bdf_interpolate(const BdfState& bdf, double t);

// One modified-Newton corrector solve of the BDF-q system at t_new from the
// given predictor. Returns false on convergence failure (step controller
// shrinks h and retries). gamma = h*beta; psi = -Sum_{i>=1} alpha_i y_{n-i}.
bool newton_solve(BdfSystem& sys, BdfState& bdf, double t_new, const Eigen::VectorXd& y_predict,
                  double gamma, const Eigen::VectorXd& psi, const Eigen::VectorXd& weights_ref,
                  Eigen::VectorXd& y_out);

struct ErrorTestResult {
    bool accept = false;
    double est = 0.0;     // weighted local error estimate; accept iff <= 1
    double h_next = 0.0;  // proposed h on accept, retry h on reject
    int q_next = 1;
};

// Local truncation error test from the corrector-predictor difference.
// gamma = h*beta of the attempted step; tau_qp1 = t_new - t_{n-q-1} when the
// history holds q+1 past points, else <= 0 (conservative constant is used).
ErrorTestResult error_test(BdfState& bdf, const Eigen::VectorXd& y_new,
                           const Eigen::VectorXd& y_predict, const Eigen::VectorXd& weights_ref,
                           double h_used, double gamma, double tau_qp1);

// Called after every accepted step; dense output over [t0, t1] is available
// through bdf_interpolate.
using StepObserver = std::function<void(const BdfState&, double t0, double t1)>;

// Integrates to exactly t_target without overstepping it: natural steps,
// with the final step clamped to land on the target. Throws SolverError on
// unrecoverable stiffness (h below h_min) or divergence.
void advance_to(BdfSystem& sys, BdfState& bdf, double t_target,
                const StepObserver& observer = {});

// Speculative variant: natural steps until the current time is >= t_past,
// free to overshoot it. Steps never pass t_limit (the nearest known event);
// returns true when the last step landed exactly on t_limit.
bool advance_past(BdfSystem& sys, BdfState& bdf, double t_past, double t_limit,
                  const StepObserver& observer = {});

// ---------------------------------------------------------------------------
// The compartmental-model system: tree-structured voltage coupling solved
// exactly by tree_solve, gating and synaptic rows treated diagonally.
class NeuronOde : public BdfSystem {
public:
    NeuronOde() = default;
    explicit NeuronOde(const CompartmentTree* tree) : tree_(tree) {}

    void set_injected_current(Eigen::VectorXd i_inj) { i_inj_ = std::move(i_inj); }
    const Eigen::VectorXd& injected_current() const { return i_inj_; }

    int size() const override { return tree_->n_states(); }
    void rhs(double t, const Eigen::VectorXd& y, Eigen::VectorXd& dydt) override {
        rhs_into(*tree_, t, y, i_inj_, dydt);
    }
    void lin_setup(double t, const Eigen::VectorXd& y, double gamma) override;
    void lin_solve(Eigen::VectorXd& b) override;

private:
    const CompartmentTree* tree_ = nullptr;
    Eigen::VectorXd i_inj_;
    double gamma_ = 0.0;
    Eigen::VectorXd diag0_, off0_;    // pristine voltage-block factors
    Eigen::VectorXd state_diag_;      // per gating/synapse row
    TreeMatrix m_;
    Eigen::VectorXd xv_;
};

}  // namespace nsim
