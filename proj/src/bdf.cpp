#include "nsim/bdf.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace nsim {

namespace {

// Uniform-step local-error constants, used only to gate order raises; the
// error test itself uses the spacing-exact constant gamma/(tau_{q+1}-gamma).
constexpr std::array<double, 6> kErr = {0.0, 1.0, 2.0 / 7.0, 3.0 / 19.0, 12.0 / 113.0, 10.0 / 127.0};

// Newton divided-difference interpolation through the newest p history
// points, evaluated at t.
Eigen::VectorXd poly_eval(const std::vector<double>& ht, const std::vector<Eigen::VectorXd>& hy,
                          int p, double t) {
    const int len = int(ht.size());
    const int start = len - p;
    std::array<double, 8> ts{};
    std::array<Eigen::VectorXd, 8> dd;
    for (int i = 0; i < p; ++i) {
        ts[i] = ht[start + i];
        dd[i] = hy[start + i];
    }
    for (int level = 1; level < p; ++level)
        for (int i = p - 1; i >= level; --i)
            dd[i] = (dd[i] - dd[i - 1]) / (ts[i] - ts[i - level]);
    Eigen::VectorXd r = dd[p - 1];
    for (int i = p - 2; i >= 0; --i) r = (r * (t - ts[i]) + dd[i]).eval();
    return r;
}

}  // namespace

double wrms_norm(const Eigen::VectorXd& v, const Eigen::VectorXd& ref, const BdfOptions& opt) {
    const int n = int(v.size());
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double w = 1.0 / (opt.atol + opt.rtol * std::abs(ref[i]));
        const double s = v[i] * w;
        acc += s * s;
    }
    return std::sqrt(acc / n);
}

BdfCoeffs bdf_coefficients(int q, std::span<const double> offsets) {
    if (q < 1 || q > 5) throw SolverError("BDF order out of range: " + std::to_string(q));
    if (int(offsets.size()) < q) throw SolverError("BDF coefficients: not enough history offsets");

    double c0 = 0.0;
    for (int i = 0; i < q; ++i) c0 += 1.0 / offsets[i];

    BdfCoeffs out;
    out.alpha.resize(q + 1);
    out.alpha[0] = 1.0;
    for (int j = 1; j <= q; ++j) {
        double num = 1.0;
        double den = offsets[j - 1];
        for (int m = 1; m <= q; ++m) {
            if (m == j) continue;
            num *= offsets[m - 1];
            den *= offsets[m - 1] - offsets[j - 1];
        }
        out.alpha[j] = (-num / den) / c0;
    }
    out.beta = 1.0 / (offsets[0] * c0);
    return out;
}

BdfCoeffs bdf_coefficients(int q) {
    std::array<double, 5> uniform = {1, 2, 3, 4, 5};
    return bdf_coefficients(q, std::span<const double>(uniform.data(), q));
}

void bdf_init(BdfState& bdf, BdfSystem& sys, double t0, const Eigen::VectorXd& y0) {
    bdf.ht.assign(1, t0);
    bdf.hy.assign(1, y0);
    bdf.q = 1;
    bdf.steps_at_q = 0;
    bdf.prev_delta_valid = false;
    bdf.consecutive_rejections = 0;
    bdf.just_reset = true;

    Eigen::VectorXd f(sys.size());
    sys.rhs(t0, y0, f);
    const double fn = wrms_norm(f, y0, bdf.opt);
    const double h0 = 0.01 * bdf.opt.atol / std::max(fn, 1e-300);
    bdf.h = std::clamp(h0, bdf.opt.h_min, bdf.opt.h_max);
}

void ivp_reset(BdfState& bdf, BdfSystem& sys, double t, const Eigen::VectorXd& y_post_jump) {
    bdf_init(bdf, sys, t, y_post_jump);
    ++bdf.counters.resets;
}

Eigen::VectorXd bdf_interpolate(const BdfState& bdf, double t) {
    const int len = int(bdf.ht.size());
    if (len == 0) throw SolverError("interpolate on empty history");
    const int p = std::min(bdf.q + 1, len);
    return poly_eval(bdf.ht, bdf.hy, p, t);
}

bool newton_solve(BdfSystem& sys, BdfState& bdf, double t_new, const Eigen::VectorXd& y_predict,
                  double gamma, const Eigen::VectorXd& psi, const Eigen::VectorXd& weights_ref,
                  Eigen::VectorXd& y_out) {
    y_out = y_predict;
    Eigen::VectorXd f(sys.size()), delta(sys.size());
    double crate = 1.0, dn_prev = -1.0;

    for (int m = 0; m < bdf.opt.newton_max_iters; ++m) {
        try {
            sys.rhs(t_new, y_out, f);
        } catch (const ModelError&) {
            return false;  // iterate left the finite domain; retry smaller
        }
        delta = -(y_out - gamma * f - psi);
        sys.lin_solve(delta);
        y_out += delta;
        ++bdf.counters.newton_iters;

        const double dn = wrms_norm(delta, weights_ref, bdf.opt);
        if (!std::isfinite(dn)) return false;
        if (m > 0) crate = std::max(0.3 * crate, dn / std::max(dn_prev, 1e-300));
        if (dn * std::min(1.0, crate) <= bdf.opt.newton_tol) return true;
        if (m > 0 && dn > 2.0 * dn_prev) return false;
        dn_prev = dn;
    }
    return false;
}

ErrorTestResult error_test(BdfState& bdf, const Eigen::VectorXd& y_new,
                           const Eigen::VectorXd& y_predict, const Eigen::VectorXd& weights_ref,
                           double h_used, double gamma, double tau_qp1) {
    const int q = bdf.q;
    const Eigen::VectorXd delta = y_new - y_predict;

    // With q+1 past points the predictor error is D*prod(tau_1..tau_{q+1})
    // and the corrector error is gamma*D*prod(tau_1..tau_q) for the same
    // divided difference D, so the scale factor between ||delta|| and the
    // truncation error is gamma/(tau_{q+1}-gamma). Right after a reset the
    // predictor is one degree short; fall back to the conservative factor 1.
    const double k = tau_qp1 > gamma ? gamma / (tau_qp1 - gamma) : 1.0;
    const double est = k * wrms_norm(delta, weights_ref, bdf.opt);

    ErrorTestResult res;
    res.est = est;
    res.q_next = q;

    if (!(est <= 1.0)) {
        res.accept = false;
        res.h_next = h_used * std::max(0.1, bdf.opt.safety * std::pow(est, -1.0 / (q + 1)));
        return res;
    }

    res.accept = true;
    double est_for_h = est;
    int h_exponent = q + 1;

    const bool can_raise = q < bdf.opt.q_max && int(bdf.ht.size()) >= q + 1 &&
                           bdf.steps_at_q + 1 >= q + 1 && bdf.prev_delta_valid &&
                           !bdf.rejected_since_accept;
    if (can_raise) {
        const double ratio = std::pow(h_used / bdf.prev_h, q + 1);
        const double est_up =
            kErr[q + 1] * wrms_norm(delta - ratio * bdf.prev_delta, weights_ref, bdf.opt);
        if (est_up <= est) {
            res.q_next = q + 1;
            est_for_h = est_up;
            h_exponent = q + 2;
        }
    }

    const double cap = q == 1 ? 10.0 : 2.0;
    double factor = est_for_h > 0.0 ? bdf.opt.safety * std::pow(est_for_h, -1.0 / h_exponent)
                                    : std::numeric_limits<double>::infinity();
    factor = std::min(factor, cap);
    // Hysteresis: no growth straight after a rejection, and no sub-1.5x
    // nudges that would churn the method coefficients.
    if (bdf.rejected_since_accept) factor = std::min(factor, 1.0);
    if (factor > 1.0 && factor < 1.5) factor = 1.0;
    res.h_next = h_used * factor;
    return res;
}

namespace {

// One accepted step, including the rejection/retry loop. The step size never
// exceeds t_cap - t; returns true when the step landed exactly on t_cap.
bool step_once(BdfSystem& sys, BdfState& bdf, double t_cap, const StepObserver& observer) {
    Eigen::VectorXd psi(sys.size()), pred, y_new;
    std::uint64_t attempts = 0;

    while (true) {
        const double t_now = bdf.t();
        const double remaining = t_cap - t_now;
        if (++attempts > 10'000'000ULL)
            throw SolverError("BDF step watchdog tripped at t=" + std::to_string(t_now));

        const int len = int(bdf.ht.size());
        if (bdf.q > len) bdf.q = len;

        double h_used = std::clamp(bdf.h, bdf.opt.h_min, bdf.opt.h_max);
        const bool clamped = h_used >= remaining;
        if (clamped) h_used = remaining;
        const double t_new = clamped ? t_cap : t_now + h_used;

        // Degenerate spacing (a tiny clamped step against old wide history)
        // is handled by dropping to an order the node ratios can support.
        std::array<double, 6> tau{};
        int q_ok = bdf.q;
        for (int i = 1; i <= bdf.q; ++i) {
            tau[i - 1] = t_new - bdf.ht[len - i];
            if (i > 1 && tau[i - 1] / tau[0] > 1e8) {
                q_ok = i - 1;
                break;
            }
        }
        if (q_ok != bdf.q) {
            bdf.q = q_ok;
            bdf.steps_at_q = 0;
            bdf.prev_delta_valid = false;
        }
        const int q = bdf.q;

        const BdfCoeffs coeffs = bdf_coefficients(q, std::span<const double>(tau.data(), q));
        psi.setZero();
        for (int i = 1; i <= q; ++i) psi -= coeffs.alpha[i] * bdf.hy[len - i];
        const double gamma = h_used * coeffs.beta;

        pred = poly_eval(bdf.ht, bdf.hy, std::min(q + 1, len), t_new);

        bool newton_ok = false;
        try {
            sys.lin_setup(t_new, pred, gamma);
            newton_ok = newton_solve(sys, bdf, t_new, pred, gamma, psi, pred, y_new);
        } catch (const ModelError&) {
            newton_ok = false;
        }

        const bool at_floor = h_used <= bdf.opt.h_min * (1.0 + 1e-9);
        if (!newton_ok) {
            ++bdf.counters.rejections;
            ++bdf.consecutive_rejections;
            bdf.rejected_since_accept = true;
            if (bdf.consecutive_rejections >= 2 && bdf.q > 1) {
                --bdf.q;
                bdf.steps_at_q = 0;
                bdf.prev_delta_valid = false;
            }
            if (at_floor)
                throw SolverError("Newton failure at minimum step size, t=" + std::to_string(t_now));
            bdf.h = std::max(h_used * 0.25, bdf.opt.h_min);
            continue;
        }

        const double tau_qp1 = len >= bdf.q + 1 ? t_new - bdf.ht[len - bdf.q - 1] : -1.0;
        const ErrorTestResult res = error_test(bdf, y_new, pred, pred, h_used, gamma, tau_qp1);
        if (!res.accept) {
            ++bdf.counters.rejections;
            ++bdf.consecutive_rejections;
            bdf.rejected_since_accept = true;
            if (bdf.consecutive_rejections >= 2 && bdf.q > 1) {
                --bdf.q;
                bdf.steps_at_q = 0;
                bdf.prev_delta_valid = false;
            }
            if (at_floor)
                throw SolverError("unrecoverable stiffness: error test fails at minimum step, t=" +
                                  std::to_string(t_now) + " est=" + std::to_string(res.est));
            bdf.h = std::max(res.h_next, bdf.opt.h_min);
            continue;
        }

        // Accepted.
        ++bdf.counters.steps_taken;
        ++bdf.steps_at_q;
        bdf.consecutive_rejections = 0;
        bdf.rejected_since_accept = false;
        bdf.prev_delta = y_new - pred;
        bdf.prev_h = h_used;

        bdf.ht.push_back(t_new);
        bdf.hy.push_back(y_new);
        const int keep = bdf.opt.q_max + 1;
        if (int(bdf.ht.size()) > keep) {
            bdf.ht.erase(bdf.ht.begin());
            bdf.hy.erase(bdf.hy.begin());
        }

        if (res.q_next != bdf.q) {
            bdf.q = res.q_next;
            bdf.steps_at_q = 0;
            bdf.prev_delta_valid = false;
        } else {
            bdf.prev_delta_valid = true;
        }
        bdf.just_reset = false;

        // A step clamped to the stop time must not erase the step-size
        // memory; the natural proposal stays available for the resume.
        const double h_next = std::clamp(res.h_next, bdf.opt.h_min, bdf.opt.h_max);
        bdf.h = clamped ? std::max(bdf.h, h_next) : h_next;

        if (observer) observer(bdf, t_now, t_new);
        return clamped;
    }
}

}  // namespace

void advance_to(BdfSystem& sys, BdfState& bdf, double t_target, const StepObserver& observer) {
    if (bdf.ht.empty()) throw SolverError("advance_to: integrator not initialized");
    if (t_target < bdf.t() - 1e-9 * std::max(1.0, std::abs(bdf.t())))
        throw SolverError("advance_to: target " + std::to_string(t_target) +
                          " is in the past of t=" + std::to_string(bdf.t()));

    while (true) {
        const double remaining = t_target - bdf.t();
        const double snap = std::max(bdf.opt.h_min,
                                     4.0 * std::numeric_limits<double>::epsilon() *
                                         std::max(std::abs(t_target), 1.0));
        if (remaining <= snap) {
            if (remaining > 0.0) {
                Eigen::VectorXd y_t = bdf_interpolate(bdf, t_target);
                bdf.ht.back() = t_target;
                bdf.hy.back() = std::move(y_t);
            }
            return;
        }
        step_once(sys, bdf, t_target, observer);
    }
}

bool advance_past(BdfSystem& sys, BdfState& bdf, double t_past, double t_limit,
                  const StepObserver& observer) {
    if (bdf.ht.empty()) throw SolverError("advance_past: integrator not initialized");
    bool on_limit = false;
    while (bdf.t() < t_past && !on_limit) {
        const double snap = std::max(bdf.opt.h_min,
                                     4.0 * std::numeric_limits<double>::epsilon() *
                                         std::max(std::abs(t_limit), 1.0));
        if (t_limit - bdf.t() <= snap) {
            advance_to(sys, bdf, t_limit, observer);
            return true;
        }
        on_limit = step_once(sys, bdf, t_limit, observer);
    }
    return on_limit;
}

// ---------------------------------------------------------------------------

void NeuronOde::lin_setup(double /*t*/, const Eigen::VectorXd& y, double gamma) {
    const CompartmentTree& tree = *tree_;
    const int n = tree.n_compartments;
    gamma_ = gamma;
    if (int(m_.parent.size()) != n) m_ = TreeMatrix::like(tree);
    diag0_.resize(n);
    off0_.setZero(n);
    state_diag_.resize(tree.n_states() - n);

    for (int c = 0; c < n; ++c) {
        const double v = y[c];
        double g_tot = 0.0;
        for (int k = 0; k < int(tree.mechanisms[c].size()); ++k) {
            const auto& mech = tree.mechanisms[c][k];
            double open = 1.0;
            for (int g = 0; g < mech.n_gates; ++g) {
                const int gi = tree.gate_index(c, k, g);
                const double x = y[gi];
                for (int e = 0; e < mech.gate_exponents[g]; ++e) open *= x;
                state_diag_[gi - n] =
                    1.0 + gamma * (hh::alpha(mech.gates[g], v) + hh::beta(mech.gates[g], v));
            }
            g_tot += mech.g_max * open;
        }
        diag0_[c] = tree.capacitance[c] + gamma * g_tot;
    }
    for (int s = 0; s < int(tree.synapses.size()); ++s) {
        const auto& slot = tree.synapses[s];
        const int si = tree.syn_index(s);
        diag0_[slot.compartment] += gamma * std::max(y[si], 0.0);
        state_diag_[si - n] = 1.0 + gamma / slot.tau;
    }
    for (int c = 1; c < n; ++c) {
        const double ginv = gamma / tree.axial_resistance[c];
        off0_[c] = -ginv;
        diag0_[c] += ginv;
        diag0_[tree.parent[c]] += ginv;
    }
}

void NeuronOde::lin_solve(Eigen::VectorXd& b) {
    const CompartmentTree& tree = *tree_;
    const int n = tree.n_compartments;
    for (int i = n; i < int(b.size()); ++i) b[i] /= state_diag_[i - n];
    // Voltage block, scaled by C to keep the tree system symmetric.
    m_.diag = diag0_;
    m_.off = off0_;
    for (int c = 0; c < n; ++c) m_.rhs[c] = tree.capacitance[c] * b[c];
    tree_solve_inplace(m_, xv_);
    for (int c = 0; c < n; ++c) b[c] = xv_[c];
}

}  // namespace nsim
