#include "nsim/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

namespace nsim {

namespace {

// Time of the local voltage maximum following an upward threshold crossing,
// refined by a parabola through the three samples around the peak.
double peak_after(const Trace& trace, double t_cross, double window) {
    std::size_t i = 0;
    while (i < trace.size() && trace[i].first < t_cross) ++i;
    std::size_t best = std::min(i, trace.size() - 1);
    for (std::size_t k = best; k < trace.size() && trace[k].first <= t_cross + window; ++k)
        if (trace[k].second > trace[best].second) best = k;
    if (best == 0 || best + 1 >= trace.size()) return trace[best].first;
    const double v0 = trace[best - 1].second, v1 = trace[best].second, v2 = trace[best + 1].second;
    const double denom = v0 - 2.0 * v1 + v2;
    if (denom >= 0.0) return trace[best].first;  // not a proper maximum
    const double h = trace[best].first - trace[best - 1].first;
    return trace[best].first + 0.5 * h * (v0 - v2) / denom;
}

Network single_cell_net(const MorphologySpec& cell) {
    Network net;
    net.morphologies = {cell};
    net.finalize();
    return net;
}

}  // namespace

PhaseShiftResult phase_shift(const Trace& reference, const Trace& test, double threshold) {
    const auto ref_spikes = detect_spike(reference, threshold);
    const auto test_spikes = detect_spike(test, threshold);
    if (ref_spikes.empty() || test_spikes.empty())
        throw ExperimentError("phase_shift: a trace has no spikes (reference " +
                              std::to_string(ref_spikes.size()) + ", test " +
                              std::to_string(test_spikes.size()) + ")");
    if (ref_spikes.size() != test_spikes.size())
        throw ExperimentError("phase_shift: spike count mismatch (reference " +
                              std::to_string(ref_spikes.size()) + ", test " +
                              std::to_string(test_spikes.size()) + ")");
    PhaseShiftResult res;
    for (std::size_t k = 0; k < ref_spikes.size(); ++k) {
        const double pr = peak_after(reference, ref_spikes[k], 3.0);
        const double pt = peak_after(test, test_spikes[k], 3.0);
        res.shifts.push_back(pt - pr);
        res.max_abs_shift = std::max(res.max_abs_shift, std::abs(pt - pr));
    }
    return res;
}

// ---------------------------------------------------------------------------

AccuracyResult accuracy_study(const AccuracyParams& p) {
    AccuracyResult res;
    res.amplitude = p.amplitude > 0.0 ? p.amplitude : 1.5 * find_threshold_current(p.cell);

    Network net = single_cell_net(p.cell);
    StimulusSet stim;
    stim.clamps.push_back({0, res.amplitude});

    EngineConfig cfg;
    cfg.t_stop = p.t_stop;
    cfg.trace_gids = {0};
    cfg.trace_sample_dt = p.sample_dt;

    auto trace_of = [&](EngineModel model, FixedScheme scheme, double dt,
                        double atol) -> std::pair<Trace, std::uint64_t> {
        EngineConfig c = cfg;
        c.model = model;
        SolverConfig solver;
        solver.fixed.scheme = scheme;
        solver.fixed.dt = dt;
        solver.bdf.atol = atol;
        auto out = run_engine(net, c, solver, stim);
        if (out.traces.empty()) throw ExperimentError("accuracy: no trace recorded");
        return {std::move(out.traces[0].second), out.totals.steps};
    };

    auto [ref, ref_steps] = trace_of(EngineModel::fap_fixed, FixedScheme::staggered_linear,
                                     p.ref_dt, p.atol);
    res.ref_spikes = detect_spike(ref, kSpikeThreshold).size();

    struct Candidate {
        const char* name;
        EngineModel model;
        FixedScheme scheme;
        double dt;
        double atol;
    };
    const Candidate candidates[] = {
        {"euler_dt25us", EngineModel::fap_fixed, FixedScheme::explicit_staggered_euler, 0.025, p.atol},
        {"cnexp_dt25us", EngineModel::fap_fixed, FixedScheme::staggered_linear, 0.025, p.atol},
        {"vardt", EngineModel::fap_vardt, FixedScheme::staggered_linear, 0.025, p.atol},
    };
    for (const auto& c : candidates) {
        auto [trace, steps] = trace_of(c.model, c.scheme, c.dt, c.atol);
        auto ps = phase_shift(ref, trace);
        AccuracyCell cell;
        cell.name = c.name;
        cell.max_abs_shift = ps.max_abs_shift;
        cell.first_shift = ps.shifts.front();
        cell.last_shift = ps.shifts.back();
        cell.steps = steps;
        cell.shifts = std::move(ps.shifts);
        res.cells.push_back(std::move(cell));
    }
    return res;
}

// ---------------------------------------------------------------------------

StiffnessResult stiffness_sweep(const StiffnessParams& p) {
    StiffnessResult res;
    res.threshold_current =
        p.threshold_current > 0.0 ? p.threshold_current : find_threshold_current(p.cell);

    Network net = single_cell_net(p.cell);

    for (double f : p.fractions) {
        StiffnessCell cell;
        cell.fraction = f;
        cell.amplitude = f * res.threshold_current;

        StimulusSet stim;
        stim.clamps.push_back({0, cell.amplitude});

        EngineConfig cfg;
        cfg.t_stop = p.t_stop;
        SolverConfig solver;
        solver.fixed.dt = p.dt;
        solver.bdf.atol = p.atol;

        cfg.model = EngineModel::fap_fixed;
        auto fixed = run_engine(net, cfg, solver, stim);
        cell.fixed_steps = fixed.totals.steps;
        cell.fixed_wall = fixed.wall_seconds;

        cfg.model = EngineModel::fap_vardt;
        auto vardt = run_engine(net, cfg, solver, stim);
        cell.vardt_steps = vardt.totals.steps;
        cell.vardt_wall = vardt.wall_seconds;
        cell.vardt_spikes = vardt.spikes.size();

        res.cells.push_back(cell);
    }
    return res;
}

// ---------------------------------------------------------------------------

CrossoverResult discontinuity_sweep(const CrossoverParams& p) {
    CrossoverResult res;
    Network net = single_cell_net(p.cell);

    for (double f : p.frequencies) {
        CrossoverCell cell;
        cell.frequency = f;

        StimulusSet stim;
        stim.pulses.push_back({0, p.amplitude, f, p.t_stop});

        EngineConfig cfg;
        cfg.t_stop = p.t_stop;
        SolverConfig solver;
        solver.fixed.dt = p.dt;
        solver.bdf.atol = p.atol;

        cfg.model = EngineModel::fap_fixed;
        cell.fixed_steps = run_engine(net, cfg, solver, stim).totals.steps;

        cfg.model = EngineModel::fap_vardt;
        auto vardt = run_engine(net, cfg, solver, stim);
        cell.vardt_steps = vardt.totals.steps;
        cell.vardt_resets = vardt.totals.resets;

        cell.ratio = double(cell.vardt_steps) / double(std::max<std::uint64_t>(cell.fixed_steps, 1));
        res.cells.push_back(cell);
    }

    for (std::size_t i = 0; i + 1 < res.cells.size(); ++i) {
        const double r0 = res.cells[i].ratio, r1 = res.cells[i + 1].ratio;
        if (r0 <= 1.0 && r1 > 1.0) {
            const double lf0 = std::log10(res.cells[i].frequency);
            const double lf1 = std::log10(res.cells[i + 1].frequency);
            res.crossover_hz = std::pow(10.0, lf0 + (1.0 - r0) / (r1 - r0) * (lf1 - lf0));
            break;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------

RegimeResult regime_benchmark(const RegimeParams& p) {
    RegimeResult res;
    res.net = generate_network(p.netspec, nullptr);
    res.anchor_current =
        find_threshold_current(MorphologySpec::hh_tree(p.netspec.compartments, 12345, 1.0));

    for (double target : p.target_rates) {
        RegimeCell cell;
        cell.target_rate = target;

        auto cal = calibrate_regime_drive(res.net, target, res.anchor_current, p.netspec.seed);
        cell.probe_rate = cal.measured_rate;
        cell.drive = cal.drive;

        StimulusSet stim;
        for (int g = 0; g < res.net.n_neurons(); ++g)
            stim.clamps.push_back({Gid(g), cal.per_neuron_drive[g]});

        EngineConfig cfg;
        cfg.t_stop = p.t_stop;
        cfg.workers = p.workers;
        SolverConfig solver;
        solver.fixed.dt = p.dt;
        solver.bdf.atol = p.atol;

        cfg.model = EngineModel::fap_fixed;
        cell.fixed_wall = 1e300;
        for (int r = 0; r < p.repeats; ++r) {
            auto out = run_engine(res.net, cfg, solver, stim);
            cell.fixed_wall = std::min(cell.fixed_wall, out.wall_seconds);
            cell.fixed_steps = out.totals.steps;
            cell.watchdog_fires += out.totals.watchdog_fires;
        }

        cfg.model = EngineModel::fap_vardt;
        cell.vardt_wall = 1e300;
        for (int r = 0; r < p.repeats; ++r) {
            auto out = run_engine(res.net, cfg, solver, stim);
            cell.vardt_wall = std::min(cell.vardt_wall, out.wall_seconds);
            cell.vardt_steps = out.totals.steps;
            cell.vardt_resets = out.totals.resets;
            cell.vardt_events = out.totals.events_applied;
            cell.watchdog_fires += out.totals.watchdog_fires;
            if (r == p.repeats - 1) {
                cell.measured_rate_vardt =
                    double(out.spikes.size()) / res.net.n_neurons() / (p.t_stop / 1000.0);
                cell.vardt_spikes_per_neuron.assign(res.net.n_neurons(), 0);
                for (const auto& c : out.per_neuron)
                    ;  // per-neuron spike counts folded below
                for (int g = 0; g < res.net.n_neurons(); ++g)
                    cell.vardt_spikes_per_neuron[g] = out.per_neuron[g].spikes;
                cell.vardt_spikes = std::move(out.spikes);
            }
        }

        if (p.run_bsp_vardt) {
            EngineConfig bc = cfg;
            bc.model = EngineModel::bsp_vardt;
            bc.comm_interval = res.net.min_delay;
            auto out = run_engine(res.net, bc, solver, stim);
            cell.bsp_backsteps = out.totals.backsteps;
            cell.watchdog_fires += out.totals.watchdog_fires;
        }

        res.calibrations.push_back(std::move(cal));
        res.cells.push_back(std::move(cell));
    }
    return res;
}

// ---------------------------------------------------------------------------

namespace {

std::FILE* open_report(const std::string& dir, const std::string& name) {
    std::filesystem::create_directories(dir);
    std::FILE* f = std::fopen((dir + "/" + name).c_str(), "w");
    if (!f) throw ExperimentError("cannot write report file " + dir + "/" + name);
    return f;
}

void write_series(const std::string& dir, const std::string& name,
                  const std::vector<std::pair<double, double>>& xy) {
    std::filesystem::create_directories(dir + "/series");
    std::FILE* f = std::fopen((dir + "/series/" + name + ".tsv").c_str(), "w");
    if (!f) throw ExperimentError("cannot write series file " + name);
    std::fprintf(f, "x\ty\n");
    for (auto [x, y] : xy) std::fprintf(f, "%.17g\t%.17g\n", x, y);
    std::fclose(f);
}

}  // namespace

bool experiment_suite(const std::string& name, const std::string& out_dir, std::uint64_t seed) {
    bool ok = true;
    try {
        if (name == "accuracy") {
            AccuracyResult r = accuracy_study({});
            std::FILE* f = open_report(out_dir, "accuracy.tsv");
            std::fprintf(f, "# amplitude=%.6g nA, ref spikes=%zu\n", r.amplitude, r.ref_spikes);
            std::fprintf(f, "method\tmax_abs_shift_ms\tfirst_shift_ms\tlast_shift_ms\tsteps\n");
            for (const auto& c : r.cells) {
                std::fprintf(f, "%s\t%.6g\t%.6g\t%.6g\t%llu\n", c.name.c_str(), c.max_abs_shift,
                             c.first_shift, c.last_shift, (unsigned long long)c.steps);
                std::vector<std::pair<double, double>> xy;
                for (std::size_t k = 0; k < c.shifts.size(); ++k)
                    xy.push_back({double(k + 1), c.shifts[k]});
                write_series(out_dir, "accuracy_shift_" + c.name, xy);
            }
            std::fclose(f);
        } else if (name == "stiffness_sweep") {
            StiffnessResult r = stiffness_sweep({});
            std::FILE* f = open_report(out_dir, "stiffness.tsv");
            std::fprintf(f, "# threshold current=%.6g nA\n", r.threshold_current);
            std::fprintf(f, "fraction\tamplitude_na\tfixed_steps\tvardt_steps\treduction\t"
                            "fixed_wall_s\tvardt_wall_s\tvardt_spikes\n");
            std::vector<std::pair<double, double>> xy;
            for (const auto& c : r.cells) {
                std::fprintf(f, "%.3g\t%.6g\t%llu\t%llu\t%.4g\t%.4g\t%.4g\t%llu\n", c.fraction,
                             c.amplitude, (unsigned long long)c.fixed_steps,
                             (unsigned long long)c.vardt_steps, c.reduction(), c.fixed_wall,
                             c.vardt_wall, (unsigned long long)c.vardt_spikes);
                xy.push_back({c.fraction, double(c.vardt_steps)});
            }
            write_series(out_dir, "stiffness_vardt_steps", xy);
            std::fclose(f);
        } else if (name == "discontinuity_sweep") {
            CrossoverResult r = discontinuity_sweep({});
            std::FILE* f = open_report(out_dir, "crossover.tsv");
            std::fprintf(f, "# crossover=%.6g Hz (0 = none in range)\n", r.crossover_hz);
            std::fprintf(f, "frequency_hz\tfixed_steps\tvardt_steps\tratio\tvardt_resets\n");
            std::vector<std::pair<double, double>> xy;
            for (const auto& c : r.cells) {
                std::fprintf(f, "%.6g\t%llu\t%llu\t%.4g\t%llu\n", c.frequency,
                             (unsigned long long)c.fixed_steps, (unsigned long long)c.vardt_steps,
                             c.ratio, (unsigned long long)c.vardt_resets);
                xy.push_back({c.frequency, c.ratio});
            }
            write_series(out_dir, "crossover_ratio", xy);
            std::fclose(f);
        } else if (name == "regime_benchmark") {
            RegimeParams p;
            p.netspec.n_neurons = 64;
            p.netspec.seed = seed;
            RegimeResult r = regime_benchmark(p);
            std::FILE* f = open_report(out_dir, "regimes.tsv");
            std::fprintf(f, "# seed=%llu anchor=%.6g nA neurons=%d\n", (unsigned long long)seed,
                         r.anchor_current, p.netspec.n_neurons);
            std::fprintf(f, "target_hz\tprobe_hz\tdrive_na\tvardt_hz\tfixed_steps\tvardt_steps\t"
                            "vardt_resets\tbsp_backsteps\tfixed_wall_s\tvardt_wall_s\n");
            std::vector<std::pair<double, double>> xy;
            for (const auto& c : r.cells) {
                std::fprintf(f, "%.4g\t%.4g\t%.6g\t%.4g\t%llu\t%llu\t%llu\t%llu\t%.4g\t%.4g\n",
                             c.target_rate, c.probe_rate, c.drive, c.measured_rate_vardt,
                             (unsigned long long)c.fixed_steps, (unsigned long long)c.vardt_steps,
                             (unsigned long long)c.vardt_resets, (unsigned long long)c.bsp_backsteps,
                             c.fixed_wall, c.vardt_wall);
                xy.push_back({c.target_rate, c.vardt_wall});
            }
            write_series(out_dir, "regime_vardt_wall", xy);
            std::fclose(f);
        } else {
            throw ExperimentError("unknown experiment '" + name + "'");
        }
    } catch (const std::exception& ex) {
        std::FILE* f = open_report(out_dir, "FAILED_" + name + ".txt");
        std::fprintf(f, "%s\n", ex.what());
        std::fclose(f);
        ok = false;
    }
    return ok;
}

}  // namespace nsim
