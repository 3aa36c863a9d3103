#include "nsim/netgen.hpp"

#include "nsim/fixed_step.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace nsim {

Network generate_network(const NetworkSpec& spec, GenerationSummary* summary) {
    if (spec.n_neurons < 1) throw NetgenError("network spec: need at least one neuron");
    if (spec.out_degree_mean >= spec.n_neurons)
        throw NetgenError("network spec: out degree " + std::to_string(spec.out_degree_mean) +
                          " infeasible for " + std::to_string(spec.n_neurons) +
                          " neurons (self-edges excluded)");

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::lognormal_distribution<double> tail(spec.delay_log_mu, spec.delay_log_sigma);

    Network net;
    const int n = spec.n_neurons;

    std::vector<bool> excitatory(n);
    for (int g = 0; g < n; ++g) excitatory[g] = uni(rng) < spec.excitatory_fraction;

    net.morphologies.reserve(n);
    for (int g = 0; g < n; ++g) {
        const double scale = 1.0 + spec.scale_jitter * (2.0 * uni(rng) - 1.0);
        net.morphologies.push_back(MorphologySpec::hh_tree(spec.compartments, rng(), scale));
    }

    double min_sampled = 1e30;
    for (int pre = 0; pre < n; ++pre) {
        const double jit = 1.0 + spec.out_degree_jitter * (2.0 * uni(rng) - 1.0);
        int degree = int(std::lround(spec.out_degree_mean * jit));
        degree = std::clamp(degree, 0, n - 1);

        std::set<int> targets;
        while (int(targets.size()) < degree) {
            const int post = int(rng() % std::uint64_t(n));
            if (post != pre) targets.insert(post);
        }
        for (int post : targets) {
            SynapseEdge e;
            e.pre_gid = pre;
            e.post_gid = post;
            e.target_compartment =
                int(rng() % std::uint64_t(net.morphologies[post].n_compartments));
            e.weight = spec.weight_min + (spec.weight_max - spec.weight_min) * uni(rng);
            e.e_syn = excitatory[pre] ? spec.e_exc : spec.e_inh;
            e.tau = excitatory[pre] ? spec.tau_exc : spec.tau_inh;
            if (uni(rng) < spec.delay_floor_mass)
                e.delay = kMinDelay;
            else
                e.delay = std::min(kMinDelay + tail(rng), spec.delay_cap);
            min_sampled = std::min(min_sampled, e.delay);
            net.edges.push_back(e);
        }
    }

    net.finalize();

    if (summary) {
        summary->n_edges = net.edges.size();
        summary->min_sampled_delay = net.edges.empty() ? 0.0 : min_sampled;
        summary->delay_histogram.assign(std::size_t(std::ceil(spec.delay_cap / 0.1)) + 1, 0);
        for (const auto& e : net.edges) {
            auto bin = std::size_t((e.delay - kMinDelay) / 0.1);
            bin = std::min(bin, summary->delay_histogram.size() - 1);
            ++summary->delay_histogram[bin];
        }
        std::vector<int> degs(n, 0);
        for (const auto& e : net.edges) ++degs[e.pre_gid];
        const int maxd = net.edges.empty() ? 0 : *std::max_element(degs.begin(), degs.end());
        summary->degree_histogram.assign(maxd + 1, 0);
        for (int d : degs) ++summary->degree_histogram[d];
    }
    return net;
}

namespace {

// Reference fixed-step probe: does a constant soma current elicit a spike
// within the window? Early exit on the first crossing.
bool spikes_at(const CompartmentTree& tree, const NeuronState& rest, double amplitude,
               double t_stop, double dt) {
    NeuronState s = rest;
    FixedStepWorkspace ws;
    Eigen::VectorXd inj = Eigen::VectorXd::Zero(tree.n_compartments);
    inj[tree.soma_index] = amplitude;
    const std::int64_t steps = llround(t_stop / dt);
    double v_prev = s.y[tree.soma_index];
    bool armed = v_prev < kSpikeThreshold;
    for (std::int64_t i = 0; i < steps; ++i) {
        staggered_step_inplace(tree, s, dt, inj, ws);
        const double v = s.y[tree.soma_index];
        if (armed && v >= kSpikeThreshold && v_prev < kSpikeThreshold) return true;
        if (!armed && v < kSpikeThreshold) armed = true;
        v_prev = v;
    }
    return false;
}

}  // namespace

double find_threshold_current(const MorphologySpec& morph, double i_max) {
    auto [tree, rest] = build_neuron(morph);
    const double dt = 0.001;  // 1 us reference surrogate
    const double t_probe = 1000.0;

    double lo = 0.0;
    double hi = 1.0;
    while (!spikes_at(tree, rest, hi, t_probe, dt)) {
        lo = hi;
        hi *= 2.0;
        if (hi > i_max)
            throw NetgenError("threshold search failed: no spike up to " + std::to_string(i_max) +
                              " nA");
    }
    while ((hi - lo) / hi > 1e-3) {
        const double mid = 0.5 * (lo + hi);
        (spikes_at(tree, rest, mid, t_probe, dt) ? hi : lo) = mid;
    }
    return hi;
}

std::vector<PulseTrain> pulse_event_stream(const StimulusProtocol& protocol) {
    if (protocol.kind != StimulusProtocol::Kind::pulse_train)
        throw NetgenError("pulse_event_stream: protocol is not a pulse train");
    if (protocol.frequency < 0.0) throw NetgenError("pulse train: negative frequency");
    std::vector<PulseTrain> trains;
    trains.reserve(protocol.targets.size());
    for (Gid g : protocol.targets)
        trains.push_back({g, protocol.amplitude, protocol.frequency, protocol.duration});
    return trains;
}

CalibrationResult calibrate_regime_drive(const Network& net, double target_rate_hz,
                                         double anchor_current, std::uint64_t seed,
                                         double tolerance) {
    const int n = net.n_neurons();
    CalibrationResult res;

    std::mt19937_64 rng(seed ^ 0xc2b2ae3d27d4eb4fULL);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::vector<double> jitter(n);
    for (double& j : jitter) j = 1.0 + 0.2 * uni(rng);

    if (target_rate_hz <= 0.0) {
        res.per_neuron_drive.assign(n, 0.0);
        return res;
    }

    EngineConfig cfg;
    cfg.model = EngineModel::fap_fixed;
    cfg.t_stop = 1000.0;
    SolverConfig solver;

    auto probe = [&](double amp) {
        StimulusSet stim;
        for (int g = 0; g < n; ++g) stim.clamps.push_back({Gid(g), amp * jitter[g]});
        auto out = run_engine(net, cfg, solver, stim);
        const double rate = double(out.spikes.size()) / double(n);  // 1 s probe
        res.search_trace.push_back({amp, rate});
        return rate;
    };

    double lo = 0.0, rate_lo = 0.0;
    double hi = std::max(anchor_current, 1e-3), rate_hi = probe(hi);
    for (int k = 0; k < 8 && rate_hi < target_rate_hz; ++k) {
        lo = hi;
        rate_lo = rate_hi;
        hi *= 1.6;
        rate_hi = probe(hi);
    }
    if (rate_hi < target_rate_hz)
        throw NetgenError("regime calibration: target " + std::to_string(target_rate_hz) +
                          " Hz unreachable, achieved " + std::to_string(rate_hi) + " Hz");

    double amp = hi, rate = rate_hi;
    for (int it = 0; it < 24; ++it) {
        if (std::abs(rate - target_rate_hz) <= tolerance * target_rate_hz) break;
        double next;
        if (rate_hi > rate_lo + 1e-12) {
            next = lo + (target_rate_hz - rate_lo) * (hi - lo) / (rate_hi - rate_lo);
            if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        } else {
            next = 0.5 * (lo + hi);
        }
        amp = next;
        rate = probe(amp);
        if (rate < target_rate_hz) {
            lo = amp;
            rate_lo = rate;
        } else {
            hi = amp;
            rate_hi = rate;
        }
        if (hi - lo < 1e-6 * std::max(1.0, hi)) break;
    }
    if (std::abs(rate - target_rate_hz) > tolerance * target_rate_hz)
        throw NetgenError("regime calibration: target " + std::to_string(target_rate_hz) +
                          " Hz not met, achieved " + std::to_string(rate) + " Hz");

    res.drive = amp;
    res.measured_rate = rate;
    res.per_neuron_drive.resize(n);
    for (int g = 0; g < n; ++g) res.per_neuron_drive[g] = amp * jitter[g];
    return res;
}

}  // namespace nsim
