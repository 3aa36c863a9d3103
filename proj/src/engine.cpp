#include "nsim/engine.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <queue>
#include <random>
#include <thread>

namespace nsim {

DependencyMap::Entry* DependencyMap::find(Gid pre) {
    auto it = std::lower_bound(entries.begin(), entries.end(), pre,
                               [](const Entry& e, Gid g) { return e.pre < g; });
    return it != entries.end() && it->pre == pre ? &*it : nullptr;
}

double max_step_time(const DependencyMap& dep, double t_stop) {
    if (dep.entries.empty()) return t_stop;
    double limit = 1e300;
    for (const auto& e : dep.entries)
        limit = std::min(limit, e.last_known_time + e.min_edge_delay);
    return limit;
}

void SchedulerHeap::push(double t, Gid g) {
    heap_.push_back({t, g});
    std::push_heap(heap_.begin(), heap_.end(), std::greater<>{});
}

std::pair<double, Gid> SchedulerHeap::pop() {
    if (heap_.empty()) throw ProtocolError("scheduler heap underflow");
    std::pop_heap(heap_.begin(), heap_.end(), std::greater<>{});
    auto top = heap_.back();
    heap_.pop_back();
    return top;
}

namespace {

using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// In-process message fabric: one multi-producer single-consumer inbox per
// worker; a single lock per inbox gives reliable per-pair FIFO delivery.

struct Inbox {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Event> q;
    std::uint64_t max_depth = 0;
};

class Fabric {
public:
    explicit Fabric(int workers) : inboxes_(workers) {}

    void send(int dst, const Event& e) {
        in_flight_.fetch_add(1, std::memory_order_acq_rel);
        auto& ib = inboxes_[dst];
        {
            std::lock_guard lk(ib.mu);
            ib.q.push_back(e);
            ib.max_depth = std::max<std::uint64_t>(ib.max_depth, ib.q.size());
        }
        ib.cv.notify_one();
    }

    std::size_t drain(int w, std::vector<Event>& out) {
        out.clear();
        auto& ib = inboxes_[w];
        {
            std::lock_guard lk(ib.mu);
            while (!ib.q.empty()) {
                out.push_back(ib.q.front());
                ib.q.pop_front();
            }
        }
        if (!out.empty()) in_flight_.fetch_sub(long(out.size()), std::memory_order_acq_rel);
        return out.size();
    }

    void wait(int w, std::chrono::microseconds timeout) {
        auto& ib = inboxes_[w];
        std::unique_lock lk(ib.mu);
        ib.cv.wait_for(lk, timeout, [&] { return !ib.q.empty() || poisoned_.load(); });
    }

    void poison() {
        poisoned_.store(true);
        for (auto& ib : inboxes_) ib.cv.notify_all();
    }

    long in_flight() const { return in_flight_.load(std::memory_order_acquire); }
    std::uint64_t max_depth() const {
        std::uint64_t d = 0;
        for (const auto& ib : inboxes_) d = std::max(d, ib.max_depth);
        return d;
    }

private:
    std::vector<Inbox> inboxes_;
    std::atomic<long> in_flight_{0};
    std::atomic<bool> poisoned_{false};
};

// Barrier that releases everyone when a worker fails.
class PoisonBarrier {
public:
    explicit PoisonBarrier(int n) : n_(n) {}

    bool arrive_and_wait() {
        std::unique_lock lk(mu_);
        if (poisoned_) return false;
        const std::uint64_t gen = gen_;
        if (++count_ == n_) {
            count_ = 0;
            ++gen_;
            cv_.notify_all();
            return !poisoned_;
        }
        cv_.wait(lk, [&] { return gen_ != gen || poisoned_; });
        return !poisoned_;
    }

    void poison() {
        std::lock_guard lk(mu_);
        poisoned_ = true;
        cv_.notify_all();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    int n_;
    int count_ = 0;
    std::uint64_t gen_ = 0;
    bool poisoned_ = false;
};

// ---------------------------------------------------------------------------
// Per-neuron runtime shared by the four engines.

struct PendingEvent {
    double time = 0.0;       // grouped delivery time (variable step)
    std::int64_t grid = 0;   // delivery step index (fixed step)
    Gid sender = -1;
    int edge_index = -1;     // -1 for stimulus
    double value = 0.0;
    int compartment = 0;
};

struct PendingLater {
    bool operator()(const PendingEvent& a, const PendingEvent& b) const {
        return std::tie(a.time, a.grid, a.sender, a.edge_index) >
               std::tie(b.time, b.grid, b.sender, b.edge_index);
    }
};

struct NotifyTarget {
    Gid post = -1;
    int dst_worker = 0;
    double interval = 0.0;
    double last_sent = 0.0;
};

struct NeuronRt {
    Gid gid = -1;
    int worker = 0;
    CompartmentTree tree;
    NeuronState state;
    Eigen::VectorXd i_inj;

    NeuronOde ode;
    BdfState bdf;

    FixedStepWorkspace ws;
    std::int64_t step_index = 0;
    double prev_soma_v = kRestPotential;
    bool armed = true;

    std::priority_queue<PendingEvent, std::vector<PendingEvent>, PendingLater> pending;
    DependencyMap deps;
    std::vector<NotifyTarget> notify;

    std::vector<double> final_spikes;  // merged into the output at the end
    std::vector<double> spike_buf;     // bsp: awaiting exchange (rescindable in bsp_vardt)
    Trace trace_buf;
    bool traced = false;

    NeuronCounters counters;
    bool done = false;
};

struct WorkerStats {
    std::uint64_t events_sent = 0;
    std::uint64_t events_received = 0;
    std::uint64_t notifications_sent = 0;
    std::uint64_t stage_depth = 0;
};

struct EngineCtx {
    const Network* net = nullptr;
    EngineConfig cfg;
    SolverConfig solver;
    std::vector<std::unique_ptr<NeuronRt>> neurons;
    std::vector<std::vector<Gid>> owned;  // per worker
    std::vector<int> worker_of;
    std::int64_t total_steps = 0;       // fixed engines
    std::int64_t steps_per_window = 0;  // bsp_fixed

    std::unique_ptr<Fabric> fabric;
    std::unique_ptr<PoisonBarrier> barrier;
    // staging[src][dst]: BSP exchange buffers, written by src between barriers
    std::vector<std::vector<std::vector<Event>>> staging;

    std::atomic<std::uint64_t> progress_epoch{0};
    std::atomic<int> workers_ready{0};
    std::atomic<std::uint64_t> watchdog_fires{0};
    std::atomic<bool> failed{false};
    std::vector<std::exception_ptr> errors;
    std::vector<WorkerStats> wstats;

    bool vardt() const {
        return cfg.model == EngineModel::bsp_vardt || cfg.model == EngineModel::fap_vardt;
    }
    bool bsp() const {
        return cfg.model == EngineModel::bsp_fixed || cfg.model == EngineModel::bsp_vardt;
    }
};

double grouped_time(const EngineCtx& ctx, double t_event) {
    return group_delivery_time(t_event, ctx.cfg.grouping, ctx.solver.fixed.dt);
}

struct WorkerLocal {
    int w = 0;
    std::vector<Event> inbox_batch;
    WorkerStats stats;
};

// ---------------------------------------------------------------------------
// Construction

void validate_config(const EngineCtx& ctx) {
    const auto& cfg = ctx.cfg;
    if (cfg.workers < 1) throw ProtocolError("engine config: workers must be >= 1");
    if (cfg.t_stop < 0) throw ProtocolError("engine config: t_stop must be >= 0");
    if (cfg.notification_factor <= 0.0 || cfg.notification_factor > 1.0)
        throw ProtocolError("engine config: notification factor must be in (0, 1]");
    if (!(ctx.solver.fixed.dt > 0)) throw ProtocolError("engine config: dt must be positive");
    if (ctx.bsp() && !ctx.net->edges.empty()) {
        if (std::abs(cfg.comm_interval - ctx.net->min_delay) > 1e-9)
            throw ProtocolError("engine config: BSP comm interval must equal the network minimum "
                                "delay of " +
                                std::to_string(ctx.net->min_delay) + " ms");
    }
    if (ctx.bsp()) {
        const double ratio = cfg.comm_interval / ctx.solver.fixed.dt;
        if (std::abs(ratio - std::round(ratio)) > 1e-6)
            throw ProtocolError("engine config: dt must divide the BSP comm interval exactly");
    }
    if (!ctx.vardt() && cfg.t_stop > 0) {
        const double steps = cfg.t_stop / ctx.solver.fixed.dt;
        if (std::abs(steps - std::round(steps)) > 1e-6)
            throw ProtocolError("engine config: t_stop must be a multiple of dt for fixed-step runs");
    }
}

void build_runtime(EngineCtx& ctx, const StimulusSet& stim) {
    const Network& net = *ctx.net;
    const int n = net.n_neurons();
    const int w = ctx.cfg.workers;

    ctx.worker_of.resize(n);
    if (ctx.cfg.random_placement) {
        std::vector<int> perm(n);
        for (int i = 0; i < n; ++i) perm[i] = i;
        std::mt19937_64 rng(ctx.cfg.seed ^ 0x9e3779b97f4a7c15ULL);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int i = 0; i < n; ++i) ctx.worker_of[perm[i]] = i % w;
    } else {
        for (int g = 0; g < n; ++g) ctx.worker_of[g] = g % w;  // round robin
    }
    ctx.owned.assign(w, {});
    for (int g = 0; g < n; ++g) ctx.owned[ctx.worker_of[g]].push_back(g);

    ctx.neurons.resize(n);
    for (int g = 0; g < n; ++g) {
        auto nr = std::make_unique<NeuronRt>();
        nr->gid = g;
        nr->worker = ctx.worker_of[g];
        auto [tree, state] = build_neuron(net.morphologies[g]);
        nr->tree = std::move(tree);
        nr->state = std::move(state);
        nr->prev_soma_v = nr->state.y[nr->tree.soma_index];
        nr->armed = nr->prev_soma_v < kSpikeThreshold;
        ctx.neurons[g] = std::move(nr);
    }

    // Dependency maps: one entry per pre-synaptic neuron, delay-minimized
    // over parallel edges; notification targets mirror them on the senders.
    for (const auto& e : net.edges) {
        auto& post = *ctx.neurons[e.post_gid];
        if (auto* entry = post.deps.find(e.pre_gid)) {
            entry->min_edge_delay = std::min(entry->min_edge_delay, e.delay);
        } else {
            DependencyMap::Entry ne{e.pre_gid, 0.0, e.delay, 0.0};
            auto it = std::lower_bound(post.deps.entries.begin(), post.deps.entries.end(),
                                       e.pre_gid,
                                       [](const auto& en, Gid g) { return en.pre < g; });
            post.deps.entries.insert(it, ne);
        }
    }
    for (int g = 0; g < n; ++g) {
        for (auto& entry : ctx.neurons[g]->deps.entries) {
            entry.notification_interval = ctx.cfg.notification_factor * entry.min_edge_delay;
            auto& pre = *ctx.neurons[entry.pre];
            pre.notify.push_back({Gid(g), ctx.worker_of[g], entry.notification_interval, 0.0});
        }
    }
    for (auto& nr : ctx.neurons)
        std::sort(nr->notify.begin(), nr->notify.end(),
                  [](const NotifyTarget& a, const NotifyTarget& b) { return a.post < b.post; });

    // Continuous drives.
    for (const auto& [gid, amp] : stim.clamps) {
        if (gid < 0 || gid >= n) throw ProtocolError("stimulus clamp targets unknown neuron");
        auto& nr = *ctx.neurons[gid];
        if (nr.i_inj.size() == 0) nr.i_inj = Eigen::VectorXd::Zero(nr.tree.n_compartments);
        nr.i_inj[nr.tree.soma_index] += amp;
    }

    // Pulse trains become pre-queued stimulus discontinuities (a 1 us pulse
    // carries its charge as an instantaneous voltage jump).
    const double dt = ctx.solver.fixed.dt;
    for (const auto& p : stim.pulses) {
        if (p.gid < 0 || p.gid >= n) throw ProtocolError("pulse train targets unknown neuron");
        auto& nr = *ctx.neurons[p.gid];
        const double dv = p.amplitude * 1e-3 / nr.tree.capacitance[nr.tree.soma_index];
        if (p.frequency <= 0.0) continue;
        const double period = 1000.0 / p.frequency;
        const std::int64_t count = std::int64_t(std::floor(p.duration / period));
        for (std::int64_t k = 1; k <= count; ++k) {
            const double t = double(k) * period;
            PendingEvent ev;
            ev.value = dv;
            ev.compartment = nr.tree.soma_index;
            if (ctx.vardt()) {
                ev.time = grouped_time(ctx, t);
                if (ev.time >= ctx.cfg.t_stop) continue;
            } else {
                ev.grid = grid_ceil_index(t, dt);
                if (ev.grid >= ctx.total_steps) continue;
                ev.time = double(ev.grid) * dt;
            }
            nr.pending.push(ev);
        }
    }

    for (auto& nr : ctx.neurons) {
        if (ctx.vardt()) {
            nr->ode = NeuronOde(&nr->tree);
            if (nr->i_inj.size() > 0) nr->ode.set_injected_current(nr->i_inj);
            nr->bdf.opt = ctx.solver.bdf;
            bdf_init(nr->bdf, nr->ode, 0.0, nr->state.y);
        }
        nr->traced = std::find(ctx.cfg.trace_gids.begin(), ctx.cfg.trace_gids.end(), nr->gid) !=
                     ctx.cfg.trace_gids.end();
    }
}

// ---------------------------------------------------------------------------
// Spike routing

void emit_events_for_spike(EngineCtx& ctx, WorkerLocal& wl, const NeuronRt& nr, double t_sp,
                           bool staged) {
    const Network& net = *ctx.net;
    for (int ei : net.out_edges[nr.gid]) {
        const auto& e = net.edges[ei];
        const double delivery = t_sp + e.delay;
        Event ev;
        ev.kind = EventKind::spike_delivery;
        ev.sender = nr.gid;
        ev.receiver = e.post_gid;
        ev.time = delivery;
        ev.edge_index = ei;
        if (ctx.vardt()) {
            if (grouped_time(ctx, delivery) >= ctx.cfg.t_stop) continue;
        } else {
            ev.grid = grid_ceil_index(delivery, ctx.solver.fixed.dt);
            if (ev.grid >= ctx.total_steps) continue;
        }
        if (staged) {
            auto& bucket = ctx.staging[wl.w][ctx.worker_of[e.post_gid]];
            bucket.push_back(ev);
            wl.stats.stage_depth = std::max<std::uint64_t>(wl.stats.stage_depth, bucket.size());
        } else {
            ctx.fabric->send(ctx.worker_of[e.post_gid], ev);
        }
        ++wl.stats.events_sent;
    }
}

void on_spike(EngineCtx& ctx, WorkerLocal& wl, NeuronRt& nr, double t_sp) {
    ++nr.counters.spikes;
    if (ctx.bsp()) {
        nr.spike_buf.push_back(t_sp);  // exchanged at the next barrier
    } else {
        nr.final_spikes.push_back(t_sp);
        emit_events_for_spike(ctx, wl, nr, t_sp, false);
    }
}

void send_notifications(EngineCtx& ctx, WorkerLocal& wl, NeuronRt& nr, double t_now, bool final) {
    for (auto& tgt : nr.notify) {
        if (final || t_now - tgt.last_sent >= tgt.interval - 1e-12) {
            Event ev;
            ev.kind = EventKind::step_notification;
            ev.sender = nr.gid;
            ev.receiver = tgt.post;
            ev.time = t_now;
            ctx.fabric->send(tgt.dst_worker, ev);
            tgt.last_sent = t_now;
            ++nr.counters.notifications_sent;
            ++wl.stats.notifications_sent;
        }
    }
}

// ---------------------------------------------------------------------------
// Fixed-step neuron advancement, shared verbatim by bsp_fixed and fap_fixed
// so the per-neuron arithmetic is bitwise identical across engines.

void apply_fixed_batch(EngineCtx& ctx, NeuronRt& nr, std::int64_t grid) {
    std::uint64_t applied = 0;
    while (!nr.pending.empty() && nr.pending.top().grid == grid) {
        const PendingEvent ev = nr.pending.top();
        nr.pending.pop();
        if (ev.edge_index >= 0) {
            const auto& e = ctx.net->edges[ev.edge_index];
            apply_synaptic_event(nr.tree, nr.state, e.slot, e.weight);
        } else {
            nr.state.y[nr.tree.v_index(ev.compartment)] += ev.value;
        }
        ++applied;
    }
    if (applied) {
        nr.counters.events_applied += applied;
        ++nr.counters.event_batches;
    }
}

void run_fixed_steps(EngineCtx& ctx, WorkerLocal& wl, NeuronRt& nr, std::int64_t target_idx,
                     bool fap_notify) {
    const double dt = ctx.solver.fixed.dt;
    const std::int64_t sample_every =
        std::max<std::int64_t>(1, llround(ctx.cfg.trace_sample_dt / dt));

    while (nr.step_index < target_idx) {
        if (!nr.pending.empty()) {
            if (nr.pending.top().grid < nr.step_index)
                throw ProtocolError("event delivered in the past of neuron " +
                                    std::to_string(nr.gid));
            apply_fixed_batch(ctx, nr, nr.step_index);
        }
        if (nr.traced && nr.step_index % sample_every == 0)
            nr.trace_buf.push_back({double(nr.step_index) * dt, nr.state.y[nr.tree.soma_index]});

        const double t0 = double(nr.step_index) * dt;
        fixed_step_inplace(nr.tree, nr.state, ctx.solver.fixed, nr.i_inj, nr.ws);
        ++nr.step_index;
        ++nr.counters.steps;
        nr.state.t = double(nr.step_index) * dt;

        const double v1 = nr.state.y[nr.tree.soma_index];
        const double v0 = nr.prev_soma_v;
        if (nr.armed && v1 >= kSpikeThreshold && v0 < kSpikeThreshold) {
            const double t_sp = t0 + dt * (kSpikeThreshold - v0) / (v1 - v0);
            nr.armed = false;
            on_spike(ctx, wl, nr, t_sp);
        } else if (!nr.armed && v1 < kSpikeThreshold) {
            nr.armed = true;
        }
        nr.prev_soma_v = v1;

        if (fap_notify) send_notifications(ctx, wl, nr, nr.state.t, false);
    }
}

// ---------------------------------------------------------------------------
// Variable-step helpers

void vardt_scan_spikes(EngineCtx& ctx, WorkerLocal& wl, NeuronRt& nr, double t0, double t1) {
    const int soma = nr.tree.soma_index;
    auto v_at = [&](double t) { return bdf_interpolate(nr.bdf, t)[soma]; };

    double ta = t0, va = nr.prev_soma_v;
    const double tm = 0.5 * (t0 + t1);
    const std::array<std::pair<double, double>, 2> samples = {
        std::pair{tm, v_at(tm)}, std::pair{t1, nr.bdf.y()[soma]}};

    for (const auto& [tb, vb] : samples) {
        if (nr.armed && vb >= kSpikeThreshold && va < kSpikeThreshold) {
            double lo = ta, hi = tb;
            for (int it = 0; it < 60 && hi - lo > 1e-9; ++it) {
                const double mid = 0.5 * (lo + hi);
                (v_at(mid) >= kSpikeThreshold ? hi : lo) = mid;
            }
            nr.armed = false;
            on_spike(ctx, wl, nr, hi);
        } else if (!nr.armed && vb < kSpikeThreshold) {
            nr.armed = true;
        }
        ta = tb;
        va = vb;
    }
    nr.prev_soma_v = nr.bdf.y()[soma];
}

void vardt_record_trace(NeuronRt& nr, const EngineConfig& cfg, double t0, double t1) {
    const double s = cfg.trace_sample_dt;
    for (std::int64_t k = std::int64_t(std::floor(t0 / s)) + 1; double(k) * s <= t1; ++k) {
        const double t = double(k) * s;
        nr.trace_buf.push_back({t, bdf_interpolate(nr.bdf, t)[nr.tree.soma_index]});
    }
}

StepObserver make_observer(EngineCtx& ctx, WorkerLocal& wl, NeuronRt& nr, bool fap_notify) {
    return [&ctx, &wl, &nr, fap_notify](const BdfState&, double t0, double t1) {
        vardt_scan_spikes(ctx, wl, nr, t0, t1);
        if (nr.traced) vardt_record_trace(nr, ctx.cfg, t0, t1);
        if (fap_notify) send_notifications(ctx, wl, nr, t1, false);
    };
}

// Applies the whole batch of pending events grouped at the front time (which
// must be <= the neuron time), then restarts the IVP at the current state.
void apply_vardt_batch(EngineCtx& ctx, NeuronRt& nr) {
    const double key = nr.pending.top().time;
    std::uint64_t applied = 0;
    while (!nr.pending.empty() && nr.pending.top().time == key) {
        const PendingEvent ev = nr.pending.top();
        nr.pending.pop();
        if (ev.edge_index >= 0) {
            const auto& e = ctx.net->edges[ev.edge_index];
            apply_synaptic_event(nr.tree, nr.state, e.slot, e.weight);
        } else {
            nr.state.y[nr.tree.v_index(ev.compartment)] += ev.value;
        }
        ++applied;
    }
    nr.counters.events_applied += applied;
    ++nr.counters.event_batches;
    ivp_reset(nr.bdf, nr.ode, nr.state.t, nr.state.y);
    nr.prev_soma_v = nr.state.y[nr.tree.soma_index];
    nr.armed = nr.prev_soma_v < kSpikeThreshold ? true : nr.armed;
}

void sync_from_bdf(NeuronRt& nr) {
    nr.state.t = nr.bdf.t();
    nr.state.y = nr.bdf.y();
}

void harvest_vardt_counters(NeuronRt& nr) {
    nr.counters.steps = nr.bdf.counters.steps_taken;
    nr.counters.rejections = nr.bdf.counters.rejections;
    nr.counters.newton_iters = nr.bdf.counters.newton_iters;
    nr.counters.resets = nr.bdf.counters.resets;
}

// ---------------------------------------------------------------------------
// FAP worker loop (fixed and variable step)

void fap_worker(EngineCtx& ctx, int w) {
    WorkerLocal wl;
    wl.w = w;
    const double t_stop = ctx.cfg.t_stop;
    const bool vardt = ctx.vardt();
    const double dt = ctx.solver.fixed.dt;

    SchedulerHeap heap;
    std::vector<Gid> stash;
    for (Gid g : ctx.owned[w]) {
        if (t_stop <= 0.0)
            ctx.neurons[g]->done = true;
        else
            heap.push(0.0, g);
    }

    std::uint64_t idle_iters = 0;
    std::uint64_t seen_epoch = 0;
    auto idle_since = Clock::now();
    bool announced_ready = false;

    auto neuron_time = [&](const NeuronRt& nr) {
        return vardt ? nr.bdf.t() : double(nr.step_index) * dt;
    };

    while (!ctx.failed.load(std::memory_order_acquire)) {
        // 1. Messages: dependency updates and event deliveries.
        const std::size_t got = ctx.fabric->drain(w, wl.inbox_batch);
        for (const Event& ev : wl.inbox_batch) {
            NeuronRt& nr = *ctx.neurons[ev.receiver];
            if (ev.kind == EventKind::step_notification) {
                if (auto* entry = nr.deps.find(ev.sender))
                    entry->last_known_time = std::max(entry->last_known_time, ev.time);
                continue;
            }
            ++wl.stats.events_received;
            PendingEvent pe;
            pe.sender = ev.sender;
            pe.edge_index = ev.edge_index;
            pe.value = ev.value;
            pe.compartment = ev.compartment;
            if (vardt) {
                pe.time = grouped_time(ctx, ev.time);
                if (pe.time < nr.bdf.t() - 1e-9)
                    throw ProtocolError(
                        "no-backstep contract violated: event at t=" + std::to_string(pe.time) +
                        " for neuron " + std::to_string(nr.gid) + " already at t=" +
                        std::to_string(nr.bdf.t()));
            } else {
                pe.grid = ev.grid;
                if (pe.grid < nr.step_index)
                    throw ProtocolError(
                        "no-backstep contract violated: event at step " + std::to_string(pe.grid) +
                        " for neuron " + std::to_string(nr.gid) + " already at step " +
                        std::to_string(nr.step_index));
            }
            nr.pending.push(pe);
            // A spike also advertises the sender's time.
            if (ev.edge_index >= 0) {
                if (auto* entry = nr.deps.find(ev.sender)) {
                    const double t_sp = ev.time - ctx.net->edges[ev.edge_index].delay;
                    entry->last_known_time = std::max(entry->last_known_time, t_sp);
                }
            }
        }
        if (got > 0) {
            for (Gid g : stash) heap.push(neuron_time(*ctx.neurons[g]), g);
            stash.clear();
        }

        // 2. Global quiescence: every neuron at t_stop, no messages in flight.
        if (heap.empty() && stash.empty()) {
            if (!announced_ready) {
                announced_ready = true;
                ctx.workers_ready.fetch_add(1, std::memory_order_acq_rel);
            }
            if (ctx.workers_ready.load(std::memory_order_acquire) == ctx.cfg.workers &&
                ctx.fabric->in_flight() == 0)
                break;
            ctx.fabric->wait(w, std::chrono::microseconds(500));
            continue;
        }

        // 3. Earliest neuron first.
        bool progressed = false;
        if (!heap.empty()) {
            auto [t_pop, g] = heap.pop();
            NeuronRt& nr = *ctx.neurons[g];

            if (vardt) {
                const double t = nr.bdf.t();
                if (!nr.pending.empty() && nr.pending.top().time <= t) {
                    sync_from_bdf(nr);
                    apply_vardt_batch(ctx, nr);
                    progressed = true;
                } else {
                    double horizon = std::min(max_step_time(nr.deps, t_stop), t_stop);
                    if (!nr.pending.empty()) horizon = std::min(horizon, nr.pending.top().time);
                    const double snap =
                        std::max(nr.bdf.opt.h_min, 4e-16 * std::max(1.0, std::abs(horizon)));
                    if (horizon > t + snap) {
                        advance_to(nr.ode, nr.bdf, horizon, make_observer(ctx, wl, nr, true));
                        sync_from_bdf(nr);
                        if (!nr.pending.empty() && nr.pending.top().time == nr.bdf.t())
                            apply_vardt_batch(ctx, nr);
                        send_notifications(ctx, wl, nr, nr.bdf.t(), false);
                        progressed = true;
                    }
                }
                if (nr.bdf.t() >= t_stop - 1e-12) {
                    nr.done = true;
                    send_notifications(ctx, wl, nr, t_stop, true);
                    harvest_vardt_counters(nr);
                } else if (progressed) {
                    heap.push(nr.bdf.t(), g);
                } else {
                    stash.push_back(g);
                }
            } else {
                if (!nr.pending.empty() && nr.pending.top().grid == nr.step_index) {
                    apply_fixed_batch(ctx, nr, nr.step_index);
                    progressed = true;
                }
                const double horizon = std::min(max_step_time(nr.deps, t_stop), t_stop);
                std::int64_t max_idx =
                    std::min(ctx.total_steps, std::int64_t(std::floor(horizon / dt + 1e-9)));
                if (!nr.pending.empty()) max_idx = std::min(max_idx, nr.pending.top().grid);
                if (max_idx > nr.step_index) {
                    run_fixed_steps(ctx, wl, nr, max_idx, true);
                    progressed = true;
                }
                if (nr.step_index >= ctx.total_steps) {
                    nr.done = true;
                    send_notifications(ctx, wl, nr, t_stop, true);
                } else if (progressed) {
                    heap.push(double(nr.step_index) * dt, g);
                } else {
                    stash.push_back(g);
                }
            }
        }

        // 4. Watchdog against global stagnation.
        if (progressed) {
            idle_iters = 0;
            ctx.progress_epoch.fetch_add(1, std::memory_order_acq_rel);
            idle_since = Clock::now();
        } else {
            const std::uint64_t epoch = ctx.progress_epoch.load(std::memory_order_acquire);
            if (epoch != seen_epoch) {
                seen_epoch = epoch;
                idle_iters = 0;
                idle_since = Clock::now();
            } else if (++idle_iters > ctx.cfg.watchdog_limit ||
                       Clock::now() - idle_since > std::chrono::seconds(60)) {
                ctx.watchdog_fires.fetch_add(1);
                throw ProtocolError("watchdog: no global progress (worker " + std::to_string(w) +
                                    ")");
            }
            if (heap.empty()) ctx.fabric->wait(w, std::chrono::microseconds(200));
        }
    }

    ctx.wstats[w] = wl.stats;
}

// ---------------------------------------------------------------------------
// BSP workers

void bsp_ingest(EngineCtx& ctx, WorkerLocal& wl, bool vardt) {
    for (int src = 0; src < ctx.cfg.workers; ++src) {
        for (const Event& ev : ctx.staging[src][wl.w]) {
            NeuronRt& nr = *ctx.neurons[ev.receiver];
            PendingEvent pe;
            pe.sender = ev.sender;
            pe.edge_index = ev.edge_index;
            pe.value = ev.value;
            pe.compartment = ev.compartment;
            if (vardt) {
                pe.time = grouped_time(ctx, ev.time);
            } else {
                pe.grid = ev.grid;
                if (pe.grid < nr.step_index)
                    throw ProtocolError("BSP delivery in the past of neuron " +
                                        std::to_string(nr.gid));
            }
            nr.pending.push(pe);
            ++wl.stats.events_received;
        }
    }
}

void bsp_fixed_worker(EngineCtx& ctx, int w) {
    WorkerLocal wl;
    wl.w = w;
    const std::int64_t spw = std::max<std::int64_t>(ctx.steps_per_window, 1);
    const std::int64_t n_windows = (ctx.total_steps + spw - 1) / spw;

    for (std::int64_t win = 0; win < n_windows; ++win) {
        const std::int64_t end_idx = std::min(ctx.total_steps, (win + 1) * spw);
        for (Gid g : ctx.owned[w]) {
            NeuronRt& nr = *ctx.neurons[g];
            run_fixed_steps(ctx, wl, nr, end_idx, false);
            for (double t_sp : nr.spike_buf) {
                emit_events_for_spike(ctx, wl, nr, t_sp, true);
                nr.final_spikes.push_back(t_sp);
            }
            nr.spike_buf.clear();
        }
        if (!ctx.barrier->arrive_and_wait()) return;
        bsp_ingest(ctx, wl, false);
        if (!ctx.barrier->arrive_and_wait()) return;
        for (auto& bucket : ctx.staging[w]) bucket.clear();
    }
    for (Gid g : ctx.owned[w]) ctx.neurons[g]->done = true;
    ctx.wstats[w] = wl.stats;
}

void bsp_vardt_worker(EngineCtx& ctx, int w) {
    WorkerLocal wl;
    wl.w = w;
    const double t_stop = ctx.cfg.t_stop;
    const double comm = ctx.cfg.comm_interval;
    const std::int64_t n_windows = std::int64_t(std::ceil(t_stop / comm - 1e-9));

    for (std::int64_t win = 0; win < n_windows; ++win) {
        const double window_end = std::min(t_stop, double(win + 1) * comm);

        for (Gid g : ctx.owned[w]) {
            NeuronRt& nr = *ctx.neurons[g];

            // Backstepping: an exchanged event behind the speculative front
            // is reached by interpolating the last step's polynomial back,
            // rescinding the speculative suffix of spikes and samples.
            while (!nr.pending.empty() && nr.pending.top().time < nr.bdf.t() - 1e-12) {
                const double t_e = nr.pending.top().time;
                const int len = int(nr.bdf.ht.size());
                const int p = std::min(nr.bdf.q + 1, len);
                if (t_e < nr.bdf.ht[len - p] - 1e-12)
                    throw ProtocolError("backstep target t=" + std::to_string(t_e) +
                                        " precedes the checkpoint of neuron " +
                                        std::to_string(nr.gid));
                Eigen::VectorXd y_e = bdf_interpolate(nr.bdf, t_e);
                nr.state.t = t_e;
                nr.state.y = std::move(y_e);
                while (!nr.spike_buf.empty() && nr.spike_buf.back() > t_e) {
                    nr.spike_buf.pop_back();
                    --nr.counters.spikes;
                }
                while (!nr.trace_buf.empty() && nr.trace_buf.back().first > t_e)
                    nr.trace_buf.pop_back();
                nr.prev_soma_v = nr.state.y[nr.tree.soma_index];
                nr.armed = nr.prev_soma_v < kSpikeThreshold;
                ++nr.counters.backsteps;
                apply_vardt_batch(ctx, nr);
            }

            // Step through the window; the last step may traverse it, and
            // steps never pass the nearest queued event.
            while (nr.bdf.t() < window_end && nr.bdf.t() < t_stop) {
                if (!nr.pending.empty() && nr.pending.top().time <= nr.bdf.t()) {
                    sync_from_bdf(nr);
                    apply_vardt_batch(ctx, nr);
                    continue;
                }
                const double next_ev = nr.pending.empty() ? 1e300 : nr.pending.top().time;
                auto obs = make_observer(ctx, wl, nr, false);
                if (next_ev <= window_end) {
                    advance_to(nr.ode, nr.bdf, next_ev, obs);
                    sync_from_bdf(nr);
                    apply_vardt_batch(ctx, nr);
                } else {
                    const bool on_event =
                        advance_past(nr.ode, nr.bdf, window_end, std::min(next_ev, t_stop), obs);
                    sync_from_bdf(nr);
                    if (on_event && !nr.pending.empty() && nr.pending.top().time == nr.bdf.t())
                        apply_vardt_batch(ctx, nr);
                }
            }

            // Spikes up to the window end become final and are exchanged.
            auto it = nr.spike_buf.begin();
            while (it != nr.spike_buf.end() && *it <= window_end) {
                emit_events_for_spike(ctx, wl, nr, *it, true);
                nr.final_spikes.push_back(*it);
                ++it;
            }
            nr.spike_buf.erase(nr.spike_buf.begin(), it);
        }

        if (!ctx.barrier->arrive_and_wait()) return;
        bsp_ingest(ctx, wl, true);
        if (!ctx.barrier->arrive_and_wait()) return;
        for (auto& bucket : ctx.staging[w]) bucket.clear();
    }

    for (Gid g : ctx.owned[w]) {
        NeuronRt& nr = *ctx.neurons[g];
        nr.final_spikes.insert(nr.final_spikes.end(), nr.spike_buf.begin(), nr.spike_buf.end());
        nr.spike_buf.clear();
        nr.done = true;
        harvest_vardt_counters(nr);
    }
    ctx.wstats[w] = wl.stats;
}

// ---------------------------------------------------------------------------

SimulationOutput run_impl(const Network& net, const EngineConfig& cfg, const SolverConfig& solver,
                          const StimulusSet& stim) {
    EngineCtx ctx;
    ctx.net = &net;
    ctx.cfg = cfg;
    ctx.solver = solver;
    if (!ctx.vardt() || ctx.cfg.model == EngineModel::bsp_fixed) {
        ctx.total_steps = llround(cfg.t_stop / solver.fixed.dt);
        ctx.steps_per_window = llround(cfg.comm_interval / solver.fixed.dt);
    }
    // The speculative engine bounds each step by the comm interval, so the
    // overshoot past a window never exceeds one window and the depth-1
    // checkpoint always covers the backstep target.
    if (cfg.model == EngineModel::bsp_vardt)
        ctx.solver.bdf.h_max = std::min(ctx.solver.bdf.h_max, cfg.comm_interval);
    validate_config(ctx);
    ctx.fabric = std::make_unique<Fabric>(cfg.workers);
    ctx.barrier = std::make_unique<PoisonBarrier>(cfg.workers);
    ctx.staging.assign(cfg.workers, std::vector<std::vector<Event>>(cfg.workers));
    ctx.errors.resize(cfg.workers);
    ctx.wstats.resize(cfg.workers);
    build_runtime(ctx, stim);

    const auto t_begin = Clock::now();

    auto worker_body = [&](int w) {
        try {
            switch (cfg.model) {
                case EngineModel::fap_fixed:
                case EngineModel::fap_vardt: fap_worker(ctx, w); break;
                case EngineModel::bsp_fixed: bsp_fixed_worker(ctx, w); break;
                case EngineModel::bsp_vardt: bsp_vardt_worker(ctx, w); break;
            }
        } catch (...) {
            ctx.errors[w] = std::current_exception();
            ctx.failed.store(true, std::memory_order_release);
            ctx.fabric->poison();
            ctx.barrier->poison();
        }
    };

    if (cfg.workers == 1) {
        worker_body(0);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(cfg.workers);
        for (int w = 0; w < cfg.workers; ++w) threads.emplace_back(worker_body, w);
        for (auto& th : threads) th.join();
    }

    for (auto& err : ctx.errors)
        if (err) std::rethrow_exception(err);

    SimulationOutput out;
    out.wall_seconds = std::chrono::duration<double>(Clock::now() - t_begin).count();
    out.per_neuron.resize(net.n_neurons());
    for (int g = 0; g < net.n_neurons(); ++g) {
        NeuronRt& nr = *ctx.neurons[g];
        if (ctx.vardt()) harvest_vardt_counters(nr);
        out.per_neuron[g] = nr.counters;
        for (double t_sp : nr.final_spikes)
            if (t_sp < cfg.t_stop) out.spikes.push_back({Gid(g), t_sp});
        if (nr.traced) out.traces.push_back({Gid(g), std::move(nr.trace_buf)});
    }
    std::sort(out.spikes.begin(), out.spikes.end(), [](const SpikeRecord& a, const SpikeRecord& b) {
        return std::tie(a.time, a.gid) < std::tie(b.time, b.gid);
    });
    std::sort(out.traces.begin(), out.traces.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    out.fold_neuron_totals();
    for (const auto& ws : ctx.wstats) {
        out.totals.events_sent += ws.events_sent;
        out.totals.events_received += ws.events_received;
    }
    out.totals.max_queue_depth = ctx.fabric->max_depth();
    for (const auto& ws : ctx.wstats)
        out.totals.max_queue_depth = std::max(out.totals.max_queue_depth, ws.stage_depth);
    out.totals.watchdog_fires = ctx.watchdog_fires.load();

    const char* model_name = cfg.model == EngineModel::bsp_fixed    ? "bsp_fixed"
                             : cfg.model == EngineModel::bsp_vardt  ? "bsp_vardt"
                             : cfg.model == EngineModel::fap_fixed  ? "fap_fixed"
                                                                    : "fap_vardt";
    out.audit.push_back("engine=" + std::string(model_name) + " workers=" +
                        std::to_string(cfg.workers) + " t_stop=" + std::to_string(cfg.t_stop) +
                        " neurons=" + std::to_string(net.n_neurons()));
    out.audit.push_back("totals steps=" + std::to_string(out.totals.steps) + " rejections=" +
                        std::to_string(out.totals.rejections) + " resets=" +
                        std::to_string(out.totals.resets) + " backsteps=" +
                        std::to_string(out.totals.backsteps));
    out.audit.push_back("events sent=" + std::to_string(out.totals.events_sent) + " received=" +
                        std::to_string(out.totals.events_received) + " applied=" +
                        std::to_string(out.totals.events_applied) + " batches=" +
                        std::to_string(out.totals.event_batches) + " notifications=" +
                        std::to_string(out.totals.notifications) + " max_queue_depth=" +
                        std::to_string(out.totals.max_queue_depth));
    out.audit.push_back("watchdog_fires=" + std::to_string(out.totals.watchdog_fires) +
                        " quiescence=clean");
    return out;
}

}  // namespace

SimulationOutput bsp_fixed_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim) {
    EngineConfig c = cfg;
    c.model = EngineModel::bsp_fixed;
    return run_impl(net, c, solver, stim);
}

SimulationOutput bsp_vardt_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim) {
    EngineConfig c = cfg;
    c.model = EngineModel::bsp_vardt;
    return run_impl(net, c, solver, stim);
}

SimulationOutput fap_fixed_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim) {
    EngineConfig c = cfg;
    c.model = EngineModel::fap_fixed;
    return run_impl(net, c, solver, stim);
}

SimulationOutput fap_vardt_run(const Network& net, const EngineConfig& cfg,
                               const SolverConfig& solver, const StimulusSet& stim) {
    EngineConfig c = cfg;
    c.model = EngineModel::fap_vardt;
    return run_impl(net, c, solver, stim);
}

SimulationOutput run_engine(const Network& net, const EngineConfig& cfg,
                            const SolverConfig& solver, const StimulusSet& stim) {
    return run_impl(net, cfg, solver, stim);
}

}  // namespace nsim
