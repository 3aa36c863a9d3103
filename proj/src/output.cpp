#include "nsim/output.hpp"

#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nsim {

void SimulationOutput::fold_neuron_totals() {
    totals.steps = totals.rejections = totals.newton_iters = 0;
    totals.resets = totals.backsteps = totals.events_applied = 0;
    totals.event_batches = totals.notifications = 0;
    for (const auto& c : per_neuron) {
        totals.steps += c.steps;
        totals.rejections += c.rejections;
        totals.newton_iters += c.newton_iters;
        totals.resets += c.resets;
        totals.backsteps += c.backsteps;
        totals.events_applied += c.events_applied;
        totals.event_batches += c.event_batches;
        totals.notifications += c.notifications_sent;
    }
}

void write_spikes(const SimulationOutput& out, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw ModelError("cannot write spike file: " + path);
    std::fprintf(f, "gid\ttime_ms\n");
    for (const auto& s : out.spikes) std::fprintf(f, "%d\t%.17g\n", s.gid, s.time);
    std::fclose(f);
}

std::vector<SpikeRecord> read_spikes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ModelError("cannot open spike file: " + path);
    std::vector<SpikeRecord> spikes;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        SpikeRecord r;
        if (ss >> r.gid >> r.time) spikes.push_back(r);
    }
    return spikes;
}

void write_traces(const SimulationOutput& out, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [gid, trace] : out.traces) {
        const std::string path = dir + "/trace_" + std::to_string(gid) + ".tsv";
        std::FILE* f = std::fopen(path.c_str(), "w");
        if (!f) throw ModelError("cannot write trace file: " + path);
        std::fprintf(f, "time_ms\tv_soma_mv\n");
        for (const auto& [t, v] : trace) std::fprintf(f, "%.17g\t%.17g\n", t, v);
        std::fclose(f);
    }
}

void write_counters(const SimulationOutput& out, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw ModelError("cannot write counters file: " + path);
    std::fprintf(f,
                 "gid\tsteps\trejections\tnewton_iters\tresets\tbacksteps\tevents_applied\t"
                 "event_batches\tnotifications\tspikes\n");
    for (int g = 0; g < int(out.per_neuron.size()); ++g) {
        const auto& c = out.per_neuron[g];
        std::fprintf(f,
                     "%d\t%" PRIu64 "\t%" PRIu64 "\t%" PRIu64 "\t%" PRIu64 "\t%" PRIu64 "\t%" PRIu64
                     "\t%" PRIu64 "\t%" PRIu64 "\t%" PRIu64 "\n",
                     g, c.steps, c.rejections, c.newton_iters, c.resets, c.backsteps,
                     c.events_applied, c.event_batches, c.notifications_sent, c.spikes);
    }
    std::fclose(f);
}

void write_audit(const SimulationOutput& out, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw ModelError("cannot write audit file: " + path);
    for (const auto& line : out.audit) std::fprintf(f, "%s\n", line.c_str());
    std::fclose(f);
}

void write_summary_json(const SimulationOutput& out, const std::string& path) {
    nlohmann::json j;
    j["spike_count"] = out.spikes.size();
    j["wall_seconds"] = out.wall_seconds;
    j["totals"] = {{"steps", out.totals.steps},
                   {"rejections", out.totals.rejections},
                   {"newton_iters", out.totals.newton_iters},
                   {"resets", out.totals.resets},
                   {"backsteps", out.totals.backsteps},
                   {"events_sent", out.totals.events_sent},
                   {"events_received", out.totals.events_received},
                   {"events_applied", out.totals.events_applied},
                   {"event_batches", out.totals.event_batches},
                   {"notifications", out.totals.notifications},
                   {"max_queue_depth", out.totals.max_queue_depth},
                   {"watchdog_fires", out.totals.watchdog_fires}};
    std::ofstream f(path);
    if (!f) throw ModelError("cannot write summary file: " + path);
    f << j.dump(2) << "\n";
}

}  // namespace nsim
