#include "nsim/network.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace nsim {

void Network::finalize() {
    const int n = n_neurons();
    out_edges.assign(n, {});
    for (auto& m : morphologies) m.synapses.clear();

    min_delay = edges.empty() ? kMinDelay : 1e30;
    for (int i = 0; i < int(edges.size()); ++i) {
        auto& e = edges[i];
        if (e.pre_gid < 0 || e.pre_gid >= n || e.post_gid < 0 || e.post_gid >= n)
            throw NetworkError("edge " + std::to_string(i) + " references unknown neuron");
        if (e.delay < kMinDelay - 1e-12)
            throw NetworkError("edge " + std::to_string(i) + " delay below the 0.1 ms minimum");
        if (e.weight < 0.0) throw NetworkError("edge " + std::to_string(i) + " has negative weight");
        if (!(e.tau > 0.0)) throw NetworkError("edge " + std::to_string(i) + " has non-positive tau");

        auto& morph = morphologies[e.post_gid];
        e.slot = int(morph.synapses.size());
        morph.synapses.push_back({e.target_compartment, e.e_syn, e.tau});
        out_edges[e.pre_gid].push_back(i);
        min_delay = std::min(min_delay, e.delay);
    }
}

namespace {

const char* topo_name(MorphologySpec::Topology t) {
    switch (t) {
        case MorphologySpec::Topology::chain: return "chain";
        case MorphologySpec::Topology::balanced_tree: return "balanced";
        case MorphologySpec::Topology::random_tree: return "random";
    }
    return "chain";
}

MorphologySpec::Topology topo_from(const std::string& s) {
    if (s == "chain") return MorphologySpec::Topology::chain;
    if (s == "balanced") return MorphologySpec::Topology::balanced_tree;
    if (s == "random") return MorphologySpec::Topology::random_tree;
    throw NetworkError("unknown topology '" + s + "'");
}

}  // namespace

void write_network(const Network& net, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw NetworkError("cannot write network file: " + path);
    std::fprintf(f, "# nsim network\nneurons %d\n", net.n_neurons());
    for (int g = 0; g < net.n_neurons(); ++g) {
        const auto& m = net.morphologies[g];
        std::fprintf(f, "m %d %d %s %" PRIu64 " %.17g\n", g, m.n_compartments, topo_name(m.topology),
                     std::uint64_t(m.seed), m.scale);
    }
    std::fprintf(f, "# pre post compartment weight e_syn tau delay\n");
    for (const auto& e : net.edges)
        std::fprintf(f, "e %d %d %d %.17g %.17g %.17g %.17g\n", e.pre_gid, e.post_gid,
                     e.target_compartment, e.weight, e.e_syn, e.tau, e.delay);
    std::fclose(f);
}

Network read_network(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NetworkError("cannot open network file: " + path);
    Network net;
    std::string line;
    int n = -1;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "neurons") {
            ss >> n;
            if (n < 0) throw NetworkError("bad neuron count in " + path);
            net.morphologies.assign(n, MorphologySpec{});
        } else if (tag == "m") {
            int gid, nc;
            std::string topo;
            std::uint64_t seed;
            double scale;
            if (!(ss >> gid >> nc >> topo >> seed >> scale))
                throw NetworkError("bad morphology record in " + path);
            if (gid < 0 || gid >= n) throw NetworkError("morphology gid out of range in " + path);
            auto spec = MorphologySpec::hh_tree(nc, seed, scale);
            spec.topology = topo_from(topo);
            net.morphologies[gid] = spec;
        } else if (tag == "e") {
            SynapseEdge e;
            if (!(ss >> e.pre_gid >> e.post_gid >> e.target_compartment >> e.weight >> e.e_syn >>
                  e.tau >> e.delay))
                throw NetworkError("bad edge record in " + path);
            net.edges.push_back(e);
        } else {
            throw NetworkError("unknown record '" + tag + "' in " + path);
        }
    }
    if (n < 0) throw NetworkError("network file has no neuron count: " + path);
    net.finalize();
    return net;
}

void write_stimulus(const StimulusSet& stim, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw NetworkError("cannot write stimulus file: " + path);
    std::fprintf(f, "# nsim stimulus\n");
    for (const auto& [gid, amp] : stim.clamps) std::fprintf(f, "clamp %d %.17g\n", gid, amp);
    for (const auto& p : stim.pulses)
        std::fprintf(f, "pulses %d %.17g %.17g %.17g\n", p.gid, p.amplitude, p.frequency, p.duration);
    std::fclose(f);
}

StimulusSet read_stimulus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NetworkError("cannot open stimulus file: " + path);
    StimulusSet stim;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "clamp") {
            Gid gid;
            double amp;
            if (!(ss >> gid >> amp)) throw NetworkError("bad clamp record in " + path);
            stim.clamps.push_back({gid, amp});
        } else if (tag == "pulses") {
            PulseTrain p;
            if (!(ss >> p.gid >> p.amplitude >> p.frequency >> p.duration))
                throw NetworkError("bad pulses record in " + path);
            stim.pulses.push_back(p);
        } else {
            throw NetworkError("unknown stimulus record '" + tag + "' in " + path);
        }
    }
    return stim;
}

}  // namespace nsim
