#pragma once

#include "nsim/model.hpp"

#include <string>
#include <vector>

namespace nsim {

struct NetworkError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A complete simulable network: one morphology per neuron plus a weighted,
// delayed edge list. Synapse slots for incoming edges are appended to each
// post neuron's morphology when the network is finalized, so the edge order
// in the file pins the state layout byte-exactly across replays.
struct Network {
    std::vector<MorphologySpec> morphologies;
    std::vector<SynapseEdge> edges;

    std::vector<std::vector<int>> out_edges;  // per pre gid, edge indices
    double min_delay = kMinDelay;

    int n_neurons() const { return int(morphologies.size()); }

    // Assigns synapse slots, builds adjacency, checks the edge invariants.
    void finalize();
};

// Continuous per-neuron current drives plus pulse-train protocols; the
// stimulus file stores resolved amplitudes so runs replay byte-exactly.
struct PulseTrain {
    Gid gid = 0;
    double amplitude = 0.0;  // nA
    double frequency = 0.0;  // Hz
    double duration = 0.0;   // ms
};

struct StimulusSet {
    std::vector<std::pair<Gid, double>> clamps;  // (gid, nA), constant over the run
    std::vector<PulseTrain> pulses;
};

void write_network(const Network& net, const std::string& path);
Network read_network(const std::string& path);

void write_stimulus(const StimulusSet& stim, const std::string& path);
StimulusSet read_stimulus(const std::string& path);

}  // namespace nsim
