#include "nsim/run_config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace nsim {

namespace {

EngineModel parse_model(const std::string& v) {
    if (v == "bsp_fixed") return EngineModel::bsp_fixed;
    if (v == "bsp_vardt") return EngineModel::bsp_vardt;
    if (v == "fap_fixed") return EngineModel::fap_fixed;
    if (v == "fap_vardt") return EngineModel::fap_vardt;
    throw ConfigError("unknown engine '" + v + "'");
}

FixedScheme parse_scheme(const std::string& v) {
    if (v == "staggered_linear") return FixedScheme::staggered_linear;
    if (v == "explicit_staggered_euler") return FixedScheme::explicit_staggered_euler;
    if (v == "deriv_implicit") return FixedScheme::deriv_implicit;
    throw ConfigError("unknown scheme '" + v + "'");
}

Grouping parse_grouping(const std::string& v) {
    if (v == "precise") return Grouping::precise;
    if (v == "half_step") return Grouping::half_step;
    if (v == "full_step") return Grouping::full_step;
    throw ConfigError("unknown grouping '" + v + "'");
}

double parse_num(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("bad numeric value '" + v + "' for " + key);
    }
}

}  // namespace

void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
    if (key == "engine") rc.engine.model = parse_model(value);
    else if (key == "workers") rc.engine.workers = int(parse_num(key, value));
    else if (key == "t_stop") rc.engine.t_stop = parse_num(key, value);
    else if (key == "comm_interval") { rc.engine.comm_interval = parse_num(key, value); rc.comm_auto = false; }
    else if (key == "grouping") rc.engine.grouping = parse_grouping(value);
    else if (key == "seed") rc.engine.seed = std::uint64_t(parse_num(key, value));
    else if (key == "random_placement") rc.engine.random_placement = parse_num(key, value) != 0;
    else if (key == "notification_factor") rc.engine.notification_factor = parse_num(key, value);
    else if (key == "watchdog_limit") rc.engine.watchdog_limit = std::uint64_t(parse_num(key, value));
    else if (key == "trace_sample_dt") rc.engine.trace_sample_dt = parse_num(key, value);
    else if (key == "trace_gids") {
        rc.engine.trace_gids.clear();
        std::istringstream ss(value);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) rc.engine.trace_gids.push_back(Gid(parse_num(key, tok)));
    }
    else if (key == "scheme") rc.solver.fixed.scheme = parse_scheme(value);
    else if (key == "dt") rc.solver.fixed.dt = parse_num(key, value);
    else if (key == "fixed_newton_tol") rc.solver.fixed.newton_tol = parse_num(key, value);
    else if (key == "atol") rc.solver.bdf.atol = parse_num(key, value);
    else if (key == "rtol") rc.solver.bdf.rtol = parse_num(key, value);
    else if (key == "q_max") rc.solver.bdf.q_max = int(parse_num(key, value));
    else if (key == "newton_tol") rc.solver.bdf.newton_tol = parse_num(key, value);
    else if (key == "newton_max_iters") rc.solver.bdf.newton_max_iters = int(parse_num(key, value));
    else if (key == "h_min") rc.solver.bdf.h_min = parse_num(key, value);
    else if (key == "h_max") rc.solver.bdf.h_max = parse_num(key, value);
    else if (key == "network") rc.network_path = value;
    else if (key == "stimulus") rc.stimulus_path = value;
    else if (key == "out") rc.out_dir = value;
    else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    RunConfig rc;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        apply_setting(rc, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return rc;
}

SimulationOutput run(const RunConfig& rc) {
    if (rc.network_path.empty()) throw ConfigError("no network file specified");
    Network net = read_network(rc.network_path);
    StimulusSet stim;
    if (!rc.stimulus_path.empty()) stim = read_stimulus(rc.stimulus_path);

    EngineConfig ec = rc.engine;
    if (rc.comm_auto) ec.comm_interval = net.min_delay;

    SimulationOutput out = run_engine(net, ec, rc.solver, stim);

    std::filesystem::create_directories(rc.out_dir);
    write_spikes(out, rc.out_dir + "/spikes.tsv");
    write_counters(out, rc.out_dir + "/counters.tsv");
    write_summary_json(out, rc.out_dir + "/summary.json");
    write_audit(out, rc.out_dir + "/audit.log");
    if (!out.traces.empty()) write_traces(out, rc.out_dir + "/traces");
    return out;
}

}  // namespace nsim
