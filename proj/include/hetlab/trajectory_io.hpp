#ifndef HETLAB_TRAJECTORY_IO_HPP
#define HETLAB_TRAJECTORY_IO_HPP

#include <json.hpp>

#include "hetlab/pomg.hpp"

namespace hetlab {

// JSONL trajectory log: a header line carrying n_agents and the block widths,
// then one TransitionRecord per line with keys gs, ja, obs, ns, nobs, r and
// an optional ap (per-agent action probabilities).
struct TrajectoryHeader {
    int n_agents = 0;
    int agent_state_width = 0;
    int env_width = 0;
    int obs_width = 0;
    int n_actions = 5;
};

// Raised with the offending line number so the CLI can report it.
struct TrajectoryFormatError : std::runtime_error {
    int line;
    TrajectoryFormatError(int line_no, const std::string& what)
        : std::runtime_error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
};

inline nlohmann::json record_to_json(const TransitionRecord& rec) {
    nlohmann::json j;
    j["gs"] = {{"a", rec.global_state.agent_states}, {"e", rec.global_state.env_state}};
    j["ja"] = rec.joint_action.actions;
    j["obs"] = rec.observations;
    j["ns"] = rec.next_local_states;
    j["nobs"] = rec.next_observations;
    j["r"] = rec.rewards;
    if (!rec.action_probs.empty())
        j["ap"] = rec.action_probs;
    return j;
}

inline std::string header_line(const TrajectoryHeader& h) {
    nlohmann::json j;
    j["n_agents"] = h.n_agents;
    j["dims"] = {{"agent_state", h.agent_state_width},
                 {"env_state", h.env_width},
                 {"obs", h.obs_width},
                 {"n_actions", h.n_actions}};
    return j.dump();
}

inline void write_trajectories(const std::string& path, const TrajectoryHeader& header,
                               const SamplePool& pool) {
    std::ostringstream out;
    out << header_line(header) << '\n';
    for (size_t i = 0; i < pool.size(); ++i)
        out << record_to_json(pool.at(i)).dump() << '\n';
    write_file(path, out.str());
}

namespace detail {

inline Vec json_vec(const nlohmann::json& j, int line) {
    if (!j.is_array())
        throw TrajectoryFormatError(line, "expected an array of numbers");
    Vec v;
    v.reserve(j.size());
    for (const auto& e : j) {
        if (!e.is_number())
            throw TrajectoryFormatError(line, "expected a number");
        v.push_back(e.get<double>());
    }
    return v;
}

inline std::vector<Vec> json_vec_list(const nlohmann::json& j, size_t expect, int line) {
    if (!j.is_array() || j.size() != expect)
        throw TrajectoryFormatError(line, "expected a per-agent list of length " +
                                              std::to_string(expect));
    std::vector<Vec> out;
    out.reserve(expect);
    for (const auto& e : j)
        out.push_back(json_vec(e, line));
    return out;
}

} // namespace detail

// Parses the whole log into a pool. Malformed lines raise
// TrajectoryFormatError carrying the 1-based line number.
inline TrajectoryHeader read_trajectories(const std::string& path, SamplePool& pool) {
    std::ifstream in(path);
    if (!in)
        throw StructuralError("cannot open trajectory log: " + path);
    std::string line;
    int line_no = 0;
    TrajectoryHeader header;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw TrajectoryFormatError(line_no, "invalid JSON");
        if (!have_header) {
            if (!j.contains("n_agents") || !j.contains("dims"))
                throw TrajectoryFormatError(line_no, "missing header with n_agents and dims");
            header.n_agents = j["n_agents"].get<int>();
            const auto& d = j["dims"];
            header.agent_state_width = d.value("agent_state", 0);
            header.env_width = d.value("env_state", 0);
            header.obs_width = d.value("obs", 0);
            header.n_actions = d.value("n_actions", 5);
            if (header.n_agents <= 0)
                throw TrajectoryFormatError(line_no, "n_agents must be positive");
            have_header = true;
            continue;
        }
        for (const char* key : {"gs", "ja", "obs", "ns", "nobs", "r"})
            if (!j.contains(key))
                throw TrajectoryFormatError(line_no, std::string("missing key ") + key);
        const size_t n = size_t(header.n_agents);
        TransitionRecord rec;
        if (!j["gs"].contains("a") || !j["gs"].contains("e"))
            throw TrajectoryFormatError(line_no, "gs must carry keys a and e");
        rec.global_state.agent_states = detail::json_vec_list(j["gs"]["a"], n, line_no);
        rec.global_state.env_state = detail::json_vec(j["gs"]["e"], line_no);
        if (!j["ja"].is_array() || j["ja"].size() != n)
            throw TrajectoryFormatError(line_no, "ja must list one action per agent");
        for (const auto& a : j["ja"]) {
            if (!a.is_number_integer())
                throw TrajectoryFormatError(line_no, "actions must be integers");
            const int av = a.get<int>();
            if (av < 0 || av >= header.n_actions)
                throw TrajectoryFormatError(line_no, "action index out of range");
            rec.joint_action.actions.push_back(av);
        }
        rec.observations = detail::json_vec_list(j["obs"], n, line_no);
        rec.next_local_states = detail::json_vec_list(j["ns"], n, line_no);
        rec.next_observations = detail::json_vec_list(j["nobs"], n, line_no);
        rec.rewards = detail::json_vec(j["r"], line_no);
        if (rec.rewards.size() != n)
            throw TrajectoryFormatError(line_no, "r must hold one reward per agent");
        if (j.contains("ap"))
            rec.action_probs = detail::json_vec_list(j["ap"], n, line_no);
        try {
            pool.insert(std::move(rec));
        } catch (const StructuralError& ex) {
            throw TrajectoryFormatError(line_no, ex.what());
        }
    }
    if (!have_header)
        throw TrajectoryFormatError(line_no == 0 ? 1 : line_no, "empty or truncated log");
    return header;
}

} // namespace hetlab

#endif // HETLAB_TRAJECTORY_IO_HPP
