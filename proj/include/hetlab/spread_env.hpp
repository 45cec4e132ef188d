#ifndef HETLAB_SPREAD_ENV_HPP
#define HETLAB_SPREAD_ENV_HPP

#include <array>

#include "hetlab/pomg.hpp"

#ifndef M_PI
#define M_PI 3.14159265358979323846
#endif

namespace hetlab {

// Physics constants. Chosen so single-episode rollouts already separate the
// scenario variants at desk scale.
namespace phys {
inline constexpr double kDt = 0.1;
inline constexpr double kAccel = 5.0;        // action acceleration magnitude
inline constexpr double kDamping = 0.75;     // velocity retained per step
inline constexpr double kForceMag = 0.5;     // field strength numerator
inline constexpr double kForceMinR = 0.1;    // denominator floor
inline constexpr double kForceRadius = 0.5;  // interaction cutoff
inline constexpr double kPosClip = 1.2;
inline constexpr double kSpawnRadius = 0.25;
inline constexpr double kAnnulusLo = 0.6;
inline constexpr double kAnnulusHi = 0.9;
inline constexpr double kFormRadius = 0.2;   // formation-bonus neighborhood
inline constexpr int kNumActions = 5;        // no-op, +x, -x, +y, -y
inline constexpr int kStateWidth = 4;        // px, py, vx, vy
inline constexpr int kNearestCap = 9;        // other agents visible in an observation
} // namespace phys

enum class ScenarioKind {
    Base,
    V1, // observation orders shuffled per group
    V2, // max speeds differ per group
    V3, // force-field signs differ per group
    V4, // landmark targets differ per group
    V5, // v1 + v4
    V6, // v1 + v2 + v3 + v4
    Pms,
};

// Full scenario descriptor. Named constructors cover the case-study variants
// and the PMS task table; everything is also JSON-loadable via the CLI.
struct SpreadConfig {
    ScenarioKind kind = ScenarioKind::Base;
    std::string name = "base";
    int n_agents = 4;
    std::vector<int> group_sizes;
    std::vector<double> max_speed;                // per group, world units/step
    std::vector<int> force_sign;                  // per group, in {-1, 0, +1}
    std::vector<std::vector<int>> obs_permutation; // per group, over entity blocks
    std::vector<std::vector<int>> target_set;     // per group, landmark indices
    int n_landmarks = 2;
    int n_colors = 2;
    std::vector<int> landmark_color;
    double formation_bonus = 0.0; // 0.5 for PMS, 0 for case study
    int episode_len = 25;
    uint64_t seed = 0;

    int n_groups() const { return int(group_sizes.size()); }

    int group_of(int agent) const {
        int g = 0, acc = 0;
        for (; g < n_groups(); ++g) {
            acc += group_sizes[size_t(g)];
            if (agent < acc)
                return g;
        }
        throw StructuralError("SpreadConfig::group_of: agent out of range");
    }

    int n_entity_blocks() const {
        return n_landmarks + std::min(phys::kNearestCap, n_agents - 1);
    }

    int obs_width() const {
        return 4 + n_landmarks * (2 + n_colors) +
               std::min(phys::kNearestCap, n_agents - 1) * 2;
    }

    int env_width() const { return n_landmarks * (2 + n_colors); }

    void validate() const {
        int total = 0;
        for (int s : group_sizes)
            total += s;
        if (total != n_agents)
            throw StructuralError("SpreadConfig: group sizes do not sum to n_agents");
        const size_t k = group_sizes.size();
        if (max_speed.size() != k || force_sign.size() != k ||
            obs_permutation.size() != k || target_set.size() != k)
            throw StructuralError("SpreadConfig: per-group arrays must match group count");
        if (int(landmark_color.size()) != n_landmarks)
            throw StructuralError("SpreadConfig: landmark_color size mismatch");
        const int blocks = n_entity_blocks();
        for (const auto& perm : obs_permutation) {
            if (int(perm.size()) != blocks)
                throw StructuralError("SpreadConfig: obs permutation has wrong length");
            std::vector<bool> seen(size_t(blocks), false);
            for (int p : perm) {
                if (p < 0 || p >= blocks || seen[size_t(p)])
                    throw StructuralError("SpreadConfig: obs permutation is not a bijection");
                seen[size_t(p)] = true;
            }
        }
        for (const auto& ts : target_set) {
            if (ts.empty())
                throw StructuralError("SpreadConfig: empty target set");
            for (int t : ts)
                if (t < 0 || t >= n_landmarks)
                    throw StructuralError("SpreadConfig: target landmark out of range");
        }
        for (int s : force_sign)
            if (s < -1 || s > 1)
                throw StructuralError("SpreadConfig: force sign must be -1, 0 or +1");
    }

    static SpreadConfig case_study(ScenarioKind kind);
    static SpreadConfig pms(const std::string& task);
    static SpreadConfig named(const std::string& name);
};

inline std::vector<int> identity_perm(int n) {
    std::vector<int> p(size_t(n), 0);
    std::iota(p.begin(), p.end(), 0);
    return p;
}

inline std::vector<int> reversed_perm(int n) {
    auto p = identity_perm(n);
    std::reverse(p.begin(), p.end());
    return p;
}

inline SpreadConfig SpreadConfig::case_study(ScenarioKind kind) {
    SpreadConfig c;
    c.kind = kind;
    c.n_agents = 4;
    c.group_sizes = {2, 2};
    c.max_speed = {1.0, 1.0};
    c.force_sign = {0, 0};
    c.n_landmarks = 2;
    c.n_colors = 2;
    c.landmark_color = {0, 1};
    c.episode_len = 25;
    const int blocks = c.n_entity_blocks();
    c.obs_permutation = {identity_perm(blocks), identity_perm(blocks)};
    c.target_set = {{0, 1}, {0, 1}}; // shared landmarks unless objective-heterogeneous
    const bool obs_het = kind == ScenarioKind::V1 || kind == ScenarioKind::V5 ||
                         kind == ScenarioKind::V6;
    const bool speed_het = kind == ScenarioKind::V2 || kind == ScenarioKind::V6;
    const bool force_het = kind == ScenarioKind::V3 || kind == ScenarioKind::V6;
    const bool objective_het = kind == ScenarioKind::V4 || kind == ScenarioKind::V5 ||
                               kind == ScenarioKind::V6;
    if (obs_het)
        c.obs_permutation[1] = reversed_perm(blocks);
    if (speed_het)
        c.max_speed = {1.0, 0.3};
    if (force_het)
        c.force_sign = {+1, -1};
    if (objective_het)
        c.target_set = {{0}, {1}};
    switch (kind) {
    case ScenarioKind::Base: c.name = "base"; break;
    case ScenarioKind::V1: c.name = "v1"; break;
    case ScenarioKind::V2: c.name = "v2"; break;
    case ScenarioKind::V3: c.name = "v3"; break;
    case ScenarioKind::V4: c.name = "v4"; break;
    case ScenarioKind::V5: c.name = "v5"; break;
    case ScenarioKind::V6: c.name = "v6"; break;
    default:
        throw StructuralError("SpreadConfig::case_study: not a case-study kind");
    }
    c.validate();
    return c;
}

inline SpreadConfig SpreadConfig::pms(const std::string& task) {
    SpreadConfig c;
    c.kind = ScenarioKind::Pms;
    c.name = task;
    if (task == "15a_3c") {
        c.group_sizes = {5, 5, 5};
    } else if (task == "30a_3c") {
        c.group_sizes = {10, 10, 10};
    } else if (task == "15a_5c") {
        c.group_sizes = {3, 3, 3, 3, 3};
    } else if (task == "30a_5c") {
        c.group_sizes = {3, 3, 3, 12, 9};
    } else {
        throw StructuralError("SpreadConfig::pms: unknown task " + task);
    }
    const int groups = int(c.group_sizes.size());
    c.n_agents = 0;
    for (int s : c.group_sizes)
        c.n_agents += s;
    c.n_landmarks = groups; // one landmark per color
    c.n_colors = groups;
    c.landmark_color.resize(size_t(groups));
    std::iota(c.landmark_color.begin(), c.landmark_color.end(), 0);
    c.max_speed.assign(size_t(groups), 1.0);
    c.force_sign.assign(size_t(groups), 0);
    const int blocks = c.n_entity_blocks();
    c.obs_permutation.assign(size_t(groups), identity_perm(blocks));
    c.target_set.resize(size_t(groups));
    for (int g = 0; g < groups; ++g)
        c.target_set[size_t(g)] = {g};
    c.formation_bonus = 0.5;
    c.episode_len = 25;
    c.validate();
    return c;
}

inline SpreadConfig SpreadConfig::named(const std::string& name) {
    if (name == "base")
        return case_study(ScenarioKind::Base);
    if (name == "v1")
        return case_study(ScenarioKind::V1);
    if (name == "v2")
        return case_study(ScenarioKind::V2);
    if (name == "v3")
        return case_study(ScenarioKind::V3);
    if (name == "v4")
        return case_study(ScenarioKind::V4);
    if (name == "v5")
        return case_study(ScenarioKind::V5);
    if (name == "v6")
        return case_study(ScenarioKind::V6);
    return pms(name);
}

struct EnvState {
    GlobalState gs;
    int step_count = 0;
};

struct StepResult {
    EnvState state;
    std::vector<Vec> observations;
    Vec rewards;
    bool done = false;
};

// Deterministic 2D particle POMG. An instance is an immutable rulebook; all
// mutable state lives in EnvState values, so parallel rollouts across
// instances (or states) are safe.
class SpreadEnv {
  public:
    explicit SpreadEnv(SpreadConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const SpreadConfig& config() const { return cfg_; }

    EnvState reset(uint64_t seed) const {
        Rng rng(hash_combine(seed, 0x7265736574ULL));
        EnvState st;
        st.gs.agent_states.resize(size_t(cfg_.n_agents));
        for (auto& s : st.gs.agent_states) {
            // uniform over the center disk
            const double r = phys::kSpawnRadius * std::sqrt(rng.uniform01());
            const double th = rng.uniform(0.0, 2.0 * M_PI);
            s = {r * std::cos(th), r * std::sin(th), 0.0, 0.0};
        }
        st.gs.env_state.reserve(size_t(cfg_.env_width()));
        for (int l = 0; l < cfg_.n_landmarks; ++l) {
            // uniform over the annulus by area
            const double lo2 = sqr(phys::kAnnulusLo), hi2 = sqr(phys::kAnnulusHi);
            const double r = std::sqrt(lo2 + (hi2 - lo2) * rng.uniform01());
            const double th = rng.uniform(0.0, 2.0 * M_PI);
            st.gs.env_state.push_back(r * std::cos(th));
            st.gs.env_state.push_back(r * std::sin(th));
            for (int col = 0; col < cfg_.n_colors; ++col)
                st.gs.env_state.push_back(cfg_.landmark_color[size_t(l)] == col ? 1.0 : 0.0);
        }
        st.step_count = 0;
        return st;
    }

    StepResult step(const EnvState& state, const JointAction& ja) const {
        if (state.step_count >= cfg_.episode_len)
            throw StateError("SpreadEnv::step: episode already done");
        if (ja.n_agents() != cfg_.n_agents)
            throw StructuralError("SpreadEnv::step: joint action length mismatch");
        for (int a : ja.actions)
            if (a < 0 || a >= phys::kNumActions)
                throw StructuralError("SpreadEnv::step: action index out of range");

        StepResult out;
        // rewards are a function of the state being acted from
        out.rewards.resize(size_t(cfg_.n_agents));
        for (int i = 0; i < cfg_.n_agents; ++i)
            out.rewards[size_t(i)] = reward_rule(i, state.gs, i);

        out.state.gs.env_state = state.gs.env_state;
        out.state.gs.agent_states.resize(size_t(cfg_.n_agents));
        for (int i = 0; i < cfg_.n_agents; ++i) {
            out.state.gs.agent_states[size_t(i)] = advance_agent(
                state.gs.agent_states[size_t(i)], ja.actions[size_t(i)],
                cfg_.group_of(i), ambient_force(state.gs, i));
        }
        out.state.step_count = state.step_count + 1;
        out.observations = observe_all(out.state.gs);
        out.done = out.state.step_count >= cfg_.episode_len;
        return out;
    }

    std::vector<Vec> observe_all(const GlobalState& gs) const {
        std::vector<Vec> obs(size_t(cfg_.n_agents));
        for (int i = 0; i < cfg_.n_agents; ++i)
            obs[size_t(i)] = observe_rule(i, gs, i);
        return obs;
    }

    // ------------------------------------------------------------------
    // Model-based oracles. Each evaluates agent i's rule with the probe
    // slot's pose, so different agents can be queried at the literal same
    // condition. probe_slot = i reproduces the rollout quantities exactly.
    // ------------------------------------------------------------------

    Vec oracle_observe(AgentId i, const GlobalState& probe, int probe_slot = 0) const {
        check_probe(probe, probe_slot, i);
        return observe_rule(i.index, probe, probe_slot);
    }

    Vec oracle_transition(AgentId i, const GlobalState& probe, const JointAction& ja,
                          int probe_slot = 0) const {
        check_probe(probe, probe_slot, i);
        if (ja.n_agents() != cfg_.n_agents)
            throw StructuralError("oracle_transition: joint action length mismatch");
        return advance_agent(probe.agent_states[size_t(probe_slot)],
                             ja.actions[size_t(probe_slot)], cfg_.group_of(i.index),
                             ambient_force(probe, probe_slot));
    }

    // Next states of every non-probe entity when agent i's emission rule acts
    // from the probe pose. others_state is (n_agents-1) x 4 flattened in
    // ascending slot order with the probe slot removed.
    Vec oracle_effect(AgentId i, const Vec& others_state, const std::vector<int>& others_actions,
                      const Vec& probe_s, int probe_a, int probe_slot = 0) const {
        const int m = cfg_.n_agents - 1;
        if (int(others_state.size()) != m * phys::kStateWidth ||
            int(others_actions.size()) != m || int(probe_s.size()) != phys::kStateWidth)
            throw StructuralError("oracle_effect: shape mismatch");
        if (probe_slot < 0 || probe_slot >= cfg_.n_agents)
            throw StructuralError("oracle_effect: probe slot out of range");
        if (probe_a < 0 || probe_a >= phys::kNumActions)
            throw StructuralError("oracle_effect: probe action out of range");
        (void)probe_a; // the probe's own action does not move other entities

        // ambient slot ids in ascending order, probe slot removed
        std::vector<int> slots;
        slots.reserve(size_t(m));
        for (int s = 0; s < cfg_.n_agents; ++s)
            if (s != probe_slot)
                slots.push_back(s);

        const int probe_sign = cfg_.force_sign[size_t(cfg_.group_of(i.index))];
        Vec out;
        out.reserve(size_t(m) * phys::kStateWidth);
        for (int a = 0; a < m; ++a) {
            const Vec self(others_state.begin() + ptrdiff_t(a) * phys::kStateWidth,
                           others_state.begin() + ptrdiff_t(a + 1) * phys::kStateWidth);
            auto fp = force_between(probe_sign, probe_s.data(), self.data());
            double fx = fp[0], fy = fp[1];
            for (int b = 0; b < m; ++b) {
                if (b == a)
                    continue;
                const int sign = cfg_.force_sign[size_t(cfg_.group_of(slots[size_t(b)]))];
                const double* other = others_state.data() + ptrdiff_t(b) * phys::kStateWidth;
                auto f = force_between(sign, other, self.data());
                fx += f[0];
                fy += f[1];
            }
            Vec next = advance_agent(self, others_actions[size_t(a)],
                                     cfg_.group_of(slots[size_t(a)]), {fx, fy});
            out.insert(out.end(), next.begin(), next.end());
        }
        return out;
    }

    // convenience overload that slices a full probe state
    Vec oracle_effect(AgentId i, const GlobalState& probe, const JointAction& ja,
                      int probe_slot = 0) const {
        check_probe(probe, probe_slot, i);
        Vec others;
        std::vector<int> acts;
        for (int s = 0; s < cfg_.n_agents; ++s) {
            if (s == probe_slot)
                continue;
            const auto& st = probe.agent_states[size_t(s)];
            others.insert(others.end(), st.begin(), st.end());
            acts.push_back(ja.actions[size_t(s)]);
        }
        return oracle_effect(i, others, acts, probe.agent_states[size_t(probe_slot)],
                             ja.actions[size_t(probe_slot)], probe_slot);
    }

    double oracle_reward(AgentId i, const GlobalState& probe, const JointAction& ja,
                         int probe_slot = 0) const {
        check_probe(probe, probe_slot, i);
        if (ja.n_agents() != cfg_.n_agents)
            throw StructuralError("oracle_reward: joint action length mismatch");
        return reward_rule(i.index, probe, probe_slot);
    }

    Vec landmark_pos(const GlobalState& gs, int l) const {
        const int bw = 2 + cfg_.n_colors;
        return {gs.env_state[size_t(l * bw)], gs.env_state[size_t(l * bw + 1)]};
    }

    // landmark an agent's reward rule currently points at
    int target_landmark(int rule_agent, const GlobalState& gs, int slot) const {
        const auto& ts = cfg_.target_set[size_t(cfg_.group_of(rule_agent))];
        const double px = gs.agent_states[size_t(slot)][0];
        const double py = gs.agent_states[size_t(slot)][1];
        int best = ts[0];
        double best_d = 1e300;
        for (int l : ts) {
            const Vec lp = landmark_pos(gs, l);
            const double d = sqr(lp[0] - px) + sqr(lp[1] - py);
            if (d < best_d) {
                best_d = d;
                best = l;
            }
        }
        return best;
    }

  private:
    SpreadConfig cfg_;

    void check_probe(const GlobalState& probe, int probe_slot, AgentId i) const {
        if (probe.n_agents() != cfg_.n_agents)
            throw StructuralError("oracle: probe has wrong agent count");
        if (int(probe.env_state.size()) != cfg_.env_width())
            throw StructuralError("oracle: probe env block has wrong width");
        for (const auto& s : probe.agent_states)
            if (int(s.size()) != phys::kStateWidth)
                throw StructuralError("oracle: probe agent state has wrong width");
        if (probe_slot < 0 || probe_slot >= cfg_.n_agents)
            throw StructuralError("oracle: probe slot out of range");
        if (i.index < 0 || i.index >= cfg_.n_agents)
            throw StructuralError("oracle: agent id out of range");
    }

    static std::array<double, 2> accel_of(int action) {
        switch (action) {
        case 0: return {0.0, 0.0};
        case 1: return {phys::kAccel, 0.0};
        case 2: return {-phys::kAccel, 0.0};
        case 3: return {0.0, phys::kAccel};
        case 4: return {0.0, -phys::kAccel};
        default: throw StructuralError("accel_of: action index out of range");
        }
    }

    // field exerted by an emitter at `from` on an entity at `to`
    static std::array<double, 2> force_between(int sign, const double* from, const double* to) {
        if (sign == 0)
            return {0.0, 0.0};
        const double dx = to[0] - from[0], dy = to[1] - from[1];
        const double r = std::sqrt(dx * dx + dy * dy);
        if (r > phys::kForceRadius || r == 0.0)
            return {0.0, 0.0};
        const double mag = sign * phys::kForceMag / std::max(r, phys::kForceMinR);
        return {mag * dx / r, mag * dy / r};
    }

    // sum of fields on `slot` from every other slot's emitter
    std::array<double, 2> ambient_force(const GlobalState& gs, int slot) const {
        std::array<double, 2> f{0.0, 0.0};
        const double* self = gs.agent_states[size_t(slot)].data();
        for (int m = 0; m < cfg_.n_agents; ++m) {
            if (m == slot)
                continue;
            const int sign = cfg_.force_sign[size_t(cfg_.group_of(m))];
            auto fm = force_between(sign, gs.agent_states[size_t(m)].data(), self);
            f[0] += fm[0];
            f[1] += fm[1];
        }
        return f;
    }

    // one physics tick for a single particle under a group's rules
    Vec advance_agent(const Vec& s, int action, int group,
                      std::array<double, 2> force) const {
        auto acc = accel_of(action);
        double vx = s[2] * phys::kDamping + (acc[0] + force[0]) * phys::kDt;
        double vy = s[3] * phys::kDamping + (acc[1] + force[1]) * phys::kDt;
        const double speed = std::sqrt(vx * vx + vy * vy);
        const double cap = cfg_.max_speed[size_t(group)];
        if (speed > cap) {
            vx *= cap / speed;
            vy *= cap / speed;
        }
        const double px = std::clamp(s[0] + vx * phys::kDt, -phys::kPosClip, phys::kPosClip);
        const double py = std::clamp(s[1] + vy * phys::kDt, -phys::kPosClip, phys::kPosClip);
        return {px, py, vx, vy};
    }

    // observation per agent `rule_agent`'s rule, own pose taken from `slot`
    Vec observe_rule(int rule_agent, const GlobalState& gs, int slot) const {
        const auto& self = gs.agent_states[size_t(slot)];
        const double px = self[0], py = self[1];

        // canonical entity blocks: landmarks by index, then nearest others
        std::vector<Vec> blocks;
        blocks.reserve(size_t(cfg_.n_entity_blocks()));
        const int bw = 2 + cfg_.n_colors;
        for (int l = 0; l < cfg_.n_landmarks; ++l) {
            Vec b(size_t(bw), 0.0);
            b[0] = gs.env_state[size_t(l * bw)] - px;
            b[1] = gs.env_state[size_t(l * bw + 1)] - py;
            for (int c = 0; c < cfg_.n_colors; ++c)
                b[size_t(2 + c)] = gs.env_state[size_t(l * bw + 2 + c)];
            blocks.push_back(std::move(b));
        }
        std::vector<std::pair<double, int>> order;
        order.reserve(size_t(cfg_.n_agents - 1));
        for (int m = 0; m < cfg_.n_agents; ++m) {
            if (m == slot)
                continue;
            const auto& o = gs.agent_states[size_t(m)];
            order.emplace_back(sqr(o[0] - px) + sqr(o[1] - py), m);
        }
        std::sort(order.begin(), order.end());
        const int visible = std::min(phys::kNearestCap, cfg_.n_agents - 1);
        for (int v = 0; v < visible; ++v) {
            const auto& o = gs.agent_states[size_t(order[size_t(v)].second)];
            blocks.push_back({o[0] - px, o[1] - py});
        }

        const auto& perm = cfg_.obs_permutation[size_t(cfg_.group_of(rule_agent))];
        Vec obs;
        obs.reserve(size_t(cfg_.obs_width()));
        obs.push_back(self[2]);
        obs.push_back(self[3]);
        obs.push_back(px);
        obs.push_back(py);
        for (int b : perm)
            obs.insert(obs.end(), blocks[size_t(b)].begin(), blocks[size_t(b)].end());
        return obs;
    }

    // reward per agent `rule_agent`'s rule, own pose taken from `slot`
    double reward_rule(int rule_agent, const GlobalState& gs, int slot) const {
        const int g = cfg_.group_of(rule_agent);
        const auto& self = gs.agent_states[size_t(slot)];
        const int lm = target_landmark(rule_agent, gs, slot);
        const Vec lp = landmark_pos(gs, lm);
        double r = -std::sqrt(sqr(lp[0] - self[0]) + sqr(lp[1] - self[1]));
        if (cfg_.formation_bonus > 0.0) {
            int mates = 0, near = 0;
            for (int m = 0; m < cfg_.n_agents; ++m) {
                if (m == slot || cfg_.group_of(m) != g)
                    continue;
                ++mates;
                const auto& o = gs.agent_states[size_t(m)];
                if (sqr(o[0] - lp[0]) + sqr(o[1] - lp[1]) <= sqr(phys::kFormRadius))
                    ++near;
            }
            if (mates > 0)
                r += cfg_.formation_bonus * double(near) / double(mates);
        }
        return r;
    }
};

// greedy go-to-target controller, used to seed sample pools and as an
// evaluation baseline
inline int scripted_action(const SpreadEnv& env, const GlobalState& gs, int agent) {
    const int lm = env.target_landmark(agent, gs, agent);
    const Vec lp = env.landmark_pos(gs, lm);
    const auto& s = gs.agent_states[size_t(agent)];
    const double dx = lp[0] - s[0], dy = lp[1] - s[1];
    if (std::abs(dx) < 0.05 && std::abs(dy) < 0.05)
        return 0;
    if (std::abs(dx) >= std::abs(dy))
        return dx > 0 ? 1 : 2;
    return dy > 0 ? 3 : 4;
}

} // namespace hetlab

#endif // HETLAB_SPREAD_ENV_HPP
