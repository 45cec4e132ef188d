#ifndef HETLAB_MARL_TRAINER_HPP
#define HETLAB_MARL_TRAINER_HPP

#include <map>

#include "hetlab/grouping.hpp"

namespace hetlab {

enum class Paradigm { NPS, FPS, FPSid, Group };

inline const char* paradigm_name(Paradigm p) {
    switch (p) {
    case Paradigm::NPS: return "nps";
    case Paradigm::FPS: return "fps";
    case Paradigm::FPSid: return "fpsid";
    case Paradigm::Group: return "group";
    }
    return "?";
}

struct TrainConfig {
    double gamma = 0.99;
    double gae_lambda = 0.95;
    double clip = 0.2;
    double lr = 3e-4;
    double entropy_coef = 0.01;
    int epochs = 4;
    int minibatches = 4;
    int rollout_len = 128;
    int n_envs = 8;
    int quant_period = 50; // updates between quantifications
    int total_updates = 200;
    uint64_t seed = 1;
    MergeMode merge_mode = MergeMode::Majority;
    Paradigm init = Paradigm::FPS;
    size_t pool_capacity = 50000;
    DistanceConfig dist; // Monte Carlo + CVAE budget for in-loop quantification
    int eval_episodes = 10;
    int hidden = 64;

    TrainConfig() { dist.cvae.steps = 3000; }

    void validate() const {
        if (!(gamma > 0.0 && gamma < 1.0))
            throw StructuralError("TrainConfig: gamma out of range");
        if (!(clip > 0.0 && clip < 1.0))
            throw StructuralError("TrainConfig: clip out of range");
        if (rollout_len <= 0 || n_envs <= 0 || epochs <= 0 || minibatches <= 0 ||
            total_updates <= 0 || quant_period <= 0)
            throw StructuralError("TrainConfig: counts must be positive");
    }
};

// Policy/value network pair plus optimizer state; every agent maps to exactly
// one of these. Split/merge ops treat the pair as a unit.
struct AgentNets {
    DenseNet policy;
    DenseNet value;
    OptimState p_opt;
    OptimState v_opt;
};

class NetworkStore {
  public:
    NetworkStore() = default;

    static NetworkStore create(Paradigm paradigm, int n_agents, int obs_width, int n_actions,
                               const TrainConfig& cfg) {
        NetworkStore st;
        st.n_agents_ = n_agents;
        st.obs_width_ = obs_width;
        st.use_id_input_ = paradigm == Paradigm::FPSid;
        st.input_width_ = obs_width + (st.use_id_input_ ? n_agents : 0);
        st.n_actions_ = n_actions;
        st.hidden_ = cfg.hidden;
        st.lr_ = cfg.lr;
        if (paradigm == Paradigm::NPS) {
            st.assign_ = NetworkAssignment::per_agent(n_agents);
        } else {
            st.assign_ = NetworkAssignment::single(n_agents);
        }
        for (int nid : st.assign_.live)
            st.nets_[nid] = st.fresh_nets(hash_combine(cfg.seed, 0x6e6574ULL + uint64_t(nid)));
        return st;
    }

    int n_agents() const { return n_agents_; }
    int input_width() const { return input_width_; }
    int n_actions() const { return n_actions_; }
    bool use_id_input() const { return use_id_input_; }
    const NetworkAssignment& assignment() const { return assign_; }
    int net_of(int agent) const { return assign_.agent_to_net[size_t(agent)]; }
    const std::map<int, AgentNets>& nets() const { return nets_; }
    AgentNets& nets_mut(int id) { return nets_.at(id); }

    Vec policy_input(int agent, const Vec& obs) const {
        Vec in = pad_to_width(obs, obs_width_);
        if (use_id_input_) {
            Vec oh = one_hot(agent, n_agents_);
            in.insert(in.end(), oh.begin(), oh.end());
        }
        return in;
    }

    Vec policy_logits(int agent, const Vec& obs) const {
        return forward1(nets_.at(net_of(agent)).policy, policy_input(agent, obs));
    }

    double value_of(int agent, const Vec& obs) const {
        return forward1(nets_.at(net_of(agent)).value, policy_input(agent, obs))[0];
    }

    // frozen functional view of one agent's policy for quantification
    PolicyFn policy_fn(int agent) const {
        DenseNet net = nets_.at(net_of(agent)).policy; // copy: stays valid after regrouping
        const bool with_id = use_id_input_;
        const int n = n_agents_, ow = obs_width_;
        return [net, with_id, n, ow, agent](const Vec& obs) {
            Vec in = pad_to_width(obs, ow);
            if (with_id) {
                Vec oh = one_hot(agent, n);
                in.insert(in.end(), oh.begin(), oh.end());
            }
            return softmax(forward1(net, in));
        };
    }

    static Vec softmax(const Vec& logits) {
        Vec p(logits.size());
        double mx = logits[0];
        for (double v : logits)
            mx = std::max(mx, v);
        double z = 0.0;
        for (size_t i = 0; i < logits.size(); ++i) {
            p[i] = std::exp(logits[i] - mx);
            z += p[i];
        }
        for (auto& v : p)
            v /= z;
        return p;
    }

    // Apply reconcile output: parameter ops first, then the agent remap, then
    // prune orphans. Caller must hold exclusive access.
    void apply(const NetworkAssignment& next) {
        for (const ParamOp& op : next.ops) {
            if (op.type == ParamOp::Type::Copy) {
                nets_[op.dst] = nets_.at(op.srcs[0]);
            } else {
                AgentNets merged = nets_.at(op.srcs[0]);
                blend(merged, op);
                nets_[op.dst] = std::move(merged);
            }
        }
        assign_ = next;
        for (auto it = nets_.begin(); it != nets_.end();) {
            if (!assign_.is_live(it->first))
                it = nets_.erase(it);
            else
                ++it;
        }
        for (int nid : assign_.live)
            if (!nets_.count(nid))
                throw StructuralError("NetworkStore::apply: live network has no parameters");
    }

  private:
    int n_agents_ = 0, obs_width_ = 0, input_width_ = 0, n_actions_ = 5, hidden_ = 64;
    double lr_ = 3e-4;
    bool use_id_input_ = false;
    std::map<int, AgentNets> nets_;
    NetworkAssignment assign_;

    AgentNets fresh_nets(uint64_t seed) const {
        Rng rng(seed);
        AgentNets an;
        an.policy = DenseNet::make({input_width_, hidden_, hidden_, n_actions_}, rng);
        an.value = DenseNet::make({input_width_, hidden_, hidden_, 1}, rng);
        an.p_opt = OptimState(an.policy, lr_);
        an.v_opt = OptimState(an.value, lr_);
        return an;
    }

    void blend(AgentNets& dst, const ParamOp& op) const {
        auto combine = [&](auto member_net, auto member_opt) {
            Vec acc((nets_.at(op.srcs[0]).*member_net).param_count(), 0.0);
            Vec m_acc(acc.size(), 0.0), v_acc(acc.size(), 0.0);
            long step = 0;
            for (size_t s = 0; s < op.srcs.size(); ++s) {
                const AgentNets& src = nets_.at(op.srcs[s]);
                const Vec flat = (src.*member_net).flat_params();
                const double c = op.coeffs[s];
                Vec m_flat = flatten_moments((src.*member_opt).m_w, (src.*member_opt).m_b);
                Vec v_flat = flatten_moments((src.*member_opt).v_w, (src.*member_opt).v_b);
                for (size_t i = 0; i < acc.size(); ++i) {
                    acc[i] += c * flat[i];
                    m_acc[i] += c * m_flat[i];
                    v_acc[i] += c * v_flat[i];
                }
                step = std::max(step, (src.*member_opt).step);
            }
            (dst.*member_net).set_flat_params(acc);
            unflatten_moments(m_acc, (dst.*member_opt).m_w, (dst.*member_opt).m_b);
            unflatten_moments(v_acc, (dst.*member_opt).v_w, (dst.*member_opt).v_b);
            (dst.*member_opt).step = step;
        };
        combine(&AgentNets::policy, &AgentNets::p_opt);
        combine(&AgentNets::value, &AgentNets::v_opt);
    }

    static Vec flatten_moments(const std::vector<Mat>& mw, const std::vector<Vec>& mb) {
        Vec out;
        for (size_t i = 0; i < mw.size(); ++i) {
            out.insert(out.end(), mw[i].a.begin(), mw[i].a.end());
            out.insert(out.end(), mb[i].begin(), mb[i].end());
        }
        return out;
    }

    static void unflatten_moments(const Vec& flat, std::vector<Mat>& mw, std::vector<Vec>& mb) {
        size_t p = 0;
        for (size_t i = 0; i < mw.size(); ++i) {
            std::copy(flat.begin() + ptrdiff_t(p), flat.begin() + ptrdiff_t(p + mw[i].a.size()),
                      mw[i].a.begin());
            p += mw[i].a.size();
            std::copy(flat.begin() + ptrdiff_t(p), flat.begin() + ptrdiff_t(p + mb[i].size()),
                      mb[i].begin());
            p += mb[i].size();
        }
    }
};

// Flat (step, env, agent) storage; advantages are always recomputed by the
// learner, never stored.
struct RolloutBuffer {
    int n_steps = 0, n_envs = 0, n_agents = 0, input_width = 0;
    Mat inputs;               // rows = steps*envs*agents
    std::vector<int> actions;
    Vec logp, reward, value;
    std::vector<char> done;   // per (step, env): episode ended after this step
    Vec bootstrap_value;      // per (env, agent)

    void init(int steps, int envs, int agents, int in_w) {
        n_steps = steps;
        n_envs = envs;
        n_agents = agents;
        input_width = in_w;
        const size_t rows = size_t(steps) * envs * agents;
        inputs = Mat(int(rows), in_w);
        actions.assign(rows, 0);
        logp.assign(rows, 0.0);
        reward.assign(rows, 0.0);
        value.assign(rows, 0.0);
        done.assign(size_t(steps) * envs, 0);
        bootstrap_value.assign(size_t(envs) * agents, 0.0);
    }

    size_t row(int t, int e, int a) const {
        return (size_t(t) * n_envs + size_t(e)) * n_agents + size_t(a);
    }
};

struct UpdateStats {
    Vec per_agent_reward; // mean per step over the rollout
    double team_reward = 0.0;
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
};

struct PeriodSnapshot {
    int period = 0;
    int update = 0;
    DistanceMatrix matrix;
    ClusterAssignment clusters;
    NetworkAssignment assignment;
    bool applied = false;
    std::string error;
};

// Clipped-surrogate policy-gradient learner over a particle scenario with a
// pluggable sharing paradigm. Quantification hooks implement the HetDPS loop.
class Trainer {
  public:
    Trainer(const SpreadConfig& scenario, const TrainConfig& cfg, Paradigm paradigm)
        : env_(scenario), cfg_(cfg), paradigm_(paradigm), pool_(cfg.pool_capacity) {
        cfg_.validate();
        store_ = NetworkStore::create(paradigm, scenario.n_agents, env_.config().obs_width(),
                                      phys::kNumActions, cfg_);
        env_states_.reserve(size_t(cfg_.n_envs));
        env_obs_.resize(size_t(cfg_.n_envs));
        episode_counter_.assign(size_t(cfg_.n_envs), 0);
        env_rng_.reserve(size_t(cfg_.n_envs));
        for (int e = 0; e < cfg_.n_envs; ++e) {
            env_rng_.emplace_back(hash_combine(cfg_.seed, 0x656e76ULL + uint64_t(e)));
            env_states_.push_back(env_.reset(episode_seed(e)));
            env_obs_[size_t(e)] = env_.observe_all(env_states_[size_t(e)].gs);
            episode_counter_[size_t(e)] = 1;
        }
    }

    const SpreadEnv& env() const { return env_; }
    const TrainConfig& config() const { return cfg_; }
    Paradigm paradigm() const { return paradigm_; }
    NetworkStore& store() { return store_; }
    const NetworkStore& store() const { return store_; }
    SamplePool& pool() { return pool_; }
    int updates_done() const { return updates_done_; }
    const std::vector<PeriodSnapshot>& periods() const { return periods_; }
    const ClusterAssignment* previous_clusters() const {
        return has_prev_clusters_ ? &prev_clusters_ : nullptr;
    }

    // rollout_len steps in every env; every step is also pushed into the
    // heterogeneity sample pool
    RolloutBuffer collect_rollouts() {
        const int N = env_.config().n_agents;
        RolloutBuffer buf;
        buf.init(cfg_.rollout_len, cfg_.n_envs, N, store_.input_width());

        for (int t = 0; t < cfg_.rollout_len; ++t) {
            // batch policy/value forward over all envs and agents
            Mat batch(cfg_.n_envs * N, store_.input_width());
            for (int e = 0; e < cfg_.n_envs; ++e)
                for (int a = 0; a < N; ++a) {
                    Vec in = store_.policy_input(a, env_obs_[size_t(e)][size_t(a)]);
                    std::copy(in.begin(), in.end(), batch.row(e * N + a));
                }
            Mat logits = forward_by_net(batch, &AgentNets::policy);
            Mat values = forward_by_net(batch, &AgentNets::value);

            for (int e = 0; e < cfg_.n_envs; ++e) {
                JointAction ja;
                ja.actions.resize(size_t(N));
                for (int a = 0; a < N; ++a) {
                    const Vec probs = NetworkStore::softmax(logits.row_vec(e * N + a));
                    const int act = sample_categorical(probs, env_rng_[size_t(e)]);
                    ja.actions[size_t(a)] = act;
                    const size_t r = buf.row(t, e, a);
                    std::copy(batch.row(e * N + a), batch.row(e * N + a) + batch.cols,
                              buf.inputs.row(int(r)));
                    buf.actions[r] = act;
                    buf.logp[r] = std::log(std::max(probs[size_t(act)], 1e-12));
                    buf.value[r] = values.at(e * N + a, 0);
                }

                StepResult sr = env_.step(env_states_[size_t(e)], ja);
                TransitionRecord rec;
                rec.global_state = env_states_[size_t(e)].gs;
                rec.joint_action = ja;
                rec.observations = env_obs_[size_t(e)];
                rec.next_local_states = sr.state.gs.agent_states;
                rec.next_observations = sr.observations;
                rec.rewards = sr.rewards;
                pool_.insert(std::move(rec));

                for (int a = 0; a < N; ++a)
                    buf.reward[buf.row(t, e, a)] = sr.rewards[size_t(a)];
                buf.done[size_t(t) * cfg_.n_envs + size_t(e)] = sr.done ? 1 : 0;

                if (sr.done) {
                    env_states_[size_t(e)] = env_.reset(episode_seed(e));
                    env_obs_[size_t(e)] = env_.observe_all(env_states_[size_t(e)].gs);
                    ++episode_counter_[size_t(e)];
                } else {
                    env_states_[size_t(e)] = sr.state;
                    env_obs_[size_t(e)] = sr.observations;
                }
            }
        }
        // bootstrap values for the states the rollout stopped in
        Mat tail(cfg_.n_envs * N, store_.input_width());
        for (int e = 0; e < cfg_.n_envs; ++e)
            for (int a = 0; a < N; ++a) {
                Vec in = store_.policy_input(a, env_obs_[size_t(e)][size_t(a)]);
                std::copy(in.begin(), in.end(), tail.row(e * N + a));
            }
        Mat tail_v = forward_by_net(tail, &AgentNets::value);
        for (int e = 0; e < cfg_.n_envs; ++e)
            for (int a = 0; a < N; ++a)
                buf.bootstrap_value[size_t(e) * size_t(N) + size_t(a)] = tail_v.at(e * N + a, 0);
        return buf;
    }

    UpdateStats learner_update(const RolloutBuffer& buf) {
        const int N = buf.n_agents, T = buf.n_steps, E = buf.n_envs;
        const size_t rows = size_t(T) * E * N;

        // GAE, recomputed from scratch
        Vec adv(rows, 0.0), ret(rows, 0.0);
        for (int e = 0; e < E; ++e) {
            for (int a = 0; a < N; ++a) {
                double acc = 0.0;
                for (int t = T - 1; t >= 0; --t) {
                    const size_t r = buf.row(t, e, a);
                    const bool dn = buf.done[size_t(t) * E + size_t(e)] != 0;
                    const double v_next =
                        dn ? 0.0
                           : (t + 1 < T ? buf.value[buf.row(t + 1, e, a)]
                                        : buf.bootstrap_value[size_t(e) * size_t(N) + size_t(a)]);
                    const double delta =
                        buf.reward[r] + cfg_.gamma * v_next - buf.value[r];
                    acc = delta + cfg_.gamma * cfg_.gae_lambda * (dn ? 0.0 : acc);
                    adv[r] = acc;
                    ret[r] = acc + buf.value[r];
                }
            }
        }

        UpdateStats stats;
        stats.per_agent_reward.assign(size_t(N), 0.0);
        for (int t = 0; t < T; ++t)
            for (int e = 0; e < E; ++e)
                for (int a = 0; a < N; ++a)
                    stats.per_agent_reward[size_t(a)] += buf.reward[buf.row(t, e, a)];
        for (auto& v : stats.per_agent_reward) {
            v /= double(T) * double(E);
            stats.team_reward += v / double(N);
        }

        std::vector<size_t> order(rows);
        std::iota(order.begin(), order.end(), size_t(0));
        Rng shuffle_rng(hash_combine(cfg_.seed, 0x6c726eULL + uint64_t(updates_done_)));
        double ploss_acc = 0.0, vloss_acc = 0.0, ent_acc = 0.0;
        int loss_batches = 0;

        for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
            for (size_t i = 0; i + 1 < rows; ++i) {
                const size_t j = i + size_t(shuffle_rng.below(uint64_t(rows - i)));
                std::swap(order[i], order[j]);
            }
            const size_t mb_size = rows / size_t(cfg_.minibatches);
            for (int mb = 0; mb < cfg_.minibatches; ++mb) {
                const size_t lo = size_t(mb) * mb_size;
                const size_t hi = (mb + 1 == cfg_.minibatches) ? rows : lo + mb_size;
                if (lo >= hi)
                    continue;
                auto st = update_minibatch(buf, adv, ret,
                                           std::vector<size_t>(order.begin() + ptrdiff_t(lo),
                                                               order.begin() + ptrdiff_t(hi)));
                ploss_acc += st[0];
                vloss_acc += st[1];
                ent_acc += st[2];
                ++loss_batches;
            }
        }
        stats.policy_loss = ploss_acc / loss_batches;
        stats.value_loss = vloss_acc / loss_batches;
        stats.entropy = ent_acc / loss_batches;
        ++updates_done_;
        return stats;
    }

    UpdateStats run_update() { return learner_update(collect_rollouts()); }

    // One quantification period: Meta-Het matrix, affinity propagation,
    // reconcile against the previous clustering (first period falls back to
    // the network-induced partition), then parameter ops. A failure keeps the
    // previous assignment; training never halts here.
    PeriodSnapshot quantify_and_regroup() {
        PeriodSnapshot snap;
        snap.period = int(periods_.size());
        snap.update = updates_done_;
        try {
            if (pool_.size() < size_t(cfg_.dist.M))
                throw CapacityError("quantify: pool smaller than M conditions");
            const uint64_t qseed = hash_combine(cfg_.seed, 0x7175616eULL + uint64_t(snap.period));
            snap.matrix =
                distance_matrix_meta(pool_, env_.config().n_agents, cfg_.dist, qseed);
            snap.clusters = affinity_propagation(snap.matrix);
            const ClusterAssignment old_c =
                has_prev_clusters_ ? prev_clusters_ : store_.assignment().induced_clusters();
            snap.assignment = reconcile(store_.assignment(), old_c, snap.clusters,
                                        cfg_.merge_mode, hash_combine(qseed, 0x6f7073ULL),
                                        &snap.matrix);
            store_.apply(snap.assignment);
            prev_clusters_ = snap.clusters;
            has_prev_clusters_ = true;
            snap.applied = true;
        } catch (const std::exception& ex) {
            snap.applied = false;
            snap.error = ex.what();
        }
        periods_.push_back(snap);
        return snap;
    }

    bool is_hetdps_period(int update_index_one_based) const {
        return update_index_one_based % cfg_.quant_period == 0;
    }

    // greedy evaluation, deterministic per seed
    double evaluate(int episodes, uint64_t seed, Vec* per_agent_out = nullptr) const {
        const int N = env_.config().n_agents;
        Vec totals(size_t(N), 0.0);
        for (int ep = 0; ep < episodes; ++ep) {
            EnvState st = env_.reset(hash_combine(seed, 0x6576616cULL + uint64_t(ep)));
            auto obs = env_.observe_all(st.gs);
            while (st.step_count < env_.config().episode_len) {
                JointAction ja;
                ja.actions.resize(size_t(N));
                for (int a = 0; a < N; ++a) {
                    const Vec logits = store_.policy_logits(a, obs[size_t(a)]);
                    ja.actions[size_t(a)] =
                        int(std::max_element(logits.begin(), logits.end()) - logits.begin());
                }
                StepResult sr = env_.step(st, ja);
                for (int a = 0; a < N; ++a)
                    totals[size_t(a)] += sr.rewards[size_t(a)];
                st = sr.state;
                obs = sr.observations;
            }
        }
        double mean = 0.0;
        for (auto& v : totals) {
            v /= double(episodes);
            mean += v / double(N);
        }
        if (per_agent_out)
            *per_agent_out = totals;
        return mean;
    }

    std::vector<PolicyFn> policy_fns() const {
        std::vector<PolicyFn> fns;
        const int N = env_.config().n_agents;
        fns.reserve(size_t(N));
        for (int a = 0; a < N; ++a)
            fns.push_back(store_.policy_fn(a));
        return fns;
    }

    static int sample_categorical(const Vec& probs, Rng& rng) {
        const double u = rng.uniform01();
        double acc = 0.0;
        for (size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc)
                return int(i);
        }
        return int(probs.size()) - 1;
    }

    // minibatch advantage normalization used by the learner
    static Vec normalize_advantages(const Vec& adv) {
        double mean = 0.0;
        for (double a : adv)
            mean += a;
        mean /= double(adv.size());
        double var = 0.0;
        for (double a : adv)
            var += sqr(a - mean);
        const double stddev = std::sqrt(var / double(adv.size()));
        Vec out(adv.size());
        for (size_t i = 0; i < adv.size(); ++i)
            out[i] = (adv[i] - mean) / (stddev + 1e-8);
        return out;
    }

  private:
    SpreadEnv env_;
    TrainConfig cfg_;
    Paradigm paradigm_;
    NetworkStore store_;
    SamplePool pool_;
    std::vector<Rng> env_rng_;
    std::vector<EnvState> env_states_;
    std::vector<std::vector<Vec>> env_obs_;
    std::vector<long> episode_counter_;
    int updates_done_ = 0;
    std::vector<PeriodSnapshot> periods_;
    ClusterAssignment prev_clusters_;
    bool has_prev_clusters_ = false;

    uint64_t episode_seed(int e) {
        return hash_combine(hash_combine(cfg_.seed, uint64_t(e) + 0x657073ULL),
                            uint64_t(episode_counter_[size_t(e)]));
    }

    // forward `member` nets over the batch, routing each row to its agent's
    // network; deterministic and read-only
    Mat forward_by_net(const Mat& batch, DenseNet AgentNets::* member) {
        const int N = env_.config().n_agents;
        const int out_w = (store_.nets().begin()->second.*member).output_width();
        Mat out(batch.rows, out_w);
        for (const auto& [nid, nets] : store_.nets()) {
            std::vector<int> rows;
            for (int r = 0; r < batch.rows; ++r)
                if (store_.net_of(r % N) == nid)
                    rows.push_back(r);
            if (rows.empty())
                continue;
            Mat sub(int(rows.size()), batch.cols);
            for (size_t k = 0; k < rows.size(); ++k)
                std::copy(batch.row(rows[k]), batch.row(rows[k]) + batch.cols, sub.row(int(k)));
            Mat res = forward(nets.*member, sub);
            for (size_t k = 0; k < rows.size(); ++k)
                std::copy(res.row(int(k)), res.row(int(k)) + out_w, out.row(rows[k]));
        }
        return out;
    }

    // returns {policy_loss, value_loss, entropy} means over the minibatch
    std::array<double, 3> update_minibatch(const RolloutBuffer& buf, const Vec& adv,
                                           const Vec& ret, const std::vector<size_t>& rows) {
        const int N = buf.n_agents;
        // group minibatch rows by owning network
        std::map<int, std::vector<size_t>> by_net; // net id -> indices into `rows`
        for (size_t k = 0; k < rows.size(); ++k)
            by_net[store_.net_of(int(rows[k] % size_t(N)))].push_back(k);

        double ploss = 0.0, vloss = 0.0, ent = 0.0;
        for (auto& [nid, ks] : by_net) {
            AgentNets& nets = store_.nets_mut(nid);
            const int B = int(ks.size());
            // normalize within this network's slice so no signal leaks
            // between unshared networks
            Vec mb_adv(ks.size());
            for (size_t k = 0; k < ks.size(); ++k)
                mb_adv[k] = adv[rows[ks[k]]];
            const Vec norm_adv = normalize_advantages(mb_adv);
            Mat x(B, buf.input_width);
            for (int b = 0; b < B; ++b)
                std::copy(buf.inputs.row(int(rows[ks[size_t(b)]])),
                          buf.inputs.row(int(rows[ks[size_t(b)]])) + buf.input_width, x.row(b));

            ForwardCache pc, vc;
            Mat logits = forward(nets.policy, x, &pc);
            Mat vals = forward(nets.value, x, &vc);

            Mat dlogits(B, store_.n_actions());
            Mat dvals(B, 1);
            const double inv_b = 1.0 / double(B);
            for (int b = 0; b < B; ++b) {
                const size_t r = rows[ks[size_t(b)]];
                const double a_norm = norm_adv[size_t(b)];
                const Vec probs = NetworkStore::softmax(logits.row_vec(b));
                const int act = buf.actions[r];
                const double logp_new = std::log(std::max(probs[size_t(act)], 1e-12));
                const double ratio = std::exp(logp_new - buf.logp[r]);
                const double clipped =
                    std::clamp(ratio, 1.0 - cfg_.clip, 1.0 + cfg_.clip) * a_norm;
                const double unclipped = ratio * a_norm;
                ploss += -std::min(unclipped, clipped) * inv_b;
                // gradient flows through the unclipped branch only
                const double dlogp = (unclipped <= clipped) ? -a_norm * ratio * inv_b : 0.0;

                double H = 0.0;
                for (double p : probs)
                    if (p > 0.0)
                        H -= p * std::log(p);
                ent += H * inv_b;

                for (int c = 0; c < store_.n_actions(); ++c) {
                    const double ind = (c == act) ? 1.0 : 0.0;
                    const double p = probs[size_t(c)];
                    const double lp = std::log(std::max(p, 1e-12));
                    double g = dlogp * (ind - p);
                    g += cfg_.entropy_coef * p * (lp + H) * inv_b; // -coef * dH
                    dlogits.at(b, c) = g;
                }
                const double verr = vals.at(b, 0) - ret[r];
                vloss += 0.5 * verr * verr * inv_b;
                dvals.at(b, 0) = verr * inv_b;
            }

            GradBuffer pg(nets.policy), vg(nets.value);
            backward(nets.policy, pc, dlogits, pg);
            backward(nets.value, vc, dvals, vg);
            if (!is_finite(ploss) || !is_finite(vloss))
                throw NumericError("learner_update: non-finite loss");
            optim_step(nets.policy, pg, nets.p_opt);
            optim_step(nets.value, vg, nets.v_opt);
        }
        const double nb = double(by_net.size());
        return {ploss / nb, vloss / nb, ent / nb};
    }
};

} // namespace hetlab

#endif // HETLAB_MARL_TRAINER_HPP
