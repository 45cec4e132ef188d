#ifndef HETLAB_RUNS_HPP
#define HETLAB_RUNS_HPP

#include <chrono>
#include <filesystem>
#include <json.hpp>

#include "hetlab/marl_trainer.hpp"
#include "hetlab/trajectory_io.hpp"

namespace hetlab {

// ---------------------------------------------------------------------------
// Config <-> JSON, used by --config files and run manifests.
// ---------------------------------------------------------------------------
inline const char* scenario_kind_name(ScenarioKind k) {
    switch (k) {
    case ScenarioKind::Base: return "base";
    case ScenarioKind::V1: return "v1";
    case ScenarioKind::V2: return "v2";
    case ScenarioKind::V3: return "v3";
    case ScenarioKind::V4: return "v4";
    case ScenarioKind::V5: return "v5";
    case ScenarioKind::V6: return "v6";
    case ScenarioKind::Pms: return "pms";
    }
    return "?";
}

inline nlohmann::json to_json(const SpreadConfig& c) {
    nlohmann::json j;
    j["kind"] = scenario_kind_name(c.kind);
    j["name"] = c.name;
    j["n_agents"] = c.n_agents;
    j["group_sizes"] = c.group_sizes;
    j["max_speed"] = c.max_speed;
    j["force_sign"] = c.force_sign;
    j["obs_permutation"] = c.obs_permutation;
    j["target_set"] = c.target_set;
    j["n_landmarks"] = c.n_landmarks;
    j["n_colors"] = c.n_colors;
    j["landmark_color"] = c.landmark_color;
    j["formation_bonus"] = c.formation_bonus;
    j["episode_len"] = c.episode_len;
    j["seed"] = c.seed;
    return j;
}

inline SpreadConfig spread_config_from_json(const nlohmann::json& j) {
    // a bare name is enough; explicit fields override the named defaults
    SpreadConfig c = SpreadConfig::named(j.at("name").get<std::string>());
    if (j.contains("n_agents")) c.n_agents = j["n_agents"].get<int>();
    if (j.contains("group_sizes")) c.group_sizes = j["group_sizes"].get<std::vector<int>>();
    if (j.contains("max_speed")) c.max_speed = j["max_speed"].get<std::vector<double>>();
    if (j.contains("force_sign")) c.force_sign = j["force_sign"].get<std::vector<int>>();
    if (j.contains("obs_permutation"))
        c.obs_permutation = j["obs_permutation"].get<std::vector<std::vector<int>>>();
    if (j.contains("target_set"))
        c.target_set = j["target_set"].get<std::vector<std::vector<int>>>();
    if (j.contains("n_landmarks")) c.n_landmarks = j["n_landmarks"].get<int>();
    if (j.contains("n_colors")) c.n_colors = j["n_colors"].get<int>();
    if (j.contains("landmark_color"))
        c.landmark_color = j["landmark_color"].get<std::vector<int>>();
    if (j.contains("formation_bonus")) c.formation_bonus = j["formation_bonus"].get<double>();
    if (j.contains("episode_len")) c.episode_len = j["episode_len"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    c.validate();
    return c;
}

inline nlohmann::json to_json(const CvaeConfig& c) {
    return {{"latent_dim", c.latent_dim}, {"hidden", c.hidden},   {"beta", c.beta},
            {"steps", c.steps},           {"batch", c.batch},     {"lr", c.lr}};
}

inline CvaeConfig cvae_config_from_json(const nlohmann::json& j) {
    CvaeConfig c;
    if (j.contains("latent_dim")) c.latent_dim = j["latent_dim"].get<int>();
    if (j.contains("hidden")) c.hidden = j["hidden"].get<int>();
    if (j.contains("beta")) c.beta = j["beta"].get<double>();
    if (j.contains("steps")) c.steps = j["steps"].get<int>();
    if (j.contains("batch")) c.batch = j["batch"].get<int>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    return c;
}

inline nlohmann::json to_json(const DistanceConfig& c) {
    return {{"M", c.M}, {"cvae", to_json(c.cvae)}};
}

inline DistanceConfig distance_config_from_json(const nlohmann::json& j) {
    DistanceConfig c;
    if (j.contains("M")) c.M = j["M"].get<int>();
    if (j.contains("cvae")) c.cvae = cvae_config_from_json(j["cvae"]);
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["gamma"] = c.gamma;
    j["gae_lambda"] = c.gae_lambda;
    j["clip"] = c.clip;
    j["lr"] = c.lr;
    j["entropy_coef"] = c.entropy_coef;
    j["epochs"] = c.epochs;
    j["minibatches"] = c.minibatches;
    j["rollout_len"] = c.rollout_len;
    j["n_envs"] = c.n_envs;
    j["quant_period"] = c.quant_period;
    j["total_updates"] = c.total_updates;
    j["seed"] = c.seed;
    j["merge_mode"] = merge_mode_name(c.merge_mode);
    j["init"] = paradigm_name(c.init);
    j["pool_capacity"] = c.pool_capacity;
    j["dist"] = to_json(c.dist);
    j["eval_episodes"] = c.eval_episodes;
    j["hidden"] = c.hidden;
    return j;
}

inline Paradigm paradigm_from_name(const std::string& s) {
    if (s == "nps") return Paradigm::NPS;
    if (s == "fps") return Paradigm::FPS;
    if (s == "fpsid") return Paradigm::FPSid;
    if (s == "group") return Paradigm::Group;
    throw StructuralError("unknown paradigm: " + s);
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("gamma")) c.gamma = j["gamma"].get<double>();
    if (j.contains("gae_lambda")) c.gae_lambda = j["gae_lambda"].get<double>();
    if (j.contains("clip")) c.clip = j["clip"].get<double>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("entropy_coef")) c.entropy_coef = j["entropy_coef"].get<double>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("minibatches")) c.minibatches = j["minibatches"].get<int>();
    if (j.contains("rollout_len")) c.rollout_len = j["rollout_len"].get<int>();
    if (j.contains("n_envs")) c.n_envs = j["n_envs"].get<int>();
    if (j.contains("quant_period")) c.quant_period = j["quant_period"].get<int>();
    if (j.contains("total_updates")) c.total_updates = j["total_updates"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    if (j.contains("merge_mode"))
        c.merge_mode = merge_mode_from_name(j["merge_mode"].get<std::string>());
    if (j.contains("init")) c.init = paradigm_from_name(j["init"].get<std::string>());
    if (j.contains("pool_capacity")) c.pool_capacity = j["pool_capacity"].get<size_t>();
    if (j.contains("dist")) c.dist = distance_config_from_json(j["dist"]);
    if (j.contains("eval_episodes")) c.eval_episodes = j["eval_episodes"].get<int>();
    if (j.contains("hidden")) c.hidden = j["hidden"].get<int>();
    return c;
}

// ---------------------------------------------------------------------------
// Run directory writer: tracks artifact hashes and emits the manifest.
// ---------------------------------------------------------------------------
class RunWriter {
  public:
    explicit RunWriter(std::string dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
        start_ = std::chrono::steady_clock::now();
    }

    const std::string& dir() const { return dir_; }

    std::string path(const std::string& rel) const { return dir_ + "/" + rel; }

    void write(const std::string& rel, const std::string& contents) {
        const std::string full = path(rel);
        std::filesystem::create_directories(std::filesystem::path(full).parent_path());
        write_file(full, contents);
        artifacts_[rel] = content_hash(contents);
    }

    void note_artifact(const std::string& rel) {
        artifacts_[rel] = content_hash(read_file(path(rel)));
    }

    void finish(const std::string& command, const nlohmann::json& config, uint64_t seed) {
        nlohmann::json m;
        m["command"] = command;
        m["config"] = config;
        m["seed"] = seed;
        m["artifacts"] = artifacts_;
        m["wall_clock_sec"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_file(path("manifest.json"), m.dump(2) + "\n");
    }

  private:
    std::string dir_;
    std::map<std::string, std::string> artifacts_;
    std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Pool construction: episodes driven by a 50/50 mixture of random actions and
// the scripted go-to-landmark controller, so conditions cover task-relevant
// regions of the state space.
// ---------------------------------------------------------------------------
inline SamplePool build_mixture_pool(const SpreadEnv& env, int episodes, uint64_t seed,
                                     size_t capacity = 50000) {
    SamplePool pool(capacity);
    Rng rng(hash_combine(seed, 0x6d6978ULL));
    const int n = env.config().n_agents;
    for (int ep = 0; ep < episodes; ++ep) {
        EnvState st = env.reset(hash_combine(seed, 0x6570ULL + uint64_t(ep)));
        auto obs = env.observe_all(st.gs);
        std::vector<bool> scripted(size_t(n), false);
        for (int a = 0; a < n; ++a)
            scripted[size_t(a)] = rng.uniform01() < 0.8;
        while (st.step_count < env.config().episode_len) {
            JointAction ja;
            ja.actions.resize(size_t(n));
            for (int a = 0; a < n; ++a)
                ja.actions[size_t(a)] = scripted[size_t(a)]
                                            ? scripted_action(env, st.gs, a)
                                            : int(rng.below(phys::kNumActions));
            StepResult sr = env.step(st, ja);
            TransitionRecord rec;
            rec.global_state = st.gs;
            rec.joint_action = ja;
            rec.observations = obs;
            rec.next_local_states = sr.state.gs.agent_states;
            rec.next_observations = sr.observations;
            rec.rewards = sr.rewards;
            pool.insert(std::move(rec));
            st = sr.state;
            obs = sr.observations;
        }
    }
    return pool;
}

// ---------------------------------------------------------------------------
// Network store checkpointing (per-network tinynet blobs plus a layout file).
// ---------------------------------------------------------------------------
inline void save_store(const NetworkStore& store, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["agent_to_net"] = store.assignment().agent_to_net;
    j["live"] = store.assignment().live;
    j["use_id_input"] = store.use_id_input();
    j["input_width"] = store.input_width();
    j["n_actions"] = store.n_actions();
    write_file(dir + "/store.json", j.dump(2) + "\n");
    for (const auto& [nid, nets] : store.nets()) {
        save_net(nets.policy, dir + "/policy_" + std::to_string(nid));
        save_net(nets.value, dir + "/value_" + std::to_string(nid));
    }
}

// frozen per-agent policy functions from a checkpoint directory
inline std::vector<PolicyFn> load_policy_fns(const std::string& dir) {
    const nlohmann::json j = nlohmann::json::parse(read_file(dir + "/store.json"));
    const auto agent_to_net = j.at("agent_to_net").get<std::vector<int>>();
    const bool use_id = j.at("use_id_input").get<bool>();
    const int n = int(agent_to_net.size());
    std::map<int, DenseNet> nets;
    for (int nid : j.at("live").get<std::vector<int>>())
        nets[nid] = load_net(dir + "/policy_" + std::to_string(nid));
    std::vector<PolicyFn> fns;
    for (int a = 0; a < n; ++a) {
        DenseNet net = nets.at(agent_to_net[size_t(a)]);
        const int ow = net.input_width() - (use_id ? n : 0);
        fns.push_back([net, use_id, n, ow, a](const Vec& obs) {
            Vec in = pad_to_width(obs, ow);
            if (use_id) {
                Vec oh = one_hot(a, n);
                in.insert(in.end(), oh.begin(), oh.end());
            }
            return NetworkStore::softmax(forward1(net, in));
        });
    }
    return fns;
}

// ---------------------------------------------------------------------------
// casestudy: pool -> four model-based matrices + Meta-Het, one CSV each.
// ---------------------------------------------------------------------------
struct CasestudyResult {
    std::map<std::string, DistanceMatrix> matrices;
};

// Model-free training digs a statistical signal out of agent-tagged rows, so
// it gets a longer default budget than the oracle-backed kinds.
inline DistanceConfig meta_tuned(DistanceConfig cfg) {
    cfg.cvae.steps = std::max(cfg.cvae.steps, 3000);
    return cfg;
}

inline CasestudyResult casestudy_run(const SpreadConfig& scenario, const DistanceConfig& dist,
                                     uint64_t seed, RunWriter* writer = nullptr,
                                     int pool_episodes = 640) {
    SpreadEnv env(scenario);
    SamplePool pool = build_mixture_pool(env, pool_episodes, seed);
    CasestudyResult res;
    const HetKind kinds[] = {HetKind::Obs, HetKind::Response, HetKind::Effect,
                             HetKind::Objective, HetKind::Meta};
    std::vector<DistanceMatrix> mats(5);
    parallel_for(5, [&](int k) {
        mats[size_t(k)] = distance_matrix(kinds[k], pool, env,
                                          kinds[k] == HetKind::Meta ? meta_tuned(dist) : dist,
                                          seed);
    });
    for (const auto& dm : mats) {
        res.matrices[kind_name(dm.kind)] = dm;
        if (writer) {
            const std::string csv = matrix_csv(dm);
            writer->write(std::string(kind_name(dm.kind)) + "_het.csv", csv);
            nlohmann::json mj = {{"kind", kind_name(dm.kind)},
                                 {"M", dm.sample_count},
                                 {"seed", seed},
                                 {"scenario", scenario.name},
                                 {"checksum", content_hash(csv)}};
            writer->write(std::string(kind_name(dm.kind)) + "_het.json", mj.dump(2) + "\n");
        }
    }
    if (writer) {
        TrajectoryHeader h{scenario.n_agents, phys::kStateWidth, scenario.env_width(),
                           scenario.obs_width(), phys::kNumActions};
        write_trajectories(writer->path("trajectories.jsonl"), h, pool);
        writer->note_artifact("trajectories.jsonl");
    }
    return res;
}

// ---------------------------------------------------------------------------
// quantify: a single matrix from a fresh mixture pool (or a checkpoint's
// policies for the policy kind).
// ---------------------------------------------------------------------------
inline DistanceMatrix quantify_run(HetKind kind, const SpreadConfig& scenario,
                                   const DistanceConfig& dist, uint64_t seed,
                                   RunWriter* writer = nullptr,
                                   const std::string& checkpoint = "", int pool_episodes = 640) {
    SpreadEnv env(scenario);
    SamplePool pool = build_mixture_pool(env, pool_episodes, seed);
    DistanceMatrix dm;
    if (kind == HetKind::Policy) {
        if (checkpoint.empty())
            throw StructuralError("policy quantification needs a checkpoint directory");
        dm = policy_distance_matrix(load_policy_fns(checkpoint), pool, dist, seed);
    } else {
        dm = distance_matrix(kind, pool, env,
                             kind == HetKind::Meta ? meta_tuned(dist) : dist, seed);
    }
    if (writer) {
        const std::string csv = matrix_csv(dm);
        writer->write(std::string(kind_name(dm.kind)) + "_het.csv", csv);
        nlohmann::json mj = {{"kind", kind_name(dm.kind)},
                             {"M", dm.sample_count},
                             {"seed", seed},
                             {"scenario", scenario.name},
                             {"checksum", content_hash(csv)}};
        writer->write(std::string(kind_name(dm.kind)) + "_het.json", mj.dump(2) + "\n");
    }
    return dm;
}

// Model-free quantification from an external JSONL log: Meta-Het always, and
// Policy-Het (model-free over logged action probabilities) when present.
inline std::vector<DistanceMatrix> quantify_logs_run(const std::string& jsonl_path,
                                                     const DistanceConfig& dist, uint64_t seed,
                                                     RunWriter* writer = nullptr) {
    SamplePool pool(500000);
    const TrajectoryHeader header = read_trajectories(jsonl_path, pool);
    std::vector<DistanceMatrix> out;
    DistanceConfig cfg = dist;
    cfg.M = std::min<int>(cfg.M, int(pool.size() * size_t(header.n_agents)));
    out.push_back(distance_matrix_meta(pool, header.n_agents, cfg, seed));

    const bool has_probs = !pool.at(0).action_probs.empty();
    if (has_probs) {
        // model-free policy heterogeneity: predict logged action probabilities
        // from (agent id, observation)
        std::vector<MetaSample> rows;
        rows.reserve(pool.size() * size_t(header.n_agents));
        for (size_t r = 0; r < pool.size(); ++r) {
            const TransitionRecord& rec = pool.at(r);
            if (rec.action_probs.empty())
                throw TrajectoryFormatError(int(r) + 2, "ap present only on some lines");
            for (int a = 0; a < header.n_agents; ++a) {
                MetaSample ms;
                ms.agent = a;
                ms.x = rec.observations[size_t(a)];
                ms.y = rec.action_probs[size_t(a)];
                rows.push_back(std::move(ms));
            }
        }
        CvaeModel model = train_cvae(dataset_from_meta_samples(rows, header.n_agents),
                                     CvaeMode::ModelFree, cfg.cvae,
                                     hash_combine(seed, 0x6c6f67706fULL));
        Rng rng(hash_combine(seed, 0x6c6f6763ULL));
        std::vector<Vec> conditions(size_t(cfg.M));
        for (int m = 0; m < cfg.M; ++m)
            conditions[size_t(m)] = rows[rng.below(rows.size())].x;
        DistanceMatrix pm(HetKind::Policy, header.n_agents, cfg.M);
        for (int i = 0; i < header.n_agents; ++i)
            for (int j = i + 1; j < header.n_agents; ++j) {
                const double d = pair_distance_model_free(i, j, model, conditions);
                pm.at(i, j) = d;
                pm.at(j, i) = d;
            }
        out.push_back(std::move(pm));
    }
    if (writer) {
        for (const auto& dm : out) {
            const std::string csv = matrix_csv(dm);
            writer->write(std::string(kind_name(dm.kind)) + "_het.csv", csv);
            nlohmann::json mj = {{"kind", kind_name(dm.kind)},
                                 {"M", dm.sample_count},
                                 {"seed", seed},
                                 {"scenario", "logs"},
                                 {"checksum", content_hash(csv)}};
            writer->write(std::string(kind_name(dm.kind)) + "_het.json", mj.dump(2) + "\n");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// train: full run with rewards.csv, per-period snapshots, checkpoints and a
// manifest. algo selects the sharing paradigm; hetdps adds the quantification
// loop on top of cfg.init.
// ---------------------------------------------------------------------------
struct TrainRunResult {
    double final_eval = 0.0;
    Vec final_eval_per_agent;
    std::vector<PeriodSnapshot> periods;
    std::vector<int> final_labels; // clustering at the last period (hetdps)
    Vec team_reward_curve;
};

inline nlohmann::json period_to_json(const PeriodSnapshot& snap) {
    nlohmann::json j;
    j["period"] = snap.period;
    j["update"] = snap.update;
    j["applied"] = snap.applied;
    if (!snap.error.empty())
        j["error"] = snap.error;
    j["labels"] = snap.clusters.labels;
    j["k"] = snap.clusters.k;
    j["networks"] = snap.assignment.agent_to_net;
    j["live"] = snap.assignment.live;
    nlohmann::json ops = nlohmann::json::array();
    for (const auto& op : snap.assignment.ops) {
        ops.push_back({{"type", op.type == ParamOp::Type::Copy ? "copy" : "merge"},
                       {"srcs", op.srcs},
                       {"coeffs", op.coeffs},
                       {"dst", op.dst}});
    }
    j["ops"] = ops;
    j["matrix_kind"] = kind_name(snap.matrix.kind);
    j["M"] = snap.matrix.sample_count;
    nlohmann::json rowsj = nlohmann::json::array();
    for (int i = 0; i < snap.matrix.n; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int jx = 0; jx < snap.matrix.n; ++jx)
            row.push_back(snap.matrix.at(i, jx));
        rowsj.push_back(row);
    }
    j["matrix"] = rowsj;
    return j;
}

inline TrainRunResult train_run(const SpreadConfig& scenario, const TrainConfig& cfg,
                                const std::string& algo, RunWriter* writer = nullptr) {
    Paradigm paradigm;
    bool dynamic = false;
    if (algo == "hetdps") {
        paradigm = cfg.init;
        dynamic = true;
    } else {
        paradigm = paradigm_from_name(algo);
    }

    Trainer trainer(scenario, cfg, paradigm);
    std::ostringstream rewards;
    rewards << "update";
    for (int a = 0; a < scenario.n_agents; ++a)
        rewards << ",agent" << a;
    rewards << ",team\n";

    TrainRunResult res;
    try {
        for (int u = 1; u <= cfg.total_updates; ++u) {
            UpdateStats st = trainer.run_update();
            rewards << u;
            for (double v : st.per_agent_reward)
                rewards << ',' << fmt_double(v);
            rewards << ',' << fmt_double(st.team_reward) << '\n';
            res.team_reward_curve.push_back(st.team_reward);

            if (dynamic && trainer.is_hetdps_period(u)) {
                PeriodSnapshot snap = trainer.quantify_and_regroup();
                if (writer) {
                    writer->write("period_" + std::to_string(snap.period) + ".json",
                                  period_to_json(snap).dump(2) + "\n");
                    save_store(trainer.store(),
                               writer->path("checkpoint_" + std::to_string(snap.period)));
                }
                if (!snap.applied)
                    std::fprintf(stderr, "[hetdps] period %d skipped: %s\n", snap.period,
                                 snap.error.c_str());
            }
        }
    } catch (const NumericError&) {
        if (writer)
            save_store(trainer.store(), writer->path("crash"));
        throw;
    }

    res.final_eval =
        trainer.evaluate(cfg.eval_episodes, hash_combine(cfg.seed, 0x6576ULL),
                         &res.final_eval_per_agent);
    res.periods = trainer.periods();
    if (trainer.previous_clusters())
        res.final_labels = trainer.previous_clusters()->labels;

    if (writer) {
        writer->write("rewards.csv", rewards.str());
        save_store(trainer.store(), writer->path("checkpoint_final"));
        nlohmann::json cfgj;
        cfgj["scenario"] = to_json(scenario);
        cfgj["train"] = to_json(cfg);
        cfgj["algo"] = algo;
        nlohmann::json extra;
        extra["final_eval"] = res.final_eval;
        extra["final_eval_per_agent"] = res.final_eval_per_agent;
        writer->write("result.json", extra.dump(2) + "\n");
        writer->finish("train", cfgj, cfg.seed);
    }
    return res;
}

} // namespace hetlab

#endif // HETLAB_RUNS_HPP
