#ifndef HETLAB_HET_DISTANCE_HPP
#define HETLAB_HET_DISTANCE_HPP

#include "hetlab/cvae.hpp"
#include "hetlab/spread_env.hpp"

namespace hetlab {

// The five per-type distances plus the comprehensive meta-transition one.
// Obs/Response/Effect/Objective are computed model-based against environment
// oracles, Policy model-based over policy outputs, Meta model-free.
enum class HetKind { Obs, Response, Effect, Objective, Policy, Meta };

inline const char* kind_name(HetKind k) {
    switch (k) {
    case HetKind::Obs: return "obs";
    case HetKind::Response: return "response";
    case HetKind::Effect: return "effect";
    case HetKind::Objective: return "objective";
    case HetKind::Policy: return "policy";
    case HetKind::Meta: return "meta";
    }
    return "?";
}

inline HetKind kind_from_name(const std::string& s) {
    if (s == "obs") return HetKind::Obs;
    if (s == "response") return HetKind::Response;
    if (s == "effect") return HetKind::Effect;
    if (s == "objective") return HetKind::Objective;
    if (s == "policy") return HetKind::Policy;
    if (s == "meta") return HetKind::Meta;
    throw StructuralError("unknown heterogeneity kind: " + s);
}

inline bool kind_is_model_based(HetKind k) { return k != HetKind::Meta; }

// One Monte Carlo condition plus every agent's target evaluated at that same
// condition (canonical-probe substitution keeps x literally identical).
struct KindSample {
    Vec x;
    std::vector<Vec> y_per_agent;
};

// Meta-transition row: x = (padded local state, one-hot action),
// y = (next local state, next observation, reward replicated to the
// observation width).
struct MetaSample {
    int agent = 0;
    Vec x;
    Vec y;
};

struct DistanceMatrix {
    HetKind kind = HetKind::Meta;
    int n = 0;
    Vec values; // n x n, symmetric, zero diagonal
    int sample_count = 0;

    DistanceMatrix() = default;
    DistanceMatrix(HetKind k, int agents, int samples)
        : kind(k), n(agents), values(size_t(agents) * size_t(agents), 0.0),
          sample_count(samples) {}

    double at(int i, int j) const { return values[size_t(i) * size_t(n) + size_t(j)]; }
    double& at(int i, int j) { return values[size_t(i) * size_t(n) + size_t(j)]; }

    double max_entry() const {
        double m = 0.0;
        for (double v : values)
            m = std::max(m, v);
        return m;
    }
};

// Closed-form 2-Wasserstein distance between diagonal Gaussians:
// sqrt(|mu1-mu2|^2 + sum_d (sigma1_d - sigma2_d)^2).
inline double wasserstein2_diag(const GaussianHead& g1, const GaussianHead& g2) {
    if (g1.dim() != g2.dim())
        throw StructuralError("wasserstein2_diag: dimension mismatch");
    double acc = 0.0;
    for (int d = 0; d < g1.dim(); ++d) {
        acc += sqr(g1.mu[size_t(d)] - g2.mu[size_t(d)]);
        acc += sqr(std::exp(g1.log_sigma[size_t(d)]) - std::exp(g2.log_sigma[size_t(d)]));
    }
    return std::sqrt(acc);
}

namespace detail {

inline Vec state_flat(const GlobalState& gs, int probe_slot) {
    Vec x;
    x.reserve(size_t(gs.n_agents()) * phys::kStateWidth + gs.env_state.size());
    const auto& probe = gs.agent_states[size_t(probe_slot)];
    x.insert(x.end(), probe.begin(), probe.end());
    for (int m = 0; m < gs.n_agents(); ++m) {
        if (m == probe_slot)
            continue;
        const auto& s = gs.agent_states[size_t(m)];
        x.insert(x.end(), s.begin(), s.end());
    }
    x.insert(x.end(), gs.env_state.begin(), gs.env_state.end());
    return x;
}

inline Vec action_flat(const JointAction& ja, int probe_slot) {
    Vec x;
    x.reserve(size_t(ja.n_agents()) * phys::kNumActions);
    Vec probe = one_hot(ja.actions[size_t(probe_slot)], phys::kNumActions);
    x.insert(x.end(), probe.begin(), probe.end());
    for (int m = 0; m < ja.n_agents(); ++m) {
        if (m == probe_slot)
            continue;
        Vec oh = one_hot(ja.actions[size_t(m)], phys::kNumActions);
        x.insert(x.end(), oh.begin(), oh.end());
    }
    return x;
}

// effect condition layout: (others' states, own state, others' actions, own action)
inline Vec effect_flat(const GlobalState& gs, const JointAction& ja, int probe_slot) {
    Vec x;
    for (int m = 0; m < gs.n_agents(); ++m) {
        if (m == probe_slot)
            continue;
        const auto& s = gs.agent_states[size_t(m)];
        x.insert(x.end(), s.begin(), s.end());
    }
    const auto& probe = gs.agent_states[size_t(probe_slot)];
    x.insert(x.end(), probe.begin(), probe.end());
    for (int m = 0; m < ja.n_agents(); ++m) {
        if (m == probe_slot)
            continue;
        Vec oh = one_hot(ja.actions[size_t(m)], phys::kNumActions);
        x.insert(x.end(), oh.begin(), oh.end());
    }
    Vec oh = one_hot(ja.actions[size_t(probe_slot)], phys::kNumActions);
    x.insert(x.end(), oh.begin(), oh.end());
    return x;
}

} // namespace detail

// Conditions are drawn from pooled trajectories (the empirical p(x) of the
// distance integral); per-agent targets come from the environment oracles, all
// evaluated from the same probe slot.
inline std::vector<KindSample> build_kind_samples(HetKind kind, const SamplePool& pool,
                                                  const SpreadEnv& env, int M, uint64_t seed) {
    if (kind == HetKind::Policy || kind == HetKind::Meta)
        throw StructuralError("build_kind_samples: use the dedicated policy/meta builders");
    if (M <= 0)
        throw StructuralError("build_kind_samples: M must be positive");
    auto records = pool.sample_batch(size_t(M), hash_combine(seed, 0x6b696e64ULL));
    Rng slot_rng(hash_combine(seed, 0x736c6f74ULL));
    const int n = env.config().n_agents;

    std::vector<KindSample> out(size_t(M), KindSample{});
    for (int m = 0; m < M; ++m) {
        const TransitionRecord& rec = *records[size_t(m)];
        const int slot = int(slot_rng.below(uint64_t(n)));
        KindSample& ks = out[size_t(m)];
        ks.y_per_agent.resize(size_t(n));
        switch (kind) {
        case HetKind::Obs:
            ks.x = detail::state_flat(rec.global_state, slot);
            for (int i = 0; i < n; ++i)
                ks.y_per_agent[size_t(i)] = env.oracle_observe({i}, rec.global_state, slot);
            break;
        case HetKind::Response: {
            Vec sx = detail::state_flat(rec.global_state, slot);
            Vec ax = detail::action_flat(rec.joint_action, slot);
            sx.insert(sx.end(), ax.begin(), ax.end());
            ks.x = std::move(sx);
            for (int i = 0; i < n; ++i)
                ks.y_per_agent[size_t(i)] =
                    env.oracle_transition({i}, rec.global_state, rec.joint_action, slot);
            break;
        }
        case HetKind::Effect:
            ks.x = detail::effect_flat(rec.global_state, rec.joint_action, slot);
            for (int i = 0; i < n; ++i)
                ks.y_per_agent[size_t(i)] =
                    env.oracle_effect({i}, rec.global_state, rec.joint_action, slot);
            break;
        case HetKind::Objective: {
            Vec sx = detail::state_flat(rec.global_state, slot);
            Vec ax = detail::action_flat(rec.joint_action, slot);
            sx.insert(sx.end(), ax.begin(), ax.end());
            ks.x = std::move(sx);
            for (int i = 0; i < n; ++i)
                ks.y_per_agent[size_t(i)] = {
                    env.oracle_reward({i}, rec.global_state, rec.joint_action, slot)};
            break;
        }
        default:
            throw StructuralError("build_kind_samples: unsupported kind");
        }
    }
    return out;
}

// Per-record, per-agent meta-transition rows. The reward block replicates the
// scalar reward to the observation width so the autoencoder cannot drown it
// out; omit_reward selects the reduced variant.
inline std::vector<MetaSample> build_meta_samples(const SamplePool& pool, uint64_t /*seed*/,
                                                  bool include_reward = true) {
    if (pool.empty())
        throw CapacityError("build_meta_samples: empty pool");
    const TransitionRecord& first = pool.at(0);
    const int n = first.n_agents();
    int max_state_w = 0, max_obs_w = 0;
    for (int i = 0; i < n; ++i) {
        max_state_w = std::max(max_state_w, int(first.global_state.agent_states[size_t(i)].size()));
        max_obs_w = std::max(max_obs_w, int(first.next_observations[size_t(i)].size()));
    }

    std::vector<MetaSample> out;
    out.reserve(pool.size() * size_t(n));
    for (size_t r = 0; r < pool.size(); ++r) {
        const TransitionRecord& rec = pool.at(r);
        for (int i = 0; i < n; ++i) {
            MetaSample ms;
            ms.agent = i;
            ms.x = pad_to_width(rec.global_state.agent_states[size_t(i)], max_state_w);
            Vec act = one_hot(rec.joint_action.actions[size_t(i)], phys::kNumActions);
            ms.x.insert(ms.x.end(), act.begin(), act.end());
            ms.y = pad_to_width(rec.next_local_states[size_t(i)], max_state_w);
            const Vec obs = pad_to_width(rec.next_observations[size_t(i)], max_obs_w);
            ms.y.insert(ms.y.end(), obs.begin(), obs.end());
            if (include_reward)
                ms.y.insert(ms.y.end(), size_t(max_obs_w), rec.rewards[size_t(i)]);
            out.push_back(std::move(ms));
        }
    }
    return out;
}

inline CvaeDataset dataset_from_kind_samples(const std::vector<KindSample>& samples) {
    if (samples.empty())
        throw CapacityError("dataset_from_kind_samples: no samples");
    const int n = int(samples[0].y_per_agent.size());
    const int xw = int(samples[0].x.size());
    const int yw = int(samples[0].y_per_agent[0].size());
    CvaeDataset d;
    d.n_agents = n;
    d.x = Mat(int(samples.size()) * n, xw);
    d.y = Mat(int(samples.size()) * n, yw);
    int row = 0;
    for (const auto& s : samples) {
        for (int i = 0; i < n; ++i, ++row) {
            std::copy(s.x.begin(), s.x.end(), d.x.row(row));
            std::copy(s.y_per_agent[size_t(i)].begin(), s.y_per_agent[size_t(i)].end(),
                      d.y.row(row));
        }
    }
    return d;
}

inline CvaeDataset dataset_from_meta_samples(const std::vector<MetaSample>& samples,
                                             int n_agents) {
    if (samples.empty())
        throw CapacityError("dataset_from_meta_samples: no samples");
    CvaeDataset d;
    d.n_agents = n_agents;
    d.x = Mat(int(samples.size()), int(samples[0].x.size()));
    d.y = Mat(int(samples.size()), int(samples[0].y.size()));
    d.agent_ids.resize(samples.size());
    for (size_t r = 0; r < samples.size(); ++r) {
        std::copy(samples[r].x.begin(), samples[r].x.end(), d.x.row(int(r)));
        std::copy(samples[r].y.begin(), samples[r].y.end(), d.y.row(int(r)));
        d.agent_ids[r] = samples[r].agent;
    }
    return d;
}

// Monte Carlo estimate of the pairwise distance: mean over conditions of the
// Wasserstein-2 distance between the two agents' posteriors.
inline double pair_distance(int i, int j, HetKind kind, const CvaeModel& model,
                            const std::vector<KindSample>& samples) {
    if (!model.trained)
        throw StateError("pair_distance: model not trained");
    if (!kind_is_model_based(kind))
        throw StructuralError("pair_distance: kind is not model-based");
    if (samples.empty())
        throw CapacityError("pair_distance: no samples");
    if (i == j)
        return 0.0;
    double acc = 0.0;
    for (const auto& s : samples) {
        GaussianHead gi = model.encode(s.x, s.y_per_agent[size_t(i)]);
        GaussianHead gj = model.encode(s.x, s.y_per_agent[size_t(j)]);
        acc += wasserstein2_diag(gi, gj);
    }
    return acc / double(samples.size());
}

inline double pair_distance_model_free(int i, int j, const CvaeModel& model,
                                       const std::vector<Vec>& conditions) {
    if (!model.trained)
        throw StateError("pair_distance_model_free: model not trained");
    if (conditions.empty())
        throw CapacityError("pair_distance_model_free: no conditions");
    if (i == j)
        return 0.0;
    double acc = 0.0;
    for (const auto& x : conditions)
        acc += wasserstein2_diag(model.encode_id(i, x), model.encode_id(j, x));
    return acc / double(conditions.size());
}

struct DistanceConfig {
    int M = 1024; // Monte Carlo conditions per matrix
    CvaeConfig cvae;
};

namespace detail {

// Cache each agent's posteriors over all conditions with one batched forward,
// then reduce pairs. Pairs are independent; assembly mirrors the upper
// triangle so float-order asymmetry cannot creep in.
inline DistanceMatrix matrix_from_heads(HetKind kind, int n, int M,
                                        const std::vector<Mat>& raw_per_agent, int latent_dim) {
    DistanceMatrix dm(kind, n, M);
    struct Pair {
        int i, j;
    };
    std::vector<Pair> pairs;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            pairs.push_back({i, j});
    std::vector<double> result(pairs.size(), 0.0);
    parallel_for(int(pairs.size()), [&](int p) {
        const int i = pairs[size_t(p)].i, j = pairs[size_t(p)].j;
        const Mat& ri = raw_per_agent[size_t(i)];
        const Mat& rj = raw_per_agent[size_t(j)];
        double acc = 0.0;
        for (int m = 0; m < M; ++m) {
            const double* a = ri.row(m);
            const double* b = rj.row(m);
            double s = 0.0;
            for (int d = 0; d < latent_dim; ++d) {
                s += sqr(a[d] - b[d]);
                const double sa = std::exp(std::clamp(a[latent_dim + d], kLogSigmaMin, kLogSigmaMax));
                const double sb = std::exp(std::clamp(b[latent_dim + d], kLogSigmaMin, kLogSigmaMax));
                s += sqr(sa - sb);
            }
            acc += std::sqrt(s);
        }
        result[size_t(p)] = acc / double(M);
    });
    for (size_t p = 0; p < pairs.size(); ++p) {
        dm.at(pairs[p].i, pairs[p].j) = result[p];
        dm.at(pairs[p].j, pairs[p].i) = result[p];
    }
    return dm;
}

} // namespace detail

// All-pairs matrix for one model-based kind: build samples, train the kind's
// CVAE, then Monte-Carlo the pairwise distances on those same conditions.
inline DistanceMatrix distance_matrix_model_based(HetKind kind, const SamplePool& pool,
                                                  const SpreadEnv& env,
                                                  const DistanceConfig& cfg, uint64_t seed) {
    const int n = env.config().n_agents;
    auto samples = build_kind_samples(kind, pool, env, cfg.M, seed);
    CvaeModel model =
        train_cvae(dataset_from_kind_samples(samples), CvaeMode::ModelBased, cfg.cvae,
                   hash_combine(seed, uint64_t(kind)));

    std::vector<Mat> raw(size_t(n), Mat{});
    parallel_for(n, [&](int i) {
        Mat enc_in(cfg.M, model.encoder_input_width());
        for (int m = 0; m < cfg.M; ++m) {
            const auto& s = samples[size_t(m)];
            double* r = enc_in.row(m);
            const Vec ys = model.standardize_y(s.y_per_agent[size_t(i)]);
            std::copy(ys.begin(), ys.end(), r);
            std::copy(s.x.begin(), s.x.end(), r + model.y_width);
        }
        raw[size_t(i)] = forward(model.encoder, enc_in);
    });
    return detail::matrix_from_heads(kind, n, cfg.M, raw, model.latent_dim);
}

// Meta-Het: model-free over meta-transitions; evaluation conditions are drawn
// from the pooled union of every agent's meta inputs.
inline DistanceMatrix distance_matrix_meta(const SamplePool& pool, int n_agents,
                                           const DistanceConfig& cfg, uint64_t seed,
                                           CvaeModel* model_out = nullptr) {
    auto metas = build_meta_samples(pool, seed);
    CvaeModel model = train_cvae(dataset_from_meta_samples(metas, n_agents), CvaeMode::ModelFree,
                                 cfg.cvae, hash_combine(seed, 0x6d657461ULL));

    Rng rng(hash_combine(seed, 0x636f6e64ULL));
    const int M = cfg.M;
    Mat enc_in(M, model.encoder_input_width());
    for (int m = 0; m < M; ++m) {
        const Vec& x = metas[rng.below(metas.size())].x;
        std::copy(x.begin(), x.end(), enc_in.row(m));
    }
    // one shared backbone pass; agents differ only by their additive head
    const Mat backbone = forward(model.encoder, enc_in);
    std::vector<Mat> raw(size_t(n_agents), Mat{});
    for (int i = 0; i < n_agents; ++i) {
        const Vec off = forward1(model.id_head, one_hot(i, n_agents));
        raw[size_t(i)] = backbone;
        for (int m = 0; m < M; ++m) {
            double* r = raw[size_t(i)].row(m);
            for (size_t c = 0; c < off.size(); ++c)
                r[c] += off[c];
        }
    }
    if (model_out)
        *model_out = model;
    return detail::matrix_from_heads(HetKind::Meta, n_agents, M, raw, model.latent_dim);
}

inline DistanceMatrix distance_matrix(HetKind kind, const SamplePool& pool, const SpreadEnv& env,
                                      const DistanceConfig& cfg, uint64_t seed) {
    if (kind == HetKind::Meta)
        return distance_matrix_meta(pool, env.config().n_agents, cfg, seed);
    if (kind == HetKind::Policy)
        throw StructuralError("distance_matrix: policy kind needs policy_distance_matrix");
    return distance_matrix_model_based(kind, pool, env, cfg, seed);
}

using PolicyFn = std::function<Vec(const Vec& obs)>;

// Policy-Het: conditions are observations pooled across all agents; targets
// are full action-probability vectors, encoded model-based.
inline DistanceMatrix policy_distance_matrix(const std::vector<PolicyFn>& policies,
                                             const SamplePool& pool, const DistanceConfig& cfg,
                                             uint64_t seed) {
    const int n = int(policies.size());
    if (n == 0)
        throw StructuralError("policy_distance_matrix: no policies");
    auto records = pool.sample_batch(size_t(cfg.M), hash_combine(seed, 0x706f6cULL));
    Rng rng(hash_combine(seed, 0x6f627355ULL));

    int obs_w = 0;
    for (int i = 0; i < n; ++i)
        obs_w = std::max(obs_w, int(records[0]->observations[size_t(i)].size()));

    std::vector<KindSample> samples(size_t(cfg.M));
    for (int m = 0; m < cfg.M; ++m) {
        const TransitionRecord& rec = *records[size_t(m)];
        const int who = int(rng.below(uint64_t(n)));
        KindSample& ks = samples[size_t(m)];
        ks.x = pad_to_width(rec.observations[size_t(who)], obs_w);
        ks.y_per_agent.resize(size_t(n));
        for (int j = 0; j < n; ++j)
            ks.y_per_agent[size_t(j)] = policies[size_t(j)](ks.x);
    }

    CvaeModel model =
        train_cvae(dataset_from_kind_samples(samples), CvaeMode::ModelBased, cfg.cvae,
                   hash_combine(seed, 0x706f6c6379ULL));
    std::vector<Mat> raw(size_t(n), Mat{});
    parallel_for(n, [&](int i) {
        Mat enc_in(cfg.M, model.encoder_input_width());
        for (int m = 0; m < cfg.M; ++m) {
            const auto& s = samples[size_t(m)];
            double* r = enc_in.row(m);
            const Vec ys = model.standardize_y(s.y_per_agent[size_t(i)]);
            std::copy(ys.begin(), ys.end(), r);
            std::copy(s.x.begin(), s.x.end(), r + model.y_width);
        }
        raw[size_t(i)] = forward(model.encoder, enc_in);
    });
    DistanceMatrix dm = detail::matrix_from_heads(HetKind::Policy, n, cfg.M, raw, model.latent_dim);
    return dm;
}

// ---------------------------------------------------------------------------
// Matrix metric-axiom checks and block summaries.
// ---------------------------------------------------------------------------
struct MetricAxiomReport {
    bool symmetric = true;
    bool non_negative = true;
    bool zero_diagonal = true;
    double worst_triangle_violation = 0.0; // max over triples of d_ij - d_ik - d_kj
    bool triangle_ok(double tolerance) const { return worst_triangle_violation <= tolerance; }
};

inline MetricAxiomReport check_metric_axioms(const DistanceMatrix& dm) {
    MetricAxiomReport rep;
    for (int i = 0; i < dm.n; ++i) {
        if (dm.at(i, i) != 0.0)
            rep.zero_diagonal = false;
        for (int j = 0; j < dm.n; ++j) {
            if (dm.at(i, j) != dm.at(j, i))
                rep.symmetric = false;
            if (dm.at(i, j) < 0.0)
                rep.non_negative = false;
        }
    }
    for (int i = 0; i < dm.n; ++i)
        for (int j = 0; j < dm.n; ++j)
            for (int k = 0; k < dm.n; ++k)
                rep.worst_triangle_violation = std::max(
                    rep.worst_triangle_violation, dm.at(i, j) - dm.at(i, k) - dm.at(k, j));
    return rep;
}

// Monte Carlo slack for the triangle inequality: 3 * max entry / sqrt(M).
inline double triangle_tolerance(const DistanceMatrix& dm) {
    return 3.0 * dm.max_entry() / std::sqrt(double(std::max(dm.sample_count, 1)));
}

struct BlockMeans {
    double within = 0.0;
    double cross = 0.0;
};

inline BlockMeans group_block_means(const DistanceMatrix& dm, const std::vector<int>& group_of) {
    BlockMeans bm;
    int nw = 0, nc = 0;
    for (int i = 0; i < dm.n; ++i) {
        for (int j = i + 1; j < dm.n; ++j) {
            if (group_of[size_t(i)] == group_of[size_t(j)]) {
                bm.within += dm.at(i, j);
                ++nw;
            } else {
                bm.cross += dm.at(i, j);
                ++nc;
            }
        }
    }
    if (nw > 0)
        bm.within /= nw;
    if (nc > 0)
        bm.cross /= nc;
    return bm;
}

inline std::vector<int> groups_of_config(const SpreadConfig& cfg) {
    std::vector<int> g(size_t(cfg.n_agents));
    for (int i = 0; i < cfg.n_agents; ++i)
        g[size_t(i)] = cfg.group_of(i);
    return g;
}

// ---------------------------------------------------------------------------
// Export: CSV matrix plus JSON manifest {kind, M, seed, scenario, checksum}.
// ---------------------------------------------------------------------------
inline std::string matrix_csv(const DistanceMatrix& dm) {
    std::ostringstream out;
    for (int i = 0; i < dm.n; ++i) {
        for (int j = 0; j < dm.n; ++j) {
            if (j)
                out << ',';
            out << fmt_double(dm.at(i, j));
        }
        out << '\n';
    }
    return out.str();
}

inline void export_matrix(const DistanceMatrix& dm, const std::string& dir,
                          const std::string& scenario, uint64_t seed) {
    const std::string csv = matrix_csv(dm);
    const std::string base = dir + "/" + kind_name(dm.kind) + "_het";
    write_file(base + ".csv", csv);
    std::ostringstream js;
    js << "{\"kind\":\"" << kind_name(dm.kind) << "\",\"M\":" << dm.sample_count
       << ",\"seed\":" << seed << ",\"scenario\":\"" << scenario << "\",\"checksum\":\""
       << content_hash(csv) << "\"}";
    write_file(base + ".json", js.str());
}

} // namespace hetlab

#endif // HETLAB_HET_DISTANCE_HPP
