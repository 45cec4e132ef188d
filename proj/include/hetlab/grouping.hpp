#ifndef HETLAB_GROUPING_HPP
#define HETLAB_GROUPING_HPP

#include "hetlab/het_distance.hpp"

namespace hetlab {

// Cluster labels in [0, k), every cluster non-empty, relabeled in order of
// first appearance so runs are comparable.
struct ClusterAssignment {
    std::vector<int> labels;
    int k = 0;

    int n() const { return int(labels.size()); }

    // labels must already lie in [0, k) with every cluster non-empty
    static ClusterAssignment from_labels(std::vector<int> labels) {
        ClusterAssignment ca;
        ca.labels = std::move(labels);
        for (int l : ca.labels)
            ca.k = std::max(ca.k, l + 1);
        std::vector<bool> seen(size_t(ca.k), false);
        for (int l : ca.labels) {
            if (l < 0)
                throw StructuralError("ClusterAssignment: negative label");
            seen[size_t(l)] = true;
        }
        for (bool s : seen)
            if (!s)
                throw StructuralError("ClusterAssignment: empty cluster label");
        return ca;
    }

    // arbitrary ids, renumbered in order of first appearance
    static ClusterAssignment normalized(const std::vector<int>& raw) {
        std::vector<int> labels(raw.size(), 0);
        std::vector<int> remap;
        for (size_t i = 0; i < raw.size(); ++i) {
            int found = -1;
            for (size_t r = 0; r < remap.size(); ++r)
                if (remap[r] == raw[i])
                    found = int(r);
            if (found < 0) {
                found = int(remap.size());
                remap.push_back(raw[i]);
            }
            labels[i] = found;
        }
        return from_labels(std::move(labels));
    }

    std::vector<std::vector<int>> members() const {
        std::vector<std::vector<int>> m{size_t(k)};
        for (size_t i = 0; i < labels.size(); ++i)
            m[size_t(labels[i])].push_back(int(i));
        return m;
    }

    std::vector<int> sizes() const {
        std::vector<int> s(size_t(k), 0);
        for (int l : labels)
            ++s[size_t(l)];
        return s;
    }
};

struct ApOptions {
    double damping = 0.5;
    int max_iter = 500;
    int convergence_iter = 25;
};

// Standard affinity propagation over similarities s(i,j) = -d(i,j) with the
// preference set to the minimum off-diagonal similarity, so no cluster-count
// hyperparameter enters. The median preference degenerates on two-member
// blocks (each member insists on exemplarhood) and splits structureless
// noise; the minimum recovers pair blocks and collapses noise to one cluster.
// Deterministic; if the exemplar set never stabilizes the current labels are
// returned with converged=false.
inline ClusterAssignment affinity_propagation(const DistanceMatrix& dm,
                                              const ApOptions& opt = {},
                                              bool* converged_out = nullptr) {
    const int n = dm.n;
    if (n <= 0)
        throw StructuralError("affinity_propagation: empty matrix");
    if (!(opt.damping >= 0.5 && opt.damping < 1.0))
        throw StructuralError("affinity_propagation: damping must lie in [0.5, 1)");
    if (n == 1) {
        if (converged_out)
            *converged_out = true;
        return ClusterAssignment::from_labels({0});
    }

    // similarities and minimum preference
    std::vector<double> s(size_t(n) * size_t(n));
    double pref = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) {
                s[size_t(i) * size_t(n) + size_t(j)] = -dm.at(i, j);
                pref = std::min(pref, -dm.at(i, j));
            }
    for (int i = 0; i < n; ++i)
        s[size_t(i) * size_t(n) + size_t(i)] = pref;

    std::vector<double> r(size_t(n) * size_t(n), 0.0), a(size_t(n) * size_t(n), 0.0);
    auto idx = [n](int i, int j) { return size_t(i) * size_t(n) + size_t(j); };

    std::vector<char> exemplar(size_t(n), 0), prev_exemplar(size_t(n), 0);
    int stable = 0;
    bool converged = false;
    const double lam = opt.damping;

    for (int it = 0; it < opt.max_iter; ++it) {
        // responsibilities
        for (int i = 0; i < n; ++i) {
            double max1 = -1e300, max2 = -1e300;
            int arg1 = -1;
            for (int k = 0; k < n; ++k) {
                const double v = a[idx(i, k)] + s[idx(i, k)];
                if (v > max1) {
                    max2 = max1;
                    max1 = v;
                    arg1 = k;
                } else if (v > max2) {
                    max2 = v;
                }
            }
            for (int k = 0; k < n; ++k) {
                const double cap = (k == arg1) ? max2 : max1;
                r[idx(i, k)] = lam * r[idx(i, k)] + (1.0 - lam) * (s[idx(i, k)] - cap);
            }
        }
        // availabilities
        for (int k = 0; k < n; ++k) {
            double pos_sum = 0.0;
            for (int i = 0; i < n; ++i)
                if (i != k)
                    pos_sum += std::max(0.0, r[idx(i, k)]);
            for (int i = 0; i < n; ++i) {
                double v;
                if (i == k) {
                    v = pos_sum;
                } else {
                    v = std::min(0.0, r[idx(k, k)] + pos_sum - std::max(0.0, r[idx(i, k)]));
                }
                a[idx(i, k)] = lam * a[idx(i, k)] + (1.0 - lam) * v;
            }
        }
        // convergence check on the exemplar set
        for (int k = 0; k < n; ++k)
            exemplar[size_t(k)] = (r[idx(k, k)] + a[idx(k, k)]) > 0.0;
        if (it > 0 && exemplar == prev_exemplar) {
            if (++stable >= opt.convergence_iter &&
                std::count(exemplar.begin(), exemplar.end(), char(1)) > 0) {
                converged = true;
                break;
            }
        } else {
            stable = 0;
        }
        prev_exemplar = exemplar;
    }

    std::vector<int> exemplars;
    for (int k = 0; k < n; ++k)
        if (exemplar[size_t(k)])
            exemplars.push_back(k);
    if (exemplars.empty()) {
        // no structure at all (e.g. an all-zero matrix): one cluster, lowest
        // index as the nominal exemplar
        int best = 0;
        double best_v = -1e300;
        for (int k = 0; k < n; ++k) {
            const double v = r[idx(k, k)] + a[idx(k, k)];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        exemplars.push_back(best);
    }

    std::vector<int> raw(size_t(n), 0);
    for (int i = 0; i < n; ++i) {
        int best = exemplars[0];
        double best_v = -1e300;
        for (int e : exemplars) {
            const double v = (i == e) ? 1e300 : s[idx(i, e)]; // exemplars claim themselves
            if (v > best_v) {
                best_v = v;
                best = e;
            }
        }
        raw[size_t(i)] = best;
    }
    if (converged_out)
        *converged_out = converged;
    return ClusterAssignment::normalized(raw);
}

// counts of agents shared between old cluster a and new cluster b
struct OverlapMatrix {
    int k_old = 0, k_new = 0;
    std::vector<int> counts;

    int at(int a, int b) const { return counts[size_t(a) * size_t(k_new) + size_t(b)]; }
    int& at(int a, int b) { return counts[size_t(a) * size_t(k_new) + size_t(b)]; }
};

inline OverlapMatrix overlap_matrix(const ClusterAssignment& oldc, const ClusterAssignment& newc) {
    if (oldc.n() != newc.n())
        throw StructuralError("overlap_matrix: assignments cover different agent counts");
    OverlapMatrix om;
    om.k_old = oldc.k;
    om.k_new = newc.k;
    om.counts.assign(size_t(oldc.k) * size_t(newc.k), 0);
    for (int i = 0; i < oldc.n(); ++i)
        ++om.at(oldc.labels[size_t(i)], newc.labels[size_t(i)]);
    return om;
}

struct HungarianResult {
    std::vector<int> row_to_col; // -1 for unassigned rows (rows > cols case)
    double cost = 0.0;
};

// Minimum-cost one-to-one assignment over min(rows, cols) pairs via the
// potentials formulation; deterministic scanning order breaks ties.
inline HungarianResult hungarian(const Mat& cost) {
    if (cost.rows == 0 || cost.cols == 0)
        throw StructuralError("hungarian: empty cost matrix");
    for (double v : cost.a)
        if (!is_finite(v))
            throw StructuralError("hungarian: non-finite cost entry");

    const bool transposed = cost.rows > cost.cols;
    const int n = transposed ? cost.cols : cost.rows; // n <= m
    const int m = transposed ? cost.rows : cost.cols;
    auto c = [&](int i, int j) { return transposed ? cost.at(j, i) : cost.at(i, j); };

    const double INF = 1e300;
    std::vector<double> u(size_t(n) + 1, 0.0), v(size_t(m) + 1, 0.0);
    std::vector<int> p(size_t(m) + 1, 0), way(size_t(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(size_t(m) + 1, INF);
        std::vector<char> used(size_t(m) + 1, 0);
        do {
            used[size_t(j0)] = 1;
            const int i0 = p[size_t(j0)];
            double delta = INF;
            int j1 = -1;
            for (int j = 1; j <= m; ++j) {
                if (used[size_t(j)])
                    continue;
                const double cur = c(i0 - 1, j - 1) - u[size_t(i0)] - v[size_t(j)];
                if (cur < minv[size_t(j)]) {
                    minv[size_t(j)] = cur;
                    way[size_t(j)] = j0;
                }
                if (minv[size_t(j)] < delta) {
                    delta = minv[size_t(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[size_t(j)]) {
                    u[size_t(p[size_t(j)])] += delta;
                    v[size_t(j)] -= delta;
                } else {
                    minv[size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[size_t(j0)] != 0);
        do {
            const int j1 = way[size_t(j0)];
            p[size_t(j0)] = p[size_t(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    HungarianResult res;
    res.row_to_col.assign(size_t(cost.rows), -1);
    for (int j = 1; j <= m; ++j) {
        if (p[size_t(j)] == 0)
            continue;
        const int i = p[size_t(j)] - 1, jj = j - 1;
        if (transposed)
            res.row_to_col[size_t(jj)] = i;
        else
            res.row_to_col[size_t(i)] = jj;
    }
    for (int i = 0; i < cost.rows; ++i)
        if (res.row_to_col[size_t(i)] >= 0)
            res.cost += cost.at(i, res.row_to_col[size_t(i)]);
    return res;
}

enum class MergeMode { Majority, Random, Average, Weighted };

inline const char* merge_mode_name(MergeMode m) {
    switch (m) {
    case MergeMode::Majority: return "majority";
    case MergeMode::Random: return "random";
    case MergeMode::Average: return "average";
    case MergeMode::Weighted: return "weighted";
    }
    return "?";
}

inline MergeMode merge_mode_from_name(const std::string& s) {
    if (s == "majority") return MergeMode::Majority;
    if (s == "random") return MergeMode::Random;
    if (s == "average") return MergeMode::Average;
    if (s == "weighted") return MergeMode::Weighted;
    throw StructuralError("unknown merge mode: " + s);
}

// Parameter operation emitted by reconcile and applied by the trainer under
// exclusive access to the network store. A Copy duplicates src into a fresh
// dst; a Merge overwrites dst with the coefficient-weighted combination of
// srcs (majority/random reduce to a single coefficient of 1).
struct ParamOp {
    enum class Type { Copy, Merge };
    Type type = Type::Copy;
    std::vector<int> srcs;
    std::vector<double> coeffs;
    int dst = -1;
};

struct NetworkAssignment {
    std::vector<int> agent_to_net;
    std::vector<int> live;        // network ids after ops are applied
    std::vector<ParamOp> ops;

    bool is_live(int id) const {
        return std::find(live.begin(), live.end(), id) != live.end();
    }

    void validate() const {
        for (int nid : agent_to_net)
            if (!is_live(nid))
                throw StructuralError("NetworkAssignment: agent mapped to a dead network");
    }

    static NetworkAssignment single(int n_agents, int net_id = 0) {
        NetworkAssignment na;
        na.agent_to_net.assign(size_t(n_agents), net_id);
        na.live = {net_id};
        return na;
    }

    static NetworkAssignment per_agent(int n_agents) {
        NetworkAssignment na;
        na.agent_to_net.resize(size_t(n_agents));
        std::iota(na.agent_to_net.begin(), na.agent_to_net.end(), 0);
        na.live = na.agent_to_net;
        return na;
    }

    // clustering induced by shared networks, ordered by first appearance
    ClusterAssignment induced_clusters() const {
        std::vector<int> raw(agent_to_net.begin(), agent_to_net.end());
        return ClusterAssignment::normalized(raw);
    }
};

namespace detail {

// mean pairwise distance between two agent sets, used only for split
// tie-breaking
inline double cluster_pair_distance(const DistanceMatrix& d, const std::vector<int>& a,
                                    const std::vector<int>& b) {
    double acc = 0.0;
    int cnt = 0;
    for (int i : a)
        for (int j : b) {
            acc += d.at(i, j);
            ++cnt;
        }
    return cnt ? acc / cnt : 0.0;
}

} // namespace detail

// Appendix-style dual-clustering reconciliation: maximum-overlap matching via
// the Hungarian algorithm, then per-case network inheritance with split (copy)
// and merge ops. `dist` is optional and only breaks overlap ties on splits.
inline NetworkAssignment reconcile(const NetworkAssignment& old_assign,
                                   const ClusterAssignment& old_c, const ClusterAssignment& new_c,
                                   MergeMode mode, uint64_t rng_seed,
                                   const DistanceMatrix* dist = nullptr) {
    const int n = old_c.n();
    if (new_c.n() != n || int(old_assign.agent_to_net.size()) != n)
        throw StructuralError("reconcile: inputs cover different agent counts");

    // old clusters must map 1:1 onto live networks
    std::vector<int> cluster_net(size_t(old_c.k), -1);
    for (int i = 0; i < n; ++i) {
        const int c = old_c.labels[size_t(i)];
        const int nid = old_assign.agent_to_net[size_t(i)];
        if (cluster_net[size_t(c)] < 0)
            cluster_net[size_t(c)] = nid;
        else if (cluster_net[size_t(c)] != nid)
            throw StructuralError("reconcile: old cluster spans multiple networks");
    }
    for (int a = 0; a < old_c.k; ++a)
        for (int b = a + 1; b < old_c.k; ++b)
            if (cluster_net[size_t(a)] == cluster_net[size_t(b)])
                throw StructuralError("reconcile: two old clusters share one network");

    const OverlapMatrix om = overlap_matrix(old_c, new_c);
    Mat neg_overlap(old_c.k, new_c.k);
    for (int a = 0; a < old_c.k; ++a)
        for (int b = 0; b < new_c.k; ++b)
            neg_overlap.at(a, b) = -double(om.at(a, b));
    const HungarianResult match = hungarian(neg_overlap);

    NetworkAssignment out;
    out.agent_to_net.assign(size_t(n), -1);
    std::vector<int> new_cluster_net(size_t(new_c.k), -1);
    int next_id = 0;
    for (int nid : old_assign.live)
        next_id = std::max(next_id, nid + 1);

    const auto old_members = old_c.members();
    const auto new_members = new_c.members();
    const auto old_sizes = old_c.sizes();

    if (new_c.k >= old_c.k) {
        // equal: pure relabeling; more new: splits for unmatched new clusters
        for (int a = 0; a < old_c.k; ++a) {
            const int b = match.row_to_col[size_t(a)];
            new_cluster_net[size_t(b)] = cluster_net[size_t(a)];
        }
        for (int b = 0; b < new_c.k; ++b) {
            if (new_cluster_net[size_t(b)] >= 0)
                continue;
            // most similar old cluster: max overlap, then smallest mean
            // distance between member sets, then lowest index
            int best_a = 0;
            for (int a = 1; a < old_c.k; ++a) {
                if (om.at(a, b) > om.at(best_a, b)) {
                    best_a = a;
                } else if (om.at(a, b) == om.at(best_a, b) && dist) {
                    const double da =
                        detail::cluster_pair_distance(*dist, old_members[size_t(a)],
                                                      new_members[size_t(b)]);
                    const double db =
                        detail::cluster_pair_distance(*dist, old_members[size_t(best_a)],
                                                      new_members[size_t(b)]);
                    if (da < db)
                        best_a = a;
                }
            }
            const int fresh = next_id++;
            ParamOp op;
            op.type = ParamOp::Type::Copy;
            op.srcs = {cluster_net[size_t(best_a)]};
            op.coeffs = {1.0};
            op.dst = fresh;
            out.ops.push_back(std::move(op));
            new_cluster_net[size_t(b)] = fresh;
        }
    } else {
        // fewer new clusters: merge contributors into the matched network
        std::vector<int> old_to_new(size_t(old_c.k), -1);
        for (int a = 0; a < old_c.k; ++a)
            if (match.row_to_col[size_t(a)] >= 0)
                old_to_new[size_t(a)] = match.row_to_col[size_t(a)];
        // columns hold the Hungarian pairs when rows > cols; recover them
        for (int a = 0; a < old_c.k; ++a) {
            if (old_to_new[size_t(a)] >= 0)
                continue;
            int best_b = 0;
            for (int b = 1; b < new_c.k; ++b)
                if (om.at(a, b) > om.at(a, best_b))
                    best_b = b;
            old_to_new[size_t(a)] = best_b;
        }
        // matched contributor per new cluster hosts the merge
        std::vector<int> host(size_t(new_c.k), -1);
        for (int a = 0; a < old_c.k; ++a) {
            const int b = old_to_new[size_t(a)];
            const bool is_match =
                match.row_to_col[size_t(a)] == b && match.row_to_col[size_t(a)] >= 0;
            if (is_match)
                host[size_t(b)] = a;
        }
        Rng rng(hash_combine(rng_seed, 0x6d65726765ULL));
        for (int b = 0; b < new_c.k; ++b) {
            std::vector<int> contributors;
            for (int a = 0; a < old_c.k; ++a)
                if (old_to_new[size_t(a)] == b)
                    contributors.push_back(a);
            if (contributors.empty())
                throw StructuralError("reconcile: new cluster received no contributors");
            if (host[size_t(b)] < 0)
                host[size_t(b)] = contributors[0];
            const int dst = cluster_net[size_t(host[size_t(b)])];
            if (contributors.size() == 1) {
                new_cluster_net[size_t(b)] = dst;
                continue;
            }
            ParamOp op;
            op.type = ParamOp::Type::Merge;
            op.dst = dst;
            for (int a : contributors)
                op.srcs.push_back(cluster_net[size_t(a)]);
            op.coeffs.assign(contributors.size(), 0.0);
            switch (mode) {
            case MergeMode::Majority: {
                size_t best = 0;
                for (size_t c = 1; c < contributors.size(); ++c)
                    if (old_sizes[size_t(contributors[c])] >
                        old_sizes[size_t(contributors[best])])
                        best = c;
                op.coeffs[best] = 1.0;
                break;
            }
            case MergeMode::Random:
                op.coeffs[size_t(rng.below(contributors.size()))] = 1.0;
                break;
            case MergeMode::Average:
                for (auto& cf : op.coeffs)
                    cf = 1.0 / double(contributors.size());
                break;
            case MergeMode::Weighted: {
                double total = 0.0;
                for (int a : contributors)
                    total += old_sizes[size_t(a)];
                for (size_t c = 0; c < contributors.size(); ++c)
                    op.coeffs[c] = old_sizes[size_t(contributors[c])] / total;
                break;
            }
            }
            out.ops.push_back(std::move(op));
            new_cluster_net[size_t(b)] = dst;
        }
    }

    for (int i = 0; i < n; ++i)
        out.agent_to_net[size_t(i)] = new_cluster_net[size_t(new_c.labels[size_t(i)])];
    out.live = new_cluster_net;
    std::sort(out.live.begin(), out.live.end());
    out.live.erase(std::unique(out.live.begin(), out.live.end()), out.live.end());
    out.validate();
    return out;
}

// Adjusted Rand index between two labelings; 1 = identical partitions.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size())
        throw StructuralError("adjusted_rand_index: label length mismatch");
    const int n = int(a.size());
    const auto ca = ClusterAssignment::normalized(a);
    const auto cb = ClusterAssignment::normalized(b);
    std::vector<long> table(size_t(ca.k) * size_t(cb.k), 0);
    for (int i = 0; i < n; ++i)
        ++table[size_t(ca.labels[size_t(i)]) * size_t(cb.k) + size_t(cb.labels[size_t(i)])];
    auto comb2 = [](long x) { return double(x) * double(x - 1) / 2.0; };
    double sum_ij = 0.0;
    for (long t : table)
        sum_ij += comb2(t);
    double sum_a = 0.0;
    for (int s : ca.sizes())
        sum_a += comb2(s);
    double sum_b = 0.0;
    for (int s : cb.sizes())
        sum_b += comb2(s);
    const double total = comb2(n);
    const double expected = sum_a * sum_b / total;
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected)
        return 1.0; // degenerate: both partitions trivial
    return (sum_ij - expected) / (max_index - expected);
}

} // namespace hetlab

#endif // HETLAB_GROUPING_HPP
