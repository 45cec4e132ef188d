#ifndef HETLAB_POMG_HPP
#define HETLAB_POMG_HPP

#include <numeric>

#include "hetlab/common.hpp"

namespace hetlab {

// Agent index in [0, n_agents). Stable for the lifetime of an experiment and
// one-hot encodable to width n_agents.
struct AgentId {
    int index = 0;
};

// Factored global state: per-agent local state vectors plus the environment
// block (landmark positions and color tags).
struct GlobalState {
    std::vector<Vec> agent_states;
    Vec env_state;

    int n_agents() const { return int(agent_states.size()); }
};

// join: concatenate agent states then the environment block
inline Vec flatten_global(const GlobalState& gs) {
    Vec out;
    size_t total = gs.env_state.size();
    for (const auto& s : gs.agent_states)
        total += s.size();
    out.reserve(total);
    for (const auto& s : gs.agent_states)
        out.insert(out.end(), s.begin(), s.end());
    out.insert(out.end(), gs.env_state.begin(), gs.env_state.end());
    return out;
}

// split: inverse of flatten_global for fixed per-agent width
inline GlobalState unflatten_global(const Vec& flat, int n_agents, int state_width) {
    if (int(flat.size()) < n_agents * state_width)
        throw StructuralError("unflatten_global: flat vector too short");
    GlobalState gs;
    gs.agent_states.reserve(size_t(n_agents));
    for (int i = 0; i < n_agents; ++i) {
        auto begin = flat.begin() + ptrdiff_t(i) * state_width;
        gs.agent_states.emplace_back(begin, begin + state_width);
    }
    gs.env_state.assign(flat.begin() + ptrdiff_t(n_agents) * state_width, flat.end());
    return gs;
}

struct JointAction {
    std::vector<int> actions;

    int n_agents() const { return int(actions.size()); }
};

struct DiscountFactor {
    double gamma = 0.99;

    explicit DiscountFactor(double g = 0.99) : gamma(g) {
        if (!(g > 0.0 && g < 1.0))
            throw StructuralError("DiscountFactor: gamma must lie in (0,1)");
    }
};

// One time step of joint experience. All per-agent lists have length
// n_agents; rewards must be finite.
struct TransitionRecord {
    GlobalState global_state;
    JointAction joint_action;
    std::vector<Vec> observations;      // o^i_t
    std::vector<Vec> next_local_states; // s^i_{t+1}
    std::vector<Vec> next_observations; // o^i_{t+1}
    Vec rewards;                        // r^i_t
    std::vector<Vec> action_probs;      // optional, for policy quantification from logs

    int n_agents() const { return int(global_state.agent_states.size()); }
};

inline void validate_record(const TransitionRecord& rec) {
    const size_t n = rec.global_state.agent_states.size();
    if (n == 0)
        throw StructuralError("TransitionRecord: no agents");
    if (rec.joint_action.actions.size() != n || rec.observations.size() != n ||
        rec.next_local_states.size() != n || rec.next_observations.size() != n ||
        rec.rewards.size() != n)
        throw StructuralError("TransitionRecord: per-agent list length mismatch");
    if (!rec.action_probs.empty() && rec.action_probs.size() != n)
        throw StructuralError("TransitionRecord: action_probs length mismatch");
    for (double r : rec.rewards)
        if (!is_finite(r))
            throw StructuralError("TransitionRecord: non-finite reward");
}

// Ring-buffer pool of shuffle-sampled transitions. Single writer; concurrent
// read-only batch sampling from distinct seeds is fine.
class SamplePool {
  public:
    explicit SamplePool(size_t capacity = 50000) : capacity_(capacity) {
        if (capacity_ == 0)
            throw StructuralError("SamplePool: capacity must be positive");
    }

    size_t capacity() const { return capacity_; }
    size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    void insert(TransitionRecord rec) {
        validate_record(rec);
        if (records_.size() < capacity_) {
            records_.push_back(std::move(rec));
        } else {
            records_[head_] = std::move(rec);
            head_ = (head_ + 1) % capacity_;
        }
    }

    // logical index: 0 = oldest surviving record
    const TransitionRecord& at(size_t logical) const {
        if (logical >= records_.size())
            throw StructuralError("SamplePool::at: index out of range");
        return records_[(head_ + logical) % records_.size()];
    }

    // k distinct records, uniform without replacement, deterministic per seed
    std::vector<const TransitionRecord*> sample_batch(size_t k, uint64_t seed) const {
        if (k > records_.size())
            throw CapacityError("SamplePool::sample_batch: k exceeds pool size");
        std::vector<size_t> idx(records_.size());
        std::iota(idx.begin(), idx.end(), size_t(0));
        Rng rng(hash_combine(seed, 0x706f6f6cULL));
        // partial Fisher-Yates: only the first k positions are needed
        for (size_t i = 0; i < k; ++i) {
            size_t j = i + size_t(rng.below(uint64_t(idx.size() - i)));
            std::swap(idx[i], idx[j]);
        }
        std::vector<const TransitionRecord*> out;
        out.reserve(k);
        for (size_t i = 0; i < k; ++i)
            out.push_back(&at(idx[i]));
        return out;
    }

    void clear() {
        records_.clear();
        head_ = 0;
    }

  private:
    size_t capacity_;
    size_t head_ = 0; // index of the oldest record once the ring is full
    std::vector<TransitionRecord> records_;
};

// Right-pad v with `fill` up to `width`. Idempotent at the target width.
inline Vec pad_to_width(const Vec& v, int width, double fill = 0.0) {
    if (int(v.size()) > width)
        throw StructuralError("pad_to_width: vector longer than target width");
    Vec out(v);
    out.resize(size_t(width), fill);
    return out;
}

} // namespace hetlab

#endif // HETLAB_POMG_HPP
