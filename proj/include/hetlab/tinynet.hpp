#ifndef HETLAB_TINYNET_HPP
#define HETLAB_TINYNET_HPP

#include "hetlab/common.hpp"

namespace hetlab {

enum class Act { Tanh, Identity };

inline constexpr double kLogSigmaMin = -5.0;
inline constexpr double kLogSigmaMax = 2.0;

// Minimal dense network with explicit analytic gradients. Layers are plain
// values; copying a net copies its parameters.
struct Layer {
    Mat w;   // in x out
    Vec b;   // out
    Act act = Act::Tanh;
};

struct DenseNet {
    std::vector<Layer> layers;

    int input_width() const { return layers.empty() ? 0 : layers.front().w.rows; }
    int output_width() const { return layers.empty() ? 0 : layers.back().w.cols; }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& l : layers)
            n += l.w.a.size() + l.b.size();
        return n;
    }

    // widths = {in, h1, ..., out}; hidden layers tanh, final layer identity
    static DenseNet make(const std::vector<int>& widths, Rng& rng) {
        if (widths.size() < 2)
            throw StructuralError("DenseNet::make: need at least input and output widths");
        DenseNet net;
        for (size_t i = 0; i + 1 < widths.size(); ++i) {
            Layer l;
            l.w = Mat(widths[i], widths[i + 1]);
            l.b.assign(size_t(widths[i + 1]), 0.0);
            const double scale = 1.0 / std::sqrt(double(widths[i]));
            for (auto& v : l.w.a)
                v = rng.normal() * scale;
            l.act = (i + 2 < widths.size()) ? Act::Tanh : Act::Identity;
            net.layers.push_back(std::move(l));
        }
        return net;
    }

    static DenseNet zeros(const std::vector<int>& widths) {
        Rng rng(0);
        DenseNet net = make(widths, rng);
        for (auto& l : net.layers) {
            l.w.zero();
            std::fill(l.b.begin(), l.b.end(), 0.0);
        }
        return net;
    }

    Vec flat_params() const {
        Vec out;
        out.reserve(param_count());
        for (const auto& l : layers) {
            out.insert(out.end(), l.w.a.begin(), l.w.a.end());
            out.insert(out.end(), l.b.begin(), l.b.end());
        }
        return out;
    }

    void set_flat_params(const Vec& flat) {
        if (flat.size() != param_count())
            throw StructuralError("DenseNet::set_flat_params: size mismatch");
        size_t p = 0;
        for (auto& l : layers) {
            std::copy(flat.begin() + ptrdiff_t(p), flat.begin() + ptrdiff_t(p + l.w.a.size()),
                      l.w.a.begin());
            p += l.w.a.size();
            std::copy(flat.begin() + ptrdiff_t(p), flat.begin() + ptrdiff_t(p + l.b.size()),
                      l.b.begin());
            p += l.b.size();
        }
    }
};

// Activations cached during forward, consumed by backward.
struct ForwardCache {
    Mat input;
    std::vector<Mat> post; // post-activation output of each layer
    bool valid = false;
};

inline Mat forward(const DenseNet& net, const Mat& x, ForwardCache* cache = nullptr) {
    if (net.layers.empty())
        throw StructuralError("forward: empty network");
    if (x.cols != net.input_width())
        throw StructuralError("forward: input width mismatch");
    if (cache) {
        cache->input = x;
        cache->post.clear();
        cache->post.reserve(net.layers.size());
    }
    Mat cur = x;
    for (const auto& l : net.layers) {
        Mat nxt;
        matmul(cur, l.w, nxt);
        for (int r = 0; r < nxt.rows; ++r) {
            double* row = nxt.row(r);
            for (int c = 0; c < nxt.cols; ++c) {
                row[c] += l.b[size_t(c)];
                if (l.act == Act::Tanh)
                    row[c] = std::tanh(row[c]);
            }
        }
        if (cache)
            cache->post.push_back(nxt);
        cur = std::move(nxt);
    }
    if (cache)
        cache->valid = true;
    return cur;
}

inline Vec forward1(const DenseNet& net, const Vec& x) {
    return forward(net, Mat::from_row(x)).row_vec(0);
}

struct GradBuffer {
    std::vector<Mat> dw;
    std::vector<Vec> db;

    GradBuffer() = default;

    explicit GradBuffer(const DenseNet& net) {
        dw.reserve(net.layers.size());
        db.reserve(net.layers.size());
        for (const auto& l : net.layers) {
            dw.emplace_back(l.w.rows, l.w.cols);
            db.emplace_back(l.b.size(), 0.0);
        }
    }

    void zero() {
        for (auto& m : dw)
            m.zero();
        for (auto& v : db)
            std::fill(v.begin(), v.end(), 0.0);
    }

    void add(const GradBuffer& other) {
        for (size_t i = 0; i < dw.size(); ++i) {
            for (size_t j = 0; j < dw[i].a.size(); ++j)
                dw[i].a[j] += other.dw[i].a[j];
            for (size_t j = 0; j < db[i].size(); ++j)
                db[i][j] += other.db[i][j];
        }
    }

    void scale(double s) {
        for (auto& m : dw)
            for (auto& v : m.a)
                v *= s;
        for (auto& v : db)
            for (auto& x : v)
                x *= s;
    }
};

// Accumulates exact gradients of sum_b upstream_b . f(x_b) into `grads`;
// returns the gradient with respect to the input batch.
inline Mat backward(const DenseNet& net, const ForwardCache& cache, const Mat& upstream,
                    GradBuffer& grads) {
    if (!cache.valid)
        throw StateError("backward: forward cache missing");
    if (upstream.rows != cache.input.rows || upstream.cols != net.output_width())
        throw StructuralError("backward: upstream shape mismatch");

    Mat delta = upstream;
    for (int li = int(net.layers.size()) - 1; li >= 0; --li) {
        const Layer& l = net.layers[size_t(li)];
        const Mat& out = cache.post[size_t(li)];
        if (l.act == Act::Tanh) {
            for (int r = 0; r < delta.rows; ++r) {
                double* dr = delta.row(r);
                const double* orow = out.row(r);
                for (int c = 0; c < delta.cols; ++c)
                    dr[c] *= 1.0 - orow[c] * orow[c];
            }
        }
        const Mat& in = (li == 0) ? cache.input : cache.post[size_t(li - 1)];
        matmul_at_b(in, delta, grads.dw[size_t(li)]);
        for (int r = 0; r < delta.rows; ++r) {
            const double* dr = delta.row(r);
            for (int c = 0; c < delta.cols; ++c)
                grads.db[size_t(li)][size_t(c)] += dr[c];
        }
        if (li > 0) {
            Mat prev;
            matmul_b_wt(delta, l.w, prev);
            delta = std::move(prev);
        } else {
            Mat dx;
            matmul_b_wt(delta, l.w, dx);
            return dx;
        }
    }
    return Mat(); // unreachable
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian head.
// ---------------------------------------------------------------------------
struct GaussianHead {
    Vec mu;
    Vec log_sigma; // already clamped to [kLogSigmaMin, kLogSigmaMax]

    int dim() const { return int(mu.size()); }

    Vec sigma() const {
        Vec s(log_sigma.size());
        for (size_t i = 0; i < s.size(); ++i)
            s[i] = std::exp(log_sigma[i]);
        return s;
    }

    // raw = [mu | log_sigma] of width 2d
    static GaussianHead from_raw(const Vec& raw) {
        if (raw.size() % 2 != 0)
            throw StructuralError("GaussianHead::from_raw: odd width");
        const size_t d = raw.size() / 2;
        GaussianHead h;
        h.mu.assign(raw.begin(), raw.begin() + ptrdiff_t(d));
        h.log_sigma.resize(d);
        for (size_t i = 0; i < d; ++i)
            h.log_sigma[i] = std::clamp(raw[d + i], kLogSigmaMin, kLogSigmaMax);
        return h;
    }
};

// z = mu + sigma .* eps
inline Vec reparam_sample(const GaussianHead& head, const Vec& eps) {
    if (eps.size() != head.mu.size())
        throw StructuralError("reparam_sample: eps width mismatch");
    Vec z(head.mu.size());
    for (size_t i = 0; i < z.size(); ++i)
        z[i] = head.mu[i] + std::exp(head.log_sigma[i]) * eps[i];
    return z;
}

// KL( N(mu, sigma^2) || N(0, I) ), summed over dimensions
inline double kl_to_standard_normal(const GaussianHead& head) {
    double kl = 0.0;
    for (size_t i = 0; i < head.mu.size(); ++i) {
        const double s2 = std::exp(2.0 * head.log_sigma[i]);
        kl += 0.5 * (head.mu[i] * head.mu[i] + s2 - 1.0 - 2.0 * head.log_sigma[i]);
    }
    return kl;
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer (beta1 0.9, beta2 0.999, eps 1e-8).
// ---------------------------------------------------------------------------
struct OptimState {
    std::vector<Mat> m_w, v_w;
    std::vector<Vec> m_b, v_b;
    long step = 0;
    double lr = 1e-3;

    OptimState() = default;

    OptimState(const DenseNet& net, double learning_rate) : lr(learning_rate) {
        for (const auto& l : net.layers) {
            m_w.emplace_back(l.w.rows, l.w.cols);
            v_w.emplace_back(l.w.rows, l.w.cols);
            m_b.emplace_back(l.b.size(), 0.0);
            v_b.emplace_back(l.b.size(), 0.0);
        }
    }
};

inline void optim_step(DenseNet& net, const GradBuffer& grads, OptimState& st) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    if (grads.dw.size() != net.layers.size())
        throw StructuralError("optim_step: gradient shape mismatch");
    for (const auto& m : grads.dw)
        for (double g : m.a)
            if (!is_finite(g))
                throw NumericError("optim_step: non-finite weight gradient");
    for (const auto& v : grads.db)
        for (double g : v)
            if (!is_finite(g))
                throw NumericError("optim_step: non-finite bias gradient");

    st.step += 1;
    const double c1 = 1.0 - std::pow(b1, double(st.step));
    const double c2 = 1.0 - std::pow(b2, double(st.step));
    for (size_t li = 0; li < net.layers.size(); ++li) {
        Layer& l = net.layers[li];
        for (size_t j = 0; j < l.w.a.size(); ++j) {
            const double g = grads.dw[li].a[j];
            double& m = st.m_w[li].a[j];
            double& v = st.v_w[li].a[j];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            l.w.a[j] -= st.lr * (m / c1) / (std::sqrt(v / c2) + eps);
        }
        for (size_t j = 0; j < l.b.size(); ++j) {
            const double g = grads.db[li][j];
            double& m = st.m_b[li][j];
            double& v = st.v_b[li][j];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            l.b[j] -= st.lr * (m / c1) / (std::sqrt(v / c2) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization: flat little-endian float32 array plus a JSON shape manifest.
// Written as prefix.bin / prefix.json.
// ---------------------------------------------------------------------------
inline std::string net_shape_json(const DenseNet& net) {
    std::ostringstream js;
    js << "{\"layers\":[";
    for (size_t i = 0; i < net.layers.size(); ++i) {
        const auto& l = net.layers[i];
        js << (i ? "," : "") << "{\"in\":" << l.w.rows << ",\"out\":" << l.w.cols
           << ",\"act\":\"" << (l.act == Act::Tanh ? "tanh" : "identity") << "\"}";
    }
    js << "],\"param_count\":" << net.param_count() << "}";
    return js.str();
}

inline void save_net(const DenseNet& net, const std::string& prefix) {
    const Vec flat = net.flat_params();
    std::string bytes;
    bytes.resize(flat.size() * 4);
    for (size_t i = 0; i < flat.size(); ++i) {
        float f = float(flat[i]);
        uint32_t u;
        std::memcpy(&u, &f, 4);
        bytes[i * 4 + 0] = char(u & 0xff);
        bytes[i * 4 + 1] = char((u >> 8) & 0xff);
        bytes[i * 4 + 2] = char((u >> 16) & 0xff);
        bytes[i * 4 + 3] = char((u >> 24) & 0xff);
    }
    write_file(prefix + ".bin", bytes);
    write_file(prefix + ".json", net_shape_json(net));
}

inline DenseNet load_net(const std::string& prefix) {
    const std::string js = read_file(prefix + ".json");
    // tolerant hand parse of the fixed shape manifest
    DenseNet net;
    size_t pos = 0;
    while (true) {
        size_t in_pos = js.find("\"in\":", pos);
        if (in_pos == std::string::npos)
            break;
        size_t out_pos = js.find("\"out\":", in_pos);
        size_t act_pos = js.find("\"act\":\"", in_pos);
        if (out_pos == std::string::npos || act_pos == std::string::npos)
            throw StructuralError("load_net: malformed shape manifest");
        Layer l;
        l.w = Mat(std::atoi(js.c_str() + in_pos + 5), std::atoi(js.c_str() + out_pos + 6));
        l.b.assign(size_t(l.w.cols), 0.0);
        l.act = js.compare(act_pos + 7, 4, "tanh") == 0 ? Act::Tanh : Act::Identity;
        net.layers.push_back(std::move(l));
        pos = act_pos + 7;
    }
    if (net.layers.empty())
        throw StructuralError("load_net: no layers in manifest");
    const std::string bytes = read_file(prefix + ".bin");
    if (bytes.size() != net.param_count() * 4)
        throw StructuralError("load_net: parameter blob size mismatch");
    Vec flat(net.param_count());
    for (size_t i = 0; i < flat.size(); ++i) {
        uint32_t u = (uint32_t(uint8_t(bytes[i * 4 + 0]))) |
                     (uint32_t(uint8_t(bytes[i * 4 + 1])) << 8) |
                     (uint32_t(uint8_t(bytes[i * 4 + 2])) << 16) |
                     (uint32_t(uint8_t(bytes[i * 4 + 3])) << 24);
        float f;
        std::memcpy(&f, &u, 4);
        flat[i] = double(f);
    }
    net.set_flat_params(flat);
    return net;
}

} // namespace hetlab

#endif // HETLAB_TINYNET_HPP
