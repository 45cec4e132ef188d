#ifndef HETLAB_COMMON_HPP
#define HETLAB_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hetlab {

using Vec = std::vector<double>;

// Error taxonomy used across the library. Structural = malformed shapes or
// inputs, Capacity = not enough data, State = bad call sequencing,
// Numeric = NaN/Inf encountered mid-computation.
struct StructuralError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with explicit uniform/normal transforms,
// so streams are reproducible independent of the standard library.
// ---------------------------------------------------------------------------
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0) : state(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1) with 53 random bits
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0)
            throw StructuralError("Rng::below: n must be positive");
        return next_u64() % n;
    }

    int uniform_int(int lo, int hi_exclusive) {
        return lo + int(below(uint64_t(hi_exclusive - lo)));
    }

    // Marsaglia polar method, one spare cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    // derive an independent child stream
    Rng fork(uint64_t salt) {
        uint64_t s = next_u64();
        return Rng(s ^ (salt * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL));
    }

  private:
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// stable hash combiner for deriving seeds from (seed, tag, tag, ...)
inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    a ^= b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2);
    return a * 0xff51afd7ed558ccdULL;
}

// ---------------------------------------------------------------------------
// Row-major dense matrix plus the three products the backward pass needs.
// ---------------------------------------------------------------------------
struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(size_t(r) * size_t(c), 0.0) {}

    double* row(int r) { return a.data() + size_t(r) * cols; }
    const double* row(int r) const { return a.data() + size_t(r) * cols; }
    double& at(int r, int c) { return a[size_t(r) * cols + c]; }
    double at(int r, int c) const { return a[size_t(r) * cols + c]; }

    void zero() { std::fill(a.begin(), a.end(), 0.0); }

    Vec row_vec(int r) const { return Vec(row(r), row(r) + cols); }

    static Mat from_row(const Vec& v) {
        Mat m(1, int(v.size()));
        std::copy(v.begin(), v.end(), m.a.begin());
        return m;
    }
};

// C = A * W, A: BxK, W: KxN
inline void matmul(const Mat& A, const Mat& W, Mat& C) {
    if (A.cols != W.rows)
        throw StructuralError("matmul: inner dimensions disagree");
    C.rows = A.rows;
    C.cols = W.cols;
    C.a.assign(size_t(C.rows) * C.cols, 0.0);
    const int B = A.rows, K = A.cols, N = W.cols;
    for (int b = 0; b < B; ++b) {
        const double* ar = A.row(b);
        double* cr = C.row(b);
        for (int k = 0; k < K; ++k) {
            const double av = ar[k];
            if (av == 0.0)
                continue;
            const double* wr = W.row(k);
            for (int n = 0; n < N; ++n)
                cr[n] += av * wr[n];
        }
    }
}

// dW += A^T * dC, A: BxK, dC: BxN, dW: KxN
inline void matmul_at_b(const Mat& A, const Mat& dC, Mat& dW) {
    const int B = A.rows, K = A.cols, N = dC.cols;
    for (int b = 0; b < B; ++b) {
        const double* ar = A.row(b);
        const double* dr = dC.row(b);
        for (int k = 0; k < K; ++k) {
            const double av = ar[k];
            if (av == 0.0)
                continue;
            double* wr = dW.row(k);
            for (int n = 0; n < N; ++n)
                wr[n] += av * dr[n];
        }
    }
}

// dA = dC * W^T, dC: BxN, W: KxN, dA: BxK
inline void matmul_b_wt(const Mat& dC, const Mat& W, Mat& dA) {
    const int B = dC.rows, N = dC.cols, K = W.rows;
    dA.rows = B;
    dA.cols = K;
    dA.a.assign(size_t(B) * K, 0.0);
    for (int b = 0; b < B; ++b) {
        const double* dr = dC.row(b);
        double* ar = dA.row(b);
        for (int k = 0; k < K; ++k) {
            const double* wr = W.row(k);
            double acc = 0.0;
            for (int n = 0; n < N; ++n)
                acc += dr[n] * wr[n];
            ar[k] = acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Worker pool helpers. HETLAB_THREADS caps the worker count.
// ---------------------------------------------------------------------------
inline int thread_cap() {
    int hw = int(std::thread::hardware_concurrency());
    if (hw <= 0)
        hw = 1;
    if (const char* env = std::getenv("HETLAB_THREADS")) {
        int cap = std::atoi(env);
        if (cap > 0)
            hw = std::min(hw, cap);
    }
    return hw;
}

// Static index partition; fn(i) must write only to slot i of its output.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    int workers = std::min(thread_cap(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (int i = w; i < n; i += workers)
                fn(i);
        });
    }
    for (auto& t : pool)
        t.join();
}

// ---------------------------------------------------------------------------
// Small IO helpers shared by exporters.
// ---------------------------------------------------------------------------

// shortest round-trippable decimal for a double
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // trim to shortest representation that still round-trips
    for (int prec = 1; prec < 17; ++prec) {
        char probe[40];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
        if (std::strtod(probe, nullptr) == v) {
            return probe;
        }
    }
    return buf;
}

inline void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw StructuralError("cannot open for writing: " + path);
    out.write(contents.data(), std::streamsize(contents.size()));
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw StructuralError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// FNV-1a 64-bit, used as the content hash in manifests
inline uint64_t fnv1a64(const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string content_hash(const std::string& bytes) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  (unsigned long long)fnv1a64(bytes.data(), bytes.size()));
    return buf;
}

inline bool is_finite(double v) { return std::isfinite(v); }

inline double sqr(double v) { return v * v; }

inline Vec one_hot(int index, int width) {
    if (index < 0 || index >= width)
        throw StructuralError("one_hot: index out of range");
    Vec v(size_t(width), 0.0);
    v[size_t(index)] = 1.0;
    return v;
}

} // namespace hetlab

#endif // HETLAB_COMMON_HPP
