#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "cmm/common.hpp"
#include "cmm/rng.hpp"

namespace cmm {

// Dense row-major matrix of doubles. Vectors are (1, n) or (n, 1) as needed.
struct Tensor2 {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor2() = default;
    Tensor2(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {
        if (r < 0 || c < 0) throw config_error("Tensor2: negative dimensions");
    }

    static Tensor2 zeros(int r, int c) { return Tensor2(r, c); }

    static Tensor2 filled(int r, int c, double x) {
        Tensor2 t(r, c);
        for (auto& e : t.v) e = x;
        return t;
    }

    static Tensor2 identity(int n) {
        Tensor2 t(n, n);
        for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    static Tensor2 uniform(int r, int c, double lo, double hi, Rng& rng) {
        Tensor2 t(r, c);
        for (auto& e : t.v) e = rng.uniform(lo, hi);
        return t;
    }

    static Tensor2 gaussian(int r, int c, double mean, double stddev, Rng& rng) {
        Tensor2 t(r, c);
        for (auto& e : t.v) e = mean + stddev * rng.gaussian();
        return t;
    }

    size_t size() const { return v.size(); }
    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double e : v)
            if (!std::isfinite(e)) return false;
        return true;
    }

    void fill(double x) {
        for (auto& e : v) e = x;
    }
};

inline void check_shape(const Tensor2& t, int r, int c, const char* what) {
    if (t.rows != r || t.cols != c)
        throw config_error(std::string(what) + ": expected " + std::to_string(r) + "x" +
                           std::to_string(c) + ", got " + std::to_string(t.rows) + "x" +
                           std::to_string(t.cols));
}

// out = a * b
inline void matmul(const Tensor2& a, const Tensor2& b, Tensor2& out) {
    if (a.cols != b.rows) throw config_error("matmul: inner dimension mismatch");
    if (out.rows != a.rows || out.cols != b.cols) out = Tensor2(a.rows, b.cols);
    else out.fill(0.0);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* oi = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row(k);
            for (int j = 0; j < b.cols; ++j) oi[j] += aik * bk[j];
        }
    }
}

// out = a^T * b  (a: (k, m), b: (k, n), out: (m, n))
inline void matmul_tn(const Tensor2& a, const Tensor2& b, Tensor2& out) {
    if (a.rows != b.rows) throw config_error("matmul_tn: inner dimension mismatch");
    if (out.rows != a.cols || out.cols != b.cols) out = Tensor2(a.cols, b.cols);
    else out.fill(0.0);
    for (int k = 0; k < a.rows; ++k) {
        const double* ak = a.row(k);
        const double* bk = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            double* oi = out.row(i);
            for (int j = 0; j < b.cols; ++j) oi[j] += aki * bk[j];
        }
    }
}

// out = a * b^T  (a: (m, k), b: (n, k), out: (m, n))
inline void matmul_nt(const Tensor2& a, const Tensor2& b, Tensor2& out) {
    if (a.cols != b.cols) throw config_error("matmul_nt: inner dimension mismatch");
    if (out.rows != a.rows || out.cols != b.rows) out = Tensor2(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* oi = out.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* bj = b.row(j);
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
            oi[j] = acc;
        }
    }
}

inline void add_inplace(Tensor2& a, const Tensor2& b) {
    if (!a.same_shape(b)) throw config_error("add_inplace: shape mismatch");
    for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

// a += s * b
inline void axpy(Tensor2& a, double s, const Tensor2& b) {
    if (!a.same_shape(b)) throw config_error("axpy: shape mismatch");
    for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += s * b.v[i];
}

inline double dot(const Tensor2& a, const Tensor2& b) {
    if (a.v.size() != b.v.size()) throw config_error("dot: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) acc += a.v[i] * b.v[i];
    return acc;
}

inline uint64_t tensor_hash(const Tensor2& t, uint64_t h = kFnvOffset) {
    h = fnv1a64(&t.rows, sizeof(t.rows), h);
    h = fnv1a64(&t.cols, sizeof(t.cols), h);
    return fnv1a64(t.v.data(), t.v.size() * sizeof(double), h);
}

}  // namespace cmm
