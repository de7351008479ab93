#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace e2e {

/// Library-wide error type; message carries the failing shapes/values.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace ad {

/// Dense row-major N-d tensor of doubles. Compute is always 64-bit;
/// 32-bit storage exists only in the checkpoint container.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0)
        : shape(std::move(s)), v(count(shape), fill) {}

    static Tensor from(std::vector<int> s, std::vector<double> data) {
        Tensor t;
        t.shape = std::move(s);
        if (static_cast<std::int64_t>(data.size()) != count(t.shape))
            throw Error("Tensor::from: data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(t.shape));
        t.v = std::move(data);
        return t;
    }
    static Tensor scalar(double x) { return from({1}, {x}); }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    // 2-d accessors; bounds are the caller's responsibility.
    double& at(int i, int j) { return v[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return v[static_cast<std::size_t>(i) * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ')';
        return os.str();
    }
    std::string shape_str() const { return shape_str(shape); }
};

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw Error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// C(m,n) += or = A(m,k) * B(k,n), all row-major. The k-inner/j-vectorized
// order keeps B and C accesses contiguous.
inline void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c,
                    bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T
inline void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c,
                    bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

// C(m,n) += A(k,m)^T * B(k,n)
inline void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c,
                    bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int p = 0; p < k; ++p) {
        const double* ap = a + static_cast<std::size_t>(p) * m;
        const double* bp = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double api = ap[i];
            if (api == 0.0) continue;
            double* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw Error("matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
    Tensor c({a.dim(0), b.dim(1)});
    gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.data(), b.data(), c.data(), false);
    return c;
}

}  // namespace ad
}  // namespace e2e
