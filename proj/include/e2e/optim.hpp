#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "e2e/autodiff.hpp"

namespace e2e::opt {

using ad::Param;
using ad::Tensor;

inline double global_grad_norm(const std::vector<Param*>& ps) {
    double s = 0.0;
    for (const Param* p : ps)
        for (double g : p->grad.v) s += g * g;
    return std::sqrt(s);
}

/// Scales all gradients so their global norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Param*>& ps, double max_norm) {
    const double norm = global_grad_norm(ps);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Param* p : ps)
            for (double& g : p->grad.v) g *= s;
    }
    return norm;
}

/// AdaDelta: no learning rate; per-element accumulators of squared
/// gradients and squared updates.
struct AdaDelta {
    double rho = 0.95, eps = 1e-8;
    std::vector<Tensor> acc_g, acc_dx;

    void init(const std::vector<Param*>& ps) {
        acc_g.clear();
        acc_dx.clear();
        for (const Param* p : ps) {
            acc_g.emplace_back(p->value.shape);
            acc_dx.emplace_back(p->value.shape);
        }
    }
    void step(const std::vector<Param*>& ps) {
        if (acc_g.empty()) init(ps);
        if (acc_g.size() != ps.size()) throw Error("adadelta: parameter count changed");
        for (std::size_t i = 0; i < ps.size(); ++i) {
            Param* p = ps[i];
            if (acc_g[i].size() != p->value.size())
                throw Error("adadelta: shape changed for " + p->name);
            for (std::int64_t k = 0; k < p->value.size(); ++k) {
                const double g = p->grad.v[k];
                acc_g[i].v[k] = rho * acc_g[i].v[k] + (1.0 - rho) * g * g;
                const double dx =
                    -std::sqrt(acc_dx[i].v[k] + eps) / std::sqrt(acc_g[i].v[k] + eps) * g;
                acc_dx[i].v[k] = rho * acc_dx[i].v[k] + (1.0 - rho) * dx * dx;
                p->value.v[k] += dx;
            }
        }
    }
    std::vector<std::pair<std::string, Tensor*>> state_tensors(const std::string& prefix) {
        std::vector<std::pair<std::string, Tensor*>> out;
        for (std::size_t i = 0; i < acc_g.size(); ++i) {
            out.emplace_back(prefix + ".acc_g." + std::to_string(i), &acc_g[i]);
            out.emplace_back(prefix + ".acc_dx." + std::to_string(i), &acc_dx[i]);
        }
        return out;
    }
};

/// Adam with bias correction.
struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    // step counter as a 1-element tensor so it checkpoints with the moments
    Tensor t_count{std::vector<int>{1}};
    std::vector<Tensor> m, v;

    std::int64_t t() const { return static_cast<std::int64_t>(t_count.v[0]); }

    void init(const std::vector<Param*>& ps) {
        m.clear();
        v.clear();
        t_count.v[0] = 0.0;
        for (const Param* p : ps) {
            m.emplace_back(p->value.shape);
            v.emplace_back(p->value.shape);
        }
    }
    void step(const std::vector<Param*>& ps) {
        if (m.empty()) init(ps);
        if (m.size() != ps.size()) throw Error("adam: parameter count changed");
        t_count.v[0] += 1.0;
        const double bc1 = 1.0 - std::pow(beta1, t_count.v[0]);
        const double bc2 = 1.0 - std::pow(beta2, t_count.v[0]);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            Param* p = ps[i];
            if (m[i].size() != p->value.size())
                throw Error("adam: shape changed for " + p->name);
            for (std::int64_t k = 0; k < p->value.size(); ++k) {
                const double g = p->grad.v[k];
                m[i].v[k] = beta1 * m[i].v[k] + (1.0 - beta1) * g;
                v[i].v[k] = beta2 * v[i].v[k] + (1.0 - beta2) * g * g;
                const double mh = m[i].v[k] / bc1;
                const double vh = v[i].v[k] / bc2;
                p->value.v[k] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
    }
    std::vector<std::pair<std::string, Tensor*>> state_tensors(const std::string& prefix) {
        std::vector<std::pair<std::string, Tensor*>> out;
        out.emplace_back(prefix + ".t", &t_count);
        for (std::size_t i = 0; i < m.size(); ++i) {
            out.emplace_back(prefix + ".m." + std::to_string(i), &m[i]);
            out.emplace_back(prefix + ".v." + std::to_string(i), &v[i]);
        }
        return out;
    }
};

}  // namespace e2e::opt
