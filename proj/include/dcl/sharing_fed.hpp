#pragma once

#include <stdexcept>
#include <vector>

#include "dcl/nn.hpp"

namespace dcl {

/// Elementwise mean over the agent's own parameters and its neighbors'.
template <class Real>
inline std::vector<Real> fedavg_aggregate(const std::vector<Real>& self_params,
                                          const std::vector<std::vector<Real>>& neighbor_params) {
    for (const auto& v : neighbor_params)
        if (v.size() != self_params.size())
            throw std::invalid_argument("parameter length mismatch in aggregation");
    std::vector<Real> out(self_params.size());
    double inv = 1.0 / static_cast<double>(neighbor_params.size() + 1);
    for (size_t p = 0; p < out.size(); ++p) {
        double s = static_cast<double>(self_params[p]);
        for (const auto& v : neighbor_params) s += static_cast<double>(v[p]);
        out[p] = static_cast<Real>(s * inv);
    }
    return out;
}

/// Proximal attraction toward the most recent aggregate: (mu/2) ||theta - anchor||^2.
/// mu == 0 yields an empty penalty, leaving local steps untouched.
template <class Real>
inline QuadraticPenalty<Real> fedprox_penalty(const std::vector<Real>& anchor, double mu) {
    if (mu < 0) throw std::invalid_argument("mu must be nonnegative");
    QuadraticPenalty<Real> pen;
    if (mu == 0.0) return pen;
    typename QuadraticPenalty<Real>::Term term;
    term.weight = static_cast<Real>(mu / 2.0);
    term.anchor = anchor;
    pen.terms.push_back(std::move(term));
    return pen;
}

/// Curvature-weighted attraction toward each neighbor snapshot:
/// mu * sum_j sum_p I_j[p] (theta[p] - theta_j[p])^2.
template <class Real>
inline QuadraticPenalty<Real> fedcurv_penalty(
    const std::vector<std::pair<std::vector<Real>, std::vector<Real>>>& neighbor_snapshots,
    double mu) {
    if (mu < 0) throw std::invalid_argument("mu must be nonnegative");
    QuadraticPenalty<Real> pen;
    if (mu == 0.0) return pen;
    for (const auto& [params, fisher] : neighbor_snapshots) {
        if (fisher.empty()) throw std::invalid_argument("missing Fisher diagonal for snapshot");
        if (fisher.size() != params.size())
            throw std::invalid_argument("Fisher/parameter length mismatch");
        typename QuadraticPenalty<Real>::Term term;
        term.weight = static_cast<Real>(mu);
        term.anchor = params;
        term.coeff = fisher;
        pen.terms.push_back(std::move(term));
    }
    return pen;
}

/// Importance-gated blend: d * theta + (1 - d) * mean over {self, neighbors}.
/// d in [0, 1] elementwise; d == 1 keeps the local value, d == 0 reproduces
/// plain averaging.
template <class Real>
inline std::vector<Real> fedfish_aggregate(const std::vector<Real>& self_params,
                                           const std::vector<Real>& importance,
                                           const std::vector<std::vector<Real>>& neighbor_params) {
    if (importance.size() != self_params.size())
        throw std::invalid_argument("importance length mismatch");
    for (Real d : importance)
        if (d < Real(0) || d > Real(1))
            throw std::invalid_argument("importance entries must lie in [0, 1]");
    std::vector<Real> mean = fedavg_aggregate(self_params, neighbor_params);
    std::vector<Real> out(self_params.size());
    for (size_t p = 0; p < out.size(); ++p) {
        double d = static_cast<double>(importance[p]);
        out[p] = static_cast<Real>(d * static_cast<double>(self_params[p]) +
                                   (1.0 - d) * static_cast<double>(mean[p]));
    }
    return out;
}

} // namespace dcl
