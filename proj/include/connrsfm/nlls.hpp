#pragma once

// Small dense bounded nonlinear least squares.
//
// Levenberg-Marquardt with Marquardt (diagonal) damping, projection of every
// trial point onto box bounds and monotone acceptance: a trial is accepted
// only if it lowers the cost, so the returned point is never worse than the
// start. Jacobians come from a user callback or from central differences.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "connrsfm/errors.hpp"

namespace connrsfm {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

struct Bounds {
    VecX lower;  // empty: unbounded below
    VecX upper;  // empty: unbounded above

    static Bounds none() { return {}; }
    static Bounds lower_only(VecX lo) { return {std::move(lo), {}}; }

    VecX project(VecX x) const {
        if (lower.size() == x.size()) x = x.cwiseMax(lower);
        if (upper.size() == x.size()) x = x.cwiseMin(upper);
        return x;
    }
};

struct NllsOptions {
    /// Outer iteration cap; each iteration computes one Jacobian.
    int max_iterations = 3;
    /// Initial damping relative to the largest diagonal entry of J^T J.
    double damping_init = 1e-3;
    /// Rejected trials allowed within one iteration before giving up.
    int max_rejections = 12;
    /// Relative central-difference step.
    double fd_step = 1e-6;
    /// Stop when the gradient infinity norm drops below this.
    double gradient_tolerance = 1e-15;
    /// Stop when the relative step length drops below this.
    double step_tolerance = 1e-15;
};

struct NllsResult {
    VecX x;
    double initial_cost = 0.0;  // 0.5 * |r|^2 at the start
    double final_cost = 0.0;
    int iterations = 0;
    int evaluations = 0;
};

using ResidualFn = std::function<VecX(const VecX&)>;
using JacobianFn = std::function<MatX(const VecX&)>;

namespace detail {

inline bool all_finite(const VecX& v) { return v.allFinite(); }

inline MatX central_jacobian(const ResidualFn& f, const VecX& x, const VecX& r0, const Bounds& b, double rel,
                             int& evals) {
    MatX j(r0.size(), x.size());
    for (int k = 0; k < x.size(); ++k) {
        const double h = rel * std::max(1.0, std::abs(x[k]));
        VecX xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        // One-sided differences where a bound would be crossed.
        const bool lo_hit = b.lower.size() == x.size() && xm[k] < b.lower[k];
        const bool hi_hit = b.upper.size() == x.size() && xp[k] > b.upper[k];
        if (lo_hit && !hi_hit) {
            j.col(k) = (f(xp) - r0) / h;
            ++evals;
        } else if (hi_hit && !lo_hit) {
            j.col(k) = (r0 - f(xm)) / h;
            ++evals;
        } else {
            j.col(k) = (f(xp) - f(xm)) / (2.0 * h);
            evals += 2;
        }
    }
    return j;
}

}  // namespace detail

inline NllsResult nlls_solve(const ResidualFn& f, VecX x0, const Bounds& bounds = {}, const NllsOptions& opt = {},
                             const JacobianFn& jac = nullptr) {
    NllsResult res;
    res.x = bounds.project(std::move(x0));
    VecX r = f(res.x);
    res.evaluations = 1;
    if (!detail::all_finite(r)) throw DomainError("nlls_solve: residuals are not finite at the initial point");
    double cost = 0.5 * r.squaredNorm();
    res.initial_cost = cost;
    res.final_cost = cost;
    if (res.x.size() == 0 || r.size() == 0) return res;

    double mu = -1.0;
    double nu = 2.0;
    for (int it = 0; it < opt.max_iterations; ++it) {
        if (cost == 0.0) break;
        const MatX j = jac ? jac(res.x) : detail::central_jacobian(f, res.x, r, bounds, opt.fd_step, res.evaluations);
        if (!j.allFinite()) break;
        const MatX jtj = j.transpose() * j;
        const VecX g = j.transpose() * r;
        if (g.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance) break;
        const VecX diag = jtj.diagonal().cwiseMax(1e-12 * std::max(1.0, jtj.diagonal().maxCoeff()));
        if (mu < 0.0) mu = opt.damping_init;
        ++res.iterations;
        bool accepted = false;
        for (int rej = 0; rej <= opt.max_rejections; ++rej) {
            MatX a = jtj;
            a.diagonal() += mu * diag;
            const VecX step = a.ldlt().solve(-g);
            if (!step.allFinite()) {
                mu *= nu;
                nu *= 2.0;
                continue;
            }
            const VecX trial = bounds.project(res.x + step);
            const VecX dx = trial - res.x;
            if (dx.norm() <= opt.step_tolerance * (res.x.norm() + opt.step_tolerance)) break;
            const VecX rt = f(trial);
            ++res.evaluations;
            const double ct = detail::all_finite(rt) ? 0.5 * rt.squaredNorm() : std::numeric_limits<double>::infinity();
            if (ct < cost) {
                // Gain ratio against the linear model drives the damping update.
                const double predicted = -(g.dot(dx) + 0.5 * dx.dot(jtj * dx));
                const double rho = predicted > 0.0 ? (cost - ct) / predicted : 0.0;
                mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
                nu = 2.0;
                res.x = trial;
                r = rt;
                cost = ct;
                accepted = true;
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        if (!accepted) break;
    }
    res.final_cost = cost;
    return res;
}

/// Solves over the entries `free` of x0 with every other entry held fixed.
/// The result's x is the full vector.
inline NllsResult nlls_solve_subset(const ResidualFn& f, const VecX& x0, const std::vector<int>& free,
                                    const Bounds& bounds = {}, const NllsOptions& opt = {}) {
    const auto n = static_cast<Eigen::Index>(free.size());
    auto expand = [&](const VecX& z) {
        VecX x = x0;
        for (Eigen::Index i = 0; i < n; ++i) x[free[i]] = z[i];
        return x;
    };
    auto restrict_to = [&](const VecX& v) {
        VecX z(n);
        for (Eigen::Index i = 0; i < n; ++i) z[i] = v[free[i]];
        return z;
    };
    Bounds sub;
    if (bounds.lower.size() == x0.size()) sub.lower = restrict_to(bounds.lower);
    if (bounds.upper.size() == x0.size()) sub.upper = restrict_to(bounds.upper);
    NllsResult res = nlls_solve([&](const VecX& z) { return f(expand(z)); }, restrict_to(x0), sub, opt);
    res.x = expand(res.x);
    return res;
}

}  // namespace connrsfm
