#pragma once

// Depth up to scale from normalized depth gradients, and surface normals.
//
// Since y1 = d(ln beta)/du and y2 = d(ln beta)/dv, the log-depth L = ln beta
// is recovered by fitting a smooth spline whose gradient matches (y1, y2) at
// the samples, with robust reweighting against grossly wrong gradients. The
// additive constant of L is the monocular scale ambiguity; it is fixed by
// requiring zero mean log-depth over the samples.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "connrsfm/bspline.hpp"
#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"
#include "connrsfm/spline_warp.hpp"

namespace connrsfm {

struct NormalSample {
    PixelPoint pixel;
    Vec3 normal;
};

using NormalField = std::vector<NormalSample>;

/// Unit normal e3 / |e3| of the image embedding at p.
inline Vec3 normal_from_jet(const PixelPoint& p, const DepthJet& jet) {
    require_valid(jet, "normal_from_jet");
    const Vec3 e3 = moving_frame(p, jet).e3;
    const double n = e3.norm();
    if (n < 1e-12) throw DegenerateGeometryError("normal_from_jet: vanishing frame normal");
    return e3 / n;
}

struct GradientSample {
    PixelPoint pixel;
    double y1 = 0.0;
    double y2 = 0.0;
};

struct LogDepthFit {
    std::vector<double> beta;  // one per sample, mean log-depth zero
    ScalarModel log_depth;     // fitted L; its constant is only softly pinned
    double gradient_rms = 0.0;
};

/// Weight of the constraint pinning the mean of L; only the constant mode is
/// affected, so any positive value gives the same gradients.
inline constexpr double kGaugeWeight = 1.0;

/// Cauchy loss tuning constant (95% efficiency under Gaussian mismatch).
inline constexpr double kCauchyTuning = 2.3849;
/// Below this mismatch scale the field is treated as exactly integrable.
inline constexpr double kMinRobustScale = 1e-9;
inline constexpr int kRobustIterations = 5;

inline LogDepthFit integrate_log_depth(std::span<const GradientSample> samples, SplineGrid grid = {},
                                       double smoothing = -1.0, int robust_iterations = kRobustIterations) {
    if (samples.size() < 3) throw IllPosedFitError("integrate_log_depth: need at least 3 samples");
    std::vector<PixelPoint> pts;
    pts.reserve(samples.size());
    for (const auto& s : samples) {
        if (!s.pixel.finite() || !std::isfinite(s.y1) || !std::isfinite(s.y2)) {
            throw DomainError("integrate_log_depth: non-finite sample");
        }
        pts.push_back(s.pixel);
    }
    {
        // Non-collinearity: the centered sample cloud must span the plane.
        Eigen::Vector2d mean = Eigen::Vector2d::Zero();
        for (const auto& p : pts) mean += p.vec();
        mean /= static_cast<double>(pts.size());
        Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
        for (const auto& p : pts) cov += (p.vec() - mean) * (p.vec() - mean).transpose();
        const double tr = cov.trace();
        if (!(tr > 0.0) || cov.determinant() <= 1e-12 * tr * tr) {
            throw IllPosedFitError("integrate_log_depth: samples are collinear");
        }
    }
    if (smoothing < 0.0) smoothing = default_smoothing(samples.size());
    grid = resolve_grid(grid, samples.size());
    const DomainBox box = DomainBox::around(pts, kWarpDomainMargin);
    std::vector<double> weight(samples.size(), 1.0);
    auto fit_once = [&] {
        SplineFitter fitter(box, grid.nu, grid.nv, 1, grid.roughness);
        for (std::size_t k = 0; k < samples.size(); ++k) {
            const std::array<double, 1> gu{samples[k].y1};
            const std::array<double, 1> gv{samples[k].y2};
            fitter.add(samples[k].pixel, SplineFitter::Functional::DU, gu, weight[k]);
            fitter.add(samples[k].pixel, SplineFitter::Functional::DV, gv, weight[k]);
        }
        fitter.add_mean_constraint(pts, kGaugeWeight);
        return fitter.solve(smoothing);
    };
    auto r = fit_once();
    // Iteratively reweighted refits with Cauchy weights on the gradient
    // mismatch, scaled by its median absolute value: a few grossly wrong
    // gradients then no longer bend the depth of their neighbours.
    std::vector<double> mismatch(samples.size());
    for (int it = 0; it < robust_iterations; ++it) {
        for (std::size_t k = 0; k < samples.size(); ++k) {
            const auto e = r.channels[0].evaluate(samples[k].pixel);
            mismatch[k] = std::hypot(e.du - samples[k].y1, e.dv - samples[k].y2);
        }
        std::vector<double> sorted = mismatch;
        auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
        std::nth_element(sorted.begin(), mid, sorted.end());
        const double scale = kCauchyTuning * 1.4826 * *mid;
        if (!(scale > kMinRobustScale)) break;
        for (std::size_t k = 0; k < samples.size(); ++k) {
            const double q = mismatch[k] / scale;
            weight[k] = 1.0 / (1.0 + q * q);
        }
        r = fit_once();
    }
    LogDepthFit out;
    out.gradient_rms = r.residual_rms;
    std::vector<double> logs;
    logs.reserve(samples.size());
    double mean = 0.0;
    for (const auto& p : pts) {
        logs.push_back(r.channels[0].evaluate(p).value);
        mean += logs.back();
    }
    mean /= static_cast<double>(logs.size());
    out.beta.reserve(logs.size());
    for (double l : logs) out.beta.push_back(std::exp(l - mean));
    out.log_depth = ScalarModel{std::move(r.channels[0]), grid, smoothing, r.residual_rms};
    return out;
}

}  // namespace connrsfm
