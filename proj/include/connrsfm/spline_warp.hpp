#pragma once

// Smooth pairwise image warps fitted from sparse correspondences.
//
// A warp maps source pixels (ubar, vbar) of frame i to pixels (u, v) of frame
// j. It is represented by two bicubic spline surfaces, one per target
// coordinate, fitted by least squares with bending-energy regularization.

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "connrsfm/bspline.hpp"
#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"

namespace connrsfm {

inline constexpr int kMinCorrespondences = 16;
inline constexpr double kWarpDomainMargin = 0.05;
inline constexpr double kMinWarpDeterminant = 1e-8;

struct Correspondence {
    PixelPoint source;
    PixelPoint target;
};

struct CorrespondenceSet {
    int frame_i = 0;
    int frame_j = 0;
    std::vector<Correspondence> pairs;

    CorrespondenceSet swapped() const {
        CorrespondenceSet s{frame_j, frame_i, {}};
        s.pairs.reserve(pairs.size());
        for (const auto& c : pairs) s.pairs.push_back({c.target, c.source});
        return s;
    }
};

/// Control-grid size per axis; 0 selects it from the sample count.
struct SplineGrid {
    int nu = 0;
    int nv = 0;
    Roughness roughness = Roughness::ThirdOrder;

    bool automatic() const { return nu <= 0 || nv <= 0; }
};

inline constexpr int kMaxAutoSpans = 9;

/// Fixes an automatic grid for n samples: about sqrt(n) / 2 knot intervals
/// per axis (8 x 8 control points for 100 samples, 6 x 6 for 25), so every
/// cell of a well-spread sample holds a few samples.
inline SplineGrid resolve_grid(SplineGrid g, std::size_t n) {
    if (!g.automatic()) return g;
    const int spans = std::clamp(static_cast<int>(std::lround(0.5 * std::sqrt(static_cast<double>(n)))), 1, kMaxAutoSpans);
    g.nu = g.nv = spans + 3;
    return g;
}

/// Smoothing weight used when none is given: 1e-11 per sample. It is
/// proportional to the number of samples, so the balance
/// between data and regularizer does not depend on the sample count. The
/// connection residuals need accurate second derivatives of the warp, which a
/// stronger regularizer flattens.
inline constexpr double kSmoothingPerSample = 1e-11;

inline double default_smoothing(std::size_t n_pairs) { return kSmoothingPerSample * static_cast<double>(n_pairs); }

struct WarpModel {
    SplineSurface u_target;
    SplineSurface v_target;
    SplineGrid grid;
    double smoothing = 0.0;
    double residual_rms = 0.0;

    const DomainBox& box() const { return u_target.box(); }
    bool contains(const PixelPoint& p) const { return box().contains(p); }

    PixelPoint operator()(const PixelPoint& p) const {
        return {u_target.evaluate(p).value, v_target.evaluate(p).value};
    }

    Mat2 jacobian(const PixelPoint& p) const {
        const auto a = u_target.evaluate(p);
        const auto b = v_target.evaluate(p);
        Mat2 j;
        j << a.du, a.dv, b.du, b.dv;
        return j;
    }
};

/// Scalar counterpart of WarpModel, used for depth surfaces.
struct ScalarModel {
    SplineSurface surface;
    SplineGrid grid;
    double smoothing = 0.0;
    double residual_rms = 0.0;
};

/// Warp value and derivatives at one source pixel, as consumed by the
/// connection-invariance equations.
struct WarpJet {
    PixelPoint warped;
    Mat2 J = Mat2::Identity();
    Mat3 J3 = Mat3::Identity();
    /// dJ3/dubar and dJ3/dvbar.
    std::array<Mat3, 2> dJ3{Mat3::Zero(), Mat3::Zero()};
    /// (du/dubar, dv/dubar, du/dvbar, dv/dvbar): how the target pixel moves
    /// along each source axis.
    std::array<double, 4> du_dbar{1.0, 0.0, 0.0, 1.0};

    double det() const { return J3(2, 2); }
    /// Derivative of the target pixel along source axis c, as (du, dv).
    Vec2 target_rate(int c) const { return {du_dbar[2 * c], du_dbar[2 * c + 1]}; }
};

/// Builds a WarpJet from the warp value, Jacobian and the Jacobian's partials
/// along the two source axes.
inline WarpJet make_warp_jet(const PixelPoint& warped, const Mat2& j, const Mat2& dj_du, const Mat2& dj_dv) {
    const double det = j.determinant();
    if (!(std::abs(det) >= kMinWarpDeterminant)) {
        throw DegenerateGeometryError("warp Jacobian is folded or degenerate (|det J| < 1e-8)");
    }
    WarpJet w;
    w.warped = warped;
    w.J = j;
    w.J3.setZero();
    w.J3.topLeftCorner<2, 2>() = j;
    w.J3(2, 2) = det;
    const std::array<Mat2, 2> dj{dj_du, dj_dv};
    for (int c = 0; c < 2; ++c) {
        const Mat2& d = dj[c];
        w.dJ3[c].setZero();
        w.dJ3[c].topLeftCorner<2, 2>() = d;
        w.dJ3[c](2, 2) = d(0, 0) * j(1, 1) + j(0, 0) * d(1, 1) - d(0, 1) * j(1, 0) - j(0, 1) * d(1, 0);
    }
    w.du_dbar = {j(0, 0), j(1, 0), j(0, 1), j(1, 1)};
    return w;
}

inline void validate_correspondences(const CorrespondenceSet& c) {
    if (static_cast<int>(c.pairs.size()) < kMinCorrespondences) {
        throw IllPosedFitError("warp fit needs at least 16 correspondences, got " + std::to_string(c.pairs.size()));
    }
    std::vector<std::pair<double, double>> src;
    src.reserve(c.pairs.size());
    for (const auto& p : c.pairs) {
        if (!p.source.finite() || !p.target.finite()) throw DomainError("non-finite correspondence");
        src.emplace_back(p.source.u, p.source.v);
    }
    std::sort(src.begin(), src.end());
    if (std::adjacent_find(src.begin(), src.end()) != src.end()) {
        throw DomainError("duplicate source pixel in correspondence set");
    }
}

/// Fits the warp source -> target. A negative smoothing selects the default.
inline WarpModel fit_warp(const CorrespondenceSet& c, SplineGrid grid = {}, double smoothing = -1.0) {
    validate_correspondences(c);
    if (smoothing < 0.0) smoothing = default_smoothing(c.pairs.size());
    grid = resolve_grid(grid, c.pairs.size());
    std::vector<PixelPoint> src;
    src.reserve(c.pairs.size());
    for (const auto& p : c.pairs) src.push_back(p.source);
    SplineFitter fitter(DomainBox::around(src, kWarpDomainMargin), grid.nu, grid.nv, 2, grid.roughness);
    for (const auto& p : c.pairs) {
        const std::array<double, 2> t{p.target.u, p.target.v};
        fitter.add(p.source, SplineFitter::Functional::Value, t);
    }
    auto r = fitter.solve(smoothing);
    return WarpModel{std::move(r.channels[0]), std::move(r.channels[1]), grid, smoothing, r.residual_rms};
}

/// Warp in both directions; the inverse is fitted from the swapped pairs.
struct WarpPair {
    WarpModel forward;
    WarpModel inverse;
};

inline WarpPair fit_warp_pair(const CorrespondenceSet& c, SplineGrid grid = {}, double smoothing = -1.0) {
    return {fit_warp(c, grid, smoothing), fit_warp(c.swapped(), grid, smoothing)};
}

inline WarpJet warp_jet(const WarpModel& m, const WarpModel& inverse, const PixelPoint& p) {
    if (!m.contains(p)) throw DomainError("warp_jet: source pixel outside the fitted warp domain");
    const auto a = m.u_target.evaluate(p);
    const auto b = m.v_target.evaluate(p);
    const PixelPoint q{a.value, b.value};
    if (!inverse.contains(q)) throw DomainError("warp_jet: warped pixel outside the inverse warp domain");
    Mat2 j, dju, djv;
    j << a.du, a.dv, b.du, b.dv;
    dju << a.duu, a.duv, b.duu, b.duv;
    djv << a.duv, a.dvv, b.duv, b.dvv;
    return make_warp_jet(q, j, dju, djv);
}

struct ScalarSample {
    PixelPoint pixel;
    double value = 0.0;
};

inline ScalarModel fit_scalar_surface(std::span<const ScalarSample> samples, SplineGrid grid = {},
                                      double smoothing = -1.0) {
    if (static_cast<int>(samples.size()) < kMinCorrespondences) {
        throw IllPosedFitError("scalar surface fit needs at least 16 samples");
    }
    if (smoothing < 0.0) smoothing = default_smoothing(samples.size());
    grid = resolve_grid(grid, samples.size());
    std::vector<PixelPoint> pts;
    pts.reserve(samples.size());
    for (const auto& s : samples) pts.push_back(s.pixel);
    SplineFitter fitter(DomainBox::around(pts, kWarpDomainMargin), grid.nu, grid.nv, 1, grid.roughness);
    for (const auto& s : samples) {
        const std::array<double, 1> t{s.value};
        fitter.add(s.pixel, SplineFitter::Functional::Value, t);
    }
    auto r = fitter.solve(smoothing);
    return ScalarModel{std::move(r.channels[0]), grid, smoothing, r.residual_rms};
}

}  // namespace connrsfm
