#pragma once

// Residual equations tying two views of a conformally deforming surface.
//
// Source quantities belong to frame i at pixel xbar, destination quantities
// to frame j at the warped pixel x = eta(xbar). With Lambda = diag(l, l, l^2)
// and J3 = diag(J, det J), exact conformal data satisfy, for c in {ubar, vbar}:
//
//   J3 Lambda Gamma_c(src) Lambda^-1 = (Gamma_u(dst) du/dc + Gamma_v(dst) dv/dc) J3 + dJ3/dc
//
// together with metric preservation
//
//   Jsrc^T Jsrc = l^2 J^T Jdst^T Jdst J,   Jsrc, Jdst = (e1, e2) of each view.
//
// Entries of the connection identity inside the upper-left 2x2 block and the
// (3,3) corner do not depend on l; the remaining four per identity do.

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <vector>

#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"
#include "connrsfm/spline_warp.hpp"

namespace connrsfm {

struct ConformalScale {
    double value = 1.0;

    bool valid() const { return value > 0.0 && std::isfinite(value); }
};

/// A depth jet anchored at the pixel it describes.
struct Observation {
    PixelPoint pixel;
    DepthJet jet;
};

inline constexpr int kMetricResiduals = 3;
inline constexpr int kConnectionResiduals = 18;
inline constexpr int kBlockResiduals = kMetricResiduals + kConnectionResiduals;

/// Row-major positions, inside one 3x3 identity, of the entries that do not
/// depend on the conformal scale, and of those that do.
inline constexpr std::array<int, 5> kScaleFreeEntries{0, 1, 3, 4, 8};
inline constexpr std::array<int, 4> kScaleSensitiveEntries{2, 5, 6, 7};

using Vec3d = Eigen::Matrix<double, 3, 1>;
using Vec18 = Eigen::Matrix<double, 18, 1>;
using Vec21 = Eigen::Matrix<double, 21, 1>;

/// Both sides of the two connection identities.
struct ConnectionSides {
    std::array<Mat3, 2> lhs;
    std::array<Mat3, 2> rhs;
};

namespace detail {

// J3 * (Lambda X Lambda^-1), computed block by block so that the scale-free
// entries never touch lambda.
inline Mat3 scaled_lhs(const Mat2& j, double det, const Mat3& x, double lambda) {
    Mat3 out;
    out.topLeftCorner<2, 2>() = j * x.topLeftCorner<2, 2>();
    out.topRightCorner<2, 1>() = j * (x.topRightCorner<2, 1>() / lambda);
    out.bottomLeftCorner<1, 2>() = det * (x.bottomLeftCorner<1, 2>() * lambda);
    out(2, 2) = det * x(2, 2);
    return out;
}

// (Gamma_u du/dc + Gamma_v dv/dc) J3 + dJ3/dc.
inline Mat3 identity_rhs(const ConnectionMatrix& dst, const WarpJet& w, int c) {
    const Vec2 rate = w.target_rate(c);
    const Mat3 m = dst.du() * rate.x() + dst.dv() * rate.y();
    const double det = w.det();
    Mat3 out;
    out.topLeftCorner<2, 2>() = m.topLeftCorner<2, 2>() * w.J + w.dJ3[c].topLeftCorner<2, 2>();
    out.topRightCorner<2, 1>() = m.topRightCorner<2, 1>() * det;
    out.bottomLeftCorner<1, 2>() = m.bottomLeftCorner<1, 2>() * w.J;
    out(2, 2) = m(2, 2) * det + w.dJ3[c](2, 2);
    return out;
}

inline Mat2 first_fundamental_form(const Observation& o) {
    const MovingFrame f = moving_frame(o.pixel, o.jet);
    Eigen::Matrix<double, 3, 2> jp;
    jp << f.e1, f.e2;
    return jp.transpose() * jp;
}

}  // namespace detail

inline ConnectionSides connection_sides(const ConnectionMatrix& src, const ConnectionMatrix& dst, const WarpJet& w,
                                        double lambda) {
    ConnectionSides s;
    for (int c = 0; c < 2; ++c) {
        s.lhs[c] = detail::scaled_lhs(w.J, w.det(), src.block(c), lambda);
        s.rhs[c] = detail::identity_rhs(dst, w, c);
    }
    return s;
}

/// Upper triangle (11, 12, 22) of Jsrc^T Jsrc - l^2 J^T Jdst^T Jdst J.
inline Vec3d metric_residuals(const Observation& src, const Observation& dst, const WarpJet& w,
                              ConformalScale lambda) {
    const Mat2 lhs = detail::first_fundamental_form(src);
    const Mat2 rhs = lambda.value * lambda.value * (w.J.transpose() * detail::first_fundamental_form(dst) * w.J);
    const Mat2 d = lhs - rhs;
    return {d(0, 0), d(0, 1), d(1, 1)};
}

inline Vec18 connection_residuals(const ConnectionMatrix& src, const ConnectionMatrix& dst, const WarpJet& w,
                                  ConformalScale lambda) {
    const ConnectionSides s = connection_sides(src, dst, w, lambda.value);
    Vec18 r;
    for (int c = 0; c < 2; ++c) {
        const Mat3 d = s.lhs[c] - s.rhs[c];
        for (int row = 0; row < 3; ++row)
            for (int col = 0; col < 3; ++col) r[9 * c + 3 * row + col] = d(row, col);
    }
    return r;
}

inline Vec18 connection_residuals(const Observation& src, const Observation& dst, const WarpJet& w,
                                  ConformalScale lambda) {
    return connection_residuals(connection(src.pixel, src.jet), connection(dst.pixel, dst.jet), w, lambda);
}

/// Entries of the connection identities that hold for any conformal scale.
/// `lambda` is accepted for interface symmetry and never read.
inline Eigen::Matrix<double, 10, 1> corollary1_invariants(const ConnectionMatrix& src, const ConnectionMatrix& dst,
                                                          const WarpJet& w, ConformalScale /*lambda*/ = {}) {
    Eigen::Matrix<double, 10, 1> r;
    for (int c = 0; c < 2; ++c) {
        const Mat3 m = src.block(c);
        const Mat2 lhs_ul = w.J * m.topLeftCorner<2, 2>();
        const double lhs_33 = w.det() * m(2, 2);
        const Mat3 rhs = detail::identity_rhs(dst, w, c);
        r[5 * c + 0] = lhs_ul(0, 0) - rhs(0, 0);
        r[5 * c + 1] = lhs_ul(0, 1) - rhs(0, 1);
        r[5 * c + 2] = lhs_ul(1, 0) - rhs(1, 0);
        r[5 * c + 3] = lhs_ul(1, 1) - rhs(1, 1);
        r[5 * c + 4] = lhs_33 - rhs(2, 2);
    }
    return r;
}

inline Eigen::Matrix<double, 10, 1> corollary1_invariants(const Observation& src, const Observation& dst,
                                                          const WarpJet& w, ConformalScale lambda = {}) {
    return corollary1_invariants(connection(src.pixel, src.jet), connection(dst.pixel, dst.jet), w, lambda);
}

/// Per-group divisors applied to a residual block: the metric triple and the
/// two connection identities.
struct ResidualScale {
    double metric = 1.0;
    double conn_u = 1.0;
    double conn_v = 1.0;
};

inline constexpr double kScaleFloor = 1e-6;

/// Group divisors equal to the Frobenius magnitude of each group's
/// left-hand side at the given state, plus 1e-6.
inline ResidualScale lhs_magnitude_scale(const Observation& src, const ConnectionMatrix& src_gamma, const WarpJet& w,
                                         ConformalScale lambda) {
    ResidualScale s;
    s.metric = detail::first_fundamental_form(src).norm() + kScaleFloor;
    s.conn_u = detail::scaled_lhs(w.J, w.det(), src_gamma.block(0), lambda.value).norm() + kScaleFloor;
    s.conn_v = detail::scaled_lhs(w.J, w.det(), src_gamma.block(1), lambda.value).norm() + kScaleFloor;
    return s;
}

struct EdgePointResidual {
    Vec21 values = Vec21::Zero();
    double weight = 1.0;

    auto metric() const { return values.head<3>(); }
    auto connection() const { return values.tail<18>(); }
};

/// Metric (3) followed by connection (18) residuals, each group divided by
/// its scale and the whole block multiplied by sqrt(omega).
inline EdgePointResidual residual_block(const Observation& src, const Observation& dst, const ConnectionMatrix& src_g,
                                        const ConnectionMatrix& dst_g, const WarpJet& w, ConformalScale lambda,
                                        double omega, const ResidualScale& scale = {}) {
    EdgePointResidual out;
    out.weight = omega;
    const double sw = std::sqrt(omega);
    if (sw == 0.0) return out;
    out.values.head<3>() = metric_residuals(src, dst, w, lambda) * (sw / scale.metric);
    const Vec18 c = connection_residuals(src_g, dst_g, w, lambda);
    out.values.segment<9>(3) = c.head<9>() * (sw / scale.conn_u);
    out.values.segment<9>(12) = c.tail<9>() * (sw / scale.conn_v);
    return out;
}

inline EdgePointResidual residual_block(const Observation& src, const Observation& dst, const WarpJet& w,
                                        ConformalScale lambda, double omega, const ResidualScale& scale = {}) {
    return residual_block(src, dst, connection(src.pixel, src.jet), connection(dst.pixel, dst.jet), w, lambda, omega,
                          scale);
}

inline constexpr double kScaleDenominatorTolerance = 1e-10;

/// The eight per-entry estimates of lambda obtained by solving each
/// scale-sensitive connection entry for lambda; degenerate ones are omitted.
inline std::vector<double> lambda_estimates_from_connections(const ConnectionMatrix& src, const ConnectionMatrix& dst,
                                                             const WarpJet& w) {
    std::vector<double> out;
    const double det = w.det();
    for (int c = 0; c < 2; ++c) {
        const Vec2 rate = w.target_rate(c);
        const Mat3 m = dst.du() * rate.x() + dst.dv() * rate.y();
        const Mat3 s = src.block(c);
        const Eigen::RowVector2d m21j = m.bottomLeftCorner<1, 2>() * w.J;
        const Eigen::RowVector2d s21 = s.bottomLeftCorner<1, 2>();
        const Vec2 js12 = w.J * s.topRightCorner<2, 1>();
        const Vec2 m12 = m.topRightCorner<2, 1>();
        for (int j = 0; j < 2; ++j) {
            const double den_a = det * s21[j];
            if (std::abs(den_a) >= kScaleDenominatorTolerance) out.push_back(m21j[j] / den_a);
            const double den_b = m12[j] * det;
            if (std::abs(den_b) >= kScaleDenominatorTolerance) out.push_back(js12[j] / den_b);
        }
    }
    return out;
}

/// Closed-form least-squares scale: the mean of the eight per-entry estimates.
inline ConformalScale closed_form_lambda(const ConnectionMatrix& src, const ConnectionMatrix& dst, const WarpJet& w) {
    const auto est = lambda_estimates_from_connections(src, dst, w);
    if (est.empty()) throw DegenerateGeometryError("closed_form_lambda: every denominator is below 1e-10");
    double sum = 0.0;
    for (double e : est) sum += e;
    return {sum / static_cast<double>(est.size())};
}

inline ConformalScale closed_form_lambda(const Observation& src, const Observation& dst, const WarpJet& w) {
    return closed_form_lambda(connection(src.pixel, src.jet), connection(dst.pixel, dst.jet), w);
}

/// Positive square roots of the three metric ratios, where defined.
inline std::vector<double> lambda_estimates_from_metric(const Observation& src, const Observation& dst,
                                                        const WarpJet& w) {
    const Mat2 lhs = detail::first_fundamental_form(src);
    const Mat2 rhs = w.J.transpose() * detail::first_fundamental_form(dst) * w.J;
    std::vector<double> out;
    const std::array<std::pair<int, int>, 3> idx{{{0, 0}, {0, 1}, {1, 1}}};
    for (auto [a, b] : idx) {
        if (std::abs(rhs(a, b)) < kScaleDenominatorTolerance) continue;
        const double r = lhs(a, b) / rhs(a, b);
        if (r > 0.0 && std::isfinite(r)) out.push_back(std::sqrt(r));
    }
    return out;
}

inline constexpr double kMinLambda = 1e-6;

/// Initial scale from the three metric ratios and the eight connection
/// estimates, averaged geometrically. With first-order-only jets the
/// lower-left and upper-right connection estimates err by reciprocal factors,
/// so their log-average stays unbiased where the arithmetic mean does not.
inline ConformalScale prestep_lambda(const Observation& src, const Observation& dst, const WarpJet& w) {
    auto est = lambda_estimates_from_metric(src, dst, w);
    try {
        const auto more =
            lambda_estimates_from_connections(connection(src.pixel, src.jet), connection(dst.pixel, dst.jet), w);
        est.insert(est.end(), more.begin(), more.end());
    } catch (const DegenerateGeometryError&) {
        // metric estimates alone are still usable
    }
    double log_sum = 0.0;
    int used = 0;
    for (double e : est) {
        if (e > 0.0 && std::isfinite(e)) {
            log_sum += std::log(e);
            ++used;
        }
    }
    if (used == 0) throw DegenerateGeometryError("prestep_lambda: all 11 scale estimates are degenerate");
    return {std::max(std::exp(log_sum / used), kMinLambda)};
}

}  // namespace connrsfm
