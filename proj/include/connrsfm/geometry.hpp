#pragma once

// Perspective projection, image embedding, moving frames and connections.
//
// All pixels are calibration-normalized retinal coordinates. A surface seen
// by the camera is parameterized by its depth function beta(u, v) through the
// embedding Phi(u, v) = beta(u, v) * (u, v, 1).

#include <Eigen/Core>
#include <Eigen/LU>
#include <cmath>
#include <limits>
#include <string>

#include "connrsfm/errors.hpp"

namespace connrsfm {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat36 = Eigen::Matrix<double, 3, 6>;

struct PixelPoint {
    double u = 0.0;
    double v = 0.0;

    Vec2 vec() const { return {u, v}; }
    bool finite() const { return std::isfinite(u) && std::isfinite(v); }
};

/// Depth and its normalized derivatives at one pixel:
/// y1 = beta_u / beta, y2 = beta_v / beta, y11 = beta_uu / beta,
/// y12 = beta_uv / beta, y22 = beta_vv / beta.
struct DepthJet {
    double beta = 1.0;
    double y1 = 0.0;
    double y2 = 0.0;
    double y11 = 0.0;
    double y12 = 0.0;
    double y22 = 0.0;

    bool valid() const {
        return beta > 0.0 && std::isfinite(beta) && std::isfinite(y1) && std::isfinite(y2) &&
               std::isfinite(y11) && std::isfinite(y12) && std::isfinite(y22);
    }

    DepthJet first_order_only() const { return {beta, y1, y2, 0.0, 0.0, 0.0}; }
};

/// Raw (un-normalized) depth derivatives.
struct DepthDerivatives {
    double b, b1, b2, b11, b12, b22;
};

inline DepthDerivatives raw_derivatives(const DepthJet& j) {
    return {j.beta, j.beta * j.y1, j.beta * j.y2, j.beta * j.y11, j.beta * j.y12, j.beta * j.y22};
}

struct MovingFrame {
    Vec3 e1, e2, e3;

    /// Columns (e1, e2, e3).
    Mat3 matrix() const {
        Mat3 m;
        m << e1, e2, e3;
        return m;
    }
};

/// Connection coefficients, stored as two adjacent 3x3 blocks: column j of
/// block c holds the coordinates of d(e_j)/dc in the frame (e1, e2, e3).
struct ConnectionMatrix {
    Mat36 gamma = Mat36::Zero();

    Mat3 block(int c) const { return gamma.block<3, 3>(0, 3 * c); }
    Mat3 du() const { return block(0); }
    Mat3 dv() const { return block(1); }
};

inline void require_valid(const DepthJet& jet, const char* what) {
    if (!jet.valid()) {
        throw DomainError(std::string(what) + ": depth jet must have beta > 0 and finite entries");
    }
}

inline PixelPoint project(const Vec3& z) {
    if (!(z.z() > 0.0)) {
        throw DomainError("project: point is not in front of the camera (z <= 0)");
    }
    return {z.x() / z.z(), z.y() / z.z()};
}

inline Vec3 embed(const PixelPoint& p, double beta) {
    if (!(beta > 0.0)) {
        throw DomainError("embed: depth must be positive");
    }
    return beta * Vec3(p.u, p.v, 1.0);
}

inline MovingFrame moving_frame(const PixelPoint& p, const DepthJet& jet) {
    const double b = jet.beta;
    MovingFrame f;
    f.e1 = b * Vec3(jet.y1 * p.u + 1.0, jet.y1 * p.v, jet.y1);
    f.e2 = b * Vec3(jet.y2 * p.u, jet.y2 * p.v + 1.0, jet.y2);
    f.e3 = b * b * Vec3(-jet.y1, -jet.y2, jet.y1 * p.u + jet.y2 * p.v + 1.0);
    return f;
}

/// Analytic partial derivatives of the moving frame: the left 3x3 block holds
/// (de1/du, de2/du, de3/du) as columns, the right block the v-derivatives.
inline Mat36 frame_derivatives(const PixelPoint& p, const DepthJet& jet) {
    const auto [b, b1, b2, b11, b12, b22] = raw_derivatives(jet);
    const double u = p.u;
    const double v = p.v;
    const double t1 = 3.0 * b * b1 + u * b1 * b1 + u * b * b11 + v * b12 * b + v * b1 * b2;
    const double t2 = u * b2 * b1 + u * b * b12 + 3.0 * b * b2 + v * b2 * b2 + v * b * b22;
    Mat36 d;
    d << b11 * u + 2.0 * b1, b2 + b12 * u, -b1 * b1 - b * b11, b12 * u + b2, b22 * u, -b * b12 - b1 * b2,
        b11 * v, b12 * v + b1, -b1 * b2 - b * b12, b12 * v + b1, b22 * v + 2.0 * b2, -b * b22 - b2 * b2,
        b11, b12, t1, b12, b22, t2;
    return d;
}

/// Largest acceptable condition number of the frame matrix before the
/// connection is considered degenerate.
inline constexpr double kMaxFrameCondition = 1e10;

/// Frobenius-norm condition number; bounds the spectral one within a factor 3.
inline double frobenius_condition(const Mat3& a) {
    const double det = a.determinant();
    if (det == 0.0 || !std::isfinite(det)) return std::numeric_limits<double>::infinity();
    return a.norm() * a.inverse().norm();
}

/// Connection of the image embedding at pixel p: Gamma = E^{-1} [dE/du | dE/dv].
inline ConnectionMatrix connection(const PixelPoint& p, const DepthJet& jet) {
    const Mat3 a = moving_frame(p, jet).matrix();
    const double det = a.determinant();
    if (det == 0.0 || !std::isfinite(det)) {
        throw DegenerateGeometryError("connection: singular moving frame");
    }
    const Mat3 inv = a.inverse();
    if (a.norm() * inv.norm() > kMaxFrameCondition) {
        throw DegenerateGeometryError("connection: moving frame condition number above 1e10");
    }
    ConnectionMatrix c;
    c.gamma = inv * frame_derivatives(p, jet);
    return c;
}

}  // namespace connrsfm
