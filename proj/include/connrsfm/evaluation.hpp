#pragma once

// Similarity alignment and reconstruction error metrics.

#include <Eigen/Core>
#include <Eigen/SVD>
#include <cmath>
#include <iostream>
#include <numeric>
#include <span>
#include <vector>

#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"

namespace connrsfm {

struct Alignment {
    Mat3 rotation = Mat3::Identity();
    double scale = 1.0;
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
};

/// Closed-form similarity minimizing sum |s R p_i + t - g_i|^2 with a proper
/// rotation (Umeyama's SVD solution of the absolute-orientation problem).
inline Alignment absor_align(std::span<const Vec3> recon, std::span<const Vec3> gt) {
    if (recon.size() != gt.size()) throw DomainError("absor_align: point lists differ in length");
    if (recon.size() < 3) throw DomainError("absor_align: need at least 3 point pairs");
    const double n = static_cast<double>(recon.size());
    Vec3 mp = Vec3::Zero(), mg = Vec3::Zero();
    for (std::size_t k = 0; k < recon.size(); ++k) {
        mp += recon[k];
        mg += gt[k];
    }
    mp /= n;
    mg /= n;
    Mat3 cov = Mat3::Zero();
    double var_p = 0.0;
    for (std::size_t k = 0; k < recon.size(); ++k) {
        const Vec3 a = recon[k] - mp;
        cov += (gt[k] - mg) * a.transpose();
        var_p += a.squaredNorm();
    }
    cov /= n;
    var_p /= n;
    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    if (!(var_p > 0.0) || sv[1] <= 1e-12 * sv[0]) {
        throw DegenerateGeometryError("absor_align: degenerate (collinear or coincident) configuration");
    }
    Mat3 d = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    Alignment a;
    a.rotation = svd.matrixU() * d * svd.matrixV().transpose();
    a.scale = (sv.asDiagonal() * d).trace() / var_p;
    a.translation = mg - a.scale * (a.rotation * mp);
    return a;
}

/// 100 * RMSE(aligned recon, gt) / RMS distance of gt to its centroid.
inline double percent_3d_error(std::span<const Vec3> recon, std::span<const Vec3> gt) {
    const Alignment a = absor_align(recon, gt);
    Vec3 c = Vec3::Zero();
    for (const auto& g : gt) c += g;
    c /= static_cast<double>(gt.size());
    double se = 0.0, spread = 0.0;
    for (std::size_t k = 0; k < gt.size(); ++k) {
        se += (a.apply(recon[k]) - gt[k]).squaredNorm();
        spread += (gt[k] - c).squaredNorm();
    }
    return 100.0 * std::sqrt(se / spread);
}

/// Mean angle in degrees between matched normals, ignoring orientation sign.
inline double shape_error(std::span<const Vec3> normals, std::span<const Vec3> gt_normals) {
    if (normals.size() != gt_normals.size()) throw DomainError("shape_error: normal lists differ in length");
    if (normals.empty()) throw DomainError("shape_error: no normals");
    double acc = 0.0;
    bool warned = false;
    for (std::size_t k = 0; k < normals.size(); ++k) {
        Vec3 a = normals[k], b = gt_normals[k];
        if (!warned && (std::abs(a.norm() - 1.0) > 1e-9 || std::abs(b.norm() - 1.0) > 1e-9)) {
            std::cerr << "warning: shape_error renormalizing non-unit normals\n";
            warned = true;
        }
        a.normalize();
        b.normalize();
        // atan2 of |cross| and |dot| is accurate at small angles, unlike acos.
        acc += std::atan2(a.cross(b).norm(), std::abs(a.dot(b)));
    }
    return acc / static_cast<double>(normals.size()) * 180.0 / 3.14159265358979323846;
}

struct FrameMetrics {
    int frame = 0;
    int points = 0;
    double pct3d = 0.0;
    double shape_deg = 0.0;
};

}  // namespace connrsfm
