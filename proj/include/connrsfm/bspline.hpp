#pragma once

// Uniform bicubic tensor-product B-spline surfaces over a rectangular pixel
// domain, with exact first and second derivatives, and a regularized
// least-squares fitter shared by the warp and depth-integration code.
//
// A grid of n control points per axis spans n - 3 uniform knot intervals over
// the domain, so the basis reproduces every bivariate cubic exactly (and in
// particular every affine map).

#include <Eigen/Core>
#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"

namespace connrsfm {

struct DomainBox {
    double u0 = 0.0, u1 = 1.0, v0 = 0.0, v1 = 1.0;

    bool contains(const PixelPoint& p) const { return p.u >= u0 && p.u <= u1 && p.v >= v0 && p.v <= v1; }
    double width() const { return u1 - u0; }
    double height() const { return v1 - v0; }

    /// Bounding box of the points grown by `margin` times its extent on every side.
    static DomainBox around(std::span<const PixelPoint> pts, double margin) {
        if (pts.empty()) throw DomainError("DomainBox::around: no points");
        DomainBox b{pts[0].u, pts[0].u, pts[0].v, pts[0].v};
        for (const auto& p : pts) {
            b.u0 = std::min(b.u0, p.u);
            b.u1 = std::max(b.u1, p.u);
            b.v0 = std::min(b.v0, p.v);
            b.v1 = std::max(b.v1, p.v);
        }
        const double mu = std::max(margin * (b.u1 - b.u0), 1e-9);
        const double mv = std::max(margin * (b.v1 - b.v0), 1e-9);
        b.u0 -= mu;
        b.u1 += mu;
        b.v0 -= mv;
        b.v1 += mv;
        return b;
    }
};

/// Value, gradient and Hessian of a scalar surface at one pixel.
struct SurfaceSample {
    double value = 0.0;
    double du = 0.0, dv = 0.0;
    double duu = 0.0, duv = 0.0, dvv = 0.0;
};

namespace detail {

/// The four non-zero uniform cubic basis functions at parameter t in [0, 1]
/// for a grid of n control points, with derivatives in t.
struct BasisSpan {
    int first = 0;
    std::array<double, 4> b{}, d1{}, d2{}, d3{};
};

inline BasisSpan cubic_basis(double t, int n) {
    const int spans = n - 3;
    double x = t * spans;
    int k = static_cast<int>(std::floor(x));
    k = std::clamp(k, 0, spans - 1);
    const double s = x - k;
    const double s2 = s * s;
    const double s3 = s2 * s;
    const double r = 1.0 - s;
    BasisSpan out;
    out.first = k;
    out.b = {r * r * r / 6.0, (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0, (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
             s3 / 6.0};
    const double sc = spans;
    out.d1 = {-0.5 * r * r * sc, (1.5 * s2 - 2.0 * s) * sc, (-1.5 * s2 + s + 0.5) * sc, 0.5 * s2 * sc};
    const double sc2 = sc * sc;
    out.d2 = {r * sc2, (3.0 * s - 2.0) * sc2, (-3.0 * s + 1.0) * sc2, s * sc2};
    const double sc3 = sc2 * sc;
    out.d3 = {-sc3, 3.0 * sc3, -3.0 * sc3, sc3};
    return out;
}

}  // namespace detail

/// A scalar bicubic spline surface over a pixel box.
class SplineSurface {
public:
    SplineSurface() = default;
    SplineSurface(DomainBox box, int nu, int nv, Eigen::VectorXd coeffs)
        : box_(box), nu_(nu), nv_(nv), coeffs_(std::move(coeffs)) {}

    const DomainBox& box() const { return box_; }
    int nu() const { return nu_; }
    int nv() const { return nv_; }
    const Eigen::VectorXd& coefficients() const { return coeffs_; }

    SurfaceSample evaluate(const PixelPoint& p) const {
        if (!box_.contains(p)) {
            throw DomainError("spline evaluated outside its fitted domain at (" + std::to_string(p.u) + ", " +
                              std::to_string(p.v) + ")");
        }
        return evaluate_unchecked(p);
    }

    SurfaceSample evaluate_unchecked(const PixelPoint& p) const {
        const auto bu = detail::cubic_basis((p.u - box_.u0) / box_.width(), nu_);
        const auto bv = detail::cubic_basis((p.v - box_.v0) / box_.height(), nv_);
        const double su = 1.0 / box_.width();
        const double sv = 1.0 / box_.height();
        SurfaceSample s;
        for (int a = 0; a < 4; ++a) {
            for (int b = 0; b < 4; ++b) {
                const double c = coeffs_[index(bu.first + a, bv.first + b)];
                s.value += c * bu.b[a] * bv.b[b];
                s.du += c * bu.d1[a] * bv.b[b];
                s.dv += c * bu.b[a] * bv.d1[b];
                s.duu += c * bu.d2[a] * bv.b[b];
                s.duv += c * bu.d1[a] * bv.d1[b];
                s.dvv += c * bu.b[a] * bv.d2[b];
            }
        }
        s.du *= su;
        s.dv *= sv;
        s.duu *= su * su;
        s.duv *= su * sv;
        s.dvv *= sv * sv;
        return s;
    }

    int index(int i, int j) const { return i * nv_ + j; }

private:
    DomainBox box_;
    int nu_ = 4, nv_ = 4;
    Eigen::VectorXd coeffs_;
};

/// Weighted regularized least squares over the control coefficients of a
/// spline grid. Each observation is a linear functional of the surface
/// (value or a first derivative at a pixel) with one target per channel.
/// The regularizer is a roughness energy measured in the unit square the
/// domain is mapped to: either the thin-plate bending energy (second
/// derivatives, null space: affine functions) or its third-order analogue
/// (null space: quadratics), which does not bias curvature toward zero.
enum class Roughness { SecondOrder, ThirdOrder };

class SplineFitter {
public:
    enum class Functional { Value, DU, DV };

    SplineFitter(DomainBox box, int nu, int nv, int channels, Roughness roughness = Roughness::SecondOrder)
        : box_(box), nu_(nu), nv_(nv), channels_(channels), roughness_(roughness) {
        if (nu < 4 || nv < 4) throw DomainError("spline grid must be at least 4x4");
        if (!(box.width() > 0.0) || !(box.height() > 0.0)) throw DomainError("spline domain has zero extent");
        const int n = nu * nv;
        normal_ = Eigen::MatrixXd::Zero(n, n);
        rhs_ = Eigen::MatrixXd::Zero(n, channels);
    }

    int size() const { return nu_ * nv_; }

    void add(const PixelPoint& p, Functional f, std::span<const double> targets, double weight = 1.0) {
        if (!box_.contains(p)) throw DomainError("spline fit observation outside the domain");
        Row row = make_row(p, f);
        for (int a = 0; a < 16; ++a) {
            for (int b = 0; b < 16; ++b) normal_(row.idx[a], row.idx[b]) += weight * row.w[a] * row.w[b];
            for (int c = 0; c < channels_; ++c) rhs_(row.idx[a], c) += weight * row.w[a] * targets[c];
        }
        row.weight = weight;
        row.targets.assign(targets.begin(), targets.end());
        rows_.push_back(std::move(row));
    }

    /// Adds weight * (mean of the surface value over `pts`)^2 to the objective.
    void add_mean_constraint(std::span<const PixelPoint> pts, double weight) {
        const int n = size();
        Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
        for (const auto& p : pts) {
            Row r = make_row(p, Functional::Value);
            for (int k = 0; k < 16; ++k) a[r.idx[k]] += r.w[k] / static_cast<double>(pts.size());
        }
        normal_ += weight * a * a.transpose();
    }

    struct Result {
        std::vector<SplineSurface> channels;
        double residual_rms = 0.0;
    };

    Result solve(double smoothing) const {
        if (smoothing < 0.0) throw DomainError("smoothing weight must be non-negative");
        Eigen::MatrixXd n = normal_;
        if (smoothing > 0.0) n += smoothing * bending_matrix();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(n, Eigen::EigenvaluesOnly);
        const double lo = eig.eigenvalues().minCoeff();
        const double hi = eig.eigenvalues().maxCoeff();
        if (!(hi > 0.0) || lo <= hi * 1e-13) {
            throw IllPosedFitError("rank-deficient spline fit (" + std::to_string(rows_.size()) +
                                   " observations for a " + std::to_string(nu_) + "x" + std::to_string(nv_) +
                                   " grid); increase the smoothing weight or reduce the grid");
        }
        const Eigen::MatrixXd sol = n.ldlt().solve(rhs_);
        Result out;
        for (int c = 0; c < channels_; ++c) out.channels.emplace_back(box_, nu_, nv_, sol.col(c));
        double ss = 0.0;
        double wsum = 0.0;
        for (const auto& r : rows_) {
            for (int c = 0; c < channels_; ++c) {
                double pred = 0.0;
                for (int k = 0; k < 16; ++k) pred += r.w[k] * sol(r.idx[k], c);
                ss += r.weight * (pred - r.targets[c]) * (pred - r.targets[c]);
                wsum += r.weight;
            }
        }
        out.residual_rms = wsum > 0.0 ? std::sqrt(ss / wsum) : 0.0;
        return out;
    }

private:
    struct Row {
        std::array<int, 16> idx{};
        std::array<double, 16> w{};
        double weight = 1.0;
        std::vector<double> targets;
    };

    Row make_row(const PixelPoint& p, Functional f) const {
        const auto bu = detail::cubic_basis((p.u - box_.u0) / box_.width(), nu_);
        const auto bv = detail::cubic_basis((p.v - box_.v0) / box_.height(), nv_);
        Row r;
        int k = 0;
        for (int a = 0; a < 4; ++a) {
            for (int b = 0; b < 4; ++b, ++k) {
                r.idx[k] = (bu.first + a) * nv_ + bv.first + b;
                switch (f) {
                    case Functional::Value: r.w[k] = bu.b[a] * bv.b[b]; break;
                    case Functional::DU: r.w[k] = bu.d1[a] * bv.b[b] / box_.width(); break;
                    case Functional::DV: r.w[k] = bu.b[a] * bv.d1[b] / box_.height(); break;
                }
            }
        }
        return r;
    }

    // Integral over the unit square of the roughness energy, exact by 4-point
    // Gauss-Legendre quadrature on every knot cell:
    //   second order: f_ss^2 + 2 f_st^2 + f_tt^2
    //   third order:  f_sss^2 + 3 f_sst^2 + 3 f_stt^2 + f_ttt^2
    Eigen::MatrixXd bending_matrix() const {
        static constexpr std::array<double, 4> gx{-0.8611363115940526, -0.3399810435848563, 0.3399810435848563,
                                                  0.8611363115940526};
        static constexpr std::array<double, 4> gw{0.3478548451374538, 0.6521451548625461, 0.6521451548625461,
                                                  0.3478548451374538};
        const bool third = roughness_ == Roughness::ThirdOrder;
        const std::array<double, 4> binom = third ? std::array<double, 4>{1.0, 3.0, 3.0, 1.0}
                                                  : std::array<double, 4>{1.0, 2.0, 1.0, 0.0};
        const int terms = third ? 4 : 3;
        const int n = size();
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
        const int su = nu_ - 3;
        const int sv = nv_ - 3;
        for (int cu = 0; cu < su; ++cu) {
            for (int cv = 0; cv < sv; ++cv) {
                for (int qa = 0; qa < 4; ++qa) {
                    for (int qb = 0; qb < 4; ++qb) {
                        const double t = (cu + 0.5 + 0.5 * gx[qa]) / su;
                        const double s = (cv + 0.5 + 0.5 * gx[qb]) / sv;
                        const double w = gw[qa] * gw[qb] * 0.25 / (su * sv);
                        const auto bu = detail::cubic_basis(t, nu_);
                        const auto bv = detail::cubic_basis(s, nv_);
                        // Derivative tables indexed by order 0..3 along each axis.
                        const std::array<const std::array<double, 4>*, 4> du{&bu.b, &bu.d1, &bu.d2, &bu.d3};
                        const std::array<const std::array<double, 4>*, 4> dv{&bv.b, &bv.d1, &bv.d2, &bv.d3};
                        const int order = third ? 3 : 2;
                        std::array<int, 16> idx{};
                        std::array<std::array<double, 16>, 4> f{};
                        int k = 0;
                        for (int a = 0; a < 4; ++a) {
                            for (int b = 0; b < 4; ++b, ++k) {
                                idx[k] = (bu.first + a) * nv_ + bv.first + b;
                                for (int q = 0; q < terms; ++q) f[q][k] = (*du[order - q])[a] * (*dv[q])[b];
                            }
                        }
                        for (int a = 0; a < 16; ++a) {
                            for (int b = 0; b < 16; ++b) {
                                double e = 0.0;
                                for (int q = 0; q < terms; ++q) e += binom[q] * f[q][a] * f[q][b];
                                m(idx[a], idx[b]) += w * e;
                            }
                        }
                    }
                }
            }
        }
        return m;
    }

    DomainBox box_;
    int nu_, nv_, channels_;
    Roughness roughness_;
    Eigen::MatrixXd normal_;
    Eigen::MatrixXd rhs_;
    std::vector<Row> rows_;
};

}  // namespace connrsfm
