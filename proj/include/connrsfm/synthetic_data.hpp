#pragma once

// Analytic ball scenes with exact ground truth.
//
// Every frame shows one quadric surface {c + M d : |d| = 1}. A material point
// with direction d appears at c_f + M_f d in frame f, so frames are related by
// the affine map z_j = c_j + M_j M_i^-1 (z_i - c_i). For balls M = R Q (radius
// times rotation), the map is a similarity and the conformal scale between
// frames i and j is R_i / R_j. Depth, its derivatives and the pixel warps are
// computed in closed form through second-order forward differentiation.

#include <Eigen/Core>
#include <Eigen/LU>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "connrsfm/conformal.hpp"
#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"
#include "connrsfm/jet2.hpp"
#include "connrsfm/spline_warp.hpp"
#include "connrsfm/tracks.hpp"

namespace connrsfm {

/// One frame's surface. `stretch` is applied in camera coordinates after the
/// rotation; any entry different from 1 makes the deformation non-conformal.
struct BallScene {
    Vec3 center{0.0, 0.0, 4.0};
    double radius = 1.0;
    Mat3 orientation = Mat3::Identity();
    Vec3 stretch = Vec3::Ones();

    bool conformal() const { return stretch == Vec3::Ones(); }

    /// Shape matrix M: surface points are center + M d with |d| = 1.
    Mat3 shape() const { return stretch.asDiagonal() * (radius * orientation); }

    void validate() const {
        if (!(radius > 0.0) || !std::isfinite(radius)) throw DomainError("ball radius must be positive");
        if (!(stretch.minCoeff() > 0.0)) throw DomainError("ball stretch must be positive");
        const double extent = radius * stretch.maxCoeff();
        if (!(center.z() > extent)) throw DomainError("ball must lie in front of the camera (z_center > radius)");
    }
};

/// Per-pixel ray intersection with a scene surface, differentiated to second
/// order in the pixel coordinates.
struct RayHit {
    Jet2 beta;
    std::array<Jet2, 3> point;
};

namespace detail {

inline std::array<Jet2, 3> pixel_ray(const PixelPoint& p) {
    return {Jet2::variable(p.u, 0), Jet2::variable(p.v, 1), Jet2(1.0)};
}

template <class V>
Jet2 quad_form(const Mat3& a, const V& x, const V& y) {
    Jet2 s(0.0);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) s += x[r] * (a(r, c) * y[c]);
    return s;
}

// Near intersection of the ray beta * r with the quadric; nullopt on a miss.
inline std::optional<RayHit> intersect(const BallScene& s, const std::array<Jet2, 3>& r) {
    const Mat3 m = s.shape();
    const Mat3 a = (m * m.transpose()).inverse();
    const std::array<Jet2, 3> c{Jet2(s.center.x()), Jet2(s.center.y()), Jet2(s.center.z())};
    const Jet2 qa = quad_form(a, r, r);
    const Jet2 qb = quad_form(a, r, c);
    const double qc = s.center.dot(a * s.center) - 1.0;
    const Jet2 disc = qb * qb - qa * qc;
    if (!(disc.v > 0.0)) return std::nullopt;
    RayHit h;
    h.beta = (qb - sqrt(disc)) / qa;
    if (!(h.beta.v > 0.0)) return std::nullopt;
    for (int k = 0; k < 3; ++k) h.point[k] = h.beta * r[k];
    return h;
}

inline DepthJet jet_from(const Jet2& b) {
    return {b.v, b.du() / b.v, b.dv() / b.v, b.duu() / b.v, b.duv() / b.v, b.dvv() / b.v};
}

// Outward normal of the quadric at z.
inline Vec3 quadric_normal(const BallScene& s, const Vec3& z) {
    const Mat3 m = s.shape();
    return ((m * m.transpose()).inverse() * (z - s.center)).normalized();
}

}  // namespace detail

/// Ground-truth depth jet of scene s at pixel p.
inline DepthJet analytic_depth_jet(const BallScene& s, const PixelPoint& p) {
    const auto hit = detail::intersect(s, detail::pixel_ray(p));
    if (!hit) throw DomainError("analytic_depth_jet: pixel ray misses the surface");
    return detail::jet_from(hit->beta);
}

/// Closed-form pixel map from scene i to scene j, with value, Jacobian and
/// second derivatives.
inline WarpJet analytic_warp_jet(const BallScene& si, const BallScene& sj, const PixelPoint& p) {
    const auto hit = detail::intersect(si, detail::pixel_ray(p));
    if (!hit) throw DomainError("analytic_warp_jet: pixel is off the visible surface of the source scene");
    const Mat3 t = sj.shape() * si.shape().inverse();
    std::array<Jet2, 3> zj;
    for (int r = 0; r < 3; ++r) {
        Jet2 acc(sj.center[r]);
        for (int c = 0; c < 3; ++c) acc += t(r, c) * (hit->point[c] - Jet2(si.center[c]));
        zj[r] = acc;
    }
    if (!(zj[2].v > 0.0)) throw DomainError("analytic_warp_jet: mapped point is behind the camera");
    const Jet2 u = zj[0] / zj[2];
    const Jet2 v = zj[1] / zj[2];
    Mat2 j, dju, djv;
    j << u.du(), u.dv(), v.du(), v.dv();
    dju << u.duu(), u.duv(), v.duu(), v.duv();
    djv << u.duv(), u.dvv(), v.duv(), v.dvv();
    return make_warp_jet({u.v, v.v}, j, dju, djv);
}

struct SamplingOptions {
    double retinal_half_width = 0.5;
    /// Largest angle between the viewing ray and the inward surface normal.
    double max_view_angle = 60.0 * 3.14159265358979323846 / 180.0;
    int max_attempts = 2'000'000;
};

struct SyntheticDataset {
    std::vector<BallScene> frames;
    /// Observed tracks (possibly noisy, possibly masked).
    TrackSet tracks;
    /// Noise-free pixels for every (point, frame) slot.
    std::vector<PixelPoint> clean_pixels;
    std::vector<DepthJet> gt_jets;
    std::vector<Vec3> gt_points;
    std::vector<Vec3> gt_normals;
    double noise_sigma_px = 0.0;
    std::uint64_t seed = 0;

    int n_frames() const { return tracks.n_frames; }
    int n_points() const { return tracks.n_points; }
    std::size_t slot(int point, int frame) const { return tracks.slot(point, frame); }

    /// Conformal scale from frame i to frame j, R_i / R_j.
    double gt_lambda(int i, int j) const { return frames.at(i).radius / frames.at(j).radius; }

    Observation gt_observation(int point, int frame) const {
        return {clean_pixels[slot(point, frame)], gt_jets[slot(point, frame)]};
    }
};

namespace detail {

inline bool within_box(const PixelPoint& p, double h) { return std::abs(p.u) <= h && std::abs(p.v) <= h; }

// Visible appearance of material direction d in scene s, or nullopt.
inline std::optional<PixelPoint> visible_pixel(const BallScene& s, const Vec3& d, const SamplingOptions& o) {
    const Vec3 z = s.center + s.shape() * d;
    if (!(z.z() > 0.0)) return std::nullopt;
    const Vec3 n = quadric_normal(s, z);
    const double facing = -n.dot(z.normalized());
    if (facing < std::cos(o.max_view_angle)) return std::nullopt;
    const PixelPoint p = project(z);
    if (!within_box(p, o.retinal_half_width)) return std::nullopt;
    // The point must be the first hit along its ray, not hidden behind another part.
    const auto hit = intersect(s, pixel_ray(p));
    if (!hit || std::abs(hit->beta.v - z.z()) > 1e-9 * z.z()) return std::nullopt;
    return p;
}

}  // namespace detail

/// Samples n_points material points visible in every frame and builds exact
/// tracks and ground truth.
inline SyntheticDataset generate_balls(int n_frames, int n_points, const std::vector<BallScene>& scenes,
                                       std::uint64_t seed, const SamplingOptions& opts = {}) {
    if (n_frames < 1 || n_points < 1) throw DomainError("generate_balls: need at least one frame and one point");
    if (static_cast<int>(scenes.size()) != n_frames) {
        throw DomainError("generate_balls: scene count must equal frame count");
    }
    for (const auto& s : scenes) s.validate();

    SyntheticDataset ds;
    ds.frames = scenes;
    ds.seed = seed;
    ds.tracks = TrackSet(n_frames, n_points);
    const std::size_t n_slots = static_cast<std::size_t>(n_frames) * n_points;
    ds.clean_pixels.resize(n_slots);
    ds.gt_jets.resize(n_slots);
    ds.gt_points.resize(n_slots);
    ds.gt_normals.resize(n_slots);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    int attempts = 0;
    std::vector<PixelPoint> pix(static_cast<std::size_t>(n_frames));
    for (int k = 0; k < n_points; ++k) {
        for (;;) {
            if (++attempts > opts.max_attempts) {
                throw DomainError("generate_balls: could not sample enough points visible in every frame");
            }
            Vec3 d(gauss(rng), gauss(rng), gauss(rng));
            if (d.norm() < 1e-12) continue;
            d.normalize();
            bool ok = true;
            for (int f = 0; f < n_frames && ok; ++f) {
                const auto p = detail::visible_pixel(scenes[f], d, opts);
                if (p) pix[f] = *p;
                else ok = false;
            }
            if (!ok) continue;
            for (int f = 0; f < n_frames; ++f) {
                const std::size_t s = ds.slot(k, f);
                ds.clean_pixels[s] = pix[f];
                ds.tracks.pixels[s] = pix[f];
                ds.tracks.mask[s] = 1;
                ds.gt_jets[s] = analytic_depth_jet(scenes[f], pix[f]);
                ds.gt_points[s] = scenes[f].center + scenes[f].shape() * d;
                ds.gt_normals[s] = detail::quadric_normal(scenes[f], ds.gt_points[s]);
            }
            break;
        }
    }
    return ds;
}

/// Two-frame dataset used for single-pair checks.
inline SyntheticDataset generate_pair(const BallScene& a, const BallScene& b, int n_points, std::uint64_t seed,
                                      const SamplingOptions& opts = {}) {
    return generate_balls(2, n_points, {a, b}, seed, opts);
}

struct SceneRanges {
    double radius_min = 0.5;
    double radius_max = 2.0;
    double depth_min = 3.0;
    double depth_max = 6.0;
    double lateral = 0.3;
};

/// Random ball scenes with radii and centers drawn from `ranges`.
inline std::vector<BallScene> random_scenes(int n, std::uint64_t seed, const SceneRanges& ranges = {}) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ur(ranges.radius_min, ranges.radius_max);
    std::uniform_real_distribution<double> uz(ranges.depth_min, ranges.depth_max);
    std::uniform_real_distribution<double> uxy(-ranges.lateral, ranges.lateral);
    std::vector<BallScene> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        BallScene s;
        s.radius = ur(rng);
        const double x = uxy(rng);
        const double y = uxy(rng);
        s.center = Vec3(x, y, std::max(uz(rng), s.radius + 0.5));
        out.push_back(s);
    }
    return out;
}

/// Seven-frame reconstruction suite.
inline std::vector<BallScene> default_scenes(std::uint64_t seed, int n_frames = 7) {
    return random_scenes(n_frames, seed);
}

/// Reference ball followed by `n_matched` balls for the connection-invariance
/// check. Each matched ball has a radius drawn from [0.5, 2] and sits at a
/// depth making it look 25-40 % smaller than the reference (depth/radius ratio
/// scaled by that factor), with a small lateral offset; draws whose depth
/// leaves [3, 6] are rejected.
inline std::vector<BallScene> verification_scenes(std::uint64_t seed, int n_matched = 10) {
    constexpr double kRefDepth = 4.5;
    std::vector<BallScene> out;
    BallScene ref;
    ref.center = Vec3(0.0, 0.0, kRefDepth);
    ref.radius = 1.0;
    out.push_back(ref);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ur(0.5, 2.0);
    std::uniform_real_distribution<double> uf(1.25, 1.4);
    std::uniform_real_distribution<double> uxy(-0.1, 0.1);
    while (static_cast<int>(out.size()) < n_matched + 1) {
        BallScene s;
        s.radius = ur(rng);
        const double f = uf(rng);
        const double x = uxy(rng);
        const double y = uxy(rng);
        const double z = kRefDepth / ref.radius * s.radius * f;
        if (z < 3.0 || z > 6.0) continue;
        s.center = Vec3(x, y, z);
        out.push_back(s);
    }
    return out;
}

struct VerificationReport {
    double index_percent = 0.0;
    int skipped_entries = 0;
    int features = 0;
};

/// Mean over features and over the 18 entries of both connection identities
/// of |lhs - rhs| / (max_k lhs - min_k lhs), in percent, for the pair
/// (src, dst). Ground-truth jets, analytic warps and the true conformal scale
/// are used; with `use_second_order == false` the second-order terms of both
/// jets are zeroed.
inline VerificationReport verification_index(const SyntheticDataset& ds, bool use_second_order, int src = 0,
                                             int dst = 1) {
    const double lambda = ds.gt_lambda(src, dst);
    std::vector<std::array<double, 18>> lhs, rhs;
    for (int k = 0; k < ds.n_points(); ++k) {
        if (!ds.tracks.visible(k, src) || !ds.tracks.visible(k, dst)) continue;
        Observation a = ds.gt_observation(k, src);
        Observation b = ds.gt_observation(k, dst);
        if (!use_second_order) {
            a.jet = a.jet.first_order_only();
            b.jet = b.jet.first_order_only();
        }
        const WarpJet w = analytic_warp_jet(ds.frames[src], ds.frames[dst], a.pixel);
        const ConnectionSides s =
            connection_sides(connection(a.pixel, a.jet), connection(w.warped, b.jet), w, lambda);
        std::array<double, 18> l{}, r{};
        for (int c = 0; c < 2; ++c)
            for (int e = 0; e < 9; ++e) {
                l[9 * c + e] = s.lhs[c](e / 3, e % 3);
                r[9 * c + e] = s.rhs[c](e / 3, e % 3);
            }
        lhs.push_back(l);
        rhs.push_back(r);
    }
    VerificationReport rep;
    rep.features = static_cast<int>(lhs.size());
    if (lhs.empty()) throw DomainError("verification_index: no feature is visible in both frames");
    double max_abs = 0.0;
    for (const auto& l : lhs)
        for (double x : l) max_abs = std::max(max_abs, std::abs(x));
    double total = 0.0;
    int used = 0;
    for (int e = 0; e < 18; ++e) {
        double lo = lhs[0][e], hi = lhs[0][e];
        for (const auto& l : lhs) {
            lo = std::min(lo, l[e]);
            hi = std::max(hi, l[e]);
        }
        const double range = hi - lo;
        if (!(range > 1e-12 * std::max(max_abs, 1e-300))) {
            ++rep.skipped_entries;
            continue;
        }
        double acc = 0.0;
        for (std::size_t k = 0; k < lhs.size(); ++k) acc += std::abs(lhs[k][e] - rhs[k][e]) / range;
        total += acc / static_cast<double>(lhs.size());
        ++used;
    }
    rep.index_percent = used > 0 ? 100.0 * total / used : 0.0;
    return rep;
}

struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    bool normalized = true;

    PixelPoint to_retinal(const PixelPoint& px) const {
        return normalized ? px : PixelPoint{(px.u - cx) / fx, (px.v - cy) / fy};
    }
    PixelPoint to_pixel(const PixelPoint& r) const {
        return normalized ? r : PixelPoint{r.u * fx + cx, r.v * fy + cy};
    }
};

/// Gaussian pixel noise of standard deviation sigma_px, converted to retinal
/// units through the intrinsics. Ground truth is left untouched.
inline SyntheticDataset add_noise(SyntheticDataset ds, double sigma_px, const Intrinsics& k, std::uint64_t seed) {
    if (!(sigma_px >= 0.0)) throw DomainError("add_noise: sigma must be non-negative");
    if (sigma_px > 0.0 && k.normalized) {
        throw ConfigError("add_noise: pixel noise needs camera intrinsics (fx, fy)");
    }
    ds.noise_sigma_px = sigma_px;
    if (sigma_px == 0.0) return ds;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t s = 0; s < ds.clean_pixels.size(); ++s) {
        const double du = gauss(rng) * sigma_px / k.fx;
        const double dv = gauss(rng) * sigma_px / k.fy;
        ds.tracks.pixels[s] = {ds.clean_pixels[s].u + du, ds.clean_pixels[s].v + dv};
    }
    return ds;
}

struct MissingReport {
    std::size_t requested = 0;
    std::size_t hidden = 0;
    std::vector<int> dropped_points;
};

/// Hides round(rate * n_points) observations in every frame, chosen uniformly
/// at random, skipping any observation whose removal would leave its point
/// with fewer than two views. The first frame is treated like every other.
inline SyntheticDataset apply_missing(SyntheticDataset ds, double rate, std::uint64_t seed,
                                      MissingReport* report = nullptr) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("apply_missing: rate must lie in [0, 1)");
    MissingReport rep;
    std::mt19937_64 rng(seed);
    const int np = ds.n_points();
    std::vector<int> views(static_cast<std::size_t>(np));
    for (int k = 0; k < np; ++k) views[k] = ds.tracks.views(k);
    std::vector<int> order(static_cast<std::size_t>(np));
    for (int f = 0; f < ds.n_frames(); ++f) {
        const auto quota = static_cast<std::size_t>(std::llround(rate * np));
        rep.requested += quota;
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        std::size_t hidden = 0;
        for (int k : order) {
            if (hidden == quota) break;
            if (!ds.tracks.visible(k, f) || views[k] <= 2) continue;
            ds.tracks.set_visible(k, f, false);
            --views[k];
            ++hidden;
        }
        rep.hidden += hidden;
    }
    for (int k = 0; k < np; ++k)
        if (views[k] < 2) {
            for (int f = 0; f < ds.n_frames(); ++f) ds.tracks.set_visible(k, f, false);
            rep.dropped_points.push_back(k);
        }
    if (report) *report = rep;
    return ds;
}

}  // namespace connrsfm
