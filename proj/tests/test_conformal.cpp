#include <gtest/gtest.h>

#include <random>

#include "connrsfm/conformal.hpp"
#include "connrsfm/synthetic_data.hpp"
#include "test_support.hpp"

using namespace connrsfm;
using namespace connrsfm::testing;

namespace {

Observation flat_at(PixelPoint p) { return {p, DepthJet{2.0, 0.1, -0.2, 0.3, 0.05, -0.1}}; }

WarpJet identity_warp(PixelPoint p) { return make_warp_jet(p, Mat2::Identity(), Mat2::Zero(), Mat2::Zero()); }

SyntheticDataset conformal_pair(double ri, double rj, std::uint64_t seed = 1, int n = 60) {
    auto [a, b] = ball_pair(ri, rj);
    b.orientation = Eigen::AngleAxisd(0.4, Vec3(0.2, 1.0, -0.3).normalized()).toRotationMatrix();
    return generate_pair(a, b, n, seed);
}

}  // namespace

TEST(MetricResiduals, IdentityIsZero) {
    const auto o = flat_at({0.1, 0.2});
    EXPECT_EQ(metric_residuals(o, o, identity_warp(o.pixel), {1.0}), Vec3d::Zero());
}

TEST(MetricResiduals, BallPairWithTrueScale) {
    const auto ds = conformal_pair(1.3, 0.9);
    for (const auto& s : pair_samples(ds, 0, 1)) {
        const Vec3d r = metric_residuals(s.src, s.dst, s.warp, {ds.gt_lambda(0, 1)});
        const double scale = detail::first_fundamental_form(s.src).norm();
        EXPECT_LE(r.norm(), 1e-9 * scale);
    }
}

TEST(MetricResiduals, PerturbedScaleGrowsQuadratically) {
    const auto ds = conformal_pair(1.3, 0.9);
    const double lt = ds.gt_lambda(0, 1);
    for (const auto& s : pair_samples(ds, 0, 1)) {
        const Vec3d r = metric_residuals(s.src, s.dst, s.warp, {1.1 * lt});
        EXPECT_GT(r.norm(), 1e-3);
        // lhs - l^2 G' = (l_t^2 - l^2) G' with G' = J^T G_dst J.
        const Mat2 g = s.warp.J.transpose() * detail::first_fundamental_form(s.dst) * s.warp.J;
        const double k = lt * lt - 1.21 * lt * lt;
        const Vec3d expected(k * g(0, 0), k * g(0, 1), k * g(1, 1));
        EXPECT_LE((r - expected).norm(), 1e-8 * expected.norm());
    }
}

TEST(ConnectionResiduals, IdentityIsZero) {
    const auto o = flat_at({-0.1, 0.05});
    EXPECT_LE(connection_residuals(o, o, identity_warp(o.pixel), {1.0}).norm(), 1e-14);
}

TEST(ConnectionResiduals, BallPairWithTrueScaleAndFullJets) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto ds = conformal_pair(0.8 + 0.3 * seed, 1.1, seed);
        for (const auto& s : pair_samples(ds, 0, 1)) {
            EXPECT_LE(relative_connection_residuals(s, ds.gt_lambda(0, 1)).lpNorm<Eigen::Infinity>(), 1e-8);
        }
    }
}

TEST(ConnectionResiduals, FirstOrderOnlyJetsLeaveAGap) {
    const auto ds = conformal_pair(1.3, 0.9);
    double worst = 0;
    for (auto s : pair_samples(ds, 0, 1)) {
        s.src.jet = s.src.jet.first_order_only();
        s.dst.jet = s.dst.jet.first_order_only();
        worst = std::max(worst, relative_connection_residuals(s, ds.gt_lambda(0, 1)).norm());
    }
    EXPECT_GT(worst, 1e-3);
}

TEST(ResidualBlock, ExactDataAndZeroWeight) {
    const auto ds = conformal_pair(1.3, 0.9);
    const auto samples = pair_samples(ds, 0, 1);
    const double l = ds.gt_lambda(0, 1);
    for (const auto& s : samples) {
        const auto scale =
            lhs_magnitude_scale(s.src, connection(s.src.pixel, s.src.jet), s.warp, {l});
        const auto b = residual_block(s.src, s.dst, s.warp, {l}, 0.7, scale);
        EXPECT_EQ(b.values.size(), kBlockResiduals);
        EXPECT_LE(b.values.norm(), 1e-8);
        // Perturbed state, zero weight: nothing survives.
        Observation bad = s.src;
        bad.jet.y1 += 0.5;
        EXPECT_EQ(residual_block(bad, s.dst, s.warp, {3 * l}, 0.0).values, Vec21::Zero());
    }
}

TEST(ResidualBlock, WeightAndGroupScaling) {
    const auto ds = conformal_pair(1.3, 0.9);
    auto s = pair_samples(ds, 0, 1).front();
    s.src.jet.y2 += 0.2;
    const auto one = residual_block(s.src, s.dst, s.warp, {1.0}, 1.0);
    const auto four = residual_block(s.src, s.dst, s.warp, {1.0}, 4.0, {2.0, 4.0, 8.0});
    EXPECT_LE((four.metric() - one.metric()).norm(), 1e-14 * one.metric().norm());
    EXPECT_LE((four.values.segment<9>(3) * 2 - one.values.segment<9>(3)).norm(), 1e-12 * one.values.norm());
    EXPECT_LE((four.values.segment<9>(12) * 4 - one.values.segment<9>(12)).norm(), 1e-12 * one.values.norm());
}

TEST(ResidualBlock, ContinuousInTheJet) {
    const auto ds = conformal_pair(1.3, 0.9);
    const auto s = pair_samples(ds, 0, 1)[3];
    const double l = ds.gt_lambda(0, 1);
    const auto norm_at = [&](double d) {
        Observation o = s.src;
        o.jet.y1 += d;
        o.jet.y11 -= 0.5 * d;
        return residual_block(o, s.dst, s.warp, {l}, 1.0).values.norm();
    };
    // Secant slopes converge as the step shrinks.
    const double s1 = (norm_at(1e-3) - norm_at(0)) / 1e-3;
    const double s2 = (norm_at(1e-4) - norm_at(0)) / 1e-4;
    const double s3 = (norm_at(1e-5) - norm_at(0)) / 1e-5;
    EXPECT_TRUE(std::isfinite(s1) && std::isfinite(s2) && std::isfinite(s3));
    EXPECT_LE(std::abs(s2 - s3), std::abs(s1 - s2) + 1e-6);
    EXPECT_LE(norm_at(1e-8), 1e-6);
}

TEST(ClosedFormLambda, IdentityIsOne) {
    const auto o = flat_at({0.1, -0.1});
    EXPECT_NEAR(closed_form_lambda(o, o, identity_warp(o.pixel)).value, 1.0, 1e-12);
}

TEST(ClosedFormLambda, BallRadiusRatios) {
    for (auto [ri, rj, expected] : {std::tuple{2.0, 1.0, 2.0}, std::tuple{1.0, 4.0, 0.25}}) {
        auto [a, b] = ball_pair(ri, rj);
        const auto ds = generate_pair(a, b, 40, 7);
        for (const auto& s : pair_samples(ds, 0, 1)) {
            EXPECT_NEAR(closed_form_lambda(s.src, s.dst, s.warp).value, expected, 1e-6 * expected);
        }
    }
}

TEST(ClosedFormLambda, DegenerateDenominators) {
    // A flat fronto-parallel pair: every lower-left and upper-right connection
    // entry vanishes.
    const Observation o{{0, 0}, DepthJet{}};
    EXPECT_THROW(closed_form_lambda(o, o, identity_warp(o.pixel)), DegenerateGeometryError);
}

TEST(PrestepLambda, ExactAndIsometricData) {
    const auto ds = conformal_pair(1.5, 0.6);
    for (const auto& s : pair_samples(ds, 0, 1)) {
        EXPECT_NEAR(prestep_lambda(s.src, s.dst, s.warp).value, 2.5, 2.5e-6);
    }
    auto [a, b] = ball_pair(1.0, 1.0);
    b.center = Vec3(0.1, 0.0, 3.3);
    b.orientation = Eigen::AngleAxisd(0.3, Vec3::UnitY()).toRotationMatrix();
    const auto iso = generate_pair(a, b, 40, 3);
    for (const auto& s : pair_samples(iso, 0, 1)) {
        EXPECT_NEAR(prestep_lambda(s.src, s.dst, s.warp).value, 1.0, 1e-6);
    }
}

TEST(PrestepLambda, NoisyDataStaysPositive) {
    const auto ds = conformal_pair(1.5, 0.6);
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g(0.0, 0.3);
    for (auto s : pair_samples(ds, 0, 1)) {
        for (double* x : {&s.src.jet.y1, &s.src.jet.y2, &s.src.jet.y11, &s.dst.jet.y12, &s.dst.jet.y22}) *x += g(rng);
        s.warp = make_warp_jet(s.warp.warped, s.warp.J + 0.05 * Mat2::Random(), Mat2::Random(), Mat2::Random());
        const double l = prestep_lambda(s.src, s.dst, s.warp).value;
        EXPECT_TRUE(std::isfinite(l));
        EXPECT_GE(l, kMinLambda);
    }
}

TEST(ScaleFreeInvariants, InvariantEntriesIgnoreTheScale) {
    const auto ds = conformal_pair(1.3, 0.9);
    for (const auto& s : pair_samples(ds, 0, 1)) {
        const auto r = corollary1_invariants(s.src, s.dst, s.warp, {7.3});
        const auto sides = connection_sides(connection(s.src.pixel, s.src.jet), connection(s.dst.pixel, s.dst.jet),
                                            s.warp, 7.3);
        const double scale = std::max({1.0, sides.lhs[0].norm(), sides.lhs[1].norm()});
        EXPECT_LE(r.lpNorm<Eigen::Infinity>(), 1e-8 * scale);
        const auto r1 = corollary1_invariants(s.src, s.dst, s.warp, {0.5});
        const auto r2 = corollary1_invariants(s.src, s.dst, s.warp, {1.0});
        EXPECT_EQ(std::memcmp(r.data(), r1.data(), sizeof(double) * 10), 0);
        EXPECT_EQ(std::memcmp(r.data(), r2.data(), sizeof(double) * 10), 0);
    }
}

TEST(ScaleFreeInvariants, IdentityIsZero) {
    const auto o = flat_at({0.2, 0.1});
    EXPECT_LE(corollary1_invariants(o, o, identity_warp(o.pixel)).norm(), 1e-14);
}

TEST(ScaleFreeInvariants, MatchesTheScaleFreeConnectionEntries) {
    const auto ds = conformal_pair(1.3, 0.9);
    auto s = pair_samples(ds, 0, 1)[5];
    s.src.jet.y12 += 0.3;  // make the entries non-zero
    const Vec18 full = connection_residuals(s.src, s.dst, s.warp, {2.0});
    const auto inv = corollary1_invariants(s.src, s.dst, s.warp);
    for (int c = 0; c < 2; ++c)
        for (int k = 0; k < 5; ++k) EXPECT_EQ(inv[5 * c + k], full[9 * c + kScaleFreeEntries[k]]);
}

TEST(ScaleFreeInvariants, AnisotropicDeformationBreaksTheInvariants) {
    auto [a, b] = ball_pair(1.0, 1.0);
    b.stretch = Vec3(1.0, 1.0, 2.0);
    b.center = Vec3(0.05, -0.03, 5.0);
    const auto ds = generate_pair(a, b, 100, 5);
    int broken = 0, total = 0;
    for (const auto& s : pair_samples(ds, 0, 1)) {
        ++total;
        broken += corollary1_invariants(s.src, s.dst, s.warp).lpNorm<Eigen::Infinity>() > 1e-3 ? 1 : 0;
    }
    EXPECT_GE(broken, 0.95 * total);
}

// Rotating the destination surface about the camera centre keeps its visible
// side visible, so the same material points stay observable.
TEST(RotationInvariance, RotatingTheDestinationChangesNoResidual) {
    auto [a, b] = ball_pair(1.2, 0.8);
    const auto base = generate_pair(a, b, 30, 9);
    const auto ref = pair_samples(base, 0, 1);
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> angle(0.0, 0.5);
    for (int draw = 0; draw < 100; ++draw) {
        auto ds = base;
        const Mat3 r = small_rotation(rng, angle(rng));
        ds.frames[1].center = r * ds.frames[1].center;
        ds.frames[1].orientation = r * ds.frames[1].orientation;
        for (std::size_t k = 0; k < ref.size(); ++k) {
            const auto& s0 = ref[k];
            const WarpJet w = analytic_warp_jet(ds.frames[0], ds.frames[1], s0.src.pixel);
            const PairSample s{s0.src, {w.warped, analytic_depth_jet(ds.frames[1], w.warped)}, w};
            const Vec18 d = relative_connection_residuals(s, ds.gt_lambda(0, 1)) -
                            relative_connection_residuals(s0, base.gt_lambda(0, 1));
            ASSERT_LE(d.lpNorm<Eigen::Infinity>(), 1e-9) << "draw " << draw << " point " << k;
        }
    }
}
