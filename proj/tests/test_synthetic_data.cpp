#include <gtest/gtest.h>

#include <cmath>

#include "connrsfm/synthetic_data.hpp"
#include "test_support.hpp"

using namespace connrsfm;
using namespace connrsfm::testing;

TEST(GenerateBalls, IdenticalBallsGiveIdentityData) {
    BallScene s;
    const auto ds = generate_pair(s, s, 30, 1);
    EXPECT_EQ(ds.gt_lambda(0, 1), 1.0);
    for (int k = 0; k < ds.n_points(); ++k) {
        const auto a = ds.gt_observation(k, 0);
        const auto b = ds.gt_observation(k, 1);
        EXPECT_EQ(a.pixel.u, b.pixel.u);
        EXPECT_EQ(a.pixel.v, b.pixel.v);
        EXPECT_EQ(a.jet.beta, b.jet.beta);
        const auto w = analytic_warp_jet(s, s, a.pixel);
        EXPECT_LE((w.J3 - Mat3::Identity()).norm(), 1e-12);
        EXPECT_LE(w.dJ3[0].norm() + w.dJ3[1].norm(), 1e-10);
    }
}

TEST(GenerateBalls, RadiusRatioIsTheConformalScale) {
    auto [a, b] = ball_pair(2.0, 1.0);
    a.center = Vec3(0, 0, 6);
    b.center = Vec3(0, 0, 3.5);
    const auto ds = generate_pair(a, b, 50, 2);
    EXPECT_EQ(ds.gt_lambda(0, 1), 2.0);
    for (const auto& s : pair_samples(ds, 0, 1)) {
        const Vec3d r = metric_residuals(s.src, s.dst, s.warp, {2.0});
        EXPECT_LE(r.norm(), 1e-10 * detail::first_fundamental_form(s.src).norm());
        // Sampled tracks agree with the analytic warp.
        EXPECT_NEAR(s.warp.warped.u, s.dst.pixel.u, 1e-14);
    }
    for (int k = 0; k < ds.n_points(); ++k) {
        const auto w = analytic_warp_jet(a, b, ds.gt_observation(k, 0).pixel);
        EXPECT_NEAR(w.warped.u, ds.gt_observation(k, 1).pixel.u, 1e-10);
        EXPECT_NEAR(w.warped.v, ds.gt_observation(k, 1).pixel.v, 1e-10);
    }
}

TEST(GenerateBalls, GroundTruthIsConsistent) {
    const auto ds = generate_balls(7, 100, default_scenes(42), 42);
    for (int k = 0; k < ds.n_points(); ++k)
        for (int f = 0; f < ds.n_frames(); ++f) {
            const auto s = ds.slot(k, f);
            EXPECT_TRUE(ds.tracks.visible(k, f));
            EXPECT_LE(std::abs(ds.clean_pixels[s].u), 0.5);
            EXPECT_LE(std::abs(ds.clean_pixels[s].v), 0.5);
            EXPECT_LE((embed(ds.clean_pixels[s], ds.gt_jets[s].beta) - ds.gt_points[s]).norm(), 1e-9);
            const auto& sc = ds.frames[f];
            EXPECT_NEAR((ds.gt_points[s] - sc.center).norm(), sc.radius, 1e-9);
        }
}

TEST(GenerateBalls, ExactResidualsAcrossAllPairs) {
    const auto ds = generate_balls(7, 40, default_scenes(3), 3);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
            if (i == j) continue;
            for (const auto& s : pair_samples(ds, i, j)) {
                EXPECT_LE(relative_connection_residuals(s, ds.gt_lambda(i, j)).lpNorm<Eigen::Infinity>(), 1e-9);
                EXPECT_LE(metric_residuals(s.src, s.dst, s.warp, {ds.gt_lambda(i, j)}).norm(),
                          1e-9 * detail::first_fundamental_form(s.src).norm());
            }
        }
}

TEST(GenerateBalls, DeterministicForASeed) {
    const auto a = generate_balls(3, 20, default_scenes(9, 3), 9);
    const auto b = generate_balls(3, 20, default_scenes(9, 3), 9);
    for (std::size_t s = 0; s < a.clean_pixels.size(); ++s) {
        EXPECT_EQ(a.clean_pixels[s].u, b.clean_pixels[s].u);
        EXPECT_EQ(a.gt_jets[s].y11, b.gt_jets[s].y11);
    }
}

TEST(GenerateBalls, InvalidScenes) {
    BallScene behind;
    behind.center = Vec3(0, 0, 0.5);
    EXPECT_THROW(generate_pair(behind, BallScene{}, 5, 1), DomainError);
    EXPECT_THROW(generate_balls(3, 5, {BallScene{}}, 1), DomainError);
}

TEST(AnalyticWarpJet, MatchesFiniteDifferences) {
    auto [a, b] = ball_pair(1.4, 0.8);
    b.orientation = Eigen::AngleAxisd(0.3, Vec3::UnitX()).toRotationMatrix();
    const double h = 1e-5;
    for (const PixelPoint p : {PixelPoint{0.0, 0.0}, PixelPoint{0.1, -0.05}, PixelPoint{-0.08, 0.12}}) {
        const auto w = analytic_warp_jet(a, b, p);
        for (int c = 0; c < 2; ++c) {
            PixelPoint pp = p, pm = p;
            (c == 0 ? pp.u : pp.v) += h;
            (c == 0 ? pm.u : pm.v) -= h;
            const auto wp = analytic_warp_jet(a, b, pp), wm = analytic_warp_jet(a, b, pm);
            const Vec2 dx((wp.warped.u - wm.warped.u) / (2 * h), (wp.warped.v - wm.warped.v) / (2 * h));
            EXPECT_LE((w.J.col(c) - dx).norm(), 1e-8);
            const Mat3 dj = (wp.J3 - wm.J3) / (2 * h);
            EXPECT_LE((w.dJ3[c] - dj).norm(), 1e-7 * std::max(1.0, dj.norm()));
        }
    }
    EXPECT_THROW(analytic_warp_jet(a, b, {3.0, 3.0}), DomainError);
}

TEST(VerificationIndex, FullJetsGiveZero) {
    const auto scenes = verification_scenes(42);
    for (int m = 1; m <= 10; ++m) {
        const auto ds = generate_pair(scenes[0], scenes[m], 100, 42 + m);
        EXPECT_LE(verification_index(ds, true).index_percent, 1e-8);
    }
}

TEST(VerificationIndex, FirstOrderOnlyLiesInTheExpectedBand) {
    const auto scenes = verification_scenes(42);
    for (int m = 1; m <= 10; ++m) {
        const auto ds = generate_pair(scenes[0], scenes[m], 100, 42 + m);
        const double idx = verification_index(ds, false).index_percent;
        EXPECT_GE(idx, 5.0) << "pair " << m;
        EXPECT_LE(idx, 13.0) << "pair " << m;
    }
}

TEST(VerificationIndex, IdentityPairFirstOrderIsZero) {
    BallScene s;
    const auto ds = generate_pair(s, s, 50, 1);
    EXPECT_LE(verification_index(ds, false).index_percent, 1e-8);
}

TEST(AddNoise, ZeroSigmaAndStatistics) {
    const auto ds = generate_balls(2, 5000, default_scenes(1, 2), 1);
    Intrinsics k{500, 520, 320, 240, false};
    const auto same = add_noise(ds, 0.0, k, 3);
    for (std::size_t s = 0; s < ds.tracks.pixels.size(); ++s) EXPECT_EQ(same.tracks.pixels[s].u, ds.tracks.pixels[s].u);
    const auto noisy = add_noise(ds, 2.0, k, 3);
    const auto again = add_noise(ds, 2.0, k, 3);
    double su = 0, sv = 0;
    const std::size_t n = ds.tracks.pixels.size();
    for (std::size_t s = 0; s < n; ++s) {
        EXPECT_EQ(noisy.tracks.pixels[s].u, again.tracks.pixels[s].u);
        const double du = (noisy.tracks.pixels[s].u - ds.clean_pixels[s].u) * k.fx;
        const double dv = (noisy.tracks.pixels[s].v - ds.clean_pixels[s].v) * k.fy;
        su += du * du;
        sv += dv * dv;
        EXPECT_EQ(noisy.clean_pixels[s].u, ds.clean_pixels[s].u);
        EXPECT_EQ(noisy.gt_jets[s].beta, ds.gt_jets[s].beta);
    }
    EXPECT_NEAR(std::sqrt(su / n), 2.0, 0.1);
    EXPECT_NEAR(std::sqrt(sv / n), 2.0, 0.1);
    EXPECT_THROW(add_noise(ds, 1.0, Intrinsics{}, 1), ConfigError);
}

TEST(ApplyMissing, RatesAndTwoViewInvariant) {
    const auto ds = generate_balls(7, 100, default_scenes(42), 42);
    const auto none = apply_missing(ds, 0.0, 5);
    EXPECT_EQ(none.tracks.mask, ds.tracks.mask);
    for (double rate : {0.1, 0.3, 0.5, 0.7}) {
        MissingReport rep;
        const auto m = apply_missing(ds, rate, 5, &rep);
        EXPECT_EQ(rep.requested, static_cast<std::size_t>(7 * std::llround(rate * 100)));
        const double visible = static_cast<double>(m.tracks.observation_count()) / 700.0;
        if (rate <= 0.5) EXPECT_NEAR(visible, 1.0 - rate, 0.02) << rate;
        for (int k = 0; k < m.n_points(); ++k) {
            const int v = m.tracks.views(k);
            EXPECT_TRUE(v == 0 || v >= 2);
        }
        EXPECT_TRUE(rep.dropped_points.empty());
    }
    EXPECT_THROW(apply_missing(ds, 1.0, 1), DomainError);
}

TEST(ApplyMissing, FirstFrameLosesObservationsToo) {
    const auto ds = generate_balls(4, 100, default_scenes(2, 4), 2);
    const auto m = apply_missing(ds, 0.3, 8);
    int visible0 = 0;
    for (int k = 0; k < 100; ++k) visible0 += m.tracks.visible(k, 0) ? 1 : 0;
    EXPECT_EQ(visible0, 70);
}
