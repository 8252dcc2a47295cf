#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "connrsfm/commands.hpp"

using namespace connrsfm;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::path(::testing::TempDir()) / ("connrsfm_" + name);
    fs::remove_all(p);
    return p;
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

std::size_t data_rows(const std::string& tracks_text) {
    // Four header lines: magic, frames, points, intrinsics.
    return lines_of(tracks_text).size() - 4;
}

RunConfig small_config() {
    RunConfig c;
    c.frames = 4;
    c.points = 60;
    c.threads = 1;
    return c;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, DefaultsAreDocumentedValues) {
    const RunConfig c = parse_config("");
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.threads, 0);
    EXPECT_EQ(c.frames, 7);
    EXPECT_EQ(c.points, 100);
    EXPECT_EQ(c.problem.extra_k, 7);
    EXPECT_EQ(c.solver.N_t, 3);
    EXPECT_EQ(c.solver.max_outer, 20);
    EXPECT_EQ(c.sweep_rates.size(), 8u);
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, KeysCommentsAndOverrides) {
    const RunConfig c = parse_config(
        "# run settings\n"
        "seed = 7\n"
        "threads = 2   # two workers\n"
        "edges.extra_k = 3\n"
        "warp.grid = 10x12\n"
        "warp.smoothing = 1e-9\n"
        "solver.N_t = 5\n"
        "solver.sigma = 0.25\n"
        "solver.max_outer = 9\n"
        "noise.sigma_px = 1.5\n"
        "intrinsics = 500 500 320 240\n"
        "missing.rate = 0.2\n"
        "sweep.rates = 0 0.5\n"
        "seed = 8\n");
    EXPECT_EQ(c.seed, 8u);
    EXPECT_EQ(c.threads, 2);
    EXPECT_EQ(c.problem.extra_k, 3);
    EXPECT_EQ(c.problem.grid.nu, 10);
    EXPECT_EQ(c.problem.grid.nv, 12);
    EXPECT_EQ(c.problem.smoothing, 1e-9);
    EXPECT_EQ(c.solver.N_t, 5);
    EXPECT_EQ(c.solver.sigma, 0.25);
    EXPECT_EQ(c.solver.max_outer, 9);
    EXPECT_EQ(c.noise_sigma_px, 1.5);
    EXPECT_FALSE(c.intrinsics.normalized);
    EXPECT_EQ(c.missing_rate, 0.2);
    EXPECT_EQ(c.sweep_rates, (std::vector<double>{0.0, 0.5}));
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, UnknownKeyIsRejectedWithItsLine) {
    try {
        parse_config("seed = 1\nsolver.tolerance = 3\n", {}, "run.cfg");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("run.cfg:2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("solver.tolerance"), std::string::npos) << msg;
    }
}

TEST(Config, MalformedValuesAreRejected) {
    EXPECT_THROW(parse_config("seed 3"), ConfigError);
    EXPECT_THROW(parse_config("seed = -1"), ConfigError);
    EXPECT_THROW(parse_config("threads = many"), ConfigError);
    EXPECT_THROW(parse_config("solver.N_t = 0"), ConfigError);
    EXPECT_THROW(parse_config("solver.init = sometimes"), ConfigError);
    EXPECT_THROW(parse_config("intrinsics = 1 2 3"), ConfigError);
    EXPECT_THROW(parse_config("seed ="), ConfigError);
}

TEST(Config, ValidationCatchesInconsistentSettings) {
    EXPECT_THROW(parse_config("missing.rate = 1").validate(), ConfigError);
    EXPECT_THROW(parse_config("noise.sigma_px = 2").validate(), ConfigError);  // no pixel scale
    EXPECT_THROW(parse_config("warp.grid = 3").validate(), ConfigError);
    EXPECT_THROW(parse_config("generate.frames = 1").validate(), ConfigError);
    EXPECT_THROW(parse_config("sweep.rates = 0 1.5").validate(), ConfigError);
    EXPECT_NO_THROW(parse_config("noise.sigma_px = 2\nintrinsics = 500 500 320 240").validate());
}

// ---------------------------------------------------------------- tracks

TEST(TrackFormat, NormalizedRoundTripIsExact) {
    const auto ds = make_dataset(small_config(), 0.3);
    const std::string text = format_tracks(ds.tracks, Intrinsics{});
    const TrackFile back = parse_tracks(lines_of(text));
    EXPECT_TRUE(back.intrinsics.normalized);
    ASSERT_EQ(back.tracks.n_frames, ds.tracks.n_frames);
    ASSERT_EQ(back.tracks.n_points, ds.tracks.n_points);
    EXPECT_EQ(back.tracks.mask, ds.tracks.mask);
    for (std::size_t s = 0; s < ds.tracks.pixels.size(); ++s) {
        if (!ds.tracks.mask[s]) continue;
        EXPECT_EQ(back.tracks.pixels[s].u, ds.tracks.pixels[s].u);
        EXPECT_EQ(back.tracks.pixels[s].v, ds.tracks.pixels[s].v);
    }
    EXPECT_EQ(format_tracks(back.tracks, back.intrinsics), text);
}

TEST(TrackFormat, PixelIntrinsicsAreAppliedOnce) {
    const Intrinsics k{500.0, 480.0, 320.0, 240.0, false};
    TrackSet t(2, 1);
    t.at(0, 0) = {0.1, -0.2};
    t.at(0, 1) = {0.0, 0.0};
    t.set_visible(0, 0, true);
    t.set_visible(0, 1, true);
    const std::string text = format_tracks(t, k);
    EXPECT_NE(text.find("0 0 370 144\n"), std::string::npos) << text;
    EXPECT_NE(text.find("0 1 320 240\n"), std::string::npos) << text;
    const TrackFile back = parse_tracks(lines_of(text));
    EXPECT_NEAR(back.tracks.at(0, 0).u, 0.1, 1e-15);
    EXPECT_NEAR(back.tracks.at(0, 0).v, -0.2, 1e-15);
}

TEST(TrackFormat, MalformedFilesAreRejected) {
    const std::string head = "connrsfm-tracks 1\nframes 2\npoints 2\nintrinsics normalized\n";
    EXPECT_NO_THROW(parse_tracks(lines_of(head + "0 0 0.1 0.2\n1 1 0.3 0.4\n")));
    EXPECT_THROW(parse_tracks(lines_of(head + "0 0 0.1 0.2\n0 0 0.3 0.4\n")), IoError);  // duplicate
    EXPECT_THROW(parse_tracks(lines_of(head + "2 0 0.1 0.2\n")), IoError);               // id range
    EXPECT_THROW(parse_tracks(lines_of(head + "0 0 0.1\n")), IoError);                   // short row
    EXPECT_THROW(parse_tracks(lines_of(head + "0 0 0.1 nope\n")), IoError);
    EXPECT_THROW(parse_tracks(lines_of("connrsfm-tracks 2\nframes 2\npoints 2\nintrinsics normalized\n")), IoError);
    EXPECT_THROW(parse_tracks(lines_of("connrsfm-tracks 1\nframes 0\npoints 2\nintrinsics normalized\n")), IoError);
    EXPECT_THROW(parse_tracks(lines_of("connrsfm-tracks 1\nframes 2\npoints 2\nintrinsics -1 1 0 0\n")), IoError);
}

// ---------------------------------------------------------------- generate

TEST(Generate, DefaultDatasetHas700Rows) {
    RunConfig c;
    const StagedOutput out = generate_outputs(c);
    ASSERT_EQ(out.files().size(), 2u);
    EXPECT_EQ(out.files()[0].first, "tracks.txt");
    EXPECT_EQ(out.files()[1].first, "groundtruth.txt");
    EXPECT_EQ(data_rows(out.files()[0].second), 700u);
}

TEST(Generate, MissingRateRemovesAboutThatShare) {
    RunConfig c;
    c.missing_rate = 0.3;
    const auto rows = static_cast<double>(data_rows(generate_outputs(c).files()[0].second));
    const double bound = 3.0 * std::sqrt(700.0 * 0.3 * 0.7);
    EXPECT_NEAR(rows, 490.0, bound);
}

TEST(Generate, ReproducibleByteForByte) {
    RunConfig c;
    c.missing_rate = 0.2;
    const auto a = generate_outputs(c).files();
    const auto b = generate_outputs(c).files();
    EXPECT_EQ(a, b);
    c.seed = 43;
    EXPECT_NE(generate_outputs(c).files()[0].second, a[0].second);
}

// ---------------------------------------------------------------- ground truth

TEST(GroundTruthFormat, RoundTripIsExact) {
    const auto ds = make_dataset(small_config(), 0.0);
    const GroundTruth g = GroundTruth::from(ds);
    const std::string text = format_ground_truth(g);
    const GroundTruth back = parse_ground_truth(lines_of(text));
    EXPECT_EQ(back.n_frames, g.n_frames);
    EXPECT_EQ(back.n_points, g.n_points);
    ASSERT_EQ(back.scenes.size(), g.scenes.size());
    for (std::size_t f = 0; f < g.scenes.size(); ++f) {
        EXPECT_EQ(back.scenes[f].center, g.scenes[f].center);
        EXPECT_EQ(back.scenes[f].radius, g.scenes[f].radius);
        EXPECT_EQ(back.scenes[f].orientation, g.scenes[f].orientation);
    }
    ASSERT_EQ(back.points.size(), g.points.size());
    for (std::size_t s = 0; s < g.points.size(); ++s) {
        EXPECT_EQ(back.points[s], g.points[s]);
        EXPECT_EQ(back.normals[s], g.normals[s]);
        EXPECT_EQ(back.jets[s].beta, g.jets[s].beta);
        EXPECT_EQ(back.jets[s].y22, g.jets[s].y22);
    }
    EXPECT_EQ(back.lambda(0, 2), ds.gt_lambda(0, 2));
    EXPECT_EQ(format_ground_truth(back), text);
}

// ---------------------------------------------------------------- point clouds

TEST(PlyFormat, RoundTripIsExact) {
    FrameCloud c{3, {}};
    c.points.push_back({0, Vec3(0.1, -0.2, 3.0), Vec3(0.0, 0.6, -0.8)});
    c.points.push_back({17, Vec3(1.0 / 3.0, 2e-12, 4.5), Vec3::UnitZ()});
    const std::string text = format_ply(c);
    const FrameCloud back = parse_ply(lines_of(text));
    EXPECT_EQ(back.frame, 3);
    ASSERT_EQ(back.points.size(), 2u);
    for (int k = 0; k < 2; ++k) {
        EXPECT_EQ(back.points[k].point_id, c.points[k].point_id);
        EXPECT_EQ(back.points[k].position, c.points[k].position);
        EXPECT_EQ(back.points[k].normal, c.points[k].normal);
    }
    EXPECT_EQ(ply_name(3), ply_name(3));
    EXPECT_NE(ply_name(3), ply_name(4));
}

TEST(PlyFormat, MalformedFilesAreRejected) {
    FrameCloud c{0, {{0, Vec3(0, 0, 1), Vec3::UnitZ()}}};
    auto lines = lines_of(format_ply(c));
    auto truncated = lines;
    truncated.pop_back();
    EXPECT_THROW(parse_ply(truncated), IoError);
    auto bad = lines;
    bad.back() = "0 0 1 0 0";
    EXPECT_THROW(parse_ply(bad), IoError);
    auto no_magic = lines;
    no_magic.front() = "plx";
    EXPECT_THROW(parse_ply(no_magic), IoError);
}

// ---------------------------------------------------------------- warp blobs

TEST(WarpBlob, RoundTripPreservesEvaluation) {
    CorrespondenceSet cs{0, 1, {}};
    for (int a = 0; a < 10; ++a)
        for (int b = 0; b < 10; ++b) {
            const PixelPoint p{-0.2 + 0.04 * a, -0.2 + 0.04 * b};
            cs.pairs.push_back({p, {1.1 * p.u + 0.2 * p.v * p.v, 0.9 * p.v - 0.1 * p.u * p.v}});
        }
    const WarpPair w = fit_warp_pair(cs);
    const std::vector<WarpModel> models{w.forward, w.inverse};
    const std::string blob = serialize_warps(models);
    EXPECT_EQ(blob.substr(0, 7), "CRSWARP");
    const auto back = deserialize_warps(blob);
    ASSERT_EQ(back.size(), 2u);
    for (const PixelPoint p : {PixelPoint{0.0, 0.0}, PixelPoint{0.13, -0.07}, PixelPoint{-0.18, 0.15}}) {
        EXPECT_EQ(back[0](p).u, w.forward(p).u);
        EXPECT_EQ(back[0](p).v, w.forward(p).v);
        EXPECT_EQ(back[0].jacobian(p), w.forward.jacobian(p));
    }
    EXPECT_EQ(back[1].smoothing, w.inverse.smoothing);
    EXPECT_EQ(back[1].grid.nu, w.inverse.grid.nu);
    EXPECT_EQ(serialize_warps(back), blob);
}

TEST(WarpBlob, CorruptBlobsAreRejected) {
    CorrespondenceSet cs{0, 1, {}};
    for (int a = 0; a < 5; ++a)
        for (int b = 0; b < 5; ++b) cs.pairs.push_back({{0.05 * a, 0.05 * b}, {0.05 * a + 0.01, 0.05 * b}});
    const std::vector<WarpModel> models{fit_warp(cs)};
    const std::string blob = serialize_warps(models);
    EXPECT_THROW(deserialize_warps(blob + "x"), IoError);
    EXPECT_THROW(deserialize_warps(blob.substr(0, blob.size() - 1)), IoError);
    std::string magic = blob;
    magic[0] = 'X';
    EXPECT_THROW(deserialize_warps(magic), IoError);
    std::string version = blob;
    version[8] = 9;
    EXPECT_THROW(deserialize_warps(version), IoError);
}

// ---------------------------------------------------------------- staged output

TEST(StagedOutputs, WritesEverythingAndLeavesNoStaging) {
    const fs::path dir = fresh_dir("staged");
    StagedOutput out;
    out.add("a.txt", "alpha\n");
    out.add("sub/b.bin", std::string("\0\1\2", 3));
    out.commit(dir);
    std::ifstream a(dir / "a.txt");
    std::string line;
    std::getline(a, line);
    EXPECT_EQ(line, "alpha");
    EXPECT_EQ(fs::file_size(dir / "sub/b.bin"), 3u);
    EXPECT_FALSE(fs::exists(dir / ".connrsfm-staging"));
}

TEST(StagedOutputs, DuplicateNameIsAnError) {
    StagedOutput out;
    out.add("x.csv", "1");
    EXPECT_THROW(out.add("x.csv", "2"), IoError);
}

TEST(StagedOutputs, FailedCommandWritesNothing) {
    const fs::path dir = fresh_dir("failed");
    RunConfig c = small_config();
    c.missing_rate = 1.5;
    EXPECT_THROW(generate_outputs(c).commit(dir), ConfigError);
    EXPECT_FALSE(fs::exists(dir));
}

// ---------------------------------------------------------------- evaluate

TEST(Evaluate, GroundTruthAgainstItselfScoresZero) {
    const fs::path dir = fresh_dir("evaluate_self");
    const auto ds = make_dataset(small_config(), 0.2);
    const GroundTruth gt = GroundTruth::from(ds);
    StagedOutput recon;
    for (int f = 0; f < gt.n_frames; ++f) {
        FrameCloud c{f, {}};
        for (int k = 0; k < gt.n_points; ++k) {
            if (!ds.tracks.visible(k, f)) continue;
            c.points.push_back({k, gt.points[gt.slot(k, f)], gt.normals[gt.slot(k, f)]});
        }
        recon.add(ply_name(f), format_ply(c));
    }
    recon.add("groundtruth.txt", format_ground_truth(gt));
    recon.commit(dir);

    const StagedOutput out = evaluate_outputs(dir, dir / "groundtruth.txt");
    ASSERT_EQ(out.files().size(), 2u);
    const auto rows = lines_of(out.files()[0].second);
    EXPECT_EQ(rows.front(), "frame,points,pct3d,shape_deg");
    ASSERT_EQ(rows.size(), 1u + static_cast<std::size_t>(gt.n_frames) + 1u);
    EXPECT_EQ(rows.back().substr(0, 5), "mean,");
    const auto r = evaluate_clouds(load_clouds(dir), gt);
    for (const auto& m : r.frames) {
        EXPECT_NEAR(m.pct3d, 0.0, 1e-9);
        EXPECT_NEAR(m.shape_deg, 0.0, 1e-6);
    }
    EXPECT_EQ(lines_of(out.files()[1].second).front(), "frame,pct3d,shape_deg");
}

TEST(Evaluate, FrameMismatchIsAnError) {
    const auto ds = make_dataset(small_config(), 0.0);
    const GroundTruth gt = GroundTruth::from(ds);
    FrameCloud c{gt.n_frames, {}};
    for (int k = 0; k < 5; ++k) c.points.push_back({k, Vec3(k, 0, 1), Vec3::UnitZ()});
    EXPECT_THROW(evaluate_clouds({c}, gt), IoError);
    c.frame = 0;
    c.points[0].point_id = gt.n_points;
    EXPECT_THROW(evaluate_clouds({c}, gt), IoError);
}

TEST(Evaluate, SweepHasOneRowPerRate) {
    RunConfig c = small_config();
    const auto rows = missing_sweep(c);
    ASSERT_EQ(rows.size(), 8u);
    const auto text = lines_of(format_sweep_csv(rows));
    ASSERT_EQ(text.size(), 9u);
    EXPECT_EQ(text.front(), "rate,pct3d,shape_deg");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_DOUBLE_EQ(rows[i].rate, 0.1 * static_cast<double>(i));
        const auto comma = std::count(text[i + 1].begin(), text[i + 1].end(), ',');
        EXPECT_EQ(comma, 2);
    }
    EXPECT_TRUE(std::isfinite(rows[0].pct3d));
    EXPECT_LT(rows[0].pct3d, 1.5);
}

// ---------------------------------------------------------------- reconstruct / verify

TEST(Reconstruct, WritesCloudsTablesAndWarps) {
    const RunConfig c = small_config();
    const auto ds = make_dataset(c, 0.0);
    const StagedOutput out = reconstruct_outputs(c, TrackFile{ds.tracks, Intrinsics{}});
    std::set<std::string> names;
    for (const auto& f : out.files()) names.insert(f.first);
    for (int f = 0; f < c.frames; ++f) EXPECT_TRUE(names.count(ply_name(f))) << ply_name(f);
    for (const char* n : {"jets.csv", "lambda.csv", "trace.csv", "report.txt"}) EXPECT_TRUE(names.count(n)) << n;
    EXPECT_TRUE(std::any_of(names.begin(), names.end(), [](const std::string& n) { return n.rfind("warps/", 0) == 0; }));
}

TEST(Reconstruct, StaticSceneGivesTheSameCloudEveryFrame) {
    TrackSet t(3, 49);
    for (int k = 0; k < 49; ++k)
        for (int f = 0; f < 3; ++f) {
            const double u = -0.3 + 0.1 * (k % 7), v = -0.3 + 0.1 * (k / 7);
            t.at(k, f) = {u, v};
            t.set_visible(k, f, true);
        }
    const auto r = reconstruct(t, small_config());
    const auto clouds = frame_clouds(r.state);
    ASSERT_EQ(clouds.size(), 3u);
    for (int f = 1; f < 3; ++f) {
        ASSERT_EQ(clouds[f].points.size(), clouds[0].points.size());
        for (std::size_t i = 0; i < clouds[0].points.size(); ++i) {
            EXPECT_NEAR((clouds[f].points[i].position - clouds[0].points[i].position).norm(), 0.0, 1e-9);
        }
    }
}

TEST(VerifyTheorem, ReportIsDeterministicAndInBand) {
    RunConfig c;
    const auto a = verify_theorem(c);
    ASSERT_EQ(a.size(), 10u);
    for (const auto& r : a) {
        EXPECT_LE(r.second_order_percent, 1e-8);
        EXPECT_GE(r.first_order_percent, 5.0);
        EXPECT_LE(r.first_order_percent, 13.0);
    }
    EXPECT_EQ(format_verification_csv(verify_theorem(c)), format_verification_csv(a));
    EXPECT_EQ(lines_of(format_verification_csv(a)).front(), "pair,lambda,first_order_percent,second_order_percent");
}
