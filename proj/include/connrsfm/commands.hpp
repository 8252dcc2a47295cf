#pragma once

// The four pipeline commands behind the command-line tool. Each command
// validates its inputs and computes every output in memory before anything is
// written, then commits the files through StagedOutput.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "connrsfm/cli_io.hpp"
#include "connrsfm/evaluation.hpp"
#include "connrsfm/experiment.hpp"
#include "connrsfm/solver.hpp"
#include "connrsfm/synthetic_data.hpp"

namespace connrsfm {

/// Independent seed for a named random stream (SplitMix64 finalizer), so
/// every random choice derives from the single configured seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kSceneStream = 1, kSampleStream, kNoiseStream, kMissingStream, kVerifyStream, kInitStream };

/// Synthetic dataset described by the configuration (scenes, sampling, noise
/// and missing data), deterministic in the seed.
inline SyntheticDataset make_dataset(const RunConfig& c, double missing_rate) {
    const auto scenes = default_scenes(derive_seed(c.seed, kSceneStream), c.frames);
    SyntheticDataset ds = generate_balls(c.frames, c.points, scenes, derive_seed(c.seed, kSampleStream));
    ds = add_noise(std::move(ds), c.noise_sigma_px, c.intrinsics, derive_seed(c.seed, kNoiseStream));
    if (missing_rate > 0.0) {
        MissingReport rep;
        ds = apply_missing(std::move(ds), missing_rate, derive_seed(c.seed, kMissingStream), &rep);
        if (!rep.dropped_points.empty()) {
            std::cerr << "note: " << rep.dropped_points.size() << " point(s) left with fewer than 2 views\n";
        }
    }
    return ds;
}

// ---------------------------------------------------------------- generate

inline StagedOutput generate_outputs(const RunConfig& c) {
    c.validate();
    const SyntheticDataset ds = make_dataset(c, c.missing_rate);
    StagedOutput out;
    out.add("tracks.txt", format_tracks(ds.tracks, c.intrinsics));
    out.add("groundtruth.txt", format_ground_truth(GroundTruth::from(ds)));
    return out;
}

// ---------------------------------------------------------------- reconstruct

struct Reconstruction {
    ProblemState state;
    ConvergenceTrace trace;
};

inline Reconstruction reconstruct(const TrackSet& tracks, const RunConfig& c) {
    ProblemOptions popt = c.problem;
    popt.threads = c.threads;
    SolverConfig scfg = c.solver;
    scfg.threads = c.threads;
    scfg.seed = derive_seed(c.seed, kInitStream);
    Reconstruction r{build_problem(tracks, popt), {}};
    Solver solver(r.state, scfg, popt);
    r.trace = solver.run();
    return r;
}

inline std::vector<FrameCloud> frame_clouds(const ProblemState& st) {
    std::vector<FrameCloud> out;
    for (int f = 0; f < st.tracks.n_frames; ++f) {
        FrameCloud c{f, {}};
        for (int k = 0; k < st.tracks.n_points; ++k) {
            if (!st.is_active(k, f)) continue;
            c.points.push_back({k, reconstructed_point(st, k, f), reconstructed_normal(st, k, f)});
        }
        out.push_back(std::move(c));
    }
    return out;
}

inline StagedOutput reconstruct_outputs(const RunConfig& c, const TrackFile& in) {
    c.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const Reconstruction r = reconstruct(in.tracks, c);
    const auto& st = r.state;
    StagedOutput out;
    for (const auto& cloud : frame_clouds(st)) out.add(ply_name(cloud.frame), format_ply(cloud));
    out.add("jets.csv", format_jets_csv(st));
    out.add("lambda.csv", format_lambda_csv(st));
    out.add("trace.csv", format_trace_csv(r.trace));
    for (const auto& e : st.edges) {
        const std::vector<WarpModel> models{e.warps.forward, e.warps.inverse};
        out.add("warps/warp_" + std::to_string(e.edge.i) + "_" + std::to_string(e.edge.j) + ".bin",
                serialize_warps(models));
    }
    std::string report = "edges";
    for (const auto& e : st.edges) report += " " + std::to_string(e.edge.i) + "-" + std::to_string(e.edge.j);
    report += "\ndropped_edges";
    for (const auto& e : st.dropped_edges) report += " " + std::to_string(e.i) + "-" + std::to_string(e.j);
    report += "\nunreconstructable_points";
    for (int k : st.unreconstructable_points) report += " " + std::to_string(k);
    report += "\nouter_iterations " + std::to_string(r.trace.rows.size()) + "\nconverged " +
              (r.trace.converged ? "1" : "0") + "\n";
    out.add("report.txt", report);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "reconstruct: " << r.trace.rows.size() << " outer iteration(s), " << (r.trace.converged ? "" : "not ")
              << "converged, " << secs << " s\n";
    return out;
}

// ---------------------------------------------------------------- evaluate

struct EvaluationResult {
    std::vector<FrameMetrics> frames;
    double mean_pct3d = 0.0;
    double mean_shape_deg = 0.0;
};

/// Per-frame metrics of reconstructed clouds against the ground truth,
/// matched by point id; frames with fewer than three points are skipped.
inline EvaluationResult evaluate_clouds(const std::vector<FrameCloud>& clouds, const GroundTruth& gt) {
    EvaluationResult res;
    std::set<int> seen;
    for (const auto& c : clouds) {
        if (c.frame < 0 || c.frame >= gt.n_frames) {
            throw IoError("frame mismatch: reconstruction has frame " + std::to_string(c.frame) +
                          " but the ground truth has " + std::to_string(gt.n_frames) + " frames");
        }
        if (!seen.insert(c.frame).second) throw IoError("frame " + std::to_string(c.frame) + " appears twice");
        std::vector<Vec3> r, g, rn, gn;
        for (const auto& p : c.points) {
            if (p.point_id < 0 || p.point_id >= gt.n_points) {
                throw IoError("point id " + std::to_string(p.point_id) + " is not in the ground truth");
            }
            const auto s = gt.slot(p.point_id, c.frame);
            r.push_back(p.position);
            g.push_back(gt.points[s]);
            rn.push_back(p.normal);
            gn.push_back(gt.normals[s]);
        }
        if (r.size() < 3) continue;
        res.frames.push_back({c.frame, static_cast<int>(r.size()), percent_3d_error(r, g), shape_error(rn, gn)});
    }
    if (res.frames.empty()) throw IoError("no reconstructed frame has three points to evaluate");
    std::sort(res.frames.begin(), res.frames.end(), [](const auto& a, const auto& b) { return a.frame < b.frame; });
    for (const auto& m : res.frames) {
        res.mean_pct3d += m.pct3d;
        res.mean_shape_deg += m.shape_deg;
    }
    res.mean_pct3d /= static_cast<double>(res.frames.size());
    res.mean_shape_deg /= static_cast<double>(res.frames.size());
    return res;
}

inline std::vector<FrameCloud> load_clouds(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("reconstruction directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ply") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .ply files in " + dir.string());
    std::vector<FrameCloud> out;
    for (const auto& f : files) out.push_back(load_ply(f));
    return out;
}

inline std::string format_metrics_csv(const EvaluationResult& r) {
    std::string s = "frame,points,pct3d,shape_deg\n";
    int total = 0;
    for (const auto& m : r.frames) {
        s += std::to_string(m.frame) + "," + std::to_string(m.points) + "," + fmt_double(m.pct3d) + "," +
             fmt_double(m.shape_deg) + "\n";
        total += m.points;
    }
    s += "mean," + std::to_string(total) + "," + fmt_double(r.mean_pct3d) + "," + fmt_double(r.mean_shape_deg) + "\n";
    return s;
}

inline std::string format_error_vs_frame_csv(const EvaluationResult& r) {
    std::string s = "frame,pct3d,shape_deg\n";
    for (const auto& m : r.frames) s += std::to_string(m.frame) + "," + fmt_double(m.pct3d) + "," + fmt_double(m.shape_deg) + "\n";
    return s;
}

inline StagedOutput evaluate_outputs(const std::filesystem::path& recon_dir, const std::filesystem::path& gt_file) {
    const GroundTruth gt = load_ground_truth(gt_file);
    const EvaluationResult r = evaluate_clouds(load_clouds(recon_dir), gt);
    StagedOutput out;
    out.add("metrics.csv", format_metrics_csv(r));
    out.add("error_vs_frame.csv", format_error_vs_frame_csv(r));
    return out;
}

struct SweepRow {
    double rate = 0.0;
    double pct3d = std::nan("");
    double shape_deg = std::nan("");
};

/// Generates the configured dataset at each missing rate, reconstructs it and
/// scores it. A rate at which no reconstruction exists (for instance a
/// disconnected view graph) yields a NaN row and a note on stderr.
inline std::vector<SweepRow> missing_sweep(const RunConfig& c) {
    c.validate();
    std::vector<SweepRow> rows;
    for (double rate : c.sweep_rates) {
        SweepRow row{rate};
        const SyntheticDataset ds = make_dataset(c, rate);
        try {
            const Reconstruction r = reconstruct(ds.tracks, c);
            const auto sc = score_reconstruction(r.state, ds);
            row.pct3d = sc.mean_pct3d;
            row.shape_deg = sc.mean_shape_deg;
        } catch (const GraphError& e) {
            std::cerr << "note: missing rate " << rate << ": " << e.what() << "\n";
        } catch (const IllPosedFitError& e) {
            std::cerr << "note: missing rate " << rate << ": " << e.what() << "\n";
        }
        rows.push_back(row);
    }
    return rows;
}

inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
    std::string s = "rate,pct3d,shape_deg\n";
    for (const auto& r : rows) s += fmt_double(r.rate) + "," + fmt_double(r.pct3d) + "," + fmt_double(r.shape_deg) + "\n";
    return s;
}

// ---------------------------------------------------------------- verify-theorem

struct VerificationRow {
    int pair = 0;
    double radius_ratio = 0.0;
    double first_order_percent = 0.0;
    double second_order_percent = 0.0;
};

/// The connection-invariance index for a reference ball against each of
/// `verify.pairs` matched balls, with full and with first-order-only jets.
inline std::vector<VerificationRow> verify_theorem(const RunConfig& c) {
    c.validate();
    const auto scenes = verification_scenes(derive_seed(c.seed, kVerifyStream), c.verify_pairs);
    const SyntheticDataset ds =
        generate_balls(static_cast<int>(scenes.size()), c.points, scenes, derive_seed(c.seed, kSampleStream));
    std::vector<VerificationRow> rows;
    for (int p = 1; p < static_cast<int>(scenes.size()); ++p) {
        rows.push_back({p, ds.gt_lambda(0, p), verification_index(ds, false, 0, p).index_percent,
                        verification_index(ds, true, 0, p).index_percent});
    }
    return rows;
}

inline std::string format_verification_csv(const std::vector<VerificationRow>& rows) {
    std::string s = "pair,lambda,first_order_percent,second_order_percent\n";
    for (const auto& r : rows) {
        s += std::to_string(r.pair) + "," + fmt_double(r.radius_ratio) + "," + fmt_double(r.first_order_percent) + "," +
             fmt_double(r.second_order_percent) + "\n";
    }
    return s;
}

}  // namespace connrsfm
