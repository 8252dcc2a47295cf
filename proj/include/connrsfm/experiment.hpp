#pragma once

// Scoring a solved problem against a synthetic dataset's ground truth.

#include <cmath>
#include <vector>

#include "connrsfm/evaluation.hpp"
#include "connrsfm/solver.hpp"
#include "connrsfm/synthetic_data.hpp"

namespace connrsfm {

struct ReconstructionScore {
    std::vector<FrameMetrics> frames;
    /// ABSOR scale per frame (recon -> gt); 0 for frames with < 3 points.
    std::vector<double> frame_scale;
    double mean_pct3d = 0.0;
    double mean_shape_deg = 0.0;
};

/// Per-frame %3D and shape errors over the active observations of each frame;
/// frames with fewer than three reconstructed points are skipped.
inline ReconstructionScore score_reconstruction(const ProblemState& st, const SyntheticDataset& ds) {
    ReconstructionScore out;
    out.frame_scale.assign(static_cast<std::size_t>(st.tracks.n_frames), 0.0);
    for (int f = 0; f < st.tracks.n_frames; ++f) {
        std::vector<Vec3> r, g, rn, gn;
        for (int k = 0; k < st.tracks.n_points; ++k) {
            if (!st.is_active(k, f)) continue;
            r.push_back(reconstructed_point(st, k, f));
            g.push_back(ds.gt_points[ds.slot(k, f)]);
            rn.push_back(reconstructed_normal(st, k, f));
            gn.push_back(ds.gt_normals[ds.slot(k, f)]);
        }
        if (r.size() < 3) continue;
        out.frame_scale[f] = absor_align(r, g).scale;
        out.frames.push_back({f, static_cast<int>(r.size()), percent_3d_error(r, g), shape_error(rn, gn)});
    }
    if (out.frames.empty()) throw DomainError("score_reconstruction: no frame has three reconstructed points");
    for (const auto& m : out.frames) {
        out.mean_pct3d += m.pct3d;
        out.mean_shape_deg += m.shape_deg;
    }
    out.mean_pct3d /= static_cast<double>(out.frames.size());
    out.mean_shape_deg /= static_cast<double>(out.frames.size());
    return out;
}

/// Relative error of every link's scale against R_src / R_dst, after moving
/// the estimate into the ground-truth depth gauge. Each frame's depth is
/// known only up to a factor a_f (its ABSOR scale), and a link's estimate
/// carries a_dst / a_src of it.
inline std::vector<double> lambda_errors(const ProblemState& st, const SyntheticDataset& ds,
                                         const ReconstructionScore& score) {
    std::vector<double> err;
    err.reserve(st.links.size());
    for (std::size_t li = 0; li < st.links.size(); ++li) {
        const Link& l = st.links[li];
        const double a_src = score.frame_scale[l.src_frame];
        const double a_dst = score.frame_scale[l.dst_frame];
        if (!(a_src > 0.0) || !(a_dst > 0.0)) continue;
        const double truth = ds.gt_lambda(l.src_frame, l.dst_frame);
        err.push_back(std::abs(st.lambdas[li] * a_src / a_dst - truth) / truth);
    }
    return err;
}

}  // namespace connrsfm
