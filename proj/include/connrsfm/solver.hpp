#pragma once

// Separable reconstruction of depth jets and conformal scales.
//
// Unknowns are one DepthJet per reconstructable observation (point, frame)
// and one conformal scale per (point, edge) link. The pipeline is:
//
//   pre-step   per point: all five derivatives at unit depth with a per-link
//              depth-ratio nuisance variable, solved after fitting curvature
//              and ratios to the starting gradients (points left in a poor local
//              minimum are restarted from their nearest well-fitted
//              neighbours), then second-order terms reset to zero, per-frame
//              depth integration and initial scales;
//   step 1     per point: second-order terms from the connection residuals;
//   step 2     per point: first-order terms from all 21 residuals;
//   step 3     per frame: depth from the first-order terms;
//   step 4     per link:  conformal scale from the scale-sensitive residuals;
//
// with steps 1-4 repeated until the summed variable change drops below sigma.
// Every per-point, per-frame and per-link task reads shared state and writes
// only its own slots, so results are independent of the worker count.

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "connrsfm/conformal.hpp"
#include "connrsfm/depth_integration.hpp"
#include "connrsfm/errors.hpp"
#include "connrsfm/geometry.hpp"
#include "connrsfm/nlls.hpp"
#include "connrsfm/parallel.hpp"
#include "connrsfm/spline_warp.hpp"
#include "connrsfm/tracks.hpp"
#include "connrsfm/view_graph.hpp"

namespace connrsfm {

enum class ResidualScaling { None, LhsMagnitude };
enum class InitMode { Zero, Random };
/// Treatment of the second-order terms inside the pre-step: estimated as
/// nuisance variables alongside (y1, y2), or pinned at zero.
enum class PrestepSecondOrder { Free, Zero };

struct SolverConfig {
    int N_t = 3;
    /// Terminal threshold; a non-positive value selects 1e-4 x variable count.
    double sigma = -1.0;
    int max_outer = 20;
    double damping_init = 1e-3;
    double beta_min = 1e-3;
    int threads = 1;
    int prestep_iterations = 50;
    PrestepSecondOrder prestep_second_order = PrestepSecondOrder::Free;
    ResidualScaling scaling = ResidualScaling::None;
    InitMode init = InitMode::Zero;
    double init_range = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (N_t < 1 || max_outer < 1 || prestep_iterations < 1) {
            throw ConfigError("solver iteration caps must be positive");
        }
        if (!(damping_init > 0.0) || !(beta_min > 0.0)) throw ConfigError("solver damping and beta_min must be positive");
        if (!(init_range >= 0.0)) throw ConfigError("solver init_range must be non-negative");
    }
};

struct ProblemOptions {
    int extra_k = 7;
    SplineGrid grid{};
    double smoothing = -1.0;
    int threads = 1;
};

struct EdgeWarp {
    GraphEdge edge;
    double omega = 1.0;
    WarpPair warps;
};

/// One residual block: point `point` seen in the source and destination
/// frames of edge `edge`.
struct Link {
    int point = 0;
    int edge = 0;
    int src_frame = 0;
    int dst_frame = 0;
    WarpJet wj;
};

struct ProblemState {
    TrackSet tracks;
    SelectedSubgraph graph;
    std::vector<EdgeWarp> edges;
    std::vector<Link> links;
    std::vector<std::vector<int>> point_links;
    std::vector<std::vector<int>> point_frames;
    std::vector<DepthJet> jets;
    std::vector<double> lambdas;
    std::vector<std::uint8_t> active;
    std::vector<int> unreconstructable_points;
    /// Edges of the selection whose warp could not be fitted.
    std::vector<GraphEdge> dropped_edges;

    std::size_t slot(int point, int frame) const { return tracks.slot(point, frame); }
    bool is_active(int point, int frame) const { return active[slot(point, frame)] != 0; }
    bool point_active(int point) const { return !point_links[point].empty(); }

    Observation observation(int point, int frame) const {
        return {tracks.at(point, frame), jets[slot(point, frame)]};
    }

    std::size_t active_observations() const {
        return static_cast<std::size_t>(std::count(active.begin(), active.end(), std::uint8_t{1}));
    }
    std::size_t variable_count() const { return 6 * active_observations() + lambdas.size(); }
};

struct TraceRow {
    int iteration = 0;
    double terminal = 0.0;
    double residual_norm = 0.0;
    double seconds = 0.0;
};

struct ConvergenceTrace {
    std::vector<TraceRow> rows;
    bool converged = false;
    double sigma = 0.0;
};

/// Selects edges, fits warps and enumerates residual links. Edges with fewer
/// than the minimum number of co-visible tracks are not eligible.
inline ProblemState build_problem(const TrackSet& tracks, const ProblemOptions& opt = {}) {
    if (tracks.n_frames < 2) throw GraphError("reconstruction needs at least two frames");
    MatchGraph g = build_match_graph(tracks);
    for (int i = 0; i < g.n_c; ++i)
        for (int j = i + 1; j < g.n_c; ++j)
            if (g.weights(i, j) < kMinCorrespondences) g.set(i, j, 0.0);

    ProblemState st;
    st.tracks = tracks;
    st.graph = select_edges(g, opt.extra_k);
    const auto& sel = st.graph.edges;

    std::vector<std::optional<WarpPair>> fitted(sel.size());
    std::vector<std::string> errors(sel.size());
    parallel_for(static_cast<int>(sel.size()), opt.threads, [&](int e) {
        CorrespondenceSet cs{sel[e].i, sel[e].j, {}};
        for (int k = 0; k < tracks.n_points; ++k)
            if (tracks.visible(k, sel[e].i) && tracks.visible(k, sel[e].j)) {
                cs.pairs.push_back({tracks.at(k, sel[e].i), tracks.at(k, sel[e].j)});
            }
        try {
            fitted[e] = fit_warp_pair(cs, opt.grid, opt.smoothing);
        } catch (const Error&) {
            fitted[e].reset();
        }
    });
    for (std::size_t e = 0; e < sel.size(); ++e) {
        if (!fitted[e]) {
            st.dropped_edges.push_back(sel[e]);
            continue;
        }
        st.edges.push_back({sel[e], edge_omega(g, sel[e]), std::move(*fitted[e])});
    }

    const std::size_t n_slots = static_cast<std::size_t>(tracks.n_frames) * tracks.n_points;
    st.active.assign(n_slots, 0);
    st.jets.assign(n_slots, DepthJet{});
    st.point_links.assign(static_cast<std::size_t>(tracks.n_points), {});
    st.point_frames.assign(static_cast<std::size_t>(tracks.n_points), {});
    for (int k = 0; k < tracks.n_points; ++k) {
        for (int e = 0; e < static_cast<int>(st.edges.size()); ++e) {
            const auto& ed = st.edges[e].edge;
            if (!tracks.visible(k, ed.i) || !tracks.visible(k, ed.j)) continue;
            try {
                Link l{k, e, ed.i, ed.j, warp_jet(st.edges[e].warps.forward, st.edges[e].warps.inverse, tracks.at(k, ed.i))};
                st.point_links[k].push_back(static_cast<int>(st.links.size()));
                st.links.push_back(l);
                st.active[st.slot(k, ed.i)] = 1;
                st.active[st.slot(k, ed.j)] = 1;
            } catch (const Error&) {
                // folded or out-of-domain warp at this point: no residual block
            }
        }
        for (int f = 0; f < tracks.n_frames; ++f)
            if (st.active[st.slot(k, f)]) st.point_frames[k].push_back(f);
        if (st.point_links[k].empty()) st.unreconstructable_points.push_back(k);
    }
    if (st.links.empty()) throw GraphError("no point is visible in two frames joined by a usable warp");
    st.lambdas.assign(st.links.size(), 1.0);
    return st;
}

namespace detail {

enum class BlockMode { Full, Metric, Connection, ScaleSensitive };

inline int block_size(BlockMode m) {
    switch (m) {
        case BlockMode::Full: return kBlockResiduals;
        case BlockMode::Metric: return kMetricResiduals;
        case BlockMode::Connection: return kConnectionResiduals;
        case BlockMode::ScaleSensitive: return kMetricResiduals + 8;
    }
    return 0;
}

/// Writes the residuals selected by `mode` for one link.
inline void link_block(const Link& l, const Observation& src, const Observation& dst, const ConnectionMatrix* gs,
                       const ConnectionMatrix* gd, double lambda, double omega, const ResidualScale& sc,
                       BlockMode mode, double* out) {
    const double sw = std::sqrt(omega);
    const ConformalScale lam{lambda};
    int n = 0;
    if (mode != BlockMode::Connection) {
        const Vec3d m = metric_residuals(src, dst, l.wj, lam) * (sw / sc.metric);
        for (int k = 0; k < 3; ++k) out[n++] = m[k];
    }
    if (mode == BlockMode::Metric) return;
    const Vec18 c = connection_residuals(*gs, *gd, l.wj, lam);
    if (mode == BlockMode::ScaleSensitive) {
        for (int id = 0; id < 2; ++id) {
            const double s = sw / (id == 0 ? sc.conn_u : sc.conn_v);
            for (int e : kScaleSensitiveEntries) out[n++] = c[9 * id + e] * s;
        }
        return;
    }
    for (int k = 0; k < 9; ++k) out[n++] = c[k] * (sw / sc.conn_u);
    for (int k = 9; k < 18; ++k) out[n++] = c[k] * (sw / sc.conn_v);
}

inline ResidualScale frozen_scale(const ProblemState& st, const Link& l, ResidualScaling mode) {
    if (mode == ResidualScaling::None) return {};
    const Observation src = st.observation(l.point, l.src_frame);
    return lhs_magnitude_scale(src, connection(src.pixel, src.jet), l.wj, {st.lambdas[&l - st.links.data()]});
}

}  // namespace detail

/// Per-point sub-problem over a selection of jet components.
class PointProblem {
public:
    enum class Vars {
        FirstOrder,           // (y1, y2) per frame
        SecondOrder,          // (y11, y12, y22) per frame
        FirstOrderWithRatio,  // (y1, y2) per frame, depth ratio per link
        AllWithRatio          // (y1, y2, y11, y12, y22) per frame, depth ratio per link
    };

    PointProblem(const ProblemState& st, int point, Vars vars, detail::BlockMode mode,
                 std::vector<ResidualScale> scales, bool unit_depth = false)
        : st_(st), point_(point), vars_(vars), mode_(mode), scales_(std::move(scales)), unit_depth_(unit_depth) {
        const auto& frames = st.point_frames[point];
        local_.assign(static_cast<std::size_t>(st.tracks.n_frames), -1);
        for (int a = 0; a < static_cast<int>(frames.size()); ++a) local_[frames[a]] = a;
    }

    int frame_count() const { return static_cast<int>(st_.point_frames[point_].size()); }
    int link_count() const { return static_cast<int>(st_.point_links[point_].size()); }
    bool has_ratios() const { return vars_ == Vars::FirstOrderWithRatio || vars_ == Vars::AllWithRatio; }
    int per_frame() const {
        switch (vars_) {
            case Vars::FirstOrder:
            case Vars::FirstOrderWithRatio: return 2;
            case Vars::SecondOrder: return 3;
            case Vars::AllWithRatio: return 5;
        }
        return 0;
    }
    int ratio_offset() const { return per_frame() * frame_count(); }
    int size() const { return ratio_offset() + (has_ratios() ? link_count() : 0); }

    VecX pack(const std::vector<DepthJet>& jets, const std::vector<double>* ratios = nullptr) const {
        VecX x(size());
        const auto& frames = st_.point_frames[point_];
        const int n = per_frame();
        for (int a = 0; a < frame_count(); ++a) {
            const DepthJet& j = jets[st_.slot(point_, frames[a])];
            const std::array<double, 5> all{j.y1, j.y2, j.y11, j.y12, j.y22};
            const int first = vars_ == Vars::SecondOrder ? 2 : 0;
            for (int c = 0; c < n; ++c) x[n * a + c] = all[first + c];
        }
        if (has_ratios()) {
            for (int b = 0; b < link_count(); ++b) x[ratio_offset() + b] = ratios ? (*ratios)[b] : 1.0;
        }
        return x;
    }

    DepthJet jet_at(const VecX& x, int frame) const {
        DepthJet j = st_.jets[st_.slot(point_, frame)];
        const int n = per_frame();
        const double* v = x.data() + n * local_[frame];
        switch (vars_) {
            case Vars::SecondOrder:
                j.y11 = v[0];
                j.y12 = v[1];
                j.y22 = v[2];
                break;
            case Vars::AllWithRatio:
                j.y11 = v[2];
                j.y12 = v[3];
                j.y22 = v[4];
                [[fallthrough]];
            case Vars::FirstOrder:
            case Vars::FirstOrderWithRatio:
                j.y1 = v[0];
                j.y2 = v[1];
                break;
        }
        if (unit_depth_) j.beta = 1.0;
        return j;
    }

    double ratio_at(const VecX& x, int b) const { return x[ratio_offset() + b]; }

    /// Indices of the second-order terms and depth ratios in x.
    std::vector<int> second_order_and_ratio_indices() const {
        std::vector<int> idx;
        if (per_frame() == 5) {
            for (int a = 0; a < frame_count(); ++a)
                for (int c = 2; c < 5; ++c) idx.push_back(5 * a + c);
        }
        if (has_ratios()) {
            for (int b = 0; b < link_count(); ++b) idx.push_back(ratio_offset() + b);
        }
        return idx;
    }

    VecX residuals(const VecX& x) const {
        const int nb = detail::block_size(mode_);
        VecX r(nb * link_count());
        const auto& frames = st_.point_frames[point_];
        std::vector<DepthJet> jets(frames.size());
        std::vector<ConnectionMatrix> gam(frames.size());
        const bool need_gamma = mode_ != detail::BlockMode::Metric;
        for (std::size_t a = 0; a < frames.size(); ++a) {
            jets[a] = jet_at(x, frames[a]);
            if (need_gamma) gam[a] = connection(st_.tracks.at(point_, frames[a]), jets[a]);
        }
        for (int b = 0; b < link_count(); ++b) {
            const int li = st_.point_links[point_][b];
            const Link& l = st_.links[li];
            const int as = local_[l.src_frame];
            const int ad = local_[l.dst_frame];
            const Observation src{st_.tracks.at(point_, l.src_frame), jets[as]};
            const Observation dst{st_.tracks.at(point_, l.dst_frame), jets[ad]};
            const double lambda = has_ratios() ? ratio_at(x, b) : st_.lambdas[li];
            detail::link_block(l, src, dst, &gam[as], &gam[ad], lambda, st_.edges[l.edge].omega, scales_[b], mode_,
                               r.data() + nb * b);
        }
        return r;
    }

    Bounds bounds() const {
        if (!has_ratios()) return {};
        VecX lo = VecX::Constant(size(), -std::numeric_limits<double>::infinity());
        lo.tail(link_count()).setConstant(kMinLambda);
        return Bounds::lower_only(lo);
    }

private:
    const ProblemState& st_;
    int point_;
    Vars vars_;
    detail::BlockMode mode_;
    std::vector<ResidualScale> scales_;
    bool unit_depth_;
    std::vector<int> local_;
};

namespace detail {

inline std::vector<ResidualScale> point_scales(const ProblemState& st, int k, ResidualScaling mode,
                                               bool unit_depth = false, const std::vector<double>* ratios = nullptr) {
    std::vector<ResidualScale> out;
    const auto& links = st.point_links[k];
    for (std::size_t b = 0; b < links.size(); ++b) {
        const Link& l = st.links[links[b]];
        if (mode == ResidualScaling::None) {
            out.emplace_back();
            continue;
        }
        Observation src = st.observation(k, l.src_frame);
        if (unit_depth) src.jet.beta = 1.0;
        const double lambda = ratios ? (*ratios)[b] : st.lambdas[links[b]];
        out.push_back(lhs_magnitude_scale(src, connection(src.pixel, src.jet), l.wj, {lambda}));
    }
    return out;
}

inline NllsOptions nlls_options(const SolverConfig& cfg, int cap) {
    NllsOptions o;
    o.max_iterations = cap;
    o.damping_init = cfg.damping_init;
    return o;
}

}  // namespace detail

/// Step 3 for one frame: integrates (y1, y2) of its active observations.
/// Depths are in the frame's gauge (geometric mean 1) and bounded below by
/// beta_min.
inline void integrate_frame_depth(ProblemState& st, int frame, const ProblemOptions& popt, double beta_min = 1e-3) {
    std::vector<GradientSample> samples;
    std::vector<std::size_t> slots;
    for (int k = 0; k < st.tracks.n_points; ++k) {
        if (!st.is_active(k, frame)) continue;
        const auto s = st.slot(k, frame);
        samples.push_back({st.tracks.pixels[s], st.jets[s].y1, st.jets[s].y2});
        slots.push_back(s);
    }
    if (samples.empty()) return;
    if (samples.size() < 3) throw IllPosedFitError("frame " + std::to_string(frame) + " has fewer than 3 points");
    const auto fit = integrate_log_depth(samples, popt.grid, popt.smoothing);
    for (std::size_t n = 0; n < slots.size(); ++n) st.jets[slots[n]].beta = std::max(fit.beta[n], beta_min);
}

class Solver {
public:
    Solver(ProblemState& st, SolverConfig cfg, ProblemOptions popt = {})
        : st_(st), cfg_(std::move(cfg)), popt_(std::move(popt)) {
        cfg_.validate();
        popt_.threads = cfg_.threads;
    }

    ProblemState& state() { return st_; }

    void initialize() {
        std::mt19937_64 rng(cfg_.seed);
        std::uniform_real_distribution<double> u(-cfg_.init_range, cfg_.init_range);
        for (std::size_t s = 0; s < st_.jets.size(); ++s) {
            DepthJet j;
            if (cfg_.init == InitMode::Random) {
                j.y1 = u(rng);
                j.y2 = u(rng);
            }
            st_.jets[s] = j;
        }
        std::fill(st_.lambdas.begin(), st_.lambdas.end(), 1.0);
    }

    void prestep() {
        const int np = st_.tracks.n_points;
        const int nf = st_.tracks.n_frames;
        const int ne = static_cast<int>(st_.edges.size());
        const auto vars = cfg_.prestep_second_order == PrestepSecondOrder::Free ? PointProblem::Vars::AllWithRatio
                                                                                 : PointProblem::Vars::FirstOrderWithRatio;
        // Per point: solved jets indexed by frame, ratios indexed by edge and
        // the final cost per residual.
        std::vector<std::vector<DepthJet>> jets(static_cast<std::size_t>(np));
        std::vector<std::vector<double>> ratios(static_cast<std::size_t>(np));
        std::vector<double> cost(static_cast<std::size_t>(np), 0.0);

        auto solve = [&](int k, const std::vector<DepthJet>* jet_init, const std::vector<double>* ratio_init) {
            const auto scales = detail::point_scales(st_, k, cfg_.scaling, true);
            PointProblem pp(st_, k, vars, detail::BlockMode::Full, scales, true);
            std::vector<double> r0;
            const auto& links = st_.point_links[k];
            for (int li : links) r0.push_back(ratio_init ? (*ratio_init)[st_.links[li].edge] : 1.0);
            VecX x0 = pp.pack(st_.jets, &r0);
            if (jet_init) {
                std::vector<DepthJet> local = st_.jets;
                for (int f : st_.point_frames[k]) local[st_.slot(k, f)] = (*jet_init)[f];
                x0 = pp.pack(local, &r0);
            }
            const auto opts = detail::nlls_options(cfg_, cfg_.prestep_iterations);
            const auto fn = [&](const VecX& x) { return pp.residuals(x); };
            if (vars == PointProblem::Vars::AllWithRatio) {
                // Fit curvature and ratios to the starting gradients first; a
                // joint solve from flat curvature drifts into a false basin.
                x0 = nlls_solve_subset(fn, x0, pp.second_order_and_ratio_indices(), pp.bounds(), opts).x;
            }
            const auto res = nlls_solve(fn, x0, pp.bounds(), opts);
            std::vector<DepthJet> j(static_cast<std::size_t>(nf));
            for (int f : st_.point_frames[k]) j[f] = pp.jet_at(res.x, f);
            std::vector<double> r(static_cast<std::size_t>(ne), 1.0);
            for (std::size_t b = 0; b < links.size(); ++b) r[st_.links[links[b]].edge] = pp.ratio_at(res.x, static_cast<int>(b));
            return std::tuple{std::move(j), std::move(r), res.final_cost / static_cast<double>(std::max<Eigen::Index>(1, pp.residuals(res.x).size()))};
        };

        parallel_for(np, cfg_.threads, [&](int k) {
            if (!st_.point_active(k)) return;
            std::tie(jets[k], ratios[k], cost[k]) = solve(k, nullptr, nullptr);
        });
        restart_outliers(jets, ratios, cost, solve);

        std::vector<std::vector<DepthJet>> out(static_cast<std::size_t>(np));
        for (int k = 0; k < np; ++k)
            for (int f : st_.point_frames[k]) out[k].push_back(jets[k][f]);
        write_point_jets(out);
        step3_depth();
        // Scales come from the full pre-step jets: with the curvature zeroed
        // the connection estimates are biased, and a poor starting scale
        // drags the first outer iterations away from the pre-step solution.
        parallel_for(static_cast<int>(st_.links.size()), cfg_.threads, [&](int li) {
            const Link& l = st_.links[li];
            try {
                st_.lambdas[li] = prestep_lambda(st_.observation(l.point, l.src_frame),
                                                 st_.observation(l.point, l.dst_frame), l.wj)
                                      .value;
            } catch (const DegenerateGeometryError&) {
                st_.lambdas[li] = 1.0;
            }
        });
        // Step 1 starts from zero curvature.
        for (std::size_t s = 0; s < st_.jets.size(); ++s) st_.jets[s].y11 = st_.jets[s].y12 = st_.jets[s].y22 = 0.0;
    }

    void step1_second_order() { refine_points(PointProblem::Vars::SecondOrder, detail::BlockMode::Connection); }

    void step2_first_order() { refine_points(PointProblem::Vars::FirstOrder, detail::BlockMode::Full); }

    void step3_depth() {
        parallel_for(st_.tracks.n_frames, cfg_.threads, [&](int f) { integrate_frame_depth(st_, f, popt_, cfg_.beta_min); });
    }

    /// Residuals driving the scale of one link: metric entries and the
    /// connection entries outside the scale-free set.
    VecX step4_residuals(int link, double lambda, const ResidualScale& sc = {}) const {
        const Link& l = st_.links[link];
        const Observation src = st_.observation(l.point, l.src_frame);
        const Observation dst = st_.observation(l.point, l.dst_frame);
        const ConnectionMatrix gs = connection(src.pixel, src.jet);
        const ConnectionMatrix gd = connection(dst.pixel, dst.jet);
        VecX r(detail::block_size(detail::BlockMode::ScaleSensitive));
        detail::link_block(l, src, dst, &gs, &gd, lambda, st_.edges[l.edge].omega, sc,
                           detail::BlockMode::ScaleSensitive, r.data());
        return r;
    }

    void step4_lambda() {
        std::vector<double> next(st_.lambdas.size());
        parallel_for(static_cast<int>(st_.links.size()), cfg_.threads, [&](int li) {
            const ResidualScale sc = detail::frozen_scale(st_, st_.links[li], cfg_.scaling);
            VecX x0(1);
            x0[0] = st_.lambdas[li];
            const auto res = nlls_solve([&](const VecX& x) { return step4_residuals(li, x[0], sc); }, x0,
                                        Bounds::lower_only(VecX::Constant(1, kMinLambda)),
                                        detail::nlls_options(cfg_, cfg_.N_t));
            next[li] = res.x[0];
        });
        st_.lambdas = std::move(next);
    }

    /// Sum of squared (weighted, unscaled) 21-residual blocks over all links.
    double residual_norm() const {
        std::vector<double> part(st_.links.size());
        parallel_for(static_cast<int>(st_.links.size()), cfg_.threads, [&](int li) {
            const Link& l = st_.links[li];
            const Observation src = st_.observation(l.point, l.src_frame);
            const Observation dst = st_.observation(l.point, l.dst_frame);
            const ConnectionMatrix gs = connection(src.pixel, src.jet);
            const ConnectionMatrix gd = connection(dst.pixel, dst.jet);
            Vec21 r;
            detail::link_block(l, src, dst, &gs, &gd, st_.lambdas[li], st_.edges[l.edge].omega, {},
                               detail::BlockMode::Full, r.data());
            part[li] = r.squaredNorm();
        });
        return std::sqrt(std::accumulate(part.begin(), part.end(), 0.0));
    }

    double sigma() const {
        return cfg_.sigma > 0.0 ? cfg_.sigma : 1e-4 * static_cast<double>(st_.variable_count());
    }

    ConvergenceTrace run() {
        if (st_.unreconstructable_points.size() == static_cast<std::size_t>(st_.tracks.n_points)) {
            throw GraphError("every point is unreconstructable");
        }
        initialize();
        prestep();
        ConvergenceTrace trace;
        trace.sigma = sigma();
        for (int k = 1; k <= cfg_.max_outer; ++k) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto jets_prev = st_.jets;
            const auto lambdas_prev = st_.lambdas;
            step1_second_order();
            step2_first_order();
            step3_depth();
            step4_lambda();
            double term = 0.0;
            for (std::size_t s = 0; s < st_.jets.size(); ++s) {
                if (!st_.active[s]) continue;
                const DepthJet& a = st_.jets[s];
                const DepthJet& b = jets_prev[s];
                const Eigen::Matrix<double, 6, 1> d(a.beta - b.beta, a.y1 - b.y1, a.y2 - b.y2, a.y11 - b.y11,
                                                    a.y12 - b.y12, a.y22 - b.y22);
                term += d.norm();
            }
            for (std::size_t li = 0; li < st_.lambdas.size(); ++li) term += std::abs(st_.lambdas[li] - lambdas_prev[li]);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            trace.rows.push_back({k, term, residual_norm(), secs});
            if (term < trace.sigma) {
                trace.converged = true;
                break;
            }
        }
        return trace;
    }

private:
    /// Points whose pre-step cost is far above the median are re-solved from
    /// the solutions of their nearest well-fitted neighbours (in the image of
    /// their first active frame); the lowest-cost result is kept. Candidates
    /// are visited in a fixed order, so the outcome is deterministic.
    template <class SolveFn>
    void restart_outliers(std::vector<std::vector<DepthJet>>& jets, std::vector<std::vector<double>>& ratios,
                          std::vector<double>& cost, SolveFn&& solve) {
        const int np = st_.tracks.n_points;
        std::vector<double> active_costs;
        for (int k = 0; k < np; ++k)
            if (st_.point_active(k)) active_costs.push_back(cost[k]);
        if (active_costs.size() < 2) return;
        auto mid = active_costs.begin() + static_cast<std::ptrdiff_t>(active_costs.size() / 2);
        std::nth_element(active_costs.begin(), mid, active_costs.end());
        const double threshold = std::max(kRestartCostFactor * *mid, kRestartCostFloor);
        std::vector<int> good, bad;
        for (int k = 0; k < np; ++k) {
            if (!st_.point_active(k)) continue;
            (cost[k] > threshold ? bad : good).push_back(k);
        }
        if (bad.empty() || good.empty()) return;
        parallel_for(static_cast<int>(bad.size()), cfg_.threads, [&](int b) {
            const int k = bad[b];
            const int f0 = st_.point_frames[k].front();
            const PixelPoint p0 = st_.tracks.at(k, f0);
            std::vector<std::pair<double, int>> cand;
            for (int m : good)
                if (st_.is_active(m, f0)) cand.emplace_back((st_.tracks.at(m, f0).vec() - p0.vec()).squaredNorm(), m);
            const std::size_t n = std::min<std::size_t>(kRestartNeighbours, cand.size());
            std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end());
            for (std::size_t c = 0; c < n; ++c) {
                const int m = cand[c].second;
                std::vector<DepthJet> init = jets[k];
                for (int f : st_.point_frames[k])
                    if (st_.is_active(m, f)) init[f] = jets[m][f];
                auto [j, r, c2] = solve(k, &init, &ratios[m]);
                if (c2 < cost[k]) {
                    jets[k] = std::move(j);
                    ratios[k] = std::move(r);
                    cost[k] = c2;
                }
                if (cost[k] <= threshold) break;
            }
        });
    }

    static constexpr double kRestartCostFactor = 100.0;
    static constexpr double kRestartCostFloor = 1e-12;
    static constexpr std::size_t kRestartNeighbours = 5;

    void write_point_jets(const std::vector<std::vector<DepthJet>>& out) {
        for (int k = 0; k < st_.tracks.n_points; ++k) {
            const auto& frames = st_.point_frames[k];
            for (std::size_t a = 0; a < out[k].size(); ++a) st_.jets[st_.slot(k, frames[a])] = out[k][a];
        }
    }

    void refine_points(PointProblem::Vars vars, detail::BlockMode mode) {
        const int np = st_.tracks.n_points;
        std::vector<std::vector<DepthJet>> out(static_cast<std::size_t>(np));
        parallel_for(np, cfg_.threads, [&](int k) {
            if (!st_.point_active(k)) return;
            PointProblem pp(st_, k, vars, mode, detail::point_scales(st_, k, cfg_.scaling));
            const auto res = nlls_solve([&](const VecX& x) { return pp.residuals(x); }, pp.pack(st_.jets), pp.bounds(),
                                        detail::nlls_options(cfg_, cfg_.N_t));
            for (int f : st_.point_frames[k]) out[k].push_back(pp.jet_at(res.x, f));
        });
        write_point_jets(out);
    }

    ProblemState& st_;
    SolverConfig cfg_;
    ProblemOptions popt_;
};

/// Reconstructed 3D point and unit normal of an active observation.
inline Vec3 reconstructed_point(const ProblemState& st, int point, int frame) {
    return embed(st.tracks.at(point, frame), st.jets[st.slot(point, frame)].beta);
}

inline Vec3 reconstructed_normal(const ProblemState& st, int point, int frame) {
    return normal_from_jet(st.tracks.at(point, frame), st.jets[st.slot(point, frame)]);
}

}  // namespace connrsfm
