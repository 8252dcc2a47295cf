#pragma once

// File formats and run configuration.
//
// Text formats are line oriented and print doubles with 17 significant
// digits, so values round-trip exactly and identical results give identical
// bytes. All readers validate completely before returning.
//
// Track file (version 1):
//     connrsfm-tracks 1
//     frames <n_frames>
//     points <n_points>
//     intrinsics normalized | intrinsics <fx> <fy> <cx> <cy>
//     <point> <frame> <u> <v>          one row per visible observation
// Coordinates are pixels when intrinsics are given, retinal otherwise.
//
// Ground-truth sidecar (version 1):
//     connrsfm-groundtruth 1
//     frames <n_frames>
//     points <n_points>
//     scene <frame> <cx> <cy> <cz> <radius> <sx> <sy> <sz> <r00> ... <r22>
//     obs <point> <frame> <u> <v> <beta> <y1> <y2> <y11> <y12> <y22> <x> <y> <z> <nx> <ny> <nz>
// with one obs row per (point, frame) slot, visible or not; (u, v) are the
// noise-free retinal coordinates.
//
// Warp blob (version 1, little endian): magic "CRSWARP\0", uint32 version,
// uint32 model count, then per model: int32 nu, nv, roughness; float64 box
// u0 u1 v0 v1, smoothing, residual rms; uint32 coefficient count; float64
// u-target coefficients; float64 v-target coefficients.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "connrsfm/errors.hpp"
#include "connrsfm/solver.hpp"
#include "connrsfm/spline_warp.hpp"
#include "connrsfm/synthetic_data.hpp"
#include "connrsfm/tracks.hpp"

namespace connrsfm {

// ---------------------------------------------------------------- helpers

inline std::string fmt_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        const std::size_t j = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        if (i > j) out.push_back(line.substr(j, i - j));
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

template <class T>
T parse_number(std::string_view s, const std::string& what) {
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw IoError(what + ": cannot parse '" + std::string(s) + "' as a number");
    }
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(v)) throw IoError(what + ": non-finite value '" + std::string(s) + "'");
    }
    return v;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Reads "<key> <values...>" header lines in order.
class LineCursor {
public:
    LineCursor(std::vector<std::string> lines, std::string name) : lines_(std::move(lines)), name_(std::move(name)) {}

    bool done() {
        skip_blank();
        return pos_ >= lines_.size();
    }

    std::vector<std::string_view> next() {
        skip_blank();
        if (pos_ >= lines_.size()) throw IoError(name_ + ": unexpected end of file");
        line_no_ = pos_ + 1;
        return split_ws(lines_[pos_++]);
    }

    std::vector<std::string_view> expect(std::string_view key, std::size_t n_values) {
        auto f = next();
        if (f.empty() || f[0] != key || f.size() != n_values + 1) {
            throw IoError(where() + "expected '" + std::string(key) + "' with " + std::to_string(n_values) +
                          " value(s)");
        }
        return f;
    }

    std::string where() const { return name_ + ":" + std::to_string(line_no_) + ": "; }

private:
    void skip_blank() {
        while (pos_ < lines_.size()) {
            const auto t = trim(lines_[pos_]);
            if (!t.empty() && t.front() != '#') return;
            ++pos_;
        }
    }

    std::vector<std::string> lines_;
    std::string name_;
    std::size_t pos_ = 0;
    std::size_t line_no_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------- config

/// Run configuration. Every key of the text format maps to one field; see
/// `apply_config_entry` for the key names.
struct RunConfig {
    std::uint64_t seed = 42;
    int threads = 0;  // 0: hardware concurrency

    int frames = 7;
    int points = 100;
    Intrinsics intrinsics{};
    double noise_sigma_px = 0.0;
    double missing_rate = 0.0;

    ProblemOptions problem{};
    SolverConfig solver{};

    int verify_pairs = 10;
    std::vector<double> sweep_rates{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};

    std::string tracks_path;
    std::string recon_path;
    std::string gt_path;

    void validate() const {
        if (frames < 2) throw ConfigError("generate.frames must be at least 2");
        if (points < 3) throw ConfigError("generate.points must be at least 3");
        if (threads < 0) throw ConfigError("threads must be non-negative");
        if (!(noise_sigma_px >= 0.0)) throw ConfigError("noise.sigma_px must be non-negative");
        if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw ConfigError("missing.rate must lie in [0, 1)");
        if (noise_sigma_px > 0.0 && intrinsics.normalized) {
            throw ConfigError("noise.sigma_px > 0 needs pixel intrinsics (intrinsics = fx fy cx cy)");
        }
        if (!intrinsics.normalized && !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0)) {
            throw ConfigError("intrinsics fx and fy must be positive");
        }
        if (problem.extra_k < 0) throw ConfigError("edges.extra_k must be non-negative");
        if ((problem.grid.nu > 0 && problem.grid.nu < 4) || (problem.grid.nv > 0 && problem.grid.nv < 4)) {
            throw ConfigError("warp.grid must be 0 (automatic) or at least 4");
        }
        if (verify_pairs < 1) throw ConfigError("verify.pairs must be positive");
        for (double r : sweep_rates)
            if (!(r >= 0.0 && r < 1.0)) throw ConfigError("sweep.rates entries must lie in [0, 1)");
        solver.validate();
    }
};

namespace detail {

inline double config_double(std::string_view v, const std::string& key) {
    try {
        return parse_number<double>(v, "config key " + key);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
}

inline long long config_int(std::string_view v, const std::string& key) {
    try {
        return parse_number<long long>(v, "config key " + key);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
}

template <class E>
E config_enum(std::string_view v, const std::string& key, std::initializer_list<std::pair<std::string_view, E>> opts) {
    std::string names;
    for (const auto& [name, value] : opts) {
        if (v == name) return value;
        names += (names.empty() ? "" : "|") + std::string(name);
    }
    throw ConfigError("config key " + key + ": expected " + names + ", got '" + std::string(v) + "'");
}

}  // namespace detail

/// Sets one configuration key; unknown keys are rejected.
inline void apply_config_entry(RunConfig& c, const std::string& key, std::string_view value) {
    using namespace detail;
    const auto words = split_ws(value);
    if (words.empty()) throw ConfigError("config key " + key + " has no value");
    const auto one = [&] {
        if (words.size() != 1) throw ConfigError("config key " + key + " takes a single value");
        return words[0];
    };
    const auto positive_int = [&] {
        const long long v = config_int(one(), key);
        if (v < 1 || v > 1000000000) throw ConfigError("config key " + key + " must be a positive integer");
        return static_cast<int>(v);
    };
    const auto auto_or_double = [&] {
        const auto w = one();
        return w == "auto" ? -1.0 : config_double(w, key);
    };

    if (key == "seed") {
        const long long v = config_int(one(), key);
        if (v < 0) throw ConfigError("seed must be non-negative");
        c.seed = static_cast<std::uint64_t>(v);
    } else if (key == "threads") {
        const long long v = config_int(one(), key);
        if (v < 0 || v > 4096) throw ConfigError("threads must lie in [0, 4096]");
        c.threads = static_cast<int>(v);
    } else if (key == "generate.frames") {
        c.frames = positive_int();
    } else if (key == "generate.points") {
        c.points = positive_int();
    } else if (key == "intrinsics") {
        if (words.size() == 1 && words[0] == "normalized") {
            c.intrinsics = Intrinsics{};
        } else if (words.size() == 4) {
            c.intrinsics = Intrinsics{config_double(words[0], key), config_double(words[1], key),
                                      config_double(words[2], key), config_double(words[3], key), false};
        } else {
            throw ConfigError("intrinsics must be 'normalized' or 'fx fy cx cy'");
        }
    } else if (key == "noise.sigma_px") {
        c.noise_sigma_px = config_double(one(), key);
    } else if (key == "missing.rate") {
        c.missing_rate = config_double(one(), key);
    } else if (key == "edges.extra_k") {
        const long long v = config_int(one(), key);
        if (v < 0) throw ConfigError("edges.extra_k must be non-negative");
        c.problem.extra_k = static_cast<int>(v);
    } else if (key == "warp.grid") {
        const auto w = one();
        if (w == "auto") {
            c.problem.grid.nu = c.problem.grid.nv = 0;
        } else {
            const auto x = w.find('x');
            if (x == std::string_view::npos) {
                c.problem.grid.nu = c.problem.grid.nv = static_cast<int>(config_int(w, key));
            } else {
                c.problem.grid.nu = static_cast<int>(config_int(w.substr(0, x), key));
                c.problem.grid.nv = static_cast<int>(config_int(w.substr(x + 1), key));
            }
        }
    } else if (key == "warp.smoothing") {
        c.problem.smoothing = auto_or_double();
    } else if (key == "warp.roughness") {
        c.problem.grid.roughness = config_enum<Roughness>(
            one(), key, {{"second", Roughness::SecondOrder}, {"third", Roughness::ThirdOrder}});
    } else if (key == "solver.N_t") {
        c.solver.N_t = positive_int();
    } else if (key == "solver.sigma") {
        c.solver.sigma = auto_or_double();
    } else if (key == "solver.max_outer") {
        c.solver.max_outer = positive_int();
    } else if (key == "solver.damping_init") {
        c.solver.damping_init = config_double(one(), key);
    } else if (key == "solver.beta_min") {
        c.solver.beta_min = config_double(one(), key);
    } else if (key == "solver.prestep_iterations") {
        c.solver.prestep_iterations = positive_int();
    } else if (key == "solver.prestep_second_order") {
        c.solver.prestep_second_order = config_enum<PrestepSecondOrder>(
            one(), key, {{"free", PrestepSecondOrder::Free}, {"zero", PrestepSecondOrder::Zero}});
    } else if (key == "solver.scaling") {
        c.solver.scaling =
            config_enum<ResidualScaling>(one(), key, {{"none", ResidualScaling::None}, {"lhs", ResidualScaling::LhsMagnitude}});
    } else if (key == "solver.init") {
        c.solver.init = config_enum<InitMode>(one(), key, {{"zero", InitMode::Zero}, {"random", InitMode::Random}});
    } else if (key == "solver.init_range") {
        c.solver.init_range = config_double(one(), key);
    } else if (key == "verify.pairs") {
        c.verify_pairs = positive_int();
    } else if (key == "sweep.rates") {
        c.sweep_rates.clear();
        for (auto w : words) c.sweep_rates.push_back(config_double(w, key));
    } else if (key == "input.tracks") {
        c.tracks_path = std::string(one());
    } else if (key == "input.recon") {
        c.recon_path = std::string(one());
    } else if (key == "input.gt") {
        c.gt_path = std::string(one());
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

/// Parses "key = value" lines; '#' starts a comment. Later keys override
/// earlier ones. The result is not validated; call RunConfig::validate.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}, const std::string& name = "config") {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t end = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) {
            if (end == text.size()) break;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(name + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key(detail::trim(line.substr(0, eq)));
        try {
            apply_config_entry(base, key, detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(name + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (end == text.size()) break;
    }
    return base;
}

inline RunConfig load_config(const std::filesystem::path& p) {
    return parse_config(detail::read_file(p), {}, p.string());
}

// ---------------------------------------------------------------- tracks

struct TrackFile {
    TrackSet tracks;  // retinal coordinates
    Intrinsics intrinsics{};
};

inline std::string format_tracks(const TrackSet& t, const Intrinsics& k) {
    std::string s = "connrsfm-tracks 1\nframes " + std::to_string(t.n_frames) + "\npoints " +
                    std::to_string(t.n_points) + "\n";
    if (k.normalized) {
        s += "intrinsics normalized\n";
    } else {
        s += "intrinsics " + fmt_double(k.fx) + " " + fmt_double(k.fy) + " " + fmt_double(k.cx) + " " +
             fmt_double(k.cy) + "\n";
    }
    for (int p = 0; p < t.n_points; ++p)
        for (int f = 0; f < t.n_frames; ++f) {
            if (!t.visible(p, f)) continue;
            const PixelPoint q = k.to_pixel(t.at(p, f));
            s += std::to_string(p) + " " + std::to_string(f) + " " + fmt_double(q.u) + " " + fmt_double(q.v) + "\n";
        }
    return s;
}

inline TrackFile parse_tracks(std::vector<std::string> lines, const std::string& name = "tracks") {
    using detail::parse_number;
    detail::LineCursor cur(std::move(lines), name);
    const auto magic = cur.expect("connrsfm-tracks", 1);
    if (magic[1] != "1") throw IoError(cur.where() + "unsupported track file version " + std::string(magic[1]));
    const long long nf = parse_number<long long>(cur.expect("frames", 1)[1], cur.where() + "frames");
    const long long np = parse_number<long long>(cur.expect("points", 1)[1], cur.where() + "points");
    if (nf < 1 || np < 1 || nf > 100000 || np > 100000000 || nf * np > 1000000000LL) {
        throw IoError(name + ": frame and point counts must be positive and of reasonable size");
    }
    TrackFile out;
    auto kline = cur.next();
    if (kline.size() == 2 && kline[0] == "intrinsics" && kline[1] == "normalized") {
        out.intrinsics = Intrinsics{};
    } else if (kline.size() == 5 && kline[0] == "intrinsics") {
        out.intrinsics = Intrinsics{parse_number<double>(kline[1], cur.where() + "fx"),
                                    parse_number<double>(kline[2], cur.where() + "fy"),
                                    parse_number<double>(kline[3], cur.where() + "cx"),
                                    parse_number<double>(kline[4], cur.where() + "cy"), false};
        if (!(out.intrinsics.fx > 0.0 && out.intrinsics.fy > 0.0)) {
            throw IoError(cur.where() + "intrinsics fx and fy must be positive");
        }
    } else {
        throw IoError(cur.where() + "expected 'intrinsics normalized' or 'intrinsics fx fy cx cy'");
    }
    out.tracks = TrackSet(static_cast<int>(nf), static_cast<int>(np));
    while (!cur.done()) {
        const auto f = cur.next();
        if (f.size() != 4) throw IoError(cur.where() + "expected '<point> <frame> <u> <v>'");
        const long long p = parse_number<long long>(f[0], cur.where() + "point id");
        const long long fr = parse_number<long long>(f[1], cur.where() + "frame id");
        if (p < 0 || p >= np || fr < 0 || fr >= nf) throw IoError(cur.where() + "point or frame id out of range");
        const PixelPoint px{parse_number<double>(f[2], cur.where() + "u"), parse_number<double>(f[3], cur.where() + "v")};
        if (out.tracks.visible(static_cast<int>(p), static_cast<int>(fr))) {
            throw IoError(cur.where() + "duplicate row for point " + std::to_string(p) + ", frame " + std::to_string(fr));
        }
        out.tracks.at(static_cast<int>(p), static_cast<int>(fr)) = out.intrinsics.to_retinal(px);
        out.tracks.set_visible(static_cast<int>(p), static_cast<int>(fr), true);
    }
    return out;
}

inline TrackFile load_tracks(const std::filesystem::path& p) { return parse_tracks(detail::read_lines(p), p.string()); }

// ---------------------------------------------------------------- ground truth

struct GroundTruth {
    int n_frames = 0;
    int n_points = 0;
    std::vector<BallScene> scenes;
    std::vector<PixelPoint> pixels;
    std::vector<DepthJet> jets;
    std::vector<Vec3> points;
    std::vector<Vec3> normals;

    std::size_t slot(int point, int frame) const { return static_cast<std::size_t>(point) * n_frames + frame; }
    double lambda(int i, int j) const { return scenes.at(i).radius / scenes.at(j).radius; }

    static GroundTruth from(const SyntheticDataset& ds) {
        return {ds.n_frames(), ds.n_points(), ds.frames, ds.clean_pixels, ds.gt_jets, ds.gt_points, ds.gt_normals};
    }
};

inline std::string format_ground_truth(const GroundTruth& g) {
    std::string s = "connrsfm-groundtruth 1\nframes " + std::to_string(g.n_frames) + "\npoints " +
                    std::to_string(g.n_points) + "\n";
    for (int f = 0; f < g.n_frames; ++f) {
        const BallScene& b = g.scenes[f];
        s += "scene " + std::to_string(f);
        for (int k = 0; k < 3; ++k) s += " " + fmt_double(b.center[k]);
        s += " " + fmt_double(b.radius);
        for (int k = 0; k < 3; ++k) s += " " + fmt_double(b.stretch[k]);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) s += " " + fmt_double(b.orientation(r, c));
        s += "\n";
    }
    for (int p = 0; p < g.n_points; ++p)
        for (int f = 0; f < g.n_frames; ++f) {
            const auto i = g.slot(p, f);
            const DepthJet& j = g.jets[i];
            s += "obs " + std::to_string(p) + " " + std::to_string(f);
            for (double x : {g.pixels[i].u, g.pixels[i].v, j.beta, j.y1, j.y2, j.y11, j.y12, j.y22})
                s += " " + fmt_double(x);
            for (int k = 0; k < 3; ++k) s += " " + fmt_double(g.points[i][k]);
            for (int k = 0; k < 3; ++k) s += " " + fmt_double(g.normals[i][k]);
            s += "\n";
        }
    return s;
}

inline GroundTruth parse_ground_truth(std::vector<std::string> lines, const std::string& name = "ground truth") {
    using detail::parse_number;
    detail::LineCursor cur(std::move(lines), name);
    const auto magic = cur.expect("connrsfm-groundtruth", 1);
    if (magic[1] != "1") throw IoError(cur.where() + "unsupported ground-truth version " + std::string(magic[1]));
    GroundTruth g;
    const long long nf = parse_number<long long>(cur.expect("frames", 1)[1], cur.where() + "frames");
    const long long np = parse_number<long long>(cur.expect("points", 1)[1], cur.where() + "points");
    if (nf < 1 || np < 1 || nf * np > 1000000000LL) throw IoError(name + ": invalid frame or point count");
    g.n_frames = static_cast<int>(nf);
    g.n_points = static_cast<int>(np);
    g.scenes.resize(static_cast<std::size_t>(nf));
    for (int f = 0; f < g.n_frames; ++f) {
        const auto w = cur.expect("scene", 17);
        if (parse_number<long long>(w[1], cur.where() + "frame") != f) throw IoError(cur.where() + "scenes out of order");
        std::array<double, 16> v{};
        for (int k = 0; k < 16; ++k) v[k] = parse_number<double>(w[2 + k], cur.where() + "scene value");
        BallScene& b = g.scenes[f];
        b.center = Vec3(v[0], v[1], v[2]);
        b.radius = v[3];
        b.stretch = Vec3(v[4], v[5], v[6]);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) b.orientation(r, c) = v[7 + 3 * r + c];
        try {
            b.validate();
        } catch (const DomainError& e) {
            throw IoError(cur.where() + e.what());
        }
    }
    const std::size_t n = static_cast<std::size_t>(nf * np);
    g.pixels.resize(n);
    g.jets.resize(n);
    g.points.resize(n);
    g.normals.resize(n);
    std::vector<std::uint8_t> seen(n, 0);
    for (std::size_t r = 0; r < n; ++r) {
        const auto w = cur.expect("obs", 16);
        const long long p = parse_number<long long>(w[1], cur.where() + "point");
        const long long f = parse_number<long long>(w[2], cur.where() + "frame");
        if (p < 0 || p >= np || f < 0 || f >= nf) throw IoError(cur.where() + "point or frame id out of range");
        const auto i = g.slot(static_cast<int>(p), static_cast<int>(f));
        if (seen[i]) throw IoError(cur.where() + "duplicate observation row");
        seen[i] = 1;
        std::array<double, 14> v{};
        for (int k = 0; k < 14; ++k) v[k] = parse_number<double>(w[3 + k], cur.where() + "value");
        g.pixels[i] = {v[0], v[1]};
        g.jets[i] = DepthJet{v[2], v[3], v[4], v[5], v[6], v[7]};
        g.points[i] = Vec3(v[8], v[9], v[10]);
        g.normals[i] = Vec3(v[11], v[12], v[13]);
    }
    if (!cur.done()) throw IoError(cur.where() + "trailing content after the last observation");
    return g;
}

inline GroundTruth load_ground_truth(const std::filesystem::path& p) {
    return parse_ground_truth(detail::read_lines(p), p.string());
}

// ---------------------------------------------------------------- point clouds

struct CloudPoint {
    int point_id = 0;
    Vec3 position = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();
};

struct FrameCloud {
    int frame = 0;
    std::vector<CloudPoint> points;
};

inline std::string format_ply(const FrameCloud& c) {
    std::string s = "ply\nformat ascii 1.0\ncomment connrsfm frame " + std::to_string(c.frame) + "\nelement vertex " +
                    std::to_string(c.points.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\nproperty double nx\nproperty double "
                    "ny\nproperty double nz\nproperty int point_id\nend_header\n";
    for (const auto& p : c.points) {
        for (int k = 0; k < 3; ++k) s += fmt_double(p.position[k]) + " ";
        for (int k = 0; k < 3; ++k) s += fmt_double(p.normal[k]) + " ";
        s += std::to_string(p.point_id) + "\n";
    }
    return s;
}

/// Reads an ASCII PLY with x, y, z, nx, ny, nz and point_id vertex properties
/// (any order, extra properties ignored) and a "comment connrsfm frame N".
inline FrameCloud parse_ply(const std::vector<std::string>& lines, const std::string& name = "ply") {
    using detail::parse_number;
    std::size_t i = 0;
    auto err = [&](const std::string& m) { return IoError(name + ":" + std::to_string(i + 1) + ": " + m); };
    if (lines.empty() || detail::trim(lines[0]) != "ply") throw IoError(name + ": not a PLY file");
    FrameCloud c;
    bool have_frame = false;
    long long n_vertex = -1;
    std::vector<std::string> props;
    bool in_vertex = false;
    for (i = 1; i < lines.size(); ++i) {
        const auto w = detail::split_ws(lines[i]);
        if (w.empty()) continue;
        if (w[0] == "end_header") break;
        if (w[0] == "format") {
            if (w.size() < 2 || w[1] != "ascii") throw err("only ASCII PLY is supported");
        } else if (w[0] == "comment") {
            if (w.size() == 4 && w[1] == "connrsfm" && w[2] == "frame") {
                c.frame = static_cast<int>(parse_number<long long>(w[3], name + " frame"));
                have_frame = true;
            }
        } else if (w[0] == "element") {
            if (w.size() != 3) throw err("malformed element line");
            in_vertex = w[1] == "vertex";
            if (in_vertex) n_vertex = parse_number<long long>(w[2], name + " vertex count");
        } else if (w[0] == "property") {
            if (in_vertex) {
                if (w.size() != 3) throw err("list properties are not supported on vertices");
                props.emplace_back(w[2]);
            }
        } else {
            throw err("unexpected header line");
        }
    }
    if (i >= lines.size()) throw IoError(name + ": missing end_header");
    if (!have_frame) throw IoError(name + ": missing 'comment connrsfm frame N'");
    if (n_vertex < 0) throw IoError(name + ": missing vertex element");
    const std::array<std::string, 7> need{"x", "y", "z", "nx", "ny", "nz", "point_id"};
    std::array<std::size_t, 7> col{};
    for (std::size_t k = 0; k < need.size(); ++k) {
        const auto it = std::find(props.begin(), props.end(), need[k]);
        if (it == props.end()) throw IoError(name + ": missing vertex property " + need[k]);
        col[k] = static_cast<std::size_t>(it - props.begin());
    }
    std::set<int> ids;
    for (long long v = 0; v < n_vertex; ++v) {
        ++i;
        if (i >= lines.size()) throw IoError(name + ": fewer vertices than declared");
        const auto w = detail::split_ws(lines[i]);
        if (w.size() != props.size()) throw err("vertex row has the wrong number of values");
        CloudPoint p;
        for (int k = 0; k < 3; ++k) p.position[k] = parse_number<double>(w[col[k]], name + " coordinate");
        for (int k = 0; k < 3; ++k) p.normal[k] = parse_number<double>(w[col[3 + k]], name + " normal");
        p.point_id = static_cast<int>(parse_number<long long>(w[col[6]], name + " point_id"));
        if (!ids.insert(p.point_id).second) throw err("duplicate point_id " + std::to_string(p.point_id));
        c.points.push_back(p);
    }
    return c;
}

inline FrameCloud load_ply(const std::filesystem::path& p) { return parse_ply(detail::read_lines(p), p.string()); }

inline std::string ply_name(int frame) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%03d.ply", frame);
    return buf;
}

// ---------------------------------------------------------------- tables

inline std::string format_jets_csv(const ProblemState& st) {
    std::string s = "point,frame,beta,y1,y2,y11,y12,y22\n";
    for (int p = 0; p < st.tracks.n_points; ++p)
        for (int f = 0; f < st.tracks.n_frames; ++f) {
            if (!st.is_active(p, f)) continue;
            const DepthJet& j = st.jets[st.slot(p, f)];
            s += std::to_string(p) + "," + std::to_string(f);
            for (double x : {j.beta, j.y1, j.y2, j.y11, j.y12, j.y22}) s += "," + fmt_double(x);
            s += "\n";
        }
    return s;
}

inline std::string format_lambda_csv(const ProblemState& st) {
    std::string s = "point,src_frame,dst_frame,lambda\n";
    for (std::size_t li = 0; li < st.links.size(); ++li) {
        const Link& l = st.links[li];
        s += std::to_string(l.point) + "," + std::to_string(l.src_frame) + "," + std::to_string(l.dst_frame) + "," +
             fmt_double(st.lambdas[li]) + "\n";
    }
    return s;
}

/// Wall time is left out so the file depends only on the inputs.
inline std::string format_trace_csv(const ConvergenceTrace& t) {
    std::string s = "iteration,terminal,residual_norm\n";
    for (const auto& r : t.rows)
        s += std::to_string(r.iteration) + "," + fmt_double(r.terminal) + "," + fmt_double(r.residual_norm) + "\n";
    return s;
}

// ---------------------------------------------------------------- warp blobs

inline constexpr std::array<char, 8> kWarpMagic{'C', 'R', 'S', 'W', 'A', 'R', 'P', '\0'};
inline constexpr std::uint32_t kWarpBlobVersion = 1;

namespace detail {

inline void put_u64(std::string& s, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) s.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}
inline void put_u32(std::string& s, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) s.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}
inline void put_f64(std::string& s, double v) { put_u64(s, std::bit_cast<std::uint64_t>(v)); }

class BlobReader {
public:
    explicit BlobReader(std::string_view d) : d_(d) {}
    std::uint64_t u64() { return take<8>(); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(take<4>()); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string_view bytes(std::size_t n) {
        if (d_.size() - pos_ < n) throw IoError("warp blob truncated");
        const auto out = d_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    bool at_end() const { return pos_ == d_.size(); }

private:
    template <int N>
    std::uint64_t take() {
        if (d_.size() - pos_ < N) throw IoError("warp blob truncated");
        std::uint64_t v = 0;
        for (int b = 0; b < N; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(d_[pos_ + b])) << (8 * b);
        pos_ += N;
        return v;
    }
    std::string_view d_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_warps(std::span<const WarpModel> models) {
    std::string s(kWarpMagic.begin(), kWarpMagic.end());
    detail::put_u32(s, kWarpBlobVersion);
    detail::put_u32(s, static_cast<std::uint32_t>(models.size()));
    for (const auto& m : models) {
        const DomainBox& b = m.box();
        detail::put_u32(s, static_cast<std::uint32_t>(m.u_target.nu()));
        detail::put_u32(s, static_cast<std::uint32_t>(m.u_target.nv()));
        detail::put_u32(s, static_cast<std::uint32_t>(m.grid.roughness == Roughness::ThirdOrder ? 3 : 2));
        for (double x : {b.u0, b.u1, b.v0, b.v1, m.smoothing, m.residual_rms}) detail::put_f64(s, x);
        const auto& cu = m.u_target.coefficients();
        const auto& cv = m.v_target.coefficients();
        detail::put_u32(s, static_cast<std::uint32_t>(cu.size()));
        for (Eigen::Index k = 0; k < cu.size(); ++k) detail::put_f64(s, cu[k]);
        for (Eigen::Index k = 0; k < cv.size(); ++k) detail::put_f64(s, cv[k]);
    }
    return s;
}

inline std::vector<WarpModel> deserialize_warps(std::string_view data) {
    detail::BlobReader r(data);
    const auto magic = r.bytes(kWarpMagic.size());
    if (!std::equal(magic.begin(), magic.end(), kWarpMagic.begin())) throw IoError("not a warp blob (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kWarpBlobVersion) throw IoError("unsupported warp blob version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    if (count > 1000000) throw IoError("warp blob declares too many models");
    std::vector<WarpModel> out;
    for (std::uint32_t m = 0; m < count; ++m) {
        const int nu = r.i32();
        const int nv = r.i32();
        const int rough = r.i32();
        if (nu < 4 || nv < 4 || nu > 4096 || nv > 4096) throw IoError("warp blob has an invalid grid");
        if (rough != 2 && rough != 3) throw IoError("warp blob has an invalid roughness order");
        DomainBox b;
        b.u0 = r.f64();
        b.u1 = r.f64();
        b.v0 = r.f64();
        b.v1 = r.f64();
        const double smoothing = r.f64();
        const double rms = r.f64();
        if (!(b.u1 > b.u0) || !(b.v1 > b.v0)) throw IoError("warp blob has an empty domain");
        const std::uint32_t n = r.u32();
        if (n != static_cast<std::uint32_t>(nu * nv)) throw IoError("warp blob coefficient count mismatch");
        Eigen::VectorXd cu(n), cv(n);
        for (std::uint32_t k = 0; k < n; ++k) cu[k] = r.f64();
        for (std::uint32_t k = 0; k < n; ++k) cv[k] = r.f64();
        const SplineGrid g{nu, nv, rough == 3 ? Roughness::ThirdOrder : Roughness::SecondOrder};
        out.push_back(WarpModel{SplineSurface(b, nu, nv, cu), SplineSurface(b, nu, nv, cv), g, smoothing, rms});
    }
    if (!r.at_end()) throw IoError("warp blob has trailing bytes");
    return out;
}

// ---------------------------------------------------------------- output staging

/// Collects output files in memory and writes them only once everything has
/// been produced. Files are first written to a staging directory inside the
/// output directory and then moved into place, so a failure never leaves a
/// partial set of results behind.
class StagedOutput {
public:
    void add(std::string relative, std::string content) {
        for (const auto& f : files_)
            if (f.first == relative) throw IoError("output file " + relative + " produced twice");
        files_.emplace_back(std::move(relative), std::move(content));
    }

    const std::vector<std::pair<std::string, std::string>>& files() const { return files_; }

    void commit(const std::filesystem::path& out) const {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(out, ec);
        if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
        const fs::path stage = out / ".connrsfm-staging";
        fs::remove_all(stage, ec);
        try {
            for (const auto& [rel, content] : files_) {
                const fs::path p = stage / rel;
                fs::create_directories(p.parent_path());
                std::ofstream o(p, std::ios::binary);
                o.write(content.data(), static_cast<std::streamsize>(content.size()));
                o.close();
                if (!o) throw IoError("cannot write " + p.string());
            }
            for (const auto& [rel, content] : files_) {
                const fs::path dst = out / rel;
                fs::create_directories(dst.parent_path());
                fs::rename(stage / rel, dst);
            }
        } catch (const fs::filesystem_error& e) {
            fs::remove_all(stage, ec);
            throw IoError(std::string("writing outputs failed: ") + e.what());
        } catch (...) {
            fs::remove_all(stage, ec);
            throw;
        }
        fs::remove_all(stage, ec);
    }

private:
    std::vector<std::pair<std::string, std::string>> files_;
};

}  // namespace connrsfm
