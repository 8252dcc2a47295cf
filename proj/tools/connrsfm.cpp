// connrsfm: command-line front end.
//
//   connrsfm generate       --config FILE [--seed S] [--out DIR]
//   connrsfm reconstruct    --config FILE [--tracks FILE] [--threads N] [--seed S] [--out DIR]
//   connrsfm evaluate       --config FILE [--recon DIR --gt FILE | --sweep] [--threads N] [--out DIR]
//   connrsfm verify-theorem --config FILE [--seed S] [--out DIR]
//
// Flags override the configuration file. Exit status: 0 on success, 2 for
// usage or configuration errors, 1 for any other failure.

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "connrsfm/commands.hpp"

namespace {

struct Flags {
    std::string config;
    std::optional<int> threads;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string tracks;
    std::string recon;
    std::string gt;
    bool sweep = false;
};

void add_common(CLI::App* cmd, Flags& f, bool threads) {
    cmd->add_option("--config", f.config, "key = value configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "seed for every random choice (overrides the config)");
    cmd->add_option("--out", f.out, "output directory")->capture_default_str();
    if (threads) cmd->add_option("--threads", f.threads, "worker threads, 0 = all cores (overrides the config)");
}

connrsfm::RunConfig load(const Flags& f) {
    connrsfm::RunConfig c = f.config.empty() ? connrsfm::RunConfig{} : connrsfm::load_config(f.config);
    if (f.threads) {
        if (*f.threads < 0) throw connrsfm::ConfigError("--threads must be non-negative");
        c.threads = *f.threads;
    }
    if (f.seed) c.seed = *f.seed;
    if (!f.tracks.empty()) c.tracks_path = f.tracks;
    if (!f.recon.empty()) c.recon_path = f.recon;
    if (!f.gt.empty()) c.gt_path = f.gt;
    c.validate();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conformal non-rigid structure from motion"};
    app.require_subcommand(1);
    Flags f;

    auto* gen = app.add_subcommand("generate", "write a synthetic ball-scene track file and its ground truth");
    add_common(gen, f, false);

    auto* rec = app.add_subcommand("reconstruct", "reconstruct per-frame point clouds from a track file");
    add_common(rec, f, true);
    rec->add_option("--tracks", f.tracks, "track file (overrides input.tracks)");

    auto* eva = app.add_subcommand("evaluate", "score a reconstruction against ground truth");
    add_common(eva, f, true);
    eva->add_option("--recon", f.recon, "reconstruction directory (overrides input.recon)");
    eva->add_option("--gt", f.gt, "ground-truth sidecar (overrides input.gt)");
    eva->add_flag("--sweep", f.sweep, "run the missing-data sweep over sweep.rates instead");

    auto* ver = app.add_subcommand("verify-theorem", "connection-invariance index on analytic ball pairs");
    add_common(ver, f, false);

    CLI11_PARSE(app, argc, argv);

    try {
        const connrsfm::RunConfig c = load(f);
        connrsfm::StagedOutput out;
        if (gen->parsed()) {
            out = connrsfm::generate_outputs(c);
        } else if (rec->parsed()) {
            if (c.tracks_path.empty()) throw connrsfm::ConfigError("reconstruct needs --tracks or input.tracks");
            out = connrsfm::reconstruct_outputs(c, connrsfm::load_tracks(c.tracks_path));
        } else if (eva->parsed()) {
            if (f.sweep) {
                out.add("missing_sweep.csv", connrsfm::format_sweep_csv(connrsfm::missing_sweep(c)));
            } else {
                if (c.recon_path.empty() || c.gt_path.empty()) {
                    throw connrsfm::ConfigError("evaluate needs --recon and --gt (or --sweep)");
                }
                out = connrsfm::evaluate_outputs(c.recon_path, c.gt_path);
            }
        } else if (ver->parsed()) {
            const auto rows = connrsfm::verify_theorem(c);
            out.add("verification.csv", connrsfm::format_verification_csv(rows));
        }
        out.commit(f.out);
        for (const auto& file : out.files()) std::cout << (std::filesystem::path(f.out) / file.first).string() << "\n";
        return 0;
    } catch (const connrsfm::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
