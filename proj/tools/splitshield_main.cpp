// splitshield command-line driver.
//
// Verbs:
//   train          train the configured defense and save its checkpoints
//   attack         run the reconstruction attack against the configured defense
//   bench-defense  full defense comparison table (report.csv + mosaics)
//   sweep-splits   split-point sensitivity grid
//   bench-latency  loopback client/server latency breakdown
//   report         pretty-print a previous run's artifacts
//
// Global flags: --config PATH, --seed INT, --out DIR, --scale {toy,paper}.
// Without --config, defaults for the chosen scale apply.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "splitshield/harness.hpp"

using namespace splitshield;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir;
    std::string scale = "toy";
    std::uint64_t seed = 0;
    bool seed_set = false;
};

ExperimentConfig resolve_config(const GlobalArgs& g) {
    ExperimentConfig c =
        g.config_path.empty() ? default_config(g.scale) : load_config_file(g.config_path);
    if (!g.config_path.empty() && g.scale != c.scale && g.scale != "toy") c.scale = g.scale;
    if (g.seed_set) c.master_seed = g.seed;
    if (!g.out_dir.empty()) c.out_dir = g.out_dir;
    return c;
}

void print_rows(const RunReport& report) {
    if (!report.rows.empty()) {
        std::printf("%-14s %10s %10s %10s %10s\n", "name", "acc", "d_acc", "ssim", "psnr");
        for (const auto& r : report.rows)
            std::printf("%-14s %10.4f %10.4f %10.4f %10.4f\n", r.name.c_str(), r.accuracy,
                        r.delta_acc, r.ssim, r.psnr);
    }
    for (const auto& r : report.latency_rows)
        std::printf("%-14s client %.4fs server %.4fs comm %.4fs total %.4fs\n", r.name.c_str(),
                    r.median.client_s, r.median.server_s, r.median.comm_s, r.median.total_s);
    if (!report.latency_rows.empty())
        std::printf("overhead: %.2f%%\n", report.latency_overhead_pct);
    std::printf("artifacts:\n");
    for (const auto& p : report.artifacts) std::printf("  %s\n", p.c_str());
}

void print_reference_tables() {
    std::printf("\nreference full-scale results (CIFAR-10 / ResNet-18 / N=10; not reproduced at desk scale):\n");
    std::printf("%-14s %10s %8s %8s\n", "name", "dAcc(%)", "SSIM", "PSNR");
    for (const auto& r : reference_defense_rows())
        std::printf("%-14s %10.2f %8.2f %8.2f\n", r.name, r.delta_acc_pct, r.ssim, r.psnr);
    std::printf("\nreference latency for a batch of 128 images (edge client, wired network):\n");
    for (const auto& r : reference_latency_rows())
        std::printf("%-20s client %.2f server %.2f comm %.2f total %.2f\n", r.name, r.client_s,
                    r.server_s, r.comm_s, r.total_s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"splitshield: split-inference privacy testbed"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "experiment config file");
    auto* seed_opt = app.add_option("--seed", g.seed, "master seed override");
    app.add_option("--out", g.out_dir, "output directory override");
    app.add_option("--scale", g.scale, "default config scale")
        ->check(CLI::IsMember({"toy", "paper"}));

    auto* cmd_train = app.add_subcommand("train", "train the configured defense and save it");
    auto* cmd_attack = app.add_subcommand("attack", "attack the configured defense");
    auto* cmd_bench = app.add_subcommand("bench-defense", "defense comparison benchmark");
    auto* cmd_sweep = app.add_subcommand("sweep-splits", "split-point sensitivity sweep");
    auto* cmd_latency = app.add_subcommand("bench-latency", "client/server latency benchmark");
    auto* cmd_report = app.add_subcommand("report", "render stored run artifacts");

    std::string heads_csv, tails_csv;
    cmd_sweep->add_option("--heads", heads_csv, "comma list of head depths");
    cmd_sweep->add_option("--tails", tails_csv, "comma list of tail depths");
    std::size_t batch = 0, repeats = 0;
    cmd_latency->add_option("--batch", batch, "images per request");
    cmd_latency->add_option("--repeats", repeats, "timed repetitions");
    bool with_reference = false;
    cmd_report->add_flag("--reference", with_reference, "include published reference tables");

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    try {
        const ExperimentConfig config = resolve_config(g);
        if (cmd_train->parsed()) {
            const auto paths = train_and_save(config);
            std::printf("saved %zu artifacts under %s/train\n", paths.size(),
                        config.out_dir.c_str());
            for (const auto& p : paths) std::printf("  %s\n", p.c_str());
        } else if (cmd_attack->parsed()) {
            print_rows(run_attack_only(config));
        } else if (cmd_bench->parsed()) {
            print_rows(run_defense_bench(config));
        } else if (cmd_sweep->parsed()) {
            auto parse_list = [](const std::string& csv, std::vector<std::size_t> fallback) {
                if (csv.empty()) return fallback;
                std::vector<std::size_t> out;
                std::size_t pos = 0;
                while (pos < csv.size()) {
                    std::size_t next = csv.find(',', pos);
                    if (next == std::string::npos) next = csv.size();
                    out.push_back(std::stoull(csv.substr(pos, next - pos)));
                    pos = next + 1;
                }
                return out;
            };
            print_rows(run_split_sweep(config, parse_list(heads_csv, config.sweep_heads),
                                       parse_list(tails_csv, config.sweep_tails)));
        } else if (cmd_latency->parsed()) {
            print_rows(run_latency_bench(config, batch ? batch : config.latency_batch,
                                         repeats ? repeats : config.latency_repeats));
        } else if (cmd_report->parsed()) {
            std::fputs(render_report(config.out_dir).c_str(), stdout);
            if (with_reference || config.scale == "paper") print_reference_tables();
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
