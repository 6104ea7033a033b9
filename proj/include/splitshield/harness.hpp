#pragma once

#include <string>
#include <vector>

#include "splitshield/attack.hpp"
#include "splitshield/config.hpp"
#include "splitshield/transport.hpp"

namespace splitshield {

struct BenchRowResult {
    std::string name;  // None | Single | TrainedNoise | DR-single | DR-<N> | Ours-*
    double accuracy = 0.0;
    double delta_acc = 0.0;  // vs. the undefended baseline
    double ssim = 0.0;
    double psnr = 0.0;
};

struct LatencyRowResult {
    std::string name;  // StandardCI | Ensembler
    LatencyBreakdown median;
};

struct RunReport {
    std::vector<BenchRowResult> rows;

    std::vector<std::size_t> sweep_heads;
    std::vector<std::size_t> sweep_tails;
    // grids indexed [head][tail]; NaN marks skipped (invalid) plans
    std::vector<std::vector<double>> grid_ssim;
    std::vector<std::vector<double>> grid_psnr;

    std::vector<LatencyRowResult> latency_rows;
    double latency_overhead_pct = 0.0;

    std::vector<std::string> artifacts;  // every file emitted by the run
};

// Trains the requested defense rows, attacks each one, and emits report.csv,
// attacks.jsonl and reconstruction mosaics under <out_dir>. Partial rows are
// flushed before an abort propagates.
RunReport run_defense_bench(const ExperimentConfig& config);

// Per-(h,t) reconstruction quality of the single-net attack against an
// undefended split. Emits sweep_ssim.csv / sweep_psnr.csv plus a mosaic laid
// out with head depth vertical and tail depth horizontal.
RunReport run_split_sweep(const ExperimentConfig& config,
                          const std::vector<std::size_t>& heads,
                          const std::vector<std::size_t>& tails);

// Loopback latency comparison: standard split inference (one net) vs. the
// ensemble (N nets), median over `repeats` batches of `batch` images.
RunReport run_latency_bench(const ExperimentConfig& config, std::size_t batch,
                            std::size_t repeats);

// Trains the configured defense and saves its graphs (blueprint + checkpoint
// pairs) and metadata under <out_dir>/train.
std::vector<std::string> train_and_save(const ExperimentConfig& config);

// Attacks just the configured defense kind; emits attacks.jsonl and mosaics.
RunReport run_attack_only(const ExperimentConfig& config);

// Renders a stored report directory as text (the `report` CLI verb).
std::string render_report(const std::string& out_dir);

// Reference results from the original full-scale evaluation of this defense
// family (CIFAR-10, ResNet-18, N=10, GPU server, physical edge client).
// Desk-scale runs are protocol-compatible but are not expected to reproduce
// these numbers.
struct ReferenceDefenseRow {
    const char* name;
    double delta_acc_pct;
    double ssim;
    double psnr;
};
const std::vector<ReferenceDefenseRow>& reference_defense_rows();

struct ReferenceLatencyRow {
    const char* name;
    double client_s;
    double server_s;
    double comm_s;
    double total_s;
};
// The encrypted-inference row only has a published total.
const std::vector<ReferenceLatencyRow>& reference_latency_rows();

// Subset-enumeration count an exhaustive reconstruction attack would face
// (2^N - 1 non-empty subsets); documented cost, never executed here.
std::uint64_t brute_force_subset_count(std::size_t n);

}  // namespace splitshield
