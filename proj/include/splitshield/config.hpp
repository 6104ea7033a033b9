#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splitshield/attack.hpp"
#include "splitshield/dataset.hpp"
#include "splitshield/defense.hpp"
#include "splitshield/graph.hpp"

namespace splitshield {

// Experiment configuration, stored as a flat-section key = value text
// document (schema_version pins the layout). parse(serialize(c)) == c.
struct ExperimentConfig {
    // [run]
    std::uint64_t master_seed = 1;
    std::string scale = "toy";  // toy | paper
    std::string out_dir = "out";

    // [dataset]
    std::string dataset_name = "synthetic-shapes";
    std::string dataset_root;
    std::size_t train_size = 512;
    std::size_t aux_size = 256;
    std::size_t eval_size = 128;
    std::size_t channels = 1;
    std::size_t image_size = 8;
    std::vector<float> norm_mean = {0.5f};
    std::vector<float> norm_std = {0.5f};

    // [arch]
    std::string arch_name = "tiny";

    // [split]
    SplitPlan plan{1, 1};

    // [defense]
    DefenseConfig defense;
    std::uint64_t selector_seed = 0;  // 0 = derive from the master seed

    // [bench]
    std::vector<std::string> bench_rows = {"none",           "single_noise",
                                           "trained_noise",  "dropout_single",
                                           "dropout_ensemble", "ensembler"};

    // [attack]
    bool attack_single = true;
    bool attack_adaptive = true;
    std::size_t shadow_channels = 64;
    std::size_t shadow_epochs = 20;
    std::size_t decoder_epochs = 30;

    // [sweep]
    std::vector<std::size_t> sweep_heads = {1, 2, 3};
    std::vector<std::size_t> sweep_tails = {0};

    // [latency]
    std::size_t latency_batch = 128;
    std::size_t latency_repeats = 5;
    bool latency_parallel_bodies = false;

    bool operator==(const ExperimentConfig&) const = default;

    // Derived views.
    std::size_t dataset_classes() const;
    DatasetSpec dataset_spec() const;
    ArchSpec arch_spec() const;
    ShadowConfig shadow_config() const;
    DecoderConfig decoder_config() const;
};

constexpr int kConfigSchemaVersion = 1;

ExperimentConfig default_config(const std::string& scale);

std::string serialize_config(const ExperimentConfig& c);
ExperimentConfig parse_config(const std::string& text);

ExperimentConfig load_config_file(const std::string& path);
void save_config_file(const std::string& path, const ExperimentConfig& c);

}  // namespace splitshield
