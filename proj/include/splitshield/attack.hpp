#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splitshield/dataset.hpp"
#include "splitshield/defense.hpp"

namespace splitshield {

// Feature-reconstruction attack under the query-free threat model: the
// attacker holds the server nets, the public architecture, and data from the
// training distribution, but can never query the client for (input, feature)
// pairs. Brute-forcing all 2^N - 1 body subsets is deliberately out of scope;
// the implemented strategies are per-net shadows and an all-net adaptive
// shadow.

struct ShadowConfig {
    std::size_t channels = 64;  // width of each of the three shadow conv units
    OptimizerConfig optim;
    std::size_t epochs = 20;
    bool train_gate = true;  // adaptive: learn the per-body weights (else fixed uniform)
};

struct DecoderConfig {
    std::size_t channels = 64;
    OptimizerConfig optim;
    std::size_t epochs = 30;
};

struct ShadowNetwork {
    ModelGraph shadow_head;  // image -> transmitted-feature shape
    ModelGraph shadow_tail;
    std::vector<std::size_t> target_bodies;
    std::vector<float> gate;  // adaptive: nonnegative per-body weights summing to 1
    std::vector<double> epoch_losses;
    std::size_t budget_steps = 0;
};

struct Decoder {
    ModelGraph graph;  // feature shape -> image shape, output clipped to [0,1]
    std::vector<double> epoch_losses;
    std::size_t budget_steps = 0;
};

enum class AttackStrategy { Single, Adaptive };

// Three conv units of `channels` each; stride placement matches the spatial
// ratio between the image and the transmitted features.
ModelGraph build_shadow_head(const std::vector<std::size_t>& input_shape,
                             const std::vector<std::size_t>& feature_shape, std::size_t channels,
                             std::uint64_t seed);

// Mirror of the head built from transposed convolutions, final clamp to [0,1].
ModelGraph build_decoder_graph(const std::vector<std::size_t>& feature_shape,
                               const std::vector<std::size_t>& image_shape, std::size_t channels,
                               std::uint64_t seed);

// Trains shadow head + tail by cross-entropy through the frozen body (single)
// or through all bodies combined by a trainable gate (adaptive). Bodies are
// never modified. Adaptive with one body reduces to single(0) exactly.
ShadowNetwork train_shadow(const AttackSurface& surface, const LabeledDataset& aux,
                           AttackStrategy strategy, std::size_t body_index,
                           const ShadowConfig& cfg, std::uint64_t seed);

// Decoder approximating the inverse of `head`: minimizes the MSE between
// decoder(head(x)) and the raw image over the auxiliary data.
Decoder train_decoder(const ModelGraph& head, const LabeledDataset& aux,
                      const DecoderConfig& cfg, std::uint64_t seed);

// One image per intercepted feature map, values in [0,1].
Tensor reconstruct(const Decoder& decoder, const Tensor& intercepted);

struct AttackResult {
    std::string strategy;  // "single(i)" | "best-ssim" | "best-psnr" | "adaptive"
    Tensor reconstructions;
    double ssim_score = 0.0;
    double psnr_score = 0.0;
    std::size_t budget_steps = 0;
    std::uint64_t seed = 0;
};

struct AttackOptions {
    std::vector<AttackStrategy> strategies = {AttackStrategy::Single};
    ShadowConfig shadow;
    DecoderConfig decoder;
    bool parallel = true;
};

// Runs the requested strategies against intercepted client transmissions.
// For Single this trains one shadow per body and reports each, then appends
// the max-SSIM and max-PSNR records ("best-ssim", "best-psnr"). Scores are
// computed against the raw eval images.
std::vector<AttackResult> run_attack(const AttackSurface& surface, const LabeledDataset& aux,
                                     const Tensor& eval_images_raw, const Tensor& intercepted,
                                     const AttackOptions& options, std::uint64_t seed);

}  // namespace splitshield
