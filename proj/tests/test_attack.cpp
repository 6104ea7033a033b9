#include <cmath>

#include "doctest.h"
#include "splitshield/attack.hpp"
#include "splitshield/metrics.hpp"

using namespace splitshield;

namespace {

const ArchSpec kTinyShapes{"tiny", {1, 8, 8}, 4};

struct AuxEval {
    LabeledDataset aux = make_synthetic_shapes(192, 1, 8, 70);
    LabeledDataset eval = make_synthetic_shapes(48, 1, 8, 71);
};

std::unique_ptr<DefenseStrategy> make_defense(DefenseKind kind, const LabeledDataset& train,
                                              std::size_t n = 1, std::size_t p = 1) {
    DefenseConfig cfg;
    cfg.kind = kind;
    cfg.ensemble_size = n;
    cfg.active_count = p;
    cfg.baseline_epochs = 8;
    cfg.stage1_epochs = 8;
    cfg.stage3_epochs = 8;
    return build_defense(cfg, kTinyShapes, {1, 1}, train, 31);
}

}  // namespace

TEST_CASE("shadow head matches the transmitted feature shape") {
    const ModelGraph s2 = build_shadow_head({1, 8, 8}, {8, 4, 4}, 16, 1);
    CHECK(s2.output_shape() == std::vector<std::size_t>{8, 4, 4});
    CHECK(s2.layers.size() == 5);  // three convs with interleaved activations

    const ModelGraph s1 = build_shadow_head({3, 8, 8}, {4, 8, 8}, 16, 1);
    CHECK(s1.output_shape() == std::vector<std::size_t>{4, 8, 8});
    const ModelGraph s8 = build_shadow_head({1, 16, 16}, {24, 2, 2}, 16, 1);
    CHECK(s8.output_shape() == std::vector<std::size_t>{24, 2, 2});

    CHECK_THROWS_AS(build_shadow_head({1, 9, 9}, {8, 4, 4}, 16, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_shadow_head({1, 64, 64}, {8, 4, 4}, 16, 1), std::invalid_argument);
}

TEST_CASE("decoder inverts an identity head to near-zero error") {
    const LabeledDataset aux = make_synthetic_shapes(160, 1, 8, 5);
    ModelGraph identity;  // empty graph: forward(x) == x
    identity.input_shape = {1, 8, 8};

    DecoderConfig cfg;
    cfg.channels = 32;
    cfg.epochs = 60;
    const Decoder dec = train_decoder(identity, aux, cfg, 3);
    REQUIRE_FALSE(dec.epoch_losses.empty());
    CHECK(dec.epoch_losses.back() < 1e-3);
    CHECK(dec.epoch_losses.back() < dec.epoch_losses.front());
}

TEST_CASE("decoder output shape tracks the image shape") {
    const LabeledDataset aux = make_synthetic_shapes(64, 1, 8, 5);
    const ModelGraph head = build_shadow_head({1, 8, 8}, {6, 4, 4}, 8, 2);
    DecoderConfig cfg;
    cfg.channels = 8;
    cfg.epochs = 1;
    const Decoder dec = train_decoder(head, aux, cfg, 3);
    const Tensor features = forward(head, aux.normalized_images());
    const Tensor recon = reconstruct(dec, features);
    CHECK(recon.shape == aux.images.shape);
}

TEST_CASE("shadow network on the undefended pipeline approaches the true accuracy") {
    AuxEval d;
    LabeledDataset train = make_synthetic_shapes(384, 1, 8, 72);
    auto defense = make_defense(DefenseKind::None, train);
    const AttackSurface surface = defense->attack_surface();

    ShadowConfig cfg;
    cfg.channels = 64;
    cfg.epochs = 25;
    const ShadowNetwork shadow = train_shadow(surface, d.aux, AttackStrategy::Single, 0, cfg, 9);
    CHECK(shadow.target_bodies == std::vector<std::size_t>{0});
    CHECK(shadow.budget_steps > 0);

    LogitsFn shadow_fn = [&](const Tensor& x) {
        return forward(shadow.shadow_tail,
                       forward(surface.bodies[0], forward(shadow.shadow_head, x)));
    };
    LogitsFn true_fn = [&](const Tensor& x) { return defense->infer(x); };
    const double shadow_acc = accuracy(shadow_fn, d.eval);
    const double true_acc = accuracy(true_fn, d.eval);
    CHECK(std::abs(shadow_acc - true_acc) <= 0.05 + 1e-9);
}

TEST_CASE("adaptive attack with one body reduces to single(0)") {
    AuxEval d;
    LabeledDataset train = make_synthetic_shapes(192, 1, 8, 72);
    auto defense = make_defense(DefenseKind::None, train);
    const AttackSurface surface = defense->attack_surface();
    ShadowConfig cfg;
    cfg.channels = 16;
    cfg.epochs = 3;
    const ShadowNetwork single = train_shadow(surface, d.aux, AttackStrategy::Single, 0, cfg, 9);
    const ShadowNetwork adaptive =
        train_shadow(surface, d.aux, AttackStrategy::Adaptive, 0, cfg, 9);
    CHECK(graphs_bit_equal(single.shadow_head, adaptive.shadow_head));
    CHECK(graphs_bit_equal(single.shadow_tail, adaptive.shadow_tail));
    CHECK(adaptive.gate == std::vector<float>{1.0f});
}

TEST_CASE("adaptive gate weights stay normalized") {
    AuxEval d;
    LabeledDataset train = make_synthetic_shapes(192, 1, 8, 72);
    auto defense = make_defense(DefenseKind::Ensembler, train, 3, 2);
    const AttackSurface surface = defense->attack_surface();
    ShadowConfig cfg;
    cfg.channels = 16;
    cfg.epochs = 4;
    const ShadowNetwork shadow =
        train_shadow(surface, d.aux, AttackStrategy::Adaptive, 0, cfg, 9);
    REQUIRE(shadow.gate.size() == 3);
    double sum = 0.0;
    for (float g : shadow.gate) {
        CHECK(g >= 0.0f);
        sum += g;
    }
    CHECK(sum == doctest::Approx(1.0));

    CHECK_THROWS_AS(train_shadow(surface, d.aux, AttackStrategy::Single, 7, cfg, 9),
                    std::out_of_range);
}

TEST_CASE("reconstruction from the decoder's own features equals its training quality") {
    const LabeledDataset aux = make_synthetic_shapes(96, 1, 8, 5);
    const ModelGraph head = build_shadow_head({1, 8, 8}, {6, 4, 4}, 8, 2);
    DecoderConfig cfg;
    cfg.channels = 8;
    cfg.epochs = 6;
    const Decoder dec = train_decoder(head, aux, cfg, 3);

    const Tensor features = forward(head, aux.normalized_images());
    const Tensor recon = reconstruct(dec, features);
    const double recon_mse = mean_squared_error(recon, aux.images);
    const double direct_mse = mean_squared_error(forward(dec.graph, features), aux.images);
    CHECK(recon_mse == direct_mse);

    // All-zero features decode to something, and it stays in range.
    const Tensor zeros({4, 6, 4, 4});
    const Tensor from_zero = reconstruct(dec, zeros);
    CHECK(from_zero.dim(0) == 4);
    for (float v : from_zero.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("run_attack reports per-net results plus the elementwise maxima") {
    AuxEval d;
    LabeledDataset train = make_synthetic_shapes(192, 1, 8, 72);
    auto defense = make_defense(DefenseKind::Ensembler, train, 3, 2);
    const Tensor intercepted = defense->client_forward(d.eval.normalized_images());

    AttackOptions options;
    options.strategies = {AttackStrategy::Single, AttackStrategy::Adaptive};
    options.shadow.channels = 16;
    options.shadow.epochs = 3;
    options.decoder.channels = 16;
    options.decoder.epochs = 4;
    const auto records = run_attack(defense->attack_surface(), d.aux, d.eval.images,
                                    intercepted, options, 77);

    REQUIRE(records.size() == 3 + 2 + 1);  // singles + best rows + adaptive
    double max_ssim = -2.0, max_psnr = -2.0;
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(records[i].strategy == "single(" + std::to_string(i) + ")");
        CHECK(records[i].reconstructions.dim(0) == d.eval.size());
        CHECK(records[i].budget_steps > 0);
        max_ssim = std::max(max_ssim, records[i].ssim_score);
        max_psnr = std::max(max_psnr, records[i].psnr_score);
    }
    CHECK(records[3].strategy == "best-ssim");
    CHECK(records[3].ssim_score == max_ssim);
    CHECK(records[4].strategy == "best-psnr");
    CHECK(records[4].psnr_score == max_psnr);
    CHECK(records[5].strategy == "adaptive");
    for (const auto& r : records) {
        for (float v : r.reconstructions.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("leaked true head beats the shadow-trained decoder") {
    AuxEval d;
    LabeledDataset train = make_synthetic_shapes(256, 1, 8, 72);
    auto defense = make_defense(DefenseKind::Ensembler, train, 3, 2);
    const AttackSurface surface = defense->attack_surface();
    const Tensor intercepted = defense->client_forward(d.eval.normalized_images());

    ShadowConfig scfg;
    scfg.channels = 64;
    scfg.epochs = 12;
    DecoderConfig dcfg;
    dcfg.channels = 64;
    dcfg.epochs = 15;

    const ShadowNetwork shadow = train_shadow(surface, d.aux, AttackStrategy::Single, 0, scfg, 9);
    const Decoder shadow_dec = train_decoder(shadow.shadow_head, d.aux, dcfg, 10);
    // Test-only leak: decoder trained against the real client head.
    const Decoder leaked_dec = train_decoder(defense->leak_true_head(), d.aux, dcfg, 10);

    const double shadow_ssim = ssim(reconstruct(shadow_dec, intercepted), d.eval.images);
    const double leaked_ssim = ssim(reconstruct(leaked_dec, intercepted), d.eval.images);
    CHECK(leaked_ssim > shadow_ssim);
}
