#include <cmath>
#include <set>

#include "doctest.h"
#include "splitshield/defense.hpp"
#include "splitshield/metrics.hpp"

using namespace splitshield;

namespace {

const ArchSpec kTinyShapes{"tiny", {1, 8, 8}, 4};

LabeledDataset shapes_data(std::size_t n = 192, std::uint64_t seed = 17) {
    return make_synthetic_shapes(n, 1, 8, seed);
}

Tensor probe_batch(const LabeledDataset& d, std::size_t n = 32) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return d.normalized_batch(idx);
}

}  // namespace

TEST_CASE("fixed noise is reproducible and respects sigma") {
    const NoiseSpec a = NoiseSpec::create(0.1f, {8, 4, 4}, 77);
    const NoiseSpec b = NoiseSpec::create(0.1f, {8, 4, 4}, 77);
    CHECK(bit_equal(a.tensor, b.tensor));
    const NoiseSpec c = NoiseSpec::create(0.1f, {8, 4, 4}, 78);
    CHECK_FALSE(bit_equal(a.tensor, c.tensor));

    const NoiseSpec zero = NoiseSpec::create(0.0f, {8, 4, 4}, 5);
    for (float v : zero.tensor.data) CHECK(v == 0.0f);
    CHECK_THROWS_AS(NoiseSpec::create(-0.5f, {4}, 1), std::invalid_argument);
}

TEST_CASE("selector choice: uniform subset with 1/P weights") {
    const SelectorKey key = choose_selector(10, 4, 3);
    CHECK(key.activated.size() == 4);
    std::set<std::size_t> uniq(key.activated.begin(), key.activated.end());
    CHECK(uniq.size() == 4);
    for (std::size_t i : key.activated) CHECK(i < 10);
    for (std::size_t r = 1; r < 4; ++r) CHECK(key.activated[r] > key.activated[r - 1]);
    for (float w : key.weights) CHECK(w == doctest::Approx(0.25f));

    CHECK(choose_selector(3, 3, 99).activated == std::vector<std::size_t>{0, 1, 2});
    CHECK(choose_selector(10, 4, 3) == key);  // determinism
    CHECK_THROWS_AS(choose_selector(10, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(choose_selector(10, 11, 1), std::invalid_argument);
}

TEST_CASE("selector_combine concatenates scaled slices in index order") {
    SeedStream rng(5);
    std::vector<Tensor> maps;
    for (int i = 0; i < 6; ++i) {
        Tensor t({2, 3, 4, 4});
        for (auto& v : t.data) v = rng.next_normal(0.0f, 1.0f);
        maps.push_back(std::move(t));
    }
    const SelectorKey key = choose_selector(6, 4, 11);
    const Tensor out = selector_combine(maps, key);
    CHECK(out.shape == std::vector<std::size_t>{2, 12, 4, 4});
    const std::size_t block = 3 * 4 * 4;
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t r = 0; r < 4; ++r) {
            const float* src = maps[key.activated[r]].data.data() + n * block;
            const float* dst = out.data.data() + (n * 4 + r) * block;
            for (std::size_t i = 0; i < block; ++i)
                CHECK(dst[i] == key.weights[r] * src[i]);
        }
    }
}

TEST_CASE("selector_combine degenerate and hand-computed cases") {
    Tensor ones = Tensor::full({1, 2, 2, 2}, 1.0f);
    Tensor zeros = Tensor::zeros({1, 2, 2, 2});

    SelectorKey identity{{0}, {1.0f}};
    CHECK(bit_equal(selector_combine({ones}, identity), ones));

    SelectorKey both{{0, 1}, {0.5f, 0.5f}};
    const Tensor out = selector_combine({ones, zeros}, both);
    CHECK(out.shape == std::vector<std::size_t>{1, 4, 2, 2});
    for (std::size_t i = 0; i < 8; ++i) CHECK(out.data[i] == 0.5f);
    for (std::size_t i = 8; i < 16; ++i) CHECK(out.data[i] == 0.0f);
}

TEST_CASE("selector_combine is elementwise linear in each input") {
    SeedStream rng(123);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Tensor> maps(3, Tensor({1, 2, 3, 3}));
        for (auto& m : maps)
            for (auto& v : m.data) v = rng.next_normal(0.0f, 1.0f);
        SelectorKey key{{0, 2}, {0.5f, 0.5f}};
        const Tensor base = selector_combine(maps, key);
        scale_inplace(maps[2], 2.0f);
        const Tensor doubled = selector_combine(maps, key);
        const std::size_t block = 2 * 3 * 3;
        for (std::size_t i = 0; i < block; ++i) {
            CHECK(doubled.data[i] == base.data[i]);                    // slice 0 untouched
            CHECK(doubled.data[block + i] == 2.0f * base.data[block + i]);
        }
    }
}

TEST_CASE("selector_combine rejects malformed inputs") {
    std::vector<Tensor> maps = {Tensor({1, 2, 2, 2}), Tensor({1, 2, 2, 3})};
    CHECK_THROWS_AS(selector_combine(maps, SelectorKey{{0, 1}, {0.5f, 0.5f}}),
                    std::invalid_argument);
    std::vector<Tensor> ok = {Tensor({1, 2, 2, 2})};
    CHECK_THROWS_AS(selector_combine(ok, SelectorKey{{1}, {1.0f}}), std::invalid_argument);
    CHECK_THROWS_AS(selector_combine(ok, SelectorKey{{0, 0}, {0.5f, 0.5f}}),
                    std::invalid_argument);
}

TEST_CASE("cosine similarity basics") {
    Tensor v({3});
    v.data = {1.0f, 2.0f, -1.0f};
    Tensor neg = v;
    scale_inplace(neg, -1.0f);
    CHECK(cosine_similarity(v, v) == doctest::Approx(1.0));
    CHECK(cosine_similarity(v, neg) == doctest::Approx(-1.0));

    Tensor e1({2}), e2({2});
    e1.data = {1.0f, 0.0f};
    e2.data = {0.0f, 1.0f};
    CHECK(cosine_similarity(e1, e2) == doctest::Approx(0.0));

    Tensor zero({2});
    CHECK(cosine_similarity(zero, e1) == 0.0);
    CHECK_THROWS_AS(cosine_similarity(Tensor({2}), Tensor({3})), std::invalid_argument);
}

TEST_CASE("stage 1 produces noise-distinguished nets") {
    const LabeledDataset data = shapes_data();
    Stage1Config cfg;
    cfg.arch = kTinyShapes;
    cfg.plan = {1, 1};
    cfg.count = 2;
    cfg.sigma = 0.1f;
    cfg.epochs = 10;
    const Stage1Result r = stage1_train(cfg, data, 21);
    REQUIRE(r.models.size() == 2);
    REQUIRE(r.noises.size() == 2);
    CHECK_FALSE(bit_equal(r.noises[0].tensor, r.noises[1].tensor));

    bool head_differs = false;
    for (const auto& name : weight_names(r.models[0].head))
        if (!bit_equal(r.models[0].head.weight(name), r.models[1].head.weight(name)))
            head_differs = true;
    CHECK(head_differs);

    const Tensor probe = probe_batch(data);
    const double cs = batch_mean_cosine(forward(r.models[0].head, probe),
                                        forward(r.models[1].head, probe));
    CHECK(cs < 0.99);
}

TEST_CASE("stage 1 with one net and no noise is plain training") {
    const LabeledDataset data = shapes_data(128);
    Stage1Config cfg;
    cfg.arch = kTinyShapes;
    cfg.plan = {1, 1};
    cfg.count = 1;
    cfg.sigma = 0.0f;
    cfg.epochs = 4;
    const std::uint64_t seed = 33;
    const Stage1Result r = stage1_train(cfg, data, seed);

    const ModelGraph manual_full = build_model(kTinyShapes, stage1_model_seed(seed, 0));
    const TrainResult manual = train_epochs(manual_full, data, LossKind::CrossEntropy,
                                            cfg.optim, cfg.epochs, stage1_train_seed(seed, 0));
    const Tensor probe = probe_batch(data);
    CHECK(bit_equal(split_pipeline_forward(r.models[0], probe), forward(manual.model, probe)));
}

TEST_CASE("stage 1 validates its arguments") {
    const LabeledDataset data = shapes_data(64);
    Stage1Config cfg;
    cfg.arch = kTinyShapes;
    cfg.plan = {1, 1};
    cfg.count = 0;
    CHECK_THROWS_AS(stage1_train(cfg, data, 1), std::invalid_argument);
    cfg.count = 1;
    cfg.sigma = -1.0f;
    CHECK_THROWS_AS(stage1_train(cfg, data, 1), std::invalid_argument);
}

namespace {

struct EnsembleFixture {
    LabeledDataset data = shapes_data(192, 29);
    Stage1Result stage1;
    SelectorKey key;
    EnsembleModel model;
    std::uint64_t seed = 55;

    EnsembleFixture(std::size_t n = 3, std::size_t p = 2, float lambda = 1.0f,
                    float sigma = 0.1f, std::size_t epochs = 8) {
        Stage1Config s1;
        s1.arch = kTinyShapes;
        s1.plan = {1, 1};
        s1.count = n;
        s1.sigma = sigma;
        s1.epochs = epochs;
        stage1 = stage1_train(s1, data, seed);
        key = choose_selector(n, p, derive_seed(seed, "selector"));
        Stage3Config s3;
        s3.lambda_reg = lambda;
        s3.sigma = sigma;
        s3.epochs = epochs;
        model = stage3_train(stage1, key, data, s3, seed);
    }
};

}  // namespace

TEST_CASE("stage 3 freezes the bodies bit-exactly") {
    EnsembleFixture fx;
    for (std::size_t i = 0; i < fx.model.bodies.size(); ++i)
        CHECK(weights_digest(fx.model.bodies[i]) == weights_digest(fx.stage1.models[i].body));
    // Stage-1 heads are retained unmodified for the regularizer.
    for (std::size_t i = 0; i < fx.model.stage1_heads.size(); ++i)
        CHECK(graphs_bit_equal(fx.model.stage1_heads[i], fx.stage1.models[i].head));
}

TEST_CASE("stage 3 lowers the worst-case head similarity") {
    EnsembleFixture fx(3, 2, /*lambda=*/1.0f, 0.1f, /*epochs=*/10);
    const Tensor probe = probe_batch(fx.data);
    const ModelGraph initial_head = stage3_initial_head(fx.stage1, fx.seed);

    auto worst_cs = [&](const ModelGraph& head) {
        double best = -2.0;
        for (std::size_t i : fx.key.activated)
            best = std::max(best, batch_mean_cosine(forward(head, probe),
                                                    forward(fx.model.stage1_heads[i], probe)));
        return best;
    };
    CHECK(worst_cs(fx.model.head) < worst_cs(initial_head));
}

TEST_CASE("composite loss at lambda zero is the sum of per-path cross-entropies") {
    EnsembleFixture fx(3, 2, 0.5f, 0.1f, 4);
    const Tensor probe = probe_batch(fx.data);
    std::vector<int> labels(fx.data.labels.begin(), fx.data.labels.begin() + 32);

    const EnsembleLossBreakdown at_zero = ensemble_training_loss(fx.model, probe, labels, 0.0f);
    REQUIRE(at_zero.per_path_ce.size() == 2);
    double ce_sum = 0.0;
    for (double ce : at_zero.per_path_ce) ce_sum += ce;
    CHECK(std::abs(at_zero.total - ce_sum) < 1e-6);

    const EnsembleLossBreakdown at_one = ensemble_training_loss(fx.model, probe, labels, 1.0f);
    CHECK(at_one.total == doctest::Approx(ce_sum + at_one.regularizer));
    CHECK(at_one.regularizer >= -1.0);
    CHECK(at_one.regularizer <= 1.0);
}

TEST_CASE("degenerate ensemble collapses to the plain split pipeline") {
    EnsembleFixture fx(1, 1, 0.0f, 0.0f, 4);
    const Tensor probe = probe_batch(fx.data);
    const Tensor via_ensemble = ensembler_infer(fx.model, probe);
    const Tensor via_plain =
        forward(fx.model.tail, forward(fx.model.bodies[0], forward(fx.model.head, probe)));
    CHECK(bit_equal(via_ensemble, via_plain));
}

TEST_CASE("ensemble logits are classifier-shaped and stable") {
    EnsembleFixture fx;
    const Tensor probe = probe_batch(fx.data, 8);
    const Tensor a = ensembler_infer(fx.model, probe);
    const Tensor b = ensembler_infer(fx.model, probe);
    CHECK(a.shape == std::vector<std::size_t>{8, 4});
    CHECK(bit_equal(a, b));
}

TEST_CASE("stage 3 rejects keys that do not fit the ensemble") {
    EnsembleFixture fx(2, 1, 0.0f, 0.1f, 1);
    Stage3Config s3;
    SelectorKey bad{{5}, {1.0f}};
    CHECK_THROWS_AS(stage3_train(fx.stage1, bad, fx.data, s3, 1), std::invalid_argument);
}

TEST_CASE("baseline none transmits the bare head output") {
    const LabeledDataset data = shapes_data(128);
    DefenseConfig cfg;
    cfg.kind = DefenseKind::None;
    cfg.baseline_epochs = 3;
    auto defense = build_defense(cfg, kTinyShapes, {1, 1}, data, 7);
    const Tensor probe = probe_batch(data, 8);
    const Tensor features = defense->client_forward(probe);
    CHECK(bit_equal(features, forward(defense->leak_true_head(), probe)));
    // End-to-end logits agree with composing the strategy pieces by hand.
    const Tensor logits = defense->client_finish(defense->server_forward(features));
    CHECK(logits.dim(1) == 4);
}

TEST_CASE("single-noise defense perturbs with its fixed tensor") {
    const LabeledDataset data = shapes_data(128);
    DefenseConfig cfg;
    cfg.kind = DefenseKind::SingleNoise;
    cfg.sigma = 0.1f;
    cfg.baseline_epochs = 3;
    auto defense = build_defense(cfg, kTinyShapes, {1, 1}, data, 7);
    const Tensor probe = probe_batch(data, 4);
    const Tensor f1 = defense->client_forward(probe);
    const Tensor f2 = defense->client_forward(probe);
    CHECK(bit_equal(f1, f2));  // fixed tensor, not fresh draws
    const Tensor head_out = forward(defense->leak_true_head(), probe);
    CHECK_FALSE(bit_equal(f1, head_out));
}

TEST_CASE("trained noise with zero penalty never grows") {
    const LabeledDataset data = shapes_data(128);
    const SplitPipeline plain = train_plain_split(kTinyShapes, {1, 1}, data, {}, 3, 13);
    const Tensor init =
        NoiseSpec::create(0.1f, plain.head.output_shape(), derive_seed(99, "noise/init")).tensor;
    const Tensor trained = train_noise_tensor(plain, data, 0.0f, 0.1f, {}, 5, 99);
    CHECK(l2_norm(trained) <= l2_norm(init) + 1e-9);
    CHECK(bit_equal(trained, init));  // zero penalty keeps the fixed tensor

    const Tensor rewarded = train_noise_tensor(plain, data, 0.2f, 0.1f, {}, 5, 99);
    CHECK(rewarded.all_finite());
    CHECK_FALSE(bit_equal(rewarded, init));
}

TEST_CASE("dropout defenses draw fresh masks per call") {
    const LabeledDataset data = shapes_data(128);
    DefenseConfig cfg;
    cfg.kind = DefenseKind::DropoutSingle;
    cfg.dropout_rate = 0.3f;
    cfg.baseline_epochs = 3;
    auto defense = build_defense(cfg, kTinyShapes, {1, 1}, data, 7);
    const Tensor probe = probe_batch(data, 8);
    const Tensor f1 = defense->client_forward(probe);
    const Tensor f2 = defense->client_forward(probe);
    CHECK_FALSE(bit_equal(f1, f2));

    std::size_t zeros = 0;
    for (float v : f1.data)
        if (v == 0.0f) ++zeros;
    CHECK(zeros > f1.numel() / 10);  // a meaningful share is dropped
}

TEST_CASE("dropout mask respects the rate and inverted scaling") {
    SeedStream rng(4);
    const Tensor mask = dropout_mask({10000}, 0.3f, rng);
    std::size_t kept = 0;
    for (float v : mask.data) {
        CHECK((v == 0.0f || v == doctest::Approx(1.0f / 0.7f)));
        if (v != 0.0f) ++kept;
    }
    CHECK(kept > 6500);
    CHECK(kept < 7500);
    CHECK_THROWS_AS(dropout_mask({4}, 1.0f, rng), std::invalid_argument);
}

TEST_CASE("defense kind names round-trip and reject junk") {
    for (DefenseKind k : {DefenseKind::None, DefenseKind::SingleNoise, DefenseKind::TrainedNoise,
                          DefenseKind::DropoutSingle, DefenseKind::DropoutEnsemble,
                          DefenseKind::Ensembler})
        CHECK(defense_kind_from_name(defense_kind_name(k)) == k);
    CHECK_THROWS_AS(defense_kind_from_name("shredder++"), std::invalid_argument);
}

TEST_CASE("attack surface never exposes client secrets") {
    const LabeledDataset data = shapes_data(96);
    DefenseConfig cfg;
    cfg.kind = DefenseKind::Ensembler;
    cfg.ensemble_size = 2;
    cfg.active_count = 1;
    cfg.stage1_epochs = 2;
    cfg.stage3_epochs = 2;
    auto defense = build_defense(cfg, kTinyShapes, {1, 1}, data, 7);
    const AttackSurface s = defense->attack_surface();
    CHECK(s.bodies.size() == 2);
    CHECK(s.class_count == 4);
    CHECK(s.input_shape == std::vector<std::size_t>{1, 8, 8});
    // The tail structure is weight-stripped and single-net shaped: its width
    // must not reveal the active count.
    for (const auto& name : weight_names(s.tail_structure))
        if (!name.ends_with("gamma") && !name.ends_with("rvar"))
            for (float v : s.tail_structure.weight(name).data) CHECK(v == 0.0f);
    const std::size_t body_features = shape_numel(s.bodies[0].output_shape());
    CHECK(s.tail_structure.layers.back().in_features == body_features);
}
