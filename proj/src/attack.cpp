#include "splitshield/attack.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <stdexcept>

#include "splitshield/metrics.hpp"

namespace splitshield {

namespace {

std::size_t spatial_factor(std::size_t in, std::size_t out, const char* what) {
    if (out == 0 || in % out != 0)
        throw std::invalid_argument(std::string(what) + ": spatial sizes not divisible");
    const std::size_t f = in / out;
    if (f != 1 && f != 2 && f != 4 && f != 8)
        throw std::invalid_argument(std::string(what) + ": unsupported spatial ratio " +
                                    std::to_string(f));
    return f;
}

}  // namespace

ModelGraph build_shadow_head(const std::vector<std::size_t>& input_shape,
                             const std::vector<std::size_t>& feature_shape, std::size_t channels,
                             std::uint64_t seed) {
    if (input_shape.size() != 3 || feature_shape.size() != 3)
        throw std::invalid_argument("shadow head: expected CxHxW shapes");
    const std::size_t fy = spatial_factor(input_shape[1], feature_shape[1], "shadow head");
    const std::size_t fx = spatial_factor(input_shape[2], feature_shape[2], "shadow head");
    if (fy != fx) throw std::invalid_argument("shadow head: anisotropic downsampling");
    std::size_t downs = 0;
    for (std::size_t f = fy; f > 1; f /= 2) ++downs;

    auto stride_of = [&](std::size_t layer) { return layer < downs ? 2u : 1u; };
    ModelGraph g;
    g.input_shape = input_shape;
    g.layers = {
        conv2d(input_shape[0], channels, 3, stride_of(0), 1),
        relu(),
        conv2d(channels, channels, 3, stride_of(1), 1),
        relu(),
        conv2d(channels, feature_shape[0], 3, stride_of(2), 1),
    };
    g.unit_offsets = {0};
    SeedStream rng = derive_stream(seed, "shadow/init");
    init_weights(g, rng);
    if (g.output_shape() != feature_shape)
        throw std::invalid_argument("shadow head: cannot match feature shape " +
                                    shape_str(feature_shape));
    return g;
}

ModelGraph build_decoder_graph(const std::vector<std::size_t>& feature_shape,
                               const std::vector<std::size_t>& image_shape, std::size_t channels,
                               std::uint64_t seed) {
    if (feature_shape.size() != 3 || image_shape.size() != 3)
        throw std::invalid_argument("decoder: expected CxHxW shapes");
    const std::size_t fy = spatial_factor(image_shape[1], feature_shape[1], "decoder");
    const std::size_t fx = spatial_factor(image_shape[2], feature_shape[2], "decoder");
    if (fy != fx) throw std::invalid_argument("decoder: anisotropic upsampling");

    ModelGraph g;
    g.input_shape = feature_shape;
    g.layers.push_back(conv2d(feature_shape[0], channels, 3, 1, 1));
    g.layers.push_back(relu());
    for (std::size_t f = fy; f > 1; f /= 2) {
        g.layers.push_back(conv_transpose2d(channels, channels, 4, 2, 1));
        g.layers.push_back(relu());
    }
    g.layers.push_back(conv2d(channels, image_shape[0], 3, 1, 1));
    g.layers.push_back(clamp01());
    g.unit_offsets = {0};
    SeedStream rng = derive_stream(seed, "decoder/init");
    init_weights(g, rng);
    if (g.output_shape() != image_shape)
        throw std::invalid_argument("decoder: cannot match image shape " + shape_str(image_shape));
    return g;
}

namespace {

// Single-body shadow training: shadow_head -> frozen body -> shadow_tail.
ShadowNetwork train_shadow_single(const AttackSurface& surface, const LabeledDataset& aux,
                                  std::size_t body_index, const ShadowConfig& cfg,
                                  std::uint64_t seed) {
    const ModelGraph& body = surface.bodies.at(body_index);
    ShadowNetwork net;
    net.target_bodies = {body_index};
    net.shadow_head =
        build_shadow_head(surface.input_shape, surface.feature_shape, cfg.channels, seed);
    {
        SeedStream rng = derive_stream(seed, "shadow/tail");
        ModelGraph tail = surface.tail_structure;
        init_weights(tail, rng);
        net.shadow_tail = std::move(tail);
    }
    SgdState head_state, tail_state;
    SeedStream shuffle = derive_stream(seed, "shadow/shuffle");
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : make_batches(aux.size(), cfg.optim.batch_size, shuffle)) {
            const Tensor x = aux.normalized_batch(batch);
            const auto labels = aux.label_batch(batch);
            Tape tape_h, tape_b, tape_t;
            Tensor u = forward_train(net.shadow_head, x, tape_h);
            Tensor f = forward_frozen(body, u, tape_b);
            Tensor logits = forward_train(net.shadow_tail, f, tape_t);
            Tensor grad;
            const double loss = softmax_xent_loss_grad(logits, labels, grad);
            if (!std::isfinite(loss)) throw std::runtime_error("shadow training: non-finite loss");
            GradMap gh, gt;
            Tensor g_f = backward(net.shadow_tail, tape_t, grad, &gt);
            Tensor g_u = backward(body, tape_b, g_f, nullptr);
            backward(net.shadow_head, tape_h, g_u, &gh);
            sgd_step(net.shadow_head, gh, head_state, cfg.optim);
            sgd_step(net.shadow_tail, gt, tail_state, cfg.optim);
            epoch_loss += loss * static_cast<double>(batch.size());
            seen += batch.size();
            ++net.budget_steps;
        }
        net.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    return net;
}

// Adaptive shadow: routes through every body, combining the feature maps with
// a selector-shaped gate (softmax-parameterized when trained).
ShadowNetwork train_shadow_adaptive(const AttackSurface& surface, const LabeledDataset& aux,
                                    const ShadowConfig& cfg, std::uint64_t seed) {
    const std::size_t n = surface.bodies.size();
    ShadowNetwork net;
    for (std::size_t i = 0; i < n; ++i) net.target_bodies.push_back(i);
    net.shadow_head =
        build_shadow_head(surface.input_shape, surface.feature_shape, cfg.channels, seed);

    const auto block_shape = surface.bodies.front().output_shape();
    {
        // Widen the public single-net tail to consume all N feature blocks.
        ModelGraph tail = surface.tail_structure;
        tail.input_shape[0] *= n;
        bool widened = n == 1;
        for (auto& l : tail.layers) {
            if (widened) break;
            if (l.kind == LayerKind::Dense) {
                l.in_features *= n;
                widened = true;
            } else if (l.kind == LayerKind::Conv2d) {
                l.in_ch *= n;
                widened = true;
            }
        }
        if (!widened) throw std::invalid_argument("adaptive shadow: tail cannot be widened");
        SeedStream rng = derive_stream(seed, "shadow/tail");
        init_weights(tail, rng);
        net.shadow_tail = std::move(tail);
    }

    std::vector<float> gate_logits(n, 0.0f);
    std::vector<float> gate_velocity(n, 0.0f);
    auto gate_weights = [&]() {
        std::vector<float> w(n);
        float mx = gate_logits[0];
        for (float v : gate_logits) mx = std::max(mx, v);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = std::exp(gate_logits[i] - mx);
            sum += w[i];
        }
        for (auto& v : w) v = static_cast<float>(v / sum);
        return w;
    };

    const std::size_t block = shape_numel(block_shape);
    SgdState head_state, tail_state;
    SeedStream shuffle = derive_stream(seed, "shadow/shuffle");
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : make_batches(aux.size(), cfg.optim.batch_size, shuffle)) {
            const Tensor x = aux.normalized_batch(batch);
            const auto labels = aux.label_batch(batch);
            const std::vector<float> w = gate_weights();

            Tape tape_h;
            Tensor u = forward_train(net.shadow_head, x, tape_h);
            std::vector<Tape> body_tapes(n);
            std::vector<Tensor> feats(n);
            for (std::size_t i = 0; i < n; ++i)
                feats[i] = forward_frozen(surface.bodies[i], u, body_tapes[i]);

            std::vector<std::size_t> comb_shape = {x.dim(0)};
            comb_shape.insert(comb_shape.end(), block_shape.begin(), block_shape.end());
            comb_shape[1] *= n;
            Tensor combined(comb_shape);
            for (std::size_t s = 0; s < x.dim(0); ++s)
                for (std::size_t i = 0; i < n; ++i) {
                    const float* src = feats[i].data.data() + s * block;
                    float* dst = combined.data.data() + (s * n + i) * block;
                    for (std::size_t k = 0; k < block; ++k) dst[k] = w[i] * src[k];
                }

            Tape tape_t;
            Tensor logits = forward_train(net.shadow_tail, combined, tape_t);
            Tensor grad;
            const double loss = softmax_xent_loss_grad(logits, labels, grad);
            if (!std::isfinite(loss))
                throw std::runtime_error("adaptive shadow: non-finite loss");
            GradMap gh, gt;
            Tensor g_combined = backward(net.shadow_tail, tape_t, grad, &gt);

            Tensor g_u(u.shape);
            std::vector<double> g_w(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                Tensor g_f(feats[i].shape);
                for (std::size_t s = 0; s < x.dim(0); ++s) {
                    const float* gsrc = g_combined.data.data() + (s * n + i) * block;
                    const float* fsrc = feats[i].data.data() + s * block;
                    float* gdst = g_f.data.data() + s * block;
                    for (std::size_t k = 0; k < block; ++k) {
                        gdst[k] = w[i] * gsrc[k];
                        g_w[i] += static_cast<double>(gsrc[k]) * fsrc[k];
                    }
                }
                Tensor g_ui = backward(surface.bodies[i], body_tapes[i], g_f, nullptr);
                add_inplace(g_u, g_ui);
            }
            backward(net.shadow_head, tape_h, g_u, &gh);
            sgd_step(net.shadow_head, gh, head_state, cfg.optim);
            sgd_step(net.shadow_tail, gt, tail_state, cfg.optim);

            if (cfg.train_gate) {
                // Softmax Jacobian: da_i = w_i * (gw_i - sum_k w_k gw_k).
                double mixed = 0.0;
                for (std::size_t i = 0; i < n; ++i) mixed += w[i] * g_w[i];
                for (std::size_t i = 0; i < n; ++i) {
                    const float ga = static_cast<float>(w[i] * (g_w[i] - mixed));
                    gate_velocity[i] = cfg.optim.momentum * gate_velocity[i] + ga;
                    gate_logits[i] -= cfg.optim.lr * gate_velocity[i];
                }
            }
            epoch_loss += loss * static_cast<double>(batch.size());
            seen += batch.size();
            ++net.budget_steps;
        }
        net.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    net.gate = gate_weights();
    return net;
}

}  // namespace

ShadowNetwork train_shadow(const AttackSurface& surface, const LabeledDataset& aux,
                           AttackStrategy strategy, std::size_t body_index,
                           const ShadowConfig& cfg, std::uint64_t seed) {
    if (surface.bodies.empty()) throw std::invalid_argument("attack: no server nets");
    if (strategy == AttackStrategy::Single) {
        if (body_index >= surface.bodies.size())
            throw std::out_of_range("attack: body index " + std::to_string(body_index) + " of " +
                                    std::to_string(surface.bodies.size()));
        return train_shadow_single(surface, aux, body_index, cfg, seed);
    }
    if (surface.bodies.size() == 1) {
        // Degenerate adaptive: identical to the single-body attack.
        ShadowNetwork net = train_shadow_single(surface, aux, 0, cfg, seed);
        net.gate = {1.0f};
        return net;
    }
    return train_shadow_adaptive(surface, aux, cfg, seed);
}

Decoder train_decoder(const ModelGraph& head, const LabeledDataset& aux,
                      const DecoderConfig& cfg, std::uint64_t seed) {
    const auto feature_shape = head.output_shape();
    Decoder dec;
    dec.graph = build_decoder_graph(feature_shape, aux.image_shape(), cfg.channels, seed);

    // The head is fixed; its features can be computed once.
    const Tensor features = forward(head, aux.normalized_images());
    SgdState state;
    SeedStream shuffle = derive_stream(seed, "decoder/shuffle");
    const std::size_t per_f = features.numel() / features.dim(0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : make_batches(aux.size(), cfg.optim.batch_size, shuffle)) {
            std::vector<std::size_t> fshape = {batch.size()};
            fshape.insert(fshape.end(), feature_shape.begin(), feature_shape.end());
            Tensor fb(fshape);
            for (std::size_t i = 0; i < batch.size(); ++i)
                std::copy_n(features.data.data() + batch[i] * per_f, per_f,
                            fb.data.data() + i * per_f);
            const Tensor target = aux.raw_batch(batch);
            Tape tape;
            Tensor out = forward_train(dec.graph, fb, tape);
            Tensor grad;
            const double loss = mse_loss_grad(out, target, grad);
            if (!std::isfinite(loss)) throw std::runtime_error("decoder training: non-finite loss");
            GradMap g;
            backward(dec.graph, tape, grad, &g);
            sgd_step(dec.graph, g, state, cfg.optim);
            epoch_loss += loss * static_cast<double>(batch.size());
            seen += batch.size();
            ++dec.budget_steps;
        }
        dec.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    return dec;
}

Tensor reconstruct(const Decoder& decoder, const Tensor& intercepted) {
    // The graph ends in a clamp, so outputs are already in [0,1].
    return forward(decoder.graph, intercepted);
}

std::vector<AttackResult> run_attack(const AttackSurface& surface, const LabeledDataset& aux,
                                     const Tensor& eval_images_raw, const Tensor& intercepted,
                                     const AttackOptions& options, std::uint64_t seed) {
    if (eval_images_raw.dim(0) != intercepted.dim(0))
        throw std::invalid_argument("attack: eval images and intercepted features disagree");
    std::vector<AttackResult> records;

    auto attack_once = [&](AttackStrategy strategy, std::size_t index,
                           std::uint64_t sub_seed) {
        ShadowNetwork shadow = train_shadow(surface, aux, strategy, index, options.shadow,
                                            derive_seed(sub_seed, "shadow"));
        Decoder decoder =
            train_decoder(shadow.shadow_head, aux, options.decoder, derive_seed(sub_seed, "decoder"));
        AttackResult r;
        r.reconstructions = reconstruct(decoder, intercepted);
        r.ssim_score = ssim(r.reconstructions, eval_images_raw);
        r.psnr_score = psnr(r.reconstructions, eval_images_raw);
        r.budget_steps = shadow.budget_steps + decoder.budget_steps;
        r.seed = sub_seed;
        return r;
    };

    for (AttackStrategy strategy : options.strategies) {
        if (strategy == AttackStrategy::Single) {
            const std::size_t n = surface.bodies.size();
            std::vector<AttackResult> singles(n);
            auto run_one = [&](std::size_t i) {
                singles[i] = attack_once(AttackStrategy::Single, i,
                                         derive_seed(seed, "single/" + std::to_string(i)));
                singles[i].strategy = "single(" + std::to_string(i) + ")";
            };
            if (options.parallel && n > 1) {
                std::vector<std::future<void>> futures;
                for (std::size_t i = 0; i < n; ++i)
                    futures.push_back(std::async(std::launch::async, run_one, i));
                for (auto& f : futures) f.get();
            } else {
                for (std::size_t i = 0; i < n; ++i) run_one(i);
            }
            std::size_t best_ssim = 0, best_psnr = 0;
            for (std::size_t i = 1; i < n; ++i) {
                if (singles[i].ssim_score > singles[best_ssim].ssim_score) best_ssim = i;
                if (singles[i].psnr_score > singles[best_psnr].psnr_score) best_psnr = i;
            }
            AttackResult ssim_row = singles[best_ssim];
            AttackResult psnr_row = singles[best_psnr];
            for (auto& s : singles) records.push_back(std::move(s));
            ssim_row.strategy = "best-ssim";
            psnr_row.strategy = "best-psnr";
            records.push_back(std::move(ssim_row));
            records.push_back(std::move(psnr_row));
        } else {
            AttackResult r = attack_once(AttackStrategy::Adaptive, 0,
                                         derive_seed(seed, "adaptive"));
            r.strategy = "adaptive";
            records.push_back(std::move(r));
        }
    }
    return records;
}

}  // namespace splitshield
