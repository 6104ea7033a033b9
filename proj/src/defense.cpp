#include "splitshield/defense.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <stdexcept>

#include "json.hpp"
#include "splitshield/checkpoint.hpp"

namespace splitshield {

NoiseSpec NoiseSpec::create(float sigma, const std::vector<std::size_t>& feature_shape,
                            std::uint64_t seed) {
    if (sigma < 0.0f) throw std::invalid_argument("noise: sigma must be non-negative");
    NoiseSpec n;
    n.sigma = sigma;
    n.seed = seed;
    n.tensor = Tensor(feature_shape);
    SeedStream rng = derive_stream(seed, "noise/sample");
    if (sigma > 0.0f)
        for (float& v : n.tensor.data) v = rng.next_normal(0.0f, sigma);
    return n;
}

SelectorKey choose_selector(std::size_t n, std::size_t p, std::uint64_t seed) {
    if (p < 1 || p > n)
        throw std::invalid_argument("selector: need 1 <= P <= N, got P=" + std::to_string(p) +
                                    " N=" + std::to_string(n));
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    SeedStream rng = derive_stream(seed, "selector/choose");
    // Partial Fisher-Yates: the first P entries are a uniform P-subset.
    for (std::size_t i = 0; i < p; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
        std::swap(pool[i], pool[j]);
    }
    SelectorKey key;
    key.activated.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(p));
    std::sort(key.activated.begin(), key.activated.end());
    key.weights.assign(p, 1.0f / static_cast<float>(p));
    return key;
}

Tensor selector_combine(const std::vector<Tensor>& outputs, const SelectorKey& key) {
    if (outputs.empty()) throw std::invalid_argument("selector: no feature maps");
    if (key.activated.empty() || key.weights.size() != key.activated.size())
        throw std::invalid_argument("selector: malformed key");
    for (std::size_t r = 1; r < key.activated.size(); ++r)
        if (key.activated[r] <= key.activated[r - 1])
            throw std::invalid_argument("selector: activated indices must be strictly increasing");
    if (key.activated.back() >= outputs.size())
        throw std::invalid_argument("selector: key references net " +
                                    std::to_string(key.activated.back()) + " of " +
                                    std::to_string(outputs.size()));
    const Tensor& first = outputs[key.activated.front()];
    if (first.ndim() < 2)
        throw std::invalid_argument("selector: feature maps need a batch and channel axis");
    for (std::size_t i : key.activated)
        if (!outputs[i].same_shape(first))
            throw std::invalid_argument("selector: feature map shapes differ");

    const std::size_t p = key.activated.size();
    const std::size_t batch = first.dim(0);
    const std::size_t per = first.numel() / batch;  // per-sample block being concatenated
    std::vector<std::size_t> out_shape = first.shape;
    out_shape[1] *= p;
    Tensor out(out_shape);
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t r = 0; r < p; ++r) {
            const float w = key.weights[r];
            const float* src = outputs[key.activated[r]].data.data() + n * per;
            float* dst = out.data.data() + (n * p + r) * per;
            for (std::size_t i = 0; i < per; ++i) dst[i] = w * src[i];
        }
    }
    return out;
}

namespace {
constexpr double kNormEps = 1e-12;
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel())
        throw std::invalid_argument("cosine: length mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    double dotv = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        dotv += static_cast<double>(a.data[i]) * b.data[i];
        na += static_cast<double>(a.data[i]) * a.data[i];
        nb += static_cast<double>(b.data[i]) * b.data[i];
    }
    if (na < kNormEps || nb < kNormEps) return 0.0;
    return dotv / (std::sqrt(na) * std::sqrt(nb));
}

double batch_mean_cosine(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b) || a.ndim() < 1)
        throw std::invalid_argument("batch cosine: shape mismatch");
    const std::size_t n = a.dim(0), per = a.numel() / a.dim(0);
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double dotv = 0.0, na = 0.0, nb = 0.0;
        const float* pa = a.data.data() + s * per;
        const float* pb = b.data.data() + s * per;
        for (std::size_t i = 0; i < per; ++i) {
            dotv += static_cast<double>(pa[i]) * pb[i];
            na += static_cast<double>(pa[i]) * pa[i];
            nb += static_cast<double>(pb[i]) * pb[i];
        }
        if (na >= kNormEps && nb >= kNormEps) total += dotv / (std::sqrt(na) * std::sqrt(nb));
    }
    return total / static_cast<double>(n);
}

namespace {

// d/d(a_row) of the per-sample cosine, scaled by `coeff`, accumulated into
// grad rows. Rows with (near) zero norm contribute nothing.
void accumulate_cosine_grad(const Tensor& a, const Tensor& b, float coeff, Tensor& grad) {
    const std::size_t n = a.dim(0), per = a.numel() / a.dim(0);
    for (std::size_t s = 0; s < n; ++s) {
        const float* pa = a.data.data() + s * per;
        const float* pb = b.data.data() + s * per;
        float* pg = grad.data.data() + s * per;
        double dotv = 0.0, na2 = 0.0, nb2 = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            dotv += static_cast<double>(pa[i]) * pb[i];
            na2 += static_cast<double>(pa[i]) * pa[i];
            nb2 += static_cast<double>(pb[i]) * pb[i];
        }
        if (na2 < kNormEps || nb2 < kNormEps) continue;
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        const double inv = 1.0 / (na * nb);
        const double proj = dotv / (na2 * na * nb);
        for (std::size_t i = 0; i < per; ++i)
            pg[i] += coeff * static_cast<float>(pb[i] * inv - pa[i] * proj);
    }
}

}  // namespace

Tensor split_pipeline_forward(const SplitPipeline& p, const Tensor& x) {
    return forward(p.tail, forward(p.body, forward(p.head, x)));
}

// ---------------------------------------------------------------------------
// Shared split-pipeline trainer

namespace {

struct SplitTrainOptions {
    const Tensor* fixed_noise = nullptr;  // per-sample feature shape, added after the head
    float dropout_rate = 0.0f;            // applied to the transmitted features
    OptimizerConfig optim;
    std::size_t epochs = 0;
    std::uint64_t seed = 0;
};

std::vector<double> train_split_pipeline(SplitPipeline& p, const LabeledDataset& data,
                                         const SplitTrainOptions& o) {
    if (data.size() == 0) throw std::invalid_argument("split training: empty dataset");
    SgdState head_state, body_state, tail_state;
    SeedStream shuffle = derive_stream(o.seed, "train/shuffle");
    SeedStream drop_rng = derive_stream(o.seed, "train/dropout");
    std::vector<double> losses;
    for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : make_batches(data.size(), o.optim.batch_size, shuffle)) {
            const Tensor x = data.normalized_batch(batch);
            const auto labels = data.label_batch(batch);
            Tape tape_h, tape_b, tape_t;
            Tensor u = forward_train(p.head, x, tape_h);
            Tensor z = o.fixed_noise ? add_broadcast_sample(u, *o.fixed_noise) : u;
            Tensor mask;
            if (o.dropout_rate > 0.0f) {
                mask = dropout_mask(z.shape, o.dropout_rate, drop_rng);
                for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] *= mask.data[i];
            }
            Tensor f = forward_train(p.body, z, tape_b);
            Tensor logits = forward_train(p.tail, f, tape_t);
            Tensor grad;
            const double loss = softmax_xent_loss_grad(logits, labels, grad);
            if (!std::isfinite(loss))
                throw std::runtime_error("split training: non-finite loss at epoch " +
                                         std::to_string(epoch));
            GradMap gh, gb, gt;
            Tensor g_f = backward(p.tail, tape_t, grad, &gt);
            Tensor g_z = backward(p.body, tape_b, g_f, &gb);
            if (o.dropout_rate > 0.0f)
                for (std::size_t i = 0; i < g_z.data.size(); ++i) g_z.data[i] *= mask.data[i];
            backward(p.head, tape_h, g_z, &gh);
            sgd_step(p.head, gh, head_state, o.optim);
            sgd_step(p.body, gb, body_state, o.optim);
            sgd_step(p.tail, gt, tail_state, o.optim);
            epoch_loss += loss * static_cast<double>(batch.size());
            seen += batch.size();
        }
        losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    return losses;
}

ModelGraph reinit_graph(const ModelGraph& structure, SeedStream rng) {
    ModelGraph g = structure;
    init_weights(g, rng);
    return g;
}

// The stage-3 tail consumes the concatenation of P per-net feature blocks:
// widen the first weighted layer's input accordingly and re-initialize.
ModelGraph adapt_tail_for_concat(const ModelGraph& tail, std::size_t p, SeedStream rng) {
    ModelGraph t = tail;
    if (t.input_shape.empty()) throw std::invalid_argument("tail adaptation: no input shape");
    t.input_shape[0] *= p;
    bool widened = p == 1;
    for (auto& l : t.layers) {
        if (widened) break;
        if (l.kind == LayerKind::Dense) {
            l.in_features *= p;
            widened = true;
        } else if (l.kind == LayerKind::Conv2d) {
            l.in_ch *= p;
            widened = true;
        } else if (l.kind == LayerKind::BatchNorm2d || l.kind == LayerKind::Residual) {
            throw std::invalid_argument("tail adaptation: unsupported leading layer");
        }
    }
    if (!widened) throw std::invalid_argument("tail adaptation: no weighted layer found");
    init_weights(t, rng);
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1

std::uint64_t stage1_model_seed(std::uint64_t master, std::size_t index) {
    return derive_seed(master, "stage1/init/" + std::to_string(index));
}
std::uint64_t stage1_train_seed(std::uint64_t master, std::size_t index) {
    return derive_seed(master, "stage1/train/" + std::to_string(index));
}
std::uint64_t stage1_noise_seed(std::uint64_t master, std::size_t index) {
    return derive_seed(master, "stage1/noise/" + std::to_string(index));
}

Stage1Result stage1_train(const Stage1Config& cfg, const LabeledDataset& data,
                          std::uint64_t seed) {
    if (cfg.count < 1) throw std::invalid_argument("stage 1: need at least one net");
    if (cfg.sigma < 0.0f) throw std::invalid_argument("stage 1: sigma must be non-negative");
    Stage1Result result;
    result.plan = cfg.plan;
    result.models.resize(cfg.count);
    result.noises.resize(cfg.count);
    result.final_losses.resize(cfg.count);

    auto train_one = [&](std::size_t i) {
        const ModelGraph full = build_model(cfg.arch, stage1_model_seed(seed, i));
        ModelPartition part = split_model(full, cfg.plan);
        SplitPipeline pipe{std::move(part.head), std::move(part.body), std::move(part.tail)};
        NoiseSpec noise =
            NoiseSpec::create(cfg.sigma, pipe.head.output_shape(), stage1_noise_seed(seed, i));
        SplitTrainOptions o;
        o.fixed_noise = noise.sigma != 0.0f ? &noise.tensor : nullptr;
        o.optim = cfg.optim;
        o.epochs = cfg.epochs;
        o.seed = stage1_train_seed(seed, i);
        const auto losses = train_split_pipeline(pipe, data, o);
        result.models[i] = std::move(pipe);
        result.noises[i] = std::move(noise);
        result.final_losses[i] = losses.empty() ? 0.0 : losses.back();
    };

    if (cfg.parallel && cfg.count > 1) {
        std::vector<std::future<void>> futures;
        futures.reserve(cfg.count);
        for (std::size_t i = 0; i < cfg.count; ++i)
            futures.push_back(std::async(std::launch::async, train_one, i));
        for (auto& f : futures) f.get();
    } else {
        for (std::size_t i = 0; i < cfg.count; ++i) train_one(i);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Stage 3

namespace {

// Writes `weight * f` into slot `rank` of a (batch, p * block) tensor.
void embed_slot(const Tensor& f, std::size_t rank, std::size_t p, float weight, Tensor& out) {
    const std::size_t batch = f.dim(0);
    const std::size_t per = f.numel() / batch;
    for (std::size_t n = 0; n < batch; ++n) {
        const float* src = f.data.data() + n * per;
        float* dst = out.data.data() + (n * p + rank) * per;
        for (std::size_t i = 0; i < per; ++i) dst[i] = weight * src[i];
    }
}

Tensor extract_slot(const Tensor& combined, std::size_t rank, std::size_t p, float weight,
                    const std::vector<std::size_t>& block_shape) {
    const std::size_t batch = combined.dim(0);
    const std::size_t per = combined.numel() / batch / p;
    std::vector<std::size_t> shape = {batch};
    shape.insert(shape.end(), block_shape.begin(), block_shape.end());
    Tensor out(shape);
    for (std::size_t n = 0; n < batch; ++n) {
        const float* src = combined.data.data() + (n * p + rank) * per;
        float* dst = out.data.data() + n * per;
        for (std::size_t i = 0; i < per; ++i) dst[i] = weight * src[i];
    }
    return out;
}

std::vector<std::size_t> concat_batch_shape(const std::vector<std::size_t>& block_shape,
                                            std::size_t batch, std::size_t p) {
    std::vector<std::size_t> s = {batch};
    s.insert(s.end(), block_shape.begin(), block_shape.end());
    s[1] *= p;
    return s;
}

void validate_key(const SelectorKey& key, std::size_t n) {
    if (key.activated.empty() || key.weights.size() != key.activated.size())
        throw std::invalid_argument("ensemble: malformed selector key");
    if (key.activated.back() >= n)
        throw std::invalid_argument("ensemble: key references a net outside the ensemble");
}

// Client-side retraining shared by the ensemble defense and the dropout
// ensemble baseline (which runs it with lambda 0 and dropout instead of
// additive noise).
std::vector<double> train_ensemble_client(EnsembleModel& m, const LabeledDataset& data,
                                          const Stage3Config& cfg, float dropout_rate,
                                          std::uint64_t seed) {
    validate_key(m.key, m.bodies.size());
    const std::size_t p = m.key.active_count();
    const auto block_shape = m.bodies[m.key.activated.front()].output_shape();

    std::vector<std::size_t> reg_targets;
    if (cfg.regularize_all) {
        for (std::size_t i = 0; i < m.stage1_heads.size(); ++i) reg_targets.push_back(i);
    } else {
        reg_targets = m.key.activated;
    }

    SgdState head_state, tail_state;
    SeedStream shuffle = derive_stream(seed, "stage3/shuffle");
    SeedStream drop_rng = derive_stream(seed, "stage3/dropout");
    std::vector<double> losses;
    std::vector<std::uint64_t> frozen_digests;
    for (const auto& b : m.bodies) frozen_digests.push_back(weights_digest(b));

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : make_batches(data.size(), cfg.optim.batch_size, shuffle)) {
            const Tensor x = data.normalized_batch(batch);
            const auto labels = data.label_batch(batch);

            Tape tape_h;
            Tensor u = forward_train(m.head, x, tape_h);
            Tensor z = m.noise.sigma != 0.0f ? add_broadcast_sample(u, m.noise.tensor) : u;
            Tensor mask;
            if (dropout_rate > 0.0f) {
                mask = dropout_mask(z.shape, dropout_rate, drop_rng);
                for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] *= mask.data[i];
            }

            GradMap head_grads, tail_grads;
            Tensor g_u(u.shape);
            Tensor g_z(z.shape);
            double batch_loss = 0.0;

            // One cross-entropy per active path: body r's scaled features sit
            // in their selector slot, the other slots stay zero.
            for (std::size_t r = 0; r < p; ++r) {
                const std::size_t i = m.key.activated[r];
                const float s_i = m.key.weights[r];
                Tape tape_b, tape_t;
                Tensor f = forward_frozen(m.bodies[i], z, tape_b);
                Tensor combined(concat_batch_shape(block_shape, x.dim(0), p));
                embed_slot(f, r, p, s_i, combined);
                Tensor logits = forward_train(m.tail, combined, tape_t);
                Tensor grad;
                batch_loss += softmax_xent_loss_grad(logits, labels, grad);
                Tensor g_combined = backward(m.tail, tape_t, grad, &tail_grads);
                Tensor g_f = extract_slot(g_combined, r, p, s_i, block_shape);
                Tensor g_zi = backward(m.bodies[i], tape_b, g_f, nullptr);
                add_inplace(g_z, g_zi);
            }
            if (dropout_rate > 0.0f)
                for (std::size_t i = 0; i < g_z.data.size(); ++i)
                    g_z.data[i] *= mask.data[i];
            add_inplace(g_u, g_z);

            // Regularizer: penalize the most similar frozen stage-1 head.
            if (cfg.lambda_reg != 0.0f && !reg_targets.empty()) {
                double best = -2.0;
                std::size_t best_i = reg_targets.front();
                std::vector<Tensor> head_outputs(m.stage1_heads.size());
                for (std::size_t i : reg_targets) {
                    head_outputs[i] = forward(m.stage1_heads[i], x);
                    const double cs = batch_mean_cosine(u, head_outputs[i]);
                    if (cs > best) {
                        best = cs;
                        best_i = i;
                    }
                }
                batch_loss += cfg.lambda_reg * best;
                accumulate_cosine_grad(u, head_outputs[best_i],
                                       cfg.lambda_reg / static_cast<float>(x.dim(0)), g_u);
            }

            if (!std::isfinite(batch_loss))
                throw std::runtime_error("ensemble training: non-finite loss at epoch " +
                                         std::to_string(epoch));
            backward(m.head, tape_h, g_u, &head_grads);
            sgd_step(m.head, head_grads, head_state, cfg.optim);
            sgd_step(m.tail, tail_grads, tail_state, cfg.optim);
            epoch_loss += batch_loss * static_cast<double>(batch.size());
            seen += batch.size();
        }
        losses.push_back(epoch_loss / static_cast<double>(seen));
    }

    for (std::size_t i = 0; i < m.bodies.size(); ++i)
        if (weights_digest(m.bodies[i]) != frozen_digests[i])
            throw std::logic_error("ensemble training: frozen body " + std::to_string(i) +
                                   " changed");
    return losses;
}

}  // namespace

ModelGraph stage3_initial_head(const Stage1Result& stage1, std::uint64_t seed) {
    if (stage1.models.empty()) throw std::invalid_argument("stage 3: empty stage-1 result");
    return reinit_graph(stage1.models.front().head, derive_stream(seed, "stage3/head"));
}

EnsembleModel stage3_train(const Stage1Result& stage1, const SelectorKey& key,
                           const LabeledDataset& data, const Stage3Config& cfg,
                           std::uint64_t seed) {
    if (stage1.models.empty()) throw std::invalid_argument("stage 3: empty stage-1 result");
    validate_key(key, stage1.models.size());

    EnsembleModel m;
    m.plan = stage1.plan;
    m.key = key;
    for (const auto& pipe : stage1.models) {
        m.bodies.push_back(pipe.body);
        m.stage1_heads.push_back(pipe.head);
    }
    m.head = reinit_graph(stage1.models.front().head, derive_stream(seed, "stage3/head"));
    m.noise =
        NoiseSpec::create(cfg.sigma, m.head.output_shape(), derive_seed(seed, "stage3/noise"));
    m.tail = adapt_tail_for_concat(stage1.models.front().tail, key.active_count(),
                                   derive_stream(seed, "stage3/tail"));
    m.single_tail_structure = strip_weights(stage1.models.front().tail);
    m.training_losses = train_ensemble_client(m, data, cfg, 0.0f, seed);
    return m;
}

Tensor ensembler_infer(const EnsembleModel& m, const Tensor& x) {
    Tensor u = forward(m.head, x);
    const Tensor z = m.noise.sigma != 0.0f ? add_broadcast_sample(u, m.noise.tensor) : u;
    std::vector<Tensor> outs;
    outs.reserve(m.bodies.size());
    // Every body runs; the server must not learn which are live.
    for (const auto& body : m.bodies) outs.push_back(forward(body, z));
    return forward(m.tail, selector_combine(outs, m.key));
}

EnsembleLossBreakdown ensemble_training_loss(const EnsembleModel& m, const Tensor& x_norm,
                                             const std::vector<int>& labels, float lambda_reg,
                                             bool regularize_all) {
    validate_key(m.key, m.bodies.size());
    const std::size_t p = m.key.active_count();
    const auto block_shape = m.bodies[m.key.activated.front()].output_shape();
    Tensor u = forward(m.head, x_norm);
    const Tensor z = m.noise.sigma != 0.0f ? add_broadcast_sample(u, m.noise.tensor) : u;

    EnsembleLossBreakdown out;
    for (std::size_t r = 0; r < p; ++r) {
        const Tensor f = forward(m.bodies[m.key.activated[r]], z);
        Tensor combined(concat_batch_shape(block_shape, x_norm.dim(0), p));
        embed_slot(f, r, p, m.key.weights[r], combined);
        Tensor grad;
        const double ce =
            softmax_xent_loss_grad(forward(m.tail, combined), labels, grad);
        out.per_path_ce.push_back(ce);
        out.total += ce;
    }
    double best = -2.0;
    std::vector<std::size_t> reg_targets;
    if (regularize_all) {
        for (std::size_t i = 0; i < m.stage1_heads.size(); ++i) reg_targets.push_back(i);
    } else {
        reg_targets = m.key.activated;
    }
    for (std::size_t i : reg_targets)
        best = std::max(best, batch_mean_cosine(u, forward(m.stage1_heads[i], x_norm)));
    out.regularizer = best;
    out.total += static_cast<double>(lambda_reg) * best;
    return out;
}

// ---------------------------------------------------------------------------
// Defense strategies

const char* defense_kind_name(DefenseKind k) {
    switch (k) {
        case DefenseKind::None: return "none";
        case DefenseKind::SingleNoise: return "single_noise";
        case DefenseKind::TrainedNoise: return "trained_noise";
        case DefenseKind::DropoutSingle: return "dropout_single";
        case DefenseKind::DropoutEnsemble: return "dropout_ensemble";
        case DefenseKind::Ensembler: return "ensembler";
    }
    return "?";
}

DefenseKind defense_kind_from_name(const std::string& name) {
    for (int k = 0; k <= static_cast<int>(DefenseKind::Ensembler); ++k)
        if (name == defense_kind_name(static_cast<DefenseKind>(k)))
            return static_cast<DefenseKind>(k);
    throw std::invalid_argument("unknown defense kind: " + name);
}

Tensor dropout_mask(const std::vector<std::size_t>& shape, float rate, SeedStream& rng) {
    if (rate < 0.0f || rate >= 1.0f)
        throw std::invalid_argument("dropout: rate must be in [0, 1)");
    Tensor mask(shape);
    const float keep_scale = 1.0f / (1.0f - rate);
    for (float& v : mask.data)
        v = rng.next_unit() >= static_cast<double>(rate) ? keep_scale : 0.0f;
    return mask;
}

namespace {

void save_graph_pair(const std::string& dir, const std::string& name, const ModelGraph& g,
                     std::vector<std::string>& paths) {
    const std::string blueprint = dir + "/" + name + ".json";
    const std::string ckpt = dir + "/" + name + ".ckpt";
    std::ofstream out(blueprint, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + blueprint);
    out << graph_blueprint_json(g);
    out.close();
    write_checkpoint_file(ckpt, save_checkpoint(g));
    paths.push_back(blueprint);
    paths.push_back(ckpt);
}

class PlainSplitDefense final : public DefenseStrategy {
public:
    PlainSplitDefense(DefenseKind kind, SplitPipeline model, NoiseSpec noise,
                      Tensor trained_noise, float dropout_rate, std::uint64_t seed,
                      std::size_t class_count)
        : kind_(kind),
          model_(std::move(model)),
          noise_(std::move(noise)),
          trained_noise_(std::move(trained_noise)),
          dropout_rate_(dropout_rate),
          dropout_rng_(derive_stream(seed, "defense/dropout")),
          class_count_(class_count) {}

    DefenseKind kind() const override { return kind_; }

    Tensor client_forward(const Tensor& x_norm) override {
        Tensor f = forward(model_.head, x_norm);
        if (noise_.sigma != 0.0f) f = add_broadcast_sample(f, noise_.tensor);
        if (trained_noise_.numel() > 0) f = add_broadcast_sample(f, trained_noise_);
        if (dropout_rate_ > 0.0f) {
            const Tensor mask = dropout_mask(f.shape, dropout_rate_, dropout_rng_);
            for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] *= mask.data[i];
        }
        return f;
    }

    std::vector<Tensor> server_forward(const Tensor& features) const override {
        std::vector<Tensor> outs;
        outs.push_back(forward(model_.body, features));
        return outs;
    }

    Tensor client_finish(const std::vector<Tensor>& body_outputs) const override {
        if (body_outputs.size() != 1)
            throw std::invalid_argument("defense: expected one server reply");
        return forward(model_.tail, body_outputs.front());
    }

    AttackSurface attack_surface() const override {
        AttackSurface s;
        s.bodies.push_back(model_.body);
        s.input_shape = model_.head.input_shape;
        s.feature_shape = model_.head.output_shape();
        s.class_count = class_count_;
        s.tail_structure = strip_weights(model_.tail);
        return s;
    }

    const ModelGraph& leak_true_head() const override { return model_.head; }

    void save_artifacts(const std::string& dir, std::vector<std::string>& paths) const override {
        std::filesystem::create_directories(dir);
        save_graph_pair(dir, "head", model_.head, paths);
        save_graph_pair(dir, "body", model_.body, paths);
        save_graph_pair(dir, "tail", model_.tail, paths);
        nlohmann::ordered_json meta;
        meta["kind"] = defense_kind_name(kind_);
        meta["noise_sigma"] = noise_.sigma;
        meta["noise_seed"] = noise_.seed;
        meta["has_trained_noise"] = trained_noise_.numel() > 0;
        meta["dropout_rate"] = dropout_rate_;
        const std::string mp = dir + "/defense.json";
        std::ofstream out(mp, std::ios::trunc);
        out << meta.dump(2) << "\n";
        paths.push_back(mp);
        if (trained_noise_.numel() > 0) {
            Checkpoint ck;
            CheckpointEntry e;
            e.name = "trained_noise";
            e.dims.assign(trained_noise_.shape.begin(), trained_noise_.shape.end());
            e.values = trained_noise_.data;
            ck.entries.push_back(std::move(e));
            const std::string np = dir + "/trained_noise.ckpt";
            write_checkpoint_file(np, ck);
            paths.push_back(np);
        }
    }

private:
    DefenseKind kind_;
    SplitPipeline model_;
    NoiseSpec noise_;
    Tensor trained_noise_;
    float dropout_rate_;
    SeedStream dropout_rng_;
    std::size_t class_count_;
};

class EnsembleDefense final : public DefenseStrategy {
public:
    EnsembleDefense(DefenseKind kind, EnsembleModel model, float dropout_rate,
                    std::uint64_t seed, std::size_t class_count)
        : kind_(kind),
          model_(std::move(model)),
          dropout_rate_(dropout_rate),
          dropout_rng_(derive_stream(seed, "defense/dropout")),
          class_count_(class_count) {}

    DefenseKind kind() const override { return kind_; }

    Tensor client_forward(const Tensor& x_norm) override {
        Tensor f = forward(model_.head, x_norm);
        if (model_.noise.sigma != 0.0f) f = add_broadcast_sample(f, model_.noise.tensor);
        if (dropout_rate_ > 0.0f) {
            const Tensor mask = dropout_mask(f.shape, dropout_rate_, dropout_rng_);
            for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] *= mask.data[i];
        }
        return f;
    }

    std::vector<Tensor> server_forward(const Tensor& features) const override {
        std::vector<Tensor> outs;
        outs.reserve(model_.bodies.size());
        for (const auto& body : model_.bodies) outs.push_back(forward(body, features));
        return outs;
    }

    Tensor client_finish(const std::vector<Tensor>& body_outputs) const override {
        return forward(model_.tail, selector_combine(body_outputs, model_.key));
    }

    AttackSurface attack_surface() const override {
        AttackSurface s;
        s.bodies = model_.bodies;
        s.input_shape = model_.head.input_shape;
        s.feature_shape = model_.head.output_shape();
        s.class_count = class_count_;
        s.tail_structure = model_.single_tail_structure;
        return s;
    }

    const ModelGraph& leak_true_head() const override { return model_.head; }

    void save_artifacts(const std::string& dir, std::vector<std::string>& paths) const override {
        std::filesystem::create_directories(dir);
        save_graph_pair(dir, "head", model_.head, paths);
        save_graph_pair(dir, "tail", model_.tail, paths);
        for (std::size_t i = 0; i < model_.bodies.size(); ++i)
            save_graph_pair(dir, "body_" + std::to_string(i), model_.bodies[i], paths);
        nlohmann::ordered_json meta;
        meta["kind"] = defense_kind_name(kind_);
        meta["ensemble_size"] = model_.bodies.size();
        meta["activated"] = model_.key.activated;
        meta["selector_weights"] = model_.key.weights;
        meta["noise_sigma"] = model_.noise.sigma;
        meta["noise_seed"] = model_.noise.seed;
        meta["dropout_rate"] = dropout_rate_;
        meta["head_depth"] = model_.plan.head_depth;
        meta["tail_depth"] = model_.plan.tail_depth;
        const std::string mp = dir + "/defense.json";
        std::ofstream out(mp, std::ios::trunc);
        out << meta.dump(2) << "\n";
        paths.push_back(mp);
    }

    const EnsembleModel& ensemble() const { return model_; }

private:
    DefenseKind kind_;
    EnsembleModel model_;
    float dropout_rate_;
    SeedStream dropout_rng_;
    std::size_t class_count_;
};

}  // namespace

SplitPipeline train_plain_split(const ArchSpec& arch, const SplitPlan& plan,
                                const LabeledDataset& data, const OptimizerConfig& opt,
                                std::size_t epochs, std::uint64_t seed) {
    const ModelGraph full = build_model(arch, derive_seed(seed, "plain/init"));
    ModelPartition part = split_model(full, plan);
    SplitPipeline pipe{std::move(part.head), std::move(part.body), std::move(part.tail)};
    SplitTrainOptions o;
    o.optim = opt;
    o.epochs = epochs;
    o.seed = derive_seed(seed, "plain/train");
    train_split_pipeline(pipe, data, o);
    return pipe;
}

Tensor train_noise_tensor(const SplitPipeline& model, const LabeledDataset& data, float penalty,
                          float sigma_init, const OptimizerConfig& opt, std::size_t epochs,
                          std::uint64_t seed) {
    Tensor noise =
        NoiseSpec::create(sigma_init, model.head.output_shape(), derive_seed(seed, "noise/init"))
            .tensor;
    // With no norm reward there is nothing to train; the stand-in degenerates
    // to the plain fixed-noise defense.
    if (penalty == 0.0f || epochs == 0) return noise;

    Tensor velocity(noise.shape);
    SeedStream shuffle = derive_stream(seed, "noise/shuffle");
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        for (const auto& batch : make_batches(data.size(), opt.batch_size, shuffle)) {
            const Tensor x = data.normalized_batch(batch);
            const auto labels = data.label_batch(batch);
            const Tensor u = forward(model.head, x);
            const Tensor z = add_broadcast_sample(u, noise);
            Tape tape_b, tape_t;
            Tensor f = forward_frozen(model.body, z, tape_b);
            Tensor logits = forward_frozen(model.tail, f, tape_t);
            Tensor grad;
            const double ce = softmax_xent_loss_grad(logits, labels, grad);
            if (!std::isfinite(ce))
                throw std::runtime_error("noise training: non-finite loss");
            Tensor g_f = backward(model.tail, tape_t, grad, nullptr);
            Tensor g_z = backward(model.body, tape_b, g_f, nullptr);
            // Gradient w.r.t. the broadcast noise tensor plus the norm reward.
            Tensor g_noise(noise.shape);
            const std::size_t per = noise.numel();
            for (std::size_t n = 0; n < g_z.dim(0); ++n) {
                const float* src = g_z.data.data() + n * per;
                for (std::size_t i = 0; i < per; ++i) g_noise.data[i] += src[i];
            }
            const double norm = l2_norm(noise);
            if (norm > kNormEps) {
                const float coeff = -penalty / static_cast<float>(norm);
                for (std::size_t i = 0; i < per; ++i)
                    g_noise.data[i] += coeff * noise.data[i];
            }
            for (std::size_t i = 0; i < noise.numel(); ++i) {
                velocity.data[i] = opt.momentum * velocity.data[i] + g_noise.data[i];
                noise.data[i] -= opt.lr * velocity.data[i];
            }
        }
    }
    if (!noise.all_finite()) throw std::runtime_error("noise training: non-finite noise tensor");
    return noise;
}

std::unique_ptr<DefenseStrategy> build_defense(const DefenseConfig& cfg, const ArchSpec& arch,
                                               const SplitPlan& plan, const LabeledDataset& train,
                                               std::uint64_t seed) {
    const std::size_t classes = train.class_count;
    switch (cfg.kind) {
        case DefenseKind::None: {
            SplitPipeline pipe = train_plain_split(arch, plan, train, cfg.optim,
                                                   cfg.baseline_epochs, derive_seed(seed, "none"));
            return std::make_unique<PlainSplitDefense>(cfg.kind, std::move(pipe), NoiseSpec{},
                                                       Tensor{}, 0.0f, seed, classes);
        }
        case DefenseKind::SingleNoise: {
            Stage1Config s1;
            s1.arch = arch;
            s1.plan = plan;
            s1.count = 1;
            s1.sigma = cfg.sigma;
            s1.optim = cfg.optim;
            s1.epochs = cfg.baseline_epochs;
            Stage1Result r = stage1_train(s1, train, derive_seed(seed, "single"));
            return std::make_unique<PlainSplitDefense>(cfg.kind, std::move(r.models[0]),
                                                       std::move(r.noises[0]), Tensor{}, 0.0f,
                                                       seed, classes);
        }
        case DefenseKind::TrainedNoise: {
            SplitPipeline pipe =
                train_plain_split(arch, plan, train, cfg.optim, cfg.baseline_epochs,
                                  derive_seed(seed, "trained_noise/model"));
            Tensor noise = train_noise_tensor(pipe, train, cfg.noise_penalty, cfg.sigma,
                                              cfg.optim, cfg.noise_epochs,
                                              derive_seed(seed, "trained_noise/noise"));
            return std::make_unique<PlainSplitDefense>(cfg.kind, std::move(pipe), NoiseSpec{},
                                                       std::move(noise), 0.0f, seed, classes);
        }
        case DefenseKind::DropoutSingle: {
            const ModelGraph full =
                build_model(arch, derive_seed(seed, "dropout_single/init"));
            ModelPartition part = split_model(full, plan);
            SplitPipeline pipe{std::move(part.head), std::move(part.body), std::move(part.tail)};
            SplitTrainOptions o;
            o.dropout_rate = cfg.dropout_rate;
            o.optim = cfg.optim;
            o.epochs = cfg.baseline_epochs;
            o.seed = derive_seed(seed, "dropout_single/train");
            train_split_pipeline(pipe, train, o);
            return std::make_unique<PlainSplitDefense>(cfg.kind, std::move(pipe), NoiseSpec{},
                                                       Tensor{}, cfg.dropout_rate, seed, classes);
        }
        case DefenseKind::DropoutEnsemble: {
            // N independently trained nets (no noise diversification), dropout
            // active at the split during both training and inference.
            Stage1Result r;
            r.plan = plan;
            r.models.resize(cfg.ensemble_size);
            r.noises.resize(cfg.ensemble_size);
            const std::uint64_t sub = derive_seed(seed, "dropout_ensemble");
            auto train_one = [&](std::size_t i) {
                const ModelGraph full = build_model(arch, stage1_model_seed(sub, i));
                ModelPartition part = split_model(full, plan);
                SplitPipeline pipe{std::move(part.head), std::move(part.body),
                                   std::move(part.tail)};
                SplitTrainOptions o;
                o.dropout_rate = cfg.dropout_rate;
                o.optim = cfg.optim;
                o.epochs = cfg.baseline_epochs;
                o.seed = stage1_train_seed(sub, i);
                train_split_pipeline(pipe, train, o);
                r.models[i] = std::move(pipe);
            };
            if (cfg.parallel && cfg.ensemble_size > 1) {
                std::vector<std::future<void>> futures;
                for (std::size_t i = 0; i < cfg.ensemble_size; ++i)
                    futures.push_back(std::async(std::launch::async, train_one, i));
                for (auto& f : futures) f.get();
            } else {
                for (std::size_t i = 0; i < cfg.ensemble_size; ++i) train_one(i);
            }
            const SelectorKey key = choose_selector(cfg.ensemble_size, cfg.active_count,
                                                    derive_seed(sub, "selector"));
            EnsembleModel m;
            m.plan = plan;
            m.key = key;
            for (const auto& pipe : r.models) {
                m.bodies.push_back(pipe.body);
                m.stage1_heads.push_back(pipe.head);
            }
            m.head = reinit_graph(r.models.front().head, derive_stream(sub, "combine/head"));
            m.noise = NoiseSpec{};  // dropout is the perturbation here
            m.tail = adapt_tail_for_concat(r.models.front().tail, key.active_count(),
                                           derive_stream(sub, "combine/tail"));
            m.single_tail_structure = strip_weights(r.models.front().tail);
            Stage3Config s3;
            s3.lambda_reg = 0.0f;
            s3.sigma = 0.0f;
            s3.optim = cfg.optim;
            s3.epochs = cfg.stage3_epochs;
            m.training_losses =
                train_ensemble_client(m, train, s3, cfg.dropout_rate, derive_seed(sub, "combine"));
            return std::make_unique<EnsembleDefense>(cfg.kind, std::move(m), cfg.dropout_rate,
                                                     seed, classes);
        }
        case DefenseKind::Ensembler: {
            Stage1Config s1;
            s1.arch = arch;
            s1.plan = plan;
            s1.count = cfg.ensemble_size;
            s1.sigma = cfg.sigma;
            s1.optim = cfg.optim;
            s1.epochs = cfg.stage1_epochs;
            s1.parallel = cfg.parallel;
            const std::uint64_t sub = derive_seed(seed, "ensembler");
            Stage1Result r = stage1_train(s1, train, sub);
            const SelectorKey key = choose_selector(cfg.ensemble_size, cfg.active_count,
                                                    derive_seed(sub, "selector"));
            Stage3Config s3;
            s3.lambda_reg = cfg.lambda_reg;
            s3.sigma = cfg.sigma;
            s3.optim = cfg.optim;
            s3.epochs = cfg.stage3_epochs;
            s3.regularize_all = cfg.regularize_all;
            EnsembleModel m = stage3_train(r, key, train, s3, sub);
            return std::make_unique<EnsembleDefense>(cfg.kind, std::move(m), 0.0f, seed,
                                                     classes);
        }
    }
    throw std::invalid_argument("unknown defense kind");
}

}  // namespace splitshield
