#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "splitshield/dataset.hpp"
#include "splitshield/graph.hpp"
#include "splitshield/train.hpp"

namespace splitshield {

// Fixed additive perturbation for the transmitted features. Sampled once at
// creation, broadcast over the batch, and applied identically at training and
// inference time.
struct NoiseSpec {
    float sigma = 0.0f;
    std::uint64_t seed = 0;
    Tensor tensor;  // per-sample head-output shape

    static NoiseSpec create(float sigma, const std::vector<std::size_t>& feature_shape,
                            std::uint64_t seed);
};

// The client's secret: which server nets are live and how their feature maps
// are weighted before concatenation.
struct SelectorKey {
    std::vector<std::size_t> activated;  // strictly increasing net indices, size P
    std::vector<float> weights;          // one S_i per activated index, default 1/P

    std::size_t active_count() const { return activated.size(); }
    bool operator==(const SelectorKey&) const = default;
};

// Uniform random P-subset of [0, n) from the seeded stream; weights all 1/P.
SelectorKey choose_selector(std::size_t n, std::size_t p, std::uint64_t seed);

// Concatenates the activated feature maps along the channel axis in ascending
// index order, scaling slice r by its weight. Output channels = P x per-net
// channels.
Tensor selector_combine(const std::vector<Tensor>& outputs, const SelectorKey& key);

// dot(a,b) / (|a||b|); defined as 0 when either vector is (near) zero.
double cosine_similarity(const Tensor& a, const Tensor& b);
// Per-sample cosine on flattened rows of two batches, averaged over the batch.
double batch_mean_cosine(const Tensor& a, const Tensor& b);

// One trained model deployed across the split boundary.
struct SplitPipeline {
    ModelGraph head;
    ModelGraph body;
    ModelGraph tail;
};

Tensor split_pipeline_forward(const SplitPipeline& p, const Tensor& x);

// ---------------------------------------------------------------------------
// Ensemble defense (three training stages)

struct Stage1Config {
    ArchSpec arch;
    SplitPlan plan;
    std::size_t count = 4;  // N
    float sigma = 0.1f;
    OptimizerConfig optim;
    std::size_t epochs = 15;
    bool parallel = true;  // the N trainings are independent
};

struct Stage1Result {
    std::vector<SplitPipeline> models;  // N full pipelines, each trained with its own noise
    std::vector<NoiseSpec> noises;
    SplitPlan plan;
    std::vector<double> final_losses;
};

// Seed derivations used by stage 1, exposed so tests can reproduce a single
// training run exactly.
std::uint64_t stage1_model_seed(std::uint64_t master, std::size_t index);
std::uint64_t stage1_train_seed(std::uint64_t master, std::size_t index);
std::uint64_t stage1_noise_seed(std::uint64_t master, std::size_t index);

// Trains N nets independently, each with its own fixed feature noise inserted
// after the head, under plain cross-entropy.
Stage1Result stage1_train(const Stage1Config& cfg, const LabeledDataset& data,
                          std::uint64_t seed);

struct EnsembleModel {
    ModelGraph head;                 // retrained shared client head
    std::vector<ModelGraph> bodies;  // all N frozen server nets
    ModelGraph tail;                 // consumes the concatenated selected features
    NoiseSpec noise;                 // fresh fixed noise, same sigma family
    SelectorKey key;
    std::vector<ModelGraph> stage1_heads;  // frozen stage-1 heads (regularizer targets)
    SplitPlan plan;
    ModelGraph single_tail_structure;  // weight-stripped single-net tail (public architecture)
    std::vector<double> training_losses;
};

struct Stage3Config {
    float lambda_reg = 1.0f;
    float sigma = 0.1f;
    OptimizerConfig optim;
    std::size_t epochs = 15;
    bool regularize_all = false;  // max over all N heads instead of the active subset
};

// Re-trains the client head and tail against the frozen selected bodies.
// Loss = sum over active paths of cross-entropy (each path routes the scaled
// features of one body through its slot of the concatenated tail input)
// plus lambda * max over regularizer targets of the batch-mean cosine
// similarity between the new head's output and the stage-1 head's output.
EnsembleModel stage3_train(const Stage1Result& stage1, const SelectorKey& key,
                           const LabeledDataset& data, const Stage3Config& cfg,
                           std::uint64_t seed);

// The fresh head exactly as stage 3 initializes it for `seed` (same stream),
// before any retraining; lets callers measure training-induced change.
ModelGraph stage3_initial_head(const Stage1Result& stage1, std::uint64_t seed);

// Full inference path: all N bodies are evaluated so the server cannot learn
// the key from which nets run; the selector then combines the activated ones.
Tensor ensembler_infer(const EnsembleModel& model, const Tensor& x);

// Composite-loss diagnostic on one batch at the model's current weights.
struct EnsembleLossBreakdown {
    double total = 0.0;
    std::vector<double> per_path_ce;  // one per active path
    double regularizer = 0.0;         // max batch-mean cosine (before lambda)
};
EnsembleLossBreakdown ensemble_training_loss(const EnsembleModel& model, const Tensor& x_norm,
                                             const std::vector<int>& labels, float lambda_reg,
                                             bool regularize_all = false);

// ---------------------------------------------------------------------------
// Defense strategies (shared client/server interface)

enum class DefenseKind {
    None,
    SingleNoise,
    TrainedNoise,
    DropoutSingle,
    DropoutEnsemble,
    Ensembler,
};

const char* defense_kind_name(DefenseKind k);
DefenseKind defense_kind_from_name(const std::string& name);

// What a compromised server legitimately holds: the server nets plus shape
// and label-space knowledge. Deliberately excludes the client head weights,
// the noise tensor, and the selector key.
struct AttackSurface {
    std::vector<ModelGraph> bodies;
    std::vector<std::size_t> input_shape;    // per-sample image shape
    std::vector<std::size_t> feature_shape;  // per-sample transmitted feature shape
    std::size_t class_count = 0;
    // Architecture knowledge: the standard single-net tail structure with all
    // weights stripped. Never the trained client tail, and never the
    // ensemble's widened tail (its width would reveal the active count).
    ModelGraph tail_structure;
};

class DefenseStrategy {
public:
    virtual ~DefenseStrategy() = default;
    virtual DefenseKind kind() const = 0;

    // Normalized images -> transmitted features (head output + perturbation).
    // Non-const: perturbations with per-call randomness advance their stream.
    virtual Tensor client_forward(const Tensor& x_norm) = 0;
    // Transmitted features -> one feature tensor per server net.
    virtual std::vector<Tensor> server_forward(const Tensor& features) const = 0;
    // Server replies -> logits.
    virtual Tensor client_finish(const std::vector<Tensor>& body_outputs) const = 0;

    Tensor infer(const Tensor& x_norm) {
        return client_finish(server_forward(client_forward(x_norm)));
    }

    virtual AttackSurface attack_surface() const = 0;

    // Test-only leak used by the secrecy oracle; never part of the attack
    // surface.
    virtual const ModelGraph& leak_true_head() const = 0;

    // Writes blueprint + checkpoint pairs and a metadata JSON under `dir`;
    // appends every emitted path.
    virtual void save_artifacts(const std::string& dir,
                                std::vector<std::string>& paths) const = 0;
};

struct DefenseConfig {
    DefenseKind kind = DefenseKind::Ensembler;
    std::size_t ensemble_size = 4;  // N
    std::size_t active_count = 2;   // P
    float sigma = 0.1f;
    float lambda_reg = 1.0f;
    float dropout_rate = 0.3f;
    float noise_penalty = 0.05f;  // trained-noise objective: CE - penalty * |noise|
    std::size_t stage1_epochs = 15;
    std::size_t stage3_epochs = 15;
    std::size_t baseline_epochs = 15;
    std::size_t noise_epochs = 10;
    OptimizerConfig optim;
    bool regularize_all = false;
    bool parallel = true;

    bool operator==(const DefenseConfig&) const = default;
};

// Trains and assembles a defense of the requested kind.
std::unique_ptr<DefenseStrategy> build_defense(const DefenseConfig& cfg, const ArchSpec& arch,
                                               const SplitPlan& plan, const LabeledDataset& train,
                                               std::uint64_t seed);

// Plain (undefended) training across a split; shared by several baselines.
SplitPipeline train_plain_split(const ArchSpec& arch, const SplitPlan& plan,
                                const LabeledDataset& data, const OptimizerConfig& opt,
                                std::size_t epochs, std::uint64_t seed);

// Additive noise tensor optimized to grow in L2 norm while a cross-entropy
// budget holds (penalty form: CE - penalty * |noise|), model weights frozen.
Tensor train_noise_tensor(const SplitPipeline& model, const LabeledDataset& data,
                          float penalty, float sigma_init, const OptimizerConfig& opt,
                          std::size_t epochs, std::uint64_t seed);

// Inverted-dropout mask (values 0 or 1/(1-rate)) for a feature batch shape.
Tensor dropout_mask(const std::vector<std::size_t>& shape, float rate, SeedStream& rng);

}  // namespace splitshield
