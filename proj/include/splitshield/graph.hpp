#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "splitshield/rng.hpp"
#include "splitshield/tensor.hpp"

namespace splitshield {

enum class LayerKind {
    Conv2d,
    ConvTranspose2d,
    BatchNorm2d,
    ReLU,
    Clamp01,
    MaxPool2d,
    AvgPoolGlobal,
    Flatten,
    Dense,
    Softmax,
    Residual,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

// One node of a computation graph. Residual nodes carry a main path and an
// optional projection shortcut as child specs; all other kinds are leaves.
struct LayerSpec {
    LayerKind kind{};
    std::size_t in_ch = 0, out_ch = 0, ksize = 0, stride = 1, pad = 0, out_pad = 0;
    std::size_t in_features = 0, out_features = 0;
    std::vector<LayerSpec> body;      // Residual main path
    std::vector<LayerSpec> shortcut;  // Residual projection (empty = identity)

    bool operator==(const LayerSpec&) const = default;
};

LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride = 1,
                 std::size_t pad = 0);
LayerSpec conv_transpose2d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                           std::size_t stride = 1, std::size_t pad = 0, std::size_t out_pad = 0);
LayerSpec batch_norm2d(std::size_t channels);
LayerSpec relu();
LayerSpec clamp01();
LayerSpec max_pool2d(std::size_t k, std::size_t stride, std::size_t pad = 0);
LayerSpec avg_pool_global();
LayerSpec flatten();
LayerSpec dense(std::size_t in_features, std::size_t out_features);
LayerSpec softmax();
LayerSpec residual(std::vector<LayerSpec> body, std::vector<LayerSpec> shortcut = {});

// Ordered layer graph with named trainable weights. `unit_offsets[u]` is the
// index of the first layer of split-unit u; units tile the layer list.
struct ModelGraph {
    std::vector<std::size_t> input_shape;  // per-sample, e.g. {3,32,32}
    std::size_t class_count = 0;           // 0 when the graph is not a classifier
    std::vector<LayerSpec> layers;
    std::vector<std::size_t> unit_offsets;
    std::map<std::string, Tensor> weights;

    std::size_t unit_count() const { return unit_offsets.size(); }
    bool empty() const { return layers.empty(); }

    // Per-sample output shape by propagation (validates compatibility).
    std::vector<std::size_t> output_shape() const;

    const Tensor& weight(const std::string& name) const;
    Tensor& weight(const std::string& name);
};

// Builds the graph's weight set in traversal order from the given stream.
void init_weights(ModelGraph& g, SeedStream& rng);

// Weight names in graph-traversal order (stable manifest order).
std::vector<std::string> weight_names(const ModelGraph& g);

// Same traversal under an arbitrary name prefix; used when re-rooting
// sub-graphs and when checking checkpoint manifests.
void collect_names_for(const std::vector<LayerSpec>& layers, const std::string& prefix,
                       std::vector<std::string>& out);

// FNV-1a digest over all weight bytes in traversal order.
std::uint64_t weights_digest(const ModelGraph& g);

bool graphs_bit_equal(const ModelGraph& a, const ModelGraph& b);

// Structure copy with every weight zeroed (BatchNorm gamma/rvar reset to 1).
// Used when a graph's shape may be shared but its values are private.
ModelGraph strip_weights(const ModelGraph& g);

// ---------------------------------------------------------------------------
// Execution

struct LayerCache {
    Tensor input;
    Tensor extra;   // kind-specific (BN x_hat, softmax output, residual pre-activation)
    std::vector<std::uint32_t> indices;  // max-pool argmax
    std::vector<float> stats;            // BN batch mean + inv_std per channel
    bool bn_eval = false;                // BN ran on running stats (frozen forward)
    std::vector<LayerCache> children;
    std::vector<LayerCache> children2;
};

struct Tape {
    std::vector<LayerCache> layers;
    Tensor output;
};

using GradMap = std::map<std::string, Tensor>;

// Inference-mode forward (BatchNorm uses running statistics, no mutation).
Tensor forward(const ModelGraph& g, const Tensor& x);

// Training-mode forward, records a tape. BatchNorm consumes batch statistics
// and updates its running estimates in-place.
Tensor forward_train(ModelGraph& g, const Tensor& x, Tape& tape);

// Tape-recording forward for frozen graphs: inference semantics (BatchNorm on
// running stats, nothing mutated) but backward can still flow through it.
Tensor forward_frozen(const ModelGraph& g, const Tensor& x, Tape& tape);

// Walks the tape backwards. Returns the gradient w.r.t. the graph input and,
// when `grads` is non-null, accumulates parameter gradients into it.
Tensor backward(const ModelGraph& g, const Tape& tape, const Tensor& grad_out, GradMap* grads);

// ---------------------------------------------------------------------------
// Architectures and splitting

struct ArchSpec {
    std::string name;                      // tiny | tiny4 | resnet18 | vgg16
    std::vector<std::size_t> input_shape;  // {C,H,W}
    std::size_t class_count = 0;

    bool operator==(const ArchSpec&) const = default;
};

ModelGraph build_model(const ArchSpec& spec, std::uint64_t seed);
std::vector<std::string> registered_architectures();

struct SplitPlan {
    std::size_t head_depth = 1;  // leading split-units on the client
    std::size_t tail_depth = 0;  // trailing split-units, counted backwards

    bool operator==(const SplitPlan&) const = default;
};

struct ModelPartition {
    ModelGraph head;
    ModelGraph body;
    ModelGraph tail;
};

// Partitions by split-units; composing head->body->tail reproduces the
// unsplit forward exactly. Throws when h + t exhausts the graph.
ModelPartition split_model(const ModelGraph& g, const SplitPlan& plan);

// Structure-only serialization (weights travel separately as checkpoints).
std::string graph_blueprint_json(const ModelGraph& g);
ModelGraph graph_from_blueprint_json(const std::string& text);

}  // namespace splitshield
