#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "splitshield/dataset.hpp"
#include "splitshield/graph.hpp"

namespace splitshield {

enum class LossKind { CrossEntropy, MeanSquaredError };

struct OptimizerConfig {
    float lr = 0.01f;
    float momentum = 0.9f;
    std::size_t batch_size = 64;

    bool operator==(const OptimizerConfig&) const = default;
};

// Classic SGD-with-momentum state, one velocity buffer per weight.
struct SgdState {
    std::map<std::string, Tensor> velocity;
};

// Applies one step: v = momentum*v + g, w -= lr*v. Names absent from `grads`
// are left untouched (frozen or unused parameters). BatchNorm running stats
// never receive gradients and are skipped by construction.
void sgd_step(ModelGraph& g, const GradMap& grads, SgdState& state, const OptimizerConfig& opt);

// Mean cross-entropy over the batch from raw logits; writes d(loss)/d(logits).
double softmax_xent_loss_grad(const Tensor& logits, const std::vector<int>& labels,
                              Tensor& grad_out);
// Mean-squared-error over all elements; writes d(loss)/d(pred).
double mse_loss_grad(const Tensor& pred, const Tensor& target, Tensor& grad_out);

// Seeded epoch shuffle chopped into batches (last batch may be short).
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   SeedStream& rng);

struct TrainResult {
    ModelGraph model;
    std::vector<double> epoch_losses;  // mean per-sample loss per epoch
};

// Plain supervised training. Deterministic: identical (model, data, config,
// seed) give bit-identical final weights. Throws on non-finite loss.
TrainResult train_epochs(const ModelGraph& model, const LabeledDataset& data, LossKind loss,
                         const OptimizerConfig& opt, std::size_t epochs, std::uint64_t seed);

// Top-1 accuracy of a plain classifier graph.
double model_accuracy(const ModelGraph& model, const LabeledDataset& data);

}  // namespace splitshield
