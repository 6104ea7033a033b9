#include "splitshield/train.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace splitshield {

void sgd_step(ModelGraph& g, const GradMap& grads, SgdState& state, const OptimizerConfig& opt) {
    for (const auto& [name, grad] : grads) {
        Tensor& w = g.weight(name);
        if (!w.same_shape(grad))
            throw std::invalid_argument("sgd_step: gradient shape mismatch for " + name);
        auto it = state.velocity.find(name);
        if (it == state.velocity.end()) it = state.velocity.emplace(name, Tensor(w.shape)).first;
        Tensor& v = it->second;
        for (std::size_t i = 0; i < w.data.size(); ++i) {
            v.data[i] = opt.momentum * v.data[i] + grad.data[i];
            w.data[i] -= opt.lr * v.data[i];
        }
    }
}

double softmax_xent_loss_grad(const Tensor& logits, const std::vector<int>& labels,
                              Tensor& grad_out) {
    if (logits.ndim() != 2 || logits.dim(0) != labels.size())
        throw std::invalid_argument("cross-entropy: logits shape " + shape_str(logits.shape) +
                                    " does not match " + std::to_string(labels.size()) + " labels");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    grad_out = Tensor(logits.shape);
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const float* row = logits.data.data() + s * k;
        const int y = labels[s];
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw std::invalid_argument("cross-entropy: label out of range");
        float mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        const double log_z = std::log(sum) + mx;
        total += log_z - row[y];
        float* grow = grad_out.data.data() + s * k;
        const float inv_n = 1.0f / static_cast<float>(n);
        for (std::size_t j = 0; j < k; ++j) {
            const double p = std::exp(static_cast<double>(row[j]) - log_z);
            grow[j] = static_cast<float>(p) * inv_n;
        }
        grow[y] -= inv_n;
    }
    return total / static_cast<double>(n);
}

double mse_loss_grad(const Tensor& pred, const Tensor& target, Tensor& grad_out) {
    if (!pred.same_shape(target))
        throw std::invalid_argument("mse: shape mismatch " + shape_str(pred.shape) + " vs " +
                                    shape_str(target.shape));
    grad_out = Tensor(pred.shape);
    double total = 0.0;
    const double inv = 2.0 / static_cast<double>(pred.numel());
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = static_cast<double>(pred.data[i]) - target.data[i];
        total += d * d;
        grad_out.data[i] = static_cast<float>(d * inv);
    }
    return total / static_cast<double>(pred.numel());
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   SeedStream& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.next_below(i)]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t e = std::min(n, b + batch_size);
        batches.emplace_back(order.begin() + b, order.begin() + e);
    }
    return batches;
}

TrainResult train_epochs(const ModelGraph& model, const LabeledDataset& data, LossKind loss,
                         const OptimizerConfig& opt, std::size_t epochs, std::uint64_t seed) {
    if (data.size() == 0) throw std::invalid_argument("train_epochs: empty dataset");
    TrainResult result;
    result.model = model;
    SgdState sgd;
    SeedStream shuffle = derive_stream(seed, "train/shuffle");
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : make_batches(data.size(), opt.batch_size, shuffle)) {
            const Tensor x = data.normalized_batch(batch);
            Tape tape;
            const Tensor out = forward_train(result.model, x, tape);
            Tensor grad;
            double batch_loss;
            if (loss == LossKind::CrossEntropy) {
                batch_loss = softmax_xent_loss_grad(out, data.label_batch(batch), grad);
            } else {
                batch_loss = mse_loss_grad(out, data.raw_batch(batch), grad);
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_epochs: non-finite loss at epoch " +
                                         std::to_string(epoch));
            GradMap grads;
            backward(result.model, tape, grad, &grads);
            sgd_step(result.model, grads, sgd, opt);
            epoch_loss += batch_loss * static_cast<double>(batch.size());
            seen += batch.size();
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    }
    for (const auto& [name, w] : result.model.weights) {
        if (!w.all_finite())
            throw std::runtime_error("train_epochs: non-finite weight " + name + " after training");
    }
    return result;
}

double model_accuracy(const ModelGraph& model, const LabeledDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    const Tensor logits = forward(model, data.normalized_images());
    std::size_t hits = 0;
    const std::size_t k = logits.dim(1);
    for (std::size_t s = 0; s < logits.dim(0); ++s) {
        const float* row = logits.data.data() + s * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (row[j] > row[best]) best = j;
        if (static_cast<int>(best) == data.labels[s]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace splitshield
