#pragma once

#include <functional>

#include "splitshield/dataset.hpp"
#include "splitshield/tensor.hpp"

namespace splitshield {

// Reconstruction-quality metrics over image batches in [0,1], NCHW.

// Peak signal-to-noise ratio in dB, 10*log10(1 / mean-MSE) with the MSE
// pooled over the whole batch. Identical inputs return the 99.0 dB cap.
constexpr double kPsnrCap = 99.0;
double psnr(const Tensor& a, const Tensor& b);

// Mean structural similarity, 7x7 Gaussian window (sigma 1.5),
// C1=(0.01*L)^2, C2=(0.03*L)^2 with L=1; computed per channel over valid
// window positions, averaged per image, then over the batch.
double ssim(const Tensor& a, const Tensor& b);

// Maps a normalized image batch to logits. Lets the same accuracy routine
// score plain graphs and full client/server defense pipelines.
using LogitsFn = std::function<Tensor(const Tensor&)>;

double accuracy(const LogitsFn& pipeline, const LabeledDataset& data);
double delta_acc(const LogitsFn& defended, const LogitsFn& baseline, const LabeledDataset& data);

struct MetricReport {
    double ssim = 0.0;
    double psnr = 0.0;
    double acc_defended = 0.0;
    double acc_baseline = 0.0;
    double delta_acc = 0.0;  // always acc_defended - acc_baseline
};

}  // namespace splitshield
