#include "splitshield/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace splitshield {

double psnr(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    const double mse = mean_squared_error(a, b);
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

struct GaussianWindow {
    static constexpr int kSize = 7;
    double w[kSize * kSize];

    GaussianWindow() {
        const double sigma = 1.5;
        double sum = 0.0;
        for (int y = 0; y < kSize; ++y) {
            for (int x = 0; x < kSize; ++x) {
                const double dy = y - kSize / 2, dx = x - kSize / 2;
                w[y * kSize + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                sum += w[y * kSize + x];
            }
        }
        for (double& v : w) v /= sum;
    }
};

constexpr double kC1 = 0.01 * 0.01;  // (0.01 * L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("ssim: shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    if (a.ndim() != 4) throw std::invalid_argument("ssim: expected NCHW batch");
    const std::size_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    constexpr int ks = GaussianWindow::kSize;
    if (h < static_cast<std::size_t>(ks) || w < static_cast<std::size_t>(ks))
        throw std::invalid_argument("ssim: image smaller than the " + std::to_string(ks) + "x" +
                                    std::to_string(ks) + " window");
    static const GaussianWindow win;

    double batch_sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double image_sum = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const float* pa = a.data.data() + (s * c + ch) * h * w;
            const float* pb = b.data.data() + (s * c + ch) * h * w;
            double chan_sum = 0.0;
            std::size_t windows = 0;
            for (std::size_t oy = 0; oy + ks <= h; ++oy) {
                for (std::size_t ox = 0; ox + ks <= w; ++ox) {
                    double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
                    for (int ky = 0; ky < ks; ++ky) {
                        const float* ra = pa + (oy + ky) * w + ox;
                        const float* rb = pb + (oy + ky) * w + ox;
                        const double* rw = win.w + ky * ks;
                        for (int kx = 0; kx < ks; ++kx) {
                            const double va = ra[kx], vb = rb[kx];
                            ma += rw[kx] * va;
                            mb += rw[kx] * vb;
                            saa += rw[kx] * va * va;
                            sbb += rw[kx] * vb * vb;
                            sab += rw[kx] * va * vb;
                        }
                    }
                    const double var_a = saa - ma * ma;
                    const double var_b = sbb - mb * mb;
                    const double cov = sab - ma * mb;
                    const double val = ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
                                       ((ma * ma + mb * mb + kC1) * (var_a + var_b + kC2));
                    chan_sum += val;
                    ++windows;
                }
            }
            image_sum += chan_sum / static_cast<double>(windows);
        }
        double per_image = image_sum / static_cast<double>(c);
        per_image = std::min(1.0, std::max(-1.0, per_image));
        batch_sum += per_image;
    }
    return batch_sum / static_cast<double>(n);
}

double accuracy(const LogitsFn& pipeline, const LabeledDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
    const Tensor logits = pipeline(data.normalized_images());
    if (logits.ndim() != 2 || logits.dim(0) != data.size())
        throw std::invalid_argument("accuracy: pipeline returned " + shape_str(logits.shape));
    std::size_t hits = 0;
    const std::size_t k = logits.dim(1);
    for (std::size_t s = 0; s < data.size(); ++s) {
        const float* row = logits.data.data() + s * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (row[j] > row[best]) best = j;
        if (static_cast<int>(best) == data.labels[s]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

double delta_acc(const LogitsFn& defended, const LogitsFn& baseline, const LabeledDataset& data) {
    return accuracy(defended, data) - accuracy(baseline, data);
}

}  // namespace splitshield
