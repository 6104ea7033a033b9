#include "splitshield/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "splitshield/rng.hpp"

namespace splitshield {

std::vector<std::size_t> LabeledDataset::image_shape() const {
    return {images.dim(1), images.dim(2), images.dim(3)};
}

Tensor LabeledDataset::normalized_images() const {
    Tensor out = images;
    const std::size_t c = images.dim(1), plane = images.dim(2) * images.dim(3);
    for (std::size_t s = 0; s < images.dim(0); ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const float mean = norm_mean[ch % norm_mean.size()];
            const float inv = 1.0f / norm_std[ch % norm_std.size()];
            float* dst = out.data.data() + (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] = (dst[i] - mean) * inv;
        }
    }
    return out;
}

Tensor LabeledDataset::raw_batch(const std::vector<std::size_t>& idx) const {
    const std::size_t per = images.numel() / images.dim(0);
    Tensor out({idx.size(), images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= images.dim(0)) throw std::out_of_range("raw_batch: index out of range");
        std::copy_n(images.data.data() + idx[i] * per, per, out.data.data() + i * per);
    }
    return out;
}

Tensor LabeledDataset::normalized_batch(const std::vector<std::size_t>& idx) const {
    Tensor out = raw_batch(idx);
    const std::size_t c = out.dim(1), plane = out.dim(2) * out.dim(3);
    for (std::size_t s = 0; s < out.dim(0); ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const float mean = norm_mean[ch % norm_mean.size()];
            const float inv = 1.0f / norm_std[ch % norm_std.size()];
            float* dst = out.data.data() + (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] = (dst[i] - mean) * inv;
        }
    }
    return out;
}

std::vector<int> LabeledDataset::label_batch(const std::vector<std::size_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels.at(idx[i]);
    return out;
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& idx) const {
    LabeledDataset out;
    out.images = raw_batch(idx);
    out.labels = label_batch(idx);
    out.class_count = class_count;
    out.norm_mean = norm_mean;
    out.norm_std = norm_std;
    return out;
}

LabeledDataset LabeledDataset::take(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return subset(idx);
}

namespace {

float clamp01f(float v) { return std::min(1.0f, std::max(0.0f, v)); }

// Paints one sample into `img` (C x S x S). Shape classes: 0 disk, 1 square
// frame, 2 cross, 3 diagonal stripes.
void paint_shape(float* img, std::size_t channels, std::size_t s, int cls, SeedStream& rng) {
    const float background = rng.next_uniform(0.0f, 0.15f);
    const float fg = rng.next_uniform(0.7f, 1.0f);
    const float half = static_cast<float>(s) / 2.0f;
    const float cx = half + rng.next_uniform(-1.0f, 1.0f);
    const float cy = half + rng.next_uniform(-1.0f, 1.0f);
    const float radius = half * rng.next_uniform(0.45f, 0.7f);
    const float thick = std::max(1.0f, static_cast<float>(s) / 8.0f);

    std::vector<float> plane(s * s, background);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const float dx = static_cast<float>(x) + 0.5f - cx;
            const float dy = static_cast<float>(y) + 0.5f - cy;
            bool on = false;
            switch (cls) {
                case 0:
                    on = dx * dx + dy * dy <= radius * radius;
                    break;
                case 1: {
                    const float m = std::max(std::abs(dx), std::abs(dy));
                    on = m <= radius && m >= radius - thick;
                    break;
                }
                case 2:
                    on = std::abs(dx) <= thick * 0.6f || std::abs(dy) <= thick * 0.6f;
                    break;
                case 3:
                    on = std::fmod(std::abs(dx + dy) , 4.0f) < 1.6f;
                    break;
                default:
                    break;
            }
            if (on) plane[y * s + x] = fg;
        }
    }
    for (std::size_t ch = 0; ch < channels; ++ch) {
        const float tint = channels == 1 ? 1.0f : rng.next_uniform(0.8f, 1.0f);
        for (std::size_t i = 0; i < s * s; ++i) {
            const float noisy = plane[i] * tint + rng.next_normal(0.0f, 0.02f);
            img[ch * s * s + i] = clamp01f(noisy);
        }
    }
}

void paint_blob(float* img, std::size_t channels, std::size_t s, int cls, SeedStream& rng) {
    // Class 0 lights up the left half, class 1 the right half; linearly
    // separable from raw pixels.
    const float cx = (cls == 0 ? 0.25f : 0.75f) * static_cast<float>(s) +
                     rng.next_uniform(-0.5f, 0.5f);
    const float cy = 0.5f * static_cast<float>(s) + rng.next_uniform(-1.0f, 1.0f);
    const float sigma = static_cast<float>(s) * rng.next_uniform(0.12f, 0.18f);
    const float fg = rng.next_uniform(0.8f, 1.0f);
    for (std::size_t ch = 0; ch < channels; ++ch) {
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const float dx = static_cast<float>(x) + 0.5f - cx;
                const float dy = static_cast<float>(y) + 0.5f - cy;
                const float v = fg * std::exp(-(dx * dx + dy * dy) / (2.0f * sigma * sigma)) +
                                rng.next_normal(0.0f, 0.01f);
                img[(ch * s + y) * s + x] = clamp01f(v);
            }
        }
    }
}

LabeledDataset make_synthetic(std::size_t n, std::size_t channels, std::size_t image_size,
                              std::uint64_t seed, std::size_t classes, bool blobs) {
    LabeledDataset d;
    d.class_count = classes;
    d.norm_mean = {0.5f};
    d.norm_std = {0.5f};
    d.images = Tensor({n, channels, image_size, image_size});
    d.labels.resize(n);
    SeedStream rng = derive_stream(seed, blobs ? "data/blobs" : "data/shapes");
    const std::size_t per = channels * image_size * image_size;
    for (std::size_t i = 0; i < n; ++i) {
        // Balanced round-robin labels, then a seeded shuffle below.
        d.labels[i] = static_cast<int>(i % classes);
    }
    // Shuffle label order so batches are class-mixed.
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(d.labels[i - 1], d.labels[j]);
    }
    for (std::size_t i = 0; i < n; ++i) {
        float* img = d.images.data.data() + i * per;
        if (blobs)
            paint_blob(img, channels, image_size, d.labels[i], rng);
        else
            paint_shape(img, channels, image_size, d.labels[i], rng);
    }
    return d;
}

}  // namespace

LabeledDataset make_synthetic_shapes(std::size_t n, std::size_t channels, std::size_t image_size,
                                     std::uint64_t seed) {
    return make_synthetic(n, channels, image_size, seed, 4, false);
}

LabeledDataset make_synthetic_blobs(std::size_t n, std::size_t channels, std::size_t image_size,
                                    std::uint64_t seed) {
    return make_synthetic(n, channels, image_size, seed, 2, true);
}

LabeledDataset load_cifar10_subset(const std::string& root, std::size_t n, std::uint64_t seed) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    for (const char* name : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                             "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"}) {
        const fs::path p = fs::path(root) / name;
        if (fs::exists(p)) files.push_back(p.string());
    }
    if (files.empty())
        throw std::runtime_error("cifar10-subset: no batch files under '" + root + "'");

    constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
    std::vector<unsigned char> records;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());
        if (buf.size() % kRecord != 0)
            throw std::runtime_error("cifar10-subset: corrupt batch file " + f);
        records.insert(records.end(), buf.begin(), buf.end());
    }
    const std::size_t total = records.size() / kRecord;
    if (total < n)
        throw std::runtime_error("cifar10-subset: requested " + std::to_string(n) + " of " +
                                 std::to_string(total) + " records");

    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    SeedStream rng = derive_stream(seed, "data/cifar10");
    for (std::size_t i = total; i > 1; --i)
        std::swap(order[i - 1], order[rng.next_below(i)]);

    LabeledDataset d;
    d.class_count = 10;
    d.norm_mean = {0.4914f, 0.4822f, 0.4465f};
    d.norm_std = {0.2470f, 0.2435f, 0.2616f};
    d.images = Tensor({n, 3, 32, 32});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = records.data() + order[i] * kRecord;
        if (rec[0] > 9) throw std::runtime_error("cifar10-subset: corrupt record label");
        d.labels[i] = rec[0];
        float* dst = d.images.data.data() + i * 3 * 32 * 32;
        for (std::size_t j = 0; j < 3 * 32 * 32; ++j)
            dst[j] = static_cast<float>(rec[1 + j]) / 255.0f;
    }
    return d;
}

DatasetSplits load_dataset(const DatasetSpec& spec) {
    const std::size_t total = spec.train_size + spec.aux_size + spec.eval_size;
    LabeledDataset pool;
    if (spec.name == "synthetic-shapes") {
        pool = make_synthetic_shapes(total, spec.channels, spec.image_size, spec.seed);
    } else if (spec.name == "synthetic-blobs") {
        pool = make_synthetic_blobs(total, spec.channels, spec.image_size, spec.seed);
    } else if (spec.name == "cifar10-subset") {
        pool = load_cifar10_subset(spec.root, total, spec.seed);
    } else {
        throw std::invalid_argument("unknown dataset: " + spec.name);
    }
    if (!spec.norm_mean.empty()) pool.norm_mean = spec.norm_mean;
    if (!spec.norm_std.empty()) pool.norm_std = spec.norm_std;

    // Deterministic disjoint partitions.
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    SeedStream rng = derive_stream(spec.seed, "data/partition");
    for (std::size_t i = total; i > 1; --i)
        std::swap(order[i - 1], order[rng.next_below(i)]);

    auto slice = [&](std::size_t begin, std::size_t count) {
        std::vector<std::size_t> idx(order.begin() + begin, order.begin() + begin + count);
        return pool.subset(idx);
    };
    DatasetSplits s;
    s.train = slice(0, spec.train_size);
    s.aux = slice(spec.train_size, spec.aux_size);
    s.eval = slice(spec.train_size + spec.aux_size, spec.eval_size);
    return s;
}

}  // namespace splitshield
