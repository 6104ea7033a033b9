#include <cmath>

#include "doctest.h"
#include "splitshield/metrics.hpp"
#include "splitshield/rng.hpp"

using namespace splitshield;

namespace {

Tensor random_images(std::size_t n, std::size_t c, std::size_t s, std::uint64_t seed) {
    Tensor t({n, c, s, s});
    SeedStream rng(seed);
    for (auto& v : t.data) v = static_cast<float>(rng.next_unit());
    return t;
}

}  // namespace

TEST_CASE("psnr of identical batches hits the cap") {
    const Tensor a = random_images(3, 1, 8, 1);
    CHECK(psnr(a, a) == doctest::Approx(99.0));
}

TEST_CASE("psnr of a quarter-MSE pair") {
    const Tensor a = Tensor::zeros({2, 1, 8, 8});
    const Tensor b = Tensor::full({2, 1, 8, 8}, 0.5f);
    // MSE = 0.25 -> 10*log10(4) dB.
    CHECK(std::abs(psnr(a, b) - 6.0206) < 1e-3);
}

TEST_CASE("tenfold error amplitude costs exactly 20 dB") {
    const Tensor a = Tensor::zeros({1, 1, 8, 8});
    Tensor small = a, big = a;
    for (std::size_t i = 0; i < small.numel(); ++i) {
        small.data[i] = 0.01f;
        big.data[i] = 0.1f;
    }
    CHECK(std::abs((psnr(a, small) - psnr(a, big)) - 20.0) < 1e-9);
}

TEST_CASE("psnr decreases strictly along a noise ramp") {
    const Tensor clean = random_images(2, 1, 8, 7);
    SeedStream rng(99);
    Tensor noise_dir(clean.shape);
    for (auto& v : noise_dir.data) v = rng.next_normal(0.0f, 1.0f);
    double prev = psnr(clean, clean);
    for (int step = 1; step <= 10; ++step) {
        Tensor noisy = clean;
        const float amp = 0.02f * static_cast<float>(step);
        for (std::size_t i = 0; i < noisy.numel(); ++i) {
            noisy.data[i] = std::min(1.0f, std::max(0.0f, noisy.data[i] + amp * noise_dir.data[i]));
        }
        const double cur = psnr(clean, noisy);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("psnr demands matching shapes") {
    CHECK_THROWS_AS(psnr(Tensor({1, 1, 8, 8}), Tensor({1, 1, 8, 9})), std::invalid_argument);
}

TEST_CASE("ssim of identical images is one") {
    const Tensor a = random_images(4, 1, 8, 3);
    CHECK(std::abs(ssim(a, a) - 1.0) < 1e-9);
    const Tensor rgb = random_images(2, 3, 12, 4);
    CHECK(std::abs(ssim(rgb, rgb) - 1.0) < 1e-9);
}

TEST_CASE("constant images match the closed-form value") {
    const Tensor zeros = Tensor::zeros({1, 1, 8, 8});
    const Tensor ones = Tensor::full({1, 1, 8, 8}, 1.0f);
    // mu_a=0, mu_b=1, all variances zero: C1 / (1 + C1) with C1 = 1e-4.
    const double expected = 1e-4 / (1.0 + 1e-4);
    CHECK(std::abs(ssim(zeros, ones) - expected) < 1e-6);
}

TEST_CASE("ssim is symmetric and bounded") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const Tensor a = random_images(2, 1, 9, 100 + seed);
        const Tensor b = random_images(2, 1, 9, 200 + seed);
        const double ab = ssim(a, b);
        CHECK(ab == ssim(b, a));
        CHECK(ab <= 1.0);
        CHECK(ab >= -1.0);
        CHECK(ab < 1.0);  // distinct random pairs never saturate
    }
}

TEST_CASE("ssim rejects images smaller than the window") {
    CHECK_THROWS_AS(ssim(Tensor({1, 1, 6, 6}), Tensor({1, 1, 6, 6})), std::invalid_argument);
}

TEST_CASE("metrics are invariant to a shared batch permutation") {
    const Tensor a = random_images(5, 1, 8, 21);
    const Tensor b = random_images(5, 1, 8, 22);
    const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
    const std::size_t per = a.numel() / a.dim(0);
    Tensor pa(a.shape), pb(b.shape);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        std::copy_n(a.data.data() + perm[i] * per, per, pa.data.data() + i * per);
        std::copy_n(b.data.data() + perm[i] * per, per, pb.data.data() + i * per);
    }
    CHECK(psnr(a, b) == doctest::Approx(psnr(pa, pb)).epsilon(1e-12));
    CHECK(ssim(a, b) == doctest::Approx(ssim(pa, pb)).epsilon(1e-12));
}

TEST_CASE("accuracy and delta_acc over a pipeline functor") {
    LabeledDataset d;
    d.class_count = 2;
    d.images = Tensor({4, 1, 8, 8});
    d.labels = {0, 1, 0, 1};
    d.norm_mean = {0.5f};
    d.norm_std = {0.5f};

    // A "model" that memorizes the labels perfectly.
    LogitsFn perfect = [&](const Tensor& x) {
        Tensor logits({x.dim(0), 2});
        for (std::size_t i = 0; i < x.dim(0); ++i) logits.at2(i, d.labels[i]) = 1.0f;
        return logits;
    };
    LogitsFn constant = [](const Tensor& x) {
        Tensor logits({x.dim(0), 2});
        for (std::size_t i = 0; i < x.dim(0); ++i) logits.at2(i, 0) = 1.0f;
        return logits;
    };
    CHECK(accuracy(perfect, d) == doctest::Approx(1.0));
    CHECK(delta_acc(perfect, perfect, d) == 0.0);
    CHECK(delta_acc(constant, perfect, d) == doctest::Approx(-0.5));

    LabeledDataset empty;
    empty.images = Tensor({0, 1, 8, 8});
    CHECK_THROWS_AS(accuracy(perfect, empty), std::invalid_argument);
}
