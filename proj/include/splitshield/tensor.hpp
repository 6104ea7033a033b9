#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace splitshield {

// Dense row-major float tensor. Layout for image batches is NCHW.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s);

    static Tensor zeros(const std::vector<std::size_t>& s) { return Tensor(s); }
    static Tensor full(const std::vector<std::size_t>& s, float v);

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    float* begin() { return data.data(); }
    float* end() { return data.data() + data.size(); }
    const float* begin() const { return data.data(); }
    const float* end() const { return data.data() + data.size(); }

    // 4-d accessor (NCHW); callers ensure ndim()==4.
    float& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    float at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }

    // 2-d accessor (rows x cols).
    float& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    float at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool all_finite() const;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Elementwise helpers used across the training code.
void add_inplace(Tensor& a, const Tensor& b);          // a += b
void axpy_inplace(Tensor& a, float alpha, const Tensor& b);  // a += alpha * b
void scale_inplace(Tensor& a, float alpha);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);

// Adds a single-sample tensor to every sample of a batch (shapes must match
// per sample; `single` has the batch's per-sample shape).
Tensor add_broadcast_sample(const Tensor& batch, const Tensor& single);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double mean_squared_error(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

// Plain row-major matrix multiply, C (m x n) = A (m x k) * B (k x n),
// optionally transposing either input. Accumulation order is fixed so
// results are bit-reproducible on a given machine.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c, bool accumulate = false);

}  // namespace splitshield
