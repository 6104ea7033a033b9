#include "splitshield/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace splitshield {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}

Tensor Tensor::full(const std::vector<std::size_t>& s, float v) {
    Tensor t(s);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

void add_inplace(Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void axpy_inplace(Tensor& a, float alpha, const Tensor& b) {
    check_same_shape(a, b, "axpy");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += alpha * b.data[i];
}

void scale_inplace(Tensor& a, float alpha) {
    for (float& v : a.data) v *= alpha;
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    add_inplace(out, b);
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Tensor add_broadcast_sample(const Tensor& batch, const Tensor& single) {
    if (batch.ndim() < 1) throw std::invalid_argument("add_broadcast_sample: empty batch");
    const std::size_t per = single.numel();
    if (batch.numel() != batch.dim(0) * per)
        throw std::invalid_argument("add_broadcast_sample: sample shape mismatch");
    Tensor out = batch;
    for (std::size_t n = 0; n < batch.dim(0); ++n) {
        float* dst = out.data.data() + n * per;
        for (std::size_t i = 0; i < per; ++i) dst[i] += single.data[i];
    }
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        s += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
    return s;
}

double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (float v : a.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    if (a.numel() == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    if (a.data.empty()) return true;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c, bool accumulate) {
    if (!trans_b) {
        // i-k-j order keeps the inner loop contiguous over B and C.
        if (!accumulate) std::memset(c, 0, m * n * sizeof(float));
        for (std::size_t i = 0; i < m; ++i) {
            float* crow = c + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const float av = trans_a ? a[kk * m + i] : a[i * k + kk];
                if (av == 0.0f) continue;
                const float* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        // B is n x k; C[i][j] = dot(A row/col i, B row j).
        for (std::size_t i = 0; i < m; ++i) {
            float* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const float* brow = b + j * k;
                float acc = 0.0f;
                if (!trans_a) {
                    const float* arow = a + i * k;
                    for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                } else {
                    for (std::size_t kk = 0; kk < k; ++kk) acc += a[kk * m + i] * brow[kk];
                }
                crow[j] = accumulate ? crow[j] + acc : acc;
            }
        }
    }
}

}  // namespace splitshield
