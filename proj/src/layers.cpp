// Layer kernels: shape inference, weight init, forward (eval/train) and
// backward for every LayerKind. Everything is single-threaded and uses fixed
// accumulation order so repeated runs are bit-identical on one machine.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "splitshield/graph.hpp"

namespace splitshield {

namespace {

[[noreturn]] void shape_error(const std::string& what, const std::vector<std::size_t>& shape) {
    throw std::invalid_argument(what + " (got " + shape_str(shape) + ")");
}

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    const std::size_t padded = in + 2 * pad;
    if (padded < k) throw std::invalid_argument("conv kernel larger than padded input");
    return (padded - k) / stride + 1;
}

std::size_t convt_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                          std::size_t out_pad) {
    const std::size_t grown = (in - 1) * stride + k + out_pad;
    if (grown < 2 * pad) throw std::invalid_argument("conv_transpose padding too large");
    return grown - 2 * pad;
}

// cols is (C*K*K) x (OH*OW), row-major.
void im2col(const float* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, float* cols) {
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                float* row = cols + ((ch * k + ky) * k + kx) * (oh * ow);
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                        std::memset(row + oy * ow, 0, ow * sizeof(float));
                        continue;
                    }
                    const float* src = x + (ch * h + iy) * w;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        row[oy * ow + ox] =
                            (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? 0.0f : src[ix];
                    }
                }
            }
        }
    }
}

// Scatter-add of cols back into an image plane (inverse of im2col).
void col2im(const float* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, float* x) {
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const float* row = cols + ((ch * k + ky) * k + kx) * (oh * ow);
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    float* dst = x + (ch * h + iy) * w;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        dst[ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

constexpr float kBnEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;

}  // namespace

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::ConvTranspose2d: return "conv_transpose2d";
        case LayerKind::BatchNorm2d: return "batch_norm2d";
        case LayerKind::ReLU: return "relu";
        case LayerKind::Clamp01: return "clamp01";
        case LayerKind::MaxPool2d: return "max_pool2d";
        case LayerKind::AvgPoolGlobal: return "avg_pool_global";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Dense: return "dense";
        case LayerKind::Softmax: return "softmax";
        case LayerKind::Residual: return "residual";
    }
    return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
    for (int k = 0; k <= static_cast<int>(LayerKind::Residual); ++k) {
        if (name == layer_kind_name(static_cast<LayerKind>(k))) return static_cast<LayerKind>(k);
    }
    throw std::invalid_argument("unknown layer kind: " + name);
}

LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride,
                 std::size_t pad) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.ksize = k;
    s.stride = stride;
    s.pad = pad;
    return s;
}

LayerSpec conv_transpose2d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                           std::size_t stride, std::size_t pad, std::size_t out_pad) {
    LayerSpec s;
    s.kind = LayerKind::ConvTranspose2d;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.ksize = k;
    s.stride = stride;
    s.pad = pad;
    s.out_pad = out_pad;
    return s;
}

LayerSpec batch_norm2d(std::size_t channels) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm2d;
    s.in_ch = s.out_ch = channels;
    return s;
}

LayerSpec relu() { return LayerSpec{.kind = LayerKind::ReLU}; }
LayerSpec clamp01() { return LayerSpec{.kind = LayerKind::Clamp01}; }

LayerSpec max_pool2d(std::size_t k, std::size_t stride, std::size_t pad) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool2d;
    s.ksize = k;
    s.stride = stride;
    s.pad = pad;
    return s;
}

LayerSpec avg_pool_global() { return LayerSpec{.kind = LayerKind::AvgPoolGlobal}; }
LayerSpec flatten() { return LayerSpec{.kind = LayerKind::Flatten}; }

LayerSpec dense(std::size_t in_features, std::size_t out_features) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in_features = in_features;
    s.out_features = out_features;
    return s;
}

LayerSpec softmax() { return LayerSpec{.kind = LayerKind::Softmax}; }

LayerSpec residual(std::vector<LayerSpec> body, std::vector<LayerSpec> shortcut) {
    LayerSpec s;
    s.kind = LayerKind::Residual;
    s.body = std::move(body);
    s.shortcut = std::move(shortcut);
    return s;
}

// ---------------------------------------------------------------------------
// Shape propagation

static std::vector<std::size_t> layers_output_shape(const std::vector<LayerSpec>& layers,
                                                    std::vector<std::size_t> shape);

static std::vector<std::size_t> layer_output_shape(const LayerSpec& l,
                                                   const std::vector<std::size_t>& in) {
    switch (l.kind) {
        case LayerKind::Conv2d: {
            if (in.size() != 3 || in[0] != l.in_ch)
                shape_error("conv2d expects " + std::to_string(l.in_ch) + " input channels", in);
            return {l.out_ch, conv_out_dim(in[1], l.ksize, l.stride, l.pad),
                    conv_out_dim(in[2], l.ksize, l.stride, l.pad)};
        }
        case LayerKind::ConvTranspose2d: {
            if (in.size() != 3 || in[0] != l.in_ch)
                shape_error("conv_transpose2d expects " + std::to_string(l.in_ch) + " input channels",
                            in);
            return {l.out_ch, convt_out_dim(in[1], l.ksize, l.stride, l.pad, l.out_pad),
                    convt_out_dim(in[2], l.ksize, l.stride, l.pad, l.out_pad)};
        }
        case LayerKind::BatchNorm2d:
            if (in.size() != 3 || in[0] != l.in_ch)
                shape_error("batch_norm2d expects " + std::to_string(l.in_ch) + " channels", in);
            return in;
        case LayerKind::ReLU:
        case LayerKind::Clamp01:
            return in;
        case LayerKind::MaxPool2d: {
            if (in.size() != 3) shape_error("max_pool2d expects CxHxW input", in);
            return {in[0], conv_out_dim(in[1], l.ksize, l.stride, l.pad),
                    conv_out_dim(in[2], l.ksize, l.stride, l.pad)};
        }
        case LayerKind::AvgPoolGlobal:
            if (in.size() != 3) shape_error("avg_pool_global expects CxHxW input", in);
            return {in[0], 1, 1};
        case LayerKind::Flatten:
            return {shape_numel(in)};
        case LayerKind::Dense:
            if (in.size() != 1 || in[0] != l.in_features)
                shape_error("dense expects " + std::to_string(l.in_features) + " input features", in);
            return {l.out_features};
        case LayerKind::Softmax:
            if (in.size() != 1) shape_error("softmax expects flat input", in);
            return in;
        case LayerKind::Residual: {
            auto main_out = layers_output_shape(l.body, in);
            auto sc_out = l.shortcut.empty() ? in : layers_output_shape(l.shortcut, in);
            if (main_out != sc_out)
                throw std::invalid_argument("residual branch shapes differ: " + shape_str(main_out) +
                                            " vs " + shape_str(sc_out));
            return main_out;
        }
    }
    throw std::logic_error("unreachable layer kind");
}

static std::vector<std::size_t> layers_output_shape(const std::vector<LayerSpec>& layers,
                                                    std::vector<std::size_t> shape) {
    for (const auto& l : layers) shape = layer_output_shape(l, shape);
    return shape;
}

std::vector<std::size_t> ModelGraph::output_shape() const {
    return layers_output_shape(layers, input_shape);
}

const Tensor& ModelGraph::weight(const std::string& name) const {
    auto it = weights.find(name);
    if (it == weights.end()) throw std::out_of_range("missing weight: " + name);
    return it->second;
}

Tensor& ModelGraph::weight(const std::string& name) {
    auto it = weights.find(name);
    if (it == weights.end()) throw std::out_of_range("missing weight: " + name);
    return it->second;
}

// ---------------------------------------------------------------------------
// Weight naming and init

void collect_names_for(const std::vector<LayerSpec>& layers, const std::string& prefix,
                       std::vector<std::string>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string base = prefix + "l" + std::to_string(i) + ".";
        switch (l.kind) {
            case LayerKind::Conv2d:
            case LayerKind::ConvTranspose2d:
            case LayerKind::Dense:
                out.push_back(base + "w");
                out.push_back(base + "b");
                break;
            case LayerKind::BatchNorm2d:
                out.push_back(base + "gamma");
                out.push_back(base + "beta");
                out.push_back(base + "rmean");
                out.push_back(base + "rvar");
                break;
            case LayerKind::Residual:
                collect_names_for(l.body, base + "m.", out);
                collect_names_for(l.shortcut, base + "s.", out);
                break;
            default:
                break;
        }
    }
}

std::vector<std::string> weight_names(const ModelGraph& g) {
    std::vector<std::string> out;
    collect_names_for(g.layers, "", out);
    return out;
}

static void init_layers(const std::vector<LayerSpec>& layers, const std::string& prefix,
                        std::map<std::string, Tensor>& w, SeedStream& rng) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string base = prefix + "l" + std::to_string(i) + ".";
        switch (l.kind) {
            case LayerKind::Conv2d:
            case LayerKind::ConvTranspose2d: {
                const bool tr = l.kind == LayerKind::ConvTranspose2d;
                Tensor wt(tr ? std::vector<std::size_t>{l.in_ch, l.out_ch, l.ksize, l.ksize}
                             : std::vector<std::size_t>{l.out_ch, l.in_ch, l.ksize, l.ksize});
                const float bound =
                    std::sqrt(6.0f / static_cast<float>(l.in_ch * l.ksize * l.ksize));
                for (float& v : wt.data) v = rng.next_uniform(-bound, bound);
                w[base + "w"] = std::move(wt);
                w[base + "b"] = Tensor({l.out_ch});
                break;
            }
            case LayerKind::Dense: {
                Tensor wt({l.out_features, l.in_features});
                const float bound = std::sqrt(6.0f / static_cast<float>(l.in_features));
                for (float& v : wt.data) v = rng.next_uniform(-bound, bound);
                w[base + "w"] = std::move(wt);
                w[base + "b"] = Tensor({l.out_features});
                break;
            }
            case LayerKind::BatchNorm2d:
                w[base + "gamma"] = Tensor::full({l.in_ch}, 1.0f);
                w[base + "beta"] = Tensor({l.in_ch});
                w[base + "rmean"] = Tensor({l.in_ch});
                w[base + "rvar"] = Tensor::full({l.in_ch}, 1.0f);
                break;
            case LayerKind::Residual:
                init_layers(l.body, base + "m.", w, rng);
                init_layers(l.shortcut, base + "s.", w, rng);
                break;
            default:
                break;
        }
    }
}

void init_weights(ModelGraph& g, SeedStream& rng) {
    g.weights.clear();
    init_layers(g.layers, "", g.weights, rng);
    g.output_shape();  // validates adjacent shape compatibility
}

std::uint64_t weights_digest(const ModelGraph& g) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& name : weight_names(g)) {
        const Tensor& t = g.weight(name);
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
        for (std::size_t i = 0; i < t.data.size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

bool graphs_bit_equal(const ModelGraph& a, const ModelGraph& b) {
    if (a.layers != b.layers || a.input_shape != b.input_shape) return false;
    if (a.weights.size() != b.weights.size()) return false;
    for (const auto& [name, t] : a.weights) {
        auto it = b.weights.find(name);
        if (it == b.weights.end() || !bit_equal(t, it->second)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct Runner {
    std::map<std::string, Tensor>* weights;        // mutable only for BN running stats
    const std::map<std::string, Tensor>* cweights;
    bool train = false;

    const Tensor& w(const std::string& name) const {
        auto it = cweights->find(name);
        if (it == cweights->end()) throw std::out_of_range("missing weight: " + name);
        return it->second;
    }

    Tensor run(const std::vector<LayerSpec>& layers, const std::string& prefix, const Tensor& x,
               std::vector<LayerCache>* caches);
    Tensor apply(const LayerSpec& l, const std::string& base, const Tensor& x, LayerCache* cache);
};

Tensor conv2d_forward(const LayerSpec& l, const Tensor& w, const Tensor& b, const Tensor& x) {
    if (x.ndim() != 4 || x.dim(1) != l.in_ch)
        shape_error("conv2d input shape mismatch", x.shape);
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t oh = conv_out_dim(h, l.ksize, l.stride, l.pad);
    const std::size_t ow = conv_out_dim(wd, l.ksize, l.stride, l.pad);
    const std::size_t ckk = l.in_ch * l.ksize * l.ksize;
    Tensor out({n, l.out_ch, oh, ow});
    std::vector<float> cols(ckk * oh * ow);
    for (std::size_t s = 0; s < n; ++s) {
        im2col(x.data.data() + s * l.in_ch * h * wd, l.in_ch, h, wd, l.ksize, l.stride, l.pad, oh,
               ow, cols.data());
        float* dst = out.data.data() + s * l.out_ch * oh * ow;
        gemm(false, false, l.out_ch, oh * ow, ckk, w.data.data(), cols.data(), dst);
        for (std::size_t oc = 0; oc < l.out_ch; ++oc) {
            const float bias = b.data[oc];
            float* plane = dst + oc * oh * ow;
            for (std::size_t i = 0; i < oh * ow; ++i) plane[i] += bias;
        }
    }
    return out;
}

Tensor conv2d_backward(const LayerSpec& l, const Tensor& w, const Tensor& x, const Tensor& gout,
                       Tensor* gw, Tensor* gb) {
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t oh = gout.dim(2), ow = gout.dim(3);
    const std::size_t ckk = l.in_ch * l.ksize * l.ksize;
    Tensor gin(x.shape);
    std::vector<float> cols(ckk * oh * ow);
    std::vector<float> gcols(ckk * oh * ow);
    for (std::size_t s = 0; s < n; ++s) {
        const float* gdst = gout.data.data() + s * l.out_ch * oh * ow;
        if (gw) {
            im2col(x.data.data() + s * l.in_ch * h * wd, l.in_ch, h, wd, l.ksize, l.stride, l.pad,
                   oh, ow, cols.data());
            gemm(false, true, l.out_ch, ckk, oh * ow, gdst, cols.data(), gw->data.data(), true);
        }
        if (gb) {
            for (std::size_t oc = 0; oc < l.out_ch; ++oc) {
                const float* plane = gdst + oc * oh * ow;
                float acc = 0.0f;
                for (std::size_t i = 0; i < oh * ow; ++i) acc += plane[i];
                gb->data[oc] += acc;
            }
        }
        gemm(true, false, ckk, oh * ow, l.out_ch, w.data.data(), gdst, gcols.data());
        col2im(gcols.data(), l.in_ch, h, wd, l.ksize, l.stride, l.pad, oh, ow,
               gin.data.data() + s * l.in_ch * h * wd);
    }
    return gin;
}

Tensor convt2d_forward(const LayerSpec& l, const Tensor& w, const Tensor& b, const Tensor& x) {
    if (x.ndim() != 4 || x.dim(1) != l.in_ch)
        shape_error("conv_transpose2d input shape mismatch", x.shape);
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t oh = convt_out_dim(h, l.ksize, l.stride, l.pad, l.out_pad);
    const std::size_t ow = convt_out_dim(wd, l.ksize, l.stride, l.pad, l.out_pad);
    const std::size_t ockk = l.out_ch * l.ksize * l.ksize;
    Tensor out({n, l.out_ch, oh, ow});
    std::vector<float> cols(ockk * h * wd);
    for (std::size_t s = 0; s < n; ++s) {
        // cols = W^T (OCKK x IC) * x_s (IC x HW), then scatter into the output.
        gemm(true, false, ockk, h * wd, l.in_ch, w.data.data(),
             x.data.data() + s * l.in_ch * h * wd, cols.data());
        float* dst = out.data.data() + s * l.out_ch * oh * ow;
        col2im(cols.data(), l.out_ch, oh, ow, l.ksize, l.stride, l.pad, h, wd, dst);
        for (std::size_t oc = 0; oc < l.out_ch; ++oc) {
            const float bias = b.data[oc];
            float* plane = dst + oc * oh * ow;
            for (std::size_t i = 0; i < oh * ow; ++i) plane[i] += bias;
        }
    }
    return out;
}

Tensor convt2d_backward(const LayerSpec& l, const Tensor& w, const Tensor& x, const Tensor& gout,
                        Tensor* gw, Tensor* gb) {
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t oh = gout.dim(2), ow = gout.dim(3);
    const std::size_t ockk = l.out_ch * l.ksize * l.ksize;
    Tensor gin(x.shape);
    std::vector<float> gcols(ockk * h * wd);
    for (std::size_t s = 0; s < n; ++s) {
        const float* gdst = gout.data.data() + s * l.out_ch * oh * ow;
        im2col(gdst, l.out_ch, oh, ow, l.ksize, l.stride, l.pad, h, wd, gcols.data());
        if (gw) {
            gemm(false, true, l.in_ch, ockk, h * wd, x.data.data() + s * l.in_ch * h * wd,
                 gcols.data(), gw->data.data(), true);
        }
        if (gb) {
            for (std::size_t oc = 0; oc < l.out_ch; ++oc) {
                const float* plane = gdst + oc * oh * ow;
                float acc = 0.0f;
                for (std::size_t i = 0; i < oh * ow; ++i) acc += plane[i];
                gb->data[oc] += acc;
            }
        }
        gemm(false, false, l.in_ch, h * wd, ockk, w.data.data(), gcols.data(),
             gin.data.data() + s * l.in_ch * h * wd);
    }
    return gin;
}

}  // namespace

Tensor Runner::apply(const LayerSpec& l, const std::string& base, const Tensor& x,
                     LayerCache* cache) {
    switch (l.kind) {
        case LayerKind::Conv2d: {
            if (cache) cache->input = x;
            return conv2d_forward(l, w(base + "w"), w(base + "b"), x);
        }
        case LayerKind::ConvTranspose2d: {
            if (cache) cache->input = x;
            return convt2d_forward(l, w(base + "w"), w(base + "b"), x);
        }
        case LayerKind::BatchNorm2d: {
            if (x.ndim() != 4 || x.dim(1) != l.in_ch)
                shape_error("batch_norm2d input shape mismatch", x.shape);
            const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
            const Tensor& gamma = w(base + "gamma");
            const Tensor& beta = w(base + "beta");
            Tensor out(x.shape);
            if (!train) {
                const Tensor& rm = w(base + "rmean");
                const Tensor& rv = w(base + "rvar");
                if (cache) {
                    cache->bn_eval = true;
                    cache->extra = Tensor(x.shape);  // x_hat
                    cache->stats.resize(c);
                }
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float inv = 1.0f / std::sqrt(rv.data[ch] + kBnEps);
                    const float g = gamma.data[ch], bt = beta.data[ch], mu = rm.data[ch];
                    if (cache) cache->stats[ch] = inv;
                    for (std::size_t s = 0; s < n; ++s) {
                        const float* src = x.data.data() + (s * c + ch) * plane;
                        float* dst = out.data.data() + (s * c + ch) * plane;
                        if (cache) {
                            float* xh = cache->extra.data.data() + (s * c + ch) * plane;
                            for (std::size_t i = 0; i < plane; ++i) {
                                xh[i] = (src[i] - mu) * inv;
                                dst[i] = g * xh[i] + bt;
                            }
                        } else {
                            for (std::size_t i = 0; i < plane; ++i)
                                dst[i] = g * (src[i] - mu) * inv + bt;
                        }
                    }
                }
                return out;
            }
            // Training mode: batch statistics + running-stat update.
            const double count = static_cast<double>(n * plane);
            cache->input = x;
            cache->extra = Tensor(x.shape);  // x_hat
            cache->stats.resize(2 * c);
            Tensor& rm = (*weights)[base + "rmean"];
            Tensor& rv = (*weights)[base + "rvar"];
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sum = 0.0, sq = 0.0;
                for (std::size_t s = 0; s < n; ++s) {
                    const float* src = x.data.data() + (s * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum += src[i];
                        sq += static_cast<double>(src[i]) * src[i];
                    }
                }
                const double mean = sum / count;
                const double var = sq / count - mean * mean;
                const float inv = 1.0f / std::sqrt(static_cast<float>(var) + kBnEps);
                cache->stats[2 * ch] = static_cast<float>(mean);
                cache->stats[2 * ch + 1] = inv;
                const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
                rm.data[ch] = (1.0f - kBnMomentum) * rm.data[ch] +
                              kBnMomentum * static_cast<float>(mean);
                rv.data[ch] = (1.0f - kBnMomentum) * rv.data[ch] +
                              kBnMomentum * static_cast<float>(unbiased);
                const float g = gamma.data[ch], bt = beta.data[ch];
                for (std::size_t s = 0; s < n; ++s) {
                    const float* src = x.data.data() + (s * c + ch) * plane;
                    float* xh = cache->extra.data.data() + (s * c + ch) * plane;
                    float* dst = out.data.data() + (s * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        xh[i] = (src[i] - static_cast<float>(mean)) * inv;
                        dst[i] = g * xh[i] + bt;
                    }
                }
            }
            return out;
        }
        case LayerKind::ReLU: {
            if (cache) cache->input = x;
            Tensor out = x;
            for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
            return out;
        }
        case LayerKind::Clamp01: {
            if (cache) cache->input = x;
            Tensor out = x;
            for (float& v : out.data) v = std::min(1.0f, std::max(0.0f, v));
            return out;
        }
        case LayerKind::MaxPool2d: {
            if (x.ndim() != 4) shape_error("max_pool2d input shape mismatch", x.shape);
            const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
            const std::size_t oh = conv_out_dim(h, l.ksize, l.stride, l.pad);
            const std::size_t ow = conv_out_dim(wd, l.ksize, l.stride, l.pad);
            Tensor out({n, c, oh, ow});
            if (cache) {
                cache->input = x;
                cache->indices.assign(n * c * oh * ow, 0);
            }
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* plane = x.data.data() + (s * c + ch) * h * wd;
                    float* dst = out.data.data() + (s * c + ch) * oh * ow;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            float best = -std::numeric_limits<float>::infinity();
                            std::size_t best_idx = 0;
                            for (std::size_t ky = 0; ky < l.ksize; ++ky) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                                                          static_cast<std::ptrdiff_t>(l.pad);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kx = 0; kx < l.ksize; ++kx) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                                                              static_cast<std::ptrdiff_t>(l.pad);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    const float v = plane[iy * wd + ix];
                                    if (v > best) {
                                        best = v;
                                        best_idx = static_cast<std::size_t>(iy) * wd + ix;
                                    }
                                }
                            }
                            dst[oy * ow + ox] = best;
                            if (cache)
                                cache->indices[((s * c + ch) * oh + oy) * ow + ox] =
                                    static_cast<std::uint32_t>(best_idx);
                        }
                    }
                }
            }
            return out;
        }
        case LayerKind::AvgPoolGlobal: {
            if (x.ndim() != 4) shape_error("avg_pool_global input shape mismatch", x.shape);
            const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
            if (cache) cache->input = x;
            Tensor out({n, c, 1, 1});
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* src = x.data.data() + (s * c + ch) * plane;
                    float acc = 0.0f;
                    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
                    out.data[s * c + ch] = acc / static_cast<float>(plane);
                }
            }
            return out;
        }
        case LayerKind::Flatten: {
            if (cache) cache->input = x;  // only the shape is needed
            Tensor out = x;
            out.shape = {x.dim(0), x.numel() / x.dim(0)};
            return out;
        }
        case LayerKind::Dense: {
            if (x.ndim() != 2 || x.dim(1) != l.in_features)
                shape_error("dense input shape mismatch", x.shape);
            if (cache) cache->input = x;
            const Tensor& wt = w(base + "w");
            const Tensor& b = w(base + "b");
            const std::size_t n = x.dim(0);
            Tensor out({n, l.out_features});
            gemm(false, true, n, l.out_features, l.in_features, x.data.data(), wt.data.data(),
                 out.data.data());
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t j = 0; j < l.out_features; ++j) out.at2(s, j) += b.data[j];
            return out;
        }
        case LayerKind::Softmax: {
            if (x.ndim() != 2) shape_error("softmax input shape mismatch", x.shape);
            Tensor out = x;
            const std::size_t n = x.dim(0), k = x.dim(1);
            for (std::size_t s = 0; s < n; ++s) {
                float* row = out.data.data() + s * k;
                float mx = row[0];
                for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    sum += row[j];
                }
                const float inv = static_cast<float>(1.0 / sum);
                for (std::size_t j = 0; j < k; ++j) row[j] *= inv;
            }
            if (cache) cache->extra = out;
            return out;
        }
        case LayerKind::Residual: {
            Tensor main_out;
            Tensor sc_out;
            if (cache) {
                cache->input = x;
                main_out = run(l.body, base + "m.", x, &cache->children);
                sc_out = l.shortcut.empty() ? x : run(l.shortcut, base + "s.", x, &cache->children2);
            } else {
                main_out = run(l.body, base + "m.", x, nullptr);
                sc_out = l.shortcut.empty() ? x : run(l.shortcut, base + "s.", x, nullptr);
            }
            add_inplace(main_out, sc_out);
            if (cache) cache->extra = main_out;  // pre-activation
            for (float& v : main_out.data) v = v > 0.0f ? v : 0.0f;
            return main_out;
        }
    }
    throw std::logic_error("unreachable layer kind");
}

Tensor Runner::run(const std::vector<LayerSpec>& layers, const std::string& prefix,
                   const Tensor& x, std::vector<LayerCache>* caches) {
    Tensor cur = x;
    if (caches) caches->resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string base = prefix + "l" + std::to_string(i) + ".";
        cur = apply(layers[i], base, cur, caches ? &(*caches)[i] : nullptr);
    }
    return cur;
}

Tensor forward(const ModelGraph& g, const Tensor& x) {
    Runner r;
    r.cweights = &g.weights;
    r.weights = nullptr;
    r.train = false;
    return r.run(g.layers, "", x, nullptr);
}

Tensor forward_train(ModelGraph& g, const Tensor& x, Tape& tape) {
    Runner r;
    r.cweights = &g.weights;
    r.weights = &g.weights;
    r.train = true;
    tape.layers.clear();
    tape.output = r.run(g.layers, "", x, &tape.layers);
    return tape.output;
}

Tensor forward_frozen(const ModelGraph& g, const Tensor& x, Tape& tape) {
    Runner r;
    r.cweights = &g.weights;
    r.weights = nullptr;
    r.train = false;
    tape.layers.clear();
    tape.output = r.run(g.layers, "", x, &tape.layers);
    return tape.output;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

struct BackRunner {
    const std::map<std::string, Tensor>* weights;
    GradMap* grads;

    const Tensor& w(const std::string& name) const { return weights->at(name); }

    Tensor* grad_slot(const std::string& name, const std::vector<std::size_t>& shape) {
        if (!grads) return nullptr;
        auto it = grads->find(name);
        if (it == grads->end()) it = grads->emplace(name, Tensor(shape)).first;
        return &it->second;
    }

    Tensor run(const std::vector<LayerSpec>& layers, const std::string& prefix,
               const std::vector<LayerCache>& caches, Tensor g);
    Tensor apply(const LayerSpec& l, const std::string& base, const LayerCache& cache, Tensor g);
};

Tensor BackRunner::apply(const LayerSpec& l, const std::string& base, const LayerCache& cache,
                         Tensor g) {
    switch (l.kind) {
        case LayerKind::Conv2d: {
            const Tensor& wt = w(base + "w");
            Tensor* gw = grad_slot(base + "w", wt.shape);
            Tensor* gb = grad_slot(base + "b", w(base + "b").shape);
            return conv2d_backward(l, wt, cache.input, g, gw, gb);
        }
        case LayerKind::ConvTranspose2d: {
            const Tensor& wt = w(base + "w");
            Tensor* gw = grad_slot(base + "w", wt.shape);
            Tensor* gb = grad_slot(base + "b", w(base + "b").shape);
            return convt2d_backward(l, wt, cache.input, g, gw, gb);
        }
        case LayerKind::BatchNorm2d: {
            const Tensor& gamma = w(base + "gamma");
            if (cache.bn_eval) {
                // Running-stat forward: the normalization is an affine map.
                const std::size_t n = cache.extra.dim(0), c = cache.extra.dim(1),
                                  plane = cache.extra.dim(2) * cache.extra.dim(3);
                Tensor* ggamma = grad_slot(base + "gamma", gamma.shape);
                Tensor* gbeta = grad_slot(base + "beta", gamma.shape);
                Tensor gin(cache.extra.shape);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float scale = gamma.data[ch] * cache.stats[ch];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t s = 0; s < n; ++s) {
                        const float* gp = g.data.data() + (s * c + ch) * plane;
                        const float* xh = cache.extra.data.data() + (s * c + ch) * plane;
                        float* dst = gin.data.data() + (s * c + ch) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            sum_g += gp[i];
                            sum_gx += static_cast<double>(gp[i]) * xh[i];
                            dst[i] = gp[i] * scale;
                        }
                    }
                    if (ggamma) ggamma->data[ch] += static_cast<float>(sum_gx);
                    if (gbeta) gbeta->data[ch] += static_cast<float>(sum_g);
                }
                return gin;
            }
            const std::size_t n = cache.input.dim(0), c = cache.input.dim(1),
                              plane = cache.input.dim(2) * cache.input.dim(3);
            const double count = static_cast<double>(n * plane);
            Tensor* ggamma = grad_slot(base + "gamma", gamma.shape);
            Tensor* gbeta = grad_slot(base + "beta", gamma.shape);
            Tensor gin(cache.input.shape);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const float inv = cache.stats[2 * ch + 1];
                const float gm = gamma.data[ch];
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t s = 0; s < n; ++s) {
                    const float* gp = g.data.data() + (s * c + ch) * plane;
                    const float* xh = cache.extra.data.data() + (s * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g += gp[i];
                        sum_gx += static_cast<double>(gp[i]) * xh[i];
                    }
                }
                if (ggamma) ggamma->data[ch] += static_cast<float>(sum_gx);
                if (gbeta) gbeta->data[ch] += static_cast<float>(sum_g);
                const float mean_g = static_cast<float>(sum_g / count);
                const float mean_gx = static_cast<float>(sum_gx / count);
                for (std::size_t s = 0; s < n; ++s) {
                    const float* gp = g.data.data() + (s * c + ch) * plane;
                    const float* xh = cache.extra.data.data() + (s * c + ch) * plane;
                    float* dst = gin.data.data() + (s * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i)
                        dst[i] = gm * inv * (gp[i] - mean_g - xh[i] * mean_gx);
                }
            }
            return gin;
        }
        case LayerKind::ReLU: {
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (cache.input.data[i] <= 0.0f) g.data[i] = 0.0f;
            return g;
        }
        case LayerKind::Clamp01: {
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const float v = cache.input.data[i];
                if (v <= 0.0f || v >= 1.0f) g.data[i] = 0.0f;
            }
            return g;
        }
        case LayerKind::MaxPool2d: {
            Tensor gin(cache.input.shape);
            const std::size_t n = cache.input.dim(0), c = cache.input.dim(1),
                              plane = cache.input.dim(2) * cache.input.dim(3);
            const std::size_t oplane = g.dim(2) * g.dim(3);
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float* gp = g.data.data() + (s * c + ch) * oplane;
                    float* dst = gin.data.data() + (s * c + ch) * plane;
                    const std::uint32_t* idx = cache.indices.data() + (s * c + ch) * oplane;
                    for (std::size_t i = 0; i < oplane; ++i) dst[idx[i]] += gp[i];
                }
            }
            return gin;
        }
        case LayerKind::AvgPoolGlobal: {
            Tensor gin(cache.input.shape);
            const std::size_t n = cache.input.dim(0), c = cache.input.dim(1),
                              plane = cache.input.dim(2) * cache.input.dim(3);
            const float inv = 1.0f / static_cast<float>(plane);
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float gv = g.data[s * c + ch] * inv;
                    float* dst = gin.data.data() + (s * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) dst[i] = gv;
                }
            }
            return gin;
        }
        case LayerKind::Flatten: {
            g.shape = cache.input.shape;
            return g;
        }
        case LayerKind::Dense: {
            const Tensor& wt = w(base + "w");
            const std::size_t n = g.dim(0);
            if (grads) {
                Tensor* gw = grad_slot(base + "w", wt.shape);
                gemm(true, false, l.out_features, l.in_features, n, g.data.data(),
                     cache.input.data.data(), gw->data.data(), true);
                Tensor* gb = grad_slot(base + "b", {l.out_features});
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t j = 0; j < l.out_features; ++j)
                        gb->data[j] += g.at2(s, j);
            }
            Tensor gin({n, l.in_features});
            gemm(false, false, n, l.in_features, l.out_features, g.data.data(), wt.data.data(),
                 gin.data.data());
            return gin;
        }
        case LayerKind::Softmax: {
            const Tensor& y = cache.extra;
            const std::size_t n = y.dim(0), k = y.dim(1);
            Tensor gin(y.shape);
            for (std::size_t s = 0; s < n; ++s) {
                const float* yr = y.data.data() + s * k;
                const float* gr = g.data.data() + s * k;
                double dotv = 0.0;
                for (std::size_t j = 0; j < k; ++j) dotv += static_cast<double>(gr[j]) * yr[j];
                float* dst = gin.data.data() + s * k;
                for (std::size_t j = 0; j < k; ++j)
                    dst[j] = yr[j] * (gr[j] - static_cast<float>(dotv));
            }
            return gin;
        }
        case LayerKind::Residual: {
            // Final ReLU on the cached pre-activation.
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (cache.extra.data[i] <= 0.0f) g.data[i] = 0.0f;
            Tensor g_main = run(l.body, base + "m.", cache.children, g);
            Tensor g_sc = l.shortcut.empty() ? g : run(l.shortcut, base + "s.", cache.children2, g);
            add_inplace(g_main, g_sc);
            return g_main;
        }
    }
    throw std::logic_error("unreachable layer kind");
}

Tensor BackRunner::run(const std::vector<LayerSpec>& layers, const std::string& prefix,
                       const std::vector<LayerCache>& caches, Tensor g) {
    for (std::size_t i = layers.size(); i-- > 0;) {
        const std::string base = prefix + "l" + std::to_string(i) + ".";
        g = apply(layers[i], base, caches[i], std::move(g));
    }
    return g;
}

}  // namespace

Tensor backward(const ModelGraph& g, const Tape& tape, const Tensor& grad_out, GradMap* grads) {
    if (tape.layers.size() != g.layers.size())
        throw std::invalid_argument("backward: tape does not match graph");
    BackRunner r;
    r.weights = &g.weights;
    r.grads = grads;
    return r.run(g.layers, "", tape.layers, grad_out);
}

}  // namespace splitshield
