// SPDX-License-Identifier: Apache-2.0
#include "bnas/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bnas/elasticity.hpp"
#include "bnas/errors.hpp"

namespace bnas {

template <class T>
GradTensor<T>& BasicGradientStore<T>::slot(const std::string& key, std::size_t size) {
    auto& t = tensors[key];
    if (t.grad.empty()) {
        t.grad.assign(size, T(0));
        t.active.assign(size, 0);
    }
    return t;
}

template <class T>
const GradTensor<T>* BasicGradientStore<T>::find(const std::string& key) const {
    auto it = tensors.find(key);
    return it == tensors.end() ? nullptr : &it->second;
}

template <class T>
void BasicGradientStore<T>::accumulate(const BasicGradientStore& other) {
    for (const auto& [key, src] : other.tensors) {
        auto& dst = slot(key, src.grad.size());
        for (std::size_t j = 0; j < src.grad.size(); ++j) {
            dst.grad[j] += src.grad[j];
            dst.active[j] |= src.active[j];
        }
    }
}

namespace {

template <class T>
const BasicTensor<T>& tensor(const BasicWeightStore<T>& weights, const LayerNode& node, const char* role) {
    return weights.at(*node.weight(role));
}

template <class T>
const T* optional_data(const BasicWeightStore<T>& weights, const LayerNode& node, const char* role) {
    auto key = node.weight(role);
    return key ? weights.at(*key).data.data() : nullptr;
}

struct Range {
    std::int64_t lo, hi; // inclusive lo, exclusive hi
};

// Output positions o in [0, out) whose input coordinate o*stride - pad + k
// lies inside [0, in).
Range valid_range(std::int64_t out, std::int64_t in, std::int64_t stride, std::int64_t pad, std::int64_t k) {
    const std::int64_t shift = pad - k;
    std::int64_t lo = shift > 0 ? (shift + stride - 1) / stride : 0;
    const std::int64_t num = in - 1 + shift;
    if (num < 0) return {0, 0};
    std::int64_t hi = std::min(out, num / stride + 1);
    return {lo, std::max(lo, hi)};
}

struct ConvGeometry {
    std::int64_t n, ci, h, w;        // input (active)
    std::int64_t co, ho, wo;         // output (active)
    std::int64_t k, stride, pad;     // active kernel
    std::int64_t stored_ci, stored_k; // weight tensor extents
    std::int64_t offset() const { return (stored_k - k) / 2; }
};

template <class T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
    const auto off = g.offset();
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t o = 0; o < g.co; ++o) {
            T* yo = y + (n * g.co + o) * g.ho * g.wo;
            std::fill(yo, yo + g.ho * g.wo, bias ? bias[o] : T(0));
            for (std::int64_t i = 0; i < g.ci; ++i) {
                const T* xi = x + (n * g.ci + i) * g.h * g.w;
                for (std::int64_t kh = 0; kh < g.k; ++kh) {
                    const auto rows = valid_range(g.ho, g.h, g.stride, g.pad, kh);
                    for (std::int64_t kw = 0; kw < g.k; ++kw) {
                        const auto cols = valid_range(g.wo, g.w, g.stride, g.pad, kw);
                        const T wv = w[((o * g.stored_ci + i) * g.stored_k + kh + off) * g.stored_k + kw + off];
                        for (std::int64_t oh = rows.lo; oh < rows.hi; ++oh) {
                            const auto base = (oh * g.stride - g.pad + kh) * g.w - g.pad + kw;
                            T* yr = yo + oh * g.wo;
                            for (std::int64_t ow = cols.lo; ow < cols.hi; ++ow) yr[ow] += wv * xi[base + ow * g.stride];
                        }
                    }
                }
            }
        }
}

template <class T>
void conv_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db) {
    const auto off = g.offset();
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t o = 0; o < g.co; ++o) {
            const T* dyo = dy + (n * g.co + o) * g.ho * g.wo;
            if (db) {
                T acc = 0;
                for (std::int64_t p = 0; p < g.ho * g.wo; ++p) acc += dyo[p];
                db[o] += acc;
            }
            for (std::int64_t i = 0; i < g.ci; ++i) {
                const T* xi = x + (n * g.ci + i) * g.h * g.w;
                T* dxi = dx + (n * g.ci + i) * g.h * g.w;
                for (std::int64_t kh = 0; kh < g.k; ++kh) {
                    const auto rows = valid_range(g.ho, g.h, g.stride, g.pad, kh);
                    for (std::int64_t kw = 0; kw < g.k; ++kw) {
                        const auto cols = valid_range(g.wo, g.w, g.stride, g.pad, kw);
                        const auto widx = ((o * g.stored_ci + i) * g.stored_k + kh + off) * g.stored_k + kw + off;
                        const T wv = w[widx];
                        T acc = 0;
                        for (std::int64_t oh = rows.lo; oh < rows.hi; ++oh) {
                            const auto base = (oh * g.stride - g.pad + kh) * g.w - g.pad + kw;
                            const T* dyr = dyo + oh * g.wo;
                            for (std::int64_t ow = cols.lo; ow < cols.hi; ++ow) {
                                acc += dyr[ow] * xi[base + ow * g.stride];
                                dxi[base + ow * g.stride] += wv * dyr[ow];
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
}

template <class T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
    const auto off = g.offset();
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t c = 0; c < g.ci; ++c) {
            T* yc = y + (n * g.ci + c) * g.ho * g.wo;
            const T* xc = x + (n * g.ci + c) * g.h * g.w;
            std::fill(yc, yc + g.ho * g.wo, bias ? bias[c] : T(0));
            for (std::int64_t kh = 0; kh < g.k; ++kh) {
                const auto rows = valid_range(g.ho, g.h, g.stride, g.pad, kh);
                for (std::int64_t kw = 0; kw < g.k; ++kw) {
                    const auto cols = valid_range(g.wo, g.w, g.stride, g.pad, kw);
                    const T wv = w[(c * g.stored_k + kh + off) * g.stored_k + kw + off];
                    for (std::int64_t oh = rows.lo; oh < rows.hi; ++oh) {
                        const auto base = (oh * g.stride - g.pad + kh) * g.w - g.pad + kw;
                        T* yr = yc + oh * g.wo;
                        for (std::int64_t ow = cols.lo; ow < cols.hi; ++ow) yr[ow] += wv * xc[base + ow * g.stride];
                    }
                }
            }
        }
}

template <class T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db) {
    const auto off = g.offset();
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t c = 0; c < g.ci; ++c) {
            const T* dyc = dy + (n * g.ci + c) * g.ho * g.wo;
            const T* xc = x + (n * g.ci + c) * g.h * g.w;
            T* dxc = dx + (n * g.ci + c) * g.h * g.w;
            if (db) {
                T acc = 0;
                for (std::int64_t p = 0; p < g.ho * g.wo; ++p) acc += dyc[p];
                db[c] += acc;
            }
            for (std::int64_t kh = 0; kh < g.k; ++kh) {
                const auto rows = valid_range(g.ho, g.h, g.stride, g.pad, kh);
                for (std::int64_t kw = 0; kw < g.k; ++kw) {
                    const auto cols = valid_range(g.wo, g.w, g.stride, g.pad, kw);
                    const auto widx = (c * g.stored_k + kh + off) * g.stored_k + kw + off;
                    const T wv = w[widx];
                    T acc = 0;
                    for (std::int64_t oh = rows.lo; oh < rows.hi; ++oh) {
                        const auto base = (oh * g.stride - g.pad + kh) * g.w - g.pad + kw;
                        const T* dyr = dyc + oh * g.wo;
                        for (std::int64_t ow = cols.lo; ow < cols.hi; ++ow) {
                            acc += dyr[ow] * xc[base + ow * g.stride];
                            dxc[base + ow * g.stride] += wv * dyr[ow];
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
}

ConvGeometry geometry(const LayerNode& node, const NodeExec& exec, const TensorShape& in, const TensorShape& out,
                      const TensorShape& weight) {
    ConvGeometry g{};
    g.n = in[0], g.ci = in[1], g.h = in[2], g.w = in[3];
    g.co = out[1], g.ho = out[2], g.wo = out[3];
    g.k = exec.kernel, g.stride = node.attr("stride"), g.pad = exec.padding;
    g.stored_ci = weight[1], g.stored_k = weight[2];
    return g;
}

std::int64_t spatial(const TensorShape& s) { return s.rank() == 4 ? s[2] * s[3] : 1; }

template <class T>
void mark_conv(GradTensor<T>& slot, const ConvGeometry& g, std::int64_t rows, std::int64_t cols) {
    const auto off = g.offset();
    for (std::int64_t o = 0; o < rows; ++o)
        for (std::int64_t i = 0; i < cols; ++i)
            for (std::int64_t kh = 0; kh < g.k; ++kh)
                for (std::int64_t kw = 0; kw < g.k; ++kw)
                    slot.active[((o * g.stored_ci + i) * g.stored_k + kh + off) * g.stored_k + kw + off] = 1;
}

template <class T>
void mark_prefix(GradTensor<T>& slot, std::int64_t count) {
    std::fill(slot.active.begin(), slot.active.begin() + count, std::uint8_t{1});
}

} // namespace

template <class T>
std::vector<T> forward_pass(const ModelGraph& graph, const BasicWeightStore<T>& weights, const ExecPlan& plan,
                            std::span<const T> input, std::int64_t batch, Mode mode, ForwardTrace<T>* trace) {
    ForwardTrace<T> local;
    ForwardTrace<T>& tr = trace ? *trace : local;
    tr.mode = mode;
    tr.nodes.assign(graph.size(), {});

    for (auto i : plan.order) {
        const auto& node = graph.node(i);
        const auto& exec = plan.nodes[i];
        auto& cache = tr.nodes[i];
        cache.shape = plan.shapes[i];
        cache.shape.dims[0] = batch;
        const auto count = static_cast<std::size_t>(cache.shape.numel());
        const NodeCache<T>* in0 = exec.inputs.empty() ? nullptr : &tr.nodes[exec.inputs[0]];
        auto& y = cache.out;

        switch (node.kind) {
        case OpKind::Input:
            if (input.size() != count)
                throw ShapeMismatch(node.id, std::to_string(count) + " input values", std::to_string(input.size()));
            y.assign(input.begin(), input.end());
            break;
        case OpKind::Output:
        case OpKind::Flatten:
            y = in0->out;
            break;
        case OpKind::ReLU:
            y.resize(count);
            for (std::size_t j = 0; j < count; ++j) y[j] = in0->out[j] > T(0) ? in0->out[j] : T(0);
            break;
        case OpKind::Add:
            y = in0->out;
            for (std::size_t k = 1; k < exec.inputs.size(); ++k) {
                const auto& other = tr.nodes[exec.inputs[k]].out;
                for (std::size_t j = 0; j < count; ++j) y[j] += other[j];
            }
            break;
        case OpKind::Conv2D:
        case OpKind::DepthwiseConv2D: {
            const auto& w = tensor(weights, node, "weight");
            const auto g = geometry(node, exec, in0->shape, cache.shape, w.shape);
            y.resize(count);
            const T* bias = optional_data(weights, node, "bias");
            if (node.kind == OpKind::Conv2D)
                conv_forward(g, in0->out.data(), w.data.data(), bias, y.data());
            else
                depthwise_forward(g, in0->out.data(), w.data.data(), bias, y.data());
            break;
        }
        case OpKind::Linear: {
            const auto& w = tensor(weights, node, "weight");
            const T* bias = optional_data(weights, node, "bias");
            const auto n = cache.shape[0], co = cache.shape[1], ci = in0->shape[1], stored = w.shape[1];
            y.resize(count);
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t o = 0; o < co; ++o) {
                    T acc = bias ? bias[o] : T(0);
                    const T* wr = w.data.data() + o * stored;
                    const T* xr = in0->out.data() + b * ci;
                    for (std::int64_t k = 0; k < ci; ++k) acc += wr[k] * xr[k];
                    y[b * co + o] = acc;
                }
            break;
        }
        case OpKind::BatchNorm: {
            const auto n = cache.shape[0], c = cache.shape[1], hw = spatial(cache.shape);
            const T eps = static_cast<T>(node.attr_real("epsilon"));
            const T* gamma = tensor(weights, node, "gamma").data.data();
            const T* beta = tensor(weights, node, "beta").data.data();
            const T* rmean = tensor(weights, node, "running_mean").data.data();
            const T* rvar = tensor(weights, node, "running_var").data.data();
            const auto& x = in0->out;
            y.resize(count);
            cache.xhat.resize(count);
            cache.inv_std.assign(c, T(0));
            if (mode == Mode::Train) {
                cache.batch_mean.assign(c, T(0));
                cache.batch_var.assign(c, T(0));
            }
            const T m = static_cast<T>(n * hw);
            for (std::int64_t ch = 0; ch < c; ++ch) {
                T mean, var;
                if (mode == Mode::Train) {
                    T s = 0;
                    for (std::int64_t b = 0; b < n; ++b)
                        for (std::int64_t p = 0; p < hw; ++p) s += x[(b * c + ch) * hw + p];
                    mean = s / m;
                    T v = 0;
                    for (std::int64_t b = 0; b < n; ++b)
                        for (std::int64_t p = 0; p < hw; ++p) {
                            const T d = x[(b * c + ch) * hw + p] - mean;
                            v += d * d;
                        }
                    var = v / m;
                    cache.batch_mean[ch] = mean;
                    cache.batch_var[ch] = var;
                } else {
                    mean = rmean[ch];
                    var = rvar[ch];
                }
                const T inv = T(1) / std::sqrt(var + eps);
                cache.inv_std[ch] = inv;
                for (std::int64_t b = 0; b < n; ++b)
                    for (std::int64_t p = 0; p < hw; ++p) {
                        const auto j = (b * c + ch) * hw + p;
                        const T xh = (x[j] - mean) * inv;
                        cache.xhat[j] = xh;
                        y[j] = gamma[ch] * xh + beta[ch];
                    }
            }
            break;
        }
        case OpKind::MaxPool2D:
        case OpKind::AvgPool2D: {
            const auto& xs = in0->shape;
            const auto n = xs[0], c = xs[1], h = xs[2], w = xs[3];
            const auto ho = cache.shape[2], wo = cache.shape[3];
            const auto k = node.attr("kernel_size"), s = node.attr("stride"), p = node.attr("padding");
            const bool is_max = node.kind == OpKind::MaxPool2D;
            y.resize(count);
            if (is_max) cache.argmax.assign(count, -1);
            const T inv_area = T(1) / static_cast<T>(k * k);
            for (std::int64_t plane = 0; plane < n * c; ++plane) {
                const T* xp = in0->out.data() + plane * h * w;
                for (std::int64_t oh = 0; oh < ho; ++oh)
                    for (std::int64_t ow = 0; ow < wo; ++ow) {
                        const auto j = (plane * ho + oh) * wo + ow;
                        T best = -std::numeric_limits<T>::infinity(), sum = 0;
                        std::int32_t arg = -1;
                        for (std::int64_t kh = 0; kh < k; ++kh) {
                            const auto ih = oh * s - p + kh;
                            if (ih < 0 || ih >= h) continue;
                            for (std::int64_t kw = 0; kw < k; ++kw) {
                                const auto iw = ow * s - p + kw;
                                if (iw < 0 || iw >= w) continue;
                                const T v = xp[ih * w + iw];
                                sum += v;
                                if (v > best) {
                                    best = v;
                                    arg = static_cast<std::int32_t>(ih * w + iw);
                                }
                            }
                        }
                        if (is_max) {
                            y[j] = arg >= 0 ? best : T(0);
                            cache.argmax[j] = arg;
                        } else {
                            y[j] = sum * inv_area;
                        }
                    }
            }
            break;
        }
        case OpKind::GlobalAvgPool: {
            const auto& xs = in0->shape;
            const auto hw = xs[2] * xs[3];
            const T inv = T(1) / static_cast<T>(hw);
            y.resize(count);
            for (std::int64_t plane = 0; plane < xs[0] * xs[1]; ++plane) {
                T s = 0;
                for (std::int64_t q = 0; q < hw; ++q) s += in0->out[plane * hw + q];
                y[plane] = s * inv;
            }
            break;
        }
        }

        for (const auto v : y)
            if (!std::isfinite(v)) throw NonFiniteActivation("non-finite activation at '" + node.id + "'");
    }
    const auto out = *graph.index_of(graph.output_id());
    if (trace) return tr.nodes[out].out;
    return std::move(tr.nodes[out].out);
}

template <class T>
void backward_pass(const ModelGraph& graph, const BasicWeightStore<T>& weights, const ExecPlan& plan,
                   const ForwardTrace<T>& trace, std::span<const T> dlogits, BasicGradientStore<T>& grads) {
    const auto out_idx = *graph.index_of(graph.output_id());
    std::vector<std::vector<T>> dact(graph.size());
    dact[out_idx].assign(dlogits.begin(), dlogits.end());
    if (dact[out_idx].size() != trace.nodes[out_idx].out.size())
        throw ShapeMismatch(graph.output_id(), std::to_string(trace.nodes[out_idx].out.size()) + " logit gradients",
                            std::to_string(dlogits.size()));

    auto dinput = [&](std::size_t k) -> std::vector<T>& {
        auto& d = dact[k];
        if (d.empty()) d.assign(trace.nodes[k].out.size(), T(0));
        return d;
    };

    for (auto it = plan.order.rbegin(); it != plan.order.rend(); ++it) {
        const auto i = *it;
        if (dact[i].empty()) continue;
        const auto& node = graph.node(i);
        const auto& exec = plan.nodes[i];
        const auto& cache = trace.nodes[i];
        const auto& dy = dact[i];
        const std::size_t count = dy.size();

        switch (node.kind) {
        case OpKind::Input:
            break;
        case OpKind::Output:
        case OpKind::Flatten: {
            auto& dx = dinput(exec.inputs[0]);
            for (std::size_t j = 0; j < count; ++j) dx[j] += dy[j];
            break;
        }
        case OpKind::ReLU: {
            const auto& x = trace.nodes[exec.inputs[0]].out;
            auto& dx = dinput(exec.inputs[0]);
            for (std::size_t j = 0; j < count; ++j)
                if (x[j] > T(0)) dx[j] += dy[j];
            break;
        }
        case OpKind::Add:
            for (auto k : exec.inputs) {
                auto& dx = dinput(k);
                for (std::size_t j = 0; j < count; ++j) dx[j] += dy[j];
            }
            break;
        case OpKind::Conv2D:
        case OpKind::DepthwiseConv2D: {
            const auto& in = trace.nodes[exec.inputs[0]];
            const auto wkey = *node.weight("weight");
            const auto& w = weights.at(wkey);
            const auto g = geometry(node, exec, in.shape, cache.shape, w.shape);
            auto& wslot = grads.slot(wkey, w.data.size());
            T* db = nullptr;
            if (auto bkey = node.weight("bias")) {
                auto& bslot = grads.slot(*bkey, weights.at(*bkey).data.size());
                mark_prefix(bslot, node.kind == OpKind::Conv2D ? g.co : g.ci);
                db = bslot.grad.data();
            }
            auto& dx = dinput(exec.inputs[0]);
            if (node.kind == OpKind::Conv2D) {
                mark_conv(wslot, g, g.co, g.ci);
                conv_backward(g, in.out.data(), w.data.data(), dy.data(), dx.data(), wslot.grad.data(), db);
            } else {
                mark_conv(wslot, g, g.ci, 1);
                depthwise_backward(g, in.out.data(), w.data.data(), dy.data(), dx.data(), wslot.grad.data(), db);
            }
            break;
        }
        case OpKind::Linear: {
            const auto& in = trace.nodes[exec.inputs[0]];
            const auto wkey = *node.weight("weight");
            const auto& w = weights.at(wkey);
            const auto n = cache.shape[0], co = cache.shape[1], ci = in.shape[1], stored = w.shape[1];
            auto& wslot = grads.slot(wkey, w.data.size());
            T* db = nullptr;
            if (auto bkey = node.weight("bias")) {
                auto& bslot = grads.slot(*bkey, weights.at(*bkey).data.size());
                mark_prefix(bslot, co);
                db = bslot.grad.data();
            }
            for (std::int64_t o = 0; o < co; ++o)
                for (std::int64_t k = 0; k < ci; ++k) wslot.active[o * stored + k] = 1;
            auto& dx = dinput(exec.inputs[0]);
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t o = 0; o < co; ++o) {
                    const T d = dy[b * co + o];
                    if (db) db[o] += d;
                    T* dwr = wslot.grad.data() + o * stored;
                    const T* wr = w.data.data() + o * stored;
                    const T* xr = in.out.data() + b * ci;
                    T* dxr = dx.data() + b * ci;
                    for (std::int64_t k = 0; k < ci; ++k) {
                        dwr[k] += d * xr[k];
                        dxr[k] += d * wr[k];
                    }
                }
            break;
        }
        case OpKind::BatchNorm: {
            const auto n = cache.shape[0], c = cache.shape[1], hw = spatial(cache.shape);
            const auto gkey = *node.weight("gamma");
            const auto bkey = *node.weight("beta");
            const T* gamma = weights.at(gkey).data.data();
            auto& gslot = grads.slot(gkey, weights.at(gkey).data.size());
            auto& bslot = grads.slot(bkey, weights.at(bkey).data.size());
            mark_prefix(gslot, c);
            mark_prefix(bslot, c);
            auto& dx = dinput(exec.inputs[0]);
            const T m = static_cast<T>(n * hw);
            for (std::int64_t ch = 0; ch < c; ++ch) {
                T sum_dy = 0, sum_dy_xhat = 0;
                for (std::int64_t b = 0; b < n; ++b)
                    for (std::int64_t p = 0; p < hw; ++p) {
                        const auto j = (b * c + ch) * hw + p;
                        sum_dy += dy[j];
                        sum_dy_xhat += dy[j] * cache.xhat[j];
                    }
                gslot.grad[ch] += sum_dy_xhat;
                bslot.grad[ch] += sum_dy;
                const T scale = gamma[ch] * cache.inv_std[ch];
                for (std::int64_t b = 0; b < n; ++b)
                    for (std::int64_t p = 0; p < hw; ++p) {
                        const auto j = (b * c + ch) * hw + p;
                        if (trace.mode == Mode::Train)
                            dx[j] += scale / m * (m * dy[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
                        else
                            dx[j] += scale * dy[j];
                    }
            }
            break;
        }
        case OpKind::MaxPool2D:
        case OpKind::AvgPool2D: {
            const auto& in = trace.nodes[exec.inputs[0]];
            const auto h = in.shape[2], w = in.shape[3];
            const auto ho = cache.shape[2], wo = cache.shape[3];
            const auto planes = in.shape[0] * in.shape[1];
            auto& dx = dinput(exec.inputs[0]);
            if (node.kind == OpKind::MaxPool2D) {
                for (std::int64_t plane = 0; plane < planes; ++plane)
                    for (std::int64_t q = 0; q < ho * wo; ++q) {
                        const auto j = plane * ho * wo + q;
                        if (cache.argmax[j] >= 0) dx[plane * h * w + cache.argmax[j]] += dy[j];
                    }
            } else {
                const auto k = node.attr("kernel_size"), s = node.attr("stride"), p = node.attr("padding");
                const T inv_area = T(1) / static_cast<T>(k * k);
                for (std::int64_t plane = 0; plane < planes; ++plane)
                    for (std::int64_t oh = 0; oh < ho; ++oh)
                        for (std::int64_t ow = 0; ow < wo; ++ow) {
                            const T g = dy[(plane * ho + oh) * wo + ow] * inv_area;
                            for (std::int64_t kh = 0; kh < k; ++kh) {
                                const auto ih = oh * s - p + kh;
                                if (ih < 0 || ih >= h) continue;
                                for (std::int64_t kw = 0; kw < k; ++kw) {
                                    const auto iw = ow * s - p + kw;
                                    if (iw < 0 || iw >= w) continue;
                                    dx[plane * h * w + ih * w + iw] += g;
                                }
                            }
                        }
            }
            break;
        }
        case OpKind::GlobalAvgPool: {
            const auto& in = trace.nodes[exec.inputs[0]];
            const auto hw = in.shape[2] * in.shape[3];
            const T inv = T(1) / static_cast<T>(hw);
            auto& dx = dinput(exec.inputs[0]);
            for (std::int64_t plane = 0; plane < in.shape[0] * in.shape[1]; ++plane)
                for (std::int64_t q = 0; q < hw; ++q) dx[plane * hw + q] += dy[plane] * inv;
            break;
        }
        }
    }
}

template <class T>
T cross_entropy(std::span<const T> logits, std::span<const std::int32_t> labels, std::int64_t classes,
                std::vector<T>* dlogits) {
    const auto n = static_cast<std::int64_t>(labels.size());
    if (dlogits) dlogits->assign(logits.size(), T(0));
    T total = 0;
    for (std::int64_t b = 0; b < n; ++b) {
        const T* z = logits.data() + b * classes;
        const T mx = *std::max_element(z, z + classes);
        T sum = 0;
        for (std::int64_t c = 0; c < classes; ++c) sum += std::exp(z[c] - mx);
        const T lse = mx + std::log(sum);
        total += lse - z[labels[b]];
        if (dlogits) {
            T* d = dlogits->data() + b * classes;
            for (std::int64_t c = 0; c < classes; ++c)
                d[c] = (std::exp(z[c] - mx) / sum - (c == labels[b] ? T(1) : T(0))) / static_cast<T>(n);
        }
    }
    return total / static_cast<T>(n);
}

template <class T>
T distillation_loss(std::span<const T> student, std::span<const T> teacher, std::span<const std::int32_t> labels,
                    std::int64_t classes, double alpha, double temperature, std::vector<T>* dlogits) {
    const auto n = static_cast<std::int64_t>(labels.size());
    const T a = static_cast<T>(alpha), temp = static_cast<T>(temperature);
    std::vector<T> dce;
    const T ce = cross_entropy(student, labels, classes, dlogits ? &dce : nullptr);
    if (dlogits) dlogits->assign(student.size(), T(0));

    std::vector<T> ls(classes), lt(classes);
    auto log_softmax = [&](const T* z, std::vector<T>& out) {
        T mx = z[0] / temp;
        for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, z[c] / temp);
        T sum = 0;
        for (std::int64_t c = 0; c < classes; ++c) sum += std::exp(z[c] / temp - mx);
        const T lse = mx + std::log(sum);
        for (std::int64_t c = 0; c < classes; ++c) out[c] = z[c] / temp - lse;
    };

    T kl = 0;
    for (std::int64_t b = 0; b < n; ++b) {
        log_softmax(student.data() + b * classes, ls);
        log_softmax(teacher.data() + b * classes, lt);
        for (std::int64_t c = 0; c < classes; ++c) {
            const T pt = std::exp(lt[c]);
            if (pt > T(0)) kl += pt * (lt[c] - ls[c]);
            if (dlogits)
                (*dlogits)[b * classes + c] =
                    a * temp * (std::exp(ls[c]) - pt) / static_cast<T>(n) + (T(1) - a) * dce[b * classes + c];
        }
    }
    kl /= static_cast<T>(n);
    return a * temp * temp * kl + (T(1) - a) * ce;
}

template <class T>
void update_running_stats(const ModelGraph& graph, BasicWeightStore<T>& weights, const ExecPlan& plan,
                          const ForwardTrace<T>& trace, double momentum) {
    if (trace.mode != Mode::Train) return;
    const T mom = static_cast<T>(momentum);
    for (auto i : plan.order) {
        const auto& node = graph.node(i);
        if (node.kind != OpKind::BatchNorm) continue;
        const auto& cache = trace.nodes[i];
        const auto m = cache.shape[0] * spatial(cache.shape);
        const T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
        auto& rm = weights.at(*node.weight("running_mean")).data;
        auto& rv = weights.at(*node.weight("running_var")).data;
        for (std::size_t c = 0; c < cache.batch_mean.size(); ++c) {
            rm[c] = (T(1) - mom) * rm[c] + mom * cache.batch_mean[c];
            rv[c] = (T(1) - mom) * rv[c] + mom * cache.batch_var[c] * unbias;
        }
    }
}

#define BNAS_INSTANTIATE(T)                                                                                         \
    template struct BasicGradientStore<T>;                                                                          \
    template std::vector<T> forward_pass<T>(const ModelGraph&, const BasicWeightStore<T>&, const ExecPlan&,         \
                                            std::span<const T>, std::int64_t, Mode, ForwardTrace<T>*);              \
    template void backward_pass<T>(const ModelGraph&, const BasicWeightStore<T>&, const ExecPlan&,                  \
                                   const ForwardTrace<T>&, std::span<const T>, BasicGradientStore<T>&);             \
    template T cross_entropy<T>(std::span<const T>, std::span<const std::int32_t>, std::int64_t, std::vector<T>*);  \
    template T distillation_loss<T>(std::span<const T>, std::span<const T>, std::span<const std::int32_t>,          \
                                    std::int64_t, double, double, std::vector<T>*);                                 \
    template void update_running_stats<T>(const ModelGraph&, BasicWeightStore<T>&, const ExecPlan&,                 \
                                          const ForwardTrace<T>&, double);

BNAS_INSTANTIATE(float)
BNAS_INSTANTIATE(double)
#undef BNAS_INSTANTIATE

std::vector<float> forward(const ModelGraph& graph, const ExecPlan& plan, const Batch& batch, Mode mode) {
    return forward_pass<float>(graph, graph.weights(), plan, batch.inputs, batch.size(), mode);
}

std::vector<float> forward(const SuperNetwork& net, const Batch& batch, Mode mode) {
    return forward(net.base(), net.active_plan(), batch, mode);
}

PassResult train_pass(const ModelGraph& graph, const ExecPlan& plan, const Batch& batch, const LossSpec& loss) {
    PassResult r;
    r.logits = forward_pass<float>(graph, graph.weights(), plan, batch.inputs, batch.size(), Mode::Train, &r.trace);
    const auto classes = static_cast<std::int64_t>(r.logits.size()) / batch.size();
    std::vector<float> dlogits;
    if (loss.kind == LossSpec::Kind::CrossEntropy)
        r.loss = cross_entropy<float>(r.logits, batch.labels, classes, &dlogits);
    else
        r.loss = distillation_loss<float>(r.logits, loss.teacher, batch.labels, classes, loss.alpha, loss.temperature,
                                          &dlogits);
    backward_pass<float>(graph, graph.weights(), plan, r.trace, dlogits, r.grads);
    for (const auto& [key, g] : r.grads.tensors)
        for (const auto v : g.grad)
            if (!std::isfinite(v)) throw NonFiniteGradient("non-finite gradient in '" + key + "'");
    return r;
}

PassResult backward(const SuperNetwork& net, const Batch& batch, const LossSpec& loss) {
    return train_pass(net.base(), net.active_plan(), batch, loss);
}

void sgd_step(WeightStore& weights, const GradientStore& grads, OptimizerState& state) {
    const float lr = static_cast<float>(state.learning_rate);
    const float mom = static_cast<float>(state.momentum);
    const float wd = static_cast<float>(state.weight_decay);
    for (const auto& [key, g] : grads.tensors) {
        auto& w = weights.at(key).data;
        auto& v = state.velocity[key];
        if (v.empty()) v.assign(w.size(), 0.0f);
        for (std::size_t j = 0; j < w.size(); ++j) {
            if (!g.active[j]) continue;
            v[j] = mom * v[j] + g.grad[j] + wd * w[j];
            w[j] -= lr * v[j];
        }
    }
}

std::vector<std::int32_t> argmax_rows(std::span<const float> logits, std::int64_t classes) {
    const auto n = static_cast<std::int64_t>(logits.size()) / classes;
    std::vector<std::int32_t> out(n);
    for (std::int64_t b = 0; b < n; ++b) {
        const float* z = logits.data() + b * classes;
        out[b] = static_cast<std::int32_t>(std::max_element(z, z + classes) - z);
    }
    return out;
}

} // namespace bnas
