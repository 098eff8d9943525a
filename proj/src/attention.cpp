// Copyright (c) 2026 The attnforge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "attnforge/attention.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "attnforge/gtf.hpp"
#include "attnforge/ops.hpp"

namespace attnforge::att {

namespace {

constexpr double kBnEps = 1e-5;

struct NamedShape {
    std::string name;
    std::vector<int64_t> shape;
};

// Canonical parameter/buffer layout per mechanism. Everything that counts,
// initializes, serializes or replays a module walks this single enumeration.
void enumerate_tensors(int64_t C, const AttentionConfig& cfg, std::vector<NamedShape>& params,
                       std::vector<NamedShape>& buffers) {
    const int64_t r = cfg.reduction;
    const int64_t cr = C / r;
    const int64_t k = cfg.spatial_kernel;
    const int64_t g = cfg.groups;
    switch (cfg.mechanism) {
        case Mechanism::gam:
            if (cfg.channel_enabled) {
                params.push_back({"channel.w1", {C, cr}});
                params.push_back({"channel.b1", {cr}});
                params.push_back({"channel.w2", {cr, C}});
                params.push_back({"channel.b2", {C}});
            }
            if (cfg.spatial_enabled) {
                params.push_back({"spatial.conv1.weight", {cr, C / g, k, k}});
                params.push_back({"spatial.bn1.gamma", {cr}});
                params.push_back({"spatial.bn1.beta", {cr}});
                params.push_back({"spatial.conv2.weight", {C, cr / g, k, k}});
                params.push_back({"spatial.bn2.gamma", {C}});
                params.push_back({"spatial.bn2.beta", {C}});
                buffers.push_back({"spatial.bn1.mean", {cr}});
                buffers.push_back({"spatial.bn1.var", {cr}});
                buffers.push_back({"spatial.bn2.mean", {C}});
                buffers.push_back({"spatial.bn2.var", {C}});
            }
            break;
        case Mechanism::se:
            params.push_back({"se.w1", {C, cr}});
            params.push_back({"se.w2", {cr, C}});
            break;
        case Mechanism::cbam: {
            params.push_back({"cbam.mlp.w1", {C, cr}});
            params.push_back({"cbam.mlp.b1", {cr}});
            params.push_back({"cbam.mlp.w2", {cr, C}});
            params.push_back({"cbam.mlp.b2", {C}});
            const int64_t desc = cfg.max_pool_variant ? 1 : 2;  // wmp drops the max map
            params.push_back({"cbam.spatial.conv.weight", {1, desc, k, k}});
            params.push_back({"cbam.spatial.bn.gamma", {1}});
            params.push_back({"cbam.spatial.bn.beta", {1}});
            buffers.push_back({"cbam.spatial.bn.mean", {1}});
            buffers.push_back({"cbam.spatial.bn.var", {1}});
            break;
        }
        case Mechanism::bam:
            params.push_back({"bam.ch.w1", {C, cr}});
            params.push_back({"bam.ch.b1", {cr}});
            params.push_back({"bam.ch.bn.gamma", {cr}});
            params.push_back({"bam.ch.bn.beta", {cr}});
            params.push_back({"bam.ch.w2", {cr, C}});
            params.push_back({"bam.ch.b2", {C}});
            params.push_back({"bam.sp.reduce.weight", {cr, C, 1, 1}});
            params.push_back({"bam.sp.reduce.bias", {cr}});
            params.push_back({"bam.sp.bn0.gamma", {cr}});
            params.push_back({"bam.sp.bn0.beta", {cr}});
            params.push_back({"bam.sp.dil0.weight", {cr, cr, 3, 3}});
            params.push_back({"bam.sp.dil0.bias", {cr}});
            params.push_back({"bam.sp.bn1.gamma", {cr}});
            params.push_back({"bam.sp.bn1.beta", {cr}});
            params.push_back({"bam.sp.dil1.weight", {cr, cr, 3, 3}});
            params.push_back({"bam.sp.dil1.bias", {cr}});
            params.push_back({"bam.sp.bn2.gamma", {cr}});
            params.push_back({"bam.sp.bn2.beta", {cr}});
            params.push_back({"bam.sp.final.weight", {1, cr, 1, 1}});
            params.push_back({"bam.sp.final.bias", {1}});
            buffers.push_back({"bam.ch.bn.mean", {cr}});
            buffers.push_back({"bam.ch.bn.var", {cr}});
            buffers.push_back({"bam.sp.bn0.mean", {cr}});
            buffers.push_back({"bam.sp.bn0.var", {cr}});
            buffers.push_back({"bam.sp.bn1.mean", {cr}});
            buffers.push_back({"bam.sp.bn1.var", {cr}});
            buffers.push_back({"bam.sp.bn2.mean", {cr}});
            buffers.push_back({"bam.sp.bn2.var", {cr}});
            break;
    }
}

bool name_contains(const std::string& name, const char* piece) {
    return name.find(piece) != std::string::npos;
}

// -- backends ----------------------------------------------------------
//
// The module math is written once, templated over a backend: the eager
// backend evaluates kernels directly, the tape backend records the same
// kernel sequence onto an autodiff tape (so recorded and direct forwards
// are bit-identical).

struct EagerBackend {
    using V = Tensor;
    const AttentionModule* m;

    V get(std::string_view name) const { return m->param(name); }
    const Tensor& buf(std::string_view name) const { return m->buffer(name); }
    const Tensor& val(const V& v) const { return v; }

    V permute(const V& x, std::span<const int64_t> axes) { return attnforge::permute(x, axes); }
    V reshape(const V& x, std::vector<int64_t> s) { return attnforge::reshape(x, std::move(s)); }
    V matmul(const V& a, const V& b) { return attnforge::matmul(a, b); }
    V add_rowvec(const V& x, const V& v) { return attnforge::add_rowvec(x, v); }
    V conv2d(const V& x, const V& w, const std::optional<V>& bias, const Conv2dParams& p) {
        return attnforge::conv2d(x, w, bias ? &*bias : nullptr, p);
    }
    V batchnorm(const V& x, const V& gamma, const V& beta, const Tensor& mean, const Tensor& var,
                double eps) {
        return attnforge::batchnorm_infer(x, gamma, beta, mean, var, eps);
    }
    V relu(const V& x) { return attnforge::relu(x); }
    V sigmoid(const V& x) { return attnforge::sigmoid(x); }
    V maxpool(const V& x, const Pool2dParams& p) { return attnforge::maxpool2d(x, p); }
    V global_avgpool(const V& x) { return attnforge::global_avgpool(x); }
    V global_maxpool(const V& x) { return attnforge::global_maxpool(x); }
    V channel_shuffle(const V& x, int64_t g) { return attnforge::channel_shuffle(x, g); }
    V channel_mean(const V& x) { return attnforge::channel_mean(x); }
    V channel_max(const V& x) { return attnforge::channel_max(x); }
    V concat_channels(const V& a, const V& b) { return attnforge::concat_channels(a, b); }
    V upsample2x(const V& x) { return attnforge::upsample_nearest2x(x); }
    V broadcast_to(const V& x, const std::vector<int64_t>& s) { return attnforge::broadcast_to(x, s); }
    V add(const V& a, const V& b) { return attnforge::add(a, b); }
    V mul(const V& a, const V& b) { return attnforge::mul(a, b); }
    V add_scalar(const V& x, double s) { return attnforge::add_scalar(x, s); }
};

struct TapeBackend {
    using V = ad::Var;
    ad::Tape* tape;
    std::unordered_map<std::string, ad::Var> vars;
    const std::vector<std::pair<std::string, Tensor>>* buffers;

    V get(std::string_view name) const {
        auto it = vars.find(std::string(name));
        if (it == vars.end()) throw std::logic_error("TapeBackend: unknown parameter " + std::string(name));
        return it->second;
    }
    const Tensor& buf(std::string_view name) const {
        for (const auto& [n, t] : *buffers) {
            if (n == name) return t;
        }
        throw std::logic_error("TapeBackend: unknown buffer " + std::string(name));
    }
    const Tensor& val(V v) const { return tape->value(v); }

    V permute(V x, std::span<const int64_t> axes) { return tape->permute(x, axes); }
    V reshape(V x, std::vector<int64_t> s) { return tape->reshape(x, std::move(s)); }
    V matmul(V a, V b) { return tape->matmul(a, b); }
    V add_rowvec(V x, V v) { return tape->add_rowvec(x, v); }
    V conv2d(V x, V w, const std::optional<V>& bias, const Conv2dParams& p) {
        return tape->conv2d(x, w, bias, p);
    }
    V batchnorm(V x, V gamma, V beta, const Tensor& mean, const Tensor& var, double eps) {
        return tape->batchnorm(x, gamma, beta, mean, var, eps);
    }
    V relu(V x) { return tape->relu(x); }
    V sigmoid(V x) { return tape->sigmoid(x); }
    V maxpool(V x, const Pool2dParams& p) { return tape->maxpool(x, p); }
    V global_avgpool(V x) { return tape->global_avgpool(x); }
    V global_maxpool(V x) { return tape->global_maxpool(x); }
    V channel_shuffle(V x, int64_t g) { return tape->channel_shuffle(x, g); }
    V channel_mean(V x) { return tape->channel_mean(x); }
    V channel_max(V x) { return tape->channel_max(x); }
    V concat_channels(V a, V b) { return tape->concat_channels(a, b); }
    V upsample2x(V x) { return tape->upsample_nearest2x(x); }
    V broadcast_to(V x, const std::vector<int64_t>& s) { return tape->broadcast_to(x, s); }
    V add(V a, V b) { return tape->add(a, b); }
    V mul(V a, V b) { return tape->mul(a, b); }
    V add_scalar(V x, double s) { return tape->add_scalar(x, s); }
};

constexpr int64_t kToNhwc[4] = {0, 2, 3, 1};
constexpr int64_t kToNchw[4] = {0, 3, 1, 2};

// Channel gate of GAM: permute to NHWC, run the C -> C/r -> C MLP at every
// spatial position, permute back, squash. The gate varies spatially.
template <class B>
typename B::V gam_channel_gate_t(B& b, typename B::V x) {
    using V = typename B::V;
    V h = b.permute(x, std::span<const int64_t>(kToNhwc, 4));
    h = b.add_rowvec(b.matmul(h, b.get("channel.w1")), b.get("channel.b1"));
    h = b.relu(h);
    h = b.add_rowvec(b.matmul(h, b.get("channel.w2")), b.get("channel.b2"));
    h = b.permute(h, std::span<const int64_t>(kToNchw, 4));
    return b.sigmoid(h);
}

void check_pooled_extents(const std::vector<int64_t>& shape, const AttentionConfig& cfg) {
    if (!(cfg.max_pool_variant || cfg.stride2_variant)) return;
    const int64_t H = shape[2], W = shape[3];
    if (H < 2 || W < 2 || H % 2 != 0 || W % 2 != 0) {
        throw std::invalid_argument(
            "gam spatial: pooled/strided variant needs even spatial extents >= 2, got " +
            shape_to_string(shape));
    }
}

// Spatial gate of GAM: two k x k convolutions with BN, optionally grouped
// with a channel shuffle in between. The pooled/strided variants halve the
// resolution of the conv stack and upsample the gate back.
template <class B>
typename B::V gam_spatial_gate_t(B& b, typename B::V f2, const AttentionConfig& cfg) {
    using V = typename B::V;
    check_pooled_extents(b.val(f2).shape(), cfg);

    V cur = f2;
    if (cfg.max_pool_variant) {
        cur = b.maxpool(cur, Pool2dParams{2, 2, 2, 2, 0, 0});
    }
    Conv2dParams p1;
    p1.pad_h = p1.pad_w = (cfg.spatial_kernel - 1) / 2;
    p1.groups = cfg.groups;
    if (cfg.stride2_variant) p1.stride_h = p1.stride_w = 2;
    cur = b.conv2d(cur, b.get("spatial.conv1.weight"), std::nullopt, p1);
    cur = b.batchnorm(cur, b.get("spatial.bn1.gamma"), b.get("spatial.bn1.beta"),
                      b.buf("spatial.bn1.mean"), b.buf("spatial.bn1.var"), kBnEps);
    cur = b.relu(cur);
    if (cfg.groups > 1) cur = b.channel_shuffle(cur, cfg.groups);
    Conv2dParams p2;
    p2.pad_h = p2.pad_w = (cfg.spatial_kernel - 1) / 2;
    p2.groups = cfg.groups;
    cur = b.conv2d(cur, b.get("spatial.conv2.weight"), std::nullopt, p2);
    cur = b.batchnorm(cur, b.get("spatial.bn2.gamma"), b.get("spatial.bn2.beta"),
                      b.buf("spatial.bn2.mean"), b.buf("spatial.bn2.var"), kBnEps);
    if (cfg.max_pool_variant || cfg.stride2_variant) cur = b.upsample2x(cur);
    return b.sigmoid(cur);
}

template <class B>
typename B::V gam_apply_t(B& b, const AttentionConfig& cfg, typename B::V x) {
    using V = typename B::V;
    V cur = x;
    if (cfg.channel_enabled) {
        V mc = gam_channel_gate_t(b, cur);
        cur = b.mul(mc, cur);
    }
    if (cfg.spatial_enabled) {
        V ms = gam_spatial_gate_t(b, cur, cfg);
        cur = b.mul(ms, cur);
    }
    return cur;
}

template <class B>
typename B::V se_apply_t(B& b, typename B::V x) {
    using V = typename B::V;
    const auto& shape = b.val(x).shape();
    const int64_t N = shape[0], C = shape[1];
    V flat = b.reshape(b.global_avgpool(x), {N, C});
    V h = b.relu(b.matmul(flat, b.get("se.w1")));
    V gate = b.sigmoid(b.matmul(h, b.get("se.w2")));
    return b.mul(x, b.broadcast_to(b.reshape(gate, {N, C, 1, 1}), shape));
}

template <class B>
typename B::V cbam_apply_t(B& b, const AttentionConfig& cfg, typename B::V x) {
    using V = typename B::V;
    const auto& shape = b.val(x).shape();
    const int64_t N = shape[0], C = shape[1];

    auto mlp = [&](V v) {
        V h = b.add_rowvec(b.matmul(v, b.get("cbam.mlp.w1")), b.get("cbam.mlp.b1"));
        h = b.relu(h);
        return b.add_rowvec(b.matmul(h, b.get("cbam.mlp.w2")), b.get("cbam.mlp.b2"));
    };
    V pre = mlp(b.reshape(b.global_avgpool(x), {N, C}));
    if (!cfg.max_pool_variant) {
        pre = b.add(pre, mlp(b.reshape(b.global_maxpool(x), {N, C})));
    }
    V cgate = b.sigmoid(pre);
    V x1 = b.mul(x, b.broadcast_to(b.reshape(cgate, {N, C, 1, 1}), shape));

    V desc = cfg.max_pool_variant ? b.channel_mean(x1)
                                  : b.concat_channels(b.channel_max(x1), b.channel_mean(x1));
    Conv2dParams pc;
    pc.pad_h = pc.pad_w = (cfg.spatial_kernel - 1) / 2;
    V s = b.conv2d(desc, b.get("cbam.spatial.conv.weight"), std::nullopt, pc);
    s = b.batchnorm(s, b.get("cbam.spatial.bn.gamma"), b.get("cbam.spatial.bn.beta"),
                    b.buf("cbam.spatial.bn.mean"), b.buf("cbam.spatial.bn.var"), kBnEps);
    V sgate = b.sigmoid(s);
    return b.mul(x1, b.broadcast_to(sgate, shape));
}

template <class B>
typename B::V bam_apply_t(B& b, const AttentionConfig& cfg, typename B::V x) {
    using V = typename B::V;
    const auto& shape = b.val(x).shape();
    const int64_t N = shape[0], C = shape[1];

    // channel branch: squeeze -> FC -> BN -> relu -> FC, broadcast over H, W
    V h = b.reshape(b.global_avgpool(x), {N, C});
    h = b.add_rowvec(b.matmul(h, b.get("bam.ch.w1")), b.get("bam.ch.b1"));
    h = b.batchnorm(h, b.get("bam.ch.bn.gamma"), b.get("bam.ch.bn.beta"), b.buf("bam.ch.bn.mean"),
                    b.buf("bam.ch.bn.var"), kBnEps);
    h = b.relu(h);
    h = b.add_rowvec(b.matmul(h, b.get("bam.ch.w2")), b.get("bam.ch.b2"));
    V ch = b.reshape(h, {N, C, 1, 1});

    // spatial branch: 1x1 reduce, two dilated 3x3, 1x1 to a single map
    Conv2dParams p1x1;
    V s = b.conv2d(x, b.get("bam.sp.reduce.weight"), b.get("bam.sp.reduce.bias"), p1x1);
    s = b.batchnorm(s, b.get("bam.sp.bn0.gamma"), b.get("bam.sp.bn0.beta"), b.buf("bam.sp.bn0.mean"),
                    b.buf("bam.sp.bn0.var"), kBnEps);
    s = b.relu(s);
    Conv2dParams pd;
    pd.dilation_h = pd.dilation_w = cfg.bam_dilation;
    pd.pad_h = pd.pad_w = cfg.bam_dilation;
    s = b.conv2d(s, b.get("bam.sp.dil0.weight"), b.get("bam.sp.dil0.bias"), pd);
    s = b.batchnorm(s, b.get("bam.sp.bn1.gamma"), b.get("bam.sp.bn1.beta"), b.buf("bam.sp.bn1.mean"),
                    b.buf("bam.sp.bn1.var"), kBnEps);
    s = b.relu(s);
    s = b.conv2d(s, b.get("bam.sp.dil1.weight"), b.get("bam.sp.dil1.bias"), pd);
    s = b.batchnorm(s, b.get("bam.sp.bn2.gamma"), b.get("bam.sp.bn2.beta"), b.buf("bam.sp.bn2.mean"),
                    b.buf("bam.sp.bn2.var"), kBnEps);
    s = b.relu(s);
    s = b.conv2d(s, b.get("bam.sp.final.weight"), b.get("bam.sp.final.bias"), p1x1);

    V gate = b.sigmoid(b.add(b.broadcast_to(ch, shape), b.broadcast_to(s, shape)));
    return b.mul(x, b.add_scalar(gate, 1.0));  // F * (1 + gate)
}

template <class B>
typename B::V attention_apply_t(B& b, const AttentionConfig& cfg, typename B::V x) {
    switch (cfg.mechanism) {
        case Mechanism::gam: return gam_apply_t(b, cfg, x);
        case Mechanism::se: return se_apply_t(b, x);
        case Mechanism::cbam: return cbam_apply_t(b, cfg, x);
        case Mechanism::bam: return bam_apply_t(b, cfg, x);
    }
    throw std::logic_error("attention_apply: unreachable");
}

}  // namespace

std::string to_string(Mechanism m) {
    switch (m) {
        case Mechanism::gam: return "gam";
        case Mechanism::se: return "se";
        case Mechanism::bam: return "bam";
        case Mechanism::cbam: return "cbam";
    }
    return "?";
}

Mechanism mechanism_from_string(std::string_view s) {
    if (s == "gam") return Mechanism::gam;
    if (s == "se") return Mechanism::se;
    if (s == "bam") return Mechanism::bam;
    if (s == "cbam") return Mechanism::cbam;
    throw std::invalid_argument("unknown attention mechanism '" + std::string(s) + "'");
}

void validate_attention_site(int64_t channels, const AttentionConfig& cfg) {
    if (cfg.reduction < 1) {
        throw std::invalid_argument("attention: reduction ratio must be >= 1 (unresolved config?)");
    }
    if (channels % cfg.reduction != 0) {
        throw std::invalid_argument("attention: C=" + std::to_string(channels) +
                                    " not divisible by r=" + std::to_string(cfg.reduction));
    }
    if (cfg.mechanism == Mechanism::gam) {
        if (!cfg.channel_enabled && !cfg.spatial_enabled) {
            throw std::invalid_argument("gam: both channel and spatial submodules disabled");
        }
        if (cfg.groups < 1) throw std::invalid_argument("gam: groups must be >= 1");
        if (cfg.groups > 1) {
            const int64_t cr = channels / cfg.reduction;
            if (channels % cfg.groups != 0 || cr % cfg.groups != 0) {
                throw std::invalid_argument("gam: groups=" + std::to_string(cfg.groups) +
                                            " must divide both C=" + std::to_string(channels) +
                                            " and C/r=" + std::to_string(cr));
            }
        }
        if (cfg.spatial_kernel < 1 || cfg.spatial_kernel % 2 == 0) {
            throw std::invalid_argument("gam: spatial kernel must be odd");
        }
    }
}

AttentionModule AttentionModule::init(int64_t channels, const AttentionConfig& cfg, Rng& rng,
                                      InitScheme scheme) {
    validate_attention_site(channels, cfg);

    AttentionModule m;
    m.cfg_ = cfg;
    m.channels_ = channels;

    std::vector<NamedShape> pshapes, bshapes;
    enumerate_tensors(channels, cfg, pshapes, bshapes);

    for (auto& [name, shape] : pshapes) {
        Tensor t;
        if (name_contains(name, "bn") && name_contains(name, "gamma")) {
            t = scheme == InitScheme::uniform_small
                    ? rng.uniform_tensor(shape, 0.9, 1.1)
                    : Tensor::ones(shape);
        } else if (name_contains(name, "bn") && name_contains(name, "beta")) {
            t = scheme == InitScheme::uniform_small ? rng.uniform_tensor(shape, -0.1, 0.1)
                                                    : Tensor::zeros(shape);
        } else if (name_contains(name, ".b") && !name_contains(name, "weight")) {
            // biases (b1/b2/bias)
            t = scheme == InitScheme::uniform_small ? rng.uniform_tensor(shape, -0.1, 0.1)
                                                    : Tensor::zeros(shape);
        } else if (scheme == InitScheme::uniform_small) {
            t = rng.uniform_tensor(shape, -0.1, 0.1);
        } else {
            // fan-in for (O, I, Kh, Kw) conv weights and (In, Out) matrices
            int64_t fan = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
            t = rng.normal_tensor(shape, 0.0, std::sqrt(2.0 / static_cast<double>(fan)));
        }
        m.params_.emplace_back(name, std::move(t));
    }
    for (auto& [name, shape] : bshapes) {
        m.buffers_.emplace_back(name, name_contains(name, "var") ? Tensor::ones(shape)
                                                                 : Tensor::zeros(shape));
    }
    return m;
}

const Tensor& AttentionModule::param(std::string_view name) const {
    for (const auto& [n, t] : params_) {
        if (n == name) return t;
    }
    throw std::invalid_argument("attention: no parameter named '" + std::string(name) + "'");
}

const Tensor& AttentionModule::buffer(std::string_view name) const {
    for (const auto& [n, t] : buffers_) {
        if (n == name) return t;
    }
    throw std::invalid_argument("attention: no buffer named '" + std::string(name) + "'");
}

void AttentionModule::set_param(std::string_view name, Tensor value) {
    for (auto& [n, t] : params_) {
        if (n == name) {
            if (!t.same_shape(value)) {
                throw std::invalid_argument("set_param: shape mismatch for '" + std::string(name) + "'");
            }
            t = std::move(value);
            return;
        }
    }
    throw std::invalid_argument("attention: no parameter named '" + std::string(name) + "'");
}

int64_t AttentionModule::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) {
        (void)name;
        n += t.numel();
    }
    return n;
}

namespace {

void check_module_input(const AttentionModule& m, const Tensor& x) {
    if (x.rank() != 4) {
        throw std::invalid_argument("attention forward: expected NCHW input, got " + x.shape_str());
    }
    if (x.extent(1) != m.channels()) {
        throw std::invalid_argument("attention forward: channel mismatch, module C=" +
                                    std::to_string(m.channels()) + " input " + x.shape_str());
    }
}

}  // namespace

Tensor AttentionModule::forward(const Tensor& x) const {
    check_module_input(*this, x);
    if (cfg_.gate_override) return x;
    EagerBackend b{this};
    return attention_apply_t(b, cfg_, x);
}

Tensor AttentionModule::gam_channel_gate(const Tensor& f1) const {
    check_module_input(*this, f1);
    if (cfg_.mechanism != Mechanism::gam || !cfg_.channel_enabled) {
        throw std::invalid_argument("gam_channel: module has no channel submodule");
    }
    EagerBackend b{this};
    return gam_channel_gate_t(b, f1);
}

std::pair<Tensor, Tensor> AttentionModule::gam_channel(const Tensor& f1) const {
    Tensor mc = gam_channel_gate(f1);
    return {mc, mul(mc, f1)};
}

Tensor AttentionModule::gam_spatial_gate(const Tensor& f2) const {
    check_module_input(*this, f2);
    if (cfg_.mechanism != Mechanism::gam || !cfg_.spatial_enabled) {
        throw std::invalid_argument("gam_spatial: module has no spatial submodule");
    }
    EagerBackend b{this};
    return gam_spatial_gate_t(b, f2, cfg_);
}

Tensor AttentionModule::gam_spatial(const Tensor& f2) const {
    return mul(gam_spatial_gate(f2), f2);
}

ad::Program AttentionModule::program() const {
    const AttentionConfig cfg = cfg_;
    std::vector<std::string> names;
    names.reserve(params_.size());
    for (const auto& [n, t] : params_) {
        (void)t;
        names.push_back(n);
    }
    const auto buffers = buffers_;
    return [cfg, names, buffers](ad::Tape& tape, const std::vector<ad::Var>& vars) -> ad::Var {
        if (vars.size() != names.size() + 1) {
            throw std::invalid_argument("attention program: expected input + " +
                                        std::to_string(names.size()) + " parameter leaves");
        }
        if (cfg.gate_override) return vars[0];
        TapeBackend b{&tape, {}, &buffers};
        for (size_t i = 0; i < names.size(); ++i) b.vars.emplace(names[i], vars[i + 1]);
        return attention_apply_t(b, cfg, vars[0]);
    };
}

std::vector<ad::GradCheckInput> AttentionModule::gradcheck_inputs(const Tensor& x) const {
    std::vector<ad::GradCheckInput> inputs;
    inputs.push_back({"input", x});
    for (const auto& [n, t] : params_) inputs.push_back({n, t});
    return inputs;
}

void AttentionModule::save_bundle(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    auto file_of = [](std::string name) {
        std::replace(name.begin(), name.end(), '.', '_');
        return name + ".gtf";
    };

    nlohmann::json j;
    j["mechanism"] = to_string(cfg_.mechanism);
    j["channels"] = channels_;
    j["r"] = cfg_.reduction;
    j["g"] = cfg_.groups;
    j["channel_enabled"] = cfg_.channel_enabled;
    j["spatial_enabled"] = cfg_.spatial_enabled;
    j["max_pool_variant"] = cfg_.max_pool_variant;
    j["stride2_variant"] = cfg_.stride2_variant;
    j["spatial_kernel"] = cfg_.spatial_kernel;
    j["bam_dilation"] = cfg_.bam_dilation;
    j["tensors"] = nlohmann::json::object();
    j["buffers"] = nlohmann::json::object();
    for (const auto& [name, t] : params_) {
        const std::string f = file_of(name);
        write_gtf((fs::path(dir) / f).string(), t);
        j["tensors"][name] = f;
    }
    for (const auto& [name, t] : buffers_) {
        const std::string f = file_of(name);
        write_gtf((fs::path(dir) / f).string(), t);
        j["buffers"][name] = f;
    }
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("save_bundle: cannot write manifest in " + dir);
}

AttentionModule AttentionModule::load_bundle(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("load_bundle: missing manifest.json in " + dir);
    nlohmann::json j = nlohmann::json::parse(in);

    AttentionConfig cfg;
    cfg.mechanism = mechanism_from_string(j.at("mechanism").get<std::string>());
    cfg.reduction = j.at("r").get<int64_t>();
    cfg.groups = j.at("g").get<int64_t>();
    cfg.channel_enabled = j.at("channel_enabled").get<bool>();
    cfg.spatial_enabled = j.at("spatial_enabled").get<bool>();
    cfg.max_pool_variant = j.at("max_pool_variant").get<bool>();
    cfg.stride2_variant = j.at("stride2_variant").get<bool>();
    cfg.spatial_kernel = j.at("spatial_kernel").get<int64_t>();
    cfg.bam_dilation = j.at("bam_dilation").get<int64_t>();
    const int64_t channels = j.at("channels").get<int64_t>();

    AttentionModule m;
    m.cfg_ = cfg;
    m.channels_ = channels;

    std::vector<NamedShape> pshapes, bshapes;
    enumerate_tensors(channels, cfg, pshapes, bshapes);
    for (const auto& [name, shape] : pshapes) {
        const std::string f = j.at("tensors").at(name).get<std::string>();
        Tensor t = read_gtf((fs::path(dir) / f).string());
        if (t.shape() != shape) {
            throw std::runtime_error("load_bundle: unexpected shape for '" + name + "'");
        }
        m.params_.emplace_back(name, std::move(t));
    }
    for (const auto& [name, shape] : bshapes) {
        const std::string f = j.at("buffers").at(name).get<std::string>();
        Tensor t = read_gtf((fs::path(dir) / f).string());
        if (t.shape() != shape) {
            throw std::runtime_error("load_bundle: unexpected shape for '" + name + "'");
        }
        m.buffers_.emplace_back(name, std::move(t));
    }
    return m;
}

int64_t attention_param_count(int64_t channels, const AttentionConfig& cfg) {
    validate_attention_site(channels, cfg);
    std::vector<NamedShape> pshapes, bshapes;
    enumerate_tensors(channels, cfg, pshapes, bshapes);
    int64_t n = 0;
    for (const auto& [name, shape] : pshapes) {
        (void)name;
        n += shape_numel(shape);
    }
    return n;
}

int64_t attention_mac_count(int64_t channels, int64_t height, int64_t width,
                            const AttentionConfig& cfg) {
    validate_attention_site(channels, cfg);
    const int64_t C = channels, r = cfg.reduction, cr = C / r, g = cfg.groups;
    const int64_t k2 = cfg.spatial_kernel * cfg.spatial_kernel;
    int64_t macs = 0;
    switch (cfg.mechanism) {
        case Mechanism::gam: {
            if (cfg.channel_enabled) macs += 2 * C * cr * height * width;
            if (cfg.spatial_enabled) {
                int64_t h = height, w = width;
                if (cfg.max_pool_variant || cfg.stride2_variant) {
                    h = height / 2;
                    w = width / 2;
                }
                macs += k2 * (C / g) * cr * h * w;   // conv1 (at reduced size when strided)
                macs += cr * h * w;                  // bn1
                macs += k2 * (cr / g) * C * h * w;   // conv2
                macs += C * h * w;                   // bn2
            }
            break;
        }
        case Mechanism::se:
            macs += 2 * C * cr;
            break;
        case Mechanism::cbam: {
            const int64_t passes = cfg.max_pool_variant ? 1 : 2;
            macs += passes * 2 * C * cr;
            const int64_t desc = cfg.max_pool_variant ? 1 : 2;
            macs += k2 * desc * height * width;  // spatial conv to 1 map
            macs += height * width;              // spatial bn
            break;
        }
        case Mechanism::bam: {
            macs += C * cr + cr + cr * C;                     // channel FCs + 1d bn
            macs += height * width * (C * cr + cr);           // 1x1 reduce + bn
            macs += 2 * height * width * (9 * cr * cr + cr);  // dilated 3x3 convs + bns
            macs += height * width * cr;                      // final 1x1 to one map
            break;
        }
    }
    return macs;
}

std::pair<Tensor, Tensor> gam_channel_forward(const Tensor& f1, const AttentionModule& m) {
    return m.gam_channel(f1);
}

Tensor gam_spatial_forward(const Tensor& f2, const AttentionModule& m) { return m.gam_spatial(f2); }

Tensor attach_gam(const Tensor& f1, const AttentionModule& m) {
    if (m.config().mechanism != Mechanism::gam) {
        throw std::invalid_argument("attach_gam: module is not a GAM module");
    }
    return m.forward(f1);
}

Tensor se_forward(const Tensor& f, const AttentionModule& m) { return m.forward(f); }
Tensor cbam_forward(const Tensor& f, const AttentionModule& m) { return m.forward(f); }
Tensor bam_forward(const Tensor& f, const AttentionModule& m) { return m.forward(f); }

}  // namespace attnforge::att
