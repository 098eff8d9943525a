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

#include "attnforge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace attnforge::ad {

namespace {

bool all_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t[i])) return false;
    }
    return true;
}

}  // namespace

Var Tape::push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const TapeNode& Tape::node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int32_t>(nodes_.size())) {
        throw std::invalid_argument("Tape: variable does not belong to this tape");
    }
    return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::leaf(Tensor value, std::string name) {
    TapeNode n;
    n.op = OpKind::leaf;
    n.value = std::move(value);
    Var v = push(std::move(n));
    leaves_.emplace_back(std::move(name), v.id);
    return v;
}

Var Tape::permute(Var x, std::span<const int64_t> axes) {
    TapeNode n;
    n.op = OpKind::permute;
    n.inputs = {x.id};
    n.axes.assign(axes.begin(), axes.end());
    n.value = attnforge::permute(value(x), axes);
    return push(std::move(n));
}

Var Tape::reshape(Var x, std::vector<int64_t> new_shape) {
    TapeNode n;
    n.op = OpKind::reshape;
    n.inputs = {x.id};
    n.axes = value(x).shape();  // original shape, restored by the backward rule
    n.value = attnforge::reshape(value(x), std::move(new_shape));
    return push(std::move(n));
}

Var Tape::conv2d(Var x, Var w, std::optional<Var> bias, const Conv2dParams& p) {
    TapeNode n;
    n.op = OpKind::conv2d;
    n.inputs = {x.id, w.id};
    if (bias) n.inputs.push_back(bias->id);
    n.conv = p;
    n.value = attnforge::conv2d(value(x), value(w), bias ? &value(*bias) : nullptr, p);
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
    TapeNode n;
    n.op = OpKind::matmul;
    n.inputs = {a.id, b.id};
    n.value = attnforge::matmul(value(a), value(b));
    return push(std::move(n));
}

Var Tape::batchnorm(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double eps) {
    TapeNode n;
    n.op = OpKind::batchnorm;
    n.inputs = {x.id, gamma.id, beta.id};
    n.bn_mean = mean;
    n.bn_var = var;
    n.bn_eps = eps;
    n.value = attnforge::batchnorm_infer(value(x), value(gamma), value(beta), mean, var, eps);
    return push(std::move(n));
}

Var Tape::relu(Var x) {
    TapeNode n;
    n.op = OpKind::relu;
    n.inputs = {x.id};
    n.value = attnforge::relu(value(x));
    return push(std::move(n));
}

Var Tape::relu6(Var x) {
    TapeNode n;
    n.op = OpKind::relu6;
    n.inputs = {x.id};
    n.value = attnforge::relu6(value(x));
    return push(std::move(n));
}

Var Tape::sigmoid(Var x) {
    TapeNode n;
    n.op = OpKind::sigmoid;
    n.inputs = {x.id};
    n.value = attnforge::sigmoid(value(x));
    return push(std::move(n));
}

namespace {

// Argmax routing for max pooling: flat input offset per output element,
// first maximum in row-major scan order on ties.
std::vector<int64_t> maxpool_routing(const Tensor& t, const Pool2dParams& p, const Tensor& out) {
    const int64_t N = t.extent(0), C = t.extent(1), H = t.extent(2), W = t.extent(3);
    const int64_t Ho = out.extent(2), Wo = out.extent(3);
    std::vector<int64_t> routing(static_cast<size_t>(out.numel()), -1);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* s = &t.data()[static_cast<size_t>(nc * H * W)];
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                double best = -std::numeric_limits<double>::infinity();
                int64_t best_off = -1;
                for (int64_t kh = 0; kh < p.kernel_h; ++kh) {
                    const int64_t ih = oh * p.stride_h - p.pad_h + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t kw = 0; kw < p.kernel_w; ++kw) {
                        const int64_t iw = ow * p.stride_w - p.pad_w + kw;
                        if (iw < 0 || iw >= W) continue;
                        if (s[ih * W + iw] > best) {
                            best = s[ih * W + iw];
                            best_off = nc * H * W + ih * W + iw;
                        }
                    }
                }
                routing[static_cast<size_t>((nc * Ho + oh) * Wo + ow)] = best_off;
            }
        }
    }
    return routing;
}

}  // namespace

Var Tape::maxpool(Var x, const Pool2dParams& p) {
    TapeNode n;
    n.op = OpKind::maxpool;
    n.inputs = {x.id};
    n.pool = p;
    n.value = attnforge::maxpool2d(value(x), p);
    n.routing = maxpool_routing(value(x), p, n.value);
    return push(std::move(n));
}

Var Tape::avgpool(Var x, const Pool2dParams& p) {
    TapeNode n;
    n.op = OpKind::avgpool;
    n.inputs = {x.id};
    n.pool = p;
    n.value = attnforge::avgpool2d(value(x), p);
    return push(std::move(n));
}

Var Tape::global_maxpool(Var x) {
    TapeNode n;
    n.op = OpKind::global_maxpool;
    n.inputs = {x.id};
    n.value = attnforge::global_maxpool(value(x));
    const Tensor& t = value(x);
    const int64_t hw = t.extent(2) * t.extent(3);
    n.routing.resize(static_cast<size_t>(n.value.numel()));
    for (int64_t nc = 0; nc < n.value.numel(); ++nc) {
        const double* s = &t.data()[static_cast<size_t>(nc * hw)];
        int64_t best = 0;
        for (int64_t i = 1; i < hw; ++i) {
            if (s[i] > s[best]) best = i;
        }
        n.routing[static_cast<size_t>(nc)] = nc * hw + best;
    }
    return push(std::move(n));
}

Var Tape::global_avgpool(Var x) {
    TapeNode n;
    n.op = OpKind::global_avgpool;
    n.inputs = {x.id};
    n.value = attnforge::global_avgpool(value(x));
    return push(std::move(n));
}

Var Tape::channel_shuffle(Var x, int64_t groups) {
    TapeNode n;
    n.op = OpKind::channel_shuffle;
    n.inputs = {x.id};
    n.groups = groups;
    n.value = attnforge::channel_shuffle(value(x), groups);
    return push(std::move(n));
}

Var Tape::channel_mean(Var x) {
    TapeNode n;
    n.op = OpKind::channel_mean;
    n.inputs = {x.id};
    n.value = attnforge::channel_mean(value(x));
    return push(std::move(n));
}

Var Tape::channel_max(Var x) {
    TapeNode n;
    n.op = OpKind::channel_max;
    n.inputs = {x.id};
    n.value = attnforge::channel_max(value(x));
    const Tensor& t = value(x);
    const int64_t N = t.extent(0), C = t.extent(1), hw = t.extent(2) * t.extent(3);
    n.routing.resize(static_cast<size_t>(n.value.numel()));
    for (int64_t nn = 0; nn < N; ++nn) {
        for (int64_t i = 0; i < hw; ++i) {
            int64_t best_c = 0;
            for (int64_t c = 1; c < C; ++c) {
                if (t[(nn * C + c) * hw + i] > t[(nn * C + best_c) * hw + i]) best_c = c;
            }
            n.routing[static_cast<size_t>(nn * hw + i)] = (nn * C + best_c) * hw + i;
        }
    }
    return push(std::move(n));
}

Var Tape::concat_channels(Var a, Var b) {
    TapeNode n;
    n.op = OpKind::concat_channels;
    n.inputs = {a.id, b.id};
    n.value = attnforge::concat_channels(value(a), value(b));
    return push(std::move(n));
}

Var Tape::upsample_nearest2x(Var x) {
    TapeNode n;
    n.op = OpKind::upsample2x;
    n.inputs = {x.id};
    n.value = attnforge::upsample_nearest2x(value(x));
    return push(std::move(n));
}

Var Tape::broadcast_to(Var x, const std::vector<int64_t>& shape) {
    TapeNode n;
    n.op = OpKind::broadcast;
    n.inputs = {x.id};
    n.axes = value(x).shape();
    n.value = attnforge::broadcast_to(value(x), shape);
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
    TapeNode n;
    n.op = OpKind::add;
    n.inputs = {a.id, b.id};
    n.value = attnforge::add(value(a), value(b));
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    TapeNode n;
    n.op = OpKind::mul;
    n.inputs = {a.id, b.id};
    n.value = attnforge::mul(value(a), value(b));
    return push(std::move(n));
}

Var Tape::add_scalar(Var x, double s) {
    TapeNode n;
    n.op = OpKind::add_scalar;
    n.inputs = {x.id};
    n.scalar = s;
    n.value = attnforge::add_scalar(value(x), s);
    return push(std::move(n));
}

Var Tape::mul_scalar(Var x, double s) {
    TapeNode n;
    n.op = OpKind::mul_scalar;
    n.inputs = {x.id};
    n.scalar = s;
    n.value = attnforge::mul_scalar(value(x), s);
    return push(std::move(n));
}

Var Tape::add_rowvec(Var x, Var v) {
    TapeNode n;
    n.op = OpKind::add_rowvec;
    n.inputs = {x.id, v.id};
    n.value = attnforge::add_rowvec(value(x), value(v));
    return push(std::move(n));
}

Var Tape::sum_all(Var x) {
    TapeNode n;
    n.op = OpKind::sum_all;
    n.inputs = {x.id};
    n.value = attnforge::sum_all(value(x));
    return push(std::move(n));
}

namespace {

void accumulate(Tensor& dst, const Tensor& src) {
    for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Conv2dParams& p, const Tensor& g,
                     Tensor& dx, Tensor& dw, Tensor* db) {
    const int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const int64_t O = w.extent(0), Cg = w.extent(1), Kh = w.extent(2), Kw = w.extent(3);
    const int64_t Ho = g.extent(2), Wo = g.extent(3);
    const int64_t Og = O / p.groups;
    const double* px = x.data().data();
    const double* pw = w.data().data();
    const double* pg = g.data().data();
    double* pdx = dx.data().data();
    double* pdw = dw.data().data();
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t grp = 0; grp < p.groups; ++grp) {
            const int64_t ic0 = grp * Cg;
            for (int64_t og = 0; og < Og; ++og) {
                const int64_t o = grp * Og + og;
                const double* wo = pw + o * Cg * Kh * Kw;
                double* dwo = pdw + o * Cg * Kh * Kw;
                for (int64_t oh = 0; oh < Ho; ++oh) {
                    const int64_t ih0 = oh * p.stride_h - p.pad_h;
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        const int64_t iw0 = ow * p.stride_w - p.pad_w;
                        const double go = pg[((n * O + o) * Ho + oh) * Wo + ow];
                        if (db) (*db)[o] += go;
                        for (int64_t ic = 0; ic < Cg; ++ic) {
                            const int64_t xbase = ((n * C + ic0 + ic) * H) * W;
                            for (int64_t kh = 0; kh < Kh; ++kh) {
                                const int64_t ih = ih0 + kh * p.dilation_h;
                                if (ih < 0 || ih >= H) continue;
                                for (int64_t kw = 0; kw < Kw; ++kw) {
                                    const int64_t iw = iw0 + kw * p.dilation_w;
                                    if (iw < 0 || iw >= W) continue;
                                    const int64_t xi = xbase + ih * W + iw;
                                    const int64_t wi = (ic * Kh + kh) * Kw + kw;
                                    pdx[xi] += go * wo[wi];
                                    dwo[wi] += go * px[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

std::vector<Tensor> Tape::backward(Var output, const Tensor& seed) const {
    const TapeNode& out_node = node(output);
    if (!seed.same_shape(out_node.value)) {
        throw std::invalid_argument("backward: seed shape " + seed.shape_str() +
                                    " does not match output shape " + out_node.value.shape_str());
    }

    std::vector<Tensor> grad(nodes_.size());
    std::vector<bool> has_grad(nodes_.size(), false);
    auto ensure = [&](int32_t id) -> Tensor& {
        if (!has_grad[static_cast<size_t>(id)]) {
            grad[static_cast<size_t>(id)] = Tensor(nodes_[static_cast<size_t>(id)].value.shape());
            has_grad[static_cast<size_t>(id)] = true;
        }
        return grad[static_cast<size_t>(id)];
    };
    ensure(output.id);
    accumulate(grad[static_cast<size_t>(output.id)], seed);

    for (int32_t id = output.id; id >= 0; --id) {
        if (!has_grad[static_cast<size_t>(id)]) continue;
        const TapeNode& n = nodes_[static_cast<size_t>(id)];
        const Tensor& g = grad[static_cast<size_t>(id)];
        switch (n.op) {
            case OpKind::leaf:
                break;
            case OpKind::permute: {
                auto inv = inverse_permutation(n.axes);
                accumulate(ensure(n.inputs[0]), attnforge::permute(g, inv));
                break;
            }
            case OpKind::reshape: {
                accumulate(ensure(n.inputs[0]), attnforge::reshape(g, n.axes));
                break;
            }
            case OpKind::conv2d: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& w = nodes_[static_cast<size_t>(n.inputs[1])].value;
                Tensor dx(x.shape());
                Tensor dw(w.shape());
                Tensor db = (n.inputs.size() > 2)
                                ? Tensor(nodes_[static_cast<size_t>(n.inputs[2])].value.shape())
                                : Tensor();
                conv2d_backward(x, w, n.conv, g, dx, dw, n.inputs.size() > 2 ? &db : nullptr);
                accumulate(ensure(n.inputs[0]), dx);
                accumulate(ensure(n.inputs[1]), dw);
                if (n.inputs.size() > 2) accumulate(ensure(n.inputs[2]), db);
                break;
            }
            case OpKind::matmul: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                const int64_t K = a.extent(a.rank() - 1);
                const int64_t M = a.extent(a.rank() - 2);
                const int64_t Nc = b.extent(1);
                const int64_t batch = a.numel() / (M * K);
                Tensor da(a.shape());
                Tensor db(b.shape());
                for (int64_t bi = 0; bi < batch; ++bi) {
                    const double* A = &a.data()[static_cast<size_t>(bi * M * K)];
                    const double* G = &g.data()[static_cast<size_t>(bi * M * Nc)];
                    double* dA = &da.data()[static_cast<size_t>(bi * M * K)];
                    for (int64_t m = 0; m < M; ++m) {
                        for (int64_t k = 0; k < K; ++k) {
                            double acc = 0.0;
                            for (int64_t nn = 0; nn < Nc; ++nn) acc += G[m * Nc + nn] * b[k * Nc + nn];
                            dA[m * K + k] += acc;
                        }
                        for (int64_t nn = 0; nn < Nc; ++nn) {
                            const double go = G[m * Nc + nn];
                            for (int64_t k = 0; k < K; ++k) db[k * Nc + nn] += A[m * K + k] * go;
                        }
                    }
                }
                accumulate(ensure(n.inputs[0]), da);
                accumulate(ensure(n.inputs[1]), db);
                break;
            }
            case OpKind::batchnorm: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& gamma = nodes_[static_cast<size_t>(n.inputs[1])].value;
                const int64_t C = x.extent(1);
                const int64_t N = x.extent(0);
                const int64_t hw = (x.rank() == 4) ? x.extent(2) * x.extent(3) : 1;
                Tensor dx(x.shape());
                Tensor dgamma(gamma.shape());
                Tensor dbeta(gamma.shape());
                for (int64_t c = 0; c < C; ++c) {
                    const double inv_sd = 1.0 / std::sqrt(n.bn_var[c] + n.bn_eps);
                    const double scale = gamma[c] * inv_sd;
                    for (int64_t nn = 0; nn < N; ++nn) {
                        const int64_t base = (nn * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            const double go = g[base + i];
                            dx[base + i] = go * scale;
                            dgamma[c] += go * (x[base + i] - n.bn_mean[c]) * inv_sd;
                            dbeta[c] += go;
                        }
                    }
                }
                accumulate(ensure(n.inputs[0]), dx);
                accumulate(ensure(n.inputs[1]), dgamma);
                accumulate(ensure(n.inputs[2]), dbeta);
                break;
            }
            case OpKind::relu: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                Tensor dx(x.shape());
                for (int64_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::relu6: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                Tensor dx(x.shape());
                for (int64_t i = 0; i < x.numel(); ++i) dx[i] = (x[i] > 0.0 && x[i] < 6.0) ? g[i] : 0.0;
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::sigmoid: {
                const Tensor& y = n.value;
                Tensor dx(y.shape());
                for (int64_t i = 0; i < y.numel(); ++i) dx[i] = g[i] * y[i] * (1.0 - y[i]);
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::maxpool:
            case OpKind::global_maxpool:
            case OpKind::channel_max: {
                Tensor& dx = ensure(n.inputs[0]);
                for (int64_t i = 0; i < n.value.numel(); ++i) {
                    dx[n.routing[static_cast<size_t>(i)]] += g[i];
                }
                break;
            }
            case OpKind::avgpool: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
                const int64_t Ho = n.value.extent(2), Wo = n.value.extent(3);
                Tensor dx(x.shape());
                const Pool2dParams& p = n.pool;
                for (int64_t nc = 0; nc < N * C; ++nc) {
                    for (int64_t oh = 0; oh < Ho; ++oh) {
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            int64_t count = 0;
                            for (int64_t kh = 0; kh < p.kernel_h; ++kh) {
                                const int64_t ih = oh * p.stride_h - p.pad_h + kh;
                                if (ih < 0 || ih >= H) continue;
                                for (int64_t kw = 0; kw < p.kernel_w; ++kw) {
                                    const int64_t iw = ow * p.stride_w - p.pad_w + kw;
                                    if (iw >= 0 && iw < W) ++count;
                                }
                            }
                            const double go = g[(nc * Ho + oh) * Wo + ow] / static_cast<double>(count);
                            for (int64_t kh = 0; kh < p.kernel_h; ++kh) {
                                const int64_t ih = oh * p.stride_h - p.pad_h + kh;
                                if (ih < 0 || ih >= H) continue;
                                for (int64_t kw = 0; kw < p.kernel_w; ++kw) {
                                    const int64_t iw = ow * p.stride_w - p.pad_w + kw;
                                    if (iw >= 0 && iw < W) dx[nc * H * W + ih * W + iw] += go;
                                }
                            }
                        }
                    }
                }
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::global_avgpool: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const int64_t hw = x.extent(2) * x.extent(3);
                Tensor dx(x.shape());
                for (int64_t nc = 0; nc < n.value.numel(); ++nc) {
                    const double go = g[nc] / static_cast<double>(hw);
                    for (int64_t i = 0; i < hw; ++i) dx[nc * hw + i] = go;
                }
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::channel_shuffle: {
                const int64_t C = n.value.extent(1);
                accumulate(ensure(n.inputs[0]), attnforge::channel_shuffle(g, C / n.groups));
                break;
            }
            case OpKind::channel_mean: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const int64_t N = x.extent(0), C = x.extent(1), hw = x.extent(2) * x.extent(3);
                Tensor dx(x.shape());
                for (int64_t nn = 0; nn < N; ++nn) {
                    for (int64_t i = 0; i < hw; ++i) {
                        const double go = g[nn * hw + i] / static_cast<double>(C);
                        for (int64_t c = 0; c < C; ++c) dx[(nn * C + c) * hw + i] = go;
                    }
                }
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::concat_channels: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                const int64_t N = a.extent(0), Ca = a.extent(1), Cb = b.extent(1);
                const int64_t hw = a.extent(2) * a.extent(3);
                Tensor da(a.shape());
                Tensor db(b.shape());
                for (int64_t nn = 0; nn < N; ++nn) {
                    for (int64_t i = 0; i < Ca * hw; ++i) da[nn * Ca * hw + i] = g[nn * (Ca + Cb) * hw + i];
                    for (int64_t i = 0; i < Cb * hw; ++i) {
                        db[nn * Cb * hw + i] = g[(nn * (Ca + Cb) + Ca) * hw + i];
                    }
                }
                accumulate(ensure(n.inputs[0]), da);
                accumulate(ensure(n.inputs[1]), db);
                break;
            }
            case OpKind::upsample2x: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const int64_t H = x.extent(2), W = x.extent(3);
                Tensor dx(x.shape());
                for (int64_t nc = 0; nc < x.numel() / (H * W); ++nc) {
                    const double* gs = &g.data()[static_cast<size_t>(nc * 4 * H * W)];
                    double* d = &dx.data()[static_cast<size_t>(nc * H * W)];
                    for (int64_t h = 0; h < 2 * H; ++h) {
                        for (int64_t w = 0; w < 2 * W; ++w) d[(h / 2) * W + (w / 2)] += gs[h * 2 * W + w];
                    }
                }
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::broadcast: {
                const std::vector<int64_t>& src_shape = n.axes;
                const int64_t r = static_cast<int64_t>(src_shape.size());
                Tensor dx(src_shape);
                std::vector<int64_t> src_strides(static_cast<size_t>(r), 1);
                for (int64_t i = r - 2; i >= 0; --i) {
                    src_strides[static_cast<size_t>(i)] =
                        src_strides[static_cast<size_t>(i + 1)] * src_shape[static_cast<size_t>(i + 1)];
                }
                std::vector<int64_t> step(static_cast<size_t>(r));
                for (int64_t i = 0; i < r; ++i) {
                    step[static_cast<size_t>(i)] =
                        (src_shape[static_cast<size_t>(i)] == 1) ? 0 : src_strides[static_cast<size_t>(i)];
                }
                const auto& out_shape = n.value.shape();
                std::vector<int64_t> idx(static_cast<size_t>(r), 0);
                int64_t src_off = 0;
                for (int64_t lin = 0; lin < n.value.numel(); ++lin) {
                    dx[src_off] += g[lin];
                    for (int64_t d = r - 1; d >= 0; --d) {
                        auto du = static_cast<size_t>(d);
                        if (++idx[du] < out_shape[du]) {
                            src_off += step[du];
                            break;
                        }
                        idx[du] = 0;
                        src_off -= step[du] * (out_shape[du] - 1);
                    }
                }
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::add: {
                accumulate(ensure(n.inputs[0]), g);
                accumulate(ensure(n.inputs[1]), g);
                break;
            }
            case OpKind::mul: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                Tensor da(a.shape());
                Tensor db(b.shape());
                for (int64_t i = 0; i < a.numel(); ++i) {
                    da[i] = g[i] * b[i];
                    db[i] = g[i] * a[i];
                }
                accumulate(ensure(n.inputs[0]), da);
                accumulate(ensure(n.inputs[1]), db);
                break;
            }
            case OpKind::add_scalar: {
                accumulate(ensure(n.inputs[0]), g);
                break;
            }
            case OpKind::mul_scalar: {
                Tensor dx(n.value.shape());
                for (int64_t i = 0; i < dx.numel(); ++i) dx[i] = g[i] * n.scalar;
                accumulate(ensure(n.inputs[0]), dx);
                break;
            }
            case OpKind::add_rowvec: {
                const Tensor& v = nodes_[static_cast<size_t>(n.inputs[1])].value;
                const int64_t cols = v.extent(0);
                Tensor dv(v.shape());
                const int64_t rows = g.numel() / cols;
                for (int64_t rr = 0; rr < rows; ++rr) {
                    for (int64_t i = 0; i < cols; ++i) dv[i] += g[rr * cols + i];
                }
                accumulate(ensure(n.inputs[0]), g);
                accumulate(ensure(n.inputs[1]), dv);
                break;
            }
            case OpKind::sum_all: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                accumulate(ensure(n.inputs[0]), Tensor::full(x.shape(), g[0]));
                break;
            }
        }
    }

    std::vector<Tensor> result;
    result.reserve(leaves_.size());
    for (const auto& [name, id] : leaves_) {
        (void)name;
        if (has_grad[static_cast<size_t>(id)]) {
            result.push_back(grad[static_cast<size_t>(id)]);
        } else {
            result.push_back(Tensor(nodes_[static_cast<size_t>(id)].value.shape()));
        }
    }
    return result;
}

std::pair<Tensor, Tape> record(const Program& f, const std::vector<Tensor>& inputs) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    Var out = f(tape, vars);
    Tensor value = tape.value(out);
    return {std::move(value), std::move(tape)};
}

namespace {

double eval_sum(const Program& f, const std::vector<Tensor>& inputs) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    Var out = f(tape, vars);
    return attnforge::sum_all(tape.value(out))[0];
}

}  // namespace

GradCheckReport grad_check(const Program& f, const std::vector<GradCheckInput>& inputs,
                           double h, double tol, const std::string& label, uint64_t coord_seed) {
    if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");

    GradCheckReport report;
    report.op = label;
    report.h = h;
    report.tol = tol;

    // Analytic pass.
    Tape tape;
    std::vector<Var> vars;
    std::vector<Tensor> values;
    for (const auto& in : inputs) {
        vars.push_back(tape.leaf(in.value, in.name));
        values.push_back(in.value);
    }
    Var out = f(tape, vars);
    Var total = tape.sum_all(out);
    if (!all_finite(tape.value(total))) report.nonfinite = true;
    std::vector<Tensor> analytic = tape.backward(total, Tensor::ones({1}));
    for (const Tensor& gradient : analytic) {
        if (!all_finite(gradient)) report.nonfinite = true;
    }

    std::mt19937_64 pick(coord_seed);
    const double rel_floor = 1.0;  // |a - fd| / max(rel_floor, |a|, |fd|)

    for (size_t i = 0; i < inputs.size(); ++i) {
        GradCheckReport::PerInput per;
        per.name = inputs[i].name;
        per.shape = inputs[i].value.shape();

        const int64_t n = inputs[i].value.numel();
        std::vector<int64_t> coords;
        if (n <= 50) {
            coords.resize(static_cast<size_t>(n));
            for (int64_t c = 0; c < n; ++c) coords[static_cast<size_t>(c)] = c;
        } else {
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t c = 0; c < n; ++c) all[static_cast<size_t>(c)] = c;
            std::shuffle(all.begin(), all.end(), pick);
            coords.assign(all.begin(), all.begin() + 50);
        }

        for (int64_t c : coords) {
            if (report.nonfinite) break;
            auto fd_at = [&](double step) {
                std::vector<Tensor> probe = values;
                probe[i][c] = values[i][c] + step;
                const double fp = eval_sum(f, probe);
                probe[i][c] = values[i][c] - step;
                const double fm = eval_sum(f, probe);
                return (fp - fm) / (2.0 * step);
            };
            const double a = analytic[i][c];
            double fd = fd_at(h);
            if (!std::isfinite(fd) || !std::isfinite(a)) {
                report.nonfinite = true;
                break;
            }
            double abs_err = std::abs(a - fd);
            double rel_err = abs_err / std::max({rel_floor, std::abs(a), std::abs(fd)});
            if (rel_err > tol) {
                // Re-probe with a smaller step: genuine truncation error shrinks,
                // a kink or max-tie produces a wildly different estimate.
                const double fd2 = fd_at(h / 8.0);
                if (!std::isfinite(fd2)) {
                    report.nonfinite = true;
                    break;
                }
                const double instability = std::abs(fd2 - fd) / std::max({rel_floor, std::abs(fd), std::abs(fd2)});
                if (instability > 1000.0 * tol) {
                    ++per.coords_excluded;
                    continue;
                }
                fd = fd2;
                abs_err = std::abs(a - fd);
                rel_err = abs_err / std::max({rel_floor, std::abs(a), std::abs(fd)});
            }
            ++per.coords_checked;
            per.max_abs_err = std::max(per.max_abs_err, abs_err);
            per.max_rel_err = std::max(per.max_rel_err, rel_err);
        }

        report.max_abs_err = std::max(report.max_abs_err, per.max_abs_err);
        report.max_rel_err = std::max(report.max_rel_err, per.max_rel_err);
        report.inputs.push_back(std::move(per));
    }

    report.pass = !report.nonfinite && report.max_rel_err <= tol;
    return report;
}

std::string GradCheckReport::to_json() const {
    nlohmann::json j;
    j["op"] = op;
    j["h"] = h;
    j["tol"] = tol;
    j["max_rel_err"] = max_rel_err;
    j["max_abs_err"] = max_abs_err;
    j["nonfinite"] = nonfinite;
    j["pass"] = pass;
    j["shapes"] = nlohmann::json::array();
    for (const auto& in : inputs) {
        nlohmann::json ji;
        ji["name"] = in.name;
        ji["shape"] = in.shape;
        ji["max_rel_err"] = in.max_rel_err;
        ji["max_abs_err"] = in.max_abs_err;
        ji["coords_checked"] = in.coords_checked;
        ji["coords_excluded"] = in.coords_excluded;
        j["shapes"].push_back(ji);
    }
    return j.dump(2);
}

}  // namespace attnforge::ad
