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

#include "attnforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace attnforge {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void require_nchw(const Tensor& t, const char* who) {
    require(t.rank() == 4, std::string(who) + ": expected rank-4 NCHW tensor, got " + t.shape_str());
}

}  // namespace

std::vector<int64_t> inverse_permutation(std::span<const int64_t> axes) {
    std::vector<int64_t> inv(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int64_t>(i);
    return inv;
}

Tensor permute(const Tensor& t, std::span<const int64_t> axes) {
    const int64_t r = t.rank();
    require(static_cast<int64_t>(axes.size()) == r, "permute: axes rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int64_t a : axes) {
        require(a >= 0 && a < r, "permute: axis out of range");
        require(!seen[static_cast<size_t>(a)], "permute: duplicate axis");
        seen[static_cast<size_t>(a)] = true;
    }

    std::vector<int64_t> out_shape(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = t.extent(axes[static_cast<size_t>(i)]);
    Tensor out(out_shape);

    const auto in_strides = t.strides();
    std::vector<int64_t> step(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) step[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];

    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const auto src = t.data();
    auto dst = out.data();
    const int64_t n = t.numel();
    int64_t src_off = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        dst[static_cast<size_t>(lin)] = src[static_cast<size_t>(src_off)];
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
    return out;
}

Tensor reshape(const Tensor& t, std::vector<int64_t> new_shape) {
    require(shape_numel(new_shape) == t.numel(),
            "reshape: element count mismatch " + t.shape_str() + " -> " + shape_to_string(new_shape));
    return Tensor(std::move(new_shape), std::vector<double>(t.data().begin(), t.data().end()));
}

Tensor channel_shuffle(const Tensor& t, int64_t groups) {
    require_nchw(t, "channel_shuffle");
    const int64_t N = t.extent(0), C = t.extent(1), H = t.extent(2), W = t.extent(3);
    require(groups >= 1, "channel_shuffle: groups must be >= 1");
    require(C % groups == 0, "channel_shuffle: C=" + std::to_string(C) + " not divisible by groups=" +
                                 std::to_string(groups));
    const int64_t k = C / groups;
    const int64_t hw = H * W;
    Tensor out(t.shape());
    const auto src = t.data();
    auto dst = out.data();
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const int64_t src_c = (c % groups) * k + c / groups;
            const double* s = &src[static_cast<size_t>((n * C + src_c) * hw)];
            double* d = &dst[static_cast<size_t>((n * C + c) * hw)];
            std::copy(s, s + hw, d);
        }
    }
    return out;
}

Tensor broadcast_to(const Tensor& t, const std::vector<int64_t>& shape) {
    require(t.rank() == static_cast<int64_t>(shape.size()), "broadcast_to: rank mismatch");
    for (int64_t i = 0; i < t.rank(); ++i) {
        require(t.extent(i) == shape[static_cast<size_t>(i)] || t.extent(i) == 1,
                "broadcast_to: incompatible extents " + t.shape_str() + " -> " + shape_to_string(shape));
    }
    Tensor out(shape);
    const auto in_strides = t.strides();
    const int64_t r = t.rank();
    std::vector<int64_t> step(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) {
        step[static_cast<size_t>(i)] = (t.extent(i) == 1) ? 0 : in_strides[static_cast<size_t>(i)];
    }
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const auto src = t.data();
    auto dst = out.data();
    int64_t src_off = 0;
    const int64_t n = out.numel();
    for (int64_t lin = 0; lin < n; ++lin) {
        dst[static_cast<size_t>(lin)] = src[static_cast<size_t>(src_off)];
        for (int64_t d = r - 1; d >= 0; --d) {
            auto du = static_cast<size_t>(d);
            if (++idx[du] < shape[du]) {
                src_off += step[du];
                break;
            }
            idx[du] = 0;
            src_off -= step[du] * (shape[du] - 1);
        }
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_nchw(a, "concat_channels");
    require_nchw(b, "concat_channels");
    require(a.extent(0) == b.extent(0) && a.extent(2) == b.extent(2) && a.extent(3) == b.extent(3),
            "concat_channels: non-channel extents differ");
    const int64_t N = a.extent(0), Ca = a.extent(1), Cb = b.extent(1), H = a.extent(2), W = a.extent(3);
    Tensor out({N, Ca + Cb, H, W});
    const int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n) {
        std::copy_n(&a.data()[static_cast<size_t>(n * Ca * hw)], Ca * hw,
                    &out.data()[static_cast<size_t>(n * (Ca + Cb) * hw)]);
        std::copy_n(&b.data()[static_cast<size_t>(n * Cb * hw)], Cb * hw,
                    &out.data()[static_cast<size_t>((n * (Ca + Cb) + Ca) * hw)]);
    }
    return out;
}

Tensor upsample_nearest2x(const Tensor& t) {
    require_nchw(t, "upsample_nearest2x");
    const int64_t N = t.extent(0), C = t.extent(1), H = t.extent(2), W = t.extent(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* s = &t.data()[static_cast<size_t>(nc * H * W)];
        double* d = &out.data()[static_cast<size_t>(nc * 4 * H * W)];
        for (int64_t h = 0; h < 2 * H; ++h) {
            for (int64_t w = 0; w < 2 * W; ++w) {
                d[h * 2 * W + w] = s[(h / 2) * W + (w / 2)];
            }
        }
    }
    return out;
}

std::vector<int64_t> conv2d_output_shape(std::span<const int64_t> input_shape,
                                         std::span<const int64_t> weight_shape,
                                         const Conv2dParams& p) {
    require(input_shape.size() == 4 && weight_shape.size() == 4, "conv2d: rank-4 shapes required");
    const int64_t N = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
    const int64_t O = weight_shape[0], Cg = weight_shape[1], Kh = weight_shape[2], Kw = weight_shape[3];
    require(p.groups >= 1, "conv2d: groups must be >= 1");
    require(C % p.groups == 0, "conv2d: input channels " + std::to_string(C) +
                                   " not divisible by groups " + std::to_string(p.groups));
    require(O % p.groups == 0, "conv2d: output channels " + std::to_string(O) +
                                   " not divisible by groups " + std::to_string(p.groups));
    require(Cg == C / p.groups, "conv2d: weight expects " + std::to_string(Cg) +
                                    " channels per group, input provides " + std::to_string(C / p.groups));
    require(p.stride_h > 0 && p.stride_w > 0 && p.dilation_h > 0 && p.dilation_w > 0,
            "conv2d: stride/dilation must be positive");
    require(p.pad_h >= 0 && p.pad_w >= 0, "conv2d: padding must be non-negative");
    const int64_t Ho = (H + 2 * p.pad_h - p.dilation_h * (Kh - 1) - 1) / p.stride_h + 1;
    const int64_t Wo = (W + 2 * p.pad_w - p.dilation_w * (Kw - 1) - 1) / p.stride_w + 1;
    require(Ho > 0 && Wo > 0, "conv2d: zero-sized output for input " + shape_to_string(input_shape) +
                                  " and kernel " + shape_to_string(weight_shape));
    return {N, O, Ho, Wo};
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const Conv2dParams& p) {
    require_nchw(input, "conv2d");
    require(weight.rank() == 4, "conv2d: weight must be rank 4 (O, I/g, Kh, Kw)");
    const auto out_shape = conv2d_output_shape(input.shape(), weight.shape(), p);
    const int64_t N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
    const int64_t O = weight.extent(0), Cg = weight.extent(1), Kh = weight.extent(2), Kw = weight.extent(3);
    const int64_t Ho = out_shape[2], Wo = out_shape[3];
    const int64_t Og = O / p.groups;
    if (bias) {
        require(bias->rank() == 1 && bias->extent(0) == O,
                "conv2d: bias must have shape (" + std::to_string(O) + ")");
    }

    Tensor out(out_shape);
    const double* x = input.data().data();
    const double* wt = weight.data().data();
    double* y = out.data().data();

    for (int64_t n = 0; n < N; ++n) {
        for (int64_t g = 0; g < p.groups; ++g) {
            const int64_t ic0 = g * Cg;
            for (int64_t og = 0; og < Og; ++og) {
                const int64_t o = g * Og + og;
                const double b = bias ? (*bias)[o] : 0.0;
                const double* wo = wt + o * Cg * Kh * Kw;
                for (int64_t oh = 0; oh < Ho; ++oh) {
                    const int64_t ih0 = oh * p.stride_h - p.pad_h;
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        const int64_t iw0 = ow * p.stride_w - p.pad_w;
                        double acc = b;
                        for (int64_t ic = 0; ic < Cg; ++ic) {
                            const double* xc = x + ((n * C + ic0 + ic) * H) * W;
                            const double* wc = wo + ic * Kh * Kw;
                            for (int64_t kh = 0; kh < Kh; ++kh) {
                                const int64_t ih = ih0 + kh * p.dilation_h;
                                if (ih < 0 || ih >= H) continue;
                                const double* xr = xc + ih * W;
                                const double* wr = wc + kh * Kw;
                                for (int64_t kw = 0; kw < Kw; ++kw) {
                                    const int64_t iw = iw0 + kw * p.dilation_w;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += xr[iw] * wr[kw];
                                }
                            }
                        }
                        y[((n * O + o) * Ho + oh) * Wo + ow] = acc;
                    }
                }
            }
        }
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() >= 2, "matmul: a must have rank >= 2");
    require(b.rank() == 2, "matmul: b must have rank 2");
    const int64_t K = a.extent(a.rank() - 1);
    const int64_t M = a.extent(a.rank() - 2);
    require(b.extent(0) == K, "matmul: inner extents differ, a " + a.shape_str() + " vs b " + b.shape_str());
    const int64_t Nc = b.extent(1);

    std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end());
    out_shape[out_shape.size() - 1] = Nc;
    Tensor out(out_shape);

    const int64_t batch = a.numel() / (M * K);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int64_t bi = 0; bi < batch; ++bi) {
        const double* A = pa + bi * M * K;
        double* Cm = pc + bi * M * Nc;
        for (int64_t m = 0; m < M; ++m) {
            for (int64_t n = 0; n < Nc; ++n) {
                double acc = 0.0;
                for (int64_t k = 0; k < K; ++k) acc += A[m * K + k] * pb[k * Nc + n];
                Cm[m * Nc + n] = acc;
            }
        }
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
    Tensor y = matmul(x, w);
    if (bias) y = add_rowvec(y, *bias);
    return y;
}

Tensor batchnorm_infer(const Tensor& t, const Tensor& gamma, const Tensor& beta,
                       const Tensor& mean, const Tensor& var, double eps) {
    require(t.rank() == 2 || t.rank() == 4, "batchnorm_infer: expected rank 2 or 4, got " + t.shape_str());
    const int64_t C = t.extent(1);
    for (const Tensor* v : {&gamma, &beta, &mean, &var}) {
        require(v->rank() == 1 && v->extent(0) == C,
                "batchnorm_infer: parameter length mismatch, wanted (" + std::to_string(C) + ")");
    }
    require(eps >= 0.0, "batchnorm_infer: eps must be >= 0");
    for (int64_t c = 0; c < C; ++c) {
        require(var[c] >= 0.0, "batchnorm_infer: negative variance at channel " + std::to_string(c));
    }

    const int64_t N = t.extent(0);
    const int64_t hw = (t.rank() == 4) ? t.extent(2) * t.extent(3) : 1;
    Tensor out(t.shape());
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const double scale = gamma[c] / std::sqrt(var[c] + eps);
            const double shift = beta[c] - mean[c] * scale;
            const double* s = &t.data()[static_cast<size_t>((n * C + c) * hw)];
            double* d = &out.data()[static_cast<size_t>((n * C + c) * hw)];
            for (int64_t i = 0; i < hw; ++i) d[i] = s[i] * scale + shift;
        }
    }
    return out;
}

Tensor relu(const Tensor& t) {
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] > 0.0 ? t[i] : 0.0;
    return out;
}

Tensor relu6(const Tensor& t) {
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = std::min(std::max(t[i], 0.0), 6.0);
    return out;
}

Tensor sigmoid(const Tensor& t) {
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-t[i]));
    return out;
}

std::vector<int64_t> pool2d_output_shape(std::span<const int64_t> input_shape, const Pool2dParams& p) {
    require(input_shape.size() == 4, "pool2d: rank-4 input required");
    require(p.kernel_h > 0 && p.kernel_w > 0 && p.stride_h > 0 && p.stride_w > 0,
            "pool2d: kernel and stride must be positive");
    require(p.pad_h >= 0 && p.pad_w >= 0, "pool2d: padding must be non-negative");
    require(p.pad_h < p.kernel_h && p.pad_w < p.kernel_w, "pool2d: padding must be smaller than kernel");
    const int64_t H = input_shape[2], W = input_shape[3];
    const int64_t Ho = (H + 2 * p.pad_h - p.kernel_h) / p.stride_h + 1;
    const int64_t Wo = (W + 2 * p.pad_w - p.kernel_w) / p.stride_w + 1;
    require(Ho > 0 && Wo > 0, "pool2d: window does not fit the padded input");
    return {input_shape[0], input_shape[1], Ho, Wo};
}

Tensor maxpool2d(const Tensor& t, const Pool2dParams& p) {
    require_nchw(t, "maxpool2d");
    const auto out_shape = pool2d_output_shape(t.shape(), p);
    const int64_t N = t.extent(0), C = t.extent(1), H = t.extent(2), W = t.extent(3);
    const int64_t Ho = out_shape[2], Wo = out_shape[3];
    Tensor out(out_shape);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* s = &t.data()[static_cast<size_t>(nc * H * W)];
        double* d = &out.data()[static_cast<size_t>(nc * Ho * Wo)];
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                double best = -std::numeric_limits<double>::infinity();
                for (int64_t kh = 0; kh < p.kernel_h; ++kh) {
                    const int64_t ih = oh * p.stride_h - p.pad_h + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t kw = 0; kw < p.kernel_w; ++kw) {
                        const int64_t iw = ow * p.stride_w - p.pad_w + kw;
                        if (iw < 0 || iw >= W) continue;
                        best = std::max(best, s[ih * W + iw]);
                    }
                }
                d[oh * Wo + ow] = best;
            }
        }
    }
    return out;
}

Tensor avgpool2d(const Tensor& t, const Pool2dParams& p) {
    require_nchw(t, "avgpool2d");
    const auto out_shape = pool2d_output_shape(t.shape(), p);
    const int64_t N = t.extent(0), C = t.extent(1), H = t.extent(2), W = t.extent(3);
    const int64_t Ho = out_shape[2], Wo = out_shape[3];
    Tensor out(out_shape);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* s = &t.data()[static_cast<size_t>(nc * H * W)];
        double* d = &out.data()[static_cast<size_t>(nc * Ho * Wo)];
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                double acc = 0.0;
                int64_t count = 0;
                for (int64_t kh = 0; kh < p.kernel_h; ++kh) {
                    const int64_t ih = oh * p.stride_h - p.pad_h + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t kw = 0; kw < p.kernel_w; ++kw) {
                        const int64_t iw = ow * p.stride_w - p.pad_w + kw;
                        if (iw < 0 || iw >= W) continue;
                        acc += s[ih * W + iw];
                        ++count;
                    }
                }
                d[oh * Wo + ow] = acc / static_cast<double>(count);
            }
        }
    }
    return out;
}

Tensor global_maxpool(const Tensor& t) {
    require_nchw(t, "global_maxpool");
    const int64_t N = t.extent(0), C = t.extent(1), hw = t.extent(2) * t.extent(3);
    Tensor out({N, C, 1, 1});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* s = &t.data()[static_cast<size_t>(nc * hw)];
        double best = s[0];
        for (int64_t i = 1; i < hw; ++i) best = std::max(best, s[i]);
        out[nc] = best;
    }
    return out;
}

Tensor global_avgpool(const Tensor& t) {
    require_nchw(t, "global_avgpool");
    const int64_t N = t.extent(0), C = t.extent(1), hw = t.extent(2) * t.extent(3);
    Tensor out({N, C, 1, 1});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* s = &t.data()[static_cast<size_t>(nc * hw)];
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += s[i];
        out[nc] = acc / static_cast<double>(hw);
    }
    return out;
}

Tensor channel_mean(const Tensor& t) {
    require_nchw(t, "channel_mean");
    const int64_t N = t.extent(0), C = t.extent(1), H = t.extent(2), W = t.extent(3);
    Tensor out({N, 1, H, W});
    const int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t i = 0; i < hw; ++i) {
            double acc = 0.0;
            for (int64_t c = 0; c < C; ++c) acc += t[(n * C + c) * hw + i];
            out[n * hw + i] = acc / static_cast<double>(C);
        }
    }
    return out;
}

Tensor channel_max(const Tensor& t) {
    require_nchw(t, "channel_max");
    const int64_t N = t.extent(0), C = t.extent(1), H = t.extent(2), W = t.extent(3);
    Tensor out({N, 1, H, W});
    const int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t i = 0; i < hw; ++i) {
            double best = t[n * C * hw + i];
            for (int64_t c = 1; c < C; ++c) best = std::max(best, t[(n * C + c) * hw + i]);
            out[n * hw + i] = best;
        }
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor add_scalar(const Tensor& t, double s) {
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] + s;
    return out;
}

Tensor mul_scalar(const Tensor& t, double s) {
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] * s;
    return out;
}

Tensor add_rowvec(const Tensor& t, const Tensor& v) {
    require(v.rank() == 1, "add_rowvec: v must be rank 1");
    const int64_t n = t.extent(t.rank() - 1);
    require(v.extent(0) == n, "add_rowvec: trailing extent mismatch");
    Tensor out(t.shape());
    const int64_t rows = t.numel() / n;
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t i = 0; i < n; ++i) out[r * n + i] = t[r * n + i] + v[i];
    }
    return out;
}

Tensor sum_all(const Tensor& t) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) acc += t[i];
    return Tensor::scalar(acc);
}

}  // namespace attnforge
