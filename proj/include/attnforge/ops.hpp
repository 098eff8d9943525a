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

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "attnforge/tensor.hpp"

// Reference tensor kernels. Conventions, fixed for the whole project:
//   * conv2d is cross-correlation (no kernel flip), zero padding only;
//   * layouts are row-major NCHW; weights are (O, I/groups, Kh, Kw);
//   * max-pool pads with -inf, avg-pool excludes padding from the divisor;
//   * every kernel accumulates in a fixed order per output element, so
//     results are bit-reproducible run to run.

namespace attnforge {

struct Conv2dParams {
    int64_t stride_h = 1, stride_w = 1;
    int64_t pad_h = 0, pad_w = 0;
    int64_t dilation_h = 1, dilation_w = 1;
    int64_t groups = 1;
};

struct Pool2dParams {
    int64_t kernel_h = 1, kernel_w = 1;
    int64_t stride_h = 1, stride_w = 1;
    int64_t pad_h = 0, pad_w = 0;
};

// -- layout ------------------------------------------------------------

Tensor permute(const Tensor& t, std::span<const int64_t> axes);
std::vector<int64_t> inverse_permutation(std::span<const int64_t> axes);
Tensor reshape(const Tensor& t, std::vector<int64_t> new_shape);

/// Regroups channels: with C = g*k, output channel c reads input channel
/// (c mod g)*k + c/g, i.e. reshape to (g, k), transpose, flatten.
Tensor channel_shuffle(const Tensor& t, int64_t groups);

/// Materialized broadcast; source axes must match the target or be 1.
Tensor broadcast_to(const Tensor& t, const std::vector<int64_t>& shape);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor upsample_nearest2x(const Tensor& t);

// -- contractions ------------------------------------------------------

/// input (N, C, H, W) x weight (O, C/g, Kh, Kw) -> (N, O, Ho, Wo) with
/// Ho = floor((H + 2*pad - dil*(Kh-1) - 1)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias,
              const Conv2dParams& p);

/// a (..., M, K) x b (K, N) -> (..., M, N); contraction over the last axis
/// of a in ascending-k order.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x (N, F) x w (F, O) + bias(O) -> (N, O).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias);

// -- normalization and activations ---------------------------------------

/// Inference-mode batch norm: per-channel (t - mean)/sqrt(var + eps)*gamma + beta
/// over axis 1 of an NCHW tensor (also accepts rank-2 (N, C)).
Tensor batchnorm_infer(const Tensor& t, const Tensor& gamma, const Tensor& beta,
                       const Tensor& mean, const Tensor& var, double eps = 1e-5);

Tensor relu(const Tensor& t);
Tensor relu6(const Tensor& t);
Tensor sigmoid(const Tensor& t);

// -- pooling -------------------------------------------------------------

Tensor maxpool2d(const Tensor& t, const Pool2dParams& p);
Tensor avgpool2d(const Tensor& t, const Pool2dParams& p);
Tensor global_maxpool(const Tensor& t);  // (N, C, H, W) -> (N, C, 1, 1)
Tensor global_avgpool(const Tensor& t);

/// Channel-wise reductions for spatial gates: (N, C, H, W) -> (N, 1, H, W).
Tensor channel_mean(const Tensor& t);
Tensor channel_max(const Tensor& t);

// -- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);  // identical shapes
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& t, double s);
Tensor mul_scalar(const Tensor& t, double s);
/// t (..., N) + v (N), broadcast over leading axes.
Tensor add_rowvec(const Tensor& t, const Tensor& v);
Tensor sum_all(const Tensor& t);  // -> shape (1)

std::vector<int64_t> conv2d_output_shape(std::span<const int64_t> input_shape,
                                         std::span<const int64_t> weight_shape,
                                         const Conv2dParams& p);
std::vector<int64_t> pool2d_output_shape(std::span<const int64_t> input_shape,
                                         const Pool2dParams& p);

}  // namespace attnforge
