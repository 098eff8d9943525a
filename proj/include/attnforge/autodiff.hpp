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

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "attnforge/ops.hpp"
#include "attnforge/tensor.hpp"

namespace attnforge::ad {

/// Handle to a tape node; valid only for the tape that produced it.
struct Var {
    int32_t id = -1;
};

enum class OpKind : uint8_t {
    leaf, permute, reshape, conv2d, matmul, batchnorm, relu, relu6, sigmoid,
    maxpool, avgpool, global_maxpool, global_avgpool, channel_shuffle,
    channel_mean, channel_max, concat_channels, upsample2x, broadcast,
    add, mul, add_scalar, mul_scalar, add_rowvec, sum_all,
};

struct TapeNode {
    OpKind op = OpKind::leaf;
    std::vector<int32_t> inputs;      // node ids; always precede this node
    Tensor value;                     // forward result
    // op-specific context saved for the backward rule
    Conv2dParams conv;
    Pool2dParams pool;
    std::vector<int64_t> axes;        // permute axes / original shape for reshape+broadcast
    int64_t groups = 0;
    double scalar = 0.0;
    std::vector<int64_t> routing;     // argmax indices for max-type reductions
    Tensor bn_mean, bn_var;           // constants of batchnorm (not differentiated)
    double bn_eps = 0.0;
};

/// Reverse-mode tape over the tensor-core op set. Forward values are computed
/// eagerly by the same kernels as direct evaluation, so a recorded forward is
/// bit-identical to the unrecorded one. Construction is single-threaded per
/// tape; backward is pure given the tape.
class Tape {
public:
    Var leaf(Tensor value, std::string name = {});

    Var permute(Var x, std::span<const int64_t> axes);
    Var reshape(Var x, std::vector<int64_t> new_shape);
    Var conv2d(Var x, Var w, std::optional<Var> bias, const Conv2dParams& p);
    Var matmul(Var a, Var b);
    Var batchnorm(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double eps);
    Var relu(Var x);
    Var relu6(Var x);
    Var sigmoid(Var x);
    Var maxpool(Var x, const Pool2dParams& p);
    Var avgpool(Var x, const Pool2dParams& p);
    Var global_maxpool(Var x);
    Var global_avgpool(Var x);
    Var channel_shuffle(Var x, int64_t groups);
    Var channel_mean(Var x);
    Var channel_max(Var x);
    Var concat_channels(Var a, Var b);
    Var upsample_nearest2x(Var x);
    Var broadcast_to(Var x, const std::vector<int64_t>& shape);
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var add_scalar(Var x, double s);
    Var mul_scalar(Var x, double s);
    Var add_rowvec(Var x, Var v);
    Var sum_all(Var x);

    const Tensor& value(Var v) const;
    size_t size() const { return nodes_.size(); }
    const std::vector<std::pair<std::string, int32_t>>& leaves() const { return leaves_; }

    /// Vector-Jacobian products for every leaf, in leaf registration order.
    /// The seed must match the output's shape. ReLU uses subgradient 0 at 0;
    /// max-type reductions route the gradient to the first maximum in
    /// row-major scan order.
    std::vector<Tensor> backward(Var output, const Tensor& seed) const;

private:
    Var push(TapeNode node);
    const TapeNode& node(Var v) const;

    std::vector<TapeNode> nodes_;
    std::vector<std::pair<std::string, int32_t>> leaves_;
};

/// A differentiable program: builds a tape expression from leaf handles that
/// correspond, in order, to the tensors supplied at record/check time.
using Program = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Evaluates f over fresh leaves; returns the forward value and the tape.
std::pair<Tensor, Tape> record(const Program& f, const std::vector<Tensor>& inputs);

struct GradCheckInput {
    std::string name;
    Tensor value;
};

/// Analytic-vs-central-difference comparison for sum(f(inputs)).
struct GradCheckReport {
    struct PerInput {
        std::string name;
        std::vector<int64_t> shape;
        double max_rel_err = 0.0;
        double max_abs_err = 0.0;
        int64_t coords_checked = 0;
        int64_t coords_excluded = 0;  // non-smooth points (kinks/ties), see grad_check
    };
    std::string op;        // label of the function under test
    double h = 0.0;
    double tol = 0.0;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    bool nonfinite = false;  // non-finite value encountered; forces failure
    bool pass = false;
    std::vector<PerInput> inputs;
    std::string to_json() const;
};

/// Compares tape gradients of sum(f(inputs)) against central differences
/// (f(x+h e) - f(x-h e)) / 2h on a deterministic sample of at least 50
/// coordinates per input (all coordinates when there are at most 50).
/// Relative error per coordinate is |a - fd| / max(1, |a|, |fd|).
///
/// A coordinate that fails at step h is re-probed at h/8: if the two
/// estimates disagree wildly the point is non-smooth (ReLU kink, max tie)
/// and is excluded from the comparison but counted in the report; otherwise
/// the finer estimate is used. Non-finite values are reported, never dropped.
GradCheckReport grad_check(const Program& f, const std::vector<GradCheckInput>& inputs,
                           double h = 1e-6, double tol = 1e-5,
                           const std::string& label = {}, uint64_t coord_seed = 0x5eed);

}  // namespace attnforge::ad
