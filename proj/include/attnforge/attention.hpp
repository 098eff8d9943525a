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
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "attnforge/autodiff.hpp"
#include "attnforge/rng.hpp"
#include "attnforge/tensor.hpp"

namespace attnforge::att {

enum class Mechanism { gam, se, bam, cbam };

std::string to_string(Mechanism m);
Mechanism mechanism_from_string(std::string_view s);

enum class InitScheme { kaiming_normal, uniform_small };

/// Configuration of one attention attachment. `reduction` is the bottleneck
/// ratio r of the C -> C/r -> C stack; `groups` applies to the GAM spatial
/// convolutions only. The channel/spatial switches and the pooling variant
/// correspond to the ch/sp and wmp ablations.
struct AttentionConfig {
    Mechanism mechanism = Mechanism::gam;
    int64_t reduction = 0;         // 0 = resolved to a preset default at build time
    int64_t groups = 1;
    bool channel_enabled = true;
    bool spatial_enabled = true;
    bool max_pool_variant = false;  // 2x2 max-pool before the spatial conv stack, 2x upsample after
    bool stride2_variant = false;   // stride-2 first spatial conv, 2x upsample after
    int64_t spatial_kernel = 7;
    int64_t bam_dilation = 4;
    bool gate_override = false;     // identity gate: module returns its input unchanged
};

/// One attention module bound to a channel count: resolved config plus a flat
/// list of named parameter tensors (learnable) and buffers (BN running
/// statistics; fixed at mean 0, var 1 since nothing is trained here).
/// Weights are immutable after initialization; forward is pure.
class AttentionModule {
public:
    static AttentionModule init(int64_t channels, const AttentionConfig& cfg, Rng& rng,
                                InitScheme scheme = InitScheme::uniform_small);

    const AttentionConfig& config() const { return cfg_; }
    int64_t channels() const { return channels_; }

    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }
    const Tensor& param(std::string_view name) const;
    const Tensor& buffer(std::string_view name) const;
    void set_param(std::string_view name, Tensor value);
    int64_t param_count() const;

    /// Full module forward: x (N, C, H, W) -> gated tensor of the same shape.
    Tensor forward(const Tensor& x) const;

    /// GAM submodule surfaces (mechanism must be gam).
    std::pair<Tensor, Tensor> gam_channel(const Tensor& f1) const;  // (Mc, F2)
    Tensor gam_channel_gate(const Tensor& f1) const;                // Mc only
    Tensor gam_spatial(const Tensor& f2) const;                     // F3
    Tensor gam_spatial_gate(const Tensor& f2) const;                // Ms only

    /// Differentiable program over leaves [x, params... in params() order].
    ad::Program program() const;
    std::vector<ad::GradCheckInput> gradcheck_inputs(const Tensor& x) const;

    /// Weight bundle: a directory of GTF1 tensors plus manifest.json.
    void save_bundle(const std::string& dir) const;
    static AttentionModule load_bundle(const std::string& dir);

private:
    AttentionConfig cfg_;
    int64_t channels_ = 0;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
};

/// Expected parameter count for a module with this config at C channels,
/// computed from the layer shapes alone (no tensors materialized).
int64_t attention_param_count(int64_t channels, const AttentionConfig& cfg);

/// MAC count of one module applied to a (N=1, C, H, W) input. Convention:
/// conv and linear contribute multiply-accumulates (a pointwise MLP counts
/// once per spatial position), batch norm 1 MAC per element, activations,
/// pooling and gating multiplies are free.
int64_t attention_mac_count(int64_t channels, int64_t height, int64_t width,
                            const AttentionConfig& cfg);

void validate_attention_site(int64_t channels, const AttentionConfig& cfg);

// Operation-shaped entry points over a prepared module.
std::pair<Tensor, Tensor> gam_channel_forward(const Tensor& f1, const AttentionModule& m);
Tensor gam_spatial_forward(const Tensor& f2, const AttentionModule& m);
Tensor attach_gam(const Tensor& f1, const AttentionModule& m);
Tensor se_forward(const Tensor& f, const AttentionModule& m);
Tensor cbam_forward(const Tensor& f, const AttentionModule& m);
Tensor bam_forward(const Tensor& f, const AttentionModule& m);

}  // namespace attnforge::att
