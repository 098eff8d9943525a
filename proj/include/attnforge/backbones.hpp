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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attnforge/attention.hpp"
#include "attnforge/ops.hpp"
#include "attnforge/tensor.hpp"

namespace attnforge::nets {

enum class LayerKind {
    input, conv, bn, relu, relu6, maxpool, global_avgpool, linear, residual_add,
    attention, flatten,
};

std::string to_string(LayerKind k);

struct LayerNode {
    int32_t id = -1;
    LayerKind kind = LayerKind::input;
    std::vector<int32_t> inputs;
    std::string name;

    // conv
    int64_t in_ch = 0, out_ch = 0, kernel_h = 0, kernel_w = 0;
    Conv2dParams conv;
    bool has_bias = false;
    // bn (channels in in_ch)
    // pooling
    Pool2dParams pool;
    // linear
    int64_t in_features = 0, out_features = 0;
    // attention (channels in in_ch)
    att::AttentionConfig att_cfg;

    // filled by init_weights
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> buffers;
    std::optional<att::AttentionModule> att_module;
};

enum class InsertionSite { none, mechanism_default, stage_ends, between_stages, per_block };

std::string to_string(InsertionSite s);
InsertionSite insertion_site_from_string(const std::string& s);

/// Where attention modules attach. `mechanism_default` resolves to the
/// calibrated placement per mechanism: GAM at stage ends (ResNet18,
/// MobileNetV2) or per block (ResNet50), SE/CBAM per block, BAM between
/// stages.
struct InsertionPolicy {
    InsertionSite selector = InsertionSite::mechanism_default;
    std::map<std::string, att::AttentionConfig> site_overrides;  // keyed by site name
};

struct InsertionRecord {
    std::string site;
    int32_t node_id = -1;
    int64_t channels = 0;
    att::AttentionConfig cfg;
};

/// A backbone as a topologically ordered layer DAG. Immutable after build;
/// `init_weights` returns a weighted copy.
struct NetworkSpec {
    std::string preset;
    std::vector<LayerNode> nodes;  // nodes[i].id == i; inputs always precede
    std::vector<InsertionRecord> insertions;
    int64_t class_count = 0;
    std::vector<int64_t> input_shape;  // nominal (1, 3, H, W)
    int32_t output_node = -1;

    std::string to_json() const;
};

extern const std::vector<std::string> kPresetNames;

/// Canonical preset name from a CLI-friendly alias ("resnet18",
/// "resnet50_cifar", "mobilenet_v2", ...). Throws on unknown names.
std::string resolve_preset_name(const std::string& name);

/// Builds one of the paper's backbones, optionally with attention inserted
/// per policy. Unresolved attention knobs (r == 0) take preset defaults.
NetworkSpec build_preset(const std::string& name,
                         std::optional<att::AttentionConfig> attention = std::nullopt,
                         const InsertionPolicy& policy = {});

/// Per-node output shapes for a given input shape; throws if any node is
/// inconsistent.
std::vector<std::vector<int64_t>> infer_shapes(const NetworkSpec& spec,
                                               const std::vector<int64_t>& input_shape);

/// Deterministic weight initialization; BN gets gamma=1, beta=0, mean=0,
/// var=1.
NetworkSpec init_weights(const NetworkSpec& spec, uint64_t seed,
                         att::InitScheme scheme = att::InitScheme::kaiming_normal);

/// Whole-network forward to logits (N, classes). Requires init_weights to
/// have run. Reports the node id on any non-finite intermediate.
Tensor forward(const NetworkSpec& spec, const Tensor& input);

int64_t kaiming_fan_in(const std::vector<int64_t>& weight_shape);

/// Copies parameters of structurally matching non-attention nodes from
/// `src` into a copy of `dst` (matched by node name). Attention nodes keep
/// their own weights.
NetworkSpec adopt_backbone_weights(const NetworkSpec& dst, const NetworkSpec& src);

void save_weights(const NetworkSpec& spec, const std::string& dir);

}  // namespace attnforge::nets
