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
#include <vector>

#include "attnforge/backbones.hpp"

namespace attnforge::stats {

/// Counting convention, printed on every report: one FLOP is one
/// multiply-accumulate. Convolutions and linear layers count MACs (a
/// pointwise MLP counts once per spatial position), inference batch norm is
/// one MAC per element (one scale, one shift), activations, pooling and
/// gating multiplies are free. This convention reproduces the reference
/// baselines; see the golden table.
extern const char* const kFlopConvention;

struct StatRow {
    int32_t node_id = -1;
    std::string kind;
    std::string name;
    std::vector<int64_t> out_shape;
    int64_t params = 0;
    int64_t macs = 0;
};

struct StatReport {
    std::string preset;
    std::vector<int64_t> input_shape;  // empty for parameter-only reports
    std::vector<StatRow> rows;
    int64_t total_params = 0;
    int64_t total_macs = 0;

    std::string to_json() const;
    std::string to_csv() const;
    std::string to_text() const;
};

/// Learnable-scalar ledger; independent of input shape.
StatReport count_params(const nets::NetworkSpec& spec);

/// Parameter + MAC ledger at the given input shape.
StatReport count_flops(const nets::NetworkSpec& spec, const std::vector<int64_t>& input_shape);

/// One transcribed row of the reference tables.
struct GoldenTarget {
    std::string name;        // e.g. "ResNet 18 + GAM"
    std::string table;       // source table id
    std::string arch;        // preset alias
    std::string att = "none";
    int64_t r = 0;           // 0 = preset default
    int64_t g = 1;
    std::string policy;      // "" = mechanism default
    bool channel_only = false;
    bool spatial_only = false;
    bool wmp = false;
    std::vector<int64_t> input_shape;
    double params = 0.0;
    double flops = 0.0;
    double tol_params = 0.01;
    double tol_flops = 0.02;
    bool assert_params = false;
    bool assert_flops = false;
    bool calibrate = false;  // include in the GAM placement search targets
    std::string note;
};

std::vector<GoldenTarget> load_golden(const std::string& path);
const GoldenTarget& find_target(const std::vector<GoldenTarget>& targets, const std::string& name);

att::AttentionConfig target_attention_config(const GoldenTarget& t);
nets::NetworkSpec build_for_target(const GoldenTarget& t);

struct GoldenResult {
    GoldenTarget target;
    bool buildable = true;
    std::string error;
    int64_t our_params = 0;
    int64_t our_macs = 0;
    double dev_params = 0.0;  // |ours - paper| / paper
    double dev_flops = 0.0;
    bool pass_params = false;
    bool pass_flops = false;

    /// False when an asserted metric fails or the row cannot be built.
    bool acceptable() const;
};

/// Compares an existing report against one transcribed row.
GoldenResult compare_report(const StatReport& report, const GoldenTarget& target);

/// Builds and evaluates every row (rows that violate a config invariant are
/// reported as unbuildable, not thrown).
std::vector<GoldenResult> evaluate_golden(const std::vector<GoldenTarget>& targets);

std::string golden_table_text(const std::vector<GoldenResult>& results);

// -- GAM placement calibration ----------------------------------------

struct CalibTarget {
    std::string label;
    bool is_flops = false;
    bool channel_only = false;
    bool spatial_only = false;
    int64_t g = 1;
    double value = 0.0;
    std::vector<int64_t> input_shape;
};

struct CalibConfig {
    int64_t r = 0;
    nets::InsertionSite policy = nets::InsertionSite::stage_ends;
    std::string str() const;
};

struct CalibRow {
    CalibConfig cfg;
    bool valid = true;
    std::string invalid_reason;
    std::vector<double> deviations;  // aligned with the target list
    double max_dev = 0.0;
};

/// GAM calibration targets for one architecture, drawn from the golden rows
/// flagged `calibrate`.
std::vector<CalibTarget> gam_calibration_targets(const std::string& arch,
                                                 const std::vector<GoldenTarget>& golden);

/// Exhaustive parameter/FLOP evaluation of every (r, policy) configuration
/// against the targets (each target fixes its own group count). Ranked by
/// max relative deviation, then by the remaining deviations, then by config
/// name; invalid configurations sort last. Evaluation parallelizes over
/// configurations, capped by ATTNFORGE_THREADS.
std::vector<CalibRow> calibrate_placement(
    const std::string& arch, const std::vector<CalibTarget>& targets,
    const std::vector<int64_t>& rs = {2, 4, 8, 16},
    const std::vector<nets::InsertionSite>& policies = {nets::InsertionSite::stage_ends,
                                                        nets::InsertionSite::between_stages,
                                                        nets::InsertionSite::per_block});

std::string calibration_markdown(const std::string& arch, const std::vector<CalibTarget>& targets,
                                 const std::vector<CalibRow>& rows);

int64_t worker_cap();  // ATTNFORGE_THREADS, default hardware concurrency

}  // namespace attnforge::stats
