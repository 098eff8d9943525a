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

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnforge/analysis.hpp"
#include "attnforge/attention.hpp"
#include "attnforge/autodiff.hpp"
#include "attnforge/backbones.hpp"
#include "attnforge/gtf.hpp"
#include "attnforge/rng.hpp"

namespace {

using namespace attnforge;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitAssert = 3;

#ifndef ATTNFORGE_DATA_DIR
#define ATTNFORGE_DATA_DIR "data"
#endif

std::string default_golden_path() {
    if (const char* env = std::getenv("ATTNFORGE_GOLDEN")) return env;
    return std::string(ATTNFORGE_DATA_DIR) + "/golden_tables.json";
}

std::vector<int64_t> parse_shape(const std::string& s) {
    std::vector<int64_t> shape;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        const int64_t v = std::strtoll(part.c_str(), nullptr, 10);
        if (v <= 0) throw std::invalid_argument("bad shape '" + s + "'");
        shape.push_back(v);
    }
    if (shape.empty()) throw std::invalid_argument("bad shape '" + s + "'");
    return shape;
}

void emit(const std::string& content, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << content;
        if (!content.empty() && content.back() != '\n') std::cout << "\n";
    } else {
        std::ofstream f(out_path);
        if (!f) throw std::runtime_error("cannot write " + out_path);
        f << content;
    }
}

struct AttentionFlags {
    std::string att = "none";
    int64_t r = 0;
    int64_t g = 1;
    std::string policy;
    bool ch_only = false;
    bool sp_only = false;
    bool wmp = false;
    bool stride2 = false;
    int64_t kernel = 7;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--att", att, "attention mechanism: none|gam|se|bam|cbam");
        cmd->add_option("--r", r, "reduction ratio (0 = preset default)");
        cmd->add_option("--g", g, "group count for the GAM spatial convs");
        cmd->add_option("--policy", policy,
                        "insertion policy: stage_ends|between_stages|per_block (default: per mechanism)");
        cmd->add_flag("--ch-only", ch_only, "channel submodule only (GAM ablation)");
        cmd->add_flag("--sp-only", sp_only, "spatial submodule only (GAM ablation)");
        cmd->add_flag("--wmp", wmp, "max-pool variant of the spatial submodule");
        cmd->add_flag("--stride2", stride2, "stride-2 first spatial conv variant");
        cmd->add_option("--kernel", kernel, "spatial conv kernel size (odd)");
    }

    std::optional<att::AttentionConfig> config() const {
        if (att == "none") return std::nullopt;
        att::AttentionConfig cfg;
        cfg.mechanism = att::mechanism_from_string(att);
        cfg.reduction = r;
        cfg.groups = g;
        if (ch_only && sp_only) throw std::invalid_argument("--ch-only and --sp-only are exclusive");
        if (ch_only) cfg.spatial_enabled = false;
        if (sp_only) cfg.channel_enabled = false;
        cfg.max_pool_variant = wmp;
        cfg.stride2_variant = stride2;
        cfg.spatial_kernel = kernel;
        return cfg;
    }

    nets::InsertionPolicy insertion_policy() const {
        nets::InsertionPolicy p;
        if (!policy.empty()) p.selector = nets::insertion_site_from_string(policy);
        return p;
    }
};

int64_t resolved_reduction(const nets::NetworkSpec& spec) {
    return spec.insertions.empty() ? 0 : spec.insertions.front().cfg.reduction;
}

int cmd_stats(const std::string& arch, const AttentionFlags& flags, const std::string& input,
              const std::string& format, const std::string& out, bool assert_golden,
              const std::string& golden_path) {
    nets::NetworkSpec spec = nets::build_preset(arch, flags.config(), flags.insertion_policy());
    const std::vector<int64_t> shape = parse_shape(input);
    stats::StatReport rep = stats::count_flops(spec, shape);

    if (format == "json") {
        emit(rep.to_json(), out);
    } else if (format == "csv") {
        emit(rep.to_csv(), out);
    } else {
        emit(rep.to_text(), out);
    }

    if (assert_golden) {
        auto golden = stats::load_golden(golden_path);
        const std::string preset = nets::resolve_preset_name(arch);
        const stats::GoldenTarget* match = nullptr;
        for (const auto& t : golden) {
            if (nets::resolve_preset_name(t.arch) != preset) continue;
            if (t.att != flags.att) continue;
            if (t.channel_only != flags.ch_only || t.spatial_only != flags.sp_only) continue;
            if (t.wmp != flags.wmp) continue;
            if (t.g != flags.g) continue;
            if (t.input_shape != shape) continue;
            if (t.att != "none" && t.r != 0 && t.r != resolved_reduction(spec)) continue;
            match = &t;
            break;
        }
        if (!match) {
            std::cerr << "no golden row matches this configuration\n";
            return kExitConfig;
        }
        auto res = stats::compare_report(rep, *match);
        std::cerr << "golden '" << match->name << "': params dev " << 100.0 * res.dev_params
                  << "% flops dev " << 100.0 * res.dev_flops << "%\n";
        const bool gated = match->assert_params || match->assert_flops;
        const bool ok = gated ? ((!match->assert_params || res.pass_params) &&
                                 (!match->assert_flops || res.pass_flops))
                              : (res.pass_params && res.pass_flops);
        if (!ok) return kExitAssert;
    }
    return kExitOk;
}

int cmd_golden(const std::string& golden_path, const std::string& arch_filter,
               const std::string& out) {
    auto golden = stats::load_golden(golden_path);
    if (!arch_filter.empty()) {
        const std::string preset = nets::resolve_preset_name(arch_filter);
        std::erase_if(golden, [&](const stats::GoldenTarget& t) {
            return nets::resolve_preset_name(t.arch) != preset;
        });
    }
    auto results = stats::evaluate_golden(golden);
    emit(stats::golden_table_text(results), out);

    bool ok = true;
    for (const auto& r : results) ok &= r.acceptable();
    return ok ? kExitOk : kExitAssert;
}

int cmd_gradcheck(const std::string& module, const std::string& shape_str, int64_t r, int64_t g,
                  bool wmp, bool ch_only, bool sp_only, double h, double tol, uint64_t seed,
                  const std::string& out) {
    const std::vector<int64_t> shape = parse_shape(shape_str);
    if (shape.size() != 4) {
        std::cerr << "gradcheck needs an NCHW shape\n";
        return kExitConfig;
    }

    att::AttentionConfig cfg;
    if (module == "gam") {
        cfg.mechanism = att::Mechanism::gam;
        if (ch_only) cfg.spatial_enabled = false;
        if (sp_only) cfg.channel_enabled = false;
    } else if (module == "gam_channel") {
        cfg.mechanism = att::Mechanism::gam;
        cfg.spatial_enabled = false;
    } else if (module == "gam_spatial") {
        cfg.mechanism = att::Mechanism::gam;
        cfg.channel_enabled = false;
    } else if (module == "se" || module == "bam" || module == "cbam") {
        cfg.mechanism = att::mechanism_from_string(module);
    } else {
        std::cerr << "unknown module '" << module << "'\n";
        return kExitConfig;
    }
    cfg.reduction = r;
    cfg.groups = g;
    cfg.max_pool_variant = wmp;

    Rng rng(seed);
    att::AttentionModule m = att::AttentionModule::init(shape[1], cfg, rng);
    Tensor x = rng.uniform_tensor(shape, -2.0, 2.0);

    auto inputs = m.gradcheck_inputs(x);
    for (const auto& in : inputs) {
        if (in.value.numel() > 10000) {
            std::cerr << "gradcheck guard: input '" << in.name << "' has " << in.value.numel()
                      << " elements (limit 10000); finite differences would be too slow\n";
            return kExitConfig;
        }
    }

    auto report = ad::grad_check(m.program(), inputs, h, tol,
                                 module + " " + shape_to_string(shape), seed + 1);
    emit(report.to_json(), out);
    std::cerr << (report.pass ? "PASS" : "FAIL") << " max_rel_err=" << report.max_rel_err << "\n";
    return report.pass ? kExitOk : kExitAssert;
}

int cmd_forward(const std::string& arch, const AttentionFlags& flags, const std::string& input,
                uint64_t seed, const std::string& out, const std::string& weights_dir) {
    nets::NetworkSpec spec = nets::build_preset(arch, flags.config(), flags.insertion_policy());
    spec = nets::init_weights(spec, seed);
    if (!weights_dir.empty()) nets::save_weights(spec, weights_dir);

    const std::vector<int64_t> shape = parse_shape(input);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    Tensor x = rng.uniform_tensor(shape, -1.0, 1.0);
    Tensor logits = nets::forward(spec, x);

    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        sum += logits[i];
        sq += logits[i] * logits[i];
    }
    std::ostringstream digest;
    digest.precision(12);
    digest << "digest sum=" << sum << " l2=" << std::sqrt(sq);
    std::cout << digest.str() << "\n";
    if (!out.empty()) write_gtf(out, logits);
    return kExitOk;
}

int cmd_calibrate(const std::string& arch, const std::string& golden_path, const std::string& out,
                  std::vector<int64_t> rs, std::vector<std::string> policy_names) {
    auto golden = stats::load_golden(golden_path);
    auto targets = stats::gam_calibration_targets(arch, golden);

    std::vector<nets::InsertionSite> policies;
    for (const auto& p : policy_names) policies.push_back(nets::insertion_site_from_string(p));
    auto rows = stats::calibrate_placement(arch, targets, rs, policies);
    emit(stats::calibration_markdown(arch, targets, rows), out);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attention/backbone workbench: cost ledgers, golden comparison, calibration, "
                 "gradient checks, seeded forwards"};
    app.require_subcommand(1);

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "per-layer parameter and MAC ledger");
    std::string stats_arch, stats_input = "1x3x224x224", stats_format = "text", stats_out;
    bool stats_assert = false;
    std::string stats_golden = default_golden_path();
    AttentionFlags stats_flags;
    stats_cmd->add_option("--arch", stats_arch, "resnet18|resnet50|resnet50_cifar|mobilenet_v2")
        ->required();
    stats_flags.add_to(stats_cmd);
    stats_cmd->add_option("--input", stats_input, "input shape NxCxHxW");
    stats_cmd->add_option("--format", stats_format, "text|json|csv");
    stats_cmd->add_option("--out", stats_out, "write the report to a file");
    stats_cmd->add_flag("--assert-golden", stats_assert, "exit 3 unless the matching golden row passes");
    stats_cmd->add_option("--golden-file", stats_golden, "golden table path");

    // golden
    auto* golden_cmd = app.add_subcommand("golden", "evaluate every transcribed reference row");
    std::string golden_path = default_golden_path(), golden_arch, golden_out;
    golden_cmd->add_option("--golden-file", golden_path, "golden table path");
    golden_cmd->add_option("--arch", golden_arch, "restrict to one architecture");
    golden_cmd->add_option("--out", golden_out, "write the table to a file");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check of a module");
    std::string grad_module = "gam", grad_shape = "1x8x6x6", grad_out;
    int64_t grad_r = 2, grad_g = 1;
    bool grad_wmp = false, grad_ch = false, grad_sp = false;
    double grad_h = 1e-6, grad_tol = 1e-5;
    uint64_t grad_seed = 7;
    grad_cmd->add_option("--module", grad_module, "gam|gam_channel|gam_spatial|se|bam|cbam");
    grad_cmd->add_option("--shape", grad_shape, "input shape NxCxHxW");
    grad_cmd->add_option("--r", grad_r, "reduction ratio");
    grad_cmd->add_option("--g", grad_g, "groups (GAM spatial)");
    grad_cmd->add_flag("--wmp", grad_wmp, "max-pool variant");
    grad_cmd->add_flag("--ch-only", grad_ch, "channel submodule only");
    grad_cmd->add_flag("--sp-only", grad_sp, "spatial submodule only");
    grad_cmd->add_option("--step", grad_h, "finite-difference step h");
    grad_cmd->add_option("--tol", grad_tol, "relative-error tolerance");
    grad_cmd->add_option("--seed", grad_seed, "weight/input seed");
    grad_cmd->add_option("--out", grad_out, "write the JSON report to a file");

    // forward
    auto* fwd_cmd = app.add_subcommand("forward", "seeded whole-network forward with digest");
    std::string fwd_arch, fwd_input = "1x3x64x64", fwd_out, fwd_weights;
    uint64_t fwd_seed = 42;
    AttentionFlags fwd_flags;
    fwd_cmd->add_option("--arch", fwd_arch, "architecture preset")->required();
    fwd_flags.add_to(fwd_cmd);
    fwd_cmd->add_option("--input", fwd_input, "input shape NxCxHxW");
    fwd_cmd->add_option("--seed", fwd_seed, "weight/input seed")->required();
    fwd_cmd->add_option("--out", fwd_out, "write logits as a GTF1 tensor");
    fwd_cmd->add_option("--save-weights", fwd_weights, "dump the weight bundle to a directory");

    // calibrate
    auto* cal_cmd = app.add_subcommand("calibrate", "GAM placement search against golden targets");
    std::string cal_arch, cal_out, cal_golden = default_golden_path();
    std::vector<int64_t> cal_rs = {2, 4, 8, 16};
    std::vector<std::string> cal_policies = {"stage_ends", "between_stages", "per_block"};
    cal_cmd->add_option("--arch", cal_arch, "architecture preset")->required();
    cal_cmd->add_option("--golden-file", cal_golden, "golden table path");
    cal_cmd->add_option("--out", cal_out, "write the Markdown report to a file");
    cal_cmd->add_option("--rs", cal_rs, "reduction ratios to search");
    cal_cmd->add_option("--policies", cal_policies, "placement policies to search");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (stats_cmd->parsed()) {
            return cmd_stats(stats_arch, stats_flags, stats_input, stats_format, stats_out,
                             stats_assert, stats_golden);
        }
        if (golden_cmd->parsed()) return cmd_golden(golden_path, golden_arch, golden_out);
        if (grad_cmd->parsed()) {
            return cmd_gradcheck(grad_module, grad_shape, grad_r, grad_g, grad_wmp, grad_ch,
                                 grad_sp, grad_h, grad_tol, grad_seed, grad_out);
        }
        if (fwd_cmd->parsed()) {
            return cmd_forward(fwd_arch, fwd_flags, fwd_input, fwd_seed, fwd_out, fwd_weights);
        }
        if (cal_cmd->parsed()) {
            return cmd_calibrate(cal_arch, cal_golden, cal_out, cal_rs, cal_policies);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
