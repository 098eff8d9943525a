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

#include "attnforge/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace attnforge::stats {

const char* const kFlopConvention =
    "1 FLOP = 1 multiply-accumulate (conv/linear MACs; pointwise MLPs count per spatial "
    "position; batch norm 1 MAC/element; activations, pooling and gates free)";

namespace {

int64_t node_param_count(const nets::LayerNode& n) {
    using nets::LayerKind;
    switch (n.kind) {
        case LayerKind::conv:
            return n.out_ch * (n.in_ch / n.conv.groups) * n.kernel_h * n.kernel_w +
                   (n.has_bias ? n.out_ch : 0);
        case LayerKind::bn: return 2 * n.in_ch;
        case LayerKind::linear: return n.in_features * n.out_features + n.out_features;
        case LayerKind::attention: return att::attention_param_count(n.in_ch, n.att_cfg);
        default: return 0;
    }
}

int64_t node_mac_count(const nets::LayerNode& n, const std::vector<int64_t>& in_shape,
                       const std::vector<int64_t>& out_shape) {
    using nets::LayerKind;
    switch (n.kind) {
        case LayerKind::conv: {
            const int64_t out_numel = shape_numel(out_shape);
            return (n.in_ch / n.conv.groups) * n.kernel_h * n.kernel_w * out_numel;
        }
        case LayerKind::bn: return shape_numel(out_shape);
        case LayerKind::linear: return out_shape[0] * n.in_features * n.out_features;
        case LayerKind::attention:
            return in_shape[0] *
                   att::attention_mac_count(n.in_ch, in_shape[2], in_shape[3], n.att_cfg);
        default: return 0;  // activations, pooling, flatten, residual adds
    }
}

StatReport make_report(const nets::NetworkSpec& spec, const std::vector<int64_t>* input_shape) {
    StatReport rep;
    rep.preset = spec.preset;
    std::vector<std::vector<int64_t>> shapes;
    if (input_shape) {
        rep.input_shape = *input_shape;
        shapes = nets::infer_shapes(spec, *input_shape);
    }
    for (const nets::LayerNode& n : spec.nodes) {
        StatRow row;
        row.node_id = n.id;
        row.kind = nets::to_string(n.kind);
        row.name = n.name;
        row.params = node_param_count(n);
        if (input_shape) {
            row.out_shape = shapes[static_cast<size_t>(n.id)];
            const auto& in_shape =
                n.inputs.empty() ? *input_shape : shapes[static_cast<size_t>(n.inputs[0])];
            row.macs = node_mac_count(n, in_shape, row.out_shape);
        }
        rep.total_params += row.params;
        rep.total_macs += row.macs;
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

}  // namespace

StatReport count_params(const nets::NetworkSpec& spec) { return make_report(spec, nullptr); }

StatReport count_flops(const nets::NetworkSpec& spec, const std::vector<int64_t>& input_shape) {
    return make_report(spec, &input_shape);
}

std::string StatReport::to_json() const {
    nlohmann::json j;
    j["preset"] = preset;
    j["convention"] = kFlopConvention;
    j["input_shape"] = input_shape;
    j["total_params"] = total_params;
    j["total_macs"] = total_macs;
    j["rows"] = nlohmann::json::array();
    for (const StatRow& r : rows) {
        nlohmann::json jr;
        jr["node_id"] = r.node_id;
        jr["kind"] = r.kind;
        jr["name"] = r.name;
        jr["out_shape"] = r.out_shape;
        jr["params"] = r.params;
        jr["macs"] = r.macs;
        j["rows"].push_back(jr);
    }
    return j.dump(2);
}

std::string StatReport::to_csv() const {
    std::ostringstream os;
    os << "# convention: " << kFlopConvention << "\n";
    os << "node_id,kind,name,out_shape,params,macs\n";
    for (const StatRow& r : rows) {
        os << r.node_id << "," << r.kind << "," << r.name << ","
           << shape_to_string(r.out_shape) << "," << r.params << "," << r.macs << "\n";
    }
    os << ",,total," << "," << total_params << "," << total_macs << "\n";
    return os.str();
}

std::string StatReport::to_text() const {
    std::ostringstream os;
    os << "model: " << preset;
    if (!input_shape.empty()) os << "  input " << shape_to_string(input_shape);
    os << "\nconvention: " << kFlopConvention << "\n\n";
    os << std::left << std::setw(5) << "id" << std::setw(16) << "kind" << std::setw(34) << "name"
       << std::setw(18) << "out shape" << std::right << std::setw(12) << "params" << std::setw(16)
       << "macs" << "\n";
    for (const StatRow& r : rows) {
        os << std::left << std::setw(5) << r.node_id << std::setw(16) << r.kind << std::setw(34)
           << r.name << std::setw(18) << shape_to_string(r.out_shape) << std::right << std::setw(12)
           << r.params << std::setw(16) << r.macs << "\n";
    }
    os << "\ntotal params " << total_params << " (" << std::fixed << std::setprecision(2)
       << static_cast<double>(total_params) / 1e6 << "M)";
    if (!input_shape.empty()) {
        os << "  total macs " << total_macs << " (" << std::setprecision(2)
           << static_cast<double>(total_macs) / 1e9 << "G)";
    }
    os << "\n";
    return os.str();
}

std::vector<GoldenTarget> load_golden(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_golden: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    std::vector<GoldenTarget> out;
    for (const auto& jr : j.at("rows")) {
        GoldenTarget t;
        t.name = jr.at("name").get<std::string>();
        t.table = jr.at("table").get<std::string>();
        t.arch = jr.at("arch").get<std::string>();
        t.att = jr.value("att", "none");
        t.r = jr.value("r", static_cast<int64_t>(0));
        t.g = jr.value("g", static_cast<int64_t>(1));
        t.policy = jr.value("policy", "");
        t.channel_only = jr.value("channel_only", false);
        t.spatial_only = jr.value("spatial_only", false);
        t.wmp = jr.value("wmp", false);
        t.input_shape = jr.at("input").get<std::vector<int64_t>>();
        t.params = jr.at("params").get<double>();
        t.flops = jr.at("flops").get<double>();
        t.tol_params = jr.value("tol_params", 0.01);
        t.tol_flops = jr.value("tol_flops", 0.02);
        t.assert_params = jr.value("assert_params", false);
        t.assert_flops = jr.value("assert_flops", false);
        t.calibrate = jr.value("calibrate", false);
        t.note = jr.value("note", "");
        out.push_back(std::move(t));
    }
    return out;
}

const GoldenTarget& find_target(const std::vector<GoldenTarget>& targets, const std::string& name) {
    for (const GoldenTarget& t : targets) {
        if (t.name == name) return t;
    }
    throw std::invalid_argument("golden: unknown target name '" + name + "'");
}

att::AttentionConfig target_attention_config(const GoldenTarget& t) {
    att::AttentionConfig cfg;
    cfg.mechanism = att::mechanism_from_string(t.att);
    cfg.reduction = t.r;
    cfg.groups = t.g;
    if (t.channel_only) cfg.spatial_enabled = false;
    if (t.spatial_only) cfg.channel_enabled = false;
    cfg.max_pool_variant = t.wmp;
    return cfg;
}

nets::NetworkSpec build_for_target(const GoldenTarget& t) {
    std::optional<att::AttentionConfig> cfg;
    nets::InsertionPolicy policy;
    if (t.att != "none") {
        cfg = target_attention_config(t);
        if (!t.policy.empty()) policy.selector = nets::insertion_site_from_string(t.policy);
    }
    return nets::build_preset(t.arch, cfg, policy);
}

bool GoldenResult::acceptable() const {
    if (!buildable) return !(target.assert_params || target.assert_flops);
    if (target.assert_params && !pass_params) return false;
    if (target.assert_flops && !pass_flops) return false;
    return true;
}

GoldenResult compare_report(const StatReport& report, const GoldenTarget& target) {
    GoldenResult res;
    res.target = target;
    res.our_params = report.total_params;
    res.our_macs = report.total_macs;
    res.dev_params = std::abs(static_cast<double>(res.our_params) - target.params) / target.params;
    res.dev_flops = std::abs(static_cast<double>(res.our_macs) - target.flops) / target.flops;
    res.pass_params = res.dev_params <= target.tol_params;
    res.pass_flops = res.dev_flops <= target.tol_flops;
    return res;
}

std::vector<GoldenResult> evaluate_golden(const std::vector<GoldenTarget>& targets) {
    std::vector<GoldenResult> out;
    out.reserve(targets.size());
    for (const GoldenTarget& t : targets) {
        GoldenResult res;
        res.target = t;
        try {
            nets::NetworkSpec spec = build_for_target(t);
            res = compare_report(count_flops(spec, t.input_shape), t);
        } catch (const std::exception& e) {
            res.buildable = false;
            res.error = e.what();
        }
        out.push_back(std::move(res));
    }
    return out;
}

std::string golden_table_text(const std::vector<GoldenResult>& results) {
    std::ostringstream os;
    os << "convention: " << kFlopConvention << "\n\n";
    os << std::left << std::setw(28) << "row" << std::setw(6) << "table" << std::right
       << std::setw(12) << "params" << std::setw(12) << "paper" << std::setw(9) << "dev%"
       << std::setw(12) << "macs" << std::setw(12) << "paper" << std::setw(9) << "dev%"
       << "  status\n";
    auto fmt_m = [](double v) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(2) << v / 1e6 << "M";
        return s.str();
    };
    auto fmt_g = [](double v) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(2) << v / 1e9 << "G";
        return s.str();
    };
    for (const GoldenResult& r : results) {
        os << std::left << std::setw(28) << r.target.name << std::setw(6) << r.target.table;
        if (!r.buildable) {
            os << "  not buildable under config invariants: " << r.error << "\n";
            continue;
        }
        os << std::right << std::setw(12) << fmt_m(static_cast<double>(r.our_params)) << std::setw(12)
           << fmt_m(r.target.params) << std::setw(8) << std::fixed << std::setprecision(3)
           << 100.0 * r.dev_params << "%" << std::setw(12) << fmt_g(static_cast<double>(r.our_macs))
           << std::setw(12) << fmt_g(r.target.flops) << std::setw(8) << 100.0 * r.dev_flops << "%";
        os << "  " << (r.pass_params ? "P" : "f") << (r.pass_flops ? "F" : "f");
        if (!r.target.assert_params && !r.target.assert_flops) os << " (informational)";
        if (!r.target.note.empty()) os << "  # " << r.target.note;
        os << "\n";
    }
    return os.str();
}

int64_t worker_cap() {
    if (const char* env = std::getenv("ATTNFORGE_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<int64_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int64_t>(hw);
}

std::string CalibConfig::str() const {
    return "r=" + std::to_string(r) + "," + nets::to_string(policy);
}

std::vector<CalibTarget> gam_calibration_targets(const std::string& arch,
                                                 const std::vector<GoldenTarget>& golden) {
    const std::string preset = nets::resolve_preset_name(arch);
    std::vector<CalibTarget> targets;
    for (const GoldenTarget& g : golden) {
        if (!g.calibrate || g.att != "gam") continue;
        if (nets::resolve_preset_name(g.arch) != preset) continue;
        CalibTarget base;
        base.channel_only = g.channel_only;
        base.spatial_only = g.spatial_only;
        base.g = g.g;
        base.input_shape = g.input_shape;
        CalibTarget p = base;
        p.label = g.name + " params";
        p.is_flops = false;
        p.value = g.params;
        targets.push_back(p);
        CalibTarget f = base;
        f.label = g.name + " flops";
        f.is_flops = true;
        f.value = g.flops;
        targets.push_back(f);
    }
    if (targets.empty()) {
        throw std::invalid_argument("gam_calibration_targets: no calibration rows for " + arch);
    }
    return targets;
}

std::vector<CalibRow> calibrate_placement(const std::string& arch,
                                          const std::vector<CalibTarget>& targets,
                                          const std::vector<int64_t>& rs,
                                          const std::vector<nets::InsertionSite>& policies) {
    if (rs.empty() || policies.empty()) {
        throw std::invalid_argument("calibrate_placement: empty search space");
    }
    if (targets.empty()) throw std::invalid_argument("calibrate_placement: no targets");
    const std::string preset = nets::resolve_preset_name(arch);

    std::vector<CalibConfig> configs;
    for (int64_t r : rs) {
        for (nets::InsertionSite p : policies) configs.push_back({r, p});
    }

    auto evaluate = [&](const CalibConfig& cfg) {
        CalibRow row;
        row.cfg = cfg;
        for (const CalibTarget& t : targets) {
            try {
                att::AttentionConfig acfg;
                acfg.mechanism = att::Mechanism::gam;
                acfg.reduction = cfg.r;
                acfg.groups = t.g;
                if (t.channel_only) acfg.spatial_enabled = false;
                if (t.spatial_only) acfg.channel_enabled = false;
                nets::InsertionPolicy policy;
                policy.selector = cfg.policy;
                nets::NetworkSpec spec = nets::build_preset(preset, acfg, policy);
                const StatReport rep = count_flops(spec, t.input_shape);
                const double ours =
                    t.is_flops ? static_cast<double>(rep.total_macs) : static_cast<double>(rep.total_params);
                const double dev = std::abs(ours - t.value) / t.value;
                row.deviations.push_back(dev);
                row.max_dev = std::max(row.max_dev, dev);
            } catch (const std::exception& e) {
                row.valid = false;
                row.invalid_reason = e.what();
                return row;
            }
        }
        return row;
    };

    // Parallel over configurations; results land in fixed slots so ranking
    // stays deterministic.
    std::vector<CalibRow> rows(configs.size());
    const int64_t workers = std::min<int64_t>(worker_cap(), static_cast<int64_t>(configs.size()));
    std::vector<std::future<void>> futures;
    std::atomic<size_t> next{0};
    for (int64_t w = 0; w < workers; ++w) {
        futures.push_back(std::async(std::launch::async, [&]() {
            for (size_t i = next.fetch_add(1); i < configs.size(); i = next.fetch_add(1)) {
                rows[i] = evaluate(configs[i]);
            }
        }));
    }
    for (auto& f : futures) f.get();

    std::sort(rows.begin(), rows.end(), [](const CalibRow& a, const CalibRow& b) {
        if (a.valid != b.valid) return a.valid;
        if (!a.valid) return a.cfg.str() < b.cfg.str();
        if (a.max_dev != b.max_dev) return a.max_dev < b.max_dev;
        // tie-break: compare full deviation vectors, largest first
        auto da = a.deviations, db = b.deviations;
        std::sort(da.rbegin(), da.rend());
        std::sort(db.rbegin(), db.rend());
        if (da != db) return da < db;
        return a.cfg.str() < b.cfg.str();
    });
    return rows;
}

std::string calibration_markdown(const std::string& arch, const std::vector<CalibTarget>& targets,
                                 const std::vector<CalibRow>& rows) {
    std::ostringstream os;
    os << "# GAM placement calibration: " << arch << "\n\n";
    os << "Search over reduction ratio and attachment policy; every configuration is\n"
          "evaluated against all targets below (group count fixed per target) and ranked\n"
          "by the largest relative deviation.\n\n";
    os << "Counting convention: " << kFlopConvention << ".\n\n";
    os << "## Targets\n\n| target | reference value |\n|---|---|\n";
    for (const CalibTarget& t : targets) {
        os << "| " << t.label << " | " << std::fixed << std::setprecision(2)
           << (t.is_flops ? t.value / 1e9 : t.value / 1e6) << (t.is_flops ? "G" : "M") << " |\n";
    }
    os << "\n## Ranked configurations\n\n| rank | config |";
    for (const CalibTarget& t : targets) os << " " << t.label << " dev |";
    os << " max dev |\n|---|---|";
    for (size_t i = 0; i < targets.size(); ++i) os << "---|";
    os << "---|\n";
    int rank = 0;
    for (const CalibRow& row : rows) {
        if (!row.valid) continue;
        os << "| " << ++rank << " | " << row.cfg.str() << " |";
        for (double d : row.deviations) {
            os << " " << std::fixed << std::setprecision(3) << 100.0 * d << "% |";
        }
        os << " " << std::setprecision(3) << 100.0 * row.max_dev << "% |\n";
    }
    bool any_invalid = false;
    for (const CalibRow& row : rows) {
        if (!row.valid) {
            if (!any_invalid) {
                os << "\n## Configurations outside the validity contract\n\n";
                any_invalid = true;
            }
            os << "- " << row.cfg.str() << ": " << row.invalid_reason << "\n";
        }
    }
    if (!rows.empty() && rows.front().valid) {
        os << "\nBest configuration: **" << rows.front().cfg.str() << "** with max deviation "
           << std::fixed << std::setprecision(3) << 100.0 * rows.front().max_dev << "%.\n";
    }
    return os.str();
}

}  // namespace attnforge::stats
