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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "attnforge/attention.hpp"
#include "attnforge/ops.hpp"
#include "attnforge/rng.hpp"
#include "oracles.hpp"

using namespace attnforge;
using att::AttentionConfig;
using att::AttentionModule;
using att::Mechanism;

namespace {

AttentionModule make_module(Mechanism mech, int64_t C, int64_t r, uint64_t seed,
                            AttentionConfig base = {}) {
    base.mechanism = mech;
    base.reduction = r;
    Rng rng(seed);
    return AttentionModule::init(C, base, rng);
}

void zero_params(AttentionModule& m) {
    for (const auto& [name, t] : m.params()) m.set_param(name, Tensor::zeros(t.shape()));
}

// Permutes the H*W positions of every channel plane identically.
Tensor shuffle_positions(const Tensor& x, const std::vector<int64_t>& perm) {
    const int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    Tensor out(x.shape());
    const int64_t hw = H * W;
    for (int64_t nc = 0; nc < N * C; ++nc) {
        for (int64_t i = 0; i < hw; ++i) {
            out[nc * hw + i] = x[nc * hw + perm[static_cast<size_t>(i)]];
        }
    }
    return out;
}

}  // namespace

TEST_CASE("gam channel: zero weights give a flat 0.5 gate") {
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 31);
    zero_params(m);
    Rng rng(32);
    Tensor x = rng.uniform_tensor({2, 8, 4, 4}, -2.0, 2.0);
    auto [mc, f2] = att::gam_channel_forward(x, m);
    for (int64_t i = 0; i < mc.numel(); ++i) {
        CHECK(mc[i] == 0.5);
        CHECK(f2[i] == 0.5 * x[i]);
    }
}

TEST_CASE("gam channel gate is spatial-permutation-equivariant, exactly") {
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 33);
    Rng rng(34);
    Tensor x = rng.uniform_tensor({2, 8, 3, 5}, -2.0, 2.0);

    std::vector<int64_t> perm(15);
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
    for (size_t i = perm.size() - 1; i > 0; --i) {
        std::swap(perm[i], perm[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)))]);
    }
    Tensor mc_then_shuffle = shuffle_positions(m.gam_channel_gate(x), perm);
    Tensor shuffle_then_mc = m.gam_channel_gate(shuffle_positions(x, perm));
    CHECK(mc_then_shuffle.bit_equal(shuffle_then_mc));
}

TEST_CASE("gam channel vs positionwise MLP loop oracle") {
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 35);
    Rng rng(36);
    Tensor x = rng.uniform_tensor({2, 8, 4, 4}, -2.0, 2.0);
    auto [mc, f2] = m.gam_channel(x);

    const Tensor& w1 = m.param("channel.w1");
    const Tensor& b1 = m.param("channel.b1");
    const Tensor& w2 = m.param("channel.w2");
    const Tensor& b2 = m.param("channel.b2");
    const int64_t C = 8, cr = 4;
    double worst = 0.0;
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t h = 0; h < 4; ++h)
            for (int64_t w = 0; w < 4; ++w) {
                std::vector<double> hid(static_cast<size_t>(cr), 0.0);
                for (int64_t j = 0; j < cr; ++j) {
                    double acc = b1[j];
                    for (int64_t c = 0; c < C; ++c) acc += x.at({n, c, h, w}) * w1.at({c, j});
                    hid[static_cast<size_t>(j)] = std::max(0.0, acc);
                }
                for (int64_t c = 0; c < C; ++c) {
                    double acc = b2[c];
                    for (int64_t j = 0; j < cr; ++j) acc += hid[static_cast<size_t>(j)] * w2.at({j, c});
                    const double gate = 1.0 / (1.0 + std::exp(-acc));
                    worst = std::max(worst, std::abs(gate - mc.at({n, c, h, w})));
                    worst = std::max(worst, std::abs(gate * x.at({n, c, h, w}) - f2.at({n, c, h, w})));
                }
            }
    CHECK(worst <= 1e-12);
}

TEST_CASE("gam spatial: zero conv weights and beta give a flat 0.5 gate") {
    AttentionModule m = make_module(Mechanism::gam, 8, 4, 37);
    zero_params(m);
    Rng rng(38);
    Tensor f2 = rng.uniform_tensor({1, 8, 6, 6}, -2.0, 2.0);
    Tensor f3 = att::gam_spatial_forward(f2, m);
    for (int64_t i = 0; i < f3.numel(); ++i) CHECK(f3[i] == 0.5 * f2[i]);
}

TEST_CASE("gam spatial vs op-composition oracle (r=4, g=1)") {
    AttentionModule m = make_module(Mechanism::gam, 8, 4, 39);
    Rng rng(40);
    Tensor f2 = rng.uniform_tensor({1, 8, 6, 6}, -2.0, 2.0);
    Tensor f3 = m.gam_spatial(f2);

    Conv2dParams p;
    p.pad_h = p.pad_w = 3;
    Tensor h = conv2d(f2, m.param("spatial.conv1.weight"), nullptr, p);
    h = batchnorm_infer(h, m.param("spatial.bn1.gamma"), m.param("spatial.bn1.beta"),
                        m.buffer("spatial.bn1.mean"), m.buffer("spatial.bn1.var"));
    h = relu(h);
    h = conv2d(h, m.param("spatial.conv2.weight"), nullptr, p);
    h = batchnorm_infer(h, m.param("spatial.bn2.gamma"), m.param("spatial.bn2.beta"),
                        m.buffer("spatial.bn2.mean"), m.buffer("spatial.bn2.var"));
    Tensor expect = mul(sigmoid(h), f2);
    CHECK(oracle::max_abs_diff(f3, expect) <= 1e-12);
}

TEST_CASE("gam grouped path equals masked dense conv path with explicit shuffle") {
    AttentionConfig base;
    base.groups = 2;
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 41, base);
    Rng rng(42);
    Tensor f2 = rng.uniform_tensor({1, 8, 5, 5}, -2.0, 2.0);
    Tensor got = m.gam_spatial(f2);

    // same computation with dense conv weights masked to the group blocks
    Tensor w1d = oracle::grouped_to_masked_dense(m.param("spatial.conv1.weight"), 2, 8);
    Tensor w2d = oracle::grouped_to_masked_dense(m.param("spatial.conv2.weight"), 2, 4);
    Conv2dParams p;
    p.pad_h = p.pad_w = 3;
    Tensor h = conv2d(f2, w1d, nullptr, p);
    h = batchnorm_infer(h, m.param("spatial.bn1.gamma"), m.param("spatial.bn1.beta"),
                        m.buffer("spatial.bn1.mean"), m.buffer("spatial.bn1.var"));
    h = relu(h);
    h = channel_shuffle(h, 2);
    h = conv2d(h, w2d, nullptr, p);
    h = batchnorm_infer(h, m.param("spatial.bn2.gamma"), m.param("spatial.bn2.beta"),
                        m.buffer("spatial.bn2.mean"), m.buffer("spatial.bn2.var"));
    Tensor expect = mul(sigmoid(h), f2);
    CHECK(oracle::max_abs_diff(got, expect) <= 1e-12);
}

TEST_CASE("attach_gam ablation switches") {
    Rng rng(43);
    Tensor x = rng.uniform_tensor({1, 8, 5, 5}, -2.0, 2.0);

    AttentionConfig both_off;
    both_off.mechanism = Mechanism::gam;
    both_off.reduction = 2;
    both_off.channel_enabled = false;
    both_off.spatial_enabled = false;
    Rng r2(44);
    CHECK_THROWS_AS(AttentionModule::init(8, both_off, r2), std::invalid_argument);

    AttentionConfig sp_only;
    sp_only.channel_enabled = false;
    AttentionModule msp = make_module(Mechanism::gam, 8, 2, 45, sp_only);
    CHECK(att::attach_gam(x, msp).bit_equal(msp.gam_spatial(x)));

    AttentionConfig ch_only;
    ch_only.spatial_enabled = false;
    AttentionModule mch = make_module(Mechanism::gam, 8, 2, 46, ch_only);
    CHECK(att::attach_gam(x, mch).bit_equal(mch.gam_channel(x).second));
}

TEST_CASE("gating bound: |out| <= |in|, strict for nonzero entries") {
    Rng rng(47);
    for (uint64_t seed = 100; seed < 103; ++seed) {
        Tensor x = rng.uniform_tensor({1, 8, 6, 6}, -3.0, 3.0);
        for (Mechanism mech : {Mechanism::gam, Mechanism::se, Mechanism::cbam}) {
            AttentionModule m = make_module(mech, 8, 2, seed);
            Tensor y = m.forward(x);
            for (int64_t i = 0; i < x.numel(); ++i) {
                if (x[i] != 0.0) {
                    CHECK(std::abs(y[i]) < std::abs(x[i]));
                } else {
                    CHECK(y[i] == 0.0);
                }
            }
        }
        AttentionModule bam = make_module(Mechanism::bam, 8, 2, seed);
        Tensor y = bam.forward(x);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(y[i]) <= 2.0 * std::abs(x[i]));
    }
}

TEST_CASE("se: zero weights give 0.5 gate; gate constant over space") {
    AttentionModule m = make_module(Mechanism::se, 8, 2, 48);
    {
        AttentionModule z = make_module(Mechanism::se, 8, 2, 49);
        zero_params(z);
        Rng rng(50);
        Tensor x = rng.uniform_tensor({2, 8, 4, 4}, -2.0, 2.0);
        Tensor y = att::se_forward(x, z);
        for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.5 * x[i]);
    }
    // gate invariant to spatial permutation of the input
    Rng rng(51);
    Tensor x = rng.uniform_tensor({1, 8, 3, 3}, -2.0, 2.0);
    std::vector<int64_t> perm = {8, 2, 5, 0, 7, 1, 4, 3, 6};
    Tensor y1 = m.forward(x);
    Tensor y2 = m.forward(shuffle_positions(x, perm));
    // gates: out/in, compare at position 0 of y1 vs permuted counterpart
    const int64_t hw = 9;
    for (int64_t c = 0; c < 8; ++c) {
        for (int64_t i = 0; i < hw; ++i) {
            if (x[c * hw + perm[static_cast<size_t>(i)]] == 0.0) continue;
            const double g1 = y1[c * hw + perm[static_cast<size_t>(i)]] /
                              x[c * hw + perm[static_cast<size_t>(i)]];
            const double g2 = y2[c * hw + i] / x[c * hw + perm[static_cast<size_t>(i)]];
            CHECK(std::abs(g1 - g2) <= 1e-15);
        }
    }
}

TEST_CASE("gate constancy: SE constant over space, CBAM spatial constant over channels") {
    Rng rng(52);
    // power-of-two entries make the gating multiply (and its inverse) exact,
    // so constancy can be asserted as exact zero variance
    Tensor x({2, 8, 4, 4});
    for (int64_t i = 0; i < x.numel(); ++i) {
        x[i] = std::ldexp(1.0, static_cast<int>(rng.uniform_int(-2, 3)));
    }

    AttentionModule se = make_module(Mechanism::se, 8, 2, 53);
    Tensor ys = se.forward(x);
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t c = 0; c < 8; ++c) {
            const double g0 = ys.at({n, c, 0, 0}) / x.at({n, c, 0, 0});
            for (int64_t h = 0; h < 4; ++h)
                for (int64_t w = 0; w < 4; ++w) {
                    CHECK(std::abs(ys.at({n, c, h, w}) / x.at({n, c, h, w}) - g0) == 0.0);
                }
        }

    // CBAM: with the channel gate disabled by zeroed MLP (gate 0.5 everywhere),
    // the remaining spatial gate must be channel-constant.
    AttentionModule cb = make_module(Mechanism::cbam, 8, 2, 54);
    Tensor yc = cb.forward(x);
    // spatial gate = yc / (x * channel_gate); channel gate is constant over
    // space, so the ratio yc(c,h,w)/yc(c,h',w') normalized by x must agree
    // across channels. Simpler: gate_s(h,w) = yc/(x*gc(c)); compare the
    // product structure: for fixed (h,w), yc/x across c is gc(c)*gs(h,w).
    // Check gs extracted from two channels matches.
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t h = 0; h < 4; ++h)
            for (int64_t w = 0; w < 4; ++w) {
                const double q0 = yc.at({n, 0, h, w}) / x.at({n, 0, h, w});
                const double q1 = yc.at({n, 0, 0, 0}) / x.at({n, 0, 0, 0});
                const double q2 = yc.at({n, 5, h, w}) / x.at({n, 5, h, w});
                const double q3 = yc.at({n, 5, 0, 0}) / x.at({n, 5, 0, 0});
                // gs(h,w)/gs(0,0) must be channel-independent
                CHECK(std::abs(q0 / q1 - q2 / q3) <= 1e-12);
            }

    // GAM channel gate varies across space on random inputs
    AttentionModule gam = make_module(Mechanism::gam, 8, 2, 55);
    Tensor mc = gam.gam_channel_gate(x);
    double var = 0.0;
    for (int64_t c = 0; c < 8; ++c) {
        const double g0 = mc.at({0, c, 0, 0});
        for (int64_t h = 0; h < 4; ++h)
            for (int64_t w = 0; w < 4; ++w) var += std::abs(mc.at({0, c, h, w}) - g0);
    }
    CHECK(var > 1e-6);
}

TEST_CASE("cbam spatial map on channel-constant input vs (mean,max) loop oracle") {
    AttentionModule m = make_module(Mechanism::cbam, 8, 2, 56);
    Rng rng(57);
    // constant across channels: mean map == max map == the plane itself
    Tensor plane = rng.uniform_tensor({1, 1, 6, 6}, -2.0, 2.0);
    Tensor x({1, 8, 6, 6});
    for (int64_t c = 0; c < 8; ++c)
        for (int64_t i = 0; i < 36; ++i) x[c * 36 + i] = plane[i];

    Tensor y = m.forward(x);

    // channel gate on a channel-constant input is identical per channel c;
    // recompute the spatial gate directly from the (max, mean) = (p, p) pair.
    Tensor x1 = mul(x, broadcast_to(reshape(sigmoid(add(
        linear(relu(linear(reshape(global_avgpool(x), {1, 8}), m.param("cbam.mlp.w1"),
                            &m.param("cbam.mlp.b1"))),
               m.param("cbam.mlp.w2"), &m.param("cbam.mlp.b2")),
        linear(relu(linear(reshape(global_maxpool(x), {1, 8}), m.param("cbam.mlp.w1"),
                            &m.param("cbam.mlp.b1"))),
               m.param("cbam.mlp.w2"), &m.param("cbam.mlp.b2")))),
        {1, 8, 1, 1}), x.shape()));
    Tensor pooled = concat_channels(channel_max(x1), channel_mean(x1));
    Conv2dParams p;
    p.pad_h = p.pad_w = 3;
    Tensor s = conv2d(pooled, m.param("cbam.spatial.conv.weight"), nullptr, p);
    s = batchnorm_infer(s, m.param("cbam.spatial.bn.gamma"), m.param("cbam.spatial.bn.beta"),
                        m.buffer("cbam.spatial.bn.mean"), m.buffer("cbam.spatial.bn.var"));
    Tensor expect = mul(x1, broadcast_to(sigmoid(s), x.shape()));
    CHECK(oracle::max_abs_diff(y, expect) <= 1e-12);
}

TEST_CASE("bam: zero weights give out = 1.5 * in") {
    AttentionModule m = make_module(Mechanism::bam, 8, 2, 58);
    zero_params(m);
    Rng rng(59);
    Tensor x = rng.uniform_tensor({1, 8, 5, 5}, -2.0, 2.0);
    Tensor y = att::bam_forward(x, m);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(1.5 * x[i]).epsilon(1e-14));
}

TEST_CASE("gc variant: conv parameter count is dense count / g exactly") {
    AttentionConfig dense_cfg;
    AttentionModule dense = make_module(Mechanism::gam, 16, 4, 60, dense_cfg);
    AttentionConfig gc_cfg;
    gc_cfg.groups = 4;
    AttentionModule gc = make_module(Mechanism::gam, 16, 4, 61, gc_cfg);
    const int64_t dense_conv = dense.param("spatial.conv1.weight").numel() +
                               dense.param("spatial.conv2.weight").numel();
    const int64_t gc_conv =
        gc.param("spatial.conv1.weight").numel() + gc.param("spatial.conv2.weight").numel();
    CHECK(dense_conv == 4 * gc_conv);
    // and the closed-form count helper agrees with the materialized tensors
    CHECK(att::attention_param_count(16, gc_cfg.mechanism == Mechanism::gam ? gc.config() : gc_cfg) ==
          gc.param_count());
    CHECK(att::attention_param_count(16, dense.config()) == dense.param_count());
}

TEST_CASE("wmp variant: shape preserved, odd extents rejected, output differs") {
    AttentionConfig wmp;
    wmp.max_pool_variant = true;
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 62, wmp);
    Rng rng(63);
    Tensor x = rng.uniform_tensor({1, 8, 6, 6}, -2.0, 2.0);
    Tensor y = m.forward(x);
    CHECK(y.shape() == x.shape());

    Tensor odd = rng.uniform_tensor({1, 8, 5, 5}, -1.0, 1.0);
    CHECK_THROWS_AS(m.forward(odd), std::invalid_argument);

    AttentionModule plain = make_module(Mechanism::gam, 8, 2, 62);  // same seed, no pooling
    // parameter tensors are identical by construction; outputs must differ
    CHECK(oracle::max_abs_diff(y, plain.forward(x)) > 1e-9);
}

TEST_CASE("gate override returns the input unchanged") {
    AttentionConfig ov;
    ov.gate_override = true;
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 64, ov);
    Rng rng(65);
    Tensor x = rng.uniform_tensor({1, 8, 4, 4}, -2.0, 2.0);
    CHECK(m.forward(x).bit_equal(x));
}

TEST_CASE("channel mismatch rejected") {
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 66);
    Rng rng(67);
    CHECK_THROWS_AS(m.forward(rng.uniform_tensor({1, 4, 4, 4}, -1.0, 1.0)), std::invalid_argument);
}

TEST_CASE("se module at C=64, r=16, bias-free has 512 parameters") {
    AttentionModule m = make_module(Mechanism::se, 64, 16, 68);
    CHECK(m.param_count() == 512);
}

TEST_CASE("weight bundle round trip") {
    namespace fs = std::filesystem;
    AttentionConfig cfg;
    cfg.groups = 2;
    AttentionModule m = make_module(Mechanism::gam, 8, 2, 69, cfg);
    const std::string dir = (fs::temp_directory_path() / "attnforge_bundle_test").string();
    m.save_bundle(dir);
    AttentionModule back = AttentionModule::load_bundle(dir);
    CHECK(back.channels() == m.channels());
    CHECK(back.param_count() == m.param_count());
    Rng rng(70);
    Tensor x = rng.uniform_tensor({1, 8, 6, 6}, -1.0, 1.0);
    CHECK(back.forward(x).bit_equal(m.forward(x)));
    fs::remove_all(dir);
}

TEST_CASE("invalid configurations are rejected") {
    Rng rng(71);
    AttentionConfig bad_r;
    bad_r.mechanism = Mechanism::gam;
    bad_r.reduction = 3;
    CHECK_THROWS_AS(AttentionModule::init(8, bad_r, rng), std::invalid_argument);

    AttentionConfig bad_g;
    bad_g.mechanism = Mechanism::gam;
    bad_g.reduction = 4;
    bad_g.groups = 4;  // C/r = 2 not divisible by 4
    CHECK_THROWS_AS(AttentionModule::init(8, bad_g, rng), std::invalid_argument);

    AttentionConfig even_k;
    even_k.mechanism = Mechanism::gam;
    even_k.reduction = 2;
    even_k.spatial_kernel = 6;
    CHECK_THROWS_AS(AttentionModule::init(8, even_k, rng), std::invalid_argument);
}
