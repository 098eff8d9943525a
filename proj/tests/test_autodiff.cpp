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

#include "attnforge/attention.hpp"
#include "attnforge/autodiff.hpp"
#include "attnforge/rng.hpp"
#include "oracles.hpp"

using namespace attnforge;

TEST_CASE("record: identity and sigmoid of zeros") {
    Rng rng(1);
    Tensor x = rng.uniform_tensor({2, 3}, -1.0, 1.0);
    auto [out, tape] = ad::record(
        [](ad::Tape&, const std::vector<ad::Var>& v) { return v[0]; }, {x});
    CHECK(out.bit_equal(x));
    (void)tape;

    auto [s, tape2] = ad::record(
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.sigmoid(v[0]); },
        {Tensor::zeros({4})});
    for (int64_t i = 0; i < s.numel(); ++i) CHECK(s[i] == 0.5);
    (void)tape2;
}

TEST_CASE("recorded GAM forward equals direct forward bit-wise") {
    Rng rng(21);
    att::AttentionConfig cfg;
    cfg.reduction = 2;
    att::AttentionModule m = att::AttentionModule::init(8, cfg, rng);
    Tensor x = rng.uniform_tensor({2, 8, 5, 5}, -2.0, 2.0);

    Tensor direct = m.forward(x);
    std::vector<Tensor> leaves = {x};
    for (const auto& [n, t] : m.params()) {
        (void)n;
        leaves.push_back(t);
    }
    auto [recorded, tape] = ad::record(m.program(), leaves);
    (void)tape;
    CHECK(recorded.bit_equal(direct));
}

TEST_CASE("backward: sigmoid slope at zero is 0.25") {
    ad::Tape tape;
    ad::Var x = tape.leaf(Tensor::zeros({3}));
    ad::Var y = tape.sigmoid(x);
    auto grads = tape.backward(y, Tensor::ones({3}));
    for (int64_t i = 0; i < 3; ++i) CHECK(grads[0][i] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward: d(x*x) = 2x") {
    Rng rng(2);
    Tensor xv = rng.uniform_tensor({5}, -2.0, 2.0);
    ad::Tape tape;
    ad::Var x = tape.leaf(xv);
    ad::Var y = tape.mul(x, x);
    auto grads = tape.backward(y, Tensor::ones({5}));
    for (int64_t i = 0; i < 5; ++i) CHECK(grads[0][i] == 2.0 * xv[i]);
}

TEST_CASE("backward: seed shape must match output") {
    ad::Tape tape;
    ad::Var x = tape.leaf(Tensor::zeros({3}));
    ad::Var y = tape.relu(x);
    CHECK_THROWS_AS(tape.backward(y, Tensor::ones({4})), std::invalid_argument);
}

TEST_CASE("relu subgradient at exactly zero is zero") {
    ad::Tape tape;
    ad::Var x = tape.leaf(Tensor({3}, {-1.0, 0.0, 1.0}));
    ad::Var y = tape.relu(x);
    auto grads = tape.backward(y, Tensor::ones({3}));
    CHECK(grads[0][0] == 0.0);
    CHECK(grads[0][1] == 0.0);
    CHECK(grads[0][2] == 1.0);
}

TEST_CASE("maxpool ties route to the first maximum in scan order") {
    Tensor x({1, 1, 2, 2}, {7.0, 7.0, 7.0, 7.0});
    ad::Tape tape;
    ad::Var v = tape.leaf(x);
    ad::Var y = tape.maxpool(v, Pool2dParams{2, 2, 2, 2, 0, 0});
    auto grads = tape.backward(y, Tensor::ones({1, 1, 1, 1}));
    CHECK(grads[0][0] == 1.0);
    CHECK(grads[0][1] == 0.0);
    CHECK(grads[0][2] == 0.0);
    CHECK(grads[0][3] == 0.0);
}

TEST_CASE("conv2d gradient vs finite differences") {
    Rng rng(3);
    Tensor x = rng.uniform_tensor({1, 2, 5, 5}, -1.0, 1.0);
    Tensor w = rng.uniform_tensor({3, 2, 3, 3}, -0.5, 0.5);
    Tensor b = rng.uniform_tensor({3}, -0.5, 0.5);
    Conv2dParams p;
    p.pad_h = p.pad_w = 1;
    p.stride_h = p.stride_w = 2;
    auto f = [p](ad::Tape& t, const std::vector<ad::Var>& v) {
        return t.conv2d(v[0], v[1], v[2], p);
    };
    auto report = ad::grad_check(f, {{"x", x}, {"w", w}, {"b", b}}, 1e-6, 1e-5, "conv2d");
    CHECK(report.pass);
    CHECK(report.max_rel_err <= 1e-5);
}

TEST_CASE("grad_check: quadratic half norm is near-exact") {
    Rng rng(4);
    Tensor x = rng.uniform_tensor({20}, -1.0, 1.0);
    auto f = [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return t.mul_scalar(t.mul(v[0], v[0]), 0.5);
    };
    // central differences are exact for quadratics; h large enough to stay
    // clear of floating-point cancellation
    auto report = ad::grad_check(f, {{"x", x}}, 1e-3, 1e-9, "quadratic");
    CHECK(report.pass);
    CHECK(report.max_rel_err <= 1e-9);
}

TEST_CASE("grad_check: GAM channel submodule (2,8,5,5) r=2") {
    Rng rng(5);
    att::AttentionConfig cfg;
    cfg.reduction = 2;
    cfg.spatial_enabled = false;
    att::AttentionModule m = att::AttentionModule::init(8, cfg, rng);
    Tensor x = rng.uniform_tensor({2, 8, 5, 5}, -2.0, 2.0);
    auto report = ad::grad_check(m.program(), m.gradcheck_inputs(x), 1e-6, 1e-5, "gam-channel");
    CHECK(report.pass);
}

TEST_CASE("grad_check: GAM spatial submodule with g=2 (1,8,6,6)") {
    Rng rng(6);
    att::AttentionConfig cfg;
    cfg.reduction = 2;
    cfg.groups = 2;
    cfg.channel_enabled = false;
    att::AttentionModule m = att::AttentionModule::init(8, cfg, rng);
    Tensor x = rng.uniform_tensor({1, 8, 6, 6}, -2.0, 2.0);
    auto report = ad::grad_check(m.program(), m.gradcheck_inputs(x), 1e-6, 1e-5, "gam-spatial-g2");
    CHECK(report.pass);
}

TEST_CASE("vjp is linear in the seed") {
    Rng rng(7);
    Tensor x = rng.uniform_tensor({2, 4, 4, 4}, -1.0, 1.0);
    Tensor w = rng.uniform_tensor({4, 4, 3, 3}, -0.3, 0.3);
    ad::Tape tape;
    ad::Var vx = tape.leaf(x);
    ad::Var vw = tape.leaf(w);
    Conv2dParams p;
    p.pad_h = p.pad_w = 1;
    ad::Var y = tape.sigmoid(tape.conv2d(vx, vw, std::nullopt, p));

    const auto& out_shape = tape.value(y).shape();
    Tensor s1 = rng.uniform_tensor(out_shape, -1.0, 1.0);
    Tensor s2 = rng.uniform_tensor(out_shape, -1.0, 1.0);
    auto g1 = tape.backward(y, s1);
    auto g2 = tape.backward(y, s2);
    auto gsum = tape.backward(y, add(s1, s2));
    for (size_t i = 0; i < g1.size(); ++i) {
        CHECK(oracle::max_abs_diff(add(g1[i], g2[i]), gsum[i]) <= 1e-12);
    }
}

TEST_CASE("gradient of permute is the inverse permute of the seed, exactly") {
    Rng rng(8);
    Tensor x = rng.uniform_tensor({2, 3, 4, 5}, -1.0, 1.0);
    const std::vector<int64_t> axes = {0, 2, 3, 1};
    ad::Tape tape;
    ad::Var vx = tape.leaf(x);
    ad::Var y = tape.permute(vx, axes);
    Tensor seed = rng.uniform_tensor(tape.value(y).shape(), -1.0, 1.0);
    auto grads = tape.backward(y, seed);
    CHECK(grads[0].bit_equal(permute(seed, inverse_permutation(axes))));
}

TEST_CASE("grad_check reports non-finite values instead of dropping them") {
    Tensor x = Tensor::full({4}, 1e200);
    auto f = [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.mul(v[0], v[0]); };
    auto report = ad::grad_check(f, {{"x", x}}, 1e-6, 1e-5, "overflow");
    CHECK(report.nonfinite);
    CHECK_FALSE(report.pass);
}

TEST_CASE("grad_check rejects non-positive step") {
    Tensor x = Tensor::ones({2});
    auto f = [](ad::Tape&, const std::vector<ad::Var>& v) { return v[0]; };
    CHECK_THROWS_AS(ad::grad_check(f, {{"x", x}}, 0.0, 1e-5), std::invalid_argument);
}

TEST_CASE("gradcheck report serializes to json") {
    Rng rng(9);
    Tensor x = rng.uniform_tensor({3, 3}, -1.0, 1.0);
    auto f = [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.relu(v[0]); };
    auto report = ad::grad_check(f, {{"x", x}}, 1e-6, 1e-5, "relu");
    const std::string j = report.to_json();
    CHECK(j.find("\"op\"") != std::string::npos);
    CHECK(j.find("\"max_rel_err\"") != std::string::npos);
    CHECK(j.find("\"pass\"") != std::string::npos);
}
