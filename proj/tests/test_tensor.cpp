// Copyright 2026 The tkd Authors
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

#include <random>

#include "doctest.h"
#include "tkd/gradcheck.hpp"
#include "tkd/graph.hpp"
#include "tkd/optim.hpp"

using namespace tkd;

TEST_CASE("matmul by the identity returns the operand") {
    std::mt19937_64 rng(7);
    Graph g;
    Value eye = g.constant(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    Value a = g.input("a", {3, 3});
    Value out = matmul(eye, a);
    Bindings b;
    b["a"] = Tensor::randn({3, 3}, rng);
    Tensor r = g.eval(out, b);
    for (int64_t i = 0; i < 9; ++i) CHECK(r.data[i] == doctest::Approx(b["a"].data[i]).epsilon(1e-15));
}

TEST_CASE("softmax of a constant vector is uniform") {
    Graph g;
    Value x = g.constant(Tensor({1, 4}, {3.7, 3.7, 3.7, 3.7}));
    Tensor r = g.eval(softmax(x, 1), {});
    for (double v : r.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("sigmoid at zero is one half") {
    Graph g;
    Tensor r = g.eval(sigmoid(g.constant_scalar(0.0)), {});
    CHECK(r.data[0] == 0.5);
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
    std::mt19937_64 rng(11);
    Graph g;
    Value x = g.input("x", {5, 17});
    Value s = softmax(x, 1);
    Bindings b;
    b["x"] = Tensor::uniform({5, 17}, rng, -30.0, 30.0);
    Tensor r = g.eval(s, b);
    for (int64_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (int64_t j = 0; j < 17; ++j) {
            CHECK(r.at(i, j) >= 0.0);
            sum += r.at(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax is invariant to a constant shift of its input") {
    std::mt19937_64 rng(13);
    Graph g;
    Value x = g.input("x", {3, 8});
    Value s = softmax(x, 1);
    Bindings b;
    b["x"] = Tensor::randn({3, 8}, rng);
    Tensor r0 = g.eval(s, b);
    for (auto& v : b["x"].data) v += 41.25;
    Tensor r1 = g.eval(s, b);
    for (int64_t i = 0; i < r0.numel(); ++i) CHECK(std::abs(r0.data[i] - r1.data[i]) < 1e-12);
}

TEST_CASE("evaluate is pure: repeated runs are bit-identical") {
    std::mt19937_64 rng(17);
    Graph g;
    Value x = g.input("x", {4, 4});
    Value y = matmul(sigmoid(x), transpose2d(x));
    Value out = reduce_sum(y);
    Bindings b;
    b["x"] = Tensor::randn({4, 4}, rng);
    Tensor r0 = g.eval(out, b);
    Tensor r1 = g.eval(out, b);
    CHECK(r0.data[0] == r1.data[0]);
}

TEST_CASE("product rule gradient at a point") {
    Graph g;
    Value x = g.param("x", {1});
    Value y = g.param("y", {1});
    Value loss = mul(x, y);
    Bindings b;
    b["x"] = Tensor::scalar(2.0);
    b["y"] = Tensor::scalar(3.0);
    auto grads = g.gradient(loss, b, {"x", "y"});
    CHECK(grads["x"].data[0] == 3.0);
    CHECK(grads["y"].data[0] == 2.0);
}

TEST_CASE("relu subgradient routes zeros at negative inputs") {
    Graph g;
    Value x = g.param("x", {2});
    Value loss = reduce_sum(relu(x));
    Bindings b;
    b["x"] = Tensor({2}, {-1.0, 2.0});
    auto grads = g.gradient(loss, b, {"x"});
    CHECK(grads["x"].data[0] == 0.0);
    CHECK(grads["x"].data[1] == 1.0);
}

TEST_CASE("gradient of an unused parameter is the zero tensor") {
    Graph g;
    Value x = g.param("x", {2});
    Value unused = g.param("u", {3, 2});
    (void)unused;
    Value loss = reduce_sum(mul(x, x));
    Bindings b;
    b["x"] = Tensor({2}, {1.0, 2.0});
    b["u"] = Tensor::full({3, 2}, 5.0);
    auto grads = g.gradient(loss, b, {"x", "u"});
    CHECK(grads["u"].shape == Shape{3, 2});
    for (double v : grads["u"].data) CHECK(v == 0.0);
}

TEST_CASE("gradient requires a scalar loss") {
    Graph g;
    Value x = g.param("x", {2});
    Value y = mul(x, x);
    Bindings b;
    b["x"] = Tensor({2}, {1.0, 2.0});
    CHECK_THROWS_AS((void)g.gradient(y, b, {"x"}), GraphError);
}

TEST_CASE("shape mismatch fails loudly naming the node") {
    Graph g;
    Value a = g.input("a", {2, 3});
    Value b = g.input("b", {4, 2});
    CHECK_THROWS_WITH_AS((void)matmul(a, b),
                         doctest::Contains("matmul"), GraphError);
    Bindings bind;
    bind["a"] = Tensor::zeros({2, 2});
    CHECK_THROWS_WITH_AS((void)g.eval(a, bind), doctest::Contains("a"), GraphError);
}

TEST_CASE("three-layer MLP gradients match central finite differences") {
    std::mt19937_64 rng(23);
    Graph g;
    Value x = g.constant(Tensor::randn({4, 3}, rng));
    Value w0 = g.param("w0", {3, 8});
    Value b0 = g.param("b0", {1, 8});
    Value w1 = g.param("w1", {8, 8});
    Value b1 = g.param("b1", {1, 8});
    Value w2 = g.param("w2", {8, 1});
    Value h0 = relu(add(matmul(x, w0), b0));
    Value h1 = sigmoid(add(matmul(h0, w1), b1));
    Value loss = reduce_mean(mul(matmul(h1, w2), matmul(h1, w2)));
    Bindings pt;
    pt["w0"] = Tensor::randn({3, 8}, rng, 0.7);
    pt["b0"] = Tensor::randn({1, 8}, rng, 0.2);
    pt["w1"] = Tensor::randn({8, 8}, rng, 0.5);
    pt["b1"] = Tensor::randn({1, 8}, rng, 0.2);
    pt["w2"] = Tensor::randn({8, 1}, rng, 0.5);
    auto rep = finite_difference_check(g, loss, pt, {"w0", "b0", "w1", "b1", "w2"});
    for (const auto& [name, err] : rep) {
        INFO(name);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("finite differences: linear layer tighter than 1e-7") {
    std::mt19937_64 rng(29);
    Graph g;
    Value x = g.constant(Tensor::randn({5, 4}, rng));
    Value w = g.param("w", {4, 3});
    Value b = g.param("b", {1, 3});
    Value loss = reduce_sum(add(matmul(x, w), b));
    Bindings pt;
    pt["w"] = Tensor::randn({4, 3}, rng);
    pt["b"] = Tensor::randn({1, 3}, rng);
    auto rep = finite_difference_check(g, loss, pt, {"w", "b"});
    for (const auto& [name, err] : rep) {
        INFO(name);
        CHECK(err < 1e-7);
    }
}

TEST_CASE("finite differences: softmax plus cross entropy under 1e-6") {
    std::mt19937_64 rng(31);
    Graph g;
    Value x = g.param("x", {6, 4});
    Value p = clamp(softmax(x, 1), 1e-7, 1.0 - 1e-7);
    Tensor labels({6, 4});
    for (int64_t i = 0; i < 6; ++i) labels.at(i, i % 4) = 1.0;
    Value y = g.constant(labels);
    Value one = g.constant_scalar(1.0);
    Value bce = neg(add(mul(y, log(p)), mul(sub(one, y), log(sub(one, p)))));
    Value loss = reduce_mean(bce);
    Bindings pt;
    pt["x"] = Tensor::randn({6, 4}, rng);
    auto rep = finite_difference_check(g, loss, pt, {"x"});
    CHECK(rep["x"] < 1e-6);
}

TEST_CASE("finite differences: one-channel 4^3 convolution under 1e-6") {
    std::mt19937_64 rng(37);
    Graph g;
    Value x = g.constant(Tensor::randn({1, 4, 4, 4}, rng));
    Value w = g.param("w", {1, 1, 3, 3, 3});
    Value head = g.constant(Tensor::randn({1, 4, 4, 4}, rng));
    Value loss = reduce_sum(mul(conv3d(x, w, 1, 1), head));
    Bindings pt;
    pt["w"] = Tensor::randn({1, 1, 3, 3, 3}, rng, 0.4);
    auto rep = finite_difference_check(g, loss, pt, {"w"});
    CHECK(rep["w"] < 1e-6);
}

TEST_CASE("every operator passes its finite-difference row") {
    auto rows = check_all_ops(1e-5);
    CHECK(rows.size() == 32);   // full closed set, each exactly once
    for (const auto& r : rows) {
        INFO(r.op, " err=", r.max_rel_err);
        CHECK(r.pass);
    }
}

TEST_CASE("a corrupted operator gradient is caught by the harness") {
    auto rows = check_all_ops(1e-5, 12345, "matmul");
    bool matmul_failed = false;
    for (const auto& r : rows)
        if (r.op == "matmul") matmul_failed = !r.pass;
    CHECK(matmul_failed);
}

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
    std::map<std::string, Tensor> params{{"p", Tensor({2}, {1.0, -2.0})}};
    std::map<std::string, Tensor> grads{{"p", Tensor::zeros({2})}};
    OptimState st;
    st.lr = 0.1;
    CHECK(adam_step(params, grads, st));
    CHECK(params["p"].data[0] == 1.0);
    CHECK(params["p"].data[1] == -2.0);
}

TEST_CASE("first adam step moves by roughly the learning rate") {
    // bias correction makes the first update lr * g/(|g| + eps')
    std::map<std::string, Tensor> params{{"p", Tensor::scalar(1.0)}};
    std::map<std::string, Tensor> grads{{"p", Tensor::scalar(1.0)}};
    OptimState st;
    st.lr = 0.1;
    CHECK(adam_step(params, grads, st));
    CHECK(params["p"].data[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(st.step_count == 1);
}

TEST_CASE("constant gradient drives the parameter monotonically down") {
    std::map<std::string, Tensor> params{{"p", Tensor::scalar(3.0)}};
    OptimState st;
    st.lr = 0.01;
    double prev = 3.0;
    for (int i = 0; i < 1000; ++i) {
        std::map<std::string, Tensor> grads{{"p", Tensor::scalar(2.5)}};
        REQUIRE(adam_step(params, grads, st));
        CHECK(params["p"].data[0] < prev);
        prev = params["p"].data[0];
    }
    CHECK(st.step_count == 1000);
}

TEST_CASE("adam rejects non-finite gradients with diagnostics") {
    std::map<std::string, Tensor> params{{"p", Tensor::scalar(1.0)}};
    std::map<std::string, Tensor> grads{{"p", Tensor::scalar(std::nan(""))}};
    OptimState st;
    std::string diag;
    CHECK_FALSE(adam_step(params, grads, st, &diag));
    CHECK(params["p"].data[0] == 1.0);
    CHECK(st.step_count == 0);
    CHECK(diag.find("p") != std::string::npos);
}

TEST_CASE("broadcast arithmetic matches manual evaluation") {
    std::mt19937_64 rng(41);
    Graph g;
    Value a = g.input("a", {3, 1, 4});
    Value b = g.input("b", {2, 4});
    Value out = add(mul(a, b), b);
    Bindings bind;
    bind["a"] = Tensor::randn({3, 1, 4}, rng);
    bind["b"] = Tensor::randn({2, 4}, rng);
    Tensor r = g.eval(out, bind);
    REQUIRE(r.shape == Shape{3, 2, 4});
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 2; ++j)
            for (int64_t k = 0; k < 4; ++k) {
                const double av = bind["a"].data[i * 4 + k];
                const double bv = bind["b"].data[j * 4 + k];
                CHECK(r.data[(i * 2 + j) * 4 + k] == doctest::Approx(av * bv + bv).epsilon(1e-15));
            }
}

TEST_CASE("stop_gradient blocks the backward path") {
    Graph g;
    Value x = g.param("x", {3});
    Value loss = reduce_sum(mul(stop_gradient(x), x));
    Bindings b;
    b["x"] = Tensor({3}, {1.0, 2.0, 3.0});
    auto grads = g.gradient(loss, b, {"x"});
    // only the non-detached factor contributes: d/dx sum(c * x) = c = x
    CHECK(grads["x"].data[0] == 1.0);
    CHECK(grads["x"].data[1] == 2.0);
    CHECK(grads["x"].data[2] == 3.0);
}
