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

#include "tkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace tkd {

namespace {

std::map<std::string, double> fd_compare(const Graph& g, Value loss, const Bindings& point,
                                         const std::vector<std::string>& wrt, double eps,
                                         int max_entries, std::mt19937_64* rng,
                                         double fault_bump) {
    std::map<std::string, Tensor> analytic = g.gradient(loss, point, wrt);
    if (fault_bump != 0.0)
        for (auto& [name, t] : analytic)
            for (auto& v : t.data) v += fault_bump;

    std::map<std::string, double> report;
    Bindings b = point;
    for (const std::string& name : wrt) {
        const Tensor& base = point.at(name);
        std::vector<int64_t> entries(static_cast<size_t>(base.numel()));
        std::iota(entries.begin(), entries.end(), 0);
        if (max_entries >= 0 && static_cast<int64_t>(entries.size()) > max_entries) {
            std::mt19937_64 local(rng ? (*rng)() : 0x9e3779b97f4a7c15ull);
            std::shuffle(entries.begin(), entries.end(), local);
            entries.resize(static_cast<size_t>(max_entries));
        }
        double worst = 0.0;
        Tensor& slot = b.at(name);
        for (int64_t i : entries) {
            const double saved = slot.data[i];
            slot.data[i] = saved + eps;
            const double fp = g.eval(loss, b).data[0];
            slot.data[i] = saved - eps;
            const double fm = g.eval(loss, b).data[0];
            slot.data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double err =
                std::abs(analytic.at(name).data[i] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
        report[name] = worst;
    }
    return report;
}

}  // namespace

std::map<std::string, double> finite_difference_check(const Graph& g, Value loss,
                                                      const Bindings& point,
                                                      const std::vector<std::string>& wrt,
                                                      double eps, int max_entries,
                                                      std::mt19937_64* rng) {
    return fd_compare(g, loss, point, wrt, eps, max_entries, rng, 0.0);
}

namespace {

// Attach a generic scalar head: sum(out * W) with W a fixed random tensor, so
// the probed backward sees a dense, non-constant adjoint.
Value scalar_head(Graph& g, Value out, std::mt19937_64& rng) {
    Tensor w = Tensor::randn(g.shape_of(out), rng);
    return reduce_sum(mul(out, g.constant(std::move(w))));
}

double away_from(double x, double point, double margin) {
    if (std::abs(x - point) < margin) return point + (x >= point ? margin : -margin) * 2.0;
    return x;
}

struct Probe {
    double max_rel_err = 0.0;
};

using Builder = std::function<double(std::mt19937_64&, double)>;

double run_probe(Graph& g, Value loss, const Bindings& pt, const std::vector<std::string>& wrt,
                 double fault) {
    double worst = 0.0;
    for (const auto& [name, err] : fd_compare(g, loss, pt, wrt, 1e-5, -1, nullptr, fault))
        worst = std::max(worst, err);
    return worst;
}

}  // namespace

std::vector<OpCheckRow> check_all_ops(double tol, uint64_t seed, const std::string& fault_op) {
    std::vector<OpCheckRow> rows;
    auto add_row = [&](const std::string& name, bool diff, double err) {
        rows.push_back({name, diff, err, !diff || err < tol});
    };
    auto leaf_row = [&](const std::string& name) { add_row(name, false, 0.0); };

    auto check = [&](const std::string& name, const Builder& build) {
        std::mt19937_64 rng(seed ^ std::hash<std::string>{}(name));
        const double fault = (name == fault_op) ? 1e-3 : 0.0;
        add_row(name, true, build(rng, fault));
    };

    leaf_row("input");
    leaf_row("param");
    leaf_row("constant");

    auto binary_probe = [&](auto make_op, bool positive_b) {
        return [make_op, positive_b](std::mt19937_64& rng, double fault) {
            Graph g;
            Value a = g.param("a", {2, 3});
            Value b = g.param("b", {1, 3});   // broadcast covered in the same probe
            Value loss = scalar_head(g, make_op(a, b), rng);
            Bindings pt;
            pt["a"] = Tensor::randn({2, 3}, rng);
            pt["b"] = positive_b ? Tensor::uniform({1, 3}, rng, 0.5, 1.5)
                                 : Tensor::randn({1, 3}, rng);
            return run_probe(g, loss, pt, {"a", "b"}, fault);
        };
    };
    check("add", binary_probe([](Value a, Value b) { return add(a, b); }, false));
    check("sub", binary_probe([](Value a, Value b) { return sub(a, b); }, false));
    check("mul", binary_probe([](Value a, Value b) { return mul(a, b); }, false));
    check("div", binary_probe([](Value a, Value b) { return div(a, b); }, true));

    auto unary_probe = [&](auto make_op, double lo, double hi, double avoid, double margin) {
        return [make_op, lo, hi, avoid, margin](std::mt19937_64& rng, double fault) {
            Graph g;
            Value x = g.param("x", {2, 4});
            Value loss = scalar_head(g, make_op(x), rng);
            Tensor t = Tensor::uniform({2, 4}, rng, lo, hi);
            if (margin > 0.0)
                for (auto& v : t.data) v = away_from(v, avoid, margin);
            Bindings pt;
            pt["x"] = std::move(t);
            return run_probe(g, loss, pt, {"x"}, fault);
        };
    };
    check("neg", unary_probe([](Value x) { return neg(x); }, -1, 1, 0, 0));
    check("exp", unary_probe([](Value x) { return exp(x); }, -1, 1, 0, 0));
    check("log", unary_probe([](Value x) { return log(x); }, 0.5, 2.0, 0, 0));
    check("sqrt", unary_probe([](Value x) { return sqrt(x); }, 0.5, 2.0, 0, 0));
    check("abs", unary_probe([](Value x) { return abs(x); }, -1, 1, 0.0, 1e-3));
    check("clamp", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 4});
        Value loss = scalar_head(g, clamp(x, 0.25, 0.75), rng);
        Tensor t = Tensor::uniform({2, 4}, rng, 0.0, 1.0);
        for (auto& v : t.data) v = away_from(away_from(v, 0.25, 1e-3), 0.75, 1e-3);
        Bindings pt;
        pt["x"] = std::move(t);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("relu", unary_probe([](Value x) { return relu(x); }, -1, 1, 0.0, 1e-3));
    check("sigmoid", unary_probe([](Value x) { return sigmoid(x); }, -2, 2, 0, 0));
    check("softmax", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {3, 4});
        Value loss = scalar_head(g, softmax(x, 1), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({3, 4}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("matmul", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value a = g.param("a", {3, 4});
        Value b = g.param("b", {4, 2});
        Value loss = scalar_head(g, matmul(a, b), rng);
        Bindings pt;
        pt["a"] = Tensor::randn({3, 4}, rng);
        pt["b"] = Tensor::randn({4, 2}, rng);
        return run_probe(g, loss, pt, {"a", "b"}, fault);
    });
    check("transpose2d", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {3, 4});
        Value loss = scalar_head(g, transpose2d(x), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({3, 4}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("reshape", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 6});
        Value loss = scalar_head(g, reshape(x, {3, 4}), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 6}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("concat", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value a = g.param("a", {2, 3});
        Value b = g.param("b", {2, 2});
        Value loss = scalar_head(g, concat({a, b}, 1), rng);
        Bindings pt;
        pt["a"] = Tensor::randn({2, 3}, rng);
        pt["b"] = Tensor::randn({2, 2}, rng);
        return run_probe(g, loss, pt, {"a", "b"}, fault);
    });
    check("gather_rows", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {5, 3});
        Value loss = scalar_head(g, gather_rows(x, {0, 2, 2, 4}), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({5, 3}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("scatter_max_grid", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value f = g.param("f", {12, 2});
        std::vector<int64_t> cells;
        for (int64_t i = 0; i < 12; ++i) cells.push_back(i % 8);
        Value loss = scalar_head(g, scatter_max_grid(f, cells, {2, 2, 2, 2}), rng);
        Bindings pt;
        pt["f"] = Tensor::randn({12, 2}, rng);
        return run_probe(g, loss, pt, {"f"}, fault);
    });
    check("conv3d", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 4, 4, 4});
        Value w = g.param("w", {2, 2, 3, 3, 3});
        Value loss = scalar_head(g, conv3d(x, w, 1, 1), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 4, 4, 4}, rng);
        pt["w"] = Tensor::randn({2, 2, 3, 3, 3}, rng, 0.3);
        return run_probe(g, loss, pt, {"x", "w"}, fault);
    });
    check("conv_transpose3d", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 3, 3, 3});
        Value w = g.param("w", {2, 2, 3, 3, 3});
        Value loss = scalar_head(g, conv_transpose3d(x, w, 2, 1), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 3, 3, 3}, rng);
        pt["w"] = Tensor::randn({2, 2, 3, 3, 3}, rng, 0.3);
        return run_probe(g, loss, pt, {"x", "w"}, fault);
    });
    check("maxpool3d", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 4, 4, 4});
        Value loss = scalar_head(g, maxpool3d(x, 2), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 4, 4, 4}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("upsample_nearest3d", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 2, 2, 2});
        Value loss = scalar_head(g, upsample_nearest3d(x, 2), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 2, 2, 2}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("reduce_sum", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 3, 2});
        Value loss = scalar_head(g, reduce_sum(x, 1), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 3, 2}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("reduce_mean", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 3, 2});
        Value loss = scalar_head(g, reduce_mean(x, -1), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 3, 2}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("reduce_max", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value x = g.param("x", {2, 3, 2});
        Value loss = scalar_head(g, reduce_max(x, 1), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 3, 2}, rng);
        return run_probe(g, loss, pt, {"x"}, fault);
    });
    check("trilinear", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value v = g.param("v", {2, 3, 3, 3});
        Value p = g.param("p", {5, 3});
        Value loss = scalar_head(g, trilinear(v, p), rng);
        Tensor pts({5, 3});
        std::uniform_real_distribution<double> cell(0, 3), frac(0.15, 0.85);
        for (int64_t i = 0; i < 5; ++i)
            for (int64_t j = 0; j < 3; ++j) {
                // keep the fractional position inside a cell so the finite
                // difference never crosses a lattice kink
                const double u = std::floor(cell(rng)) + frac(rng);
                pts.at(i, j) = (u + 0.5) / 3.0 - 0.5;
            }
        Bindings pt;
        pt["v"] = Tensor::randn({2, 3, 3, 3}, rng);
        pt["p"] = std::move(pts);
        return run_probe(g, loss, pt, {"v", "p"}, fault);
    });
    check("kabsch_rotation", [&](std::mt19937_64& rng, double fault) {
        Graph g;
        Value s = g.param("s", {5, 3});
        Value d = g.param("d", {5, 3});
        Value loss = scalar_head(g, kabsch_rotation(s, d), rng);
        Bindings pt;
        pt["s"] = Tensor::uniform({5, 3}, rng, -0.5, 0.5);
        Tensor dst = pt["s"];
        for (auto& v : dst.data) v += 0.1 * std::normal_distribution<double>()(rng);
        pt["d"] = std::move(dst);
        return run_probe(g, loss, pt, {"s", "d"}, fault);
    });

    // Gradient-blocking by contract: the adjoint must be exactly zero.
    {
        std::mt19937_64 rng(seed ^ 0xabcdefull);
        Graph g;
        Value x = g.param("x", {2, 3});
        Value loss = scalar_head(g, stop_gradient(x), rng);
        Bindings pt;
        pt["x"] = Tensor::randn({2, 3}, rng);
        auto grads = g.gradient(loss, pt, {"x"});
        double worst = 0.0;
        for (double v : grads.at("x").data) worst = std::max(worst, std::abs(v));
        rows.push_back({"stop_gradient", false, worst, worst == 0.0});
    }

    return rows;
}

}  // namespace tkd
