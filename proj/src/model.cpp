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

#include "tkd/model.hpp"

#include <cmath>

namespace tkd::model {

void ModelConfig::validate() const {
    if (grid_res != 8 && grid_res != 16 && grid_res != 32 && grid_res != 64)
        throw ModelError("grid_res must be one of 8, 16, 32, 64");
    if (keypoints < 1) throw ModelError("keypoints must be >= 1");
    if (sigma <= 0.0) throw ModelError("sigma must be positive");
    for (int c : {c1, c2, c3, c4, c5, ce, psi_hidden, occ_hidden})
        if (c < 1) throw ModelError("channel widths must be positive");
    if (n1 < 1 || n2 < 1 || n2 > n1) throw ModelError("need 1 <= n2 <= n1");
}

json ModelConfig::to_json() const {
    return json{{"grid_res", grid_res},
                {"keypoints", keypoints},
                {"sigma", sigma},
                {"c1", c1},
                {"c2", c2},
                {"c3", c3},
                {"c4", c4},
                {"c5", c5},
                {"ce", ce},
                {"psi_hidden", psi_hidden},
                {"occ_hidden", occ_hidden},
                {"n1", n1},
                {"n2", n2},
                {"attention", attention == Attention::AsWritten ? "as_written" : "standard"}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.grid_res = j.value("grid_res", c.grid_res);
    c.keypoints = j.value("keypoints", c.keypoints);
    c.sigma = j.value("sigma", c.sigma);
    c.c1 = j.value("c1", c.c1);
    c.c2 = j.value("c2", c.c2);
    c.c3 = j.value("c3", c.c3);
    c.c4 = j.value("c4", c.c4);
    c.c5 = j.value("c5", c.c5);
    c.ce = j.value("ce", c.ce);
    c.psi_hidden = j.value("psi_hidden", c.psi_hidden);
    c.occ_hidden = j.value("occ_hidden", c.occ_hidden);
    c.n1 = j.value("n1", c.n1);
    c.n2 = j.value("n2", c.n2);
    const std::string att = j.value("attention", "as_written");
    if (att == "as_written")
        c.attention = Attention::AsWritten;
    else if (att == "standard")
        c.attention = Attention::Standard;
    else
        throw ModelError("attention must be as_written or standard");
    c.validate();
    return c;
}

namespace {

std::map<std::string, Shape> param_shapes(const ModelConfig& cfg) {
    const int64_t m = cfg.keypoints;
    std::map<std::string, Shape> s;
    s["phi.point.w0"] = {3, cfg.c1};
    s["phi.point.b0"] = {1, cfg.c1};
    s["phi.point.w1"] = {cfg.c1, cfg.c1};
    s["phi.point.b1"] = {1, cfg.c1};
    s["phi.unet.enc1.w"] = {cfg.c2, cfg.c1, 3, 3, 3};
    s["phi.unet.enc1.b"] = {cfg.c2};
    s["phi.unet.enc2.w"] = {cfg.c2, cfg.c2, 3, 3, 3};
    s["phi.unet.enc2.b"] = {cfg.c2};
    s["phi.unet.dec.w"] = {cfg.c3, 2 * cfg.c2, 3, 3, 3};
    s["phi.unet.dec.b"] = {cfg.c3};
    s["psi.point.w0"] = {3, cfg.psi_hidden};
    s["psi.point.b0"] = {1, cfg.psi_hidden};
    s["psi.point.w1"] = {cfg.psi_hidden, cfg.c4};
    s["psi.point.b1"] = {1, cfg.c4};
    s["psi.attn.proj.w"] = {2 * cfg.c4, cfg.c5};
    s["psi.attn.proj.b"] = {1, cfg.c5};
    s["psi.unet.enc1.w"] = {cfg.c5, cfg.c5, 3, 3, 3};
    s["psi.unet.enc1.b"] = {cfg.c5};
    s["psi.unet.enc2.w"] = {cfg.c5, cfg.c5, 3, 3, 3};
    s["psi.unet.enc2.b"] = {cfg.c5};
    s["psi.unet.dec.w"] = {cfg.c5, 2 * cfg.c5, 3, 3, 3};
    s["psi.unet.dec.b"] = {cfg.c5};
    s["psi.head.w"] = {m, cfg.c5, 1, 1, 1};
    s["psi.head.b"] = {m};
    s["omega.qenc.w0"] = {3, cfg.ce};
    s["omega.qenc.b0"] = {1, cfg.ce};
    s["omega.qenc.w1"] = {cfg.ce, cfg.ce};
    s["omega.qenc.b1"] = {1, cfg.ce};
    s["omega.occ.w0"] = {cfg.ce + cfg.c3, cfg.occ_hidden};
    s["omega.occ.b0"] = {1, cfg.occ_hidden};
    s["omega.occ.w1"] = {cfg.occ_hidden, cfg.occ_hidden};
    s["omega.occ.b1"] = {1, cfg.occ_hidden};
    s["omega.occ.w2"] = {cfg.occ_hidden, 1};
    s["omega.occ.b2"] = {1, 1};
    return s;
}

int64_t fan_in(const std::string& name, const Shape& shape) {
    if (shape.size() == 5) return shape[1] * shape[2] * shape[3] * shape[4];  // conv
    if (shape.size() == 2 && name.find(".w") != std::string::npos) return shape[0];
    return 0;  // bias
}

}  // namespace

Params init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Params out;
    for (const auto& [name, shape] : param_shapes(cfg)) {
        const int64_t fan = fan_in(name, shape);
        if (fan == 0) {
            // small nonzero biases keep empty-cell activations off the exact
            // relu kink, where finite differences are meaningless
            out.emplace(name, Tensor::randn(shape, rng, 0.01));
        } else {
            const double stddev = std::sqrt(2.0 / static_cast<double>(fan));
            out.emplace(name, Tensor::randn(shape, rng, stddev));
        }
    }
    return out;
}

BoundParams declare_params(Graph& g, const ModelConfig& cfg) {
    BoundParams p;
    for (const auto& [name, shape] : param_shapes(cfg)) p.leaves[name] = g.param(name, shape);
    return p;
}

Value BoundParams::operator()(const std::string& name) const {
    auto it = leaves.find(name);
    if (it == leaves.end()) throw ModelError("unknown parameter '" + name + "'");
    return it->second;
}

FrameInputs prepare_frame(const std::vector<geom::Vec3>& cloud, const ModelConfig& cfg,
                          std::mt19937_64& rng) {
    if (cloud.empty()) throw ModelError("empty cloud");
    const int64_t n = cfg.n1;
    FrameInputs f;
    f.points = Tensor({n, 3});
    std::vector<geom::Vec3> pts(static_cast<size_t>(n));
    if (static_cast<int64_t>(cloud.size()) == n) {
        pts.assign(cloud.begin(), cloud.end());
    } else {
        // resample with replacement to the configured count
        std::uniform_int_distribution<size_t> pick(0, cloud.size() - 1);
        for (auto& p : pts) p = cloud[pick(rng)];
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int j = 0; j < 3; ++j) f.points.at(i, j) = pts[static_cast<size_t>(i)][j];
        f.cells.push_back(geom::point_cell(pts[static_cast<size_t>(i)], cfg.grid_res));
    }
    // farthest point sampling, seeded at index 0, ties to the lowest index
    const int64_t n2 = cfg.n2;
    std::vector<double> dist(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
    f.fps.push_back(0);
    for (int64_t k = 1; k < n2; ++k) {
        const geom::Vec3& last = pts[static_cast<size_t>(f.fps.back())];
        int64_t best = -1;
        double best_d = -1.0;
        for (int64_t i = 0; i < n; ++i) {
            dist[static_cast<size_t>(i)] =
                std::min(dist[static_cast<size_t>(i)], (pts[static_cast<size_t>(i)] - last).squaredNorm());
            if (dist[static_cast<size_t>(i)] > best_d) {
                best_d = dist[static_cast<size_t>(i)];
                best = i;
            }
        }
        f.fps.push_back(best);
    }
    // nearest selected point for feature upsampling
    f.nn_up.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int64_t k = 0; k < n2; ++k) {
            const double d =
                (pts[static_cast<size_t>(i)] - pts[static_cast<size_t>(f.fps[static_cast<size_t>(k)])])
                    .squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        f.nn_up[static_cast<size_t>(i)] = best;
    }
    return f;
}

namespace {

Value linear(Value x, Value w, Value b) { return add(matmul(x, w), b); }

Value conv_bias(Value x, Value w, Value b, int stride, int pad) {
    Graph& g = *x.g;
    const Shape& ws = g.shape_of(w);
    return add(conv3d(x, w, stride, pad), reshape(b, {ws[0], 1, 1, 1}));
}

// Two-level encoder-decoder with one skip connection.
Value unet2(Graph& g, const BoundParams& p, Value x, const std::string& prefix) {
    Value e1 = relu(conv_bias(x, p(prefix + ".enc1.w"), p(prefix + ".enc1.b"), 1, 1));
    Value e2 = relu(conv_bias(maxpool3d(e1, 2), p(prefix + ".enc2.w"), p(prefix + ".enc2.b"), 1, 1));
    Value cat = concat({e1, upsample_nearest3d(e2, 2)}, 0);
    (void)g;
    return conv_bias(cat, p(prefix + ".dec.w"), p(prefix + ".dec.b"), 1, 1);
}

Value point_mlp(Value x, const BoundParams& p, const std::string& prefix, bool relu_out) {
    Value h = relu(linear(x, p(prefix + ".w0"), p(prefix + ".b0")));
    Value out = linear(h, p(prefix + ".w1"), p(prefix + ".b1"));
    return relu_out ? relu(out) : out;
}

}  // namespace

Value encode_features(Graph& g, const BoundParams& p, const FrameInputs& f,
                      const ModelConfig& cfg) {
    Value pts = g.constant(f.points);
    Value feat = point_mlp(pts, p, "phi.point", true);
    Value grid = scatter_max_grid(feat, f.cells,
                                  {cfg.c1, cfg.grid_res, cfg.grid_res, cfg.grid_res});
    return unet2(g, p, grid, "phi.unet");
}

std::pair<Value, Value> cross_attention(Value f_s, Value f_t, const ModelConfig& cfg) {
    Graph& g = *f_s.g;
    if (g.shape_of(f_s) != g.shape_of(f_t))
        throw ModelError("cross_attention: feature shapes differ");
    Value scale = g.constant_scalar(1.0 / std::sqrt(static_cast<double>(cfg.c4)));
    Value a_s = softmax(mul(matmul(f_s, transpose2d(f_t)), scale), 1);
    Value a_t = softmax(mul(matmul(f_t, transpose2d(f_s)), scale), 1);
    const bool as_written = cfg.attention == ModelConfig::Attention::AsWritten;
    Value z_s = matmul(a_s, as_written ? f_s : f_t);
    Value z_t = matmul(a_t, as_written ? f_t : f_s);
    return {concat({f_s, z_s}, 1), concat({f_t, z_t}, 1)};
}

namespace {

Value detect_one(Graph& g, const BoundParams& p, const FrameInputs& f, Value mixed,
                 const ModelConfig& cfg) {
    Value proj = relu(linear(mixed, p("psi.attn.proj.w"), p("psi.attn.proj.b")));
    Value dense = gather_rows(proj, f.nn_up);  // nearest-neighbor feature copy
    Value grid = scatter_max_grid(dense, f.cells,
                                  {cfg.c5, cfg.grid_res, cfg.grid_res, cfg.grid_res});
    Value vol = unet2(g, p, grid, "psi.unet");
    return conv_bias(vol, p("psi.head.w"), p("psi.head.b"), 1, 0);
}

}  // namespace

std::pair<Value, Value> detect_saliencies(Graph& g, const BoundParams& p, const FrameInputs& fs,
                                          const FrameInputs& ft, const ModelConfig& cfg) {
    Value feat_s = point_mlp(g.constant(fs.points), p, "psi.point", false);
    Value feat_t = point_mlp(g.constant(ft.points), p, "psi.point", false);
    Value down_s = gather_rows(feat_s, fs.fps);
    Value down_t = gather_rows(feat_t, ft.fps);
    auto [mix_s, mix_t] = cross_attention(down_s, down_t, cfg);
    return {detect_one(g, p, fs, mix_s, cfg), detect_one(g, p, ft, mix_t, cfg)};
}

Value decode_occupancy(Graph& g, const BoundParams& p, Value volume, Value queries,
                       const ModelConfig& cfg) {
    (void)cfg;
    (void)g;
    Value qe = relu(point_mlp(queries, p, "omega.qenc", false));
    Value local = trilinear(volume, queries);
    Value h = relu(linear(concat({qe, local}, 1), p("omega.occ.w0"), p("omega.occ.b0")));
    h = relu(linear(h, p("omega.occ.w1"), p("omega.occ.b1")));
    return sigmoid(linear(h, p("omega.occ.w2"), p("omega.occ.b2")));
}

TransporterForward forward_transporter(Graph& g, const BoundParams& p, const FrameInputs& fs,
                                       const FrameInputs& ft, Value queries_t, Value queries_s,
                                       const ModelConfig& cfg, bool stopgrad_keypoints) {
    TransporterForward out;
    out.phi_s = encode_features(g, p, fs, cfg);
    out.phi_t = encode_features(g, p, ft, cfg);
    std::tie(out.sal_s, out.sal_t) = detect_saliencies(g, p, fs, ft, cfg);
    out.k_s = geom::marginalize_keypoints(out.sal_s);
    out.k_t = geom::marginalize_keypoints(out.sal_t);
    Value k_s = stopgrad_keypoints ? stop_gradient(out.k_s) : out.k_s;
    Value k_t = stopgrad_keypoints ? stop_gradient(out.k_t) : out.k_t;
    Value h_s = geom::gaussian_heatmap(k_s, cfg.sigma, cfg.grid_res);
    Value h_t = geom::gaussian_heatmap(k_t, cfg.sigma, cfg.grid_res);
    out.phi_plus = geom::transport_features(out.phi_s, out.phi_t, h_s, h_t);
    out.prob_t = decode_occupancy(g, p, out.phi_plus, queries_t, cfg);
    out.prob_s = decode_occupancy(g, p, out.phi_s, queries_s, cfg);
    return out;
}

}  // namespace tkd::model
