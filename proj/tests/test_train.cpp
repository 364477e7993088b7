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

#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "tkd/gradcheck.hpp"
#include "tkd/train.hpp"

using namespace tkd;
using namespace tkd::train;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("tkd_train_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

model::ModelConfig micro_model(int m = 3) {
    model::ModelConfig c;
    c.grid_res = 8;
    c.keypoints = m;
    c.c1 = 4;
    c.c2 = 4;
    c.c3 = 4;
    c.c4 = 8;
    c.c5 = 4;
    c.ce = 4;
    c.psi_hidden = 8;
    c.occ_hidden = 8;
    c.n1 = 64;
    c.n2 = 8;
    return c;
}

std::string micro_dataset(const std::string& tag, int pairs, int triplets) {
    data::DatasetConfig dc;
    dc.scene_kind = "door";
    dc.pairs = pairs;
    dc.triplets = triplets;
    dc.points = 128;
    dc.seed = 11;
    fs::path dir = temp_dir(tag);
    data::generate_dataset(dir.string(), dc, nlohmann::json::object());
    return dir.string();
}

TrainConfig micro_train_config(const std::string& data_dir) {
    TrainConfig tc;
    tc.model = micro_model();
    tc.data_dir = data_dir;
    tc.epochs = 2;
    tc.lr = 1e-3;
    tc.n_pos = 24;
    tc.n_neg = 24;
    tc.augment = false;
    tc.checkpoint_every = 0;
    return tc;
}

geom::KeypointSet random_keypoints(std::mt19937_64& rng, int m) {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    geom::KeypointSet k(static_cast<size_t>(m));
    for (auto& p : k) p = geom::Vec3(u(rng), u(rng), u(rng));
    return k;
}

}  // namespace

TEST_CASE("ackd scores a perfect detector at zero") {
    std::mt19937_64 rng(3);
    geom::KeypointSet k_a = random_keypoints(rng, 6);
    geom::RigidTransform gt{geom::rotation_about(geom::Vec3(0, 0, 1), 0.6),
                            geom::Vec3(0.1, 0, -0.05)};
    geom::KeypointSet k_b;
    for (const auto& p : k_a) k_b.push_back(gt.apply(p));
    CHECK(ackd(k_a, k_b, gt) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(rr(k_a, k_b, gt, 0.1) == 1.0);
}

TEST_CASE("one perturbed keypoint contributes its share to ackd") {
    std::mt19937_64 rng(5);
    geom::KeypointSet k_a = random_keypoints(rng, 6);
    geom::RigidTransform gt;  // identity
    geom::KeypointSet k_b = k_a;
    k_b[3] += geom::Vec3(0.05, 0, 0);
    CHECK(ackd(k_a, k_b, gt) == doctest::Approx(0.05 / 6.0).epsilon(1e-12));
}

TEST_CASE("ackd equals the brute-force mean of carried distances") {
    std::mt19937_64 rng(7);
    geom::KeypointSet k_a = random_keypoints(rng, 5);
    geom::KeypointSet k_b = random_keypoints(rng, 5);
    geom::RigidTransform gt{geom::rotation_about(geom::Vec3(1, 1, 0).normalized(), 0.4),
                            geom::Vec3(0.02, -0.03, 0.04)};
    double expect = 0.0;
    for (size_t i = 0; i < k_a.size(); ++i) expect += (gt.apply(k_a[i]) - k_b[i]).norm();
    expect /= 5.0;
    CHECK(ackd(k_a, k_b, gt) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("rr counts thresholded keypoints and is monotone in tau") {
    geom::KeypointSet k_a, k_b;
    geom::RigidTransform gt;
    for (int i = 0; i < 6; ++i) {
        k_a.emplace_back(0.1 * i, 0, 0);
        // distances: 3 below 0.05, 3 at 0.2
        k_b.emplace_back(0.1 * i + (i < 3 ? 0.01 : 0.2), 0, 0);
    }
    CHECK(rr(k_a, k_b, gt, 0.05) == doctest::Approx(0.5));
    CHECK(rr(k_a, k_b, gt, 0.3) == doctest::Approx(1.0));
    CHECK(rr(k_a, k_b, gt, 1e-6) == doctest::Approx(0.0));
    double prev = 0.0;
    for (double tau = 0.005; tau < 0.5; tau += 0.005) {
        const double cur = rr(k_a, k_b, gt, tau);
        CHECK(cur >= prev);
        prev = cur;
    }
}

TEST_CASE("add is zero for equal poses and exact for pure translations") {
    std::mt19937_64 rng(11);
    std::vector<geom::Vec3> part = random_keypoints(rng, 50);
    geom::RigidTransform gt{geom::rotation_about(geom::Vec3(0, 1, 0), 0.3), geom::Vec3(0.1, 0, 0)};
    CHECK(add_metric(gt, gt, part) == 0.0);
    geom::RigidTransform pred = gt;
    pred.t += geom::Vec3(0.03, -0.04, 0.12);
    CHECK(add_metric(pred, gt, part) ==
          doctest::Approx(geom::Vec3(0.03, -0.04, 0.12).norm()).epsilon(1e-12));
}

TEST_CASE("add under a small rotation matches the sampled mean") {
    std::mt19937_64 rng(13);
    std::vector<geom::Vec3> part = random_keypoints(rng, 200);
    geom::Vec3 centroid = geom::Vec3::Zero();
    for (const auto& p : part) centroid += p;
    centroid /= static_cast<double>(part.size());
    geom::RigidTransform gt;  // identity
    const geom::Mat3 r = geom::rotation_about(geom::Vec3(0, 0, 1), 0.02);
    geom::RigidTransform pred{r, centroid - r * centroid};  // rotate about the centroid
    double expect = 0.0;
    for (const auto& p : part) expect += (pred.apply(p) - p).norm();
    expect /= static_cast<double>(part.size());
    CHECK(add_metric(pred, gt, part) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ackd and add are invariant under conjugation by a common motion") {
    std::mt19937_64 rng(17);
    geom::KeypointSet k_a = random_keypoints(rng, 6);
    geom::KeypointSet k_b = random_keypoints(rng, 6);
    std::vector<geom::Vec3> part = random_keypoints(rng, 40);
    geom::RigidTransform gt{geom::rotation_about(geom::Vec3(0.2, 0.5, 1).normalized(), 0.8),
                            geom::Vec3(0.05, 0.1, -0.02)};
    geom::RigidTransform pred{geom::rotation_about(geom::Vec3(0.2, 0.5, 1).normalized(), 0.7),
                              geom::Vec3(0.06, 0.08, 0.0)};
    geom::RigidTransform q{geom::rotation_about(geom::Vec3(1, -1, 0.5).normalized(), 1.2),
                           geom::Vec3(0.3, -0.4, 0.25)};
    const double a0 = ackd(k_a, k_b, gt);
    const double d0 = add_metric(pred, gt, part);
    geom::KeypointSet ka2, kb2;
    std::vector<geom::Vec3> part2;
    for (const auto& p : k_a) ka2.push_back(q.apply(p));
    for (const auto& p : k_b) kb2.push_back(q.apply(p));
    for (const auto& p : part) part2.push_back(q.apply(p));
    const geom::RigidTransform gt2 = q.compose(gt).compose(q.inverse());
    const geom::RigidTransform pred2 = q.compose(pred).compose(q.inverse());
    CHECK(ackd(ka2, kb2, gt2) == doctest::Approx(a0).epsilon(1e-9));
    CHECK(add_metric(pred2, gt2, part2) == doctest::Approx(d0).epsilon(1e-9));
}

TEST_CASE("checkpoints round trip bit-exactly at fp32") {
    model::ModelConfig cfg = micro_model();
    model::Params params = model::init_params(cfg, 3);
    fs::path dir = temp_dir("ckpt");
    const std::string path = (dir / "c.tkd").string();
    save_checkpoint(path, cfg, params);
    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config.grid_res == cfg.grid_res);
    REQUIRE(ck.params.size() == params.size());
    for (const auto& [name, t] : params) {
        const Tensor& got = ck.params.at(name);
        REQUIRE(got.shape == t.shape);
        for (int64_t i = 0; i < t.numel(); ++i)
            CHECK(got.data[i] == static_cast<double>(static_cast<float>(t.data[i])));
    }
    // a second save of the loaded params is byte-identical
    const std::string path2 = (dir / "c2.tkd").string();
    save_checkpoint(path2, ck.config, ck.params);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
}

TEST_CASE("truncated checkpoints fail the checksum, not silently") {
    model::ModelConfig cfg = micro_model();
    model::Params params = model::init_params(cfg, 4);
    fs::path dir = temp_dir("ckpt_trunc");
    const std::string path = (dir / "c.tkd").string();
    save_checkpoint(path, cfg, params);
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign((std::istreambuf_iterator<char>(in)), {});
    }
    {
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
    }
    CHECK_THROWS_AS((void)load_checkpoint(path), TrainError);
    // corrupting one payload byte trips the per-tensor checksum
    {
        std::ofstream out(path, std::ios::binary);
        bytes[bytes.size() - 10] = static_cast<char>(bytes[bytes.size() - 10] ^ 0x40);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("checksum"), TrainError);
}

TEST_CASE("a hand-built single-tensor checkpoint loads to the expected values") {
    fs::path dir = temp_dir("ckpt_fix");
    const std::string path = (dir / "fix.tkd").string();
    const float vals[4] = {1.5f, -2.0f, 0.25f, 4.0f};
    // FNV-1a 64 of the payload, matching the writer
    uint64_t h = 1469598103934665603ull;
    const auto* pb = reinterpret_cast<const unsigned char*>(vals);
    for (size_t i = 0; i < sizeof(vals); ++i) {
        h ^= pb[i];
        h *= 1099511628211ull;
    }
    char checksum[17];
    std::snprintf(checksum, sizeof(checksum), "%016llx", static_cast<unsigned long long>(h));
    nlohmann::json header{
        {"model", micro_model().to_json()},
        {"tensors", nlohmann::json::array({{{"name", "w"},
                                            {"dtype", "f32"},
                                            {"shape", {2, 2}},
                                            {"offset", 0},
                                            {"checksum", checksum}}})},
        {"payload_bytes", sizeof(vals)}};
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    out.write("TKDCKPT1", 8);
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(reinterpret_cast<const char*>(vals), sizeof(vals));
    out.close();
    Checkpoint ck = load_checkpoint(path);
    REQUIRE(ck.params.count("w") == 1);
    const Tensor& w = ck.params.at("w");
    REQUIRE(w.shape == Shape{2, 2});
    CHECK(w.data == std::vector<double>({1.5, -2.0, 0.25, 4.0}));
}

TEST_CASE("zero-epoch training returns the initialization") {
    const std::string data_dir = micro_dataset("zerostep", 2, 0);
    TrainConfig tc = micro_train_config(data_dir);
    tc.epochs = 0;
    fs::path out = temp_dir("zerostep_out");
    TrainResult r = tkd::train::train(tc, out.string());
    model::Params init = model::init_params(tc.model, tc.seed);
    for (const auto& [name, t] : init) {
        const Tensor& got = r.params.at(name);
        for (int64_t i = 0; i < t.numel(); ++i) CHECK(got.data[i] == t.data[i]);
    }
    Checkpoint ck = load_checkpoint((out / "checkpoint.tkd").string());
    for (const auto& [name, t] : init)
        for (int64_t i = 0; i < t.numel(); ++i)
            CHECK(ck.params.at(name).data[i] == static_cast<double>(static_cast<float>(t.data[i])));
}

TEST_CASE("disabled articulation prior reports inactive corr and axis terms") {
    const std::string data_dir = micro_dataset("noprior", 2, 1);
    TrainConfig tc = micro_train_config(data_dir);
    tc.articulation_prior = false;
    tc.epochs = 1;
    TrainResult r = tkd::train::train(tc);
    REQUIRE(!r.curve.empty());
    for (const StepLog& l : r.curve) {
        CHECK(l.corr == 0.0);
        CHECK(l.axis == 0.0);
        CHECK(l.total == doctest::Approx(l.occ_t + l.occ_s).epsilon(1e-12));
    }
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
    const std::string data_dir = micro_dataset("repro", 2, 1);
    TrainConfig tc = micro_train_config(data_dir);
    tc.epochs = 2;
    TrainResult a = tkd::train::train(tc);
    TrainResult b = tkd::train::train(tc);
    REQUIRE(a.curve.size() == b.curve.size());
    for (size_t i = 0; i < a.curve.size(); ++i) {
        CHECK(a.curve[i].total == b.curve[i].total);
        CHECK(a.curve[i].occ_t == b.curve[i].occ_t);
        CHECK(a.curve[i].corr == b.curve[i].corr);
    }
    for (const auto& [name, t] : a.params) {
        const Tensor& u = b.params.at(name);
        for (int64_t i = 0; i < t.numel(); ++i) CHECK(t.data[i] == u.data[i]);
    }
}

TEST_CASE("a short micro run keeps losses finite and logs every step") {
    const std::string data_dir = micro_dataset("smoke", 3, 1);
    TrainConfig tc = micro_train_config(data_dir);
    tc.epochs = 3;
    tc.max_steps = 9;
    fs::path out = temp_dir("smoke_out");
    TrainResult r = tkd::train::train(tc, out.string());
    CHECK(r.steps == 9);
    REQUIRE(r.curve.size() == 9);
    for (const StepLog& l : r.curve) CHECK(std::isfinite(l.total));
    std::ifstream csv(out / "curve.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == std::string(kCurveHeader));
    int rows = 0;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 9);
}

TEST_CASE("end-to-end micro gradients match finite differences") {
    const std::string data_dir = micro_dataset("fd", 1, 1);
    TrainConfig tc = micro_train_config(data_dir);
    // triplet sequence: occupancy + correspondence + axis paths all active
    data::Sequence seq = data::read_sequence(data::list_sequence_dirs(data_dir)[1]);
    REQUIRE(seq.frames.size() == 3);
    data::NormalizedSequence ns = data::normalize(seq);
    std::mt19937_64 rng(5);
    StepGraph sg = build_training_graph(tc, ns, rng);
    model::Params params = model::init_params(tc.model, 21);
    Bindings bind;
    for (const auto& [name, t] : params) bind[name] = t;
    std::vector<std::string> wrt;
    for (const auto& [name, t] : params) wrt.push_back(name);
    std::mt19937_64 pick(99);
    auto rep = finite_difference_check(*sg.graph, sg.total, bind, wrt, 1e-6, 4, &pick);
    for (const auto& [name, err] : rep) {
        INFO(name, " err=", err);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("evaluation aggregates finite metrics and dumps keypoints") {
    const std::string data_dir = micro_dataset("eval", 2, 1);
    model::ModelConfig cfg = micro_model();
    model::Params params = model::init_params(cfg, 5);
    fs::path dumps = temp_dir("eval_dumps");
    EvalOptions opt;
    opt.dump_dir = dumps.string();
    PerceptionReport rep = evaluate(cfg, params, data_dir, opt);
    CHECK(rep.per_pair.size() == 2 * 1 + 1 * 2);
    CHECK(std::isfinite(rep.ackd));
    CHECK(rep.rr >= 0.0);
    CHECK(rep.rr <= 1.0);
    CHECK(rep.add >= 0.0);
    nlohmann::json j = rep.to_json(nlohmann::json{{"tag", "t"}});
    CHECK(j.at("per_pair").size() == rep.per_pair.size());
    CHECK(j.at("aggregate").contains("ackd"));
    // keypoint dumps parse back as clouds with m points
    data::Cloud c = data::read_cloud_ply((dumps / "seq_0000_pair0_a.ply").string());
    CHECK(c.size() == static_cast<size_t>(cfg.keypoints));
}
