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
#include "tkd/data.hpp"

using namespace tkd;
using namespace tkd::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("tkd_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("rest-pose part points satisfy the rest box equation") {
    ArticulatedScene s = make_door_scene();
    Cloud c = generate_cloud(s, 0.0, 500, uint64_t{1});
    REQUIRE(c.points.size() == 500);
    REQUIRE(c.part_mask.size() == 500);
    int part_count = 0;
    for (size_t i = 0; i < c.size(); ++i) {
        if (!c.part_mask[i]) continue;
        ++part_count;
        CHECK(std::abs(s.part.sdf(c.points[i])) < 1e-12);
    }
    CHECK(part_count > 0);
    CHECK(part_count < 500);
}

TEST_CASE("prismatic motion translates part points along the axis") {
    ArticulatedScene s = make_drawer_scene();
    const double d = 0.3;
    // identical seeds give identical surface draws, so the displacement is exact
    Cloud rest = generate_cloud(s, 0.0, 400, uint64_t{5});
    Cloud moved = generate_cloud(s, d, 400, uint64_t{5});
    for (size_t i = 0; i < rest.size(); ++i) {
        if (rest.part_mask[i]) {
            CHECK((moved.points[i] - (rest.points[i] + d * s.joint.axis)).norm() < 1e-12);
        } else {
            CHECK((moved.points[i] - rest.points[i]).norm() == 0.0);
        }
    }
}

TEST_CASE("revolute motion applies the closed-form rotation pointwise") {
    ArticulatedScene s = make_door_scene();
    const double theta = 0.9;
    Cloud rest = generate_cloud(s, 0.0, 400, uint64_t{9});
    Cloud moved = generate_cloud(s, theta, 400, uint64_t{9});
    const geom::Mat3 r = geom::rotation_about(s.joint.axis, theta);
    for (size_t i = 0; i < rest.size(); ++i) {
        if (!rest.part_mask[i]) continue;
        const geom::Vec3 expect = s.joint.origin + r * (rest.points[i] - s.joint.origin);
        CHECK((moved.points[i] - expect).norm() < 1e-12);
    }
}

TEST_CASE("out-of-limit joint values are rejected") {
    ArticulatedScene s = make_door_scene();
    std::mt19937_64 rng(3);
    CHECK_THROWS_AS((void)generate_cloud(s, -0.5, 100, rng), DataError);
    CHECK_THROWS_AS((void)generate_cloud(s, 99.0, 100, rng), DataError);
}

TEST_CASE("pairs always separate their joint values") {
    ArticulatedScene s = make_drawer_scene();
    std::mt19937_64 rng(7);
    for (int i = 0; i < 50; ++i) {
        Sequence seq = sample_pair(s, rng, 64);
        REQUIRE(seq.frames.size() == 2);
        CHECK(std::abs(seq.frames[1].joint_value - seq.frames[0].joint_value) >=
              0.15 * s.joint.range() - 1e-12);
    }
}

TEST_CASE("triplets are monotone with separated values") {
    ArticulatedScene s = make_door_scene();
    std::mt19937_64 rng(11);
    for (int i = 0; i < 30; ++i) {
        Sequence seq = sample_triplet(s, rng, 64);
        REQUIRE(seq.frames.size() == 3);
        const double a = seq.frames[0].joint_value;
        const double b = seq.frames[1].joint_value;
        const double c = seq.frames[2].joint_value;
        const bool increasing = a < b && b < c;
        const bool decreasing = a > b && b > c;
        CHECK((increasing || decreasing));
        CHECK(std::abs(b - a) >= 0.15 * s.joint.range() - 1e-12);
        CHECK(std::abs(c - b) >= 0.15 * s.joint.range() - 1e-12);
    }
}

TEST_CASE("prismatic GT pose is a pure translation along the axis") {
    ArticulatedScene s = make_drawer_scene();
    std::mt19937_64 rng(13);
    Sequence seq = sample_pair(s, rng, 64);
    const double dv = seq.frames[1].joint_value - seq.frames[0].joint_value;
    CHECK((seq.frames[1].pose.R - geom::Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((seq.frames[1].pose.t - dv * s.joint.axis).norm() < 1e-12);
}

TEST_CASE("revolute GT pose carries the joint axis up to sign") {
    ArticulatedScene s = make_door_scene();
    std::mt19937_64 rng(17);
    for (int i = 0; i < 10; ++i) {
        Sequence seq = sample_pair(s, rng, 64);
        const geom::AxisAngle aa = geom::axis_angle(seq.frames[1].pose.R);
        CHECK(std::min((aa.axis - s.joint.axis).norm(), (aa.axis + s.joint.axis).norm()) < 1e-9);
        CHECK(aa.angle ==
              doctest::Approx(std::abs(seq.frames[1].joint_value - seq.frames[0].joint_value))
                  .epsilon(1e-9));
    }
}

TEST_CASE("GT part points recover the manifest pose by rigid fit") {
    for (const char* kind : {"door", "drawer"}) {
        ArticulatedScene s = make_scene(kind);
        std::mt19937_64 rng(19);
        Sequence seq = sample_pair(s, rng, 600);
        // same seed per frame is not guaranteed, so fit on analytically moved points
        geom::KeypointSet src, dst;
        for (size_t i = 0; i < seq.frames[0].cloud.size(); ++i) {
            if (!seq.frames[0].cloud.part_mask[i]) continue;
            src.push_back(seq.frames[0].cloud.points[i]);
            dst.push_back(seq.frames[1].pose.apply(seq.frames[0].cloud.points[i]));
        }
        REQUIRE(src.size() >= 3);
        geom::RigidFit fit = geom::fit_rigid(src, dst);
        double resid = 0.0;
        for (size_t i = 0; i < src.size(); ++i)
            resid = std::max(resid, (dst[i] - fit.transform.apply(src[i])).norm());
        CHECK(resid < 1e-9);
        CHECK((fit.transform.R - seq.frames[1].pose.R).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("positives come from the cloud and labels count them") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    std::vector<geom::Vec3> cloud(200);
    for (auto& p : cloud) p = geom::Vec3(u(rng), u(rng), u(rng));
    QueryBatch q = sample_queries(cloud, 50, 70, rng);
    REQUIRE(q.points.shape == Shape{120, 3});
    double label_sum = 0.0;
    for (double v : q.labels.data) label_sum += v;
    CHECK(label_sum == 50.0);
    for (int i = 0; i < 50; ++i) {
        bool found = false;
        for (const auto& p : cloud)
            if (p.x() == q.points.at(i, 0) && p.y() == q.points.at(i, 1) &&
                p.z() == q.points.at(i, 2))
                found = true;
        CHECK(found);
    }
}

TEST_CASE("random negatives rarely land near the surface") {
    // Monte-Carlo against the box SDF, in normalized units
    ArticulatedScene s = make_door_scene();
    std::mt19937_64 rng(29);
    Sequence seq = sample_pair(s, rng, 512);
    NormalizedSequence ns = normalize(seq);
    QueryBatch q = sample_queries(ns.clouds[1].points, 10, 100000, rng);
    const geom::RigidTransform posed =
        joint_transform(s.joint, seq.frames[1].joint_value);
    int near = 0;
    for (int i = q.n_pos; i < q.n_pos + q.n_neg; ++i) {
        const geom::Vec3 p_world = ns.frame.to_world(
            geom::Vec3(q.points.at(i, 0), q.points.at(i, 1), q.points.at(i, 2)));
        const double d_base = std::abs(s.base.sdf(p_world));
        const double d_part = std::abs(s.part.sdf(posed.inverse().apply(p_world)));
        if (std::min(d_base, d_part) / ns.frame.scale < 1e-3) ++near;
    }
    CHECK(static_cast<double>(near) / q.n_neg < 0.01);
}

TEST_CASE("identity augmentation leaves the sequence untouched") {
    ArticulatedScene s = make_drawer_scene();
    std::mt19937_64 rng(31);
    Sequence seq = sample_pair(s, rng, 128);
    Sequence copy = seq;
    AugmentParams p;
    p.rotate = false;
    p.max_translation = 0.0;
    p.noise_sigma = 0.0;
    augment_sequence(copy, rng, p);
    for (size_t f = 0; f < seq.frames.size(); ++f)
        for (size_t i = 0; i < seq.frames[f].cloud.size(); ++i)
            CHECK((copy.frames[f].cloud.points[i] - seq.frames[f].cloud.points[i]).norm() == 0.0);
}

TEST_CASE("rigid-only augmentation is an isometry") {
    ArticulatedScene s = make_door_scene();
    std::mt19937_64 rng(37);
    Sequence seq = sample_pair(s, rng, 100);
    Sequence aug = seq;
    AugmentParams p;
    p.noise_sigma = 0.0;
    augment_sequence(aug, rng, p);
    const auto& a = seq.frames[0].cloud.points;
    const auto& b = aug.frames[0].cloud.points;
    for (size_t i = 1; i < a.size(); i += 7)
        CHECK(std::abs((a[i] - a[0]).norm() - (b[i] - b[0]).norm()) < 1e-9);
}

TEST_CASE("augmentation conjugates the GT pose") {
    ArticulatedScene s = make_door_scene();
    std::mt19937_64 rng(41);
    Sequence seq = sample_pair(s, rng, 400);
    Sequence aug = seq;
    AugmentParams p;
    p.noise_sigma = 0.0;
    augment_sequence(aug, rng, p);
    // the stored pose must still map augmented frame-0 part points onto an
    // exact rigid fit of the augmented configuration
    geom::KeypointSet src, dst;
    for (size_t i = 0; i < aug.frames[0].cloud.size(); ++i) {
        if (!aug.frames[0].cloud.part_mask[i]) continue;
        src.push_back(aug.frames[0].cloud.points[i]);
        dst.push_back(aug.frames[1].pose.apply(aug.frames[0].cloud.points[i]));
    }
    geom::RigidFit fit = geom::fit_rigid(src, dst);
    CHECK((fit.transform.R - aug.frames[1].pose.R).cwiseAbs().maxCoeff() < 1e-9);
    // and the conjugated rotation has the augmented axis
    const geom::AxisAngle aa = geom::axis_angle(aug.frames[1].pose.R);
    const geom::AxisAngle orig = geom::axis_angle(seq.frames[1].pose.R);
    CHECK(aa.angle == doctest::Approx(orig.angle).epsilon(1e-9));
}

TEST_CASE("normalized sequences live in the unit cube with exact poses") {
    ArticulatedScene s = make_door_scene();
    std::mt19937_64 rng(43);
    Sequence seq = sample_triplet(s, rng, 300);
    NormalizedSequence ns = normalize(seq);
    for (const Cloud& c : ns.clouds)
        for (const auto& p : c.points)
            for (int j = 0; j < 3; ++j) CHECK(std::abs(p[j]) <= 0.5 + 1e-12);
    // pose residual on normalized GT part points, noiseless
    for (size_t f = 1; f < ns.clouds.size(); ++f) {
        double resid = 0.0;
        for (size_t i = 0; i < ns.clouds[0].size(); ++i) {
            if (!ns.clouds[0].part_mask[i]) continue;
            const geom::Vec3 moved = ns.poses[f].apply(ns.frame.to_normalized(
                seq.frames[0].cloud.points[i]));
            const geom::Vec3 expect =
                ns.frame.to_normalized(seq.frames[f].pose.apply(seq.frames[0].cloud.points[i]));
            resid = std::max(resid, (moved - expect).norm());
        }
        CHECK(resid < 1e-9);
    }
}

TEST_CASE("PLY round trip preserves counts and coordinates") {
    ArticulatedScene s = make_drawer_scene();
    Cloud c = generate_cloud(s, 0.2, 123, uint64_t{47});
    fs::path dir = temp_dir("ply");
    write_cloud_ply((dir / "c.ply").string(), c);
    Cloud back = read_cloud_ply((dir / "c.ply").string());
    REQUIRE(back.size() == c.size());
    for (size_t i = 0; i < c.size(); ++i) {
        CHECK((back.points[i] - c.points[i]).norm() < 1e-6);
        CHECK(back.part_mask[i] == c.part_mask[i]);
    }
    // fp32 print precision: a second round trip is bit-stable
    write_cloud_ply((dir / "c2.ply").string(), back);
    CHECK(slurp(dir / "c.ply") == slurp(dir / "c2.ply"));
}

TEST_CASE("empty and malformed PLY files fail with line numbers") {
    fs::path dir = temp_dir("plybad");
    {
        std::ofstream f(dir / "empty.ply");
        f << "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float "
             "y\nproperty float z\nend_header\n";
    }
    CHECK_THROWS_WITH_AS((void)read_cloud_ply((dir / "empty.ply").string()),
                         doctest::Contains("empty cloud"), DataError);
    {
        std::ofstream f(dir / "short.ply");
        f << "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float "
             "y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
    }
    CHECK_THROWS_WITH_AS((void)read_cloud_ply((dir / "short.ply").string()),
                         doctest::Contains(":9"), DataError);
    {
        std::ofstream f(dir / "noformat.ply");
        f << "ply\nfornat ascii 1.0\n";
    }
    CHECK_THROWS_WITH_AS((void)read_cloud_ply((dir / "noformat.ply").string()),
                         doctest::Contains(":2"), DataError);
}

TEST_CASE("a hand-written three-point fixture parses exactly") {
    fs::path dir = temp_dir("plyfix");
    {
        std::ofstream f(dir / "fix.ply");
        f << "ply\n"
             "format ascii 1.0\n"
             "comment fixture\n"
             "element vertex 3\n"
             "property float x\n"
             "property float y\n"
             "property float z\n"
             "property uchar part\n"
             "end_header\n"
             "0.5 -0.25 0.125 1\n"
             "-1 2 -3 0\n"
             "0.0625 0 1.5 1\n";
    }
    Cloud c = read_cloud_ply((dir / "fix.ply").string());
    REQUIRE(c.size() == 3);
    CHECK(c.points[0] == geom::Vec3(0.5, -0.25, 0.125));
    CHECK(c.points[1] == geom::Vec3(-1, 2, -3));
    CHECK(c.points[2] == geom::Vec3(0.0625, 0, 1.5));
    CHECK(c.part_mask == std::vector<uint8_t>({1, 0, 1}));
}

TEST_CASE("sequence write and read round trip") {
    ArticulatedScene s = make_door_scene(2);
    std::mt19937_64 rng(53);
    Sequence seq = sample_triplet(s, rng, 80);
    fs::path dir = temp_dir("seq");
    write_sequence(dir.string(), seq);
    Sequence back = read_sequence(dir.string());
    REQUIRE(back.frames.size() == 3);
    CHECK(back.scene.name == s.name);
    CHECK(back.scene.joint.kind == s.joint.kind);
    for (size_t f = 0; f < 3; ++f) {
        CHECK(back.frames[f].joint_value ==
              doctest::Approx(seq.frames[f].joint_value).epsilon(1e-12));
        CHECK((back.frames[f].pose.R - seq.frames[f].pose.R).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(back.frames[f].cloud.size() == 80);
    }
}

TEST_CASE("dataset generation is deterministic and counts frames") {
    DatasetConfig cfg;
    cfg.pairs = 3;
    cfg.triplets = 2;
    cfg.points = 40;
    cfg.seed = 7;
    fs::path a = temp_dir("ds_a"), b = temp_dir("ds_b");
    DatasetSummary sa = generate_dataset(a.string(), cfg, json{{"tag", "x"}});
    DatasetSummary sb = generate_dataset(b.string(), cfg, json{{"tag", "x"}});
    CHECK(sa.sequences == 5);
    CHECK(sa.frames == 3 * 2 + 2 * 3);
    CHECK(sb.frames == sa.frames);
    // byte-identical outputs for identical config and seed
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        fs::path rel = fs::relative(e.path(), a);
        CHECK(slurp(e.path()) == slurp(b / rel));
    }
    auto dirs = list_sequence_dirs(a.string());
    CHECK(dirs.size() == 5);
}
