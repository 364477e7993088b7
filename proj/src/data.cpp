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

#include "tkd/data.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace tkd::data {

namespace fs = std::filesystem;

double Box::surface_area() const {
    return 8.0 * (half.x() * half.y() + half.y() * half.z() + half.x() * half.z());
}

double Box::sdf(const Vec3& p) const {
    const Vec3 q = (p - center).cwiseAbs() - half;
    const Vec3 outside = q.cwiseMax(0.0);
    return outside.norm() + std::min(q.maxCoeff(), 0.0);
}

Vec3 Box::sample_surface(std::mt19937_64& rng) const {
    // face pairs weighted by area: yz, xz, xy
    const double ax = half.y() * half.z();
    const double ay = half.x() * half.z();
    const double az = half.x() * half.y();
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double pick = u01(rng) * (ax + ay + az);
    const int axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
    const double side = u01(rng) < 0.5 ? -1.0 : 1.0;
    Vec3 p;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 3; ++i) p[i] = u(rng) * half[i];
    p[axis] = side * half[axis];
    return center + p;
}

ArticulatedScene make_door_scene(uint64_t variant) {
    std::mt19937_64 rng(0x9d0e5ull ^ (variant * 0x2545F4914F6CDD1Dull));
    std::uniform_real_distribution<double> u(0.9, 1.1);
    ArticulatedScene s;
    s.name = "door_" + std::to_string(variant);
    s.base.center = Vec3(0.0, 0.0, 0.0);
    s.base.half = Vec3(0.05, 0.08 * u(rng), 0.35 * u(rng));
    const double width = 0.28 * u(rng);
    s.part.center = Vec3(0.05 + width, 0.0, 0.0);
    s.part.half = Vec3(width, 0.02, 0.3 * u(rng));
    s.joint.kind = JointSpec::Kind::Revolute;
    s.joint.origin = Vec3(0.05, 0.0, 0.0);  // hinge at the base edge
    s.joint.axis = Vec3(0, 0, 1);
    s.joint.lo = 0.0;
    s.joint.hi = M_PI / 2.0;
    return s;
}

ArticulatedScene make_drawer_scene(uint64_t variant) {
    std::mt19937_64 rng(0x7a3b1ull ^ (variant * 0x2545F4914F6CDD1Dull));
    std::uniform_real_distribution<double> u(0.9, 1.1);
    ArticulatedScene s;
    s.name = "drawer_" + std::to_string(variant);
    s.base.center = Vec3(0.0, 0.0, 0.0);
    s.base.half = Vec3(0.25 * u(rng), 0.22 * u(rng), 0.22 * u(rng));
    s.part.center = Vec3(0.05, 0.0, 0.08);
    s.part.half = Vec3(0.22, 0.18 * u(rng), 0.08);
    s.joint.kind = JointSpec::Kind::Prismatic;
    s.joint.axis = Vec3(1, 0, 0);
    s.joint.lo = 0.0;
    s.joint.hi = 0.45;
    return s;
}

ArticulatedScene make_scene(const std::string& kind, uint64_t variant) {
    if (kind == "door") return make_door_scene(variant);
    if (kind == "drawer") return make_drawer_scene(variant);
    throw DataError("unknown scene kind '" + kind + "' (expected door or drawer)");
}

geom::RigidTransform joint_transform(const JointSpec& j, double q) {
    if (j.kind == JointSpec::Kind::Prismatic) return {Mat3::Identity(), q * j.axis};
    const Mat3 r = geom::rotation_about(j.axis, q);
    return {r, j.origin - r * j.origin};
}

double part_surface_distance(const ArticulatedScene& scene, double q, const Vec3& p) {
    // pull the query into the rest pose, then use the box SDF
    const Vec3 local = joint_transform(scene.joint, q).inverse().apply(p);
    return std::abs(scene.part.sdf(local));
}

Cloud generate_cloud(const ArticulatedScene& scene, double joint_value, int n_points,
                     std::mt19937_64& rng) {
    if (joint_value < scene.joint.lo - 1e-12 || joint_value > scene.joint.hi + 1e-12)
        throw DataError("joint value " + std::to_string(joint_value) + " outside limits");
    if (n_points < 2) throw DataError("need at least 2 points");
    const double a_base = scene.base.surface_area();
    const double a_part = scene.part.surface_area();
    auto n_base = static_cast<int>(std::llround(n_points * a_base / (a_base + a_part)));
    n_base = std::clamp(n_base, 1, n_points - 1);
    const geom::RigidTransform t = joint_transform(scene.joint, joint_value);
    Cloud c;
    c.points.reserve(static_cast<size_t>(n_points));
    c.part_mask.reserve(static_cast<size_t>(n_points));
    for (int i = 0; i < n_base; ++i) {
        c.points.push_back(scene.base.sample_surface(rng));
        c.part_mask.push_back(0);
    }
    for (int i = n_base; i < n_points; ++i) {
        c.points.push_back(t.apply(scene.part.sample_surface(rng)));
        c.part_mask.push_back(1);
    }
    return c;
}

Cloud generate_cloud(const ArticulatedScene& scene, double joint_value, int n_points,
                     uint64_t seed) {
    std::mt19937_64 rng(seed);
    return generate_cloud(scene, joint_value, n_points, rng);
}

namespace {

std::vector<double> draw_joint_values(const JointSpec& j, std::mt19937_64& rng, int count,
                                      double delta_min) {
    if (j.range() <= 0.0) throw DataError("joint limits give an empty range");
    const double min_gap = delta_min * j.range();
    std::uniform_real_distribution<double> u(j.lo, j.hi);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::vector<double> v(static_cast<size_t>(count));
        for (auto& x : v) x = u(rng);
        std::sort(v.begin(), v.end());
        bool ok = true;
        for (size_t i = 1; i < v.size(); ++i)
            if (v[i] - v[i - 1] < min_gap) ok = false;
        if (ok) return v;
    }
    throw DataError("could not draw separated joint values; delta_min too large?");
}

Sequence make_sequence(const ArticulatedScene& scene, std::mt19937_64& rng, int n_points,
                       double delta_min, int count) {
    std::vector<double> values = draw_joint_values(scene.joint, rng, count, delta_min);
    if (rng() % 2 == 1) std::reverse(values.begin(), values.end());  // both motion directions
    Sequence seq;
    seq.scene = scene;
    const geom::RigidTransform t0_inv = joint_transform(scene.joint, values[0]).inverse();
    for (int i = 0; i < count; ++i) {
        Frame f;
        f.joint_value = values[static_cast<size_t>(i)];
        f.pose = joint_transform(scene.joint, f.joint_value).compose(t0_inv);
        f.cloud = generate_cloud(scene, f.joint_value, n_points, rng);
        f.path = "frame_" + std::to_string(i) + ".ply";
        seq.frames.push_back(std::move(f));
    }
    return seq;
}

}  // namespace

Sequence sample_pair(const ArticulatedScene& scene, std::mt19937_64& rng, int n_points,
                     double delta_min) {
    return make_sequence(scene, rng, n_points, delta_min, 2);
}

Sequence sample_triplet(const ArticulatedScene& scene, std::mt19937_64& rng, int n_points,
                        double delta_min) {
    return make_sequence(scene, rng, n_points, delta_min, 3);
}

QueryBatch sample_queries(const std::vector<Vec3>& cloud, int n_pos, int n_neg,
                          std::mt19937_64& rng) {
    if (cloud.empty()) throw DataError("sample_queries: empty cloud");
    QueryBatch q;
    q.n_pos = n_pos;
    q.n_neg = n_neg;
    q.points = Tensor({n_pos + n_neg, 3});
    q.labels = Tensor({n_pos + n_neg, 1});
    std::uniform_int_distribution<size_t> pick(0, cloud.size() - 1);
    for (int i = 0; i < n_pos; ++i) {
        const Vec3& p = cloud[pick(rng)];
        for (int j = 0; j < 3; ++j) q.points.at(i, j) = p[j];
        q.labels.at(i, 0) = 1.0;
    }
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (int i = n_pos; i < n_pos + n_neg; ++i) {
        for (int j = 0; j < 3; ++j) q.points.at(i, j) = u(rng);
        q.labels.at(i, 0) = 0.0;
    }
    return q;
}

void augment_sequence(Sequence& seq, std::mt19937_64& rng, const AugmentParams& p) {
    geom::RigidTransform shared;
    if (p.rotate) {
        // uniform rotation via a random unit quaternion
        std::normal_distribution<double> n;
        Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
        while (q.norm() < 1e-9) q = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng));
        q.normalize();
        shared.R = q.toRotationMatrix();
    }
    std::uniform_real_distribution<double> ut(-p.max_translation, p.max_translation);
    shared.t = Vec3(ut(rng), ut(rng), ut(rng));
    std::normal_distribution<double> jitter(0.0, p.noise_sigma);
    const geom::RigidTransform shared_inv = shared.inverse();
    for (Frame& f : seq.frames) {
        for (Vec3& pt : f.cloud.points) {
            pt = shared.apply(pt);
            if (p.noise_sigma > 0.0) pt += Vec3(jitter(rng), jitter(rng), jitter(rng));
        }
        f.pose = shared.compose(f.pose).compose(shared_inv);
    }
}

NormalizedSequence normalize(const Sequence& seq) {
    std::vector<const std::vector<Vec3>*> clouds;
    for (const Frame& f : seq.frames) clouds.push_back(&f.cloud.points);
    NormalizedSequence out;
    out.frame = geom::NormalizedFrame::fit(clouds);
    for (const Frame& f : seq.frames) {
        Cloud c;
        c.part_mask = f.cloud.part_mask;
        c.points.reserve(f.cloud.points.size());
        for (const Vec3& p : f.cloud.points) c.points.push_back(out.frame.to_normalized(p));
        out.clouds.push_back(std::move(c));
        out.poses.push_back(geom::to_normalized(f.pose, out.frame));
        out.joint_values.push_back(f.joint_value);
    }
    return out;
}

// ---- PLY --------------------------------------------------------------------

void write_cloud_ply(const std::string& path, const Cloud& cloud) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    const bool with_part = !cloud.part_mask.empty();
    std::fprintf(f, "ply\nformat ascii 1.0\nelement vertex %zu\n", cloud.points.size());
    std::fprintf(f, "property float x\nproperty float y\nproperty float z\n");
    if (with_part) std::fprintf(f, "property uchar part\n");
    std::fprintf(f, "end_header\n");
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        const Vec3& p = cloud.points[i];
        std::fprintf(f, "%.9g %.9g %.9g", static_cast<double>(static_cast<float>(p.x())),
                     static_cast<double>(static_cast<float>(p.y())),
                     static_cast<double>(static_cast<float>(p.z())));
        if (with_part) std::fprintf(f, " %d", cloud.part_mask[i] ? 1 : 0);
        std::fprintf(f, "\n");
    }
    std::fclose(f);
}

namespace {

[[noreturn]] void ply_fail(const std::string& path, int line, const std::string& msg) {
    throw DataError(path + ":" + std::to_string(line) + ": " + msg);
}

}  // namespace

Cloud read_cloud_ply(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    int lineno = 0;
    auto next_line = [&]() -> bool {
        while (std::getline(in, line)) {
            ++lineno;
            return true;
        }
        return false;
    };
    if (!next_line() || line != "ply") ply_fail(path, lineno, "missing 'ply' magic");
    if (!next_line() || line != "format ascii 1.0")
        ply_fail(path, lineno, "expected 'format ascii 1.0'");
    int64_t n = -1;
    bool with_part = false;
    std::vector<std::string> props;
    while (next_line()) {
        if (line.rfind("comment", 0) == 0) continue;
        if (line.rfind("element vertex ", 0) == 0) {
            n = std::strtoll(line.c_str() + 15, nullptr, 10);
            continue;
        }
        if (line.rfind("element ", 0) == 0)
            ply_fail(path, lineno, "unsupported element '" + line + "'");
        if (line.rfind("property ", 0) == 0) {
            props.push_back(line.substr(9));
            continue;
        }
        if (line == "end_header") break;
        ply_fail(path, lineno, "unexpected header line '" + line + "'");
    }
    if (n < 0) ply_fail(path, lineno, "missing 'element vertex'");
    if (n == 0) ply_fail(path, lineno, "empty cloud (0 vertices)");
    if (props.size() < 3 || props[0] != "float x" || props[1] != "float y" ||
        props[2] != "float z")
        ply_fail(path, lineno, "expected properties float x, float y, float z");
    if (props.size() == 4) {
        if (props[3] != "uchar part") ply_fail(path, lineno, "unsupported fourth property");
        with_part = true;
    } else if (props.size() > 4) {
        ply_fail(path, lineno, "too many properties");
    }
    Cloud c;
    c.points.reserve(static_cast<size_t>(n));
    if (with_part) c.part_mask.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        if (!next_line()) ply_fail(path, lineno, "unexpected end of file (want " +
                                                     std::to_string(n) + " vertices)");
        double x, y, z;
        int part = 0;
        const int want = with_part ? 4 : 3;
        const int got = std::sscanf(line.c_str(), "%lf %lf %lf %d", &x, &y, &z, &part);
        if (got < want) ply_fail(path, lineno, "malformed vertex line");
        c.points.emplace_back(x, y, z);
        if (with_part) {
            if (part != 0 && part != 1) ply_fail(path, lineno, "part flag must be 0 or 1");
            c.part_mask.push_back(static_cast<uint8_t>(part));
        }
    }
    if (next_line() && !line.empty()) ply_fail(path, lineno, "trailing content after vertices");
    return c;
}

// ---- scene / sequence JSON ----------------------------------------------------

namespace {

json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json box_to_json(const Box& b) {
    return json{{"center", vec3_to_json(b.center)}, {"half", vec3_to_json(b.half)}};
}

Box box_from_json(const json& j) {
    Box b;
    b.center = vec3_from_json(j.at("center"));
    b.half = vec3_from_json(j.at("half"));
    if (b.half.minCoeff() <= 0.0) throw DataError("box half-extents must be positive");
    return b;
}

json pose_to_json(const geom::RigidTransform& t) {
    json r = json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.push_back(t.R(i, j));
    return json{{"R", r}, {"t", vec3_to_json(t.t)}};
}

geom::RigidTransform pose_from_json(const json& j) {
    geom::RigidTransform t;
    const json& r = j.at("R");
    if (!r.is_array() || r.size() != 9) throw DataError("pose R must hold 9 values");
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) t.R(i, k) = r[static_cast<size_t>(i * 3 + k)].get<double>();
    t.t = vec3_from_json(j.at("t"));
    return t;
}

}  // namespace

json scene_to_json(const ArticulatedScene& s) {
    return json{{"name", s.name},
                {"base", box_to_json(s.base)},
                {"part", box_to_json(s.part)},
                {"joint",
                 {{"kind", s.joint.kind == JointSpec::Kind::Revolute ? "revolute" : "prismatic"},
                  {"origin", vec3_to_json(s.joint.origin)},
                  {"axis", vec3_to_json(s.joint.axis)},
                  {"limits", json::array({s.joint.lo, s.joint.hi})}}}};
}

ArticulatedScene scene_from_json(const json& j) {
    ArticulatedScene s;
    s.name = j.at("name").get<std::string>();
    s.base = box_from_json(j.at("base"));
    s.part = box_from_json(j.at("part"));
    const json& joint = j.at("joint");
    const std::string kind = joint.at("kind").get<std::string>();
    if (kind == "revolute")
        s.joint.kind = JointSpec::Kind::Revolute;
    else if (kind == "prismatic")
        s.joint.kind = JointSpec::Kind::Prismatic;
    else
        throw DataError("unknown joint kind '" + kind + "'");
    s.joint.origin = vec3_from_json(joint.at("origin"));
    s.joint.axis = vec3_from_json(joint.at("axis"));
    const json& lim = joint.at("limits");
    s.joint.lo = lim.at(0).get<double>();
    s.joint.hi = lim.at(1).get<double>();
    if (s.joint.lo >= s.joint.hi) throw DataError("joint limits must satisfy lo < hi");
    if (std::abs(s.joint.axis.norm() - 1.0) > 1e-9) throw DataError("joint axis must be unit");
    return s;
}

void write_sequence(const std::string& dir, const Sequence& seq) {
    fs::create_directories(dir);
    json frames = json::array();
    for (const Frame& f : seq.frames) {
        write_cloud_ply((fs::path(dir) / f.path).string(), f.cloud);
        frames.push_back(
            {{"path", f.path}, {"joint_value", f.joint_value}, {"pose", pose_to_json(f.pose)}});
    }
    json manifest{{"scene", scene_to_json(seq.scene)}, {"frames", frames}};
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("cannot write manifest in '" + dir + "'");
    out << manifest.dump(2) << "\n";
}

Sequence read_sequence(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("missing manifest.json in '" + dir + "'");
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        throw DataError("malformed manifest in '" + dir + "': " + e.what());
    }
    Sequence seq;
    try {
        seq.scene = scene_from_json(manifest.at("scene"));
        for (const json& jf : manifest.at("frames")) {
            Frame f;
            f.path = jf.at("path").get<std::string>();
            f.joint_value = jf.at("joint_value").get<double>();
            f.pose = pose_from_json(jf.at("pose"));
            f.cloud = read_cloud_ply((fs::path(dir) / f.path).string());
            seq.frames.push_back(std::move(f));
        }
    } catch (const json::exception& e) {
        throw DataError("manifest in '" + dir + "' missing fields: " + e.what());
    }
    if (seq.frames.size() < 2) throw DataError("sequence in '" + dir + "' has fewer than 2 frames");
    return seq;
}

DatasetSummary generate_dataset(const std::string& out_dir, const DatasetConfig& cfg,
                                const json& config_echo) {
    if (cfg.scenes < 1) throw DataError("need at least one scene");
    fs::create_directories(out_dir);
    DatasetSummary summary;
    std::mt19937_64 rng(cfg.seed);
    int seq_index = 0;
    json seq_list = json::array();
    for (int s = 0; s < cfg.scenes; ++s) {
        const ArticulatedScene scene = make_scene(cfg.scene_kind, static_cast<uint64_t>(s));
        for (int i = 0; i < cfg.pairs + cfg.triplets; ++i) {
            Sequence seq = i < cfg.pairs ? sample_pair(scene, rng, cfg.points, cfg.delta_min)
                                         : sample_triplet(scene, rng, cfg.points, cfg.delta_min);
            char name[32];
            std::snprintf(name, sizeof(name), "seq_%04d", seq_index++);
            write_sequence((fs::path(out_dir) / name).string(), seq);
            seq_list.push_back(name);
            summary.sequences += 1;
            summary.frames += static_cast<int>(seq.frames.size());
        }
    }
    json top{{"config", config_echo},
             {"scene_kind", cfg.scene_kind},
             {"sequences", seq_list},
             {"frame_count", summary.frames}};
    std::ofstream out(fs::path(out_dir) / "dataset.json");
    out << top.dump(2) << "\n";
    return summary;
}

std::vector<std::string> list_sequence_dirs(const std::string& dataset_dir) {
    std::vector<std::string> dirs;
    if (!fs::is_directory(dataset_dir)) throw DataError("not a directory: '" + dataset_dir + "'");
    for (const auto& e : fs::directory_iterator(dataset_dir))
        if (e.is_directory() && fs::exists(e.path() / "manifest.json"))
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw DataError("no sequences found under '" + dataset_dir + "'");
    return dirs;
}

}  // namespace tkd::data
