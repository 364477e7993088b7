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

#pragma once

#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "tkd/geom.hpp"

namespace tkd::data {

using geom::Mat3;
using geom::Vec3;
using nlohmann::json;

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct JointSpec {
    enum class Kind { Revolute, Prismatic };
    Kind kind = Kind::Revolute;
    Vec3 origin = Vec3::Zero();  // a point on the axis line (revolute only)
    Vec3 axis = Vec3(0, 0, 1);   // unit direction
    double lo = 0.0, hi = 1.0;   // radians or length units

    double range() const { return hi - lo; }
};

struct Box {
    Vec3 center = Vec3::Zero();
    Vec3 half = Vec3(0.1, 0.1, 0.1);

    double surface_area() const;
    double sdf(const Vec3& p) const;
    Vec3 sample_surface(std::mt19937_64& rng) const;
};

// One static base box plus one mobile box attached through a single joint.
struct ArticulatedScene {
    std::string name;
    Box base;
    Box part;   // rest pose (joint value 0)
    JointSpec joint;
};

ArticulatedScene make_door_scene(uint64_t variant = 0);    // revolute
ArticulatedScene make_drawer_scene(uint64_t variant = 0);  // prismatic
ArticulatedScene make_scene(const std::string& kind, uint64_t variant = 0);

// Rest-pose part geometry -> world pose at joint value q.
geom::RigidTransform joint_transform(const JointSpec& j, double q);

// Signed distance to the posed scene's part surface (world units).
double part_surface_distance(const ArticulatedScene& scene, double q, const Vec3& p);

struct Cloud {
    std::vector<Vec3> points;
    std::vector<uint8_t> part_mask;  // 1 = mobile part; partitions the cloud exactly

    size_t size() const { return points.size(); }
};

// Area-weighted uniform surface samples of base + posed part.
Cloud generate_cloud(const ArticulatedScene& scene, double joint_value, int n_points,
                     std::mt19937_64& rng);
Cloud generate_cloud(const ArticulatedScene& scene, double joint_value, int n_points,
                     uint64_t seed);

struct Frame {
    std::string path;  // PLY file, relative to the sequence directory
    double joint_value = 0.0;
    geom::RigidTransform pose;  // part motion relative to frame 0, world units
    Cloud cloud;
};

struct Sequence {
    ArticulatedScene scene;
    std::vector<Frame> frames;  // 2 for a pair, 3 for a triplet
};

// Joint values are drawn with a minimum separation of delta_min * range so the
// motion is observable; triplet values are monotone.
Sequence sample_pair(const ArticulatedScene& scene, std::mt19937_64& rng, int n_points,
                     double delta_min = 0.15);
Sequence sample_triplet(const ArticulatedScene& scene, std::mt19937_64& rng, int n_points,
                        double delta_min = 0.15);

struct QueryBatch {
    Tensor points;  // [Q,3], normalized units
    Tensor labels;  // [Q,1], binary
    int n_pos = 0, n_neg = 0;
};

// Positives drawn (with replacement) from the cloud, negatives uniform in the
// cube. The cloud must already be in normalized coordinates.
QueryBatch sample_queries(const std::vector<Vec3>& cloud, int n_pos, int n_neg,
                          std::mt19937_64& rng);

struct AugmentParams {
    bool rotate = true;
    double max_translation = 0.1;
    double noise_sigma = 0.005;
};

// One shared rigid motion for every frame of the sequence (relative
// articulation is preserved; GT poses are conjugated), then i.i.d. jitter per
// point. Scene geometry is left untouched, so scene-derived lookups no longer
// match augmented clouds.
void augment_sequence(Sequence& seq, std::mt19937_64& rng, const AugmentParams& p);

struct NormalizedSequence {
    geom::NormalizedFrame frame;
    std::vector<Cloud> clouds;                // normalized coordinates
    std::vector<geom::RigidTransform> poses;  // normalized, relative to frame 0
    std::vector<double> joint_values;
};

// Shared frame from the union bounding box of all clouds of the sequence.
NormalizedSequence normalize(const Sequence& seq);

// ---- file formats ----------------------------------------------------------

// ASCII PLY: float x, y, z and an optional uchar part column. Coordinates are
// written at fp32 print precision and round-trip losslessly at that width.
void write_cloud_ply(const std::string& path, const Cloud& cloud);
Cloud read_cloud_ply(const std::string& path);

json scene_to_json(const ArticulatedScene& scene);
ArticulatedScene scene_from_json(const json& j);

// One directory per sequence: manifest.json naming local frame_*.ply files,
// joint values and GT poses (R row-major, t).
void write_sequence(const std::string& dir, const Sequence& seq);
Sequence read_sequence(const std::string& dir);

struct DatasetConfig {
    std::string scene_kind = "door";
    int scenes = 1;
    int pairs = 20;
    int triplets = 10;
    int points = 2048;
    double delta_min = 0.15;
    uint64_t seed = 7;
};

struct DatasetSummary {
    int sequences = 0;
    int frames = 0;
};

DatasetSummary generate_dataset(const std::string& out_dir, const DatasetConfig& cfg,
                                const json& config_echo);
std::vector<std::string> list_sequence_dirs(const std::string& dataset_dir);

}  // namespace tkd::data
