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

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tkd/data.hpp"
#include "tkd/losses.hpp"
#include "tkd/model.hpp"

namespace tkd::train {

using nlohmann::json;

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int epochs = 45;
    int batch_size = 1;
    double lr = 1e-4;
    int lr_drop_epoch = 30;       // learning rate divides by lr_drop_factor from here on
    double lr_drop_factor = 10.0;
    int max_steps = 0;            // 0 = run all epochs; otherwise a hard step cap
    uint64_t seed = 1;
    losses::LossWeights weights;
    bool articulation_prior = true;  // enables the correspondence / axis terms
    bool stopgrad_keypoints = false;
    bool stopgrad_fit = false;
    int n_pos = 1000;
    int n_neg = 1000;
    bool augment = true;
    data::AugmentParams aug;
    int checkpoint_every = 500;
    model::ModelConfig model;
    std::string data_dir;

    json to_json() const;
};

struct StepLog {
    int64_t step = 0;
    double occ_t = 0, occ_s = 0, corr = 0, axis = 0, total = 0;
};

inline constexpr const char* kCurveHeader = "step,occ_t,occ_s,corr,axis,total";

struct TrainResult {
    model::Params params;
    std::vector<StepLog> curve;
    int64_t steps = 0;
};

// Seeded, single-threaded and bit-reproducible. When out_dir is nonempty the
// loss curve (curve.csv), periodic checkpoints (checkpoint_latest.tkd) and the
// final checkpoint (checkpoint.tkd) are written there.
TrainResult train(const TrainConfig& cfg, const std::string& out_dir = "");

// One training graph for a normalized pair or triplet. The transporter runs on
// frames (0,1); a triplet adds a second detector pass on (1,2) for the axis
// term, and the correspondence term then averages both pairs. The graph is
// heap-owned so the Value handles stay valid across moves.
struct StepGraph {
    std::unique_ptr<Graph> graph;
    model::BoundParams bound;
    Value occ_t, occ_s, total;
    std::optional<Value> corr, axis;
};
StepGraph build_training_graph(const TrainConfig& cfg, const data::NormalizedSequence& ns,
                               std::mt19937_64& rng);

// ---- checkpoints -------------------------------------------------------------
// Layout: 8-byte magic, little-endian u64 header length, JSON header (model
// config + tensor manifest with offsets and checksums), raw fp32 payload.

struct Checkpoint {
    model::ModelConfig config;
    model::Params params;
};

void save_checkpoint(const std::string& path, const model::ModelConfig& cfg,
                     const model::Params& params);
Checkpoint load_checkpoint(const std::string& path);

// ---- perception metrics --------------------------------------------------------

// Mean distance between frame-a keypoints carried through the GT part motion
// and their frame-b correspondents.
double ackd(const geom::KeypointSet& k_a, const geom::KeypointSet& k_b,
            const geom::RigidTransform& gt_motion);
// Fraction of keypoints whose carried distance falls under tau.
double rr(const geom::KeypointSet& k_a, const geom::KeypointSet& k_b,
          const geom::RigidTransform& gt_motion, double tau);
// Mean distance between part points under the predicted vs GT motion.
double add_metric(const geom::RigidTransform& pred, const geom::RigidTransform& gt,
                  const std::vector<geom::Vec3>& part_points);

// Keypoints for one normalized cloud pair (inference path, detector only).
std::pair<geom::KeypointSet, geom::KeypointSet> detect_keypoints(
    const model::ModelConfig& cfg, const model::Params& params,
    const std::vector<geom::Vec3>& cloud_a, const std::vector<geom::Vec3>& cloud_b,
    uint64_t seed);

struct PairReport {
    std::string sequence;
    int frame_a = 0, frame_b = 1;
    double ackd = 0, rr = 0, add = 0;
};

struct PerceptionReport {
    std::vector<PairReport> per_pair;
    double ackd = 0, rr = 0, add = 0;  // aggregates
    double rr_tau = 0.1;
    json to_json(const json& config_echo) const;
};

struct EvalOptions {
    double rr_tau = 0.1;      // normalized units
    std::string dump_dir;     // when nonempty, per-pair keypoint PLY dumps
    uint64_t seed = 0;        // frame resampling seed
};

PerceptionReport evaluate(const model::ModelConfig& cfg, const model::Params& params,
                          const std::string& data_dir, const EvalOptions& opt);

}  // namespace tkd::train
