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

#include <functional>

#include "tkd/data.hpp"

namespace tkd::sim {

struct SimError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SimConfig {
    double theta_thr = 0.1;        // rotation-branch threshold, radians
    double lambda = 8.0;           // proportional gain on the flow magnitude
    double step_cap = 0.25;        // per-step travel cap, normalized units
    bool saturate_at_flow = true;  // never command more than the measured flow
    double attach_tol = 0.02;      // suction tolerance, normalized units
    int max_steps = 15;
    double success_d = 0.1;        // normalized remaining distance for success
    double flow_eps = 1e-9;        // below this the policy signals convergence
    enum class RotOrigin { Centroid, AxisPoint };
    RotOrigin rot_origin = RotOrigin::Centroid;
    int n_points = 2048;           // observation cloud size
};

struct EnvState {
    data::ArticulatedScene scene;
    double q = 0.0;
    double q_goal = 0.0;
};

struct Action {
    geom::Vec3 pos = geom::Vec3::Zero();      // suction position
    geom::Vec3 dir = geom::Vec3(1, 0, 0);     // unit moving direction
    double distance = 0.0;
    bool null_action = false;                 // zero flow: converged
};

struct Observation {
    data::Cloud current, goal;   // normalized coordinates
    geom::NormalizedFrame frame;
};

// Clouds of the current and goal state in one shared frame; pure per seed.
Observation observe(const EnvState& st, int n_points, uint64_t seed);

// The policy sees only the two keypoint sets (it is joint-type agnostic).
// Flow selects the suction point; the fitted rotation decides between the
// straight-flow branch and the tangent branch.
Action plan_action(const geom::KeypointSet& k_c, const geom::KeypointSet& k_g,
                   const SimConfig& cfg);

struct StepResult {
    EnvState state;
    bool attached = false;
    double dq = 0.0;
};

// Kinematic projection in world units: prismatic projects the travel onto the
// axis, revolute onto the attachment tangent over the lever arm. Joint limits
// clamp. A suction miss is a no-op failure.
StepResult step(const EnvState& st, const Action& world_action, double attach_tol_world);

struct StepRecord {
    Action action;  // world units
    bool attached = false;
    double q_after = 0.0;
    double d_after = 0.0;
};

struct EpisodeResult {
    double q_init = 0.0, q_goal = 0.0;
    std::vector<StepRecord> steps;
    double final_d = 0.0;
    bool success = false;

    nlohmann::json to_json(const data::ArticulatedScene& scene) const;
};

// Keypoint provider: normalized sets for (current, goal). Receives the
// observation (learned detectors) and the state (GT oracle).
using KeypointSource =
    std::function<std::pair<geom::KeypointSet, geom::KeypointSet>(const Observation&,
                                                                  const EnvState&)>;

EpisodeResult run_episode(const EnvState& init, const KeypointSource& source,
                          const SimConfig& cfg, uint64_t seed);

// Exact correspondent keypoints: fixed part-local surface anchors carried by
// the joint model (world units).
std::pair<geom::KeypointSet, geom::KeypointSet> oracle_keypoints(
    const data::ArticulatedScene& scene, double q, double q_goal, int m);

struct ManipAggregate {
    double success_rate = 0.0;
    double mean_distance = 0.0;
};

ManipAggregate manipulation_metrics(const std::vector<EpisodeResult>& results);

}  // namespace tkd::sim
