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

#include "tkd/sim.hpp"

#include <cmath>

namespace tkd::sim {

Observation observe(const EnvState& st, int n_points, uint64_t seed) {
    Observation obs;
    // same seed for both states: identical surface draws, so q == q_goal gives
    // identical clouds
    data::Cloud cur = data::generate_cloud(st.scene, st.q, n_points, seed);
    data::Cloud goal = data::generate_cloud(st.scene, st.q_goal, n_points, seed);
    obs.frame = geom::NormalizedFrame::fit({&cur.points, &goal.points});
    obs.current.part_mask = cur.part_mask;
    obs.goal.part_mask = goal.part_mask;
    for (const auto& p : cur.points) obs.current.points.push_back(obs.frame.to_normalized(p));
    for (const auto& p : goal.points) obs.goal.points.push_back(obs.frame.to_normalized(p));
    return obs;
}

namespace {

// Any point on the screw axis of (R, t), via the full-rank system
// (I - R + mu mu^T) p = t - (t.mu) mu.
geom::Vec3 screw_axis_point(const geom::Mat3& r, const geom::Vec3& t, const geom::Vec3& mu) {
    const geom::Mat3 a = geom::Mat3::Identity() - r + mu * mu.transpose();
    return a.colPivHouseholderQr().solve(t - t.dot(mu) * mu);
}

}  // namespace

Action plan_action(const geom::KeypointSet& k_c, const geom::KeypointSet& k_g,
                   const SimConfig& cfg) {
    if (k_c.size() != k_g.size() || k_c.size() < 3)
        throw SimError("plan_action: needs matching keypoint sets with m >= 3");
    const std::vector<geom::Vec3> flow = geom::keypoint_flow(k_c, k_g);
    size_t s = 0;
    for (size_t i = 1; i < flow.size(); ++i)
        if (flow[i].norm() > flow[s].norm()) s = i;  // strict: lowest index wins ties
    Action a;
    a.pos = k_c[s];
    const double mag = flow[s].norm();
    if (mag < cfg.flow_eps) {
        a.null_action = true;
        a.distance = 0.0;
        return a;
    }
    const geom::RigidFit fit = geom::fit_rigid(k_c, k_g);
    const geom::AxisAngle aa = geom::axis_angle(fit.transform.R);
    if (fit.degenerate || aa.angle <= cfg.theta_thr) {
        a.dir = flow[s] / mag;
    } else {
        // interpolate: rotate the suction point by theta_thr about the fitted
        // axis and head for that intermediate position
        geom::Vec3 origin;
        if (cfg.rot_origin == SimConfig::RotOrigin::Centroid) {
            origin = geom::Vec3::Zero();
            for (const auto& p : k_c) origin += p;
            origin /= static_cast<double>(k_c.size());
        } else {
            origin = screw_axis_point(fit.transform.R, fit.transform.t, aa.axis);
        }
        const geom::Vec3 radial = k_c[s] - origin;
        const geom::Vec3 moved = geom::rotation_about(aa.axis, cfg.theta_thr) * radial;
        const geom::Vec3 d = moved - radial;
        if (d.norm() < cfg.flow_eps)
            a.dir = flow[s] / mag;   // suction point sits on the axis
        else
            a.dir = d.normalized();
    }
    double distance = std::min(cfg.lambda * mag, cfg.step_cap);
    // travelling past the measured flow overshoots the goal and oscillates, so
    // the commanded distance saturates at the flow magnitude
    if (cfg.saturate_at_flow) distance = std::min(distance, mag);
    a.distance = distance;
    return a;
}

StepResult step(const EnvState& st, const Action& action, double attach_tol_world) {
    StepResult out;
    out.state = st;
    if (action.null_action) return out;
    if (data::part_surface_distance(st.scene, st.q, action.pos) > attach_tol_world)
        return out;  // suction miss: the step is consumed without motion
    out.attached = true;
    const data::JointSpec& j = st.scene.joint;
    double dq = 0.0;
    if (j.kind == data::JointSpec::Kind::Prismatic) {
        dq = action.distance * action.dir.dot(j.axis);
    } else {
        const geom::Vec3 rel = action.pos - j.origin;
        const geom::Vec3 radial = rel - rel.dot(j.axis) * j.axis;
        const double r = radial.norm();
        if (r > 1e-9) {
            const geom::Vec3 tangent = j.axis.cross(radial / r);
            dq = action.distance * action.dir.dot(tangent) / r;
        }
    }
    out.dq = dq;
    out.state.q = std::clamp(st.q + dq, j.lo, j.hi);
    return out;
}

nlohmann::json EpisodeResult::to_json(const data::ArticulatedScene& scene) const {
    nlohmann::json steps_j = nlohmann::json::array();
    for (const StepRecord& s : steps)
        steps_j.push_back({{"A_pos", {s.action.pos.x(), s.action.pos.y(), s.action.pos.z()}},
                           {"A_dir", {s.action.dir.x(), s.action.dir.y(), s.action.dir.z()}},
                           {"distance", s.action.distance},
                           {"attached", s.attached},
                           {"q_after", s.q_after},
                           {"d_after", s.d_after}});
    return nlohmann::json{{"scene", data::scene_to_json(scene)},
                          {"q_init", q_init},
                          {"q_goal", q_goal},
                          {"steps", steps_j},
                          {"final_d", final_d},
                          {"success", success}};
}

EpisodeResult run_episode(const EnvState& init, const KeypointSource& source,
                          const SimConfig& cfg, uint64_t seed) {
    if (cfg.max_steps < 1) throw SimError("run_episode: max_steps must be >= 1");
    EpisodeResult ep;
    ep.q_init = init.q;
    ep.q_goal = init.q_goal;
    const double denom = std::abs(init.q - init.q_goal);
    if (denom < 1e-12) {
        ep.success = true;
        ep.final_d = 0.0;
        return ep;
    }
    EnvState st = init;
    std::mt19937_64 rng(seed);
    auto dist = [&](double q) { return std::abs(q - init.q_goal) / denom; };
    while (static_cast<int>(ep.steps.size()) < cfg.max_steps) {
        if (dist(st.q) < cfg.success_d) break;
        Observation obs = observe(st, cfg.n_points, rng());
        auto [k_c, k_g] = source(obs, st);
        Action plan = plan_action(k_c, k_g, cfg);
        if (plan.null_action) break;
        Action world = plan;
        world.pos = obs.frame.to_world(plan.pos);
        world.distance = plan.distance * obs.frame.scale;
        StepResult sr = step(st, world, cfg.attach_tol * obs.frame.scale);
        st = sr.state;
        StepRecord rec;
        rec.action = world;
        rec.attached = sr.attached;
        rec.q_after = st.q;
        rec.d_after = dist(st.q);
        ep.steps.push_back(rec);
    }
    ep.final_d = dist(st.q);
    ep.success = ep.final_d < cfg.success_d;
    return ep;
}

std::pair<geom::KeypointSet, geom::KeypointSet> oracle_keypoints(
    const data::ArticulatedScene& scene, double q, double q_goal, int m) {
    if (m < 3) throw SimError("oracle_keypoints: m must be >= 3");
    // face centers first, then corners, in the part's rest pose
    std::vector<geom::Vec3> anchors;
    const geom::Vec3& c = scene.part.center;
    const geom::Vec3& h = scene.part.half;
    for (int axis = 0; axis < 3; ++axis)
        for (int side : {1, -1}) {
            geom::Vec3 p = c;
            p[axis] += side * h[axis];
            anchors.push_back(p);
        }
    for (int sx : {1, -1})
        for (int sy : {1, -1})
            for (int sz : {1, -1})
                anchors.emplace_back(c.x() + sx * h.x(), c.y() + sy * h.y(), c.z() + sz * h.z());
    if (m > static_cast<int>(anchors.size()))
        throw SimError("oracle_keypoints: at most " + std::to_string(anchors.size()) +
                       " anchors available");
    const geom::RigidTransform tc = data::joint_transform(scene.joint, q);
    const geom::RigidTransform tg = data::joint_transform(scene.joint, q_goal);
    geom::KeypointSet k_c, k_g;
    for (int i = 0; i < m; ++i) {
        k_c.push_back(tc.apply(anchors[static_cast<size_t>(i)]));
        k_g.push_back(tg.apply(anchors[static_cast<size_t>(i)]));
    }
    return {k_c, k_g};
}

ManipAggregate manipulation_metrics(const std::vector<EpisodeResult>& results) {
    if (results.empty()) throw SimError("manipulation_metrics: no episodes");
    ManipAggregate agg;
    for (const EpisodeResult& e : results) {
        agg.success_rate += e.success ? 1.0 : 0.0;
        agg.mean_distance += e.final_d;
    }
    agg.success_rate /= static_cast<double>(results.size());
    agg.mean_distance /= static_cast<double>(results.size());
    return agg;
}

}  // namespace tkd::sim
