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

#include <Eigen/Dense>
#include <vector>

#include "tkd/graph.hpp"

namespace tkd::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using KeypointSet = std::vector<Vec3>;

// Per-pair coordinate convention: world points map to (p - center) / scale,
// landing inside the closed unit cube [-0.5, 0.5]^3.
struct NormalizedFrame {
    Vec3 center = Vec3::Zero();
    double scale = 1.0;

    Vec3 to_normalized(const Vec3& p) const { return (p - center) / scale; }
    Vec3 to_world(const Vec3& p) const { return p * scale + center; }

    // Union bounding box of all given clouds, isotropically scaled.
    static NormalizedFrame fit(const std::vector<const std::vector<Vec3>*>& clouds);
};

struct RigidTransform {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return R * p + t; }
    RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
    RigidTransform compose(const RigidTransform& inner) const {
        return {R * inner.R, R * inner.t + t};
    }
    static RigidTransform identity() { return {}; }
    bool is_valid(double tol = 1e-9) const;
};

// Conjugates a world-frame motion into normalized coordinates: rotation is
// unchanged, translation rescales.
RigidTransform to_normalized(const RigidTransform& world, const NormalizedFrame& f);

struct RigidFit {
    RigidTransform transform;
    bool degenerate = false;  // rank-deficient cross-covariance; identity + centroid fallback
};

// Closed-form least-squares alignment of src onto dst (Kabsch, m >= 3).
RigidFit fit_rigid(const KeypointSet& src, const KeypointSet& dst);

struct AxisAngle {
    Vec3 axis = Vec3(0, 0, 1);
    double angle = 0.0;  // in [0, pi]
};

AxisAngle axis_angle(const Mat3& R);
Mat3 rotation_about(const Vec3& unit_axis, double angle);

// Per-channel displacement k_g - k_c.
std::vector<Vec3> keypoint_flow(const KeypointSet& k_c, const KeypointSet& k_g);

// ---- voxel grid conventions ----------------------------------------------
// Volumes are [C, D, H, W] with point axes (x, y, z) mapped to (D, H, W).
// Cell centers sit at -0.5 + (i + 0.5) / res per axis.

inline double voxel_center(int64_t i, int res) {
    return -0.5 + (static_cast<double>(i) + 0.5) / static_cast<double>(res);
}

int64_t point_cell(const Vec3& p_normalized, int res);

// Flat [res^3, 3] table of cell-center coordinates, indexed by flat cell id.
Tensor voxel_center_coords(int res);

// ---- differentiable kernels (graph builders) ------------------------------

// Saliency logits [m, res, res, res] -> soft-argmax keypoints [m, 3]: per
// channel, softmax over all voxels then expectation of cell centers.
Value marginalize_keypoints(Value saliency);

// Keypoints [m, 3] -> per-voxel weight in [0, 1], shaped [1, res, res, res].
// Per keypoint G_i(v) = exp(-|c_v - k_i|^2 / (2 sigma^2)); channels combine by
// the probabilistic union 1 - prod(1 - G_i), which keeps H a valid blending
// weight when keypoints overlap.
Value gaussian_heatmap(Value keypoints, double sigma, int res);

// Plain-evaluation twin of the graph builder (also serves the m = 0 case).
Tensor gaussian_heatmap_plain(const KeypointSet& keypoints, double sigma, int res);

// Eq-style feature rewrite: (1 - H_s)(1 - H_t) phi_s + H_t phi_t.
Value transport_features(Value phi_s, Value phi_t, Value h_s, Value h_t);

// Rotation [3,3] -> unit rotation axis [3,1] from the skew-symmetric part,
// guarded so the norm never divides by zero. For angle in (0, pi) this equals
// the axis-angle axis.
Value unit_rotation_axis(Value rotation, double guard = 1e-12);

}  // namespace tkd::geom
