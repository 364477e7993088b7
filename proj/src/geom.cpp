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

#include "tkd/geom.hpp"

#include <cmath>
#include <stdexcept>

namespace tkd::geom {

NormalizedFrame NormalizedFrame::fit(const std::vector<const std::vector<Vec3>*>& clouds) {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    int64_t n = 0;
    for (const auto* c : clouds)
        for (const Vec3& p : *c) {
            lo = lo.cwiseMin(p);
            hi = hi.cwiseMax(p);
            ++n;
        }
    if (n == 0) throw std::invalid_argument("NormalizedFrame::fit: no points");
    NormalizedFrame f;
    f.center = 0.5 * (lo + hi);
    f.scale = (hi - lo).maxCoeff();
    if (f.scale <= 0.0) f.scale = 1.0;
    return f;
}

bool RigidTransform::is_valid(double tol) const {
    const Mat3 e = R.transpose() * R - Mat3::Identity();
    return e.cwiseAbs().maxCoeff() < tol && std::abs(R.determinant() - 1.0) < tol;
}

RigidTransform to_normalized(const RigidTransform& world, const NormalizedFrame& f) {
    // q = (p - c)/s  =>  q' = R q + (R c + t - c)/s
    return {world.R, (world.R * f.center + world.t - f.center) / f.scale};
}

RigidFit fit_rigid(const KeypointSet& src, const KeypointSet& dst) {
    if (src.size() != dst.size()) throw std::invalid_argument("fit_rigid: size mismatch");
    if (src.size() < 3) throw std::invalid_argument("fit_rigid: needs m >= 3 points");
    const int64_t m = static_cast<int64_t>(src.size());
    Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
    for (int64_t i = 0; i < m; ++i) {
        cs += src[static_cast<size_t>(i)];
        cd += dst[static_cast<size_t>(i)];
    }
    cs /= static_cast<double>(m);
    cd /= static_cast<double>(m);
    Mat3 H = Mat3::Zero();
    for (int64_t i = 0; i < m; ++i)
        H += (src[static_cast<size_t>(i)] - cs) * (dst[static_cast<size_t>(i)] - cd).transpose();
    Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    RigidFit fit;
    if (sv[1] <= 1e-12 * std::max(1.0, sv[0])) {
        // collinear or collapsed sources: identity rotation, centroid shift
        fit.degenerate = true;
        fit.transform.R = Mat3::Identity();
        fit.transform.t = cd - cs;
        return fit;
    }
    Mat3 D = Mat3::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) D(2, 2) = -1.0;
    fit.transform.R = svd.matrixV() * D * svd.matrixU().transpose();
    fit.transform.t = cd - fit.transform.R * cs;
    return fit;
}

AxisAngle axis_angle(const Mat3& R) {
    const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
    Vec3 u(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
    // atan2 of (sin, cos) stays accurate where acos degenerates (theta near pi)
    const double theta = std::atan2(0.5 * u.norm(), c);
    if (theta < 1e-6) return {Vec3(0, 0, 1), 0.0};
    if (theta < M_PI - 1e-4) return {u.normalized(), theta};
    // Near pi the skew part vanishes; recover the axis from the symmetric part
    // (its unit eigenvector of eigenvalue 1) and align signs with what little
    // skew information remains.
    Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (R + R.transpose()));
    Vec3 axis = es.eigenvectors().col(2);
    if (u.dot(axis) < 0.0) axis = -axis;
    return {axis.normalized(), theta};
}

Mat3 rotation_about(const Vec3& unit_axis, double angle) {
    Mat3 K;
    K << 0, -unit_axis.z(), unit_axis.y(), unit_axis.z(), 0, -unit_axis.x(), -unit_axis.y(),
        unit_axis.x(), 0;
    return Mat3::Identity() + std::sin(angle) * K + (1.0 - std::cos(angle)) * K * K;
}

std::vector<Vec3> keypoint_flow(const KeypointSet& k_c, const KeypointSet& k_g) {
    if (k_c.size() != k_g.size()) throw std::invalid_argument("keypoint_flow: size mismatch");
    std::vector<Vec3> flow(k_c.size());
    for (size_t i = 0; i < k_c.size(); ++i) flow[i] = k_g[i] - k_c[i];
    return flow;
}

int64_t point_cell(const Vec3& p, int res) {
    int64_t idx[3];
    for (int a = 0; a < 3; ++a) {
        auto i = static_cast<int64_t>(std::floor((p[a] + 0.5) * res));
        idx[a] = std::clamp<int64_t>(i, 0, res - 1);
    }
    return (idx[0] * res + idx[1]) * res + idx[2];
}

Tensor voxel_center_coords(int res) {
    const int64_t v = static_cast<int64_t>(res) * res * res;
    Tensor out({v, 3});
    int64_t i = 0;
    for (int64_t x = 0; x < res; ++x)
        for (int64_t y = 0; y < res; ++y)
            for (int64_t z = 0; z < res; ++z, ++i) {
                out.at(i, 0) = voxel_center(x, res);
                out.at(i, 1) = voxel_center(y, res);
                out.at(i, 2) = voxel_center(z, res);
            }
    return out;
}

Value marginalize_keypoints(Value saliency) {
    Graph& g = *saliency.g;
    const Shape& s = g.shape_of(saliency);
    if (s.size() != 4) throw GraphError("marginalize_keypoints: expects [m,D,H,W]");
    if (s[1] != s[2] || s[2] != s[3])
        throw GraphError("marginalize_keypoints: grid must be cubic");
    const int res = static_cast<int>(s[1]);
    const int64_t v = s[1] * s[2] * s[3];
    Value flat = reshape(saliency, {s[0], v});
    Value w = softmax(flat, 1);
    return matmul(w, g.constant(voxel_center_coords(res)));
}

Value gaussian_heatmap(Value keypoints, double sigma, int res) {
    Graph& g = *keypoints.g;
    const Shape& s = g.shape_of(keypoints);
    if (s.size() != 2 || s[1] != 3) throw GraphError("gaussian_heatmap: expects [m,3]");
    if (sigma <= 0.0) throw GraphError("gaussian_heatmap: sigma must be positive");
    const int64_t m = s[0];
    const int64_t v = static_cast<int64_t>(res) * res * res;
    Value coords = reshape(g.constant(voxel_center_coords(res)), {1, v, 3});
    Value diff = sub(reshape(keypoints, {m, 1, 3}), coords);
    Value d2 = reduce_sum(mul(diff, diff), 2);                      // [m, v]
    Value gk = exp(mul(d2, g.constant_scalar(-1.0 / (2.0 * sigma * sigma))));
    Value one = g.constant_scalar(1.0);
    Value acc = sub(one, gather_rows(gk, {0}));                     // [1, v]
    for (int64_t i = 1; i < m; ++i) acc = mul(acc, sub(one, gather_rows(gk, {i})));
    return reshape(sub(one, acc), {1, res, res, res});
}

Tensor gaussian_heatmap_plain(const KeypointSet& keypoints, double sigma, int res) {
    if (sigma <= 0.0) throw std::invalid_argument("gaussian_heatmap: sigma must be positive");
    Tensor out({1, res, res, res});
    const int64_t v = static_cast<int64_t>(res) * res * res;
    Tensor coords = voxel_center_coords(res);
    for (int64_t i = 0; i < v; ++i) {
        double keep = 1.0;
        for (const Vec3& k : keypoints) {
            const double dx = coords.at(i, 0) - k.x();
            const double dy = coords.at(i, 1) - k.y();
            const double dz = coords.at(i, 2) - k.z();
            const double d2 = dx * dx + dy * dy + dz * dz;
            keep *= 1.0 - std::exp(-d2 / (2.0 * sigma * sigma));
        }
        out.data[static_cast<size_t>(i)] = 1.0 - keep;
    }
    return out;
}

Value transport_features(Value phi_s, Value phi_t, Value h_s, Value h_t) {
    Graph& g = *phi_s.g;
    if (g.shape_of(phi_s) != g.shape_of(phi_t))
        throw GraphError("transport_features: feature volumes must match");
    Value one = g.constant_scalar(1.0);
    Value keep = mul(sub(one, h_s), sub(one, h_t));
    return add(mul(keep, phi_s), mul(h_t, phi_t));
}

Value unit_rotation_axis(Value rotation, double guard) {
    Graph& g = *rotation.g;
    if (g.shape_of(rotation) != Shape{3, 3})
        throw GraphError("unit_rotation_axis: expects [3,3]");
    // u = (R32 - R23, R13 - R31, R21 - R12) as one constant linear map of vec(R)
    Tensor a({3, 9});
    a.at(0, 7) = 1.0;
    a.at(0, 5) = -1.0;
    a.at(1, 2) = 1.0;
    a.at(1, 6) = -1.0;
    a.at(2, 3) = 1.0;
    a.at(2, 1) = -1.0;
    Value u = matmul(g.constant(std::move(a)), reshape(rotation, {9, 1}));
    Value n = sqrt(add(reduce_sum(mul(u, u)), g.constant_scalar(guard * guard)));
    return div(u, n);
}

}  // namespace tkd::geom
