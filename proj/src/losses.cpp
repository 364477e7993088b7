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

#include "tkd/losses.hpp"

#include <cmath>
#include <cstdio>

namespace tkd::losses {

Value occupancy_loss(Value probs, Value labels) {
    Graph& g = *probs.g;
    if (g.shape_of(probs) != g.shape_of(labels))
        throw GraphError("occupancy_loss: probs/labels length mismatch");
    Value one = g.constant_scalar(1.0);
    Value p = clamp(probs, kBceEps, 1.0 - kBceEps);
    Value term = add(mul(labels, log(p)), mul(sub(one, labels), log(sub(one, p))));
    return neg(reduce_mean(term));
}

CorrespondenceLoss correspondence_loss(Value k_c, Value k_g, bool stop_gradient_fit) {
    Value r = kabsch_rotation(k_c, k_g);
    Value r_used = stop_gradient_fit ? stop_gradient(r) : r;
    Value mean_c = reduce_mean(k_c, 0, true);  // [1,3]
    Value mean_g = reduce_mean(k_g, 0, true);
    if (stop_gradient_fit) {
        mean_c = stop_gradient(mean_c);
        mean_g = stop_gradient(mean_g);
    }
    Value rotated = transpose2d(matmul(r_used, transpose2d(k_c)));          // [m,3]
    Value t = sub(mean_g, transpose2d(matmul(r_used, transpose2d(mean_c)))); // [1,3]
    Value resid = sub(k_g, add(rotated, t));
    return {reduce_sum(mul(resid, resid)), r};
}

Value axis_consistency_loss(Value mu12, Value mu23) {
    Graph& g = *mu12.g;
    if (g.shape_of(mu12) != Shape{3, 1} || g.shape_of(mu23) != Shape{3, 1})
        throw GraphError("axis_consistency_loss: expects unit axes [3,1]");
    Value d = reduce_sum(mul(mu12, mu23));
    // min(1 - d, 1 + d) == 1 - |d|
    return sub(g.constant_scalar(1.0), abs(d));
}

Value total_loss(Value occ_t, Value occ_s, std::optional<Value> corr, std::optional<Value> axis,
                 const LossWeights& w) {
    Graph& g = *occ_t.g;
    Value total = add(occ_t, occ_s);
    if (corr) total = add(total, mul(g.constant_scalar(w.lambda_corr), *corr));
    if (axis) total = add(total, mul(g.constant_scalar(w.lambda_axis), *axis));
    return total;
}

double occupancy_loss_plain(const std::vector<double>& probs, const std::vector<double>& labels) {
    if (probs.size() != labels.size())
        throw std::invalid_argument("occupancy_loss: probs/labels length mismatch");
    if (probs.empty()) throw std::invalid_argument("occupancy_loss: empty batch");
    double sum = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(probs[i], kBceEps, 1.0 - kBceEps);
        sum += labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    return -sum / static_cast<double>(probs.size());
}

double correspondence_loss_plain(const geom::KeypointSet& k_c, const geom::KeypointSet& k_g,
                                 bool* degenerate) {
    geom::RigidFit fit = geom::fit_rigid(k_c, k_g);
    if (degenerate) *degenerate = fit.degenerate;
    double loss = 0.0;
    for (size_t i = 0; i < k_c.size(); ++i)
        loss += (k_g[i] - fit.transform.apply(k_c[i])).squaredNorm();
    return loss;
}

double axis_consistency_loss_plain(geom::Vec3 mu12, geom::Vec3 mu23) {
    for (geom::Vec3* mu : {&mu12, &mu23}) {
        const double n = mu->norm();
        if (std::abs(n - 1.0) > 1e-6) {
            std::fprintf(stderr, "axis_consistency_loss: non-unit axis (|mu|=%.9g), normalizing\n",
                         n);
            if (n > 0.0) *mu /= n;
        }
    }
    const double d = mu12.dot(mu23);
    return std::min(1.0 - d, 1.0 + d);
}

double total_loss_plain(double occ_t, double occ_s, double corr, double axis,
                        const LossWeights& w) {
    return occ_t + occ_s + w.lambda_corr * corr + w.lambda_axis * axis;
}

}  // namespace tkd::losses
