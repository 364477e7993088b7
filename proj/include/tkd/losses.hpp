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

#include <optional>

#include "tkd/geom.hpp"
#include "tkd/graph.hpp"

namespace tkd::losses {

struct LossWeights {
    double lambda_corr = 1.0;
    double lambda_axis = 1.0;
};

// Probabilities are clamped to [eps, 1 - eps] before the logs.
constexpr double kBceEps = 1e-7;

// Mean binary cross-entropy over queries; probs and labels are [Q,1].
Value occupancy_loss(Value probs, Value labels);

struct CorrespondenceLoss {
    Value loss;
    Value rotation;  // the fitted rotation node, reused by the axis term
};

// Fits the closed-form rigid transform between the keypoint sets and sums the
// squared residuals. With stop_gradient_fit the fitted (R, t) are treated as
// constants; otherwise gradients flow through the fit.
CorrespondenceLoss correspondence_loss(Value k_c, Value k_g, bool stop_gradient_fit = false);

// min(1 - mu12.mu23, 1 + mu12.mu23) for unit axes shaped [3,1].
Value axis_consistency_loss(Value mu12, Value mu23);

// occ_t + occ_s + lambda_corr * corr + lambda_axis * axis; absent parts are
// simply skipped (pair-only batches have no axis term).
Value total_loss(Value occ_t, Value occ_s, std::optional<Value> corr, std::optional<Value> axis,
                 const LossWeights& w);

// Plain twins, used as oracles and on the inference side.
double occupancy_loss_plain(const std::vector<double>& probs, const std::vector<double>& labels);
double correspondence_loss_plain(const geom::KeypointSet& k_c, const geom::KeypointSet& k_g,
                                 bool* degenerate = nullptr);
double axis_consistency_loss_plain(geom::Vec3 mu12, geom::Vec3 mu23);
double total_loss_plain(double occ_t, double occ_s, double corr, double axis,
                        const LossWeights& w);

}  // namespace tkd::losses
