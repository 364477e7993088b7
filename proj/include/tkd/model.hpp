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

#include <map>
#include <random>
#include <string>

#include "json.hpp"
#include "tkd/geom.hpp"
#include "tkd/graph.hpp"

namespace tkd::model {

using nlohmann::json;

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int grid_res = 16;   // 8, 16, 32 or 64
    int keypoints = 6;   // m
    double sigma = 0.15; // heatmap width, normalized units
    int c1 = 32;         // point feature width (encoder)
    int c2 = 32;         // encoder volume width
    int c3 = 32;         // encoder output channels
    int c4 = 256;        // attention feature width
    int c5 = 32;         // detector volume width
    int ce = 32;         // query embedding width
    int psi_hidden = 64; // detector point MLP hidden width
    int occ_hidden = 64; // occupancy MLP width
    int n1 = 5000;       // points per cloud
    int n2 = 128;        // attention points
    enum class Attention { AsWritten, Standard };
    // AsWritten follows the printed form (values from the same frame);
    // Standard attends to the opposite frame's values.
    Attention attention = Attention::AsWritten;

    void validate() const;
    json to_json() const;
    static ModelConfig from_json(const json& j);
};

using Params = std::map<std::string, Tensor>;

// Parameter tensors with deterministic seeded initialization (He-style fans,
// iterated in sorted name order).
Params init_params(const ModelConfig& cfg, uint64_t seed);

// Declares every parameter as a named Param leaf of the graph.
struct BoundParams {
    std::map<std::string, Value> leaves;
    Value operator()(const std::string& name) const;
};
BoundParams declare_params(Graph& g, const ModelConfig& cfg);

// Constant per-frame data derived from a normalized cloud: the resampled
// points, their grid cells, farthest-point sample and nearest-upsample tables.
struct FrameInputs {
    Tensor points;                 // [n1, 3]
    std::vector<int64_t> cells;    // flat voxel per point
    std::vector<int64_t> fps;      // n2 row indices
    std::vector<int64_t> nn_up;    // per point, index into fps rows
};
FrameInputs prepare_frame(const std::vector<geom::Vec3>& cloud, const ModelConfig& cfg,
                          std::mt19937_64& rng);

// Per-point MLP + scatter-max pooling + two-level volumetric encoder-decoder.
Value encode_features(Graph& g, const BoundParams& p, const FrameInputs& f,
                      const ModelConfig& cfg);

// Scaled dot-product mixing of the two frames' down-sampled features; returns
// the concatenations [f_s, z_s] and [f_t, z_t].
std::pair<Value, Value> cross_attention(Value f_s, Value f_t, const ModelConfig& cfg);

// Shared point MLP -> FPS -> cross attention -> nearest-neighbor upsample ->
// scatter -> volumetric head; m-channel saliency logits per frame.
std::pair<Value, Value> detect_saliencies(Graph& g, const BoundParams& p, const FrameInputs& fs,
                                          const FrameInputs& ft, const ModelConfig& cfg);

// Query embedding + trilinear feature lookup + occupancy MLP -> probability.
Value decode_occupancy(Graph& g, const BoundParams& p, Value volume, Value queries,
                       const ModelConfig& cfg);

struct TransporterForward {
    Value sal_s, sal_t;   // [m,G,G,G]
    Value k_s, k_t;       // [m,3]
    Value phi_s, phi_t;   // [c3,G,G,G]
    Value phi_plus;       // transported volume
    Value prob_t;         // [Qt,1] occupancy of the target from phi_plus
    Value prob_s;         // [Qs,1] occupancy of the source from phi_s
};

TransporterForward forward_transporter(Graph& g, const BoundParams& p, const FrameInputs& fs,
                                       const FrameInputs& ft, Value queries_t, Value queries_s,
                                       const ModelConfig& cfg, bool stopgrad_keypoints = false);

}  // namespace tkd::model
