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
#include <string>

#include "tkd/tensor.hpp"

namespace tkd {

// Bias-corrected Adam. Moment accumulators are created lazily per parameter
// and always match the parameter shape.
struct OptimState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::map<std::string, Tensor> m1, m2;
};

// Applies one update in place. If any gradient entry is non-finite the step is
// rejected: parameters and state are left untouched and `diag` (when given)
// names the offending tensor.
inline bool adam_step(std::map<std::string, Tensor>& params,
                      const std::map<std::string, Tensor>& grads, OptimState& st,
                      std::string* diag = nullptr) {
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) {
            if (diag) *diag = "gradient for unknown parameter '" + name + "'";
            return false;
        }
        if (g.shape != it->second.shape) {
            if (diag)
                *diag = "gradient shape " + shape_str(g.shape) + " != parameter shape " +
                        shape_str(it->second.shape) + " for '" + name + "'";
            return false;
        }
        if (!g.all_finite()) {
            if (diag) *diag = "non-finite gradient for '" + name + "'";
            return false;
        }
    }
    st.step_count += 1;
    const double t = static_cast<double>(st.step_count);
    const double bc1 = 1.0 - std::pow(st.beta1, t);
    const double bc2 = 1.0 - std::pow(st.beta2, t);
    for (const auto& [name, g] : grads) {
        Tensor& p = params.at(name);
        auto m1 = st.m1.find(name);
        if (m1 == st.m1.end()) m1 = st.m1.emplace(name, Tensor(p.shape)).first;
        auto m2 = st.m2.find(name);
        if (m2 == st.m2.end()) m2 = st.m2.emplace(name, Tensor(p.shape)).first;
        for (int64_t i = 0; i < p.numel(); ++i) {
            double& m = m1->second.data[i];
            double& v = m2->second.data[i];
            m = st.beta1 * m + (1.0 - st.beta1) * g.data[i];
            v = st.beta2 * v + (1.0 - st.beta2) * g.data[i] * g.data[i];
            const double mh = m / bc1;
            const double vh = v / bc2;
            p.data[i] -= st.lr * mh / (std::sqrt(vh) + st.eps);
        }
    }
    return true;
}

}  // namespace tkd
