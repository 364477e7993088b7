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
#include <random>
#include <string>
#include <vector>

#include "tkd/graph.hpp"

namespace tkd {

// Central finite differences against reverse-mode gradients, fp64.
// Reported error per leaf is max over checked entries of
//   |analytic - numeric| / max(1, |numeric|).
// With max_entries >= 0, at most that many randomly chosen entries per leaf
// are probed (spot check); otherwise every entry is.
std::map<std::string, double> finite_difference_check(const Graph& g, Value loss,
                                                      const Bindings& point,
                                                      const std::vector<std::string>& wrt,
                                                      double eps = 1e-5, int max_entries = -1,
                                                      std::mt19937_64* rng = nullptr);

struct OpCheckRow {
    std::string op;
    bool differentiable;   // false: leaf or gradient-blocking by contract
    double max_rel_err;    // 0 for non-differentiable rows
    bool pass;
};

// One finite-difference probe per operator in the closed set. Every operator
// appears exactly once. `fault_op`, when nonempty, perturbs that operator's
// analytic gradient before comparison; the row must then fail (negative
// control for the harness itself).
std::vector<OpCheckRow> check_all_ops(double tol = 1e-5, uint64_t seed = 12345,
                                      const std::string& fault_op = "");

}  // namespace tkd
