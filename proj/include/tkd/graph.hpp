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
#include <vector>

#include "tkd/tensor.hpp"

namespace tkd {

// Closed operator set. Shape inference is total: every constructor either
// determines the output shape from its inputs or throws naming the node.
enum class Op {
    Input,
    Param,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Clamp,
    Relu,
    Sigmoid,
    Softmax,
    Matmul,
    Transpose2d,
    Reshape,
    Concat,
    GatherRows,
    ScatterMaxGrid,
    Conv3d,
    ConvTranspose3d,
    MaxPool3d,
    UpsampleNearest3d,
    ReduceSum,
    ReduceMean,
    ReduceMax,
    Trilinear,
    KabschRotation,
    StopGradient,
};

const char* op_name(Op op);

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Node {
    Op op;
    std::string name;             // leaf name (Input / Param)
    std::vector<int> inputs;
    Shape shape;                  // inferred output shape
    Tensor cval;                  // Constant payload
    std::vector<int64_t> idx;     // GatherRows / ScatterMaxGrid indices
    Shape attr_shape;             // Reshape target, ScatterMaxGrid output shape
    int axis = -1;                // Softmax / Concat / reductions (-1 = all)
    bool keepdims = false;
    int i0 = 0, i1 = 0;           // stride / pad / factor
    double x0 = 0.0, x1 = 0.0;    // clamp bounds
};

class Graph;

// Lightweight handle to a node inside a Graph.
struct Value {
    Graph* g = nullptr;
    int id = -1;
};

using Bindings = std::map<std::string, Tensor>;

class Graph {
  public:
    // Forward values (and per-node scratch used by backward) for one pass.
    struct Run {
        std::vector<Tensor> values;
        std::vector<std::vector<int64_t>> scratch;
    };

    Value input(const std::string& name, Shape shape);
    Value param(const std::string& name, Shape shape);
    Value constant(Tensor t);
    Value constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    const Shape& shape_of(Value v) const { return nodes_[static_cast<size_t>(v.id)].shape; }

    // Deterministic forward pass: nodes are evaluated in creation order, which
    // is a valid topological order by construction. Repeated calls with the
    // same bindings produce bit-identical results.
    Run run(const Bindings& b) const;
    Tensor eval(Value v, const Bindings& b) const;

    // Reverse-mode gradients of a scalar loss with respect to named leaves.
    // Leaves never reached by the backward sweep get a zero tensor.
    std::map<std::string, Tensor> gradient(Value loss, const Bindings& b,
                                           const std::vector<std::string>& wrt) const;
    std::map<std::string, Tensor> gradient_from(const Run& run, Value loss,
                                                const std::vector<std::string>& wrt) const;

    // When set, every node's output is checked for non-finite values at
    // evaluation time and a GraphError naming the node is thrown.
    bool check_finite = false;

    Value make(Node n);

  private:
    std::vector<Node> nodes_;
    std::map<std::string, int> leaves_;
};

// Builders. All validate shapes at construction time.
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);
Value neg(Value a);
Value exp(Value a);
Value log(Value a);
Value sqrt(Value a);
Value abs(Value a);
Value clamp(Value a, double lo, double hi);
Value relu(Value a);
Value sigmoid(Value a);
Value softmax(Value a, int axis);
Value matmul(Value a, Value b);
Value transpose2d(Value a);
Value reshape(Value a, Shape target);
Value concat(const std::vector<Value>& xs, int axis);
Value gather_rows(Value a, std::vector<int64_t> rows);
// Per-point features [N,C] pooled by max into a dense grid [C,D,H,W].
// cell[i] is the flat D*H*W index of point i; empty cells hold zero.
Value scatter_max_grid(Value feat, std::vector<int64_t> cell, Shape grid_shape);
Value conv3d(Value x, Value w, int stride, int pad);
Value conv_transpose3d(Value x, Value w, int stride, int pad);
Value maxpool3d(Value x, int factor);
Value upsample_nearest3d(Value x, int factor);
Value reduce_sum(Value a, int axis = -1, bool keepdims = false);
Value reduce_mean(Value a, int axis = -1, bool keepdims = false);
Value reduce_max(Value a, int axis = -1, bool keepdims = false);
// Volume [C,D,H,W] sampled at points [N,3] in the normalized cube; returns
// [N,C]. Points outside [-0.5,0.5]^3 are clamped to the boundary.
Value trilinear(Value vol, Value pts);
// Least-squares rotation aligning src rows onto dst rows (both [m,3], m >= 3).
// Backward flows through the closed-form solution; near-degenerate singular
// value gaps stop the gradient (see geom::kRigidGapTol).
Value kabsch_rotation(Value src, Value dst);
Value stop_gradient(Value a);

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }
inline Value operator/(Value a, Value b) { return div(a, b); }
inline Value operator-(Value a) { return neg(a); }

}  // namespace tkd
