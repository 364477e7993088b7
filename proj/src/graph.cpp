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

#include "tkd/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace tkd {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Neg: return "neg";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Abs: return "abs";
        case Op::Clamp: return "clamp";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softmax: return "softmax";
        case Op::Matmul: return "matmul";
        case Op::Transpose2d: return "transpose2d";
        case Op::Reshape: return "reshape";
        case Op::Concat: return "concat";
        case Op::GatherRows: return "gather_rows";
        case Op::ScatterMaxGrid: return "scatter_max_grid";
        case Op::Conv3d: return "conv3d";
        case Op::ConvTranspose3d: return "conv_transpose3d";
        case Op::MaxPool3d: return "maxpool3d";
        case Op::UpsampleNearest3d: return "upsample_nearest3d";
        case Op::ReduceSum: return "reduce_sum";
        case Op::ReduceMean: return "reduce_mean";
        case Op::ReduceMax: return "reduce_max";
        case Op::Trilinear: return "trilinear";
        case Op::KabschRotation: return "kabsch_rotation";
        case Op::StopGradient: return "stop_gradient";
    }
    return "?";
}

namespace {

[[noreturn]] void fail(const Node& n, int id, const std::string& msg) {
    std::string who = std::string(op_name(n.op));
    if (!n.name.empty()) who += " '" + n.name + "'";
    throw GraphError("node " + std::to_string(id) + " (" + who + "): " + msg);
}

// ---- broadcasting -----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b, const Node& n, int id) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            fail(n, id, "shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides padded to `rank`, zeroed where the dim is broadcast.
std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
    size_t r = out.size();
    std::vector<int64_t> st(r, 0);
    int64_t acc = 1;
    for (size_t i = 0; i < s.size(); ++i) {
        size_t k = s.size() - 1 - i;
        st[r - 1 - i] = (s[k] == 1) ? 0 : acc;
        acc *= s[k];
    }
    for (size_t i = 0; i < r; ++i)
        if (out[i] == 1) st[i] = 0;
    return st;
}

template <class F>
void bcast_each(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
    size_t r = out.size();
    auto ast = bcast_strides(sa, out);
    auto bst = bcast_strides(sb, out);
    std::vector<int64_t> c(r, 0);
    int64_t total = numel_of(out), ao = 0, bo = 0;
    for (int64_t i = 0; i < total; ++i) {
        f(i, ao, bo);
        for (size_t dd = r; dd-- > 0;) {
            ++c[dd];
            ao += ast[dd];
            bo += bst[dd];
            if (c[dd] < out[dd]) break;
            c[dd] = 0;
            ao -= ast[dd] * out[dd];
            bo -= bst[dd] * out[dd];
        }
    }
}

// ---- matmul kernels (accumulating) ------------------------------------------

void mm_nn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t m = 0; m < M; ++m) {
        const double* a = A + m * K;
        double* c = C + m * N;
        for (int64_t k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + k * N;
            for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t m = 0; m < M; ++m) {
        const double* a = A + m * K;
        for (int64_t n = 0; n < N; ++n) {
            const double* b = B + n * K;
            double s = 0.0;
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            C[m * N + n] += s;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
void mm_tn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t k = 0; k < K; ++k) {
        const double* a = A + k * M;
        const double* b = B + k * N;
        for (int64_t m = 0; m < M; ++m) {
            const double av = a[m];
            double* c = C + m * N;
            for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// ---- conv helpers ------------------------------------------------------------

struct ConvDims {
    int64_t ci, d, h, w;      // input
    int64_t co, k;            // kernel
    int64_t od, oh, ow;       // output
    int64_t s, p;
};

void im2col3d(const double* x, const ConvDims& g, double* col) {
    const int64_t L = g.od * g.oh * g.ow;
    int64_t row = 0;
    for (int64_t c = 0; c < g.ci; ++c) {
        const double* xc = x + c * g.d * g.h * g.w;
        for (int64_t kd = 0; kd < g.k; ++kd)
            for (int64_t kh = 0; kh < g.k; ++kh)
                for (int64_t kw = 0; kw < g.k; ++kw) {
                    double* dst = col + (row++) * L;
                    int64_t i = 0;
                    for (int64_t od = 0; od < g.od; ++od) {
                        const int64_t id = od * g.s - g.p + kd;
                        for (int64_t oh = 0; oh < g.oh; ++oh) {
                            const int64_t ih = oh * g.s - g.p + kh;
                            const bool in_dh = id >= 0 && id < g.d && ih >= 0 && ih < g.h;
                            for (int64_t ow = 0; ow < g.ow; ++ow, ++i) {
                                const int64_t iw = ow * g.s - g.p + kw;
                                dst[i] = (in_dh && iw >= 0 && iw < g.w)
                                             ? xc[(id * g.h + ih) * g.w + iw]
                                             : 0.0;
                            }
                        }
                    }
                }
    }
}

void col2im3d(const double* col, const ConvDims& g, double* x) {
    const int64_t L = g.od * g.oh * g.ow;
    int64_t row = 0;
    for (int64_t c = 0; c < g.ci; ++c) {
        double* xc = x + c * g.d * g.h * g.w;
        for (int64_t kd = 0; kd < g.k; ++kd)
            for (int64_t kh = 0; kh < g.k; ++kh)
                for (int64_t kw = 0; kw < g.k; ++kw) {
                    const double* src = col + (row++) * L;
                    int64_t i = 0;
                    for (int64_t od = 0; od < g.od; ++od) {
                        const int64_t id = od * g.s - g.p + kd;
                        for (int64_t oh = 0; oh < g.oh; ++oh) {
                            const int64_t ih = oh * g.s - g.p + kh;
                            const bool in_dh = id >= 0 && id < g.d && ih >= 0 && ih < g.h;
                            for (int64_t ow = 0; ow < g.ow; ++ow, ++i) {
                                const int64_t iw = ow * g.s - g.p + kw;
                                if (in_dh && iw >= 0 && iw < g.w)
                                    xc[(id * g.h + ih) * g.w + iw] += src[i];
                            }
                        }
                    }
                }
    }
}

ConvDims conv_dims(const Node& n, int id, const Shape& xs, const Shape& ws, bool transposed) {
    if (xs.size() != 4 || ws.size() != 5) fail(n, id, "expects x[C,D,H,W], w[.,.,k,k,k]");
    ConvDims g;
    g.ci = xs[0];
    g.d = xs[1];
    g.h = xs[2];
    g.w = xs[3];
    g.k = ws[2];
    g.s = n.i0;
    g.p = n.i1;
    if (ws[3] != g.k || ws[4] != g.k) fail(n, id, "kernel must be cubic");
    if (g.s < 1) fail(n, id, "stride must be >= 1");
    if (g.p < 0) fail(n, id, "pad must be >= 0");
    if (!transposed) {
        if (ws[1] != g.ci)
            fail(n, id, "w in-channels " + std::to_string(ws[1]) + " != x channels " +
                            std::to_string(g.ci));
        g.co = ws[0];
        g.od = (g.d + 2 * g.p - g.k) / g.s + 1;
        g.oh = (g.h + 2 * g.p - g.k) / g.s + 1;
        g.ow = (g.w + 2 * g.p - g.k) / g.s + 1;
        if (g.od < 1 || g.oh < 1 || g.ow < 1) fail(n, id, "kernel larger than padded input");
    } else {
        if (ws[0] != g.ci)
            fail(n, id, "w in-channels " + std::to_string(ws[0]) + " != x channels " +
                            std::to_string(g.ci));
        g.co = ws[1];
        g.od = (g.d - 1) * g.s - 2 * g.p + g.k;
        g.oh = (g.h - 1) * g.s - 2 * g.p + g.k;
        g.ow = (g.w - 1) * g.s - 2 * g.p + g.k;
        if (g.od < 1 || g.oh < 1 || g.ow < 1) fail(n, id, "empty transposed output");
    }
    return g;
}

double sigmoid1(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct AxisSplit {
    int64_t outer, n, inner;
};

AxisSplit axis_split(const Shape& s, int axis) {
    AxisSplit a{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

// Continuous grid coordinate for one axis: cell centers at -0.5 + (i+0.5)/G.
// Returns base cell, fraction and d(coord)/d(point) (0 where clamped).
struct TriAxis {
    int64_t i0;
    double f;
    double dudx;
};

TriAxis tri_axis(double x, int64_t G) {
    TriAxis t;
    double u = (x + 0.5) * static_cast<double>(G) - 0.5;
    t.dudx = static_cast<double>(G);
    if (u <= 0.0) {
        u = 0.0;
        t.dudx = 0.0;
    } else if (u >= static_cast<double>(G - 1)) {
        u = static_cast<double>(G - 1);
        t.dudx = 0.0;
    }
    if (G == 1) {
        t.i0 = 0;
        t.f = 0.0;
        t.dudx = 0.0;
        return t;
    }
    t.i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(u)), G - 2);
    t.f = u - static_cast<double>(t.i0);
    return t;
}

// ---- Kabsch ------------------------------------------------------------------

constexpr double kRigidGapTol = 1e-6;   // singular-value gap below which gradients stop
constexpr double kRigidRankTol = 1e-12; // sigma_2 below this: degenerate, fall back to identity

struct KabschFwd {
    Eigen::Matrix3d U, V, R;
    Eigen::Vector3d sv;
    bool degenerate = false;
    double det_sign = 1.0;
};

KabschFwd kabsch_fit(const Tensor& src, const Tensor& dst) {
    const int64_t m = src.shape[0];
    Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
    for (int64_t i = 0; i < m; ++i)
        for (int j = 0; j < 3; ++j) {
            cs[j] += src.at(i, j);
            cd[j] += dst.at(i, j);
        }
    cs /= static_cast<double>(m);
    cd /= static_cast<double>(m);
    Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
    for (int64_t i = 0; i < m; ++i) {
        Eigen::Vector3d x(src.at(i, 0) - cs[0], src.at(i, 1) - cs[1], src.at(i, 2) - cs[2]);
        Eigen::Vector3d y(dst.at(i, 0) - cd[0], dst.at(i, 1) - cd[1], dst.at(i, 2) - cd[2]);
        H += x * y.transpose();
    }
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    KabschFwd f;
    f.U = svd.matrixU();
    f.V = svd.matrixV();
    f.sv = svd.singularValues();
    const double scale = std::max(1.0, f.sv[0]);
    if (f.sv[1] <= kRigidRankTol * scale) {
        f.degenerate = true;
        f.R = Eigen::Matrix3d::Identity();
        return f;
    }
    f.det_sign = ((f.V * f.U.transpose()).determinant() < 0.0) ? -1.0 : 1.0;
    Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
    D(2, 2) = f.det_sign;
    f.R = f.V * D * f.U.transpose();
    return f;
}

}  // namespace

// ---- graph construction ------------------------------------------------------

Value Graph::make(Node n) {
    const int id = static_cast<int>(nodes_.size());
    for (int in : n.inputs) {
        if (in < 0 || in >= id) fail(n, id, "input node out of range");
    }
    nodes_.push_back(std::move(n));
    return Value{this, id};
}

Value Graph::input(const std::string& name, Shape shape) {
    if (leaves_.count(name)) throw GraphError("duplicate leaf name '" + name + "'");
    Node n;
    n.op = Op::Input;
    n.name = name;
    n.shape = std::move(shape);
    Value v = make(std::move(n));
    leaves_[name] = v.id;
    return v;
}

Value Graph::param(const std::string& name, Shape shape) {
    if (leaves_.count(name)) throw GraphError("duplicate leaf name '" + name + "'");
    Node n;
    n.op = Op::Param;
    n.name = name;
    n.shape = std::move(shape);
    Value v = make(std::move(n));
    leaves_[name] = v.id;
    return v;
}

Value Graph::constant(Tensor t) {
    Node n;
    n.op = Op::Constant;
    n.shape = t.shape;
    n.cval = std::move(t);
    return make(std::move(n));
}

namespace {

Node binary(Op op, Value a, Value b) {
    if (a.g != b.g) throw GraphError(std::string(op_name(op)) + ": operands from different graphs");
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    return n;
}

Node unary(Op op, Value a) {
    Node n;
    n.op = op;
    n.inputs = {a.id};
    n.shape = a.g->shape_of(a);
    return n;
}

}  // namespace

Value add(Value a, Value b) {
    Node n = binary(Op::Add, a, b);
    n.shape = broadcast_shape(a.g->shape_of(a), b.g->shape_of(b), n, a.g->size());
    return a.g->make(std::move(n));
}
Value sub(Value a, Value b) {
    Node n = binary(Op::Sub, a, b);
    n.shape = broadcast_shape(a.g->shape_of(a), b.g->shape_of(b), n, a.g->size());
    return a.g->make(std::move(n));
}
Value mul(Value a, Value b) {
    Node n = binary(Op::Mul, a, b);
    n.shape = broadcast_shape(a.g->shape_of(a), b.g->shape_of(b), n, a.g->size());
    return a.g->make(std::move(n));
}
Value div(Value a, Value b) {
    Node n = binary(Op::Div, a, b);
    n.shape = broadcast_shape(a.g->shape_of(a), b.g->shape_of(b), n, a.g->size());
    return a.g->make(std::move(n));
}

Value neg(Value a) { return a.g->make(unary(Op::Neg, a)); }
Value exp(Value a) { return a.g->make(unary(Op::Exp, a)); }
Value log(Value a) { return a.g->make(unary(Op::Log, a)); }
Value sqrt(Value a) { return a.g->make(unary(Op::Sqrt, a)); }
Value abs(Value a) { return a.g->make(unary(Op::Abs, a)); }
Value relu(Value a) { return a.g->make(unary(Op::Relu, a)); }
Value sigmoid(Value a) { return a.g->make(unary(Op::Sigmoid, a)); }
Value stop_gradient(Value a) { return a.g->make(unary(Op::StopGradient, a)); }

Value clamp(Value a, double lo, double hi) {
    Node n = unary(Op::Clamp, a);
    if (!(lo < hi)) throw GraphError("clamp: lo must be < hi");
    n.x0 = lo;
    n.x1 = hi;
    return a.g->make(std::move(n));
}

Value softmax(Value a, int axis) {
    Node n = unary(Op::Softmax, a);
    if (axis < 0 || axis >= static_cast<int>(n.shape.size()))
        fail(n, a.g->size(), "axis out of range for " + shape_str(n.shape));
    n.axis = axis;
    return a.g->make(std::move(n));
}

Value matmul(Value a, Value b) {
    Node n = binary(Op::Matmul, a, b);
    const Shape& sa = a.g->shape_of(a);
    const Shape& sb = b.g->shape_of(b);
    if (sa.size() != 2 || sb.size() != 2)
        fail(n, a.g->size(), "expects 2-D operands, got " + shape_str(sa) + " x " + shape_str(sb));
    if (sa[1] != sb[0])
        fail(n, a.g->size(), "inner dims differ: " + shape_str(sa) + " x " + shape_str(sb));
    n.shape = {sa[0], sb[1]};
    return a.g->make(std::move(n));
}

Value transpose2d(Value a) {
    Node n = unary(Op::Transpose2d, a);
    if (n.shape.size() != 2) fail(n, a.g->size(), "expects a 2-D tensor");
    std::swap(n.shape[0], n.shape[1]);
    return a.g->make(std::move(n));
}

Value reshape(Value a, Shape target) {
    Node n = unary(Op::Reshape, a);
    if (numel_of(target) != numel_of(n.shape))
        fail(n, a.g->size(),
             "cannot reshape " + shape_str(n.shape) + " into " + shape_str(target));
    n.attr_shape = target;
    n.shape = std::move(target);
    return a.g->make(std::move(n));
}

Value concat(const std::vector<Value>& xs, int axis) {
    if (xs.empty()) throw GraphError("concat: no inputs");
    Node n;
    n.op = Op::Concat;
    n.axis = axis;
    Shape s = xs[0].g->shape_of(xs[0]);
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        fail(n, xs[0].g->size(), "axis out of range");
    for (const Value& v : xs) {
        n.inputs.push_back(v.id);
        const Shape& si = v.g->shape_of(v);
        if (si.size() != s.size()) fail(n, xs[0].g->size(), "rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            if (d != static_cast<size_t>(axis) && si[d] != s[d])
                fail(n, xs[0].g->size(),
                     "non-axis dims differ: " + shape_str(s) + " vs " + shape_str(si));
    }
    int64_t total = 0;
    for (const Value& v : xs) total += v.g->shape_of(v)[static_cast<size_t>(axis)];
    s[static_cast<size_t>(axis)] = total;
    n.shape = std::move(s);
    return xs[0].g->make(std::move(n));
}

Value gather_rows(Value a, std::vector<int64_t> rows) {
    Node n = unary(Op::GatherRows, a);
    if (n.shape.empty()) fail(n, a.g->size(), "expects rank >= 1");
    for (int64_t r : rows)
        if (r < 0 || r >= n.shape[0]) fail(n, a.g->size(), "row index out of range");
    n.idx = std::move(rows);
    n.shape[0] = static_cast<int64_t>(n.idx.size());
    return a.g->make(std::move(n));
}

Value scatter_max_grid(Value feat, std::vector<int64_t> cell, Shape grid_shape) {
    Node n = unary(Op::ScatterMaxGrid, feat);
    const Shape& fs = feat.g->shape_of(feat);
    if (fs.size() != 2) fail(n, feat.g->size(), "expects features [N,C]");
    if (grid_shape.size() != 4 || grid_shape[0] != fs[1])
        fail(n, feat.g->size(), "grid shape must be [C,D,H,W] with C matching features");
    if (static_cast<int64_t>(cell.size()) != fs[0])
        fail(n, feat.g->size(), "one cell index per point required");
    const int64_t ncells = grid_shape[1] * grid_shape[2] * grid_shape[3];
    for (int64_t c : cell)
        if (c < 0 || c >= ncells) fail(n, feat.g->size(), "cell index out of range");
    n.idx = std::move(cell);
    n.attr_shape = grid_shape;
    n.shape = std::move(grid_shape);
    return feat.g->make(std::move(n));
}

Value conv3d(Value x, Value w, int stride, int pad) {
    Node n = binary(Op::Conv3d, x, w);
    n.i0 = stride;
    n.i1 = pad;
    ConvDims g = conv_dims(n, x.g->size(), x.g->shape_of(x), w.g->shape_of(w), false);
    n.shape = {g.co, g.od, g.oh, g.ow};
    return x.g->make(std::move(n));
}

Value conv_transpose3d(Value x, Value w, int stride, int pad) {
    Node n = binary(Op::ConvTranspose3d, x, w);
    n.i0 = stride;
    n.i1 = pad;
    ConvDims g = conv_dims(n, x.g->size(), x.g->shape_of(x), w.g->shape_of(w), true);
    n.shape = {g.co, g.od, g.oh, g.ow};
    return x.g->make(std::move(n));
}

Value maxpool3d(Value x, int factor) {
    Node n = unary(Op::MaxPool3d, x);
    if (n.shape.size() != 4) fail(n, x.g->size(), "expects [C,D,H,W]");
    if (factor < 1) fail(n, x.g->size(), "factor must be >= 1");
    for (int d = 1; d < 4; ++d)
        if (n.shape[static_cast<size_t>(d)] % factor != 0)
            fail(n, x.g->size(), "dims must be divisible by the pooling factor");
    n.i0 = factor;
    for (int d = 1; d < 4; ++d) n.shape[static_cast<size_t>(d)] /= factor;
    return x.g->make(std::move(n));
}

Value upsample_nearest3d(Value x, int factor) {
    Node n = unary(Op::UpsampleNearest3d, x);
    if (n.shape.size() != 4) fail(n, x.g->size(), "expects [C,D,H,W]");
    if (factor < 1) fail(n, x.g->size(), "factor must be >= 1");
    n.i0 = factor;
    for (int d = 1; d < 4; ++d) n.shape[static_cast<size_t>(d)] *= factor;
    return x.g->make(std::move(n));
}

namespace {

Value reduce(Op op, Value a, int axis, bool keepdims) {
    Node n = unary(op, a);
    n.keepdims = keepdims;
    if (axis == -1) {
        n.axis = -1;
        n.shape = {1};
    } else {
        if (axis < 0 || axis >= static_cast<int>(n.shape.size()))
            fail(n, a.g->size(), "axis out of range for " + shape_str(n.shape));
        n.axis = axis;
        if (keepdims)
            n.shape[static_cast<size_t>(axis)] = 1;
        else
            n.shape.erase(n.shape.begin() + axis);
        if (n.shape.empty()) n.shape = {1};
    }
    return a.g->make(std::move(n));
}

}  // namespace

Value reduce_sum(Value a, int axis, bool keepdims) { return reduce(Op::ReduceSum, a, axis, keepdims); }
Value reduce_mean(Value a, int axis, bool keepdims) { return reduce(Op::ReduceMean, a, axis, keepdims); }
Value reduce_max(Value a, int axis, bool keepdims) { return reduce(Op::ReduceMax, a, axis, keepdims); }

Value trilinear(Value vol, Value pts) {
    Node n = binary(Op::Trilinear, vol, pts);
    const Shape& vs = vol.g->shape_of(vol);
    const Shape& ps = pts.g->shape_of(pts);
    if (vs.size() != 4) fail(n, vol.g->size(), "volume must be [C,D,H,W]");
    if (ps.size() != 2 || ps[1] != 3) fail(n, vol.g->size(), "points must be [N,3]");
    n.shape = {ps[0], vs[0]};
    return vol.g->make(std::move(n));
}

Value kabsch_rotation(Value src, Value dst) {
    Node n = binary(Op::KabschRotation, src, dst);
    const Shape& ss = src.g->shape_of(src);
    const Shape& ds = dst.g->shape_of(dst);
    if (ss.size() != 2 || ss[1] != 3 || ds != ss)
        fail(n, src.g->size(),
             "expects matching [m,3] point sets, got " + shape_str(ss) + " / " + shape_str(ds));
    if (ss[0] < 3) fail(n, src.g->size(), "needs m >= 3 points");
    n.shape = {3, 3};
    return src.g->make(std::move(n));
}

// ---- forward -----------------------------------------------------------------

Graph::Run Graph::run(const Bindings& b) const {
    Run r;
    r.values.resize(nodes_.size());
    r.scratch.resize(nodes_.size());
    for (size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        Tensor& out = r.values[id];
        auto in = [&](int k) -> const Tensor& {
            return r.values[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])];
        };
        switch (n.op) {
            case Op::Input:
            case Op::Param: {
                auto it = b.find(n.name);
                if (it == b.end()) fail(n, static_cast<int>(id), "no binding provided");
                if (it->second.shape != n.shape)
                    fail(n, static_cast<int>(id),
                         "binding shape " + shape_str(it->second.shape) + " != declared " +
                             shape_str(n.shape));
                out = it->second;
                break;
            }
            case Op::Constant:
                out = n.cval;
                break;
            case Op::Add:
            case Op::Sub:
            case Op::Mul:
            case Op::Div: {
                const Tensor& A = in(0);
                const Tensor& B = in(1);
                out = Tensor(n.shape);
                if (A.shape == B.shape && A.shape == n.shape) {
                    const int64_t t = out.numel();
                    switch (n.op) {
                        case Op::Add:
                            for (int64_t i = 0; i < t; ++i) out.data[i] = A.data[i] + B.data[i];
                            break;
                        case Op::Sub:
                            for (int64_t i = 0; i < t; ++i) out.data[i] = A.data[i] - B.data[i];
                            break;
                        case Op::Mul:
                            for (int64_t i = 0; i < t; ++i) out.data[i] = A.data[i] * B.data[i];
                            break;
                        default:
                            for (int64_t i = 0; i < t; ++i) out.data[i] = A.data[i] / B.data[i];
                    }
                } else {
                    switch (n.op) {
                        case Op::Add:
                            bcast_each(n.shape, A.shape, B.shape, [&](int64_t i, int64_t ao, int64_t bo) {
                                out.data[i] = A.data[ao] + B.data[bo];
                            });
                            break;
                        case Op::Sub:
                            bcast_each(n.shape, A.shape, B.shape, [&](int64_t i, int64_t ao, int64_t bo) {
                                out.data[i] = A.data[ao] - B.data[bo];
                            });
                            break;
                        case Op::Mul:
                            bcast_each(n.shape, A.shape, B.shape, [&](int64_t i, int64_t ao, int64_t bo) {
                                out.data[i] = A.data[ao] * B.data[bo];
                            });
                            break;
                        default:
                            bcast_each(n.shape, A.shape, B.shape, [&](int64_t i, int64_t ao, int64_t bo) {
                                out.data[i] = A.data[ao] / B.data[bo];
                            });
                    }
                }
                break;
            }
            case Op::Neg: {
                out = in(0);
                for (auto& v : out.data) v = -v;
                break;
            }
            case Op::Exp: {
                out = in(0);
                for (auto& v : out.data) v = std::exp(v);
                break;
            }
            case Op::Log: {
                out = in(0);
                for (auto& v : out.data) v = std::log(v);
                break;
            }
            case Op::Sqrt: {
                out = in(0);
                for (auto& v : out.data) v = std::sqrt(v);
                break;
            }
            case Op::Abs: {
                out = in(0);
                for (auto& v : out.data) v = std::abs(v);
                break;
            }
            case Op::Clamp: {
                out = in(0);
                for (auto& v : out.data) v = std::min(std::max(v, n.x0), n.x1);
                break;
            }
            case Op::Relu: {
                out = in(0);
                for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
                break;
            }
            case Op::Sigmoid: {
                out = in(0);
                for (auto& v : out.data) v = sigmoid1(v);
                break;
            }
            case Op::Softmax: {
                const Tensor& X = in(0);
                out = Tensor(n.shape);
                AxisSplit a = axis_split(n.shape, n.axis);
                for (int64_t o = 0; o < a.outer; ++o)
                    for (int64_t q = 0; q < a.inner; ++q) {
                        const int64_t base = o * a.n * a.inner + q;
                        double mx = -std::numeric_limits<double>::infinity();
                        for (int64_t j = 0; j < a.n; ++j)
                            mx = std::max(mx, X.data[base + j * a.inner]);
                        double sum = 0.0;
                        for (int64_t j = 0; j < a.n; ++j) {
                            const double e = std::exp(X.data[base + j * a.inner] - mx);
                            out.data[base + j * a.inner] = e;
                            sum += e;
                        }
                        for (int64_t j = 0; j < a.n; ++j) out.data[base + j * a.inner] /= sum;
                    }
                break;
            }
            case Op::Matmul: {
                const Tensor& A = in(0);
                const Tensor& B = in(1);
                out = Tensor(n.shape);
                mm_nn(A.data.data(), B.data.data(), out.data.data(), A.shape[0], A.shape[1],
                      B.shape[1]);
                break;
            }
            case Op::Transpose2d: {
                const Tensor& A = in(0);
                out = Tensor(n.shape);
                for (int64_t i = 0; i < A.shape[0]; ++i)
                    for (int64_t j = 0; j < A.shape[1]; ++j) out.at(j, i) = A.at(i, j);
                break;
            }
            case Op::Reshape: {
                out = Tensor(n.shape, in(0).data);
                break;
            }
            case Op::Concat: {
                out = Tensor(n.shape);
                AxisSplit a = axis_split(n.shape, n.axis);
                int64_t off = 0;
                for (int k = 0; k < static_cast<int>(n.inputs.size()); ++k) {
                    const Tensor& X = in(k);
                    const int64_t nk = X.shape[static_cast<size_t>(n.axis)];
                    for (int64_t o = 0; o < a.outer; ++o)
                        std::copy_n(X.data.begin() + o * nk * a.inner, nk * a.inner,
                                    out.data.begin() + (o * a.n + off) * a.inner);
                    off += nk;
                }
                break;
            }
            case Op::GatherRows: {
                const Tensor& X = in(0);
                out = Tensor(n.shape);
                const int64_t rs = X.numel() / X.shape[0];
                for (size_t k = 0; k < n.idx.size(); ++k)
                    std::copy_n(X.data.begin() + n.idx[k] * rs, rs,
                                out.data.begin() + static_cast<int64_t>(k) * rs);
                break;
            }
            case Op::ScatterMaxGrid: {
                const Tensor& F = in(0);
                const int64_t N = F.shape[0], C = F.shape[1];
                const int64_t ncells = n.shape[1] * n.shape[2] * n.shape[3];
                out = Tensor(n.shape);
                auto& win = r.scratch[id];
                win.assign(static_cast<size_t>(C * ncells), -1);
                std::fill(out.data.begin(), out.data.end(),
                          -std::numeric_limits<double>::infinity());
                for (int64_t i = 0; i < N; ++i) {
                    const int64_t cell = n.idx[static_cast<size_t>(i)];
                    for (int64_t c = 0; c < C; ++c) {
                        double& cur = out.data[c * ncells + cell];
                        const double v = F.at(i, c);
                        if (v > cur) {    // strict: first point wins ties
                            cur = v;
                            win[static_cast<size_t>(c * ncells + cell)] = i;
                        }
                    }
                }
                for (int64_t j = 0; j < C * ncells; ++j)
                    if (win[static_cast<size_t>(j)] < 0) out.data[j] = 0.0;
                break;
            }
            case Op::Conv3d: {
                const Tensor& X = in(0);
                const Tensor& W = in(1);
                ConvDims g = conv_dims(n, static_cast<int>(id), X.shape, W.shape, false);
                const int64_t L = g.od * g.oh * g.ow;
                std::vector<double> col(static_cast<size_t>(g.ci * g.k * g.k * g.k * L));
                im2col3d(X.data.data(), g, col.data());
                out = Tensor(n.shape);
                mm_nn(W.data.data(), col.data(), out.data.data(), g.co, g.ci * g.k * g.k * g.k, L);
                break;
            }
            case Op::ConvTranspose3d: {
                const Tensor& X = in(0);
                const Tensor& W = in(1);
                ConvDims g = conv_dims(n, static_cast<int>(id), X.shape, W.shape, true);
                out = Tensor(n.shape);
                for (int64_t ci = 0; ci < g.ci; ++ci)
                    for (int64_t d = 0; d < g.d; ++d)
                        for (int64_t h = 0; h < g.h; ++h)
                            for (int64_t w = 0; w < g.w; ++w) {
                                const double xv = X.data[((ci * g.d + d) * g.h + h) * g.w + w];
                                if (xv == 0.0) continue;
                                for (int64_t co = 0; co < g.co; ++co) {
                                    const double* wk =
                                        W.data.data() + ((ci * g.co + co) * g.k * g.k * g.k);
                                    double* oc = out.data.data() + co * g.od * g.oh * g.ow;
                                    for (int64_t kd = 0; kd < g.k; ++kd) {
                                        const int64_t od = d * g.s - g.p + kd;
                                        if (od < 0 || od >= g.od) continue;
                                        for (int64_t kh = 0; kh < g.k; ++kh) {
                                            const int64_t oh = h * g.s - g.p + kh;
                                            if (oh < 0 || oh >= g.oh) continue;
                                            for (int64_t kw = 0; kw < g.k; ++kw) {
                                                const int64_t ow = w * g.s - g.p + kw;
                                                if (ow < 0 || ow >= g.ow) continue;
                                                oc[(od * g.oh + oh) * g.ow + ow] +=
                                                    xv * wk[(kd * g.k + kh) * g.k + kw];
                                            }
                                        }
                                    }
                                }
                            }
                break;
            }
            case Op::MaxPool3d: {
                const Tensor& X = in(0);
                const int64_t f = n.i0;
                const int64_t C = n.shape[0], oD = n.shape[1], oH = n.shape[2], oW = n.shape[3];
                const int64_t D = X.shape[1], H = X.shape[2], W = X.shape[3];
                out = Tensor(n.shape);
                auto& arg = r.scratch[id];
                arg.assign(static_cast<size_t>(out.numel()), -1);
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t od = 0; od < oD; ++od)
                        for (int64_t oh = 0; oh < oH; ++oh)
                            for (int64_t ow = 0; ow < oW; ++ow) {
                                double best = -std::numeric_limits<double>::infinity();
                                int64_t bi = -1;
                                for (int64_t kd = 0; kd < f; ++kd)
                                    for (int64_t kh = 0; kh < f; ++kh)
                                        for (int64_t kw = 0; kw < f; ++kw) {
                                            const int64_t src =
                                                ((c * D + od * f + kd) * H + oh * f + kh) * W +
                                                ow * f + kw;
                                            if (X.data[src] > best) {
                                                best = X.data[src];
                                                bi = src;
                                            }
                                        }
                                const int64_t o = ((c * oD + od) * oH + oh) * oW + ow;
                                out.data[o] = best;
                                arg[static_cast<size_t>(o)] = bi;
                            }
                break;
            }
            case Op::UpsampleNearest3d: {
                const Tensor& X = in(0);
                const int64_t f = n.i0;
                const int64_t C = n.shape[0], oD = n.shape[1], oH = n.shape[2], oW = n.shape[3];
                out = Tensor(n.shape);
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t od = 0; od < oD; ++od)
                        for (int64_t oh = 0; oh < oH; ++oh)
                            for (int64_t ow = 0; ow < oW; ++ow)
                                out.data[((c * oD + od) * oH + oh) * oW + ow] =
                                    X.data[((c * (oD / f) + od / f) * (oH / f) + oh / f) * (oW / f) +
                                           ow / f];
                break;
            }
            case Op::ReduceSum:
            case Op::ReduceMean: {
                const Tensor& X = in(0);
                out = Tensor(n.shape);
                if (n.axis == -1) {
                    double s = 0.0;
                    for (double v : X.data) s += v;
                    out.data[0] = n.op == Op::ReduceMean ? s / static_cast<double>(X.numel()) : s;
                } else {
                    AxisSplit a = axis_split(X.shape, n.axis);
                    for (int64_t o = 0; o < a.outer; ++o)
                        for (int64_t q = 0; q < a.inner; ++q) {
                            double s = 0.0;
                            for (int64_t j = 0; j < a.n; ++j)
                                s += X.data[(o * a.n + j) * a.inner + q];
                            out.data[o * a.inner + q] =
                                n.op == Op::ReduceMean ? s / static_cast<double>(a.n) : s;
                        }
                }
                break;
            }
            case Op::ReduceMax: {
                const Tensor& X = in(0);
                out = Tensor(n.shape);
                auto& arg = r.scratch[id];
                arg.assign(static_cast<size_t>(out.numel()), -1);
                if (n.axis == -1) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t bi = -1;
                    for (int64_t i = 0; i < X.numel(); ++i)
                        if (X.data[i] > best) {
                            best = X.data[i];
                            bi = i;
                        }
                    out.data[0] = best;
                    arg[0] = bi;
                } else {
                    AxisSplit a = axis_split(X.shape, n.axis);
                    for (int64_t o = 0; o < a.outer; ++o)
                        for (int64_t q = 0; q < a.inner; ++q) {
                            double best = -std::numeric_limits<double>::infinity();
                            int64_t bi = -1;
                            for (int64_t j = 0; j < a.n; ++j) {
                                const int64_t src = (o * a.n + j) * a.inner + q;
                                if (X.data[src] > best) {
                                    best = X.data[src];
                                    bi = src;
                                }
                            }
                            out.data[o * a.inner + q] = best;
                            arg[static_cast<size_t>(o * a.inner + q)] = bi;
                        }
                }
                break;
            }
            case Op::Trilinear: {
                const Tensor& V = in(0);
                const Tensor& P = in(1);
                const int64_t C = V.shape[0], D = V.shape[1], H = V.shape[2], W = V.shape[3];
                const int64_t N = P.shape[0];
                out = Tensor(n.shape);
                for (int64_t i = 0; i < N; ++i) {
                    TriAxis tx = tri_axis(P.at(i, 0), D);
                    TriAxis ty = tri_axis(P.at(i, 1), H);
                    TriAxis tz = tri_axis(P.at(i, 2), W);
                    for (int a2 = 0; a2 < 2; ++a2)
                        for (int b2 = 0; b2 < 2; ++b2)
                            for (int c2 = 0; c2 < 2; ++c2) {
                                const double wgt = (a2 ? tx.f : 1.0 - tx.f) *
                                                   (b2 ? ty.f : 1.0 - ty.f) *
                                                   (c2 ? tz.f : 1.0 - tz.f);
                                if (wgt == 0.0) continue;
                                const int64_t xd = std::min(tx.i0 + a2, D - 1);
                                const int64_t yd = std::min(ty.i0 + b2, H - 1);
                                const int64_t zd = std::min(tz.i0 + c2, W - 1);
                                const int64_t base = (xd * H + yd) * W + zd;
                                for (int64_t c = 0; c < C; ++c)
                                    out.at(i, c) += wgt * V.data[c * D * H * W + base];
                            }
                }
                break;
            }
            case Op::KabschRotation: {
                KabschFwd f = kabsch_fit(in(0), in(1));
                out = Tensor({3, 3});
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) out.at(i, j) = f.R(i, j);
                r.scratch[id] = {f.degenerate ? 1 : 0};
                break;
            }
            case Op::StopGradient:
                out = in(0);
                break;
        }
        if (check_finite && !out.all_finite())
            fail(n, static_cast<int>(id), "non-finite values in output");
    }
    return r;
}

Tensor Graph::eval(Value v, const Bindings& b) const {
    Run r = run(b);
    return r.values[static_cast<size_t>(v.id)];
}

// ---- backward ----------------------------------------------------------------

std::map<std::string, Tensor> Graph::gradient(Value loss, const Bindings& b,
                                              const std::vector<std::string>& wrt) const {
    Run r = run(b);
    return gradient_from(r, loss, wrt);
}

std::map<std::string, Tensor> Graph::gradient_from(const Run& run, Value loss,
                                                   const std::vector<std::string>& wrt) const {
    const Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (numel_of(ln.shape) != 1)
        fail(ln, loss.id, "gradient requires a scalar loss, got " + shape_str(ln.shape));

    std::vector<Tensor> adj(nodes_.size());
    std::vector<char> seen(nodes_.size(), 0);
    auto grab = [&](int id) -> Tensor& {
        if (!seen[static_cast<size_t>(id)]) {
            adj[static_cast<size_t>(id)] = Tensor(nodes_[static_cast<size_t>(id)].shape);
            seen[static_cast<size_t>(id)] = 1;
        }
        return adj[static_cast<size_t>(id)];
    };
    grab(loss.id).data[0] = 1.0;

    for (int id = loss.id; id >= 0; --id) {
        if (!seen[static_cast<size_t>(id)]) continue;
        const Node& n = nodes_[static_cast<size_t>(id)];
        const Tensor& dy = adj[static_cast<size_t>(id)];
        const Tensor& y = run.values[static_cast<size_t>(id)];
        auto vin = [&](int k) -> const Tensor& {
            return run.values[static_cast<size_t>(n.inputs[static_cast<size_t>(k)])];
        };
        switch (n.op) {
            case Op::Input:
            case Op::Param:
            case Op::Constant:
            case Op::StopGradient:
                break;
            case Op::Add: {
                Tensor& da = grab(n.inputs[0]);
                Tensor& db = grab(n.inputs[1]);
                bcast_each(n.shape, vin(0).shape, vin(1).shape, [&](int64_t i, int64_t ao, int64_t bo) {
                    da.data[ao] += dy.data[i];
                    db.data[bo] += dy.data[i];
                });
                break;
            }
            case Op::Sub: {
                Tensor& da = grab(n.inputs[0]);
                Tensor& db = grab(n.inputs[1]);
                bcast_each(n.shape, vin(0).shape, vin(1).shape, [&](int64_t i, int64_t ao, int64_t bo) {
                    da.data[ao] += dy.data[i];
                    db.data[bo] -= dy.data[i];
                });
                break;
            }
            case Op::Mul: {
                const Tensor& A = vin(0);
                const Tensor& B = vin(1);
                Tensor& da = grab(n.inputs[0]);
                Tensor& db = grab(n.inputs[1]);
                bcast_each(n.shape, A.shape, B.shape, [&](int64_t i, int64_t ao, int64_t bo) {
                    da.data[ao] += dy.data[i] * B.data[bo];
                    db.data[bo] += dy.data[i] * A.data[ao];
                });
                break;
            }
            case Op::Div: {
                const Tensor& A = vin(0);
                const Tensor& B = vin(1);
                Tensor& da = grab(n.inputs[0]);
                Tensor& db = grab(n.inputs[1]);
                bcast_each(n.shape, A.shape, B.shape, [&](int64_t i, int64_t ao, int64_t bo) {
                    const double ib = 1.0 / B.data[bo];
                    da.data[ao] += dy.data[i] * ib;
                    db.data[bo] -= dy.data[i] * A.data[ao] * ib * ib;
                });
                break;
            }
            case Op::Neg: {
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i) da.data[i] -= dy.data[i];
                break;
            }
            case Op::Exp: {
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i) da.data[i] += dy.data[i] * y.data[i];
                break;
            }
            case Op::Log: {
                const Tensor& X = vin(0);
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i) da.data[i] += dy.data[i] / X.data[i];
                break;
            }
            case Op::Sqrt: {
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i)
                    da.data[i] += dy.data[i] * 0.5 / y.data[i];
                break;
            }
            case Op::Abs: {
                const Tensor& X = vin(0);
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i) {
                    const double s = X.data[i] > 0.0 ? 1.0 : (X.data[i] < 0.0 ? -1.0 : 0.0);
                    da.data[i] += dy.data[i] * s;
                }
                break;
            }
            case Op::Clamp: {
                const Tensor& X = vin(0);
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i)
                    if (X.data[i] > n.x0 && X.data[i] < n.x1) da.data[i] += dy.data[i];
                break;
            }
            case Op::Relu: {
                const Tensor& X = vin(0);
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i)
                    if (X.data[i] > 0.0) da.data[i] += dy.data[i];   // subgradient 0 at x == 0
                break;
            }
            case Op::Sigmoid: {
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i)
                    da.data[i] += dy.data[i] * y.data[i] * (1.0 - y.data[i]);
                break;
            }
            case Op::Softmax: {
                Tensor& da = grab(n.inputs[0]);
                AxisSplit a = axis_split(n.shape, n.axis);
                for (int64_t o = 0; o < a.outer; ++o)
                    for (int64_t q = 0; q < a.inner; ++q) {
                        const int64_t base = o * a.n * a.inner + q;
                        double dot = 0.0;
                        for (int64_t j = 0; j < a.n; ++j)
                            dot += dy.data[base + j * a.inner] * y.data[base + j * a.inner];
                        for (int64_t j = 0; j < a.n; ++j)
                            da.data[base + j * a.inner] +=
                                y.data[base + j * a.inner] * (dy.data[base + j * a.inner] - dot);
                    }
                break;
            }
            case Op::Matmul: {
                const Tensor& A = vin(0);
                const Tensor& B = vin(1);
                Tensor& da = grab(n.inputs[0]);
                Tensor& db = grab(n.inputs[1]);
                // dA += dY B^T ; dB += A^T dY
                mm_nt(dy.data.data(), B.data.data(), da.data.data(), A.shape[0], B.shape[1],
                      A.shape[1]);
                mm_tn(A.data.data(), dy.data.data(), db.data.data(), A.shape[1], A.shape[0],
                      B.shape[1]);
                break;
            }
            case Op::Transpose2d: {
                Tensor& da = grab(n.inputs[0]);
                const Tensor& X = vin(0);
                for (int64_t i = 0; i < X.shape[0]; ++i)
                    for (int64_t j = 0; j < X.shape[1]; ++j) da.at(i, j) += dy.at(j, i);
                break;
            }
            case Op::Reshape: {
                Tensor& da = grab(n.inputs[0]);
                for (int64_t i = 0; i < dy.numel(); ++i) da.data[i] += dy.data[i];
                break;
            }
            case Op::Concat: {
                AxisSplit a = axis_split(n.shape, n.axis);
                int64_t off = 0;
                for (int k = 0; k < static_cast<int>(n.inputs.size()); ++k) {
                    Tensor& da = grab(n.inputs[static_cast<size_t>(k)]);
                    const int64_t nk = da.shape[static_cast<size_t>(n.axis)];
                    for (int64_t o = 0; o < a.outer; ++o)
                        for (int64_t j = 0; j < nk * a.inner; ++j)
                            da.data[o * nk * a.inner + j] +=
                                dy.data[(o * a.n + off) * a.inner + j];
                    off += nk;
                }
                break;
            }
            case Op::GatherRows: {
                Tensor& da = grab(n.inputs[0]);
                const int64_t rs = da.numel() / da.shape[0];
                for (size_t k = 0; k < n.idx.size(); ++k)
                    for (int64_t j = 0; j < rs; ++j)
                        da.data[n.idx[k] * rs + j] += dy.data[static_cast<int64_t>(k) * rs + j];
                break;
            }
            case Op::ScatterMaxGrid: {
                Tensor& da = grab(n.inputs[0]);
                const auto& win = run.scratch[static_cast<size_t>(id)];
                const int64_t C = n.shape[0];
                const int64_t ncells = n.shape[1] * n.shape[2] * n.shape[3];
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t cell = 0; cell < ncells; ++cell) {
                        const int64_t w = win[static_cast<size_t>(c * ncells + cell)];
                        if (w >= 0) da.at(w, c) += dy.data[c * ncells + cell];
                    }
                break;
            }
            case Op::Conv3d: {
                const Tensor& X = vin(0);
                const Tensor& W = vin(1);
                Tensor& da = grab(n.inputs[0]);
                Tensor& db = grab(n.inputs[1]);
                ConvDims g = conv_dims(n, id, X.shape, W.shape, false);
                const int64_t CK = g.ci * g.k * g.k * g.k;
                const int64_t L = g.od * g.oh * g.ow;
                std::vector<double> col(static_cast<size_t>(CK * L));
                im2col3d(X.data.data(), g, col.data());
                // dW += dY col^T
                mm_nt(dy.data.data(), col.data(), db.data.data(), g.co, L, CK);
                // dcol = W^T dY ; dX += col2im(dcol)
                std::vector<double> dcol(static_cast<size_t>(CK * L), 0.0);
                mm_tn(W.data.data(), dy.data.data(), dcol.data(), CK, g.co, L);
                col2im3d(dcol.data(), g, da.data.data());
                break;
            }
            case Op::ConvTranspose3d: {
                const Tensor& X = vin(0);
                const Tensor& W = vin(1);
                Tensor& da = grab(n.inputs[0]);
                Tensor& db = grab(n.inputs[1]);
                ConvDims g = conv_dims(n, id, X.shape, W.shape, true);
                for (int64_t ci = 0; ci < g.ci; ++ci)
                    for (int64_t d = 0; d < g.d; ++d)
                        for (int64_t h = 0; h < g.h; ++h)
                            for (int64_t w = 0; w < g.w; ++w) {
                                const int64_t xi = ((ci * g.d + d) * g.h + h) * g.w + w;
                                const double xv = X.data[xi];
                                double acc = 0.0;
                                for (int64_t co = 0; co < g.co; ++co) {
                                    const double* wk =
                                        W.data.data() + ((ci * g.co + co) * g.k * g.k * g.k);
                                    double* dwk = db.data.data() +
                                                  ((ci * g.co + co) * g.k * g.k * g.k);
                                    const double* dyc =
                                        dy.data.data() + co * g.od * g.oh * g.ow;
                                    for (int64_t kd = 0; kd < g.k; ++kd) {
                                        const int64_t od = d * g.s - g.p + kd;
                                        if (od < 0 || od >= g.od) continue;
                                        for (int64_t kh = 0; kh < g.k; ++kh) {
                                            const int64_t oh = h * g.s - g.p + kh;
                                            if (oh < 0 || oh >= g.oh) continue;
                                            for (int64_t kw = 0; kw < g.k; ++kw) {
                                                const int64_t ow = w * g.s - g.p + kw;
                                                if (ow < 0 || ow >= g.ow) continue;
                                                const double dv =
                                                    dyc[(od * g.oh + oh) * g.ow + ow];
                                                acc += dv * wk[(kd * g.k + kh) * g.k + kw];
                                                dwk[(kd * g.k + kh) * g.k + kw] += dv * xv;
                                            }
                                        }
                                    }
                                }
                                da.data[xi] += acc;
                            }
                break;
            }
            case Op::MaxPool3d: {
                Tensor& da = grab(n.inputs[0]);
                const auto& arg = run.scratch[static_cast<size_t>(id)];
                for (int64_t i = 0; i < dy.numel(); ++i)
                    da.data[arg[static_cast<size_t>(i)]] += dy.data[i];
                break;
            }
            case Op::UpsampleNearest3d: {
                Tensor& da = grab(n.inputs[0]);
                const int64_t f = n.i0;
                const int64_t C = n.shape[0], oD = n.shape[1], oH = n.shape[2], oW = n.shape[3];
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t od = 0; od < oD; ++od)
                        for (int64_t oh = 0; oh < oH; ++oh)
                            for (int64_t ow = 0; ow < oW; ++ow)
                                da.data[((c * (oD / f) + od / f) * (oH / f) + oh / f) * (oW / f) +
                                        ow / f] += dy.data[((c * oD + od) * oH + oh) * oW + ow];
                break;
            }
            case Op::ReduceSum:
            case Op::ReduceMean: {
                const Tensor& X = vin(0);
                Tensor& da = grab(n.inputs[0]);
                if (n.axis == -1) {
                    const double s = n.op == Op::ReduceMean
                                         ? dy.data[0] / static_cast<double>(X.numel())
                                         : dy.data[0];
                    for (int64_t i = 0; i < X.numel(); ++i) da.data[i] += s;
                } else {
                    AxisSplit a = axis_split(X.shape, n.axis);
                    for (int64_t o = 0; o < a.outer; ++o)
                        for (int64_t q = 0; q < a.inner; ++q) {
                            double s = dy.data[o * a.inner + q];
                            if (n.op == Op::ReduceMean) s /= static_cast<double>(a.n);
                            for (int64_t j = 0; j < a.n; ++j)
                                da.data[(o * a.n + j) * a.inner + q] += s;
                        }
                }
                break;
            }
            case Op::ReduceMax: {
                Tensor& da = grab(n.inputs[0]);
                const auto& arg = run.scratch[static_cast<size_t>(id)];
                for (int64_t i = 0; i < dy.numel(); ++i)
                    if (arg[static_cast<size_t>(i)] >= 0)
                        da.data[arg[static_cast<size_t>(i)]] += dy.data[i];
                break;
            }
            case Op::Trilinear: {
                const Tensor& V = vin(0);
                const Tensor& P = vin(1);
                Tensor& dv = grab(n.inputs[0]);
                Tensor& dp = grab(n.inputs[1]);
                const int64_t C = V.shape[0], D = V.shape[1], H = V.shape[2], W = V.shape[3];
                const int64_t N = P.shape[0];
                for (int64_t i = 0; i < N; ++i) {
                    TriAxis t[3] = {tri_axis(P.at(i, 0), D), tri_axis(P.at(i, 1), H),
                                    tri_axis(P.at(i, 2), W)};
                    for (int a2 = 0; a2 < 2; ++a2)
                        for (int b2 = 0; b2 < 2; ++b2)
                            for (int c2 = 0; c2 < 2; ++c2) {
                                const double wx = a2 ? t[0].f : 1.0 - t[0].f;
                                const double wy = b2 ? t[1].f : 1.0 - t[1].f;
                                const double wz = c2 ? t[2].f : 1.0 - t[2].f;
                                const double sx = a2 ? 1.0 : -1.0;
                                const double sy = b2 ? 1.0 : -1.0;
                                const double sz = c2 ? 1.0 : -1.0;
                                const int64_t xd = std::min(t[0].i0 + a2, D - 1);
                                const int64_t yd = std::min(t[1].i0 + b2, H - 1);
                                const int64_t zd = std::min(t[2].i0 + c2, W - 1);
                                const int64_t base = (xd * H + yd) * W + zd;
                                for (int64_t c = 0; c < C; ++c) {
                                    const double g = dy.at(i, c);
                                    if (g == 0.0) continue;
                                    const double vv = V.data[c * D * H * W + base];
                                    dv.data[c * D * H * W + base] += g * wx * wy * wz;
                                    dp.at(i, 0) += g * vv * sx * wy * wz * t[0].dudx;
                                    dp.at(i, 1) += g * vv * wx * sy * wz * t[1].dudx;
                                    dp.at(i, 2) += g * vv * wx * wy * sz * t[2].dudx;
                                }
                            }
                }
                break;
            }
            case Op::KabschRotation: {
                const Tensor& S = vin(0);
                const Tensor& T = vin(1);
                KabschFwd f = kabsch_fit(S, T);
                if (f.degenerate) break;
                // Stop the gradient when singular values nearly coincide; the
                // SVD derivative blows up there.
                const double scale = std::max(1.0, f.sv[0]);
                bool gap_ok = true;
                for (int i = 0; i < 3 && gap_ok; ++i)
                    for (int j = i + 1; j < 3; ++j)
                        if (std::abs(f.sv[i] - f.sv[j]) < kRigidGapTol * scale) {
                            gap_ok = false;
                            break;
                        }
                if (!gap_ok) break;
                Eigen::Matrix3d GR;
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) GR(i, j) = dy.at(i, j);
                Eigen::Matrix3d Dm = Eigen::Matrix3d::Identity();
                Dm(2, 2) = f.det_sign;
                // R = V D U^T  =>  GV = GR U D, GU = GR^T V D
                Eigen::Matrix3d GV = GR * f.U * Dm;
                Eigen::Matrix3d GU = GR.transpose() * f.V * Dm;
                Eigen::Matrix3d Fm = Eigen::Matrix3d::Zero();
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j)
                        if (i != j) Fm(i, j) = 1.0 / (f.sv[j] * f.sv[j] - f.sv[i] * f.sv[i]);
                Eigen::Matrix3d Su = f.U.transpose() * GU;
                Eigen::Matrix3d Sv = f.V.transpose() * GV;
                Eigen::Matrix3d Ju = Fm.cwiseProduct(Su - Su.transpose());
                Eigen::Matrix3d Jv = Fm.cwiseProduct(Sv - Sv.transpose());
                Eigen::Matrix3d Sig = f.sv.asDiagonal();
                Eigen::Matrix3d GH = f.U * (Ju * Sig + Sig * Jv) * f.V.transpose();
                // H = Xc^T Yc with Xc, Yc the centered point sets.
                const int64_t m = S.shape[0];
                Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
                for (int64_t i = 0; i < m; ++i)
                    for (int j = 0; j < 3; ++j) {
                        cs[j] += S.at(i, j);
                        cd[j] += T.at(i, j);
                    }
                cs /= static_cast<double>(m);
                cd /= static_cast<double>(m);
                Tensor& ds = grab(n.inputs[0]);
                Tensor& dt = grab(n.inputs[1]);
                // dX = Yc GH^T and dY = Xc GH, then centering projects out the
                // per-column means.
                Eigen::Vector3d mean_dx = Eigen::Vector3d::Zero(), mean_dy = Eigen::Vector3d::Zero();
                std::vector<Eigen::Vector3d> dxs(static_cast<size_t>(m)), dys(static_cast<size_t>(m));
                for (int64_t i = 0; i < m; ++i) {
                    Eigen::Vector3d xc(S.at(i, 0) - cs[0], S.at(i, 1) - cs[1], S.at(i, 2) - cs[2]);
                    Eigen::Vector3d yc(T.at(i, 0) - cd[0], T.at(i, 1) - cd[1], T.at(i, 2) - cd[2]);
                    dxs[static_cast<size_t>(i)] = GH * yc;            // (Yc GH^T) row i
                    dys[static_cast<size_t>(i)] = GH.transpose() * xc; // (Xc GH) row i
                    mean_dx += dxs[static_cast<size_t>(i)];
                    mean_dy += dys[static_cast<size_t>(i)];
                }
                mean_dx /= static_cast<double>(m);
                mean_dy /= static_cast<double>(m);
                for (int64_t i = 0; i < m; ++i)
                    for (int j = 0; j < 3; ++j) {
                        ds.at(i, j) += dxs[static_cast<size_t>(i)][j] - mean_dx[j];
                        dt.at(i, j) += dys[static_cast<size_t>(i)][j] - mean_dy[j];
                    }
                break;
            }
        }
    }

    std::map<std::string, Tensor> out;
    for (const std::string& name : wrt) {
        auto it = leaves_.find(name);
        if (it == leaves_.end()) throw GraphError("gradient: unknown leaf '" + name + "'");
        const int id = it->second;
        out[name] = seen[static_cast<size_t>(id)] ? adj[static_cast<size_t>(id)]
                                                  : Tensor(nodes_[static_cast<size_t>(id)].shape);
    }
    return out;
}

}  // namespace tkd
