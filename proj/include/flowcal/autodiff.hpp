#pragma once

// Reverse-mode automatic differentiation on a static tape.
//
// A Graph is built once from a fixed op set; nodes are stored in
// topological order by construction. forward() evaluates every node in
// id order, backward() visits the exact reverse order and accumulates
// fan-out gradients by addition, so both passes are deterministic.

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowcal/tensor.hpp"

namespace flowcal {

using NodeId = int;

enum class Op {
    Input,
    Param,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv1d,
    Exp,
    Log,
    Tanh,
    Sum,
    SqNorm,
    Reshape,
    Concat,
    Slice,
    ScaleShift,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::MatMul: return "matmul";
        case Op::Conv1d: return "conv1d";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Tanh: return "tanh";
        case Op::Sum: return "sum";
        case Op::SqNorm: return "sqnorm";
        case Op::Reshape: return "reshape";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::ScaleShift: return "scale_shift";
    }
    return "?";
}

struct Node {
    Op op;
    NodeId a = -1;
    NodeId b = -1;
    Shape shape;
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool trainable = false;
    bool bound = false; // Input only: has a value been bound
    std::string name;   // Input/Param label
    int axis = 0;
    int64_t start = 0;
    int64_t len = 0;
    double sa = 1.0; // ScaleShift: y = sa*x + sb
    double sb = 0.0;
};

class Graph {
public:
    NodeId input(std::string name, Shape shape) {
        Node n;
        n.op = Op::Input;
        n.shape = std::move(shape);
        n.name = std::move(name);
        return push(std::move(n));
    }

    NodeId param(std::string name, Tensor init) {
        Node n;
        n.op = Op::Param;
        n.shape = init.shape();
        n.value = std::move(init);
        n.name = std::move(name);
        n.needs_grad = true;
        n.trainable = true;
        return push(std::move(n), /*alloc_value=*/false);
    }

    // Frozen leaf; never receives a gradient.
    NodeId constant(Tensor v) {
        Node n;
        n.op = Op::Const;
        n.shape = v.shape();
        n.value = std::move(v);
        return push(std::move(n), /*alloc_value=*/false);
    }

    NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }
    NodeId div(NodeId a, NodeId b) { return binary(Op::Div, a, b); }

    NodeId matmul(NodeId a, NodeId b) {
        const Node& na = at(a);
        const Node& nb = at(b);
        if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0])
            throw ValidationError(label_for(Op::MatMul, next_id()) + ": incompatible operands " +
                                  shape_str(na.shape) + " x " + shape_str(nb.shape));
        Node n;
        n.op = Op::MatMul;
        n.a = a;
        n.b = b;
        n.shape = {na.shape[0], nb.shape[1]};
        return push(std::move(n));
    }

    // Same-length zero-padded convolution of `x` along `axis` with an
    // odd-length rank-1 kernel.
    NodeId conv1d(NodeId x, NodeId kernel, int axis) {
        const Node& nx = at(x);
        const Node& nk = at(kernel);
        if (nk.shape.size() != 1 || nk.shape[0] % 2 == 0)
            throw ValidationError(label_for(Op::Conv1d, next_id()) +
                                  ": kernel must be rank-1 with odd length, got " + shape_str(nk.shape));
        if (axis < 0 || axis >= static_cast<int>(nx.shape.size()))
            throw ValidationError(label_for(Op::Conv1d, next_id()) + ": axis " + std::to_string(axis) +
                                  " out of range for " + shape_str(nx.shape));
        Node n;
        n.op = Op::Conv1d;
        n.a = x;
        n.b = kernel;
        n.axis = axis;
        n.shape = nx.shape;
        return push(std::move(n));
    }

    NodeId exp(NodeId a) { return unary(Op::Exp, a); }
    NodeId log(NodeId a) { return unary(Op::Log, a); }
    NodeId tanh(NodeId a) { return unary(Op::Tanh, a); }

    NodeId sum(NodeId a) {
        Node n;
        n.op = Op::Sum;
        n.a = a;
        n.shape = {1};
        return push(std::move(n));
    }

    NodeId sqnorm(NodeId a) {
        Node n;
        n.op = Op::SqNorm;
        n.a = a;
        n.shape = {1};
        return push(std::move(n));
    }

    NodeId reshape(NodeId a, Shape shape) {
        const Node& na = at(a);
        if (shape_numel(shape) != shape_numel(na.shape))
            throw ValidationError(label_for(Op::Reshape, next_id()) + ": " + shape_str(na.shape) +
                                  " -> " + shape_str(shape) + " changes element count");
        Node n;
        n.op = Op::Reshape;
        n.a = a;
        n.shape = std::move(shape);
        return push(std::move(n));
    }

    NodeId concat(NodeId a, NodeId b, int axis) {
        const Node& na = at(a);
        const Node& nb = at(b);
        if (na.shape.size() != nb.shape.size() || axis < 0 || axis >= static_cast<int>(na.shape.size()))
            throw ValidationError(label_for(Op::Concat, next_id()) + ": rank/axis mismatch " +
                                  shape_str(na.shape) + " vs " + shape_str(nb.shape));
        Shape out = na.shape;
        for (size_t i = 0; i < out.size(); ++i) {
            if (static_cast<int>(i) == axis) continue;
            if (na.shape[i] != nb.shape[i])
                throw ValidationError(label_for(Op::Concat, next_id()) + ": non-axis extents differ " +
                                      shape_str(na.shape) + " vs " + shape_str(nb.shape));
        }
        out[static_cast<size_t>(axis)] += nb.shape[static_cast<size_t>(axis)];
        Node n;
        n.op = Op::Concat;
        n.a = a;
        n.b = b;
        n.axis = axis;
        n.shape = std::move(out);
        return push(std::move(n));
    }

    NodeId slice(NodeId a, int axis, int64_t start, int64_t len) {
        const Node& na = at(a);
        if (axis < 0 || axis >= static_cast<int>(na.shape.size()) || start < 0 || len <= 0 ||
            start + len > na.shape[static_cast<size_t>(axis)])
            throw ValidationError(label_for(Op::Slice, next_id()) + ": range [" + std::to_string(start) +
                                  "," + std::to_string(start + len) + ") invalid for axis " +
                                  std::to_string(axis) + " of " + shape_str(na.shape));
        Shape out = na.shape;
        out[static_cast<size_t>(axis)] = len;
        Node n;
        n.op = Op::Slice;
        n.a = a;
        n.axis = axis;
        n.start = start;
        n.len = len;
        n.shape = std::move(out);
        return push(std::move(n));
    }

    NodeId scale_shift(NodeId a, double scale, double shift) {
        Node n;
        n.op = Op::ScaleShift;
        n.a = a;
        n.sa = scale;
        n.sb = shift;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    void bind(const std::string& name, const Tensor& v) {
        NodeId id = find(name);
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.op != Op::Input) throw ValidationError("bind: node '" + name + "' is not an input");
        if (v.shape() != n.shape)
            throw ValidationError("bind: '" + name + "' expects " + shape_str(n.shape) + ", got " +
                                  shape_str(v.shape()));
        n.value = v;
        n.bound = true;
    }

    // Evaluates every node in id order; caches values on the nodes.
    void forward() {
        for (size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            switch (n.op) {
                case Op::Input:
                    if (!n.bound)
                        throw ValidationError("forward: input '" + n.name + "' has no bound value");
                    continue;
                case Op::Param:
                case Op::Const:
                    continue;
                default:
                    break;
            }
            eval_node(n);
            if (!n.value.all_finite())
                throw DivergenceError("forward: non-finite value at " + node_label(static_cast<NodeId>(i)));
        }
        evaluated_ = true;
    }

    // Reverse pass from a scalar loss node. Parameters not reached by the
    // loss keep zero gradients.
    void backward(NodeId loss) {
        if (!evaluated_) throw ValidationError("backward: forward() has not run");
        Node& ln = at_mut(loss);
        if (shape_numel(ln.shape) != 1)
            throw ValidationError("backward: loss must be scalar, " + node_label(loss) + " has shape " +
                                  shape_str(ln.shape));
        for (Node& n : nodes_)
            if (n.needs_grad) {
                if (n.grad.shape() != n.shape) n.grad = Tensor(n.shape);
                else n.grad.fill(0.0);
            }
        if (!ln.needs_grad) return; // loss independent of every parameter
        ln.grad[0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || n.op == Op::Param || n.op == Op::Input || n.op == Op::Const) continue;
            propagate(n);
        }
    }

    const Tensor& value(NodeId id) const { return at(id).value; }
    const Tensor& grad(NodeId id) const { return at(id).grad; }
    Tensor& param_value(NodeId id) {
        Node& n = at_mut(id);
        if (n.op != Op::Param) throw ValidationError("param_value: " + node_label(id) + " is not a param");
        return n.value;
    }

    NodeId find(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ValidationError("graph: no node named '" + name + "'");
        return it->second;
    }

    std::vector<NodeId> trainable_params() const {
        std::vector<NodeId> ids;
        for (size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].trainable) ids.push_back(static_cast<NodeId>(i));
        return ids;
    }

    const Node& at(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }

    std::string node_label(NodeId id) const {
        const Node& n = at(id);
        std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op);
        if (!n.name.empty()) s += " '" + n.name + "'";
        return s + ")";
    }

private:
    Node& at_mut(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    NodeId next_id() const { return static_cast<NodeId>(nodes_.size()); }

    static std::string label_for(Op op, NodeId id) {
        return "node #" + std::to_string(id) + " (" + std::string(op_name(op)) + ")";
    }

    NodeId push(Node n, bool alloc_value = true) {
        if (n.a >= 0 && at(n.a).needs_grad) n.needs_grad = true;
        if (n.b >= 0 && at(n.b).needs_grad) n.needs_grad = true;
        if (alloc_value) n.value = Tensor(n.shape);
        if (!n.name.empty()) {
            if (by_name_.count(n.name))
                throw ValidationError("graph: duplicate node name '" + n.name + "'");
            by_name_[n.name] = next_id();
        }
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId unary(Op op, NodeId a) {
        Node n;
        n.op = op;
        n.a = a;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    // Elementwise binary ops accept equal shapes, or a second operand whose
    // shape matches the trailing extents of the first (leading extents of 1
    // ignored); the operand is then repeated over the leading block.
    static int64_t broadcast_inner(const Shape& a, const Shape& b) {
        if (a == b) return shape_numel(a);
        size_t bi = 0;
        while (bi < b.size() && b[bi] == 1) ++bi;
        const size_t btail = b.size() - bi;
        if (btail > a.size()) return -1;
        for (size_t i = 0; i < btail; ++i)
            if (a[a.size() - btail + i] != b[bi + i]) return -1;
        int64_t inner = 1;
        for (size_t i = bi; i < b.size(); ++i) inner *= b[i];
        return inner;
    }

    NodeId binary(Op op, NodeId a, NodeId b) {
        const Node& na = at(a);
        const Node& nb = at(b);
        if (broadcast_inner(na.shape, nb.shape) < 0)
            throw ValidationError(label_for(op, next_id()) + ": shapes " + shape_str(na.shape) + " vs " +
                                  shape_str(nb.shape) + " are not compatible");
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.shape = na.shape;
        return push(std::move(n));
    }

    void eval_node(Node& n) {
        const Tensor* va = n.a >= 0 ? &at(n.a).value : nullptr;
        const Tensor* vb = n.b >= 0 ? &at(n.b).value : nullptr;
        switch (n.op) {
            case Op::Add:
            case Op::Sub:
            case Op::Mul:
            case Op::Div: {
                const int64_t inner = broadcast_inner(at(n.a).shape, at(n.b).shape);
                const int64_t total = va->numel();
                const double* pa = va->data();
                double* po = n.value.data();
                for (int64_t base = 0; base < total; base += inner) {
                    const double* pb = vb->data();
                    const double* pab = pa + base;
                    double* pob = po + base;
                    switch (n.op) {
                        case Op::Add:
                            for (int64_t i = 0; i < inner; ++i) pob[i] = pab[i] + pb[i];
                            break;
                        case Op::Sub:
                            for (int64_t i = 0; i < inner; ++i) pob[i] = pab[i] - pb[i];
                            break;
                        case Op::Mul:
                            for (int64_t i = 0; i < inner; ++i) pob[i] = pab[i] * pb[i];
                            break;
                        default:
                            for (int64_t i = 0; i < inner; ++i) pob[i] = pab[i] / pb[i];
                            break;
                    }
                }
                break;
            }
            case Op::MatMul:
                detail::matmul(*va, *vb, n.value);
                break;
            case Op::Conv1d:
                detail::conv1d(*va, *vb, n.axis, n.value);
                break;
            case Op::Exp:
                for (int64_t i = 0; i < va->numel(); ++i) n.value[i] = std::exp((*va)[i]);
                break;
            case Op::Log:
                for (int64_t i = 0; i < va->numel(); ++i) n.value[i] = std::log((*va)[i]);
                break;
            case Op::Tanh:
                for (int64_t i = 0; i < va->numel(); ++i) n.value[i] = std::tanh((*va)[i]);
                break;
            case Op::Sum: {
                double s = 0.0;
                for (int64_t i = 0; i < va->numel(); ++i) s += (*va)[i];
                n.value[0] = s;
                break;
            }
            case Op::SqNorm: {
                double s = 0.0;
                for (int64_t i = 0; i < va->numel(); ++i) s += (*va)[i] * (*va)[i];
                n.value[0] = s;
                break;
            }
            case Op::Reshape:
                n.value = va->reshaped(n.shape);
                break;
            case Op::Concat: {
                const Shape& sa = at(n.a).shape;
                copy_concat(*va, *vb, n.axis, sa[static_cast<size_t>(n.axis)], n.value);
                break;
            }
            case Op::Slice:
                copy_slice(*va, n.axis, n.start, n.len, n.value);
                break;
            case Op::ScaleShift:
                for (int64_t i = 0; i < va->numel(); ++i) n.value[i] = n.sa * (*va)[i] + n.sb;
                break;
            default:
                break;
        }
    }

    void propagate(Node& n) {
        const Tensor& g = n.grad;
        Node* ia = n.a >= 0 ? &at_mut(n.a) : nullptr;
        Node* ib = n.b >= 0 ? &at_mut(n.b) : nullptr;
        const bool wa = ia && ia->needs_grad;
        const bool wb = ib && ib->needs_grad;
        switch (n.op) {
            case Op::Add:
            case Op::Sub:
            case Op::Mul:
            case Op::Div: {
                const int64_t inner = broadcast_inner(ia->shape, ib->shape);
                const int64_t total = g.numel();
                const double* pg = g.data();
                const double* pa = ia->value.data();
                const double* pb = ib->value.data();
                if (wa) {
                    double* da = ia->grad.data();
                    for (int64_t base = 0; base < total; base += inner) {
                        switch (n.op) {
                            case Op::Add:
                            case Op::Sub:
                                for (int64_t i = 0; i < inner; ++i) da[base + i] += pg[base + i];
                                break;
                            case Op::Mul:
                                for (int64_t i = 0; i < inner; ++i) da[base + i] += pg[base + i] * pb[i];
                                break;
                            default:
                                for (int64_t i = 0; i < inner; ++i) da[base + i] += pg[base + i] / pb[i];
                                break;
                        }
                    }
                }
                if (wb) {
                    double* db = ib->grad.data();
                    for (int64_t base = 0; base < total; base += inner) {
                        switch (n.op) {
                            case Op::Add:
                                for (int64_t i = 0; i < inner; ++i) db[i] += pg[base + i];
                                break;
                            case Op::Sub:
                                for (int64_t i = 0; i < inner; ++i) db[i] -= pg[base + i];
                                break;
                            case Op::Mul:
                                for (int64_t i = 0; i < inner; ++i) db[i] += pg[base + i] * pa[base + i];
                                break;
                            default:
                                for (int64_t i = 0; i < inner; ++i)
                                    db[i] -= pg[base + i] * pa[base + i] / (pb[i] * pb[i]);
                                break;
                        }
                    }
                }
                break;
            }
            case Op::MatMul:
                if (wa) detail::matmul_acc_nt(g, ib->value, ia->grad);
                if (wb) detail::matmul_acc_tn(ia->value, g, ib->grad);
                break;
            case Op::Conv1d: {
                if (wa) {
                    Tensor gx(ia->shape);
                    detail::conv1d_adjoint(g, ib->value, n.axis, gx);
                    for (int64_t i = 0; i < gx.numel(); ++i) ia->grad[i] += gx[i];
                }
                if (wb) conv1d_kernel_grad(ia->value, g, n.axis, ib->grad);
                break;
            }
            case Op::Exp:
                if (wa)
                    for (int64_t i = 0; i < g.numel(); ++i) ia->grad[i] += g[i] * n.value[i];
                break;
            case Op::Log:
                if (wa)
                    for (int64_t i = 0; i < g.numel(); ++i) ia->grad[i] += g[i] / ia->value[i];
                break;
            case Op::Tanh:
                if (wa)
                    for (int64_t i = 0; i < g.numel(); ++i)
                        ia->grad[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
                break;
            case Op::Sum:
                if (wa) {
                    const double gv = g[0];
                    for (int64_t i = 0; i < ia->grad.numel(); ++i) ia->grad[i] += gv;
                }
                break;
            case Op::SqNorm:
                if (wa) {
                    const double gv = 2.0 * g[0];
                    for (int64_t i = 0; i < ia->grad.numel(); ++i) ia->grad[i] += gv * ia->value[i];
                }
                break;
            case Op::Reshape:
                if (wa)
                    for (int64_t i = 0; i < g.numel(); ++i) ia->grad[i] += g[i];
                break;
            case Op::Concat: {
                const int64_t alen = ia->shape[static_cast<size_t>(n.axis)];
                if (wa) acc_slice_of(g, n.axis, 0, alen, ia->grad);
                if (wb) acc_slice_of(g, n.axis, alen, ib->shape[static_cast<size_t>(n.axis)], ib->grad);
                break;
            }
            case Op::Slice:
                if (wa) acc_scatter_slice(g, n.axis, n.start, ia->grad);
                break;
            case Op::ScaleShift:
                if (wa)
                    for (int64_t i = 0; i < g.numel(); ++i) ia->grad[i] += n.sa * g[i];
                break;
            default:
                break;
        }
    }

    // --- data movement helpers (outer x axis x inner traversal) ---

    static void axis_spans(const Shape& s, int axis, int64_t& outer, int64_t& inner) {
        outer = 1;
        inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
        for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
    }

    static void copy_concat(const Tensor& a, const Tensor& b, int axis, int64_t alen, Tensor& out) {
        int64_t outer, inner;
        axis_spans(out.shape(), axis, outer, inner);
        const int64_t olen = out.shape()[static_cast<size_t>(axis)];
        const int64_t blen = olen - alen;
        for (int64_t o = 0; o < outer; ++o) {
            double* ob = out.data() + o * olen * inner;
            const double* pa = a.data() + o * alen * inner;
            const double* pb = b.data() + o * blen * inner;
            for (int64_t i = 0; i < alen * inner; ++i) ob[i] = pa[i];
            for (int64_t i = 0; i < blen * inner; ++i) ob[alen * inner + i] = pb[i];
        }
    }

    static void copy_slice(const Tensor& a, int axis, int64_t start, int64_t len, Tensor& out) {
        int64_t outer, inner;
        axis_spans(a.shape(), axis, outer, inner);
        const int64_t alen = a.shape()[static_cast<size_t>(axis)];
        for (int64_t o = 0; o < outer; ++o) {
            const double* pa = a.data() + (o * alen + start) * inner;
            double* po = out.data() + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) po[i] = pa[i];
        }
    }

    // acc += slice of g (used for concat backward).
    static void acc_slice_of(const Tensor& g, int axis, int64_t start, int64_t len, Tensor& acc) {
        int64_t outer, inner;
        axis_spans(g.shape(), axis, outer, inner);
        const int64_t glen = g.shape()[static_cast<size_t>(axis)];
        for (int64_t o = 0; o < outer; ++o) {
            const double* pg = g.data() + (o * glen + start) * inner;
            double* pa = acc.data() + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) pa[i] += pg[i];
        }
    }

    // acc[slice range] += g (used for slice backward).
    static void acc_scatter_slice(const Tensor& g, int axis, int64_t start, Tensor& acc) {
        int64_t outer, inner;
        axis_spans(acc.shape(), axis, outer, inner);
        const int64_t alen = acc.shape()[static_cast<size_t>(axis)];
        const int64_t len = g.shape()[static_cast<size_t>(axis)];
        for (int64_t o = 0; o < outer; ++o) {
            const double* pg = g.data() + o * len * inner;
            double* pa = acc.data() + (o * alen + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) pa[i] += pg[i];
        }
    }

    // dk[j] = sum over positions of g[t] * x[t-j].
    static void conv1d_kernel_grad(const Tensor& x, const Tensor& g, int axis, Tensor& dk) {
        int64_t outer, inner;
        axis_spans(x.shape(), axis, outer, inner);
        const int64_t len = x.shape()[static_cast<size_t>(axis)];
        const int64_t h = (dk.numel() - 1) / 2;
        for (int64_t j = -h; j <= h; ++j) {
            double s = 0.0;
            for (int64_t o = 0; o < outer; ++o) {
                const double* xb = x.data() + o * len * inner;
                const double* gb = g.data() + o * len * inner;
                const int64_t tlo = std::max<int64_t>(0, j);
                const int64_t thi = std::min<int64_t>(len - 1, len - 1 + j);
                for (int64_t t = tlo; t <= thi; ++t) {
                    const double* xrow = xb + (t - j) * inner;
                    const double* grow = gb + t * inner;
                    for (int64_t c = 0; c < inner; ++c) s += grow[c] * xrow[c];
                }
            }
            dk[j + h] += s;
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, NodeId> by_name_;
    bool evaluated_ = false;
};

// Central-difference gradient oracle, independent of the tape above:
//   g_i = (fn(p + step*e_i) - fn(p - step*e_i)) / (2*step).
inline std::vector<Tensor> fd_gradient(const std::function<double(const std::vector<Tensor>&)>& fn,
                                       std::vector<Tensor> params, double step) {
    if (!(step > 0.0)) throw ValidationError("fd_gradient: step must be positive");
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor g(params[p].shape());
        for (int64_t i = 0; i < params[p].numel(); ++i) {
            const double orig = params[p][i];
            params[p][i] = orig + step;
            const double fp = fn(params);
            params[p][i] = orig - step;
            const double fm = fn(params);
            params[p][i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw DivergenceError("fd_gradient: non-finite function value");
            g[i] = (fp - fm) / (2.0 * step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

} // namespace flowcal
