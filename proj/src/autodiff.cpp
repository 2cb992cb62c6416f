#include "fedlap/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "fedlap/kernels.hpp"

namespace fedlap {

const Tensor& Value::tensor() const {
    if (!valid()) throw TapeError("Value::tensor on invalid handle");
    return tape->value_of(id);
}

const Shape& Value::shape() const { return tensor().shape(); }

const char* Tape::op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Sum: return "sum";
        case Op::Broadcast: return "broadcast";
        case Op::RowSum: return "rowsum";
        case Op::RowBroadcast: return "rowbroadcast";
        case Op::ColSum: return "colsum";
        case Op::ColBroadcast: return "colbroadcast";
        case Op::ChanSum: return "chansum";
        case Op::ChanBroadcast: return "chanbroadcast";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Relu: return "relu";
        case Op::ReluMask: return "relu_mask";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Reciprocal: return "reciprocal";
        case Op::Sqrt: return "sqrt";
        case Op::RowMax: return "rowmax";
        case Op::Conv2d: return "conv2d";
        case Op::ConvDx: return "conv2d_input_grad";
        case Op::ConvDw: return "conv2d_weight_grad";
        case Op::AvgPool2: return "avgpool2";
        case Op::Unpool2: return "unpool2";
        case Op::Reshape: return "reshape";
        case Op::Detach: return "detach";
        case Op::RowGather: return "row_gather";
        case Op::RowScatter: return "row_scatter";
    }
    return "?";
}

void Tape::fail(const Node& n, const std::string& msg) const {
    std::string where = std::string(op_name(n.op));
    if (!n.name.empty()) where += " '" + n.name + "'";
    throw TapeError("node " + std::to_string(nodes_.size()) + " (" + where + "): " + msg);
}

namespace {

bool cuts_grad(Tape::Op op) {
    using Op = Tape::Op;
    return op == Op::Constant || op == Op::Detach || op == Op::ReluMask || op == Op::RowMax;
}

void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2)
        throw TapeError(std::string(what) + ": expected rank-2 tensor, got " +
                        shape_str(t.shape()));
}

void require_rank4(const Tensor& t, const char* what) {
    if (t.rank() != 4)
        throw TapeError(std::string(what) + ": expected rank-4 tensor, got " +
                        shape_str(t.shape()));
}

}  // namespace

Value Tape::push(Node n) {
    if (n.op == Op::Leaf) {
        n.requires_grad = true;
    } else if (cuts_grad(n.op)) {
        n.requires_grad = false;
    } else {
        bool rg = false;
        if (n.in0 >= 0) rg = rg || nodes_[static_cast<size_t>(n.in0)].requires_grad;
        if (n.in1 >= 0) rg = rg || nodes_[static_cast<size_t>(n.in1)].requires_grad;
        n.requires_grad = rg;
    }
    if (n.op != Op::Leaf && n.op != Op::Constant) exec(n);
    nodes_.push_back(std::move(n));
    return wrap(static_cast<int>(nodes_.size()) - 1);
}

// Computes n.value from its input nodes. Shared by the eager builders and
// replay(); all shape errors are raised here so both paths agree.
void Tape::exec(Node& n) {
    const Tensor* a = n.in0 >= 0 ? &nodes_[static_cast<size_t>(n.in0)].value : nullptr;
    const Tensor* b = n.in1 >= 0 ? &nodes_[static_cast<size_t>(n.in1)].value : nullptr;
    switch (n.op) {
        case Op::Leaf:
        case Op::Constant:
            break;
        case Op::Add:
        case Op::Sub:
        case Op::Mul: {
            if (!a->same_shape(*b))
                fail(n, "shape mismatch " + shape_str(a->shape()) + " vs " +
                            shape_str(b->shape()));
            Tensor out(a->shape());
            if (n.op == Op::Add)
                kernels::ewise_add(a->data(), b->data(), out.data(), out.numel());
            else if (n.op == Op::Sub)
                kernels::ewise_sub(a->data(), b->data(), out.data(), out.numel());
            else
                kernels::ewise_mul(a->data(), b->data(), out.data(), out.numel());
            n.value = std::move(out);
            break;
        }
        case Op::Scale: {
            Tensor out(a->shape());
            kernels::ewise_scale(a->data(), n.cval, out.data(), out.numel());
            n.value = std::move(out);
            break;
        }
        case Op::Sum: {
            double acc = 0.0;
            for (int64_t i = 0; i < a->numel(); ++i) acc += (*a)[i];
            n.value = Tensor::scalar(acc);
            break;
        }
        case Op::Broadcast: {
            if (a->numel() != 1) fail(n, "broadcast source must be scalar");
            n.value = Tensor::full(n.aux_shape, (*a)[0]);
            break;
        }
        case Op::RowSum: {
            require_rank2(*a, "rowsum");
            const int64_t r = a->dim(0), c = a->dim(1);
            Tensor out({r});
            for (int64_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < c; ++j) acc += (*a)[i * c + j];
                out[i] = acc;
            }
            n.value = std::move(out);
            break;
        }
        case Op::RowBroadcast: {
            if (a->rank() != 1) fail(n, "rowbroadcast source must be rank-1");
            const int64_t r = a->dim(0), c = n.aux_shape[1];
            Tensor out({r, c});
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) out[i * c + j] = (*a)[i];
            n.value = std::move(out);
            break;
        }
        case Op::ColSum: {
            require_rank2(*a, "colsum");
            const int64_t r = a->dim(0), c = a->dim(1);
            Tensor out({c});
            for (int64_t j = 0; j < c; ++j) {
                double acc = 0.0;
                for (int64_t i = 0; i < r; ++i) acc += (*a)[i * c + j];
                out[j] = acc;
            }
            n.value = std::move(out);
            break;
        }
        case Op::ColBroadcast: {
            if (a->rank() != 1) fail(n, "colbroadcast source must be rank-1");
            const int64_t r = n.aux_shape[0], c = a->dim(0);
            Tensor out({r, c});
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) out[i * c + j] = (*a)[j];
            n.value = std::move(out);
            break;
        }
        case Op::ChanSum: {
            require_rank4(*a, "chansum");
            const int64_t bsz = a->dim(0), ch = a->dim(1), plane = a->dim(2) * a->dim(3);
            Tensor out({ch});
            for (int64_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (int64_t i = 0; i < bsz; ++i) {
                    const double* p = a->data() + (i * ch + c) * plane;
                    for (int64_t q = 0; q < plane; ++q) acc += p[q];
                }
                out[c] = acc;
            }
            n.value = std::move(out);
            break;
        }
        case Op::ChanBroadcast: {
            if (a->rank() != 1) fail(n, "chanbroadcast source must be rank-1");
            const Shape& s = n.aux_shape;
            if (s.size() != 4 || s[1] != a->dim(0))
                fail(n, "chanbroadcast target " + shape_str(s) + " incompatible with " +
                            shape_str(a->shape()));
            Tensor out(s);
            const int64_t plane = s[2] * s[3];
            for (int64_t i = 0; i < s[0]; ++i)
                for (int64_t c = 0; c < s[1]; ++c) {
                    double* p = out.data() + (i * s[1] + c) * plane;
                    for (int64_t q = 0; q < plane; ++q) p[q] = (*a)[c];
                }
            n.value = std::move(out);
            break;
        }
        case Op::MatMul: {
            require_rank2(*a, "matmul lhs");
            require_rank2(*b, "matmul rhs");
            if (a->dim(1) != b->dim(0))
                fail(n, "inner extents differ: " + shape_str(a->shape()) + " x " +
                            shape_str(b->shape()));
            Tensor out({a->dim(0), b->dim(1)});
            kernels::matmul(a->data(), b->data(), out.data(), a->dim(0), a->dim(1), b->dim(1));
            n.value = std::move(out);
            break;
        }
        case Op::Transpose: {
            require_rank2(*a, "transpose");
            Tensor out({a->dim(1), a->dim(0)});
            kernels::transpose(a->data(), out.data(), a->dim(0), a->dim(1));
            n.value = std::move(out);
            break;
        }
        case Op::Relu: {
            Tensor out(a->shape());
            kernels::relu(a->data(), out.data(), out.numel());
            n.value = std::move(out);
            break;
        }
        case Op::ReluMask: {
            Tensor out(a->shape());
            kernels::relu_mask(a->data(), out.data(), out.numel());
            n.value = std::move(out);
            break;
        }
        case Op::Exp: {
            Tensor out(a->shape());
            for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp((*a)[i]);
            n.value = std::move(out);
            break;
        }
        case Op::Log: {
            Tensor out(a->shape());
            for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log((*a)[i]);
            n.value = std::move(out);
            break;
        }
        case Op::Reciprocal: {
            Tensor out(a->shape());
            for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (*a)[i];
            n.value = std::move(out);
            break;
        }
        case Op::Sqrt: {
            Tensor out(a->shape());
            for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt((*a)[i]);
            n.value = std::move(out);
            break;
        }
        case Op::RowMax: {
            require_rank2(*a, "rowmax");
            const int64_t r = a->dim(0), c = a->dim(1);
            Tensor out({r});
            for (int64_t i = 0; i < r; ++i) {
                double m = (*a)[i * c];
                for (int64_t j = 1; j < c; ++j) m = std::max(m, (*a)[i * c + j]);
                out[i] = m;
            }
            n.value = std::move(out);
            break;
        }
        case Op::Conv2d: {
            require_rank4(*a, "conv2d input");
            require_rank4(*b, "conv2d weight");
            if (b->dim(2) != 3 || b->dim(3) != 3) fail(n, "conv2d kernel must be 3x3");
            if (a->dim(1) != b->dim(1))
                fail(n, "channel mismatch: " + shape_str(a->shape()) + " vs " +
                            shape_str(b->shape()));
            Tensor out({a->dim(0), b->dim(0), a->dim(2), a->dim(3)});
            kernels::conv2d_fwd(a->data(), b->data(), out.data(), a->dim(0), a->dim(1),
                                a->dim(2), a->dim(3), b->dim(0));
            n.value = std::move(out);
            break;
        }
        case Op::ConvDx: {
            require_rank4(*a, "conv2d_input_grad gy");
            require_rank4(*b, "conv2d_input_grad weight");
            if (a->dim(1) != b->dim(0))
                fail(n, "output-channel mismatch: " + shape_str(a->shape()) + " vs " +
                            shape_str(b->shape()));
            Tensor out({a->dim(0), b->dim(1), a->dim(2), a->dim(3)});
            kernels::conv2d_dx(a->data(), b->data(), out.data(), a->dim(0), b->dim(1),
                               a->dim(2), a->dim(3), a->dim(1));
            n.value = std::move(out);
            break;
        }
        case Op::ConvDw: {
            require_rank4(*a, "conv2d_weight_grad x");
            require_rank4(*b, "conv2d_weight_grad gy");
            if (a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2) || a->dim(3) != b->dim(3))
                fail(n, "spatial/batch mismatch: " + shape_str(a->shape()) + " vs " +
                            shape_str(b->shape()));
            Tensor out({b->dim(1), a->dim(1), 3, 3});
            kernels::conv2d_dw(a->data(), b->data(), out.data(), a->dim(0), a->dim(1),
                               a->dim(2), a->dim(3), b->dim(1));
            n.value = std::move(out);
            break;
        }
        case Op::AvgPool2: {
            require_rank4(*a, "avgpool2");
            const int64_t oh = a->dim(2) / 2, ow = a->dim(3) / 2;
            if (oh == 0 || ow == 0) fail(n, "avgpool2 input too small: " + shape_str(a->shape()));
            Tensor out({a->dim(0), a->dim(1), oh, ow});
            kernels::avgpool2(a->data(), out.data(), a->dim(0) * a->dim(1), a->dim(2), a->dim(3));
            n.value = std::move(out);
            break;
        }
        case Op::Unpool2: {
            require_rank4(*a, "unpool2");
            const int64_t oh = n.aux_shape[2], ow = n.aux_shape[3];
            if (a->dim(2) != oh / 2 || a->dim(3) != ow / 2)
                fail(n, "unpool2 target " + shape_str(n.aux_shape) + " incompatible with " +
                            shape_str(a->shape()));
            Tensor out({a->dim(0), a->dim(1), oh, ow});
            kernels::unpool2(a->data(), out.data(), a->dim(0) * a->dim(1), oh, ow);
            n.value = std::move(out);
            break;
        }
        case Op::Reshape: {
            if (shape_numel(n.aux_shape) != a->numel())
                fail(n, "reshape " + shape_str(a->shape()) + " -> " + shape_str(n.aux_shape) +
                            " changes element count");
            n.value = a->reshaped(n.aux_shape);
            break;
        }
        case Op::Detach: {
            n.value = *a;
            break;
        }
        case Op::RowGather: {
            require_rank2(*a, "row_gather");
            const int64_t c = a->dim(1);
            Tensor out({static_cast<int64_t>(n.aux_rows.size()), c});
            for (size_t i = 0; i < n.aux_rows.size(); ++i) {
                const int64_t r = n.aux_rows[i];
                if (r < 0 || r >= a->dim(0)) fail(n, "row index out of range");
                std::copy(a->data() + r * c, a->data() + (r + 1) * c,
                          out.data() + static_cast<int64_t>(i) * c);
            }
            n.value = std::move(out);
            break;
        }
        case Op::RowScatter: {
            require_rank2(*a, "row_scatter");
            if (a->dim(0) != static_cast<int64_t>(n.aux_rows.size()))
                fail(n, "row count does not match index list");
            const int64_t c = a->dim(1);
            Tensor out({n.aux_shape[0], c});
            for (size_t i = 0; i < n.aux_rows.size(); ++i) {
                const int64_t r = n.aux_rows[i];
                if (r < 0 || r >= n.aux_shape[0]) fail(n, "row index out of range");
                std::copy(a->data() + static_cast<int64_t>(i) * c,
                          a->data() + static_cast<int64_t>(i + 1) * c, out.data() + r * c);
            }
            n.value = std::move(out);
            break;
        }
    }
}

Value Tape::leaf(Tensor v, std::string name) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    n.name = std::move(name);
    return push(std::move(n));
}

Value Tape::constant(Tensor v, std::string name) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(v);
    n.name = std::move(name);
    return push(std::move(n));
}

namespace {
void check_same_tape(const Tape* t, std::initializer_list<Value> vs) {
    for (const Value& v : vs)
        if (!v.valid() || v.tape != t) throw TapeError("value belongs to a different tape");
}
}  // namespace

#define FEDLAP_BINARY(fn, opk)                              \
    Value Tape::fn(Value a, Value b) {                      \
        check_same_tape(this, {a, b});                      \
        Node n;                                             \
        n.op = Op::opk;                                     \
        n.in0 = a.id;                                       \
        n.in1 = b.id;                                       \
        return push(std::move(n));                          \
    }

FEDLAP_BINARY(add, Add)
FEDLAP_BINARY(sub, Sub)
FEDLAP_BINARY(mul, Mul)
FEDLAP_BINARY(matmul, MatMul)
FEDLAP_BINARY(conv2d, Conv2d)
FEDLAP_BINARY(conv2d_input_grad, ConvDx)
FEDLAP_BINARY(conv2d_weight_grad, ConvDw)
#undef FEDLAP_BINARY

#define FEDLAP_UNARY(fn, opk)                               \
    Value Tape::fn(Value a) {                               \
        check_same_tape(this, {a});                         \
        Node n;                                             \
        n.op = Op::opk;                                     \
        n.in0 = a.id;                                       \
        return push(std::move(n));                          \
    }

FEDLAP_UNARY(sum, Sum)
FEDLAP_UNARY(rowsum, RowSum)
FEDLAP_UNARY(colsum, ColSum)
FEDLAP_UNARY(chansum, ChanSum)
FEDLAP_UNARY(transpose, Transpose)
FEDLAP_UNARY(relu, Relu)
FEDLAP_UNARY(relu_mask, ReluMask)
FEDLAP_UNARY(exp, Exp)
FEDLAP_UNARY(log, Log)
FEDLAP_UNARY(reciprocal, Reciprocal)
FEDLAP_UNARY(sqrt, Sqrt)
FEDLAP_UNARY(rowmax, RowMax)
FEDLAP_UNARY(avgpool2, AvgPool2)
FEDLAP_UNARY(detach, Detach)
#undef FEDLAP_UNARY

Value Tape::scale(Value a, double c) {
    check_same_tape(this, {a});
    Node n;
    n.op = Op::Scale;
    n.in0 = a.id;
    n.cval = c;
    return push(std::move(n));
}

Value Tape::broadcast(Value s, Shape shape) {
    check_same_tape(this, {s});
    Node n;
    n.op = Op::Broadcast;
    n.in0 = s.id;
    n.aux_shape = std::move(shape);
    return push(std::move(n));
}

Value Tape::rowbroadcast(Value v, int64_t cols) {
    check_same_tape(this, {v});
    Node n;
    n.op = Op::RowBroadcast;
    n.in0 = v.id;
    n.aux_shape = {0, cols};
    return push(std::move(n));
}

Value Tape::colbroadcast(Value v, int64_t rows) {
    check_same_tape(this, {v});
    Node n;
    n.op = Op::ColBroadcast;
    n.in0 = v.id;
    n.aux_shape = {rows, 0};
    return push(std::move(n));
}

Value Tape::chanbroadcast(Value v, Shape shape4) {
    check_same_tape(this, {v});
    Node n;
    n.op = Op::ChanBroadcast;
    n.in0 = v.id;
    n.aux_shape = std::move(shape4);
    return push(std::move(n));
}

Value Tape::unpool2(Value g, int64_t out_h, int64_t out_w) {
    check_same_tape(this, {g});
    Node n;
    n.op = Op::Unpool2;
    n.in0 = g.id;
    n.aux_shape = {0, 0, out_h, out_w};
    return push(std::move(n));
}

Value Tape::reshape(Value a, Shape shape) {
    check_same_tape(this, {a});
    Node n;
    n.op = Op::Reshape;
    n.in0 = a.id;
    n.aux_shape = std::move(shape);
    return push(std::move(n));
}

Value Tape::row_gather(Value a, std::vector<int64_t> rows) {
    check_same_tape(this, {a});
    Node n;
    n.op = Op::RowGather;
    n.in0 = a.id;
    n.aux_rows = std::move(rows);
    return push(std::move(n));
}

Value Tape::row_scatter(Value a, std::vector<int64_t> rows, int64_t total_rows) {
    check_same_tape(this, {a});
    Node n;
    n.op = Op::RowScatter;
    n.in0 = a.id;
    n.aux_rows = std::move(rows);
    n.aux_shape = {total_rows, 0};
    return push(std::move(n));
}

Value Tape::dot(Value a, Value b) { return sum(mul(a, b)); }

Value Tape::softmax_cross_entropy_mean(Value logits, const Tensor& onehot) {
    require_rank2(logits.tensor(), "softmax_cross_entropy_mean logits");
    if (!logits.tensor().same_shape(onehot))
        throw TapeError("softmax_cross_entropy_mean: labels " + shape_str(onehot.shape()) +
                        " do not match logits " + shape_str(logits.shape()));
    const int64_t bsz = logits.tensor().dim(0), classes = logits.tensor().dim(1);
    // Stabilized log-sum-exp. The rowmax shift has zero total derivative, so
    // treating it as a constant keeps gradients exact.
    Value m = rowmax(logits);
    Value shifted = sub(logits, rowbroadcast(m, classes));
    Value lse = add(log(rowsum(exp(shifted))), m);
    Value picked = rowsum(mul(logits, constant(onehot)));
    return scale(sum(sub(lse, picked)), 1.0 / static_cast<double>(bsz));
}

std::vector<Value> Tape::grad(Value out, const std::vector<Value>& wrt, GradMode mode) {
    check_same_tape(this, {out});
    for (const Value& v : wrt) check_same_tape(this, {v});
    if (out.tensor().numel() != 1)
        throw TapeError("grad: output must be scalar, got " + shape_str(out.shape()));
    if (mode == GradMode::require_connected && !node(out.id).requires_grad)
        throw TapeError("grad: output is detached from every differentiable leaf");

    // adjoint node id per tape node; -1 = no adjoint yet
    std::vector<int> adj(nodes_.size(), -1);
    adj[static_cast<size_t>(out.id)] = constant(Tensor::scalar(1.0), "seed").id;

    auto accumulate = [&](int target, Value contribution) {
        int& slot = adj[static_cast<size_t>(target)];
        slot = slot < 0 ? contribution.id : add(wrap(slot), contribution).id;
    };

    const int upper = out.id;
    for (int id = upper; id >= 0; --id) {
        if (adj[static_cast<size_t>(id)] < 0) continue;
        // Snapshot: accumulation may grow nodes_, invalidating references.
        const Node nd = node(id);
        if (!nd.requires_grad) continue;
        const Value g = wrap(adj[static_cast<size_t>(id)]);
        const Value a = wrap(nd.in0), b = wrap(nd.in1);
        const bool ga = nd.in0 >= 0 && node(nd.in0).requires_grad;
        const bool gb = nd.in1 >= 0 && node(nd.in1).requires_grad;
        switch (nd.op) {
            case Op::Leaf:
            case Op::Constant:
            case Op::Detach:
            case Op::ReluMask:
            case Op::RowMax:
                break;
            case Op::Add:
                if (ga) accumulate(nd.in0, g);
                if (gb) accumulate(nd.in1, g);
                break;
            case Op::Sub:
                if (ga) accumulate(nd.in0, g);
                if (gb) accumulate(nd.in1, scale(g, -1.0));
                break;
            case Op::Mul:
                if (ga) accumulate(nd.in0, mul(g, b));
                if (gb) accumulate(nd.in1, mul(g, a));
                break;
            case Op::Scale:
                if (ga) accumulate(nd.in0, scale(g, nd.cval));
                break;
            case Op::Sum:
                if (ga) accumulate(nd.in0, broadcast(g, node(nd.in0).value.shape()));
                break;
            case Op::Broadcast:
                if (ga) accumulate(nd.in0, sum(g));
                break;
            case Op::RowSum:
                if (ga) accumulate(nd.in0, rowbroadcast(g, node(nd.in0).value.dim(1)));
                break;
            case Op::RowBroadcast:
                if (ga) accumulate(nd.in0, rowsum(g));
                break;
            case Op::ColSum:
                if (ga) accumulate(nd.in0, colbroadcast(g, node(nd.in0).value.dim(0)));
                break;
            case Op::ColBroadcast:
                if (ga) accumulate(nd.in0, colsum(g));
                break;
            case Op::ChanSum:
                if (ga) accumulate(nd.in0, chanbroadcast(g, node(nd.in0).value.shape()));
                break;
            case Op::ChanBroadcast:
                if (ga) accumulate(nd.in0, chansum(g));
                break;
            case Op::MatMul:
                if (ga) accumulate(nd.in0, matmul(g, transpose(b)));
                if (gb) accumulate(nd.in1, matmul(transpose(a), g));
                break;
            case Op::Transpose:
                if (ga) accumulate(nd.in0, transpose(g));
                break;
            case Op::Relu:
                if (ga) accumulate(nd.in0, mul(g, relu_mask(a)));
                break;
            case Op::Exp:
                if (ga) accumulate(nd.in0, mul(g, wrap(id)));
                break;
            case Op::Log:
                if (ga) accumulate(nd.in0, mul(g, reciprocal(a)));
                break;
            case Op::Reciprocal:
                if (ga) accumulate(nd.in0, scale(mul(g, mul(wrap(id), wrap(id))), -1.0));
                break;
            case Op::Sqrt:
                if (ga) accumulate(nd.in0, scale(mul(g, reciprocal(wrap(id))), 0.5));
                break;
            case Op::Conv2d:
                if (ga) accumulate(nd.in0, conv2d_input_grad(g, b));
                if (gb) accumulate(nd.in1, conv2d_weight_grad(a, g));
                break;
            case Op::ConvDx:
                // dx = A_w^T g is linear in both arguments; see conv identities.
                if (ga) accumulate(nd.in0, conv2d(g, b));
                if (gb) accumulate(nd.in1, conv2d_weight_grad(g, a));
                break;
            case Op::ConvDw:
                if (ga) accumulate(nd.in0, conv2d_input_grad(b, g));
                if (gb) accumulate(nd.in1, conv2d(a, g));
                break;
            case Op::AvgPool2:
                if (ga)
                    accumulate(nd.in0, unpool2(g, node(nd.in0).value.dim(2),
                                               node(nd.in0).value.dim(3)));
                break;
            case Op::Unpool2:
                if (ga) accumulate(nd.in0, avgpool2(g));
                break;
            case Op::Reshape:
                if (ga) accumulate(nd.in0, reshape(g, node(nd.in0).value.shape()));
                break;
            case Op::RowGather:
                if (ga)
                    accumulate(nd.in0,
                               row_scatter(g, nd.aux_rows, node(nd.in0).value.dim(0)));
                break;
            case Op::RowScatter:
                if (ga) accumulate(nd.in0, row_gather(g, nd.aux_rows));
                break;
        }
    }

    std::vector<Value> result;
    result.reserve(wrt.size());
    for (const Value& v : wrt) {
        const int a = adj[static_cast<size_t>(v.id)];
        if (a >= 0)
            result.push_back(wrap(a));
        else
            result.push_back(constant(Tensor::zeros(v.tensor().shape()), "zero-grad"));
    }
    return result;
}

Tensor Tape::replay(const std::vector<std::pair<Value, Tensor>>& bindings, Value out) {
    check_same_tape(this, {out});
    for (const auto& [v, t] : bindings) {
        check_same_tape(this, {v});
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (n.op != Op::Leaf) throw TapeError("replay: binding target is not a leaf");
        if (!n.value.same_shape(t))
            throw TapeError("replay: binding shape " + shape_str(t.shape()) +
                            " differs from leaf " + shape_str(n.value.shape()));
        n.value = t;
    }
    for (Node& n : nodes_)
        if (n.op != Op::Leaf && n.op != Op::Constant) exec(n);
    return nodes_[static_cast<size_t>(out.id)].value;
}

Tensor finite_difference(const std::function<double(const Tensor&)>& fn, const Tensor& at,
                         double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_difference: step must be positive");
    Tensor g(at.shape());
    Tensor probe = at;
    for (int64_t i = 0; i < at.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double hi = fn(probe);
        probe[i] = orig - step;
        const double lo = fn(probe);
        probe[i] = orig;
        g[i] = (hi - lo) / (2.0 * step);
    }
    return g;
}

}  // namespace fedlap
