#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fedlap/tensor.hpp"

namespace fedlap {

class Tape;

// Handle to a node on a tape. Cheap to copy; invalid until assigned.
struct Value {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& tensor() const;
    const Shape& shape() const;
    double item() const { return tensor().item(); }
};

struct TapeError : std::runtime_error {
    explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class GradMode {
    allow_unconnected,  // unconnected leaves get zero gradients
    require_connected,  // throw if the output is detached from every leaf
};

// Operation-recording tape. Forward values are computed eagerly as nodes are
// built. grad() emits the reverse pass as ordinary nodes on the same tape,
// so gradients are themselves differentiable (reverse-over-reverse). A tape
// is built per forward pass and not shared across threads.
class Tape {
public:
    enum class Op {
        Leaf, Constant, Add, Sub, Mul, Scale, Sum, Broadcast,
        RowSum, RowBroadcast, ColSum, ColBroadcast, ChanSum, ChanBroadcast,
        MatMul, Transpose, Relu, ReluMask, Exp, Log, Reciprocal, Sqrt,
        RowMax, Conv2d, ConvDx, ConvDw, AvgPool2, Unpool2, Reshape, Detach,
        RowGather, RowScatter,
    };

    Value leaf(Tensor v, std::string name = "");
    Value constant(Tensor v, std::string name = "");

    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value scale(Value a, double c);
    Value sum(Value a);
    Value broadcast(Value s, Shape shape);
    Value rowsum(Value a);
    Value rowbroadcast(Value v, int64_t cols);
    Value colsum(Value a);
    Value colbroadcast(Value v, int64_t rows);
    Value chansum(Value a);
    Value chanbroadcast(Value v, Shape shape4);
    Value matmul(Value a, Value b);
    Value transpose(Value a);
    Value relu(Value a);
    Value relu_mask(Value a);
    Value exp(Value a);
    Value log(Value a);
    Value reciprocal(Value a);
    Value sqrt(Value a);
    Value rowmax(Value a);
    Value conv2d(Value x, Value w);
    Value conv2d_input_grad(Value gy, Value w);
    Value conv2d_weight_grad(Value x, Value gy);
    Value avgpool2(Value a);
    Value unpool2(Value g, int64_t out_h, int64_t out_w);
    Value reshape(Value a, Shape shape);
    Value detach(Value a);
    Value row_gather(Value a, std::vector<int64_t> rows);
    Value row_scatter(Value a, std::vector<int64_t> rows, int64_t total_rows);

    // sum(a*b) as a scalar
    Value dot(Value a, Value b);
    // mean softmax cross-entropy of logits [B,C] against a fixed one-hot [B,C]
    Value softmax_cross_entropy_mean(Value logits, const Tensor& onehot);

    // Reverse-mode gradients of a scalar output w.r.t. the given leaves (or
    // any recorded nodes). Emitted as new nodes, so the result can be
    // differentiated again.
    std::vector<Value> grad(Value out, const std::vector<Value>& wrt,
                            GradMode mode = GradMode::allow_unconnected);

    // Rebinds leaf values and re-executes the recorded program; returns the
    // value at `out`. Re-execution is bit-identical given identical inputs.
    Tensor replay(const std::vector<std::pair<Value, Tensor>>& bindings, Value out);

    size_t size() const { return nodes_.size(); }
    const Tensor& value_of(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }
    bool requires_grad(Value v) const { return nodes_.at(static_cast<size_t>(v.id)).requires_grad; }

private:
    struct Node {
        Op op;
        int in0 = -1;
        int in1 = -1;
        double cval = 0.0;
        Shape aux_shape;
        std::vector<int64_t> aux_rows;
        Tensor value;
        bool requires_grad = false;
        std::string name;
    };

    Value push(Node n);
    void exec(Node& n);
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    Value wrap(int id) { return Value{this, id}; }
    [[noreturn]] void fail(const Node& n, const std::string& msg) const;
    static const char* op_name(Op op);

    std::vector<Node> nodes_;

    friend struct Value;
};

// Central-difference gradient estimate of a scalar function; the oracle used
// throughout the test suites to pin reverse-mode results.
Tensor finite_difference(const std::function<double(const Tensor&)>& fn, const Tensor& at,
                         double step);

}  // namespace fedlap
