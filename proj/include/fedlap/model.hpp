#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedlap/autodiff.hpp"
#include "fedlap/tensor.hpp"

namespace fedlap {

enum class LayerKind { Dense, Conv3x3, Relu, AvgPool2 };

struct LayerDef {
    LayerKind kind;
    int64_t in = 0;   // Dense: input width, Conv3x3: input channels
    int64_t out = 0;  // Dense: output width, Conv3x3: output channels
};

// Architecture description. Loss is fixed to mean softmax cross-entropy.
struct ModelSpec {
    std::vector<LayerDef> layers;
    Shape example_shape;  // per-example feature shape: {D} or {C,H,W}
    int64_t classes = 0;

    // MLP: in -> hidden -> classes with ReLU
    static ModelSpec mlp(int64_t in, int64_t hidden, int64_t classes);
    // conv3x3(ch->8), relu, pool, conv3x3(8->8), relu, pool, dense
    static ModelSpec convnet(int64_t in_ch, int64_t h, int64_t w, int64_t classes);

    void validate() const;
    int64_t param_count() const;
};

struct Batch {
    Tensor x;                     // [B, ...example_shape]
    std::vector<int64_t> labels;  // length B

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

Tensor make_onehot(const std::vector<int64_t>& labels, int64_t classes);

// Per-layer gradient collection, congruent with ModelState parameter layout.
struct LayerGrads {
    std::vector<Tensor> grads;

    // Canonical 2-D view: rows are output nodes, columns the flattened rest.
    // Dense [out,in] -> (out,in); conv [o,c,kh,kw] -> (o, c*kh*kw); bias
    // [out] -> (out,1).
    static std::pair<int64_t, int64_t> view2d(const Tensor& t);

    double l2_norm() const;
    bool all_finite() const;
    bool congruent(const LayerGrads& o) const;
    void accumulate_scaled(const LayerGrads& o, double s);
    void scale_inplace(double s);
    static LayerGrads zeros_like(const LayerGrads& o);
};

struct ModelState {
    ModelSpec spec;
    std::vector<Tensor> params;  // per layer: weight then bias
    int64_t step = 0;            // local step counter t
    int64_t round = 1;           // communication round m

    int64_t param_count() const;
    std::vector<double> flatten() const;
    void unflatten(const std::vector<double>& flat);
    bool congruent(const ModelState& o) const;
};

ModelState init_params(const ModelSpec& spec, uint64_t seed);

// Builds the forward graph through `spec` on tape `t`; `params` are the
// parameter nodes in ModelState order, `x` the input batch node.
Value build_logits(Tape& t, const ModelSpec& spec, const std::vector<Value>& params, Value x);

// Convenience: registers all parameters of `state` as leaves on `t`.
std::vector<Value> param_leaves(Tape& t, const ModelState& state);

struct LossGrad {
    double loss;
    LayerGrads grads;
};

LossGrad loss_and_grad(const ModelState& state, const Batch& batch);
std::vector<LayerGrads> per_example_grads(const ModelState& state, const Batch& batch);

double weight_distance(const ModelState& a, const ModelState& b);
ModelState apply_step(const ModelState& state, const LayerGrads& grads, double lr);

double eval_loss(const ModelState& state, const Batch& batch);
// (mean loss, accuracy) on a labeled batch
std::pair<double, double> evaluate(const ModelState& state, const Batch& batch);

}  // namespace fedlap
