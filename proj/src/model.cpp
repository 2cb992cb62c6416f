#include "fedlap/model.hpp"

#include <cmath>
#include <stdexcept>

#include "fedlap/kernels.hpp"
#include "fedlap/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fedlap {

ModelSpec ModelSpec::mlp(int64_t in, int64_t hidden, int64_t classes) {
    ModelSpec s;
    s.layers = {{LayerKind::Dense, in, hidden},
                {LayerKind::Relu},
                {LayerKind::Dense, hidden, classes}};
    s.example_shape = {in};
    s.classes = classes;
    return s;
}

ModelSpec ModelSpec::convnet(int64_t in_ch, int64_t h, int64_t w, int64_t classes) {
    ModelSpec s;
    const int64_t ch = 8;
    const int64_t fh = (h / 2) / 2, fw = (w / 2) / 2;
    s.layers = {{LayerKind::Conv3x3, in_ch, ch},
                {LayerKind::Relu},
                {LayerKind::AvgPool2},
                {LayerKind::Conv3x3, ch, ch},
                {LayerKind::Relu},
                {LayerKind::AvgPool2},
                {LayerKind::Dense, ch * fh * fw, classes}};
    s.example_shape = {in_ch, h, w};
    s.classes = classes;
    return s;
}

void ModelSpec::validate() const {
    if (layers.empty()) throw std::invalid_argument("ModelSpec: no layers");
    if (classes < 2) throw std::invalid_argument("ModelSpec: needs at least 2 classes");
    // Trace the feature shape through the stack.
    Shape cur = example_shape;
    for (const LayerDef& l : layers) {
        switch (l.kind) {
            case LayerKind::Dense: {
                const int64_t width = shape_numel(cur);
                if (width != l.in)
                    throw std::invalid_argument("ModelSpec: dense expects width " +
                                                std::to_string(l.in) + ", got " +
                                                std::to_string(width));
                cur = {l.out};
                break;
            }
            case LayerKind::Conv3x3: {
                if (cur.size() != 3 || cur[0] != l.in)
                    throw std::invalid_argument("ModelSpec: conv expects [" +
                                                std::to_string(l.in) + ",H,W], got " +
                                                shape_str(cur));
                cur[0] = l.out;
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::AvgPool2:
                if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2)
                    throw std::invalid_argument("ModelSpec: avgpool needs a spatial input, got " +
                                                shape_str(cur));
                cur[1] /= 2;
                cur[2] /= 2;
                break;
        }
    }
    if (shape_numel(cur) != classes)
        throw std::invalid_argument("ModelSpec: final width " + std::to_string(shape_numel(cur)) +
                                    " != classes " + std::to_string(classes));
}

int64_t ModelSpec::param_count() const {
    int64_t n = 0;
    for (const LayerDef& l : layers) {
        if (l.kind == LayerKind::Dense) n += l.out * l.in + l.out;
        if (l.kind == LayerKind::Conv3x3) n += l.out * l.in * 9 + l.out;
    }
    return n;
}

Tensor make_onehot(const std::vector<int64_t>& labels, int64_t classes) {
    Tensor y({static_cast<int64_t>(labels.size()), classes});
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes)
            throw std::out_of_range("label " + std::to_string(labels[i]) +
                                    " outside class range [0," + std::to_string(classes) + ")");
        y[static_cast<int64_t>(i) * classes + labels[i]] = 1.0;
    }
    return y;
}

std::pair<int64_t, int64_t> LayerGrads::view2d(const Tensor& t) {
    if (t.rank() == 1) return {t.dim(0), 1};
    if (t.rank() == 2) return {t.dim(0), t.dim(1)};
    if (t.rank() == 4) return {t.dim(0), t.dim(1) * t.dim(2) * t.dim(3)};
    throw std::invalid_argument("LayerGrads::view2d: unsupported rank " +
                                std::to_string(t.rank()));
}

double LayerGrads::l2_norm() const {
    double acc = 0.0;
    for (const Tensor& g : grads)
        for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * g[i];
    return std::sqrt(acc);
}

bool LayerGrads::all_finite() const {
    for (const Tensor& g : grads)
        if (!g.all_finite()) return false;
    return true;
}

bool LayerGrads::congruent(const LayerGrads& o) const {
    if (grads.size() != o.grads.size()) return false;
    for (size_t i = 0; i < grads.size(); ++i)
        if (!grads[i].same_shape(o.grads[i])) return false;
    return true;
}

void LayerGrads::accumulate_scaled(const LayerGrads& o, double s) {
    if (!congruent(o)) throw std::invalid_argument("LayerGrads: layout mismatch");
    for (size_t i = 0; i < grads.size(); ++i)
        for (int64_t j = 0; j < grads[i].numel(); ++j) grads[i][j] += s * o.grads[i][j];
}

void LayerGrads::scale_inplace(double s) {
    for (Tensor& g : grads)
        for (int64_t j = 0; j < g.numel(); ++j) g[j] *= s;
}

LayerGrads LayerGrads::zeros_like(const LayerGrads& o) {
    LayerGrads z;
    z.grads.reserve(o.grads.size());
    for (const Tensor& g : o.grads) z.grads.push_back(Tensor::zeros(g.shape()));
    return z;
}

int64_t ModelState::param_count() const {
    int64_t n = 0;
    for (const Tensor& p : params) n += p.numel();
    return n;
}

std::vector<double> ModelState::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(param_count()));
    for (const Tensor& p : params) flat.insert(flat.end(), p.data(), p.data() + p.numel());
    return flat;
}

void ModelState::unflatten(const std::vector<double>& flat) {
    if (static_cast<int64_t>(flat.size()) != param_count())
        throw std::invalid_argument("ModelState::unflatten: length mismatch");
    size_t off = 0;
    for (Tensor& p : params) {
        std::copy(flat.begin() + static_cast<long>(off),
                  flat.begin() + static_cast<long>(off) + p.numel(), p.data());
        off += static_cast<size_t>(p.numel());
    }
}

bool ModelState::congruent(const ModelState& o) const {
    if (params.size() != o.params.size()) return false;
    for (size_t i = 0; i < params.size(); ++i)
        if (!params[i].same_shape(o.params[i])) return false;
    return true;
}

ModelState init_params(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    ModelState st;
    st.spec = spec;
    Rng rng = Rng(seed).substream("init");
    for (const LayerDef& l : spec.layers) {
        if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv3x3) {
            const int64_t fan_in = l.kind == LayerKind::Dense ? l.in : l.in * 9;
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            Tensor w = l.kind == LayerKind::Dense ? Tensor({l.out, l.in})
                                                  : Tensor({l.out, l.in, 3, 3});
            for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-bound, bound);
            st.params.push_back(std::move(w));
            st.params.push_back(Tensor::zeros({l.out}));  // biases
        }
    }
    return st;
}

std::vector<Value> param_leaves(Tape& t, const ModelState& state) {
    std::vector<Value> out;
    out.reserve(state.params.size());
    for (const Tensor& p : state.params) out.push_back(t.leaf(p));
    return out;
}

Value build_logits(Tape& t, const ModelSpec& spec, const std::vector<Value>& params, Value x) {
    Value cur = x;
    size_t pi = 0;
    for (const LayerDef& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Dense: {
                if (cur.shape().size() != 2) {
                    const int64_t bsz = cur.shape()[0];
                    cur = t.reshape(cur, {bsz, shape_numel(cur.shape()) / bsz});
                }
                Value w = params.at(pi++), b = params.at(pi++);
                cur = t.add(t.matmul(cur, t.transpose(w)),
                            t.colbroadcast(b, cur.shape()[0]));
                break;
            }
            case LayerKind::Conv3x3: {
                Value w = params.at(pi++), b = params.at(pi++);
                Value y = t.conv2d(cur, w);
                cur = t.add(y, t.chanbroadcast(b, y.shape()));
                break;
            }
            case LayerKind::Relu:
                cur = t.relu(cur);
                break;
            case LayerKind::AvgPool2:
                cur = t.avgpool2(cur);
                break;
        }
    }
    if (pi != params.size())
        throw TapeError("build_logits: parameter count does not match spec");
    return cur;
}

namespace {

Shape batched_shape(const ModelSpec& spec, int64_t bsz) {
    Shape s{bsz};
    s.insert(s.end(), spec.example_shape.begin(), spec.example_shape.end());
    return s;
}

void check_batch(const ModelState& state, const Batch& batch) {
    if (batch.size() == 0) throw std::invalid_argument("empty batch");
    if (batch.x.shape() != batched_shape(state.spec, batch.size()))
        throw std::invalid_argument("batch features " + shape_str(batch.x.shape()) +
                                    " do not match model input " +
                                    shape_str(batched_shape(state.spec, batch.size())));
}

}  // namespace

LossGrad loss_and_grad(const ModelState& state, const Batch& batch) {
    check_batch(state, batch);
    Tape t;
    std::vector<Value> params = param_leaves(t, state);
    Value x = t.constant(batch.x, "batch");
    Value logits = build_logits(t, state.spec, params, x);
    Value loss = t.softmax_cross_entropy_mean(logits, make_onehot(batch.labels, state.spec.classes));
    std::vector<Value> g = t.grad(loss, params);
    LossGrad out;
    out.loss = loss.item();
    out.grads.grads.reserve(g.size());
    for (const Value& v : g) out.grads.grads.push_back(v.tensor());
    return out;
}

std::vector<LayerGrads> per_example_grads(const ModelState& state, const Batch& batch) {
    check_batch(state, batch);
    const int64_t bsz = batch.size();
    const int64_t stride = shape_numel(state.spec.example_shape);
    std::vector<LayerGrads> out(static_cast<size_t>(bsz));
#pragma omp parallel for schedule(dynamic) if (parallel_enabled() && bsz > 1)
    for (int64_t i = 0; i < bsz; ++i) {
        Batch one;
        one.x = Tensor(batched_shape(state.spec, 1),
                       std::vector<double>(batch.x.data() + i * stride,
                                           batch.x.data() + (i + 1) * stride));
        one.labels = {batch.labels[static_cast<size_t>(i)]};
        out[static_cast<size_t>(i)] = loss_and_grad(state, one).grads;
    }
    return out;
}

double weight_distance(const ModelState& a, const ModelState& b) {
    if (!a.congruent(b)) throw std::invalid_argument("weight_distance: layout mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.params.size(); ++i) {
        const Tensor& pa = a.params[i];
        const Tensor& pb = b.params[i];
        for (int64_t j = 0; j < pa.numel(); ++j) {
            const double d = pa[j] - pb[j];
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

ModelState apply_step(const ModelState& state, const LayerGrads& grads, double lr) {
    if (grads.grads.size() != state.params.size())
        throw std::invalid_argument("apply_step: layout mismatch");
    if (!grads.all_finite())
        throw std::domain_error("apply_step: non-finite gradient (divergence)");
    ModelState next = state;
    for (size_t i = 0; i < next.params.size(); ++i) {
        if (!next.params[i].same_shape(grads.grads[i]))
            throw std::invalid_argument("apply_step: layout mismatch at parameter " +
                                        std::to_string(i));
        for (int64_t j = 0; j < next.params[i].numel(); ++j)
            next.params[i][j] -= lr * grads.grads[i][j];
    }
    next.step = state.step + 1;
    return next;
}

double eval_loss(const ModelState& state, const Batch& batch) {
    check_batch(state, batch);
    Tape t;
    std::vector<Value> params;
    params.reserve(state.params.size());
    for (const Tensor& p : state.params) params.push_back(t.constant(p));
    Value logits = build_logits(t, state.spec, params, t.constant(batch.x));
    return t.softmax_cross_entropy_mean(logits, make_onehot(batch.labels, state.spec.classes))
        .item();
}

std::pair<double, double> evaluate(const ModelState& state, const Batch& batch) {
    check_batch(state, batch);
    Tape t;
    std::vector<Value> params;
    params.reserve(state.params.size());
    for (const Tensor& p : state.params) params.push_back(t.constant(p));
    Value logits = build_logits(t, state.spec, params, t.constant(batch.x));
    const double loss =
        t.softmax_cross_entropy_mean(logits, make_onehot(batch.labels, state.spec.classes))
            .item();
    const Tensor& z = logits.tensor();
    const int64_t classes = state.spec.classes;
    int64_t correct = 0;
    for (int64_t i = 0; i < batch.size(); ++i) {
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
            if (z[i * classes + c] > z[i * classes + best]) best = c;
        if (best == batch.labels[static_cast<size_t>(i)]) ++correct;
    }
    return {loss, static_cast<double>(correct) / static_cast<double>(batch.size())};
}

}  // namespace fedlap
