// SPDX-License-Identifier: Apache-2.0
#include "stitchlab/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>

#include <cblas.h>
#include <nlohmann/json.hpp>

#include "stitchlab/engine.hpp"
#include "stitchlab/rng.hpp"

extern "C" void openblas_set_num_threads(int);

namespace stitchlab::nn {

namespace {

std::once_flag blas_once;

void pin_blas() {
    // Multi-threaded BLAS reductions are not order-stable; one thread keeps
    // every GEMM bit-reproducible.
    std::call_once(blas_once, [] { openblas_set_num_threads(1); });
}

const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Conv: return "conv";
        case OpKind::BatchNorm: return "batchnorm";
        case OpKind::ReLU: return "relu";
        case OpKind::GlobalAvgPool: return "gap";
        case OpKind::Dense: return "dense";
        case OpKind::Logits: return "logits";
        case OpKind::SaveSkip: return "save_skip";
        case OpKind::LoadSkip: return "load_skip";
        case OpKind::AddSkip: return "add_skip";
    }
    return "?";
}

OpKind op_kind_from(const std::string& s) {
    if (s == "conv") return OpKind::Conv;
    if (s == "batchnorm") return OpKind::BatchNorm;
    if (s == "relu") return OpKind::ReLU;
    if (s == "gap") return OpKind::GlobalAvgPool;
    if (s == "dense") return OpKind::Dense;
    if (s == "logits") return OpKind::Logits;
    if (s == "save_skip") return OpKind::SaveSkip;
    if (s == "load_skip") return OpKind::LoadSkip;
    if (s == "add_skip") return OpKind::AddSkip;
    throw SchemaViolation("unknown op kind: " + s);
}

const char* tap_kind_name(TapKind k) {
    switch (k) {
        case TapKind::PostBN_PreReLU: return "post_bn_pre_relu";
        case TapKind::PostAdd: return "post_add";
        case TapKind::PostReLU: return "post_relu";
    }
    return "?";
}

TapKind tap_kind_from(const std::string& s) {
    if (s == "post_bn_pre_relu") return TapKind::PostBN_PreReLU;
    if (s == "post_add") return TapKind::PostAdd;
    if (s == "post_relu") return TapKind::PostReLU;
    throw SchemaViolation("unknown tap kind: " + s);
}

}  // namespace

void gemm_rm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
             int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    pin_blas();
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c,
                ldc);
}

void gemm_rm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
             int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    pin_blas();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c,
                ldc);
}

int NetworkSpec::effective_channels(const LayerDesc& d) const {
    return d.out_channels * (d.scale_width ? width_multiplier : 1);
}

int NetworkSpec::effective_out_dim(const LayerDesc& d) const {
    return d.out_dim * (d.scale_width ? width_multiplier : 1);
}

std::vector<Shape3> NetworkSpec::op_output_shapes() const {
    std::vector<Shape3> out;
    out.reserve(ops.size());
    Shape3 cur{in_w, in_h, in_c};
    std::map<int, Shape3> slots;
    int logits_count = 0;
    for (std::size_t k = 0; k < ops.size(); ++k) {
        const LayerDesc& d = ops[k];
        switch (d.kind) {
            case OpKind::Conv: {
                const int pad = d.kernel / 2;
                const int ow = (cur.w + 2 * pad - d.kernel) / d.stride + 1;
                const int oh = (cur.h + 2 * pad - d.kernel) / d.stride + 1;
                if (ow <= 0 || oh <= 0) throw InvalidInput("spec: conv output collapsed");
                cur = Shape3{ow, oh, effective_channels(d)};
                break;
            }
            case OpKind::BatchNorm:
            case OpKind::ReLU:
                break;
            case OpKind::GlobalAvgPool:
                cur = Shape3{1, 1, cur.c};
                break;
            case OpKind::Dense:
                cur = Shape3{1, 1, effective_out_dim(d)};
                break;
            case OpKind::Logits:
                ++logits_count;
                if (k + 1 != ops.size()) throw InvalidInput("spec: Logits must be terminal");
                break;
            case OpKind::SaveSkip:
                slots[d.slot] = cur;
                break;
            case OpKind::LoadSkip: {
                auto it = slots.find(d.slot);
                if (it == slots.end()) throw InvalidInput("spec: LoadSkip before save");
                cur = it->second;
                break;
            }
            case OpKind::AddSkip: {
                auto it = slots.find(d.slot);
                if (it == slots.end()) throw InvalidInput("spec: AddSkip before save");
                if (!(it->second == cur)) throw InvalidInput("spec: AddSkip shape mismatch");
                break;
            }
        }
        out.push_back(cur);
    }
    if (logits_count != 1) throw InvalidInput("spec: exactly one Logits required");
    return out;
}

const TapPoint& NetworkSpec::tap(const std::string& layer) const {
    for (const auto& t : taps)
        if (t.name == layer) return t;
    throw UnknownLayer("unknown layer: " + layer);
}

Shape3 NetworkSpec::tap_shape(const std::string& layer) const {
    return op_output_shapes()[tap(layer).after_op];
}

int NetworkSpec::classes() const {
    for (auto it = ops.rbegin(); it != ops.rend(); ++it)
        if (it->kind == OpKind::Dense) return effective_out_dim(*it);
    throw InvalidInput("spec: no Dense layer");
}

std::vector<std::size_t> NetworkSpec::param_counts() const {
    const auto shapes = op_output_shapes();
    std::vector<std::size_t> counts(ops.size(), 0);
    Shape3 cur{in_w, in_h, in_c};
    std::map<int, Shape3> slots;
    for (std::size_t k = 0; k < ops.size(); ++k) {
        const LayerDesc& d = ops[k];
        switch (d.kind) {
            case OpKind::Conv:
                counts[k] = static_cast<std::size_t>(d.kernel) * d.kernel * cur.c * shapes[k].c +
                            shapes[k].c;
                break;
            case OpKind::BatchNorm:
                counts[k] = 4 * static_cast<std::size_t>(cur.c);
                break;
            case OpKind::Dense:
                counts[k] = static_cast<std::size_t>(cur.w) * cur.h * cur.c * shapes[k].c +
                            shapes[k].c;
                break;
            default:
                break;
        }
        if (d.kind == OpKind::SaveSkip) slots[d.slot] = cur;
        cur = shapes[k];
    }
    return counts;
}

std::vector<std::size_t> trainable_counts(const NetworkSpec& spec) {
    auto counts = spec.param_counts();
    for (std::size_t k = 0; k < spec.ops.size(); ++k)
        if (spec.ops[k].kind == OpKind::BatchNorm) counts[k] /= 2;  // gamma, beta only
    return counts;
}

NetworkSpec NetworkSpec::micro10(int width_multiplier, int classes, int in_w, int in_h,
                                 int in_c) {
    NetworkSpec s;
    s.arch = "micro10";
    s.in_w = in_w;
    s.in_h = in_h;
    s.in_c = in_c;
    s.width_multiplier = width_multiplier;
    const int widths[8] = {8, 8, 16, 16, 16, 32, 32, 32};
    const int strides[8] = {1, 1, 2, 1, 1, 2, 1, 1};
    const int kernels[8] = {3, 3, 3, 3, 3, 3, 3, 1};
    for (int i = 0; i < 8; ++i) {
        s.ops.push_back({OpKind::Conv, kernels[i], widths[i], strides[i]});
        s.ops.push_back({OpKind::BatchNorm});
        s.taps.push_back({"layer" + std::to_string(i + 1),
                          static_cast<int>(s.ops.size()) - 1, TapKind::PostBN_PreReLU});
        s.ops.push_back({OpKind::ReLU});
    }
    s.ops.push_back({OpKind::GlobalAvgPool});
    LayerDesc dense{OpKind::Dense};
    dense.out_dim = classes;
    dense.scale_width = false;
    s.ops.push_back(dense);
    s.ops.push_back({OpKind::Logits});
    return s;
}

NetworkSpec NetworkSpec::micro_residual(int width_multiplier, int classes, int in_w, int in_h,
                                        int in_c) {
    NetworkSpec s;
    s.arch = "micro_residual";
    s.in_w = in_w;
    s.in_h = in_h;
    s.in_c = in_c;
    s.width_multiplier = width_multiplier;
    const int widths[3] = {8, 16, 32};

    s.ops.push_back({OpKind::Conv, 3, widths[0], 1});
    s.ops.push_back({OpKind::BatchNorm});
    s.taps.push_back({"layer0.0", static_cast<int>(s.ops.size()) - 1, TapKind::PostAdd});
    s.ops.push_back({OpKind::ReLU});

    for (int level = 0; level < 3; ++level) {
        for (int block = 0; block < 2; ++block) {
            const bool downsample = level > 0 && block == 0;
            const int width = widths[level];
            LayerDesc save{OpKind::SaveSkip};
            save.slot = 0;
            s.ops.push_back(save);
            s.ops.push_back({OpKind::Conv, 3, width, downsample ? 2 : 1});
            s.ops.push_back({OpKind::BatchNorm});
            s.ops.push_back({OpKind::ReLU});
            s.ops.push_back({OpKind::Conv, 3, width, 1});
            s.ops.push_back({OpKind::BatchNorm});
            if (downsample) {
                LayerDesc save_main{OpKind::SaveSkip};
                save_main.slot = 1;
                s.ops.push_back(save_main);
                LayerDesc load{OpKind::LoadSkip};
                load.slot = 0;
                s.ops.push_back(load);
                s.ops.push_back({OpKind::Conv, 1, width, 2});
                s.ops.push_back({OpKind::BatchNorm});
                LayerDesc add{OpKind::AddSkip};
                add.slot = 1;
                s.ops.push_back(add);
            } else {
                LayerDesc add{OpKind::AddSkip};
                add.slot = 0;
                s.ops.push_back(add);
            }
            s.taps.push_back({"layer" + std::to_string(level + 1) + "." + std::to_string(block),
                              static_cast<int>(s.ops.size()) - 1, TapKind::PostAdd});
            s.ops.push_back({OpKind::ReLU});
        }
    }
    s.ops.push_back({OpKind::GlobalAvgPool});
    LayerDesc dense{OpKind::Dense};
    dense.out_dim = classes;
    dense.scale_width = false;
    s.ops.push_back(dense);
    s.ops.push_back({OpKind::Logits});
    return s;
}

nlohmann::json NetworkSpec::to_json() const {
    nlohmann::json j;
    j["arch"] = arch;
    j["in"] = {in_w, in_h, in_c};
    j["width_multiplier"] = width_multiplier;
    j["ops"] = nlohmann::json::array();
    for (const auto& d : ops) {
        nlohmann::json o;
        o["kind"] = op_kind_name(d.kind);
        if (d.kind == OpKind::Conv) {
            o["kernel"] = d.kernel;
            o["out_channels"] = d.out_channels;
            o["stride"] = d.stride;
        }
        if (d.kind == OpKind::Dense) {
            o["out_dim"] = d.out_dim;
            o["scale_width"] = d.scale_width;
        }
        if (d.slot >= 0) o["slot"] = d.slot;
        j["ops"].push_back(o);
    }
    j["taps"] = nlohmann::json::array();
    for (const auto& t : taps)
        j["taps"].push_back({{"name", t.name}, {"after_op", t.after_op},
                             {"kind", tap_kind_name(t.kind)}});
    return j;
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
    NetworkSpec s;
    try {
        s.arch = j.value("arch", "custom");
        s.in_w = j.at("in").at(0).get<int>();
        s.in_h = j.at("in").at(1).get<int>();
        s.in_c = j.at("in").at(2).get<int>();
        s.width_multiplier = j.value("width_multiplier", 1);
        for (const auto& o : j.at("ops")) {
            LayerDesc d{op_kind_from(o.at("kind").get<std::string>())};
            d.kernel = o.value("kernel", 0);
            d.out_channels = o.value("out_channels", 0);
            d.stride = o.value("stride", 1);
            d.out_dim = o.value("out_dim", 0);
            d.scale_width = o.value("scale_width", true);
            d.slot = o.value("slot", -1);
            s.ops.push_back(d);
        }
        for (const auto& t : j.at("taps"))
            s.taps.push_back({t.at("name").get<std::string>(), t.at("after_op").get<int>(),
                              tap_kind_from(t.at("kind").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
        throw SchemaViolation(std::string("network spec json: ") + e.what());
    }
    s.op_output_shapes();  // validate
    return s;
}

Model init_model(const NetworkSpec& spec, std::uint64_t seed) {
    const auto shapes = spec.op_output_shapes();
    const auto counts = spec.param_counts();
    Model model;
    model.spec = spec;
    model.seed = seed;
    model.weights.resize(spec.ops.size());
    Shape3 cur{spec.in_w, spec.in_h, spec.in_c};
    for (std::size_t k = 0; k < spec.ops.size(); ++k) {
        const LayerDesc& d = spec.ops[k];
        auto& w = model.weights[k];
        w.assign(counts[k], 0.0f);
        Rng rng(derive_seed(seed, 0xC0DE0000ULL + k));
        if (d.kind == OpKind::Conv) {
            const int fan_in = d.kernel * d.kernel * cur.c;
            const double std = std::sqrt(2.0 / fan_in);
            const std::size_t wn = static_cast<std::size_t>(d.kernel) * d.kernel * cur.c *
                                   shapes[k].c;
            for (std::size_t i = 0; i < wn; ++i) w[i] = static_cast<float>(rng.normal(0.0, std));
        } else if (d.kind == OpKind::Dense) {
            const int fan_in = cur.w * cur.h * cur.c;
            const double std = std::sqrt(2.0 / fan_in);
            const std::size_t wn = static_cast<std::size_t>(fan_in) * shapes[k].c;
            for (std::size_t i = 0; i < wn; ++i) w[i] = static_cast<float>(rng.normal(0.0, std));
        } else if (d.kind == OpKind::BatchNorm) {
            const int c = cur.c;
            for (int j = 0; j < c; ++j) {
                w[j] = 1.0f;          // gamma
                w[3 * c + j] = 1.0f;  // running var
            }
        }
        cur = shapes[k];
    }
    return model;
}

namespace {

Tensor4 gather_batch(const Tensor4& inputs, const std::vector<std::size_t>& idx,
                     std::size_t lo, std::size_t hi, bool flip, Rng* rng) {
    const int count = static_cast<int>(hi - lo);
    Tensor4 batch(count, inputs.w, inputs.h, inputs.c);
    const std::size_t sample = static_cast<std::size_t>(inputs.w) * inputs.h * inputs.c;
    for (int b = 0; b < count; ++b) {
        const std::size_t src = idx[lo + b];
        std::copy_n(inputs.data.begin() + src * sample, sample,
                    batch.data.begin() + static_cast<std::size_t>(b) * sample);
        if (flip && rng && rng->uniform() < 0.5) {
            for (int x = 0; x < inputs.w / 2; ++x)
                for (int y = 0; y < inputs.h; ++y)
                    for (int ch = 0; ch < inputs.c; ++ch)
                        std::swap(batch.at(b, x, y, ch),
                                  batch.at(b, inputs.w - 1 - x, y, ch));
        }
    }
    return batch;
}

struct OptimizerState {
    std::vector<std::vector<float>> velocity;  // SGD momentum or Adam m
    std::vector<std::vector<float>> second;    // Adam v
    std::size_t step = 0;
};

void apply_update(Engine<float>& eng, const std::vector<std::vector<float>>& grads,
                  const std::vector<std::size_t>& trainable, const TrainConfig& cfg,
                  double lr, OptimizerState& st) {
    ++st.step;
    for (std::size_t k = 0; k < grads.size(); ++k) {
        auto& p = eng.params()[k];
        const auto& g = grads[k];
        auto& vel = st.velocity[k];
        for (std::size_t i = 0; i < trainable[k]; ++i) {
            double gi = g[i] + cfg.weight_decay * p[i];
            if (cfg.optimizer == TrainConfig::Optimizer::SgdNesterov) {
                vel[i] = static_cast<float>(cfg.momentum * vel[i] + gi);
                p[i] -= static_cast<float>(lr * (gi + cfg.momentum * vel[i]));
            } else {
                auto& sec = st.second[k];
                const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                vel[i] = static_cast<float>(b1 * vel[i] + (1.0 - b1) * gi);
                sec[i] = static_cast<float>(b2 * sec[i] + (1.0 - b2) * gi * gi);
                const double mhat = vel[i] / (1.0 - std::pow(b1, static_cast<double>(st.step)));
                const double vhat = sec[i] / (1.0 - std::pow(b2, static_cast<double>(st.step)));
                p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
}

}  // namespace

Model train(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg) {
    if (cfg.batch < 1 || cfg.epochs < 0) throw ConfigError("train: bad batch/epochs");
    Model model = init_model(spec, cfg.seed);
    if (cfg.epochs == 0) {
        model.train_meta.optimizer =
            cfg.optimizer == TrainConfig::Optimizer::SgdNesterov ? "sgd_nesterov" : "adam";
        return model;
    }
    Engine<float> eng(model);
    const auto trainable = trainable_counts(spec);
    const auto counts = spec.param_counts();

    OptimizerState st;
    st.velocity.resize(counts.size());
    st.second.resize(counts.size());
    for (std::size_t k = 0; k < counts.size(); ++k) {
        st.velocity[k].assign(counts[k], 0.0f);
        st.second[k].assign(counts[k], 0.0f);
    }

    const std::size_t n = static_cast<std::size_t>(data.inputs.n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    double initial_loss = 0.0, final_loss = 0.0;
    const int last_op = static_cast<int>(spec.ops.size()) - 1;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        if (cfg.lr_schedule) {
            if (epoch >= 2 * cfg.epochs / 3)
                lr *= 0.01;
            else if (epoch >= cfg.epochs / 3)
                lr *= 0.1;
        }
        Rng rng(derive_seed(cfg.seed, 0xE70C0000ULL + epoch));
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < n; lo += cfg.batch) {
            const std::size_t hi = std::min(n, lo + cfg.batch);
            Tensor4 batch = gather_batch(data.inputs, order, lo, hi, cfg.augment_flips, &rng);
            std::vector<int> labels(hi - lo);
            for (std::size_t b = 0; b < labels.size(); ++b) labels[b] = data.labels[order[lo + b]];

            typename Engine<float>::Trace tr;
            eng.forward(batch, 0, last_op, true, &tr);
            Tens4<float> d_logits;
            const double loss =
                ce_loss_and_grad(tr.input_of(last_op), nullptr, &labels, &d_logits);
            if (!std::isfinite(loss)) throw Diverged("train: non-finite loss");
            epoch_loss += loss;
            ++batches;

            std::vector<std::vector<float>> grads(counts.size());
            for (std::size_t k = 0; k < counts.size(); ++k) grads[k].assign(counts[k], 0.0f);
            eng.backward(tr, d_logits, &grads, last_op - 1);  // skip the softmax op
            apply_update(eng, grads, trainable, cfg, lr, st);
        }
        epoch_loss /= static_cast<double>(batches);
        if (epoch == 0) initial_loss = epoch_loss;
        final_loss = epoch_loss;
    }

    eng.store_weights(model);
    model.train_meta.epochs = cfg.epochs;
    model.train_meta.optimizer =
        cfg.optimizer == TrainConfig::Optimizer::SgdNesterov ? "sgd_nesterov" : "adam";
    model.train_meta.initial_train_loss = initial_loss;
    model.train_meta.final_train_loss = final_loss;
    return model;
}

namespace {

constexpr int kEvalBatch = 128;

Matrix forward_probs_batched(const Model& model, const Tensor4& batch) {
    Engine<float> eng(model);
    const int last = static_cast<int>(model.spec.ops.size()) - 1;
    Matrix out(batch.n, model.spec.classes());
    const std::size_t sample = static_cast<std::size_t>(batch.w) * batch.h * batch.c;
    for (int lo = 0; lo < batch.n; lo += kEvalBatch) {
        const int hi = std::min(batch.n, lo + kEvalBatch);
        Tensor4 chunk(hi - lo, batch.w, batch.h, batch.c);
        std::copy_n(batch.data.begin() + static_cast<std::size_t>(lo) * sample,
                    static_cast<std::size_t>(hi - lo) * sample, chunk.data.begin());
        Tens4<float> probs = eng.forward(chunk, 0, last, false, nullptr);
        for (int i = lo; i < hi; ++i)
            for (int j = 0; j < probs.c; ++j) out(i, j) = probs.at(i - lo, 0, 0, j);
    }
    return out;
}

}  // namespace

Matrix forward_probs(const Model& model, const Tensor4& batch) {
    return forward_probs_batched(model, batch);
}

ActivationTensor representation_map(const Model& model, const Tensor4& batch,
                                    const std::string& layer) {
    const TapPoint& tp = model.spec.tap(layer);
    Engine<float> eng(model);
    ActivationTensor out;
    out.layer = layer;
    out.tap = tp.kind;
    const Shape3 shape = eng.shapes()[tp.after_op];
    out.t = Tensor4(batch.n, shape.w, shape.h, shape.c);
    const std::size_t in_sample = static_cast<std::size_t>(batch.w) * batch.h * batch.c;
    const std::size_t out_sample = static_cast<std::size_t>(shape.w) * shape.h * shape.c;
    for (int lo = 0; lo < batch.n; lo += kEvalBatch) {
        const int hi = std::min(batch.n, lo + kEvalBatch);
        Tensor4 chunk(hi - lo, batch.w, batch.h, batch.c);
        std::copy_n(batch.data.begin() + static_cast<std::size_t>(lo) * in_sample,
                    static_cast<std::size_t>(hi - lo) * in_sample, chunk.data.begin());
        Tens4<float> acts = eng.forward(chunk, 0, tp.after_op, false, nullptr);
        std::copy_n(acts.data.begin(), acts.data.size(),
                    out.t.data.begin() + static_cast<std::size_t>(lo) * out_sample);
    }
    return out;
}

Matrix task_map(const Model& model, const ActivationTensor& acts, const std::string& layer) {
    const TapPoint& tp = model.spec.tap(layer);
    Engine<float> eng(model);
    const Shape3 shape = eng.shapes()[tp.after_op];
    if (acts.t.w != shape.w || acts.t.h != shape.h || acts.t.c != shape.c)
        throw ShapeMismatch("task_map: activation shape does not match layer");
    const int last = static_cast<int>(model.spec.ops.size()) - 1;
    Matrix out(acts.t.n, model.spec.classes());
    const std::size_t sample = static_cast<std::size_t>(shape.w) * shape.h * shape.c;
    for (int lo = 0; lo < acts.t.n; lo += kEvalBatch) {
        const int hi = std::min(acts.t.n, lo + kEvalBatch);
        Tens4<float> chunk(hi - lo, shape.w, shape.h, shape.c);
        std::copy_n(acts.t.data.begin() + static_cast<std::size_t>(lo) * sample,
                    static_cast<std::size_t>(hi - lo) * sample, chunk.data.begin());
        Tens4<float> probs = eng.forward(chunk, tp.after_op + 1, last, false, nullptr);
        for (int i = lo; i < hi; ++i)
            for (int j = 0; j < probs.c; ++j) out(i, j) = probs.at(i - lo, 0, 0, j);
    }
    return out;
}

Matrix flatten(const Tensor4& t) {
    Matrix m(t.rows(), t.c);
    for (std::size_t i = 0; i < t.data.size(); ++i) m.data()[i] = t.data[i];
    return m;
}

Matrix flatten(const ActivationTensor& acts) { return flatten(acts.t); }

Tensor4 unflatten(const Matrix& m, int n, int w, int h, int c) {
    if (m.rows() != static_cast<std::size_t>(n) * w * h || m.cols() != static_cast<std::size_t>(c))
        throw ShapeMismatch("unflatten: dimensions do not match matrix");
    Tensor4 t(n, w, h, c);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(m.data()[i]);
    return t;
}

Matrix tap_gradient(const Model& model, const Tensor4& batch, const std::string& layer,
                    GradTarget target) {
    const TapPoint& tp = model.spec.tap(layer);
    Engine<float> eng(model);
    const int last = static_cast<int>(model.spec.ops.size()) - 1;
    typename Engine<float>::Trace tr;
    eng.forward(batch, 0, last, false, &tr);

    const Tens4<float>& probs = tr.act(last);
    const int classes = probs.c;
    Tens4<float> seed(batch.n, 1, 1, classes);
    const bool at_probs = target == GradTarget::SumProbs || target == GradTarget::ArgmaxProb;
    for (int i = 0; i < batch.n; ++i) {
        if (target == GradTarget::SumProbs || target == GradTarget::SumLogits) {
            for (int j = 0; j < classes; ++j) seed.at(i, 0, 0, j) = 1.0f;
        } else {
            int best = 0;
            for (int j = 1; j < classes; ++j)
                if (probs.at(i, 0, 0, j) > probs.at(i, 0, 0, best)) best = j;
            seed.at(i, 0, 0, best) = 1.0f;
        }
    }
    Tens4<float> d =
        eng.backward(tr, seed, nullptr, at_probs ? last : last - 1, tp.after_op + 1);
    return flatten(d);
}

std::vector<std::vector<double>> param_gradients_f64(const Model& model, const Tensor4& batch,
                                                     LossKind loss, const Matrix* soft_targets,
                                                     const std::vector<int>* labels) {
    if (loss == LossKind::CrossEntropySoft && !soft_targets)
        throw InvalidInput("param_gradients_f64: soft targets required");
    if (loss == LossKind::CrossEntropyHard && !labels)
        throw InvalidInput("param_gradients_f64: labels required");
    Engine<double> eng(model);
    Tens4<double> input(batch.n, batch.w, batch.h, batch.c);
    for (std::size_t i = 0; i < batch.data.size(); ++i) input.data[i] = batch.data[i];
    const int last = static_cast<int>(model.spec.ops.size()) - 1;
    typename Engine<double>::Trace tr;
    eng.forward(input, 0, last, true, &tr);
    Tens4<double> d_logits;
    ce_loss_and_grad(tr.input_of(last),
                     loss == LossKind::CrossEntropySoft ? soft_targets : nullptr,
                     loss == LossKind::CrossEntropyHard ? labels : nullptr, &d_logits);
    const auto counts = model.spec.param_counts();
    std::vector<std::vector<double>> grads(counts.size());
    for (std::size_t k = 0; k < counts.size(); ++k) grads[k].assign(counts[k], 0.0);
    eng.backward(tr, d_logits, &grads, last - 1);
    return grads;
}

double accuracy(const Model& model, const Dataset& data) {
    Matrix probs = forward_probs(model, data.inputs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < probs.cols(); ++j)
            if (probs(i, j) > probs(i, best)) best = j;  // ties: lowest index wins
        if (static_cast<int>(best) == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probs.rows());
}

}  // namespace stitchlab::nn
