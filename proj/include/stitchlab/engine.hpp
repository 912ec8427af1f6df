// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <map>
#include <vector>

#include "stitchlab/errors.hpp"
#include "stitchlab/nnet.hpp"

namespace stitchlab::nn {

// Row-major GEMM: C = alpha * op(A) op(B) + beta * C. Backed by BLAS pinned
// to one thread so results are reproducible.
void gemm_rm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
             int lda, const float* b, int ldb, float beta, float* c, int ldc);
void gemm_rm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
             int lda, const double* b, int ldb, double beta, double* c, int ldc);

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

template <typename T>
struct BnCache {
    std::vector<T> mean, inv_std;
    bool train_mode = false;
};

template <typename T>
class Engine {
public:
    explicit Engine(const Model& model) : spec_(model.spec) {
        shapes_ = spec_.op_output_shapes();
        params_.resize(spec_.ops.size());
        const auto counts = spec_.param_counts();
        for (std::size_t k = 0; k < spec_.ops.size(); ++k) {
            if (model.weights.size() != spec_.ops.size())
                throw InvalidInput("engine: weight blob count does not match spec");
            if (model.weights[k].size() != counts[k])
                throw InvalidInput("engine: weight blob size mismatch");
            params_[k].assign(model.weights[k].begin(), model.weights[k].end());
        }
    }

    const NetworkSpec& spec() const { return spec_; }
    const std::vector<Shape3>& shapes() const { return shapes_; }
    std::vector<std::vector<T>>& params() { return params_; }
    const std::vector<std::vector<T>>& params() const { return params_; }

    void store_weights(Model& model) const {
        model.weights.resize(params_.size());
        for (std::size_t k = 0; k < params_.size(); ++k)
            model.weights[k].assign(params_[k].begin(), params_[k].end());
    }

    Shape3 input_shape_of(int op) const {
        if (op == 0) return Shape3{spec_.in_w, spec_.in_h, spec_.in_c};
        return shapes_[op - 1];
    }

    int logits_op() const { return static_cast<int>(spec_.ops.size()) - 1; }

    struct Trace {
        int first_op = 0, last_op = -1;
        Tens4<T> input;
        std::vector<Tens4<T>> acts;           // output of each op in range
        std::vector<BnCache<T>> bn;           // parallel to acts
        std::map<int, int> skip_source;       // LoadSkip/AddSkip op -> SaveSkip op
        const Tens4<T>& output() const { return acts.back(); }
        const Tens4<T>& act(int op) const { return acts[op - first_op]; }
        const Tens4<T>& input_of(int op) const {
            return op == first_op ? input : acts[op - 1 - first_op];
        }
    };

    /// Runs ops[first_op..last_op]. In train mode batchnorm uses batch
    /// statistics and updates the running buffers in place.
    Tens4<T> forward(const Tens4<T>& input, int first_op, int last_op, bool train_mode,
                     Trace* trace) {
        const int nops = static_cast<int>(spec_.ops.size());
        if (first_op < 0 || last_op >= nops || first_op > last_op)
            throw InvalidInput("engine: bad op range");
        if (trace) {
            trace->first_op = first_op;
            trace->last_op = last_op;
            trace->input = input;
            trace->acts.clear();
            trace->bn.assign(last_op - first_op + 1, BnCache<T>{});
            trace->skip_source.clear();
        }
        std::map<int, std::pair<int, Tens4<T>>> slots;  // slot -> (save op, tensor)
        Tens4<T> cur = input;
        for (int k = first_op; k <= last_op; ++k) {
            const LayerDesc& d = spec_.ops[k];
            BnCache<T> bn;
            Tens4<T> next;
            switch (d.kind) {
                case OpKind::Conv: next = conv_forward(cur, k); break;
                case OpKind::BatchNorm: next = bn_forward(cur, k, train_mode, bn); break;
                case OpKind::ReLU: next = relu_forward(cur); break;
                case OpKind::GlobalAvgPool: next = gap_forward(cur); break;
                case OpKind::Dense: next = dense_forward(cur, k); break;
                case OpKind::Logits: next = softmax_forward(cur); break;
                case OpKind::SaveSkip:
                    next = cur;
                    slots[d.slot] = {k, cur};
                    break;
                case OpKind::LoadSkip: {
                    auto it = slots.find(d.slot);
                    if (it == slots.end()) throw InvalidInput("engine: LoadSkip before save");
                    if (trace) trace->skip_source[k] = it->second.first;
                    next = it->second.second;
                    break;
                }
                case OpKind::AddSkip: {
                    auto it = slots.find(d.slot);
                    if (it == slots.end()) throw InvalidInput("engine: AddSkip before save");
                    if (trace) trace->skip_source[k] = it->second.first;
                    next = cur;
                    const Tens4<T>& saved = it->second.second;
                    if (saved.size() != next.size())
                        throw ShapeMismatch("engine: AddSkip shape mismatch");
                    for (std::size_t i = 0; i < next.data.size(); ++i)
                        next.data[i] += saved.data[i];
                    break;
                }
            }
            if (trace) {
                trace->bn[k - first_op] = std::move(bn);
                trace->acts.push_back(next);
            }
            cur = std::move(next);
        }
        return cur;
    }

    /// Backpropagates d_out (gradient at the output of ops[from_op], default
    /// the end of the trace) down to the input of ops[down_to] (default the
    /// start). When param_grads is given it must hold one correctly sized,
    /// zero-initialized blob per op; gradients accumulate.
    Tens4<T> backward(const Trace& tr, const Tens4<T>& d_out,
                      std::vector<std::vector<T>>* param_grads, int from_op = -1,
                      int down_to = -1) const {
        const int start = from_op < 0 ? tr.last_op : from_op;
        const int stop = down_to < 0 ? tr.first_op : down_to;
        Tens4<T> d = d_out;
        std::map<int, Tens4<T>> save_grads;  // SaveSkip op -> accumulated gradient
        for (int k = start; k >= stop; --k) {
            const LayerDesc& desc = spec_.ops[k];
            const Tens4<T>& in = tr.input_of(k);
            switch (desc.kind) {
                case OpKind::Conv:
                    d = conv_backward(in, d, k, param_grads);
                    break;
                case OpKind::BatchNorm:
                    d = bn_backward(in, d, k, tr.bn[k - tr.first_op], param_grads);
                    break;
                case OpKind::ReLU:
                    d = relu_backward(in, d);
                    break;
                case OpKind::GlobalAvgPool:
                    d = gap_backward(in, d);
                    break;
                case OpKind::Dense:
                    d = dense_backward(in, d, k, param_grads);
                    break;
                case OpKind::Logits:
                    d = softmax_backward(tr.act(k), d);
                    break;
                case OpKind::SaveSkip: {
                    auto it = save_grads.find(k);
                    if (it != save_grads.end()) {
                        for (std::size_t i = 0; i < d.data.size(); ++i)
                            d.data[i] += it->second.data[i];
                    }
                    break;
                }
                case OpKind::LoadSkip: {
                    accumulate_save_grad(save_grads, tr.skip_source.at(k), d);
                    d = Tens4<T>(in.n, in.w, in.h, in.c);  // main path blocked here
                    break;
                }
                case OpKind::AddSkip:
                    accumulate_save_grad(save_grads, tr.skip_source.at(k), d);
                    break;
            }
        }
        return d;
    }

private:
    static void accumulate_save_grad(std::map<int, Tens4<T>>& save_grads, int src,
                                     const Tens4<T>& g) {
        auto it = save_grads.find(src);
        if (it == save_grads.end()) {
            save_grads.emplace(src, g);
        } else {
            for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
        }
    }

    Tens4<T> conv_forward(const Tens4<T>& in, int op) const {
        const LayerDesc& d = spec_.ops[op];
        const Shape3 os = shapes_[op];
        const int k = d.kernel, stride = d.stride, pad = k / 2;
        const int ic = in.c, oc = os.c;
        Tens4<T> out(in.n, os.w, os.h, oc);
        const int rows = in.n * os.w * os.h;
        const int ck = k * k * ic;
        std::vector<T> col;
        im2col(in, k, stride, pad, os.w, os.h, col);
        gemm_rm(false, false, rows, oc, ck, T{1}, col.data(), ck, params_[op].data(), oc,
                T{0}, out.data.data(), oc);
        const T* bias = params_[op].data() + static_cast<std::size_t>(ck) * oc;
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < oc; ++j) out.data[static_cast<std::size_t>(r) * oc + j] += bias[j];
        return out;
    }

    Tens4<T> conv_backward(const Tens4<T>& in, const Tens4<T>& d_out, int op,
                           std::vector<std::vector<T>>* param_grads) const {
        const LayerDesc& d = spec_.ops[op];
        const Shape3 os = shapes_[op];
        const int k = d.kernel, stride = d.stride, pad = k / 2;
        const int ic = in.c, oc = os.c;
        const int rows = in.n * os.w * os.h;
        const int ck = k * k * ic;
        std::vector<T> col;
        im2col(in, k, stride, pad, os.w, os.h, col);
        if (param_grads) {
            auto& pg = (*param_grads)[op];
            gemm_rm(true, false, ck, oc, rows, T{1}, col.data(), ck, d_out.data.data(), oc,
                    T{1}, pg.data(), oc);
            T* db = pg.data() + static_cast<std::size_t>(ck) * oc;
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < oc; ++j) db[j] += d_out.data[static_cast<std::size_t>(r) * oc + j];
        }
        std::vector<T> dcol(static_cast<std::size_t>(rows) * ck, T{0});
        gemm_rm(false, true, rows, ck, oc, T{1}, d_out.data.data(), oc, params_[op].data(),
                oc, T{0}, dcol.data(), ck);
        Tens4<T> d_in(in.n, in.w, in.h, in.c);
        col2im(dcol, k, stride, pad, os.w, os.h, d_in);
        return d_in;
    }

    void im2col(const Tens4<T>& in, int k, int stride, int pad, int ow, int oh,
                std::vector<T>& col) const {
        const int ic = in.c;
        const std::size_t ck = static_cast<std::size_t>(k) * k * ic;
        col.assign(static_cast<std::size_t>(in.n) * ow * oh * ck, T{0});
        std::size_t r = 0;
        for (int i = 0; i < in.n; ++i) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int oy = 0; oy < oh; ++oy, ++r) {
                    T* crow = col.data() + r * ck;
                    for (int dx = 0; dx < k; ++dx) {
                        const int x = ox * stride + dx - pad;
                        if (x < 0 || x >= in.w) continue;
                        for (int dy = 0; dy < k; ++dy) {
                            const int y = oy * stride + dy - pad;
                            if (y < 0 || y >= in.h) continue;
                            const T* src =
                                in.data.data() +
                                ((static_cast<std::size_t>(i) * in.w + x) * in.h + y) * ic;
                            std::memcpy(crow + (static_cast<std::size_t>(dx) * k + dy) * ic,
                                        src, sizeof(T) * ic);
                        }
                    }
                }
            }
        }
    }

    void col2im(const std::vector<T>& dcol, int k, int stride, int pad, int ow, int oh,
                Tens4<T>& d_in) const {
        const int ic = d_in.c;
        const std::size_t ck = static_cast<std::size_t>(k) * k * ic;
        std::size_t r = 0;
        for (int i = 0; i < d_in.n; ++i) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int oy = 0; oy < oh; ++oy, ++r) {
                    const T* crow = dcol.data() + r * ck;
                    for (int dx = 0; dx < k; ++dx) {
                        const int x = ox * stride + dx - pad;
                        if (x < 0 || x >= d_in.w) continue;
                        for (int dy = 0; dy < k; ++dy) {
                            const int y = oy * stride + dy - pad;
                            if (y < 0 || y >= d_in.h) continue;
                            T* dst = d_in.data.data() +
                                     ((static_cast<std::size_t>(i) * d_in.w + x) * d_in.h + y) * ic;
                            const T* src = crow + (static_cast<std::size_t>(dx) * k + dy) * ic;
                            for (int ci = 0; ci < ic; ++ci) dst[ci] += src[ci];
                        }
                    }
                }
            }
        }
    }

    Tens4<T> bn_forward(const Tens4<T>& in, int op, bool train_mode, BnCache<T>& cache) {
        const int c = in.c;
        const std::size_t m = in.rows();
        auto& p = params_[op];
        cache.mean.assign(c, T{0});
        cache.inv_std.assign(c, T{0});
        cache.train_mode = train_mode;
        if (train_mode) {
            // Batch statistics with double accumulation, fixed order.
            std::vector<double> mean(c, 0.0), var(c, 0.0);
            for (std::size_t r = 0; r < m; ++r)
                for (int j = 0; j < c; ++j) mean[j] += in.data[r * c + j];
            for (int j = 0; j < c; ++j) mean[j] /= static_cast<double>(m);
            for (std::size_t r = 0; r < m; ++r)
                for (int j = 0; j < c; ++j) {
                    const double dv = in.data[r * c + j] - mean[j];
                    var[j] += dv * dv;
                }
            for (int j = 0; j < c; ++j) var[j] /= static_cast<double>(m);
            for (int j = 0; j < c; ++j) {
                cache.mean[j] = static_cast<T>(mean[j]);
                cache.inv_std[j] = static_cast<T>(1.0 / std::sqrt(var[j] + kBnEps));
                p[2 * c + j] = static_cast<T>((1.0 - kBnMomentum) * p[2 * c + j] +
                                              kBnMomentum * mean[j]);
                p[3 * c + j] = static_cast<T>((1.0 - kBnMomentum) * p[3 * c + j] +
                                              kBnMomentum * var[j]);
            }
        } else {
            for (int j = 0; j < c; ++j) {
                cache.mean[j] = p[2 * c + j];
                cache.inv_std[j] =
                    static_cast<T>(1.0 / std::sqrt(static_cast<double>(p[3 * c + j]) + kBnEps));
            }
        }
        Tens4<T> out(in.n, in.w, in.h, in.c);
        for (std::size_t r = 0; r < m; ++r)
            for (int j = 0; j < c; ++j)
                out.data[r * c + j] =
                    p[j] * (in.data[r * c + j] - cache.mean[j]) * cache.inv_std[j] + p[c + j];
        return out;
    }

    Tens4<T> bn_backward(const Tens4<T>& in, const Tens4<T>& d_out, int op,
                         const BnCache<T>& cache, std::vector<std::vector<T>>* param_grads) const {
        const int c = in.c;
        const std::size_t m = in.rows();
        const auto& p = params_[op];
        std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0);
        for (std::size_t r = 0; r < m; ++r)
            for (int j = 0; j < c; ++j) {
                const double xhat =
                    (in.data[r * c + j] - cache.mean[j]) * cache.inv_std[j];
                dgamma[j] += d_out.data[r * c + j] * xhat;
                dbeta[j] += d_out.data[r * c + j];
            }
        if (param_grads) {
            auto& pg = (*param_grads)[op];
            for (int j = 0; j < c; ++j) {
                pg[j] += static_cast<T>(dgamma[j]);
                pg[c + j] += static_cast<T>(dbeta[j]);
            }
        }
        Tens4<T> d_in(in.n, in.w, in.h, in.c);
        if (cache.train_mode) {
            const double inv_m = 1.0 / static_cast<double>(m);
            for (std::size_t r = 0; r < m; ++r)
                for (int j = 0; j < c; ++j) {
                    const double xhat =
                        (in.data[r * c + j] - cache.mean[j]) * cache.inv_std[j];
                    d_in.data[r * c + j] = static_cast<T>(
                        static_cast<double>(p[j]) * cache.inv_std[j] *
                        (d_out.data[r * c + j] - dbeta[j] * inv_m - xhat * dgamma[j] * inv_m));
                }
        } else {
            for (std::size_t r = 0; r < m; ++r)
                for (int j = 0; j < c; ++j)
                    d_in.data[r * c + j] = d_out.data[r * c + j] * p[j] * cache.inv_std[j];
        }
        return d_in;
    }

    static Tens4<T> relu_forward(const Tens4<T>& in) {
        Tens4<T> out = in;
        for (auto& v : out.data)
            if (v < T{0}) v = T{0};
        return out;
    }

    static Tens4<T> relu_backward(const Tens4<T>& in, const Tens4<T>& d_out) {
        Tens4<T> d = d_out;
        for (std::size_t i = 0; i < d.data.size(); ++i)
            if (in.data[i] <= T{0}) d.data[i] = T{0};
        return d;
    }

    static Tens4<T> gap_forward(const Tens4<T>& in) {
        Tens4<T> out(in.n, 1, 1, in.c);
        const double scale = 1.0 / (static_cast<double>(in.w) * in.h);
        for (int i = 0; i < in.n; ++i)
            for (int j = 0; j < in.c; ++j) {
                double acc = 0.0;
                for (int x = 0; x < in.w; ++x)
                    for (int y = 0; y < in.h; ++y) acc += in.at(i, x, y, j);
                out.at(i, 0, 0, j) = static_cast<T>(acc * scale);
            }
        return out;
    }

    static Tens4<T> gap_backward(const Tens4<T>& in, const Tens4<T>& d_out) {
        Tens4<T> d(in.n, in.w, in.h, in.c);
        const T scale = static_cast<T>(1.0 / (static_cast<double>(in.w) * in.h));
        for (int i = 0; i < in.n; ++i)
            for (int x = 0; x < in.w; ++x)
                for (int y = 0; y < in.h; ++y)
                    for (int j = 0; j < in.c; ++j)
                        d.at(i, x, y, j) = d_out.at(i, 0, 0, j) * scale;
        return d;
    }

    Tens4<T> dense_forward(const Tens4<T>& in, int op) const {
        const Shape3 os = shapes_[op];
        const int f = in.w * in.h * in.c;
        const int out_dim = os.c;
        Tens4<T> out(in.n, 1, 1, out_dim);
        gemm_rm(false, false, in.n, out_dim, f, T{1}, in.data.data(), f, params_[op].data(),
                out_dim, T{0}, out.data.data(), out_dim);
        const T* bias = params_[op].data() + static_cast<std::size_t>(f) * out_dim;
        for (int i = 0; i < in.n; ++i)
            for (int j = 0; j < out_dim; ++j)
                out.data[static_cast<std::size_t>(i) * out_dim + j] += bias[j];
        return out;
    }

    Tens4<T> dense_backward(const Tens4<T>& in, const Tens4<T>& d_out, int op,
                            std::vector<std::vector<T>>* param_grads) const {
        const Shape3 os = shapes_[op];
        const int f = in.w * in.h * in.c;
        const int out_dim = os.c;
        if (param_grads) {
            auto& pg = (*param_grads)[op];
            gemm_rm(true, false, f, out_dim, in.n, T{1}, in.data.data(), f,
                    d_out.data.data(), out_dim, T{1}, pg.data(), out_dim);
            T* db = pg.data() + static_cast<std::size_t>(f) * out_dim;
            for (int i = 0; i < in.n; ++i)
                for (int j = 0; j < out_dim; ++j)
                    db[j] += d_out.data[static_cast<std::size_t>(i) * out_dim + j];
        }
        Tens4<T> d_in(in.n, in.w, in.h, in.c);
        gemm_rm(false, true, in.n, f, out_dim, T{1}, d_out.data.data(), out_dim,
                params_[op].data(), out_dim, T{0}, d_in.data.data(), f);
        return d_in;
    }

    static Tens4<T> softmax_forward(const Tens4<T>& in) {
        Tens4<T> out(in.n, 1, 1, in.c);
        for (int i = 0; i < in.n; ++i) {
            double mx = -1e300;
            for (int j = 0; j < in.c; ++j) mx = std::max(mx, static_cast<double>(in.at(i, 0, 0, j)));
            double z = 0.0;
            for (int j = 0; j < in.c; ++j) z += std::exp(static_cast<double>(in.at(i, 0, 0, j)) - mx);
            for (int j = 0; j < in.c; ++j)
                out.at(i, 0, 0, j) =
                    static_cast<T>(std::exp(static_cast<double>(in.at(i, 0, 0, j)) - mx) / z);
        }
        return out;
    }

    static Tens4<T> softmax_backward(const Tens4<T>& probs, const Tens4<T>& d_out) {
        Tens4<T> d(probs.n, 1, 1, probs.c);
        for (int i = 0; i < probs.n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < probs.c; ++j)
                dot += static_cast<double>(d_out.at(i, 0, 0, j)) * probs.at(i, 0, 0, j);
            for (int j = 0; j < probs.c; ++j)
                d.at(i, 0, 0, j) = static_cast<T>(
                    probs.at(i, 0, 0, j) * (static_cast<double>(d_out.at(i, 0, 0, j)) - dot));
        }
        return d;
    }

    NetworkSpec spec_;
    std::vector<Shape3> shapes_;
    std::vector<std::vector<T>> params_;
};

/// Size of the trainable prefix of each op's parameter blob (batchnorm
/// running stats are buffers, not parameters).
std::vector<std::size_t> trainable_counts(const NetworkSpec& spec);

/// Stable mean cross-entropy over the batch from pre-softmax logits; fills
/// d_logits with the mean-loss gradient (p - t)/n when non-null.
template <typename T>
double ce_loss_and_grad(const Tens4<T>& logits, const Matrix* soft_targets,
                        const std::vector<int>* labels, Tens4<T>* d_logits) {
    const int n = logits.n, c = logits.c;
    if (d_logits) *d_logits = Tens4<T>(n, 1, 1, c);
    double total = 0.0;
    std::vector<double> logp(c);
    for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(logits.at(i, 0, 0, j)));
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(logits.at(i, 0, 0, j)) - mx);
        const double logz = std::log(z) + mx;
        for (int j = 0; j < c; ++j) logp[j] = static_cast<double>(logits.at(i, 0, 0, j)) - logz;
        for (int j = 0; j < c; ++j) {
            const double t = soft_targets ? (*soft_targets)(i, j)
                                          : (labels && (*labels)[i] == j ? 1.0 : 0.0);
            if (t != 0.0) total -= t * logp[j];
            if (d_logits)
                d_logits->at(i, 0, 0, j) =
                    static_cast<T>((std::exp(logp[j]) - t) / static_cast<double>(n));
        }
    }
    return total / static_cast<double>(n);
}

template <typename T>
Matrix probs_to_matrix(const Tens4<T>& probs) {
    Matrix m(probs.n, probs.c);
    for (int i = 0; i < probs.n; ++i)
        for (int j = 0; j < probs.c; ++j) m(i, j) = probs.at(i, 0, 0, j);
    return m;
}

}  // namespace stitchlab::nn
