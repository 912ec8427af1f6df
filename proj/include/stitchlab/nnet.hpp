// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "stitchlab/linalg.hpp"

namespace stitchlab::nn {

template <typename T>
struct Tens4 {
    int n = 0, w = 0, h = 0, c = 0;
    std::vector<T> data;  // index ((i*w + x)*h + y)*c + ch

    Tens4() = default;
    Tens4(int n_, int w_, int h_, int c_)
        : n(n_), w(w_), h(h_), c(c_),
          data(static_cast<std::size_t>(n_) * w_ * h_ * c_, T{0}) {}

    T& at(int i, int x, int y, int ch) {
        return data[((static_cast<std::size_t>(i) * w + x) * h + y) * c + ch];
    }
    T at(int i, int x, int y, int ch) const {
        return data[((static_cast<std::size_t>(i) * w + x) * h + y) * c + ch];
    }
    std::size_t rows() const { return static_cast<std::size_t>(n) * w * h; }
    std::size_t size() const { return data.size(); }
};

using Tensor4 = Tens4<float>;

enum class OpKind {
    Conv,
    BatchNorm,
    ReLU,
    GlobalAvgPool,
    Dense,
    Logits,
    SaveSkip,
    LoadSkip,
    AddSkip,
};

struct LayerDesc {
    OpKind kind;
    int kernel = 0;            // Conv: k x k
    int out_channels = 0;      // Conv: baseline width (pre-multiplier)
    int stride = 1;            // Conv
    int out_dim = 0;           // Dense
    bool scale_width = true;   // width multiplier applies (classifier Dense opts out)
    int slot = -1;             // skip ops
};

enum class TapKind { PostBN_PreReLU, PostAdd, PostReLU };

struct TapPoint {
    std::string name;
    int after_op = -1;  // activation read after ops[after_op]
    TapKind kind = TapKind::PostBN_PreReLU;
};

struct Shape3 {
    int w = 0, h = 0, c = 0;
    bool operator==(const Shape3&) const = default;
};

struct NetworkSpec {
    std::vector<LayerDesc> ops;
    int in_w = 16, in_h = 16, in_c = 1;
    int width_multiplier = 1;
    std::vector<TapPoint> taps;
    std::string arch = "custom";

    /// Eight conv stages with baseline widths {8,8,16,16,16,32,32,32},
    /// strides 2 at stages 3 and 6, then GAP/Dense/Logits. Taps layer1..layer8
    /// read after each batchnorm.
    static NetworkSpec micro10(int width_multiplier = 1, int classes = 10, int in_w = 16,
                               int in_h = 16, int in_c = 1);

    /// Stem conv + 3 levels x 2 residual blocks, baseline widths {8,16,32},
    /// projection shortcuts at the level transitions. Taps layer0.0 and
    /// layerX.Y read after the residual additions.
    static NetworkSpec micro_residual(int width_multiplier = 1, int classes = 10,
                                      int in_w = 16, int in_h = 16, int in_c = 1);

    int effective_channels(const LayerDesc& d) const;
    int effective_out_dim(const LayerDesc& d) const;

    /// Output shape after every op; throws InvalidInput if the chain is
    /// inconsistent or there is not exactly one terminal Logits.
    std::vector<Shape3> op_output_shapes() const;

    const TapPoint& tap(const std::string& layer) const;  // throws UnknownLayer
    Shape3 tap_shape(const std::string& layer) const;
    int classes() const;

    std::vector<std::size_t> param_counts() const;

    nlohmann::json to_json() const;
    static NetworkSpec from_json(const nlohmann::json& j);
};

struct TrainMeta {
    int epochs = 0;
    std::string optimizer;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
};

struct Model {
    NetworkSpec spec;
    std::vector<std::vector<float>> weights;  // one blob per op, layout per op kind
    std::uint64_t seed = 0;
    TrainMeta train_meta;
};

struct Dataset {
    enum class Split { Train, Test };
    Tensor4 inputs;
    std::vector<int> labels;
    int classes = 10;
    Split split = Split::Train;
    std::uint64_t seed = 0;
};

/// Procedural shape/texture images, one shape family per class, balanced
/// labels, per-sample streams derived from (seed, split, index) so the two
/// splits are disjoint by construction.
Dataset synth_dataset(std::uint64_t seed, int n, int classes, int w = 16, int h = 16,
                      Dataset::Split split = Dataset::Split::Train);

struct TrainConfig {
    enum class Optimizer { SgdNesterov, Adam };
    Optimizer optimizer = Optimizer::SgdNesterov;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch = 64;
    int epochs = 30;
    std::uint64_t seed = 0;
    bool lr_schedule = true;    // divide lr by 10 at 1/3 and 2/3 of training
    bool augment_flips = false; // horizontal-flip hook, off by default
};

Model init_model(const NetworkSpec& spec, std::uint64_t seed);
Model train(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg);

struct ActivationTensor {
    Tensor4 t;
    std::string layer;
    TapKind tap = TapKind::PostBN_PreReLU;
};

/// Class probabilities for a batch, one row per sample.
Matrix forward_probs(const Model& model, const Tensor4& batch);

ActivationTensor representation_map(const Model& model, const Tensor4& batch,
                                    const std::string& layer);
Matrix task_map(const Model& model, const ActivationTensor& acts, const std::string& layer);

/// (n*w*h) x c view of the tensor; row index ((i*w + x)*h + y).
Matrix flatten(const ActivationTensor& acts);
Matrix flatten(const Tensor4& t);
Tensor4 unflatten(const Matrix& m, int n, int w, int h, int c);

enum class LossKind { CrossEntropyHard, CrossEntropySoft };

/// Scalar whose per-sample gradient seeds the activation-gradient pass.
enum class GradTarget { SumProbs, ArgmaxProb, SumLogits, ArgmaxLogit };

/// Per-sample gradient of the target scalar with respect to the tap
/// activations, flattened like the activations themselves.
Matrix tap_gradient(const Model& model, const Tensor4& batch, const std::string& layer,
                    GradTarget target);

/// Gradients of the mean loss over the batch with respect to every trainable
/// parameter, computed with the whole graph in 64-bit floats. soft_targets is
/// required for CrossEntropySoft, labels for CrossEntropyHard.
std::vector<std::vector<double>> param_gradients_f64(const Model& model, const Tensor4& batch,
                                                     LossKind loss,
                                                     const Matrix* soft_targets,
                                                     const std::vector<int>* labels);

double accuracy(const Model& model, const Dataset& data);

// Model file: magic "MDL1", version u16, length-prefixed JSON header, then
// per-op f32 little-endian weight blobs in spec order.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// Activation file: magic "ACT1", rank u8, u32 dims, f32 payload, u64 CRC.
void save_activations(const ActivationTensor& acts, const std::string& path);
ActivationTensor load_activations(const std::string& path);

std::uint64_t crc64(const void* data, std::size_t len);

}  // namespace stitchlab::nn
