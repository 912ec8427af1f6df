// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "stitchlab/nnet.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab::nn {

namespace {

constexpr int kMaxClasses = 10;

struct ShapeParams {
    double cx, cy, r, amp;
    double period, phase, phase2;
};

// One renderer per class family; intensity for pixel (x, y) in [0, 1].
double shape_value(int cls, int x, int y, const ShapeParams& p) {
    const double dx = x - p.cx;
    const double dy = y - p.cy;
    const double d = std::sqrt(dx * dx + dy * dy);
    const double box = std::max(std::abs(dx), std::abs(dy));
    switch (cls) {
        case 0:  // filled disk
            return d <= p.r ? 1.0 : 0.0;
        case 1:  // ring
            return std::abs(d - p.r) <= 1.1 ? 1.0 : 0.0;
        case 2:  // filled square
            return box <= p.r * 0.8 ? 1.0 : 0.0;
        case 3:  // square outline
            return std::abs(box - p.r * 0.8) <= 0.9 ? 1.0 : 0.0;
        case 4:  // plus
            return (std::abs(dx) <= 1.2 || std::abs(dy) <= 1.2) && box <= p.r ? 1.0 : 0.0;
        case 5:  // diagonal cross
            return (std::abs(dx - dy) <= 1.6 || std::abs(dx + dy) <= 1.6) && box <= p.r ? 1.0
                                                                                        : 0.0;
        case 6:  // horizontal stripes
            return std::fmod(y + p.phase, p.period) < p.period / 2 ? 1.0 : 0.0;
        case 7:  // vertical stripes
            return std::fmod(x + p.phase, p.period) < p.period / 2 ? 1.0 : 0.0;
        case 8: {  // checkerboard
            const int cell = static_cast<int>(p.period);
            const int qx = (x + static_cast<int>(p.phase)) / cell;
            const int qy = (y + static_cast<int>(p.phase2)) / cell;
            return (qx + qy) % 2 == 0 ? 1.0 : 0.0;
        }
        case 9:  // diagonal stripes
            return std::fmod(x + y + p.phase, p.period) < p.period / 2 ? 1.0 : 0.0;
        default:
            return 0.0;
    }
}

}  // namespace

Dataset synth_dataset(std::uint64_t seed, int n, int classes, int w, int h,
                      Dataset::Split split) {
    if (classes < 2) throw InvalidInput("synth_dataset: need at least 2 classes");
    if (classes > kMaxClasses) throw InvalidInput("synth_dataset: at most 10 classes");
    if (n < 1 || w < 8 || h < 8) throw InvalidInput("synth_dataset: bad dimensions");
    Dataset ds;
    ds.inputs = Tensor4(n, w, h, 1);
    ds.labels.resize(n);
    ds.classes = classes;
    ds.split = split;
    ds.seed = seed;
    const std::uint64_t split_tag =
        split == Dataset::Split::Train ? 0x545241494EULL : 0x54455354ULL;
    for (int i = 0; i < n; ++i) {
        const int cls = i % classes;
        ds.labels[i] = cls;
        Rng rng(derive_seed(derive_seed(seed, split_tag), static_cast<std::uint64_t>(i)));
        ShapeParams p;
        p.cx = rng.uniform(w * 0.38, w * 0.56);
        p.cy = rng.uniform(h * 0.38, h * 0.56);
        p.r = rng.uniform(3.4, 5.2);
        p.amp = rng.uniform(0.65, 1.0);
        p.period = 3.0 + static_cast<double>(rng.uniform_below(2));  // 3 or 4
        p.phase = rng.uniform(0.0, p.period);
        p.phase2 = rng.uniform(0.0, p.period);
        if (cls == 8) p.period = 2.0 + static_cast<double>(rng.uniform_below(2));
        for (int x = 0; x < w; ++x)
            for (int y = 0; y < h; ++y) {
                const double v =
                    p.amp * shape_value(cls, x, y, p) + rng.normal(0.0, 0.06);
                ds.inputs.at(i, x, y, 0) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    }
    return ds;
}

}  // namespace stitchlab::nn
