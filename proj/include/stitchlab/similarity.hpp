// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stitchlab/linalg.hpp"

namespace stitchlab::sim {

/// Alignment of two Gram matrices: <K,L>_F / (|K|_F |L|_F).
double kernel_alignment(const Matrix& k, const Matrix& l);

/// Kernel alignment of the doubly-centered Grams CKC, CLC.
double cka(const Matrix& k, const Matrix& l);

/// Feature-space linear CKA: centers columns of x and y, then
/// |X^T Y|_F^2 / (|X^T X|_F |Y^T Y|_F).
double rv(const Matrix& x, const Matrix& y);

/// Coefficient of determination of the least squares fit A -> B:
/// 1 - |A A^+ B - B|_F^2 / |B|_F^2. The denominator is uncentered, so the
/// value can go negative when the best fit is worse than the zero map.
double r2_lr(const Matrix& a, const Matrix& b);

/// Arithmetic mean of the canonical correlations between x and y
/// (columns centered internally). Requires n > max(p, q).
double cca_mean(const Matrix& x, const Matrix& y);

/// CCA after truncating each centered input to the fewest leading SVD
/// components covering var_fraction of the squared singular value mass.
double svcca(const Matrix& x, const Matrix& y, double var_fraction = 0.99);

enum class Index { KA, CKA, RV, R2LR, CCA, SVCCA };

const char* index_name(Index i);

struct SimilarityReport {
    Index index;
    double value = 0.0;
    std::size_t n_samples = 0;
    std::map<std::string, double> meta;
};

/// One JSON object per line: {"index": str, "value": float, "n": int, "meta": {...}}.
std::string to_json_line(const SimilarityReport& r);

/// Streaming raw second moments of paired row streams. Lets the indices run
/// over activation sets too large to materialize as dense f64 matrices.
class CrossMoments {
public:
    CrossMoments(std::size_t p, std::size_t q);

    void add_row(const double* x, const double* y);
    void add_row(const float* x, const float* y);
    void add_rows(const Matrix& x, const Matrix& y);

    std::size_t n() const { return n_; }
    std::size_t p() const { return p_; }
    std::size_t q() const { return q_; }

    Matrix centered_xx() const;
    Matrix centered_xy() const;
    Matrix centered_yy() const;

    double rv() const;
    double cca_mean() const;
    double svcca(double var_fraction = 0.99) const;
    /// R^2 of [X 1] -> Y computed from the accumulated moments.
    double r2_lr_with_bias() const;

private:
    std::size_t p_, q_, n_ = 0;
    std::vector<double> sum_x_, sum_y_;
    Matrix sxx_, sxy_, syy_;  // raw (uncentered) second moments
};

}  // namespace stitchlab::sim
