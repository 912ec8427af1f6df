// SPDX-License-Identifier: Apache-2.0
#include "stitchlab/similarity.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace stitchlab::sim {

namespace {

constexpr double kNormFloor = 1e-300;

Matrix double_center(const Matrix& k) {
    // C K C with C = I - 11^T/m, written out as row/column mean removal.
    const std::size_t m = k.rows();
    std::vector<double> row_mean(m, 0.0), col_mean(m, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            row_mean[i] += k(i, j);
            col_mean[j] += k(i, j);
            total += k(i, j);
        }
    for (auto& v : row_mean) v /= static_cast<double>(m);
    for (auto& v : col_mean) v /= static_cast<double>(m);
    total /= static_cast<double>(m) * static_cast<double>(m);
    Matrix c(m, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            c(i, j) = k(i, j) - row_mean[i] - col_mean[j] + total;
    return c;
}

// Mean canonical correlation from centered second-moment matrices.
double cca_core(const Matrix& cxx, const Matrix& cxy, const Matrix& cyy) {
    const double rank_tol = 1e-12;
    const std::size_t rank_x = [&] {
        SymEigResult e = sym_eig(cxx);
        return numerical_rank(e.values, rank_tol);
    }();
    const std::size_t rank_y = [&] {
        SymEigResult e = sym_eig(cyy);
        return numerical_rank(e.values, rank_tol);
    }();
    const std::size_t count = std::min(rank_x, rank_y);
    if (count == 0) throw ZeroNorm("cca: an input has rank zero after centering");

    Matrix wx = invsqrt_psd(cxx, rank_tol);
    Matrix wy = invsqrt_psd(cyy, rank_tol);
    Matrix t = matmul(wx, matmul(cxy, wy));
    SvdResult d = svd(t);
    double acc = 0.0;
    for (std::size_t i = 0; i < count && i < d.s.size(); ++i)
        acc += std::clamp(d.s[i], 0.0, 1.0);
    return acc / static_cast<double>(count);
}

struct Truncation {
    Matrix basis;  // p x k eigenvector block
    std::size_t k;
};

Truncation truncate_basis(const Matrix& cov, double var_fraction) {
    SymEigResult e = sym_eig(cov);
    double total = 0.0;
    for (double v : e.values) total += std::max(v, 0.0);
    if (total <= kNormFloor) throw ZeroNorm("svcca: constant input");
    std::size_t k = 0;
    double acc = 0.0;
    while (k < e.values.size() && acc < var_fraction * total - 1e-15 * total) {
        acc += std::max(e.values[k], 0.0);
        ++k;
    }
    k = std::max<std::size_t>(k, 1);
    Truncation t;
    t.k = k;
    t.basis = Matrix(cov.rows(), k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < cov.rows(); ++i) t.basis(i, j) = e.vectors(i, j);
    return t;
}

}  // namespace

double kernel_alignment(const Matrix& k, const Matrix& l) {
    if (k.rows() != k.cols() || l.rows() != l.cols())
        throw ShapeMismatch("kernel_alignment: Gram matrices must be square");
    if (k.rows() != l.rows()) throw ShapeMismatch("kernel_alignment: size mismatch");
    const double nk = frobenius_norm(k);
    const double nl = frobenius_norm(l);
    if (nk <= kNormFloor || nl <= kNormFloor)
        throw ZeroNorm("kernel_alignment: zero-norm Gram matrix");
    return frobenius_inner(k, l) / (nk * nl);
}

double cka(const Matrix& k, const Matrix& l) {
    if (k.rows() != k.cols() || l.rows() != l.cols())
        throw ShapeMismatch("cka: Gram matrices must be square");
    if (k.rows() != l.rows()) throw ShapeMismatch("cka: size mismatch");
    Matrix kc = double_center(k);
    Matrix lc = double_center(l);
    const double nk = frobenius_norm(kc);
    const double nl = frobenius_norm(lc);
    if (nk <= kNormFloor || nl <= kNormFloor)
        throw ZeroNorm("cka: centered Gram vanishes (constant representation)");
    return frobenius_inner(kc, lc) / (nk * nl);
}

double rv(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) throw ShapeMismatch("rv: row counts differ");
    if (x.rows() < 2) throw InvalidInput("rv: need at least 2 rows");
    CrossMoments m(x.cols(), y.cols());
    m.add_rows(x, y);
    return m.rv();
}

double r2_lr(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeMismatch("r2_lr: row counts differ");
    const double nb = frobenius_norm(b);
    if (nb <= kNormFloor) throw ZeroNorm("r2_lr: target has zero norm");
    Matrix m = matmul(pseudoinverse(a), b);
    Matrix r = matmul(a, m) - b;
    const double rn = frobenius_norm(r);
    return 1.0 - (rn * rn) / (nb * nb);
}

double cca_mean(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) throw ShapeMismatch("cca_mean: row counts differ");
    if (x.rows() <= std::max(x.cols(), y.cols()))
        throw DegenerateInput("cca_mean: need n > max(p, q)");
    CrossMoments m(x.cols(), y.cols());
    m.add_rows(x, y);
    return m.cca_mean();
}

double svcca(const Matrix& x, const Matrix& y, double var_fraction) {
    if (var_fraction <= 0.0 || var_fraction > 1.0)
        throw InvalidInput("svcca: var_fraction must be in (0, 1]");
    if (x.rows() != y.rows()) throw ShapeMismatch("svcca: row counts differ");
    if (x.rows() <= std::max(x.cols(), y.cols()))
        throw DegenerateInput("svcca: need n > max(p, q)");
    CrossMoments m(x.cols(), y.cols());
    m.add_rows(x, y);
    return m.svcca(var_fraction);
}

const char* index_name(Index i) {
    switch (i) {
        case Index::KA: return "KA";
        case Index::CKA: return "CKA";
        case Index::RV: return "RV";
        case Index::R2LR: return "R2LR";
        case Index::CCA: return "CCA";
        case Index::SVCCA: return "SVCCA";
    }
    return "?";
}

std::string to_json_line(const SimilarityReport& r) {
    nlohmann::json j;
    j["index"] = index_name(r.index);
    j["value"] = r.value;
    j["n"] = r.n_samples;
    j["meta"] = nlohmann::json::object();
    for (const auto& [k, v] : r.meta) j["meta"][k] = v;
    return j.dump();
}

CrossMoments::CrossMoments(std::size_t p, std::size_t q)
    : p_(p), q_(q), sum_x_(p, 0.0), sum_y_(q, 0.0), sxx_(p, p), sxy_(p, q), syy_(q, q) {}

void CrossMoments::add_row(const double* x, const double* y) {
    for (std::size_t i = 0; i < p_; ++i) {
        sum_x_[i] += x[i];
        for (std::size_t j = 0; j <= i; ++j) sxx_(i, j) += x[i] * x[j];
        for (std::size_t j = 0; j < q_; ++j) sxy_(i, j) += x[i] * y[j];
    }
    for (std::size_t i = 0; i < q_; ++i) {
        sum_y_[i] += y[i];
        for (std::size_t j = 0; j <= i; ++j) syy_(i, j) += y[i] * y[j];
    }
    ++n_;
}

void CrossMoments::add_row(const float* x, const float* y) {
    std::vector<double> xd(p_), yd(q_);
    for (std::size_t i = 0; i < p_; ++i) xd[i] = x[i];
    for (std::size_t i = 0; i < q_; ++i) yd[i] = y[i];
    add_row(xd.data(), yd.data());
}

void CrossMoments::add_rows(const Matrix& x, const Matrix& y) {
    if (x.cols() != p_ || y.cols() != q_ || x.rows() != y.rows())
        throw ShapeMismatch("CrossMoments::add_rows: shape mismatch");
    for (std::size_t r = 0; r < x.rows(); ++r)
        add_row(x.data() + r * p_, y.data() + r * q_);
}

Matrix CrossMoments::centered_xx() const {
    Matrix c(p_, p_);
    const double n = static_cast<double>(n_);
    for (std::size_t i = 0; i < p_; ++i)
        for (std::size_t j = 0; j < p_; ++j) {
            const double raw = (j <= i) ? sxx_(i, j) : sxx_(j, i);
            c(i, j) = raw - sum_x_[i] * sum_x_[j] / n;
        }
    return c;
}

Matrix CrossMoments::centered_yy() const {
    Matrix c(q_, q_);
    const double n = static_cast<double>(n_);
    for (std::size_t i = 0; i < q_; ++i)
        for (std::size_t j = 0; j < q_; ++j) {
            const double raw = (j <= i) ? syy_(i, j) : syy_(j, i);
            c(i, j) = raw - sum_y_[i] * sum_y_[j] / n;
        }
    return c;
}

Matrix CrossMoments::centered_xy() const {
    Matrix c(p_, q_);
    const double n = static_cast<double>(n_);
    for (std::size_t i = 0; i < p_; ++i)
        for (std::size_t j = 0; j < q_; ++j) c(i, j) = sxy_(i, j) - sum_x_[i] * sum_y_[j] / n;
    return c;
}

double CrossMoments::rv() const {
    Matrix cxx = centered_xx();
    Matrix cyy = centered_yy();
    Matrix cxy = centered_xy();
    const double nx = frobenius_norm(cxx);
    const double ny = frobenius_norm(cyy);
    if (nx <= kNormFloor || ny <= kNormFloor)
        throw ZeroNorm("rv: constant input after centering");
    const double cross = frobenius_norm(cxy);
    return (cross * cross) / (nx * ny);
}

double CrossMoments::cca_mean() const {
    if (n_ <= std::max(p_, q_)) throw DegenerateInput("cca_mean: need n > max(p, q)");
    return cca_core(centered_xx(), centered_xy(), centered_yy());
}

double CrossMoments::svcca(double var_fraction) const {
    if (var_fraction <= 0.0 || var_fraction > 1.0)
        throw InvalidInput("svcca: var_fraction must be in (0, 1]");
    if (n_ <= std::max(p_, q_)) throw DegenerateInput("svcca: need n > max(p, q)");
    Matrix cxx = centered_xx();
    Matrix cyy = centered_yy();
    Matrix cxy = centered_xy();
    Truncation tx = truncate_basis(cxx, var_fraction);
    Truncation ty = truncate_basis(cyy, var_fraction);
    Matrix rxx = matmul(transpose(tx.basis), matmul(cxx, tx.basis));
    Matrix ryy = matmul(transpose(ty.basis), matmul(cyy, ty.basis));
    Matrix rxy = matmul(transpose(tx.basis), matmul(cxy, ty.basis));
    return cca_core(rxx, rxy, ryy);
}

double CrossMoments::r2_lr_with_bias() const {
    // Augmented normal equations for A = [X 1].
    const std::size_t pa = p_ + 1;
    Matrix ata(pa, pa);
    for (std::size_t i = 0; i < p_; ++i)
        for (std::size_t j = 0; j < p_; ++j) ata(i, j) = (j <= i) ? sxx_(i, j) : sxx_(j, i);
    for (std::size_t i = 0; i < p_; ++i) {
        ata(i, p_) = sum_x_[i];
        ata(p_, i) = sum_x_[i];
    }
    ata(p_, p_) = static_cast<double>(n_);
    Matrix atb(pa, q_);
    for (std::size_t i = 0; i < p_; ++i)
        for (std::size_t j = 0; j < q_; ++j) atb(i, j) = sxy_(i, j);
    for (std::size_t j = 0; j < q_; ++j) atb(p_, j) = sum_y_[j];

    double tr_syy = 0.0;
    for (std::size_t i = 0; i < q_; ++i) tr_syy += syy_(i, i);
    if (tr_syy <= kNormFloor) throw ZeroNorm("r2_lr: target has zero norm");

    Matrix m = matmul(pseudoinverse(ata), atb);
    // |AM - B|^2 = tr(M^T AtA M) - 2 tr(M^T AtB) + tr(B^T B)
    double quad = 0.0, lin = 0.0;
    Matrix am = matmul(ata, m);
    for (std::size_t i = 0; i < pa; ++i)
        for (std::size_t j = 0; j < q_; ++j) {
            quad += m(i, j) * am(i, j);
            lin += m(i, j) * atb(i, j);
        }
    const double resid = std::max(tr_syy - 2.0 * lin + quad, 0.0);
    return 1.0 - resid / tr_syy;
}

}  // namespace stitchlab::sim
