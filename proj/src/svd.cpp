// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>

#include "stitchlab/linalg.hpp"

namespace stitchlab {

namespace {

// One-sided Jacobi on the columns of w (m x n, m >= n), accumulating the
// right rotations into v. Stops when no column pair needed a rotation.
void jacobi_orthogonalize(Matrix& w, Matrix& v) {
    const std::size_t m = w.rows(), n = w.cols();
    const double eps = 1e-15;
    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if (std::abs(apq) <= eps * std::sqrt(app * aqq)) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    w(i, p) = c * wp - s * wq;
                    w(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }
}

// Orthonormal fill for U columns whose singular value is ~0: Gram-Schmidt of
// standard basis vectors against the columns already present.
void complete_basis(Matrix& u, std::size_t from_col) {
    const std::size_t m = u.rows(), r = u.cols();
    std::size_t next = from_col;
    for (std::size_t cand = 0; cand < m && next < r; ++cand) {
        std::vector<double> col(m, 0.0);
        col[cand] = 1.0;
        for (std::size_t j = 0; j < next; ++j) {
            double dot = 0.0;
            for (std::size_t i = 0; i < m; ++i) dot += u(i, j) * col[i];
            for (std::size_t i = 0; i < m; ++i) col[i] -= dot * u(i, j);
        }
        double norm = 0.0;
        for (double x : col) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;
        for (std::size_t i = 0; i < m; ++i) u(i, next) = col[i] / norm;
        ++next;
    }
}

SvdResult svd_tall(const Matrix& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Matrix w = a;
    Matrix v = Matrix::identity(n);
    jacobi_orthogonalize(w, v);

    std::vector<double> sigma(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += w(i, j) * w(i, j);
        sigma[j] = std::sqrt(acc);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdResult out;
    out.s.resize(n);
    out.u = Matrix(m, n);
    out.v = Matrix(n, n);
    const double smax = sigma.empty() ? 0.0 : sigma[order.empty() ? 0 : order[0]];
    std::size_t nonzero = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.s[j] = sigma[src];
        for (std::size_t i = 0; i < n; ++i) out.v(i, j) = v(i, src);
        if (sigma[src] > smax * 1e-300 && sigma[src] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) out.u(i, j) = w(i, src) / sigma[src];
            nonzero = j + 1;
        }
    }
    if (nonzero < n) complete_basis(out.u, nonzero);
    return out;
}

}  // namespace

SvdResult svd(const Matrix& a) {
    if (!a.all_finite()) throw InvalidInput("svd: non-finite input");
    if (a.rows() == 0 || a.cols() == 0) throw InvalidInput("svd: empty matrix");
    if (a.rows() >= a.cols()) return svd_tall(a);
    SvdResult t = svd_tall(transpose(a));
    SvdResult out;
    out.u = std::move(t.v);
    out.v = std::move(t.u);
    out.s = std::move(t.s);
    return out;
}

std::size_t numerical_rank(const std::vector<double>& s, double rank_tol) {
    if (s.empty()) return 0;
    const double cutoff = rank_tol * s.front();
    std::size_t r = 0;
    for (double x : s)
        if (x > cutoff && x > 0.0) ++r;
    return r;
}

std::size_t numerical_rank(const Matrix& m, double rank_tol) {
    if (m.rows() == 0 || m.cols() == 0) return 0;
    return numerical_rank(svd(m).s, rank_tol);
}

Matrix pseudoinverse(const Matrix& m, double rank_tol) {
    if (!m.all_finite()) throw InvalidInput("pseudoinverse: non-finite input");
    if (rank_tol <= 0.0) throw InvalidInput("pseudoinverse: rank_tol must be positive");
    SvdResult d = svd(m);
    const std::size_t r = d.s.size();
    const double cutoff = (r ? d.s[0] : 0.0) * rank_tol;
    // V diag(1/s) U^T, zeroing directions below the cutoff.
    Matrix vs(m.cols(), r);
    for (std::size_t j = 0; j < r; ++j) {
        const double inv = (d.s[j] > cutoff && d.s[j] > 0.0) ? 1.0 / d.s[j] : 0.0;
        for (std::size_t i = 0; i < m.cols(); ++i) vs(i, j) = d.v(i, j) * inv;
    }
    return matmul(vs, transpose(d.u));
}

SymEigResult sym_eig(const Matrix& s) {
    if (s.rows() != s.cols()) throw ShapeMismatch("sym_eig: matrix not square");
    if (!s.all_finite()) throw InvalidInput("sym_eig: non-finite input");
    const std::size_t n = s.rows();
    Matrix a = s;
    Matrix q = Matrix::identity(n);
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-30) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t r = p + 1; r < n; ++r) {
                const double apq = a(p, r);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a(r, r) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = c * t;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, r);
                    a(k, p) = c * akp - sn * akq;
                    a(k, r) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(r, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(r, k) = sn * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double qkp = q(k, p), qkq = q(k, r);
                    q(k, p) = c * qkp - sn * qkq;
                    q(k, r) = sn * qkp + c * qkq;
                }
            }
        }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
    SymEigResult out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = a(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = q(i, order[j]);
    }
    return out;
}

Matrix invsqrt_psd(const Matrix& s, double rank_tol) {
    SymEigResult e = sym_eig(s);
    const std::size_t n = s.rows();
    const double lmax = e.values.empty() ? 0.0 : std::max(e.values[0], 0.0);
    const double cutoff = lmax * rank_tol;
    Matrix scaled(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        const double lam = e.values[j];
        const double inv = (lam > cutoff && lam > 0.0) ? 1.0 / std::sqrt(lam) : 0.0;
        for (std::size_t i = 0; i < n; ++i) scaled(i, j) = e.vectors(i, j) * inv;
    }
    return matmul(scaled, transpose(e.vectors));
}

}  // namespace stitchlab
