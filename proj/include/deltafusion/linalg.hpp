#pragma once

// Dense helpers for the small symmetric problems inside the correlation loss.
// Matrices here are plain row-major buffers, at most a few dozen rows, so a
// cyclic Jacobi sweep is accurate and fast enough.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "deltafusion/errors.hpp"

namespace deltafusion::linalg {

struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) throw ShapeError("linalg::matmul: inner dims differ");
    Mat out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t p = 0; p < a.cols; ++p) {
            const double av = a.at(i, p);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(p, j);
        }
    return out;
}

inline Mat transpose(const Mat& a) {
    Mat out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

struct SymEig {
    std::vector<double> values; // descending
    Mat vectors;                // column k pairs with values[k]
};

// Cyclic Jacobi for a symmetric matrix. Input is not checked for symmetry
// beyond averaging a with its transpose.
inline SymEig jacobi_eig(const Mat& a_in) {
    if (a_in.rows != a_in.cols) throw ShapeError("jacobi_eig: matrix not square");
    const std::size_t n = a_in.rows;
    Mat a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a.at(i, j) = 0.5 * (a_in.at(i, j) + a_in.at(j, i));
    Mat vecs(n, n);
    for (std::size_t i = 0; i < n; ++i) vecs.at(i, i) = 1.0;

    double fro = 0.0;
    for (double x : a.v) fro += x * x;
    const double tol = 1e-30 * std::max(fro, 1e-300);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
        if (off <= tol) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (apq == 0.0) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vecs.at(k, p), vkq = vecs.at(k, q);
                    vecs.at(k, p) = c * vkp - s * vkq;
                    vecs.at(k, q) = s * vkp + c * vkq;
                }
            }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (a.at(order[j], order[j]) > a.at(order[i], order[i])) std::swap(order[i], order[j]);

    SymEig out;
    out.values.resize(n);
    out.vectors = Mat(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a.at(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors.at(i, k) = vecs.at(i, order[k]);
    }
    return out;
}

// A^{-1/2} for symmetric positive definite A. Eigenvalues are floored at
// `floor` before inversion; a clearly negative eigenvalue means the input was
// not a covariance and is reported instead of masked.
inline Mat inv_sqrt_spd(const Mat& a, double floor = 1e-10) {
    SymEig eig = jacobi_eig(a);
    const std::size_t n = a.rows;
    for (double lam : eig.values)
        if (lam < -1e-8)
            throw NumericError("inv_sqrt_spd: matrix not positive definite (eigenvalue " +
                               std::to_string(lam) + ")");
    Mat out(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double w = 1.0 / std::sqrt(std::max(eig.values[k], floor));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out.at(i, j) += w * eig.vectors.at(i, k) * eig.vectors.at(j, k);
    }
    return out;
}

struct Svd {
    Mat u;                     // a.rows x k
    std::vector<double> sigma; // descending, length k = min(rows, cols)
    Mat v;                     // a.cols x k
};

// Small SVD via the symmetric eigenproblem of A^T A (or A A^T, whichever is
// smaller). Adequate for the well-conditioned matrices the correlation loss
// produces.
inline Svd svd_small(const Mat& a) {
    const bool tall = a.rows >= a.cols;
    const Mat& b = a;
    Mat gram = tall ? matmul(transpose(b), b) : matmul(b, transpose(b));
    SymEig eig = jacobi_eig(gram);
    const std::size_t k = gram.rows;

    Svd out;
    out.sigma.resize(k);
    for (std::size_t i = 0; i < k; ++i) out.sigma[i] = std::sqrt(std::max(eig.values[i], 0.0));

    if (tall) {
        out.v = eig.vectors; // a.cols x k
        out.u = Mat(a.rows, k);
        for (std::size_t col = 0; col < k; ++col) {
            const double inv = 1.0 / std::max(out.sigma[col], 1e-10);
            for (std::size_t i = 0; i < a.rows; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < a.cols; ++j) s += a.at(i, j) * eig.vectors.at(j, col);
                out.u.at(i, col) = s * inv;
            }
        }
    } else {
        out.u = eig.vectors; // a.rows x k
        out.v = Mat(a.cols, k);
        for (std::size_t col = 0; col < k; ++col) {
            const double inv = 1.0 / std::max(out.sigma[col], 1e-10);
            for (std::size_t j = 0; j < a.cols; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < a.rows; ++i) s += a.at(i, j) * eig.vectors.at(i, col);
                out.v.at(j, col) = s * inv;
            }
        }
    }
    return out;
}

} // namespace deltafusion::linalg
