#pragma once

// Canonical correlation between learned views. The scalar objective is the
// sum of the top singular values of Sigma11^{-1/2} Sigma12 Sigma22^{-1/2};
// its gradient with respect to both input matrices is analytic, so the op
// plugs into the tape like any other kernel.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "deltafusion/config.hpp"
#include "deltafusion/errors.hpp"
#include "deltafusion/linalg.hpp"
#include "deltafusion/tensor.hpp"

namespace deltafusion {

struct Covariances {
    linalg::Mat s11, s12, s22;
    std::vector<double> mean1, mean2;
};

// Sample covariances with ridge r on the diagonal blocks; rows are samples.
// r may be zero here; the correlation op itself insists on r > 0.
inline Covariances regularized_covariances(const Tensor& h1, const Tensor& h2, double r) {
    if (h1.rank() != 2 || h2.rank() != 2 || h1.rows() != h2.rows())
        throw ShapeError("covariances: " + shape_str(h1.shape()) + " vs " + shape_str(h2.shape()));
    const std::size_t m = h1.rows(), d1 = h1.cols(), d2 = h2.cols();
    if (m < 2) throw NumericError("covariances: need at least 2 samples");
    if (r < 0.0) throw ConfigError("covariances: negative regularizer");
    Covariances cov;
    cov.mean1.assign(d1, 0.0);
    cov.mean2.assign(d2, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t f = 0; f < d1; ++f) cov.mean1[f] += h1.at(i, f);
        for (std::size_t f = 0; f < d2; ++f) cov.mean2[f] += h2.at(i, f);
    }
    for (double& v : cov.mean1) v /= double(m);
    for (double& v : cov.mean2) v /= double(m);
    cov.s11 = linalg::Mat(d1, d1);
    cov.s12 = linalg::Mat(d1, d2);
    cov.s22 = linalg::Mat(d2, d2);
    const double inv = 1.0 / double(m - 1);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t f = 0; f < d1; ++f) {
            const double a = h1.at(i, f) - cov.mean1[f];
            for (std::size_t g = 0; g <= f; ++g)
                cov.s11.at(f, g) += a * (h1.at(i, g) - cov.mean1[g]) * inv;
            for (std::size_t g = 0; g < d2; ++g)
                cov.s12.at(f, g) += a * (h2.at(i, g) - cov.mean2[g]) * inv;
        }
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t f = 0; f < d2; ++f) {
            const double a = h2.at(i, f) - cov.mean2[f];
            for (std::size_t g = 0; g <= f; ++g)
                cov.s22.at(f, g) += a * (h2.at(i, g) - cov.mean2[g]) * inv;
        }
    for (std::size_t f = 0; f < d1; ++f)
        for (std::size_t g = f + 1; g < d1; ++g) cov.s11.at(f, g) = cov.s11.at(g, f);
    for (std::size_t f = 0; f < d2; ++f)
        for (std::size_t g = f + 1; g < d2; ++g) cov.s22.at(f, g) = cov.s22.at(g, f);
    for (std::size_t f = 0; f < d1; ++f) cov.s11.at(f, f) += r;
    for (std::size_t f = 0; f < d2; ++f) cov.s22.at(f, f) += r;
    return cov;
}

namespace detail {

struct CcaCore {
    Covariances cov;
    linalg::Mat is11, is22; // Sigma^{-1/2}
    linalg::Svd svd;        // of is11 * s12 * is22
    double corr = 0.0;      // top-c singular values summed
};

inline CcaCore cca_core(const Tensor& h1, const Tensor& h2, std::size_t c, double r) {
    if (r <= 0.0) throw ConfigError("cca: regularizer must be positive");
    CcaCore core;
    core.cov = regularized_covariances(h1, h2, r);
    if (c == 0 || c > std::min(h1.cols(), h2.cols()))
        throw ShapeError("cca: need 1 <= c <= min view width, got " + std::to_string(c));
    core.is11 = linalg::inv_sqrt_spd(core.cov.s11);
    core.is22 = linalg::inv_sqrt_spd(core.cov.s22);
    core.svd = linalg::svd_small(linalg::matmul(linalg::matmul(core.is11, core.cov.s12), core.is22));
    for (std::size_t i = 0; i < c; ++i) core.corr += core.svd.sigma[i];
    return core;
}

} // namespace detail

// Differentiable canonical correlation of two views, rows as samples.
inline Tensor cca_corr(const Tensor& h1, const Tensor& h2, std::size_t c, double r) {
    detail::CcaCore core = detail::cca_core(h1, h2, c, r);
    Tensor out = Tensor::scalar(core.corr);
    if (auto* rec = detail::mark_output(out, h1.requires_grad() || h2.requires_grad())) {
        auto i1 = h1.impl_ptr(), i2 = h2.impl_ptr(), oi = out.impl_ptr();
        const std::size_t m = h1.rows(), d1 = h1.cols(), d2 = h2.cols();
        rec->push([i1, i2, oi, core, c, m, d1, d2] {
            if (!detail::has_out_grad(oi)) return;
            const double g = oi->grad[0];
            linalg::Mat uc(d1, c), vc(d2, c), ucs(d1, c), vcs(d2, c);
            for (std::size_t k = 0; k < c; ++k) {
                const double s = core.svd.sigma[k];
                for (std::size_t i = 0; i < d1; ++i) {
                    uc.at(i, k) = core.svd.u.at(i, k);
                    ucs.at(i, k) = core.svd.u.at(i, k) * s;
                }
                for (std::size_t i = 0; i < d2; ++i) {
                    vc.at(i, k) = core.svd.v.at(i, k);
                    vcs.at(i, k) = core.svd.v.at(i, k) * s;
                }
            }
            // d corr / d Sigma12 and the diagonal-block terms
            linalg::Mat m12 =
                linalg::matmul(linalg::matmul(core.is11, uc), linalg::matmul(linalg::transpose(vc), core.is22));
            linalg::Mat m11 =
                linalg::matmul(linalg::matmul(core.is11, ucs), linalg::matmul(linalg::transpose(uc), core.is11));
            linalg::Mat m22 =
                linalg::matmul(linalg::matmul(core.is22, vcs), linalg::matmul(linalg::transpose(vc), core.is22));
            const double inv = 1.0 / double(m - 1);
            auto centered = [](const detail::ImplPtr& h, const std::vector<double>& mean,
                               std::size_t cols, std::size_t i, std::size_t f) {
                return h->value[i * cols + f] - mean[f];
            };
            if (i1->requires_grad) {
                detail::ensure_grad(*i1);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t f = 0; f < d1; ++f) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < d1; ++p)
                            s -= centered(i1, core.cov.mean1, d1, i, p) * m11.at(p, f);
                        for (std::size_t p = 0; p < d2; ++p)
                            s += centered(i2, core.cov.mean2, d2, i, p) * m12.at(f, p);
                        i1->grad[i * d1 + f] += g * inv * s;
                    }
            }
            if (i2->requires_grad) {
                detail::ensure_grad(*i2);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t f = 0; f < d2; ++f) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < d2; ++p)
                            s -= centered(i2, core.cov.mean2, d2, i, p) * m22.at(p, f);
                        for (std::size_t p = 0; p < d1; ++p)
                            s += centered(i1, core.cov.mean1, d1, i, p) * m12.at(p, f);
                        i2->grad[i * d2 + f] += g * inv * s;
                    }
            }
        });
    }
    return out;
}

// Frozen projection fitted after the correlation stage: z = (h - mean) * a.
struct CcaSolution {
    double corr = 0.0;
    std::vector<double> mean1, mean2;
    linalg::Mat a, b; // d1 x c, d2 x c
};

inline CcaSolution cca_fit(const Tensor& h1, const Tensor& h2, std::size_t c, double r) {
    detail::CcaCore core = detail::cca_core(h1, h2, c, r);
    CcaSolution sol;
    sol.corr = core.corr;
    sol.mean1 = core.cov.mean1;
    sol.mean2 = core.cov.mean2;
    const std::size_t d1 = h1.cols(), d2 = h2.cols();
    sol.a = linalg::Mat(d1, c);
    sol.b = linalg::Mat(d2, c);
    for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t k = 0; k < c; ++k) {
            double s = 0.0;
            for (std::size_t p = 0; p < d1; ++p) s += core.is11.at(i, p) * core.svd.u.at(p, k);
            sol.a.at(i, k) = s;
        }
    for (std::size_t i = 0; i < d2; ++i)
        for (std::size_t k = 0; k < c; ++k) {
            double s = 0.0;
            for (std::size_t p = 0; p < d2; ++p) s += core.is22.at(i, p) * core.svd.v.at(p, k);
            sol.b.at(i, k) = s;
        }
    return sol;
}

// Two same-length temporal convolutions with a rectifier between them.
struct DccaEncoder {
    Tensor k1, b1; // kernel k x d_in x hidden, bias hidden
    Tensor k2, b2; // kernel k x hidden x out, bias out

    static DccaEncoder init(std::size_t d_in, const ModelConfig& cfg, std::mt19937_64& rng) {
        DccaEncoder e;
        e.k1 = Tensor::glorot({cfg.dcca_kernel, d_in, cfg.dcca_hidden}, cfg.dcca_kernel * d_in,
                              cfg.dcca_hidden, rng)
                   .set_requires_grad(true);
        e.b1 = Tensor::zeros({cfg.dcca_hidden}).set_requires_grad(true);
        e.k2 = Tensor::glorot({cfg.dcca_kernel, cfg.dcca_hidden, cfg.dcca_out},
                              cfg.dcca_kernel * cfg.dcca_hidden, cfg.dcca_out, rng)
                   .set_requires_grad(true);
        e.b2 = Tensor::zeros({cfg.dcca_out}).set_requires_grad(true);
        return e;
    }

    Tensor forward(const Tensor& x) const {
        return add_rows(conv1d(relu(add_rows(conv1d(x, k1), b1)), k2), b2);
    }

    template <typename Fn> void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".k1", k1);
        fn(prefix + ".b1", b1);
        fn(prefix + ".k2", k2);
        fn(prefix + ".b2", b2);
    }
};

} // namespace deltafusion
