#pragma once

// Per-modality encoder: temporal convolution, a learned summary token, then a
// stack of multi-head self-attention layers whose logits carry a learned
// relative-position term computed from feature deltas.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "deltafusion/config.hpp"
#include "deltafusion/errors.hpp"
#include "deltafusion/tensor.hpp"

namespace deltafusion {

// Position term for self-attention: out[i][j] = (x[j] - x[i]) . w[:, j].
// The difference is taken entry-first, so the diagonal is exactly zero, a
// constant sequence scores exactly zero everywhere, and adding one common
// offset to every row leaves the result bit-identical whenever those
// additions are exact. Column j of `w` belongs to absolute position j; only
// the first T columns of the table are touched.
inline Tensor rpe_logits(const Tensor& x, const Tensor& w) {
    if (x.rank() != 2 || w.rank() != 2 || w.rows() != x.cols())
        throw ShapeError("rpe_logits: " + shape_str(x.shape()) + " with table " + shape_str(w.shape()));
    const std::size_t t = x.rows(), d = x.cols(), t_max = w.cols();
    if (t > t_max)
        throw ConfigError("rpe_logits: sequence length " + std::to_string(t) +
                          " exceeds capacity " + std::to_string(t_max));
    Tensor out = Tensor::zeros({t, t});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) {
            double s = 0.0;
            for (std::size_t f = 0; f < d; ++f)
                s += (x.data()[j * d + f] - x.data()[i * d + f]) * w.data()[f * t_max + j];
            out.data()[i * t + j] = s;
        }
    if (auto* rec = detail::mark_output(out, x.requires_grad() || w.requires_grad())) {
        auto xi = x.impl_ptr(), wi = w.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, wi, oi, t, d, t_max] {
            if (!detail::has_out_grad(oi)) return;
            if (xi->requires_grad) {
                detail::ensure_grad(*xi);
                for (std::size_t p = 0; p < t; ++p) {
                    double col_sum = 0.0;
                    for (std::size_t i = 0; i < t; ++i) col_sum += oi->grad[i * t + p];
                    for (std::size_t f = 0; f < d; ++f) {
                        double s = col_sum * wi->value[f * t_max + p];
                        for (std::size_t j = 0; j < t; ++j)
                            s -= oi->grad[p * t + j] * wi->value[f * t_max + j];
                        xi->grad[p * d + f] += s;
                    }
                }
            }
            if (wi->requires_grad) {
                detail::ensure_grad(*wi);
                for (std::size_t j = 0; j < t; ++j)
                    for (std::size_t f = 0; f < d; ++f) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < t; ++i)
                            s += oi->grad[i * t + j] * (xi->value[j * d + f] - xi->value[i * d + f]);
                        wi->grad[f * t_max + j] += s;
                    }
            }
        });
    }
    return out;
}

// Key/query visibility for one sequence whose row 0 is the summary token.
// Time rows obey the window and causal constraints and must be valid keys;
// the summary token sees and is seen by everything valid; invalid query rows
// fall back to the summary key so no softmax row is empty.
inline Tensor self_attention_mask(const std::vector<bool>& valid, std::size_t window, bool causal) {
    const std::size_t t = valid.size();
    if (t == 0 || !valid[0]) throw ConfigError("self_attention_mask: summary row must be valid");
    Tensor m = Tensor::zeros({t, t});
    for (std::size_t i = 0; i < t; ++i) {
        m.at(i, 0) = 1.0;
        if (!valid[i] || i == 0) {
            if (i == 0)
                for (std::size_t j = 1; j < t; ++j) m.at(0, j) = valid[j] ? 1.0 : 0.0;
            continue;
        }
        for (std::size_t j = 1; j < t; ++j) {
            if (!valid[j]) continue;
            const std::size_t gap = i > j ? i - j : j - i;
            if (window > 0 && gap > window) continue;
            if (causal && j > i) continue;
            m.at(i, j) = 1.0;
        }
    }
    return m;
}

struct DeltaAttentionLayer {
    std::size_t heads = 1;
    Tensor w_q, w_k; // (d_in+1) x key_dim
    Tensor w_v;      // (d_in+1) x value_dim
    Tensor w_o;      // (value_dim+1) x d_out
    Tensor w_rel;    // d_in x t_max, zero at init so the layer starts vanilla

    static DeltaAttentionLayer init(std::size_t d_in, std::size_t key_dim, std::size_t value_dim,
                                    std::size_t d_out, std::size_t heads, std::size_t t_max,
                                    std::mt19937_64& rng) {
        DeltaAttentionLayer l;
        l.heads = heads;
        l.w_q = Tensor::glorot({d_in + 1, key_dim}, d_in + 1, key_dim, rng).set_requires_grad(true);
        l.w_k = Tensor::glorot({d_in + 1, key_dim}, d_in + 1, key_dim, rng).set_requires_grad(true);
        l.w_v = Tensor::glorot({d_in + 1, value_dim}, d_in + 1, value_dim, rng).set_requires_grad(true);
        l.w_o = Tensor::glorot({value_dim + 1, d_out}, value_dim + 1, d_out, rng).set_requires_grad(true);
        l.w_rel = Tensor::zeros({d_in, t_max}).set_requires_grad(true);
        return l;
    }

    Tensor forward(const Tensor& x, const Tensor& mask) const {
        const std::size_t key_dim = w_q.cols(), value_dim = w_v.cols();
        const std::size_t dk = key_dim / heads, dv = value_dim / heads;
        Tensor q = linear(x, w_q), k = linear(x, w_k), v = linear(x, w_v);
        Tensor pos = rpe_logits(x, w_rel); // one table, shared by every head
        const double inv_scale = 1.0 / std::sqrt(double(dk));
        std::vector<Tensor> ctx;
        ctx.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
            Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
            Tensor vh = slice_cols(v, h * dv, (h + 1) * dv);
            Tensor logits = scale(add(matmul(qh, transpose(kh)), pos), inv_scale);
            ctx.push_back(matmul(masked_softmax(logits, mask), vh));
        }
        return linear(concat(ctx, 1), w_o);
    }

    template <typename Fn> void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w_q", w_q);
        fn(prefix + ".w_k", w_k);
        fn(prefix + ".w_v", w_v);
        fn(prefix + ".w_o", w_o);
        fn(prefix + ".w_rel", w_rel);
    }
};

// Encoder for one modality. Raw rows pass through a same-length temporal
// convolution into `channels` features, a learned summary row is prepended,
// and the stack of delta-attention layers mixes time. Row 0 of the output
// feeds the per-modality class head; rows 1..T are the sequence
// representation consumed by the correlation and fusion stages.
struct ModalityEncoder {
    std::size_t window = 0;
    bool causal = false;
    Tensor conv_kernel; // k x d_in x channels
    Tensor conv_bias;   // channels
    Tensor summary;     // 1 x channels
    std::vector<DeltaAttentionLayer> stack;
    Tensor head; // (out_dim+1) x 6

    static ModalityEncoder init(std::size_t d_in, const ModelConfig& cfg, std::mt19937_64& rng) {
        cfg.validate();
        ModalityEncoder e;
        e.window = cfg.window;
        e.causal = cfg.causal;
        e.conv_kernel = Tensor::glorot({cfg.conv_kernel, d_in, cfg.channels},
                                       cfg.conv_kernel * d_in, cfg.channels, rng)
                            .set_requires_grad(true);
        e.conv_bias = Tensor::zeros({cfg.channels}).set_requires_grad(true);
        e.summary = Tensor::zeros({1, cfg.channels}).set_requires_grad(true);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::size_t d_out = (l + 1 == cfg.layers) ? cfg.out_dim : cfg.channels;
            e.stack.push_back(DeltaAttentionLayer::init(cfg.channels, cfg.key_dim, cfg.value_dim,
                                                        d_out, cfg.heads, cfg.t_max, rng));
        }
        e.head = Tensor::glorot({cfg.out_dim + 1, kNumClasses}, cfg.out_dim + 1, kNumClasses, rng)
                     .set_requires_grad(true);
        return e;
    }

    struct Output {
        Tensor sequence; // (T+1) x out_dim, summary row first
        Tensor logits;   // 1 x 6 from the summary row
    };

    Output forward(const Tensor& features, const std::vector<bool>& valid_rows) const {
        if (features.rows() != valid_rows.size())
            throw ShapeError("encoder: mask length " + std::to_string(valid_rows.size()) +
                             " for " + std::to_string(features.rows()) + " rows");
        const std::size_t t_max = stack.front().w_rel.cols();
        if (features.rows() + 1 > t_max)
            throw ConfigError("encoder: sequence length " + std::to_string(features.rows()) +
                              " exceeds capacity " + std::to_string(t_max - 1));
        Tensor h = add_rows(conv1d(features, conv_kernel), conv_bias);
        h = concat({summary, h}, 0);
        std::vector<bool> valid(valid_rows.size() + 1);
        valid[0] = true;
        for (std::size_t i = 0; i < valid_rows.size(); ++i) valid[i + 1] = valid_rows[i];
        Tensor mask = self_attention_mask(valid, window, causal);
        for (const DeltaAttentionLayer& layer : stack) h = layer.forward(h, mask);
        Output out;
        out.sequence = h;
        out.logits = linear(slice_rows(h, 0, 1), head);
        return out;
    }

    template <typename Fn> void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".conv.kernel", conv_kernel);
        fn(prefix + ".conv.bias", conv_bias);
        fn(prefix + ".summary", summary);
        for (std::size_t l = 0; l < stack.size(); ++l)
            stack[l].visit_params(prefix + ".layer" + std::to_string(l), fn);
        fn(prefix + ".head", head);
    }
};

} // namespace deltafusion
