#pragma once

// Fusion head over the correlation-aligned timesteps of all three modalities,
// plus a parameter-count reference: the standard design with six directional
// cross-modal attention stacks, which this architecture replaces with three
// self-attention stacks and shared correlation projections.

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "deltafusion/attention.hpp"
#include "deltafusion/config.hpp"
#include "deltafusion/dcca.hpp"
#include "deltafusion/tensor.hpp"

namespace deltafusion {

// Single-head attention over the fused sequence, mean-pooled into class
// logits. Every fused row is a real timestep, so no mask is needed.
struct FusedAttention {
    Tensor w_q, w_k, w_v; // (d_r+1) x d_t
    Tensor w_o;           // (d_t+1) x d_t
    Tensor clf;           // (d_t+1) x 6

    static FusedAttention init(const ModelConfig& cfg, std::mt19937_64& rng) {
        FusedAttention f;
        const std::size_t dr = cfg.dcca_out, dt = cfg.fused_dim;
        f.w_q = Tensor::glorot({dr + 1, dt}, dr + 1, dt, rng).set_requires_grad(true);
        f.w_k = Tensor::glorot({dr + 1, dt}, dr + 1, dt, rng).set_requires_grad(true);
        f.w_v = Tensor::glorot({dr + 1, dt}, dr + 1, dt, rng).set_requires_grad(true);
        f.w_o = Tensor::glorot({dt + 1, dt}, dt + 1, dt, rng).set_requires_grad(true);
        f.clf = Tensor::glorot({dt + 1, kNumClasses}, dt + 1, kNumClasses, rng).set_requires_grad(true);
        return f;
    }

    Tensor forward(const Tensor& fused) const {
        const double inv_scale = 1.0 / std::sqrt(double(w_q.cols()));
        Tensor q = linear(fused, w_q), k = linear(fused, w_k), v = linear(fused, w_v);
        Tensor attn = masked_softmax(scale(matmul(q, transpose(k)), inv_scale));
        Tensor out = linear(matmul(attn, v), w_o);
        return linear(masked_mean_rows(out), clf);
    }

    template <typename Fn> void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w_q", w_q);
        fn(prefix + ".w_k", w_k);
        fn(prefix + ".w_v", w_v);
        fn(prefix + ".w_o", w_o);
        fn(prefix + ".clf", clf);
    }
};

// Whole model. The correlation projections and view means are fitted, not
// trained, but they are part of the persisted state.
struct FusionModel {
    ModelConfig cfg;
    ModalityEncoder text, visual, audio;
    DccaEncoder dcca_text, dcca_visual, dcca_audio;
    Tensor proj_text, proj_visual, proj_audio; // dcca_out x dcca_out
    Tensor mean_text, mean_visual, mean_audio; // dcca_out
    FusedAttention fused;

    static FusionModel init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        FusionModel m;
        m.cfg = cfg;
        m.text = ModalityEncoder::init(cfg.text_dim, cfg, rng);
        m.visual = ModalityEncoder::init(cfg.visual_dim, cfg, rng);
        m.audio = ModalityEncoder::init(cfg.audio_dim, cfg, rng);
        m.dcca_text = DccaEncoder::init(cfg.out_dim, cfg, rng);
        m.dcca_visual = DccaEncoder::init(cfg.out_dim, cfg, rng);
        m.dcca_audio = DccaEncoder::init(cfg.out_dim, cfg, rng);
        m.proj_text = Tensor::zeros({cfg.dcca_out, cfg.dcca_out});
        m.proj_visual = Tensor::zeros({cfg.dcca_out, cfg.dcca_out});
        m.proj_audio = Tensor::zeros({cfg.dcca_out, cfg.dcca_out});
        m.mean_text = Tensor::zeros({cfg.dcca_out});
        m.mean_visual = Tensor::zeros({cfg.dcca_out});
        m.mean_audio = Tensor::zeros({cfg.dcca_out});
        m.fused = FusedAttention::init(cfg, rng);
        return m;
    }

    ModalityEncoder& encoder(char which) {
        switch (which) {
            case 'L': return text;
            case 'V': return visual;
            case 'A': return audio;
        }
        throw ConfigError(std::string("unknown modality '") + which + "'");
    }
    DccaEncoder& view_encoder(char which) {
        switch (which) {
            case 'L': return dcca_text;
            case 'V': return dcca_visual;
            case 'A': return dcca_audio;
        }
        throw ConfigError(std::string("unknown modality '") + which + "'");
    }

    template <typename Fn> void visit_params(Fn&& fn) {
        text.visit_params("text", fn);
        visual.visit_params("visual", fn);
        audio.visit_params("audio", fn);
        dcca_text.visit_params("dcca.text", fn);
        dcca_visual.visit_params("dcca.visual", fn);
        dcca_audio.visit_params("dcca.audio", fn);
        fn("dcca.text.proj", proj_text);
        fn("dcca.visual.proj", proj_visual);
        fn("dcca.audio.proj", proj_audio);
        fn("dcca.text.mean", mean_text);
        fn("dcca.visual.mean", mean_visual);
        fn("dcca.audio.mean", mean_audio);
        fused.visit_params("fused", fn);
    }
};

// ---- parameter accounting ---------------------------------------------------

struct ParamBreakdown {
    std::vector<std::pair<std::string, std::size_t>> buckets;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [name, count] : buckets) n += count;
        return n;
    }
    std::size_t bucket(const std::string& name) const {
        for (const auto& [bname, count] : buckets)
            if (bname == name) return count;
        throw ConfigError("no parameter bucket named '" + name + "'");
    }
};

namespace detail {

inline std::size_t attn_block_params(std::size_t d_in, std::size_t key_dim, std::size_t value_dim,
                                     std::size_t d_out) {
    return (d_in + 1) * (2 * key_dim + value_dim) + (value_dim + 1) * d_out;
}

inline std::size_t conv_params(std::size_t kernel, std::size_t d_in, std::size_t d_out) {
    return kernel * d_in * d_out + d_out;
}

} // namespace detail

// Learned parameters of this architecture, grouped by role. The fitted
// correlation projections are derived state, not parameters, and are not
// counted.
inline ParamBreakdown proposed_param_breakdown(const ModelConfig& cfg) {
    cfg.validate();
    ParamBreakdown out;
    std::size_t convs = 0;
    for (char m : {'L', 'V', 'A'})
        convs += detail::conv_params(cfg.conv_kernel, cfg.modality_dim(m), cfg.channels);
    out.buckets.emplace_back("entry_convs", convs);

    std::size_t blocks = 0;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::size_t d_out = (l + 1 == cfg.layers) ? cfg.out_dim : cfg.channels;
        blocks += detail::attn_block_params(cfg.channels, cfg.key_dim, cfg.value_dim, d_out);
    }
    out.buckets.emplace_back("attention_modules", 3 * blocks);
    out.buckets.emplace_back("position_tables", 3 * cfg.layers * cfg.channels * cfg.t_max);
    out.buckets.emplace_back("summary_tokens", 3 * cfg.channels);
    out.buckets.emplace_back("class_heads", 3 * (cfg.out_dim + 1) * kNumClasses);

    const std::size_t dcca_one = detail::conv_params(cfg.dcca_kernel, cfg.out_dim, cfg.dcca_hidden) +
                                 detail::conv_params(cfg.dcca_kernel, cfg.dcca_hidden, cfg.dcca_out);
    out.buckets.emplace_back("dcca_encoders", 3 * dcca_one);
    out.buckets.emplace_back("fused_attention", 3 * (cfg.dcca_out + 1) * cfg.fused_dim +
                                                    (cfg.fused_dim + 1) * cfg.fused_dim);
    out.buckets.emplace_back("classifier", (cfg.fused_dim + 1) * kNumClasses);
    return out;
}

// Reference architecture: the same entry convolutions, six directional
// cross-modal attention stacks of the same depth and width, and a head over
// the three concatenated pair outputs.
inline ParamBreakdown reference_param_breakdown(const ModelConfig& cfg) {
    cfg.validate();
    ParamBreakdown out;
    std::size_t convs = 0;
    for (char m : {'L', 'V', 'A'})
        convs += detail::conv_params(cfg.conv_kernel, cfg.modality_dim(m), cfg.channels);
    out.buckets.emplace_back("entry_convs", convs);
    const std::size_t block =
        detail::attn_block_params(cfg.channels, cfg.key_dim, cfg.value_dim, cfg.channels);
    out.buckets.emplace_back("attention_modules", 6 * cfg.layers * block);
    out.buckets.emplace_back("head", (6 * cfg.channels + 1) * kNumClasses);
    return out;
}

// Weight tensors of the reference, instantiated so counting by enumeration
// can be checked against the closed forms.
struct ReferenceModel {
    std::vector<std::pair<std::string, Tensor>> params;

    static ReferenceModel init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        ReferenceModel m;
        for (char mod : {'L', 'V', 'A'}) {
            const std::string p = std::string("conv.") + mod;
            const std::size_t d_in = cfg.modality_dim(mod);
            m.params.emplace_back(p + ".kernel",
                                  Tensor::glorot({cfg.conv_kernel, d_in, cfg.channels},
                                                 cfg.conv_kernel * d_in, cfg.channels, rng));
            m.params.emplace_back(p + ".bias", Tensor::zeros({cfg.channels}));
        }
        const char* directions[6] = {"V>L", "A>L", "L>V", "A>V", "L>A", "V>A"};
        for (const char* dir : directions)
            for (std::size_t l = 0; l < cfg.layers; ++l) {
                const std::string p = std::string("cross.") + dir + ".layer" + std::to_string(l);
                const std::size_t d = cfg.channels;
                m.params.emplace_back(p + ".w_q",
                                      Tensor::glorot({d + 1, cfg.key_dim}, d + 1, cfg.key_dim, rng));
                m.params.emplace_back(p + ".w_k",
                                      Tensor::glorot({d + 1, cfg.key_dim}, d + 1, cfg.key_dim, rng));
                m.params.emplace_back(p + ".w_v",
                                      Tensor::glorot({d + 1, cfg.value_dim}, d + 1, cfg.value_dim, rng));
                m.params.emplace_back(p + ".w_o",
                                      Tensor::glorot({cfg.value_dim + 1, d}, cfg.value_dim + 1, d, rng));
            }
        m.params.emplace_back("head", Tensor::glorot({6 * cfg.channels + 1, kNumClasses},
                                                     6 * cfg.channels + 1, kNumClasses, rng));
        return m;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }
};

inline double param_ratio(const ModelConfig& cfg) {
    return double(proposed_param_breakdown(cfg).total()) /
           double(reference_param_breakdown(cfg).total());
}

} // namespace deltafusion
