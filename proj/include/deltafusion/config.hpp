#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deltafusion/errors.hpp"

namespace deltafusion {

inline constexpr std::size_t kNumClasses = 6;

inline const std::array<std::string, kNumClasses>& class_names() {
    static const std::array<std::string, kNumClasses> names = {"happy",    "sad",     "anger",
                                                               "surprise", "disgust", "fear"};
    return names;
}

struct ModelConfig {
    // raw feature widths per modality
    std::size_t text_dim = 8;
    std::size_t visual_dim = 12;
    std::size_t audio_dim = 10;

    // per-modality encoder
    std::size_t channels = 32;   // width after the entry convolution
    std::size_t key_dim = 32;    // total across heads
    std::size_t value_dim = 32;  // total across heads
    std::size_t out_dim = 32;    // width of the last encoder layer
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t conv_kernel = 3;
    std::size_t t_max = 20;      // capacity, including the summary token
    std::size_t window = 0;      // attention half-width; 0 means unbounded
    bool causal = false;

    // correlation stage
    std::size_t dcca_hidden = 8;
    std::size_t dcca_out = 8;
    std::size_t dcca_kernel = 1;
    double cca_reg = 1e-4;

    // fusion stage
    std::size_t fused_dim = 8;

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string(name) + " must be positive");
        };
        positive(text_dim, "text_dim");
        positive(visual_dim, "visual_dim");
        positive(audio_dim, "audio_dim");
        positive(channels, "channels");
        positive(key_dim, "key_dim");
        positive(value_dim, "value_dim");
        positive(out_dim, "out_dim");
        positive(heads, "heads");
        positive(layers, "layers");
        positive(dcca_hidden, "dcca_hidden");
        positive(dcca_out, "dcca_out");
        positive(fused_dim, "fused_dim");
        if (key_dim % heads != 0 || value_dim % heads != 0)
            throw ConfigError("heads must divide key_dim and value_dim");
        if (conv_kernel % 2 == 0 || dcca_kernel % 2 == 0)
            throw ConfigError("convolution kernels must be odd");
        if (t_max < 2) throw ConfigError("t_max must be at least 2");
        if (cca_reg <= 0.0) throw ConfigError("cca_reg must be positive");
    }

    std::size_t modality_dim(char which) const {
        switch (which) {
            case 'L': return text_dim;
            case 'V': return visual_dim;
            case 'A': return audio_dim;
        }
        throw ConfigError(std::string("unknown modality '") + which + "'");
    }
};

struct StageConfig {
    std::size_t epochs = 10;
    double lr = 1e-5;
    std::size_t batch_size = 8;
    double weight_decay = 1e-4;
};

// Per-stage schedule. Defaults follow the usual recipe for the full-size
// datasets; the synthetic benchmark overrides them.
struct TrainConfig {
    StageConfig text{10, 1e-6, 32, 1e-4};
    StageConfig visual{10, 1e-5, 8, 1e-4};
    StageConfig audio{10, 1e-5, 8, 1e-4};
    StageConfig dcca{100, 2e-4, 4, 1e-6};
    StageConfig fused{5, 1e-5, 8, 1e-6};
};

// Class-to-group maps for the synthetic generator. Two classes in the same
// group share a motif in that modality, so any single modality narrows a
// sample to a pair while any two pin it down.
struct SynthSpec {
    std::size_t n_samples = 1000;
    std::size_t intervals_min = 5;
    std::size_t intervals_max = 8;
    std::size_t visual_rows_min = 1;
    std::size_t visual_rows_max = 2;
    std::size_t audio_rows_min = 1;
    std::size_t audio_rows_max = 2;
    double noise = 0.25;
    double motif_amp = 2.0;
    double visual_offset_scale = 1.0; // per-sample constant shift on V
    std::vector<std::size_t> text_groups{0, 0, 1, 1, 2, 2};
    std::vector<std::size_t> visual_groups{0, 1, 1, 2, 2, 0};
    std::vector<std::size_t> audio_groups{0, 1, 0, 2, 1, 2};

    // n_samples may be zero: an empty dataset is a valid (if useless) output.
    void validate() const {
        if (intervals_min == 0 || intervals_min > intervals_max)
            throw ConfigError("bad interval range");
        if (visual_rows_min == 0 || visual_rows_min > visual_rows_max)
            throw ConfigError("bad visual row range");
        if (audio_rows_min == 0 || audio_rows_min > audio_rows_max)
            throw ConfigError("bad audio row range");
        for (const auto* g : {&text_groups, &visual_groups, &audio_groups}) {
            if (g->size() != kNumClasses) throw ConfigError("group maps need one entry per class");
            for (std::size_t v : *g)
                if (v >= kNumClasses) throw ConfigError("group id out of range");
        }
        if (noise < 0.0 || motif_amp <= 0.0 || visual_offset_scale < 0.0)
            throw ConfigError("bad synthetic scales");
    }
};

namespace detail {

// Applies `fn(key, json_value)` for each item and rejects keys fn returns
// false for; typos in config files fail loudly.
inline void for_each_known(const nlohmann::json& j, const char* what,
                           const std::function<bool(const std::string&, const nlohmann::json&)>& fn) {
    if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
    for (const auto& [key, value] : j.items())
        if (!fn(key, value)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
}

} // namespace detail

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"text_dim", c.text_dim},
                       {"visual_dim", c.visual_dim},
                       {"audio_dim", c.audio_dim},
                       {"channels", c.channels},
                       {"key_dim", c.key_dim},
                       {"value_dim", c.value_dim},
                       {"out_dim", c.out_dim},
                       {"heads", c.heads},
                       {"layers", c.layers},
                       {"conv_kernel", c.conv_kernel},
                       {"t_max", c.t_max},
                       {"window", c.window},
                       {"causal", c.causal},
                       {"dcca_hidden", c.dcca_hidden},
                       {"dcca_out", c.dcca_out},
                       {"dcca_kernel", c.dcca_kernel},
                       {"cca_reg", c.cca_reg},
                       {"fused_dim", c.fused_dim}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    detail::for_each_known(j, "model config", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "text_dim") v.get_to(c.text_dim);
        else if (k == "visual_dim") v.get_to(c.visual_dim);
        else if (k == "audio_dim") v.get_to(c.audio_dim);
        else if (k == "channels") v.get_to(c.channels);
        else if (k == "key_dim") v.get_to(c.key_dim);
        else if (k == "value_dim") v.get_to(c.value_dim);
        else if (k == "out_dim") v.get_to(c.out_dim);
        else if (k == "heads") v.get_to(c.heads);
        else if (k == "layers") v.get_to(c.layers);
        else if (k == "conv_kernel") v.get_to(c.conv_kernel);
        else if (k == "t_max") v.get_to(c.t_max);
        else if (k == "window") v.get_to(c.window);
        else if (k == "causal") v.get_to(c.causal);
        else if (k == "dcca_hidden") v.get_to(c.dcca_hidden);
        else if (k == "dcca_out") v.get_to(c.dcca_out);
        else if (k == "dcca_kernel") v.get_to(c.dcca_kernel);
        else if (k == "cca_reg") v.get_to(c.cca_reg);
        else if (k == "fused_dim") v.get_to(c.fused_dim);
        else return false;
        return true;
    });
    c.validate();
}

inline void to_json(nlohmann::json& j, const StageConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"lr", c.lr},
                       {"batch_size", c.batch_size},
                       {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, StageConfig& c) {
    detail::for_each_known(j, "stage config", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "epochs") v.get_to(c.epochs);
        else if (k == "lr") v.get_to(c.lr);
        else if (k == "batch_size") v.get_to(c.batch_size);
        else if (k == "weight_decay") v.get_to(c.weight_decay);
        else return false;
        return true;
    });
    if (c.lr <= 0.0 || c.batch_size == 0) throw ConfigError("stage config: bad lr or batch size");
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"text", c.text},
                       {"visual", c.visual},
                       {"audio", c.audio},
                       {"dcca", c.dcca},
                       {"fused", c.fused}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    detail::for_each_known(j, "train config", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "text") v.get_to(c.text);
        else if (k == "visual") v.get_to(c.visual);
        else if (k == "audio") v.get_to(c.audio);
        else if (k == "dcca") v.get_to(c.dcca);
        else if (k == "fused") v.get_to(c.fused);
        else return false;
        return true;
    });
}

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
    j = nlohmann::json{{"n_samples", s.n_samples},
                       {"intervals_min", s.intervals_min},
                       {"intervals_max", s.intervals_max},
                       {"visual_rows_min", s.visual_rows_min},
                       {"visual_rows_max", s.visual_rows_max},
                       {"audio_rows_min", s.audio_rows_min},
                       {"audio_rows_max", s.audio_rows_max},
                       {"noise", s.noise},
                       {"motif_amp", s.motif_amp},
                       {"visual_offset_scale", s.visual_offset_scale},
                       {"text_groups", s.text_groups},
                       {"visual_groups", s.visual_groups},
                       {"audio_groups", s.audio_groups}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
    detail::for_each_known(j, "synth spec", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "n_samples") v.get_to(s.n_samples);
        else if (k == "intervals_min") v.get_to(s.intervals_min);
        else if (k == "intervals_max") v.get_to(s.intervals_max);
        else if (k == "visual_rows_min") v.get_to(s.visual_rows_min);
        else if (k == "visual_rows_max") v.get_to(s.visual_rows_max);
        else if (k == "audio_rows_min") v.get_to(s.audio_rows_min);
        else if (k == "audio_rows_max") v.get_to(s.audio_rows_max);
        else if (k == "noise") v.get_to(s.noise);
        else if (k == "motif_amp") v.get_to(s.motif_amp);
        else if (k == "visual_offset_scale") v.get_to(s.visual_offset_scale);
        else if (k == "text_groups") v.get_to(s.text_groups);
        else if (k == "visual_groups") v.get_to(s.visual_groups);
        else if (k == "audio_groups") v.get_to(s.audio_groups);
        else return false;
        return true;
    });
    s.validate();
}

} // namespace deltafusion
