#pragma once

// Dataset handling: JSONL records with per-row time intervals for each
// modality, validity masks derived from all-zero rows, interval alignment by
// pad-and-stack against the text rows, and a synthetic corpus whose classes
// are only pairwise identifiable across modalities.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deltafusion/config.hpp"
#include "deltafusion/errors.hpp"
#include "deltafusion/tensor.hpp"

namespace deltafusion {

struct Labels {
    double sentiment = 0.0;                  // -3 .. 3
    std::array<double, kNumClasses> emotions{}; // 0 .. 3 each

    // Class index for training: strongest emotion, earliest on ties.
    std::size_t dominant() const {
        std::size_t best = 0;
        for (std::size_t c = 1; c < kNumClasses; ++c)
            if (emotions[c] > emotions[best]) best = c;
        return best;
    }
};

struct ModalitySequence {
    Tensor features;                                  // T x d, pad rows all zero
    std::vector<std::pair<double, double>> intervals; // [start, end) per row

    std::size_t length() const { return features.defined() ? features.rows() : 0; }

    // A row is a pad exactly when every entry is zero.
    std::vector<bool> valid_rows() const {
        std::vector<bool> v(length(), false);
        for (std::size_t i = 0; i < length(); ++i)
            for (std::size_t f = 0; f < features.cols(); ++f)
                if (features.at(i, f) != 0.0) {
                    v[i] = true;
                    break;
                }
        return v;
    }
};

struct Sample {
    std::string id;
    ModalitySequence text, visual, audio;
    Labels labels;

    const ModalitySequence& modality(char which) const {
        switch (which) {
            case 'L': return text;
            case 'V': return visual;
            case 'A': return audio;
        }
        throw ConfigError(std::string("unknown modality '") + which + "'");
    }
};

using Dataset = std::vector<Sample>;

// ---- validation -------------------------------------------------------------

inline void validate_sequence(const ModalitySequence& s, const std::string& where) {
    if (!s.features.defined() || s.features.rank() != 2)
        throw DataError(where + ": features must be a matrix");
    if (s.features.rows() != s.intervals.size())
        throw DataError(where + ": " + std::to_string(s.features.rows()) + " rows but " +
                        std::to_string(s.intervals.size()) + " intervals");
    if (s.features.rows() == 0) throw DataError(where + ": empty sequence");
    double prev_end = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < s.intervals.size(); ++i) {
        const auto& [a, b] = s.intervals[i];
        if (!(std::isfinite(a) && std::isfinite(b)) || b < a)
            throw DataError(where + ": bad interval at row " + std::to_string(i));
        // Rows sharing one padded grid slot repeat the slot's interval
        // exactly; anything else must start after the previous row ends.
        if (a < prev_end && !(i > 0 && s.intervals[i] == s.intervals[i - 1]))
            throw DataError(where + ": intervals overlap at row " + std::to_string(i));
        prev_end = std::max(prev_end, b);
    }
    if (!all_finite(s.features)) throw DataError(where + ": non-finite feature");
}

inline void validate_sample(const Sample& s) {
    const std::string where = "sample '" + s.id + "'";
    validate_sequence(s.text, where + " text");
    validate_sequence(s.visual, where + " visual");
    validate_sequence(s.audio, where + " audio");
    if (s.labels.sentiment < -3.0 || s.labels.sentiment > 3.0)
        throw DataError(where + ": sentiment out of [-3, 3]");
    for (double e : s.labels.emotions)
        if (e < 0.0 || e > 3.0) throw DataError(where + ": emotion intensity out of [0, 3]");
}

// ---- JSONL ------------------------------------------------------------------

namespace detail {

inline nlohmann::json sequence_to_json(const ModalitySequence& s) {
    nlohmann::json feat = nlohmann::json::array();
    for (std::size_t i = 0; i < s.features.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t f = 0; f < s.features.cols(); ++f) row.push_back(s.features.at(i, f));
        feat.push_back(std::move(row));
    }
    nlohmann::json ivals = nlohmann::json::array();
    for (const auto& [a, b] : s.intervals) ivals.push_back(nlohmann::json::array({a, b}));
    return nlohmann::json{{"features", std::move(feat)}, {"intervals", std::move(ivals)}};
}

inline ModalitySequence sequence_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("features") || !j.contains("intervals"))
        throw DataError(where + ": modality needs 'features' and 'intervals'");
    for (const auto& [key, value] : j.items())
        if (key != "features" && key != "intervals")
            throw DataError(where + ": unknown modality key '" + key + "'");
    const auto& feat = j["features"];
    if (!feat.is_array() || feat.empty()) throw DataError(where + ": features must be a non-empty array");
    const std::size_t t = feat.size();
    const std::size_t d = feat[0].is_array() ? feat[0].size() : 0;
    if (d == 0) throw DataError(where + ": feature rows must be non-empty arrays");
    ModalitySequence s;
    s.features = Tensor::zeros({t, d});
    for (std::size_t i = 0; i < t; ++i) {
        if (!feat[i].is_array() || feat[i].size() != d)
            throw DataError(where + ": ragged feature row " + std::to_string(i));
        for (std::size_t f = 0; f < d; ++f) {
            if (!feat[i][f].is_number()) throw DataError(where + ": non-numeric feature");
            s.features.at(i, f) = feat[i][f].get<double>();
        }
    }
    for (const auto& iv : j["intervals"]) {
        if (!iv.is_array() || iv.size() != 2 || !iv[0].is_number() || !iv[1].is_number())
            throw DataError(where + ": intervals must be [start, end] pairs");
        s.intervals.emplace_back(iv[0].get<double>(), iv[1].get<double>());
    }
    return s;
}

} // namespace detail

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json labels = nlohmann::json::array();
    labels.push_back(s.labels.sentiment);
    for (double e : s.labels.emotions) labels.push_back(e);
    return nlohmann::json{{"id", s.id},
                          {"L", detail::sequence_to_json(s.text)},
                          {"V", detail::sequence_to_json(s.visual)},
                          {"A", detail::sequence_to_json(s.audio)},
                          {"labels", std::move(labels)}};
}

inline Sample sample_from_json(const nlohmann::json& j, const std::string& where) {
    for (const char* key : {"id", "L", "V", "A", "labels"})
        if (!j.contains(key)) throw DataError(where + ": missing key '" + key + "'");
    for (const auto& [key, value] : j.items())
        if (std::string(key) != "id" && key != "L" && key != "V" && key != "A" && key != "labels")
            throw DataError(where + ": unknown key '" + key + "'");
    Sample s;
    if (!j["id"].is_string()) throw DataError(where + ": id must be a string");
    s.id = j["id"].get<std::string>();
    s.text = detail::sequence_from_json(j["L"], where + " L");
    s.visual = detail::sequence_from_json(j["V"], where + " V");
    s.audio = detail::sequence_from_json(j["A"], where + " A");
    const auto& lab = j["labels"];
    if (!lab.is_array() || lab.size() != 1 + kNumClasses)
        throw DataError(where + ": labels must hold sentiment plus " + std::to_string(kNumClasses) +
                        " intensities");
    for (const auto& v : lab)
        if (!v.is_number()) throw DataError(where + ": non-numeric label");
    s.labels.sentiment = lab[0].get<double>();
    for (std::size_t c = 0; c < kNumClasses; ++c) s.labels.emotions[c] = lab[1 + c].get<double>();
    validate_sample(s);
    return s;
}

inline void save_dataset(std::ostream& out, const Dataset& ds) {
    for (const Sample& s : ds) out << sample_to_json(s).dump() << '\n';
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    save_dataset(out, ds);
}

inline Dataset load_dataset(std::istream& in) {
    Dataset ds;
    std::vector<std::string> seen_ids;
    std::array<std::size_t, 3> dims = {0, 0, 0};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "line " + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + ": " + e.what());
        }
        Sample s = sample_from_json(j, where);
        for (const std::string& id : seen_ids)
            if (id == s.id) throw DataError(where + ": duplicate id '" + s.id + "'");
        const std::array<std::size_t, 3> d = {s.text.features.cols(), s.visual.features.cols(),
                                              s.audio.features.cols()};
        if (ds.empty()) dims = d;
        else if (d != dims)
            throw DataError(where + ": feature widths differ from the first sample");
        seen_ids.push_back(s.id);
        ds.push_back(std::move(s));
    }
    return ds;
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return load_dataset(in);
}

// ---- alignment ---------------------------------------------------------------

namespace detail {

// Earliest reference interval a source row lands in: positive-measure overlap
// for ranges, containment for zero-width rows. npos when it lands nowhere.
inline std::size_t assign_row(const std::pair<double, double>& row,
                              const std::vector<std::pair<double, double>>& refs) {
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& [s, e] = refs[i];
        if (row.first == row.second) {
            if (row.first >= s && row.first < e) return i;
        } else if (std::min(row.second, e) > std::max(row.first, s)) {
            return i;
        }
    }
    return std::string::npos;
}

} // namespace detail

// Pads every modality onto the grid of valid text rows. Block i holds the
// i-th valid text row plus the source rows assigned to its interval, real
// rows first, zero pads after, every row carrying the reference interval.
// Aligning twice is the identity, bit for bit.
inline Sample align_sample(const Sample& in) {
    validate_sample(in);
    const std::vector<bool> text_valid = in.text.valid_rows();
    std::vector<std::size_t> anchors;
    for (std::size_t i = 0; i < text_valid.size(); ++i)
        if (text_valid[i]) anchors.push_back(i);
    if (anchors.empty()) throw DataError("sample '" + in.id + "': no valid text rows to align to");
    std::vector<std::pair<double, double>> refs;
    for (std::size_t a : anchors) refs.push_back(in.text.intervals[a]);

    struct Assigned {
        std::vector<std::vector<std::size_t>> rows; // per reference block
    };
    auto assign = [&](const ModalitySequence& src) {
        Assigned out;
        out.rows.resize(refs.size());
        const std::vector<bool> valid = src.valid_rows();
        for (std::size_t i = 0; i < src.length(); ++i) {
            if (!valid[i]) continue;
            const std::size_t block = detail::assign_row(src.intervals[i], refs);
            if (block != std::string::npos) out.rows[block].push_back(i);
        }
        return out;
    };
    const Assigned av = assign(in.visual), aa = assign(in.audio);

    std::vector<std::size_t> block_size(refs.size());
    std::size_t total = 0;
    for (std::size_t b = 0; b < refs.size(); ++b) {
        block_size[b] = std::max<std::size_t>({1, av.rows[b].size(), aa.rows[b].size()});
        total += block_size[b];
    }

    auto build = [&](const ModalitySequence& src, const std::vector<std::vector<std::size_t>>* rows,
                     std::size_t width) {
        ModalitySequence out;
        out.features = Tensor::zeros({total, width});
        out.intervals.reserve(total);
        std::size_t at = 0;
        for (std::size_t b = 0; b < refs.size(); ++b) {
            std::vector<std::size_t> real;
            if (rows) real = (*rows)[b];
            else real = {anchors[b]}; // text block: the anchor row itself
            for (std::size_t k = 0; k < block_size[b]; ++k) {
                if (k < real.size())
                    for (std::size_t f = 0; f < width; ++f)
                        out.features.at(at, f) = src.features.at(real[k], f);
                out.intervals.push_back(refs[b]);
                ++at;
            }
        }
        return out;
    };

    Sample out;
    out.id = in.id;
    out.labels = in.labels;
    out.text = build(in.text, nullptr, in.text.features.cols());
    out.visual = build(in.visual, &av.rows, in.visual.features.cols());
    out.audio = build(in.audio, &aa.rows, in.audio.features.cols());
    return out;
}

inline Dataset align_dataset(const Dataset& ds) {
    Dataset out;
    out.reserve(ds.size());
    for (const Sample& s : ds) out.push_back(align_sample(s));
    return out;
}

// ---- synthetic corpus ----------------------------------------------------------

namespace detail {

// Box-Muller on the engine's uniform draws; identical everywhere for a seed.
inline double gaussian(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(1e-12, 1.0);
    const double a = u(rng), b = u(rng);
    return std::sqrt(-2.0 * std::log(a)) * std::cos(2.0 * 3.14159265358979323846 * b);
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return lo + std::size_t(rng() % (hi - lo + 1));
}

// Unit vector concentrated on one third of the feature range; group g of a
// modality always emits along the same direction.
inline std::vector<double> group_direction(std::size_t group, std::size_t dim) {
    const std::size_t lo = group * dim / 3, hi = (group + 1) * dim / 3;
    std::vector<double> v(dim, 0.0);
    const double w = 1.0 / std::sqrt(double(hi - lo));
    for (std::size_t f = lo; f < hi; ++f) v[f] = w;
    return v;
}

} // namespace detail

struct FeatureDims {
    std::size_t text = 8, visual = 12, audio = 10;
};

// Deterministic corpus. Each class is a triple of group motifs, one per
// modality, with the group maps chosen so one modality narrows a sample to
// two classes while any two modalities identify it. Visual rows also carry a
// per-sample constant offset that no class shares.
inline Dataset synth_dataset(const SynthSpec& spec, const FeatureDims& dims, std::uint64_t seed) {
    spec.validate();
    Dataset ds;
    ds.reserve(spec.n_samples);
    for (std::size_t n = 0; n < spec.n_samples; ++n) {
        std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (n + 1)));
        Sample s;
        {
            std::ostringstream id;
            id << "synth-" << std::setw(6) << std::setfill('0') << n;
            s.id = id.str();
        }
        const std::size_t cls = detail::uniform_index(rng, 0, kNumClasses - 1);
        s.labels.sentiment = 0.0;
        s.labels.emotions.fill(0.0);
        s.labels.emotions[cls] = 3.0;

        const std::size_t n_int = detail::uniform_index(rng, spec.intervals_min, spec.intervals_max);
        std::vector<double> offset(dims.visual);
        for (double& v : offset)
            v = spec.visual_offset_scale * detail::gaussian(rng) / std::sqrt(double(dims.visual));

        auto emit = [&](ModalitySequence& seq, std::size_t dim, std::size_t group,
                        std::size_t rows_min, std::size_t rows_max, bool add_offset) {
            const std::vector<double> dir = detail::group_direction(group, dim);
            std::vector<std::vector<double>> rows;
            std::vector<std::pair<double, double>> intervals;
            for (std::size_t i = 0; i < n_int; ++i) {
                const std::size_t g = detail::uniform_index(rng, rows_min, rows_max);
                for (std::size_t k = 0; k < g; ++k) {
                    std::vector<double> row(dim);
                    for (std::size_t f = 0; f < dim; ++f)
                        row[f] = spec.motif_amp * dir[f] + spec.noise * detail::gaussian(rng) +
                                 (add_offset ? offset[f] : 0.0);
                    rows.push_back(std::move(row));
                    intervals.emplace_back(double(i) + double(k) / double(g),
                                           double(i) + double(k + 1) / double(g));
                }
            }
            seq.features = Tensor::zeros({rows.size(), dim});
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t f = 0; f < dim; ++f) seq.features.at(i, f) = rows[i][f];
            seq.intervals = std::move(intervals);
        };

        emit(s.text, dims.text, spec.text_groups[cls], 1, 1, false);
        emit(s.visual, dims.visual, spec.visual_groups[cls], spec.visual_rows_min,
             spec.visual_rows_max, true);
        emit(s.audio, dims.audio, spec.audio_groups[cls], spec.audio_rows_min, spec.audio_rows_max,
             false);
        validate_sample(s);
        ds.push_back(std::move(s));
    }
    return ds;
}

// ---- splits ---------------------------------------------------------------------

struct SplitDataset {
    Dataset train, valid, test;
};

// Deterministic Fisher-Yates, then 80:10:10 with both holdouts rounded.
inline SplitDataset split_dataset(const Dataset& ds, std::uint64_t seed) {
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[detail::uniform_index(rng, 0, i - 1)]);
    const std::size_t n = ds.size();
    const std::size_t n_va = std::size_t(std::llround(0.1 * double(n)));
    const std::size_t n_te = std::size_t(std::llround(0.1 * double(n)));
    if (n_va + n_te >= n) throw DataError("dataset too small to split");
    SplitDataset out;
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = ds[order[i]];
        if (i < n - n_va - n_te) out.train.push_back(s);
        else if (i < n - n_te) out.valid.push_back(s);
        else out.test.push_back(s);
    }
    return out;
}

} // namespace deltafusion
