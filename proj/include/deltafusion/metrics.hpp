#pragma once

#include <array>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deltafusion/config.hpp"
#include "deltafusion/data.hpp"
#include "deltafusion/errors.hpp"

namespace deltafusion {

using ClassProbs = std::array<double, kNumClasses>;

inline std::size_t argmax_class(const ClassProbs& p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < kNumClasses; ++c)
        if (p[c] > p[best]) best = c;
    return best;
}

struct MetricsReport {
    std::size_t n = 0;
    double acc6 = 0.0;
    std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{}; // [true][pred]
    std::array<double, kNumClasses> acc2{};
    std::array<double, kNumClasses> f1{};
    double weighted_f1 = 0.0;
    double mae = 0.0; // |3 * p_c - intensity_c| averaged over samples and classes

    nlohmann::json to_json() const {
        nlohmann::json per_class = nlohmann::json::object();
        for (std::size_t c = 0; c < kNumClasses; ++c)
            per_class[class_names()[c]] = {{"acc2", acc2[c]}, {"f1", f1[c]}};
        nlohmann::json conf = nlohmann::json::array();
        for (const auto& row : confusion) conf.push_back(row);
        return nlohmann::json{{"n", n},           {"acc6", acc6},
                              {"confusion", conf}, {"per_class", per_class},
                              {"weighted_f1", weighted_f1}, {"mae", mae}};
    }

    static std::string tsv_header() {
        std::string h = "n\tacc6\tweighted_f1\tmae";
        for (const std::string& name : class_names()) h += "\tf1_" + name;
        return h;
    }

    std::string tsv_line() const {
        std::ostringstream os;
        os.precision(17);
        os << n << '\t' << acc6 << '\t' << weighted_f1 << '\t' << mae;
        for (double v : f1) os << '\t' << v;
        return os.str();
    }
};

// Scores argmax predictions against the dominant labeled emotion; the
// mean-absolute-error column compares scaled probabilities with the raw
// intensities.
inline MetricsReport score_predictions(const std::vector<ClassProbs>& probs,
                                       const std::vector<Labels>& labels) {
    if (probs.size() != labels.size() || probs.empty())
        throw ShapeError("score_predictions: " + std::to_string(probs.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
    MetricsReport r;
    r.n = probs.size();
    double mae_sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const std::size_t truth = labels[i].dominant();
        const std::size_t pred = argmax_class(probs[i]);
        r.confusion[truth][pred] += 1;
        for (std::size_t c = 0; c < kNumClasses; ++c)
            mae_sum += std::fabs(3.0 * probs[i][c] - labels[i].emotions[c]);
    }
    r.mae = mae_sum / double(r.n * kNumClasses);
    std::size_t hits = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) hits += r.confusion[c][c];
    r.acc6 = double(hits) / double(r.n);

    double weighted = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t tp = r.confusion[c][c], fn = 0, fp = 0;
        for (std::size_t k = 0; k < kNumClasses; ++k) {
            if (k == c) continue;
            fn += r.confusion[c][k];
            fp += r.confusion[k][c];
        }
        const std::size_t tn = r.n - tp - fn - fp;
        r.acc2[c] = double(tp + tn) / double(r.n);
        const double precision = (tp + fp) ? double(tp) / double(tp + fp) : 0.0;
        const double recall = (tp + fn) ? double(tp) / double(tp + fn) : 0.0;
        r.f1[c] = (precision + recall > 0.0) ? 2.0 * precision * recall / (precision + recall) : 0.0;
        weighted += double(tp + fn) * r.f1[c];
    }
    r.weighted_f1 = weighted / double(r.n);
    return r;
}

} // namespace deltafusion
