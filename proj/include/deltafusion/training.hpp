#pragma once

// Three-stage training. Stage 1 fits each modality encoder against its own
// class head. Stage 2 trains the correlation encoders on cached encoder
// outputs and then fits the per-view projections. Stage 3 trains the fused
// attention head on cached projected rows. Each stage consumes eager
// snapshots of the previous one, so earlier weights cannot drift: nothing
// downstream ever holds a gradient path into them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "deltafusion/attention.hpp"
#include "deltafusion/config.hpp"
#include "deltafusion/data.hpp"
#include "deltafusion/dcca.hpp"
#include "deltafusion/errors.hpp"
#include "deltafusion/fusion.hpp"
#include "deltafusion/metrics.hpp"
#include "deltafusion/optim.hpp"
#include "deltafusion/tensor.hpp"

namespace deltafusion {

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (0x9E3779B97F4A7C15ULL * (b + 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[uniform_index(rng, 0, i - 1)]);
}

} // namespace detail

// ---- stage losses -----------------------------------------------------------
// These are the exact expressions the trainer differentiates; the derivative
// check suite runs them at toy sizes.

// Mean cross-entropy of one modality's class head over a batch.
inline Tensor unimodal_loss(const ModalityEncoder& enc, char mod,
                            const std::vector<const Sample*>& batch) {
    if (batch.empty()) throw ShapeError("unimodal_loss: empty batch");
    Tensor total;
    for (const Sample* s : batch) {
        const ModalitySequence& seq = s->modality(mod);
        Tensor probs = masked_softmax(enc.forward(seq.features, seq.valid_rows()).logits);
        Tensor term = nll(probs, s->labels.dominant());
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, 1.0 / double(batch.size()));
}

// One sample's encoder outputs with the summary row dropped and pad rows
// forced back to zero, plus everything the later stages need from it.
struct EncodedViews {
    Tensor text, visual, audio; // T x out_dim each
    std::vector<bool> text_valid, visual_valid, audio_valid;
    std::size_t target = 0;

    const Tensor& view(char which) const {
        switch (which) {
            case 'L': return text;
            case 'V': return visual;
            case 'A': return audio;
        }
        throw ConfigError(std::string("unknown modality '") + which + "'");
    }
    const std::vector<bool>& valid(char which) const {
        switch (which) {
            case 'L': return text_valid;
            case 'V': return visual_valid;
            case 'A': return audio_valid;
        }
        throw ConfigError(std::string("unknown modality '") + which + "'");
    }
};

namespace detail {

inline Tensor zero_invalid_rows(const Tensor& y, const std::vector<bool>& valid) {
    Tensor out = Tensor::zeros(y.shape());
    for (std::size_t r = 0; r < y.rows(); ++r) {
        if (!valid[r]) continue;
        for (std::size_t c = 0; c < y.cols(); ++c) out.at(r, c) = y.at(r, c);
    }
    return out;
}

// Timesteps valid in both views; pairs are taken at equal row index.
inline std::vector<std::size_t> paired_rows(const std::vector<bool>& v1,
                                            const std::vector<bool>& v2) {
    std::vector<std::size_t> idx;
    const std::size_t n = std::min(v1.size(), v2.size());
    for (std::size_t t = 0; t < n; ++t)
        if (v1[t] && v2[t]) idx.push_back(t);
    return idx;
}

} // namespace detail

// Runs the frozen modality encoders on one sample. Call outside any record;
// the results carry no gradient state.
inline EncodedViews encode_sample(FusionModel& model, const Sample& s) {
    EncodedViews ev;
    ev.target = s.labels.dominant();
    for (char m : {'L', 'V', 'A'}) {
        const ModalitySequence& seq = s.modality(m);
        std::vector<bool> valid = seq.valid_rows();
        Tensor y = slice_rows(model.encoder(m).forward(seq.features, valid).sequence, 1,
                              seq.length() + 1);
        Tensor yz = detail::zero_invalid_rows(y, valid);
        switch (m) {
            case 'L': ev.text = yz; ev.text_valid = std::move(valid); break;
            case 'V': ev.visual = yz; ev.visual_valid = std::move(valid); break;
            case 'A': ev.audio = yz; ev.audio_valid = std::move(valid); break;
        }
    }
    return ev;
}

// Batch loss for the correlation stage: the three pairwise canonical
// correlation sums, negated so descent raises them. Rows are paired per
// sample at equal timestep where both views are valid.
inline Tensor correlation_loss(FusionModel& model, const std::vector<const EncodedViews*>& batch) {
    if (batch.empty()) throw ShapeError("correlation_loss: empty batch");
    static constexpr char kPairs[3][2] = {{'L', 'V'}, {'V', 'A'}, {'A', 'L'}};
    std::vector<Tensor> h[3]; // per-sample correlation encodings, L/V/A order
    for (const EncodedViews* ev : batch) {
        h[0].push_back(model.dcca_text.forward(ev->text));
        h[1].push_back(model.dcca_visual.forward(ev->visual));
        h[2].push_back(model.dcca_audio.forward(ev->audio));
    }
    auto slot = [](char m) { return std::size_t(m == 'L' ? 0 : m == 'V' ? 1 : 2); };
    Tensor total;
    for (const auto& pair : kPairs) {
        std::vector<Tensor> rows1, rows2;
        for (std::size_t k = 0; k < batch.size(); ++k) {
            const EncodedViews& ev = *batch[k];
            std::vector<std::size_t> idx = detail::paired_rows(ev.valid(pair[0]), ev.valid(pair[1]));
            if (idx.empty()) continue;
            rows1.push_back(gather_rows(h[slot(pair[0])][k], idx));
            rows2.push_back(gather_rows(h[slot(pair[1])][k], idx));
        }
        if (rows1.empty())
            throw DataError(std::string("correlation_loss: no paired rows for ") + pair[0] + "/" +
                            pair[1] + " in this batch");
        Tensor corr;
        try {
            corr = cca_corr(concat(rows1, 0), concat(rows2, 0), model.cfg.dcca_out,
                            model.cfg.cca_reg);
        } catch (const NumericError& e) {
            throw NumericError(std::string("correlation_loss: pair ") + pair[0] + "/" + pair[1] +
                               ": " + e.what());
        }
        total = total.defined() ? add(total, corr) : corr;
    }
    return scale(total, -1.0);
}

// Fits the frozen per-view projections from the full training set, one pair
// per modality: text from (text,visual), visual from (visual,audio), audio
// from (audio,text), taking the left-hand side of each.
inline void fit_projections(FusionModel& model, const std::vector<EncodedViews>& views) {
    static constexpr char kPairs[3][2] = {{'L', 'V'}, {'V', 'A'}, {'A', 'L'}};
    const std::size_t d = model.cfg.dcca_out;
    for (const auto& pair : kPairs) {
        std::vector<double> rows1, rows2;
        std::size_t m = 0;
        for (const EncodedViews& ev : views) {
            Tensor h1 = model.view_encoder(pair[0]).forward(ev.view(pair[0]));
            Tensor h2 = model.view_encoder(pair[1]).forward(ev.view(pair[1]));
            for (std::size_t t : detail::paired_rows(ev.valid(pair[0]), ev.valid(pair[1]))) {
                for (std::size_t c = 0; c < d; ++c) rows1.push_back(h1.at(t, c));
                for (std::size_t c = 0; c < d; ++c) rows2.push_back(h2.at(t, c));
                ++m;
            }
        }
        if (m < 2)
            throw DataError(std::string("fit_projections: fewer than two paired rows for ") +
                            pair[0] + "/" + pair[1]);
        CcaSolution sol;
        try {
            sol = cca_fit(Tensor::from_data({m, d}, rows1), Tensor::from_data({m, d}, rows2), d,
                          model.cfg.cca_reg);
        } catch (const NumericError& e) {
            throw NumericError(std::string("fit_projections: pair ") + pair[0] + "/" + pair[1] +
                               ": " + e.what());
        }
        Tensor& proj = pair[0] == 'L'   ? model.proj_text
                       : pair[0] == 'V' ? model.proj_visual
                                        : model.proj_audio;
        Tensor& mean = pair[0] == 'L'   ? model.mean_text
                       : pair[0] == 'V' ? model.mean_visual
                                        : model.mean_audio;
        for (std::size_t i = 0; i < d; ++i) {
            mean.data()[i] = sol.mean1[i];
            for (std::size_t c = 0; c < d; ++c) proj.at(i, c) = sol.a.at(i, c);
        }
    }
}

// Projected valid rows of all three views, stacked along time. The fused
// attention head has no position table, so block order does not matter.
inline Tensor fused_rows(FusionModel& model, const EncodedViews& ev) {
    std::vector<Tensor> blocks;
    for (char m : {'L', 'V', 'A'}) {
        std::vector<std::size_t> idx;
        const std::vector<bool>& valid = ev.valid(m);
        for (std::size_t t = 0; t < valid.size(); ++t)
            if (valid[t]) idx.push_back(t);
        if (idx.empty()) continue;
        const Tensor& proj = m == 'L'   ? model.proj_text
                             : m == 'V' ? model.proj_visual
                                        : model.proj_audio;
        const Tensor& mean = m == 'L'   ? model.mean_text
                             : m == 'V' ? model.mean_visual
                                        : model.mean_audio;
        Tensor h = model.view_encoder(m).forward(ev.view(m));
        Tensor z = matmul(add_rows(h, scale(mean, -1.0)), proj);
        blocks.push_back(gather_rows(z, idx));
    }
    if (blocks.empty()) throw DataError("fused_rows: sample has no valid rows in any modality");
    return concat(blocks, 0);
}

// Mean cross-entropy of the fused head over cached representations.
inline Tensor fusion_loss(const FusedAttention& fused, const std::vector<const Tensor*>& reps,
                          const std::vector<std::size_t>& targets) {
    if (reps.empty() || reps.size() != targets.size())
        throw ShapeError("fusion_loss: bad batch");
    Tensor total;
    for (std::size_t k = 0; k < reps.size(); ++k) {
        Tensor term = nll(masked_softmax(fused.forward(*reps[k])), targets[k]);
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, 1.0 / double(reps.size()));
}

// ---- trainer ----------------------------------------------------------------

class Trainer {
  public:
    FusionModel model;
    TrainConfig stages;
    std::uint64_t seed = 0;

    Trainer(const ModelConfig& mc, const TrainConfig& tc, std::uint64_t sd)
        : model(FusionModel::init(mc, sd)), stages(tc), seed(sd) {}

    // Stage entry points. Each takes data already in its final alignment
    // form and returns its per-epoch "stage<TAB>epoch<TAB>loss" log lines.
    // Distinct modalities may run concurrently in stage 1: they share
    // nothing but the (read-only) dataset.
    std::string train_stage1(const Dataset& ds, char mod) {
        if (ds.empty()) throw DataError("train: training set is empty");
        const StageConfig& sc = mod == 'L'   ? stages.text
                                : mod == 'V' ? stages.visual
                                             : stages.audio;
        ModalityEncoder& enc = model.encoder(mod);
        std::vector<Tensor> params;
        enc.visit_params("", [&](const std::string&, Tensor& t) { params.push_back(t); });
        return run_stage(std::string("stage1.") + mod, ds.size(), sc, std::move(params),
                         detail::mix_seed(seed, std::uint64_t(mod)),
                         [&](const std::vector<std::size_t>& batch) {
                             std::vector<const Sample*> ptrs;
                             ptrs.reserve(batch.size());
                             for (std::size_t i : batch) ptrs.push_back(&ds[i]);
                             return unimodal_loss(enc, mod, ptrs);
                         });
    }

    std::string train_stage2(const Dataset& ds) {
        std::vector<EncodedViews> views = encode_all(ds);
        std::string lines = correlation_stage(views);
        fit_projections(model, views);
        return lines;
    }

    std::string train_stage3(const Dataset& ds) { return fusion_stage(encode_all(ds)); }

    // Trains stages 1..upto (1, 2 or 3). `aligned` pads every sample onto
    // its text grid first. `jobs` > 1 runs the three stage-1 encoders on
    // separate threads; each modality draws from its own generator, so the
    // result is identical to the sequential run. Per-epoch mean losses go
    // to `log`.
    void fit(const Dataset& raw, bool aligned, int upto = 3, std::size_t jobs = 1,
             std::ostream* log = nullptr) {
        if (upto < 1 || upto > 3) throw ConfigError("fit: stage must be 1, 2 or 3");
        Dataset ds = aligned ? align_dataset(raw) : raw;
        if (ds.empty()) throw DataError("fit: training set is empty");

        const char mods[3] = {'L', 'V', 'A'};
        if (jobs > 1) {
            std::string buf[3];
            std::vector<std::thread> pool;
            for (int k = 0; k < 3; ++k)
                pool.emplace_back([&, k] { buf[k] = train_stage1(ds, mods[k]); });
            for (std::thread& t : pool) t.join();
            if (log)
                for (int k = 0; k < 3; ++k) *log << buf[k];
        } else {
            for (int k = 0; k < 3; ++k) {
                std::string lines = train_stage1(ds, mods[k]);
                if (log) *log << lines;
            }
        }
        if (upto < 2) return;

        std::vector<EncodedViews> views = encode_all(ds);
        std::string lines = correlation_stage(views);
        if (log) *log << lines;
        fit_projections(model, views);
        if (upto < 3) return;

        lines = fusion_stage(views);
        if (log) *log << lines;
    }

    // Frozen encoder outputs for every sample, ready for stages 2 and 3.
    std::vector<EncodedViews> encode_all(const Dataset& ds) {
        if (ds.empty()) throw DataError("train: training set is empty");
        std::vector<EncodedViews> views;
        views.reserve(ds.size());
        for (const Sample& s : ds) views.push_back(encode_sample(model, s));
        return views;
    }

    // Class distributions from the full model.
    std::vector<ClassProbs> predict(const Dataset& raw, bool aligned) {
        Dataset ds = aligned ? align_dataset(raw) : raw;
        std::vector<ClassProbs> out;
        out.reserve(ds.size());
        for (const Sample& s : ds) {
            EncodedViews ev = encode_sample(model, s);
            Tensor probs = masked_softmax(model.fused.forward(fused_rows(model, ev)));
            ClassProbs p{};
            for (std::size_t c = 0; c < kNumClasses; ++c) p[c] = probs.data()[c];
            out.push_back(p);
        }
        return out;
    }

    // Class distributions from one modality's own head.
    std::vector<ClassProbs> predict_unimodal(char mod, const Dataset& raw, bool aligned) {
        Dataset ds = aligned ? align_dataset(raw) : raw;
        std::vector<ClassProbs> out;
        out.reserve(ds.size());
        for (const Sample& s : ds) {
            const ModalitySequence& seq = s.modality(mod);
            Tensor probs =
                masked_softmax(model.encoder(mod).forward(seq.features, seq.valid_rows()).logits);
            ClassProbs p{};
            for (std::size_t c = 0; c < kNumClasses; ++c) p[c] = probs.data()[c];
            out.push_back(p);
        }
        return out;
    }

    MetricsReport evaluate(const Dataset& raw, bool aligned) {
        return score_predictions(predict(raw, aligned), labels_of(raw));
    }
    MetricsReport evaluate_unimodal(char mod, const Dataset& raw, bool aligned) {
        return score_predictions(predict_unimodal(mod, raw, aligned), labels_of(raw));
    }

  private:
    static std::vector<Labels> labels_of(const Dataset& ds) {
        std::vector<Labels> out;
        out.reserve(ds.size());
        for (const Sample& s : ds) out.push_back(s.labels);
        return out;
    }

    static void log_epoch(std::ostream& out, const std::string& tag, std::size_t epoch,
                          double loss) {
        out << tag << '\t' << epoch << '\t' << std::setprecision(17) << loss << '\n';
    }

    [[noreturn]] static void abort_non_finite(const std::string& tag, std::size_t epoch,
                                              std::size_t batch, double loss,
                                              const std::vector<Tensor>& params) {
        double sq = 0.0, peak = 0.0;
        for (const Tensor& p : params)
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double w = p.data()[i];
                sq += w * w;
                peak = std::max(peak, std::abs(w));
            }
        std::ostringstream msg;
        msg << tag << ": loss " << loss << " is not finite (epoch " << epoch << ", batch " << batch
            << ", param norm " << std::sqrt(sq) << ", max |w| " << peak << ")";
        throw NumericError(msg.str());
    }

    // One optimization pass shared by all three stages: shuffled batches,
    // mean loss per epoch, the final partial batch kept. Returns the log
    // lines so threaded callers can emit them in a fixed order.
    template <typename LossFn>
    std::string run_stage(const std::string& tag, std::size_t n, const StageConfig& sc,
                          std::vector<Tensor> params, std::uint64_t stage_seed,
                          LossFn&& batch_loss) {
        std::ostringstream lines;
        // Tensors are shared handles, so this copy watches the live weights.
        const std::vector<Tensor> watched = params;
        Adam opt(std::move(params), {sc.lr, 0.9, 0.999, 1e-8, sc.weight_decay});
        std::mt19937_64 rng(stage_seed);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t(0));
        for (std::size_t epoch = 0; epoch < sc.epochs; ++epoch) {
            detail::shuffle_indices(order, rng);
            double total = 0.0;
            std::size_t batches = 0;
            for (std::size_t start = 0; start < n; start += sc.batch_size) {
                const std::size_t stop = std::min(n, start + sc.batch_size);
                std::vector<std::size_t> batch(order.begin() + std::ptrdiff_t(start),
                                               order.begin() + std::ptrdiff_t(stop));
                ComputationRecord rec;
                double lv;
                {
                    RecordScope scope(rec);
                    Tensor loss = batch_loss(batch);
                    lv = loss.item();
                    if (!std::isfinite(lv)) abort_non_finite(tag, epoch, batches, lv, watched);
                    opt.zero_grad();
                    rec.backward(loss);
                }
                opt.step();
                total += lv;
                ++batches;
            }
            log_epoch(lines, tag, epoch, total / double(batches));
        }
        return lines.str();
    }

    std::string correlation_stage(const std::vector<EncodedViews>& views) {
        std::vector<Tensor> params;
        for (char m : {'L', 'V', 'A'})
            model.view_encoder(m).visit_params("", [&](const std::string&, Tensor& t) {
                params.push_back(t);
            });
        return run_stage("stage2.dcca", views.size(), stages.dcca, std::move(params),
                         detail::mix_seed(seed, std::uint64_t('D')),
                         [&](const std::vector<std::size_t>& batch) {
                             std::vector<const EncodedViews*> ptrs;
                             ptrs.reserve(batch.size());
                             for (std::size_t i : batch) ptrs.push_back(&views[i]);
                             return correlation_loss(model, ptrs);
                         });
    }

    std::string fusion_stage(const std::vector<EncodedViews>& views) {
        std::vector<Tensor> reps;
        std::vector<std::size_t> targets;
        reps.reserve(views.size());
        for (const EncodedViews& ev : views) {
            reps.push_back(fused_rows(model, ev));
            targets.push_back(ev.target);
        }
        std::vector<Tensor> params;
        model.fused.visit_params("fused", [&](const std::string&, Tensor& t) {
            params.push_back(t);
        });
        return run_stage("stage3.fused", reps.size(), stages.fused, std::move(params),
                         detail::mix_seed(seed, std::uint64_t('F')),
                         [&](const std::vector<std::size_t>& batch) {
                             std::vector<const Tensor*> r;
                             std::vector<std::size_t> t;
                             r.reserve(batch.size());
                             for (std::size_t i : batch) {
                                 r.push_back(&reps[i]);
                                 t.push_back(targets[i]);
                             }
                             return fusion_loss(model.fused, r, t);
                         });
    }
};

} // namespace deltafusion
