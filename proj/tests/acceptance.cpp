// Acceptance gate for the fusion stack. Each numbered check prints one
// PASS/FAIL line and the process exits nonzero if anything failed. Every
// tolerance is written next to the comparison it guards.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <initializer_list>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "deltafusion/attention.hpp"
#include "deltafusion/checkpoint.hpp"
#include "deltafusion/config.hpp"
#include "deltafusion/data.hpp"
#include "deltafusion/dcca.hpp"
#include "deltafusion/fusion.hpp"
#include "deltafusion/gradcheck_suite.hpp"
#include "deltafusion/metrics.hpp"
#include "deltafusion/tensor.hpp"
#include "deltafusion/training.hpp"

using namespace deltafusion;

namespace {

int g_failed = 0;

template <typename... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return std::string(buf);
}

void report(int index, const char* what, bool ok, const std::string& detail) {
    std::printf("[%d/9] %-48s %s  %s\n", index, what, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failed;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1. Every differentiable op and all three stage losses pass a central
//    finite-difference comparison, and the whole sweep stays fast.
void check_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<GradSuiteEntry> entries = run_gradcheck_suite(20240901ULL);
    const double secs = seconds_since(t0);

    double worst = 0.0;
    std::size_t total = 0;
    bool under_gate = true;
    for (const GradSuiteEntry& e : entries) {
        worst = std::max(worst, e.result.max_rel_err);
        total += e.result.entries_checked;
        if (!(e.result.max_rel_err < 1e-4)) under_gate = false;
    }
    bool covered = true;
    for (const std::string& op : differentiable_op_names()) {
        bool seen = false;
        for (const GradSuiteEntry& e : entries) seen = seen || e.name == op;
        covered = covered && seen;
    }
    for (const char* stage :
         {"stage1_unimodal_loss", "stage2_correlation_loss", "stage3_fusion_loss"}) {
        bool seen = false;
        for (const GradSuiteEntry& e : entries) seen = seen || e.name == stage;
        covered = covered && seen;
    }
    report(1, "every gradient survives finite differences",
           under_gate && covered && secs < 60.0,
           fmt("worst rel err %.3e over %zu entries, %.2f s", worst, total, secs));
}

// 2. Position logits depend only on feature deltas: adding a per-feature
//    constant changes nothing (bit-exact when the additions themselves are
//    exact), constant sequences give exact zeros, and a zero delta table
//    makes the layer match plain multi-head attention.
void check_delta_invariance() {
    std::mt19937_64 rng(42);

    Tensor x = Tensor::zeros({5, 3});
    for (std::size_t i = 0; i < x.size(); ++i)
        x.data()[i] = (double(rng() % 129) - 64.0) / 64.0; // 1/64 grid
    Tensor w = Tensor::uniform({3, 8}, 1.0, rng);
    const double offsets[3] = {0.5, -1.25, 2.75}; // dyadic, so x + offset is exact
    Tensor shifted = Tensor::zeros({5, 3});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t f = 0; f < 3; ++f) shifted.at(i, f) = x.at(i, f) + offsets[f];
    Tensor base = rpe_logits(x, w);
    Tensor moved = rpe_logits(shifted, w);
    const bool shift_exact =
        std::memcmp(base.data().data(), moved.data().data(), base.size() * sizeof(double)) == 0;

    Tensor cx = Tensor::zeros({4, 3});
    for (std::size_t f = 0; f < 3; ++f) {
        const double v = (double(rng() % 129) - 64.0) / 64.0;
        for (std::size_t i = 0; i < 4; ++i) cx.at(i, f) = v;
    }
    Tensor flat = rpe_logits(cx, w);
    bool const_zero = true;
    for (std::size_t i = 0; i < flat.size(); ++i)
        const_zero = const_zero && flat.data()[i] == 0.0;

    const std::size_t d_in = 6, key = 8, val = 8, d_out = 6, heads = 2, t = 7;
    DeltaAttentionLayer layer =
        DeltaAttentionLayer::init(d_in, key, val, d_out, heads, 12, rng);
    Tensor xin = Tensor::uniform({t, d_in}, 1.0, rng);
    Tensor ones = Tensor::zeros({t, t});
    for (std::size_t i = 0; i < ones.size(); ++i) ones.data()[i] = 1.0;
    Tensor got = layer.forward(xin, ones);

    // Reference attention written with plain loops: [x|1] projections,
    // per-head slices, softmax, concatenation, output projection.
    auto affine = [](const Tensor& in, const Tensor& wt) {
        Tensor out = Tensor::zeros({in.rows(), wt.cols()});
        for (std::size_t i = 0; i < in.rows(); ++i)
            for (std::size_t j = 0; j < wt.cols(); ++j) {
                double s = wt.at(in.cols(), j);
                for (std::size_t f = 0; f < in.cols(); ++f) s += in.at(i, f) * wt.at(f, j);
                out.at(i, j) = s;
            }
        return out;
    };
    Tensor q = affine(xin, layer.w_q);
    Tensor k = affine(xin, layer.w_k);
    Tensor v = affine(xin, layer.w_v);
    const std::size_t dk = key / heads, dv = val / heads;
    Tensor ctx = Tensor::zeros({t, val});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i) {
            std::vector<double> l(t);
            double mx = -1e300;
            for (std::size_t j = 0; j < t; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dk; ++c) s += q.at(i, h * dk + c) * k.at(j, h * dk + c);
                l[j] = s / std::sqrt(double(dk));
                mx = std::max(mx, l[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < t; ++j) {
                l[j] = std::exp(l[j] - mx);
                z += l[j];
            }
            for (std::size_t c = 0; c < dv; ++c) {
                double s = 0.0;
                for (std::size_t j = 0; j < t; ++j) s += (l[j] / z) * v.at(j, h * dv + c);
                ctx.at(i, h * dv + c) = s;
            }
        }
    Tensor want = affine(ctx, layer.w_o);
    double vanilla_gap = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i)
        vanilla_gap = std::max(vanilla_gap, std::fabs(got.data()[i] - want.data()[i]));

    report(2, "delta logits shift-invariant, start vanilla",
           shift_exact && const_zero && vanilla_gap <= 1e-12,
           fmt("shift bit-equal %d, constant zeros %d, vanilla gap %.1e", int(shift_exact),
               int(const_zero), vanilla_gap));
}

// 3. Attention masks: padded or out-of-window positions receive exactly
//    zero weight and every row still sums to one.
void check_masks() {
    std::mt19937_64 rng(7);
    const std::vector<bool> valid = {true, true, false, true, true, false, false, true, true};
    const std::pair<std::size_t, bool> modes[4] = {{0, false}, {2, false}, {0, true}, {3, true}};
    bool zeros_ok = true;
    std::size_t masked_seen = 0;
    double worst_row = 0.0;
    for (const auto& [window, causal] : modes) {
        Tensor mask = self_attention_mask(valid, window, causal);
        Tensor logits = Tensor::uniform({9, 9}, 2.0, rng);
        Tensor p = masked_softmax(logits, mask);
        for (std::size_t i = 0; i < 9; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 9; ++j) {
                if (mask.at(i, j) == 0.0) {
                    ++masked_seen;
                    if (p.at(i, j) != 0.0) zeros_ok = false;
                }
                s += p.at(i, j);
            }
            worst_row = std::max(worst_row, std::fabs(s - 1.0));
        }
    }
    report(3, "masks zero the pads, rows still sum to one",
           zeros_ok && worst_row <= 1e-12 && masked_seen > 0,
           fmt("%zu masked entries exactly zero, row sums off by %.1e", masked_seen, worst_row));
}

// 4. Correlation oracle: two views sharing a latent z per dimension, with
//    independent noise scaled by a, have canonical correlations 1/(1+a^2).
//    The measured sum must land within 2%, stay put under orthogonal
//    rotations of either view, and collapse for independent views.
void check_cca_oracle() {
    const std::size_t m = 10000, d = 4;
    const double noise[4] = {0.25, 0.5, 1.0, 2.0};
    double expected = 0.0;
    for (double a : noise) expected += 1.0 / (1.0 + a * a);

    std::mt19937_64 rng(11);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Tensor h1 = Tensor::zeros({m, d}), h2 = Tensor::zeros({m, d});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            const double z = gauss(rng);
            h1.at(i, c) = z + noise[c] * gauss(rng);
            h2.at(i, c) = z + noise[c] * gauss(rng);
        }
    const double corr = cca_corr(h1, h2, d, 1e-6).item();
    const double rel = std::fabs(corr - expected) / expected;

    auto orthonormal = [&] { // Gram-Schmidt on gaussian rows
        Tensor qm = Tensor::zeros({d, d});
        for (std::size_t r = 0; r < d; ++r) {
            std::vector<double> v(d);
            for (double& x : v) x = gauss(rng);
            for (std::size_t p = 0; p < r; ++p) {
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) dot += v[c] * qm.at(p, c);
                for (std::size_t c = 0; c < d; ++c) v[c] -= dot * qm.at(p, c);
            }
            double nrm = 0.0;
            for (double x : v) nrm += x * x;
            nrm = std::sqrt(nrm);
            for (std::size_t c = 0; c < d; ++c) qm.at(r, c) = v[c] / nrm;
        }
        return transpose(qm);
    };
    const double corr_rot =
        cca_corr(matmul(h1, orthonormal()), matmul(h2, orthonormal()), d, 1e-6).item();
    const double rot_drift = std::fabs(corr_rot - corr);

    Tensor g1 = Tensor::zeros({m, d}), g2 = Tensor::zeros({m, d});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            g1.at(i, c) = gauss(rng);
            g2.at(i, c) = gauss(rng);
        }
    const double indep = cca_corr(g1, g2, 1, 1e-6).item();

    report(4, "cca recovers a constructed correlation",
           rel <= 0.02 && rot_drift <= 1e-6 && indep < 0.05,
           fmt("sum %.4f vs %.4f, rotation drift %.1e, independent %.4f", corr, expected,
               rot_drift, indep));
}

// 5. At the default (dimension-matched) configuration the model needs about
//    half the reference's parameters, and the attention budget is exactly
//    half: three self-attention stacks against the reference's six
//    cross-modal ones of identical shape.
void check_param_claim() {
    const ModelConfig cfg;
    const double ratio = param_ratio(cfg);
    const std::size_t mine = proposed_param_breakdown(cfg).bucket("attention_modules");
    const std::size_t ref = reference_param_breakdown(cfg).bucket("attention_modules");
    const bool half = cfg.out_dim == cfg.channels && 2 * mine == ref;
    report(5, "about half the reference parameter count",
           ratio >= 0.45 && ratio <= 0.65 && half,
           fmt("ratio %.4f, attention %zu vs %zu", ratio, mine, ref));
}

// Shared benchmark runner for checks 6 and 7. The split's valid and test
// slices are both untouched by training and model selection, so the two
// together form the 200-sample held-out set that gets scored.
struct BenchResult {
    double fused = 0.0;
    double best_uni = 0.0;
};

BenchResult bench_run(std::uint64_t seed, bool aligned) {
    ModelConfig mc;
    mc.channels = 16;
    mc.key_dim = 16;
    mc.value_dim = 16;
    mc.out_dim = 16;
    mc.heads = 4;
    mc.layers = 2;
    mc.conv_kernel = 3;
    mc.t_max = 20;
    mc.dcca_hidden = 12;
    mc.dcca_out = 6;
    mc.dcca_kernel = 1;
    mc.cca_reg = 1e-4;
    mc.fused_dim = 8;

    TrainConfig tc;
    tc.text = {8, 3e-3, 16, 1e-4};
    tc.visual = {8, 3e-3, 16, 1e-4};
    tc.audio = {8, 3e-3, 16, 1e-4};
    tc.dcca = {30, 1e-3, 8, 1e-6};
    tc.fused = {40, 3e-3, 8, 1e-6};

    const SynthSpec spec;
    const FeatureDims dims;
    Dataset ds = synth_dataset(spec, dims, seed);
    SplitDataset split = split_dataset(ds, seed);
    Dataset held = split.valid;
    for (const Sample& s : split.test) held.push_back(s);

    Trainer trainer(mc, tc, seed);
    trainer.fit(split.train, aligned, 3, 1, nullptr);

    BenchResult r;
    r.fused = trainer.evaluate(held, aligned).acc6;
    for (char mod : {'L', 'V', 'A'})
        r.best_uni = std::max(r.best_uni, trainer.evaluate_unimodal(mod, held, aligned).acc6);
    return r;
}

// 6. Fused accuracy beats the best unimodal head by at least five points on
//    every seed, within the single-core time budget.
// 7. Dropping the alignment grid moves accuracy by at most three points on
//    average across the same seeds.
void check_benchmark() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_margin = 1.0, gap_sum = 0.0, worst_gap = 0.0;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        const BenchResult a = bench_run(seed, true);
        const BenchResult u = bench_run(seed, false);
        worst_margin = std::min(worst_margin, a.fused - a.best_uni);
        const double gap = std::fabs(a.fused - u.fused);
        gap_sum += gap;
        worst_gap = std::max(worst_gap, gap);
    }
    const double secs = seconds_since(t0);
    const double mean_gap = gap_sum / 3.0;
    report(6, "fusion beats the best single modality",
           worst_margin >= 0.05 && secs < 900.0,
           fmt("worst margin %+.1f points over 3 seeds, %.0f s", 100.0 * worst_margin, secs));
    report(7, "alignment moves accuracy under 3 points", mean_gap <= 0.03,
           fmt("mean |aligned-unaligned| %.2f points, worst %.2f", 100.0 * mean_gap,
               100.0 * worst_gap));
}

// 8. Same seed, same metrics, bit for bit; a checkpoint round-trip
//    reproduces predictions exactly; later stages leave earlier stages'
//    parameters untouched.
void check_determinism() {
    ModelConfig mc;
    mc.text_dim = 4;
    mc.visual_dim = 6;
    mc.audio_dim = 5;
    mc.channels = 8;
    mc.key_dim = 8;
    mc.value_dim = 8;
    mc.out_dim = 8;
    mc.heads = 2;
    mc.layers = 2;
    mc.conv_kernel = 3;
    mc.t_max = 20;
    mc.dcca_hidden = 6;
    mc.dcca_out = 4;
    mc.dcca_kernel = 1;
    mc.cca_reg = 1e-4;
    mc.fused_dim = 6;

    TrainConfig tc;
    tc.text = {3, 3e-3, 8, 1e-4};
    tc.visual = {3, 3e-3, 8, 1e-4};
    tc.audio = {3, 3e-3, 8, 1e-4};
    tc.dcca = {6, 1e-3, 8, 1e-6};
    tc.fused = {4, 3e-3, 8, 1e-6};

    SynthSpec spec;
    spec.n_samples = 24;
    spec.intervals_min = 2;
    spec.intervals_max = 4;
    FeatureDims dims;
    dims.text = 4;
    dims.visual = 6;
    dims.audio = 5;
    Dataset ds = synth_dataset(spec, dims, 77);

    Trainer t1(mc, tc, 55);
    t1.fit(ds, true, 3, 1, nullptr);
    Trainer t2(mc, tc, 55);
    t2.fit(ds, true, 3, 1, nullptr);
    const bool repeat_same =
        t1.evaluate(ds, true).to_json().dump() == t2.evaluate(ds, true).to_json().dump();

    const std::filesystem::path ckpt =
        std::filesystem::temp_directory_path() / "acceptance_roundtrip.ckpt";
    save_checkpoint(ckpt.string(), t1.model, "fused", 55);
    Trainer t3(mc, tc, 999);
    load_checkpoint(ckpt.string(), t3.model, "fused");
    std::filesystem::remove(ckpt);
    const std::vector<ClassProbs> p1 = t1.predict(ds, true);
    const std::vector<ClassProbs> p3 = t3.predict(ds, true);
    bool roundtrip = p1.size() == p3.size();
    for (std::size_t i = 0; roundtrip && i < p1.size(); ++i)
        roundtrip = std::memcmp(p1[i].data(), p3[i].data(), sizeof(ClassProbs)) == 0;

    auto snapshot = [](FusionModel& model, std::initializer_list<const char*> prefixes) {
        std::vector<std::pair<std::string, std::vector<double>>> snap;
        model.visit_params([&](const std::string& name, Tensor& t2_) {
            for (const char* p : prefixes)
                if (name.rfind(p, 0) == 0) {
                    snap.emplace_back(name, t2_.data());
                    return;
                }
        });
        return snap;
    };
    auto unchanged = [](FusionModel& model, const auto& snap) {
        std::size_t hit = 0;
        bool same = true;
        model.visit_params([&](const std::string& name, Tensor& t2_) {
            for (const auto& [sname, vals] : snap)
                if (sname == name) {
                    ++hit;
                    same = same && vals.size() == t2_.size() &&
                           std::memcmp(vals.data(), t2_.data().data(),
                                       vals.size() * sizeof(double)) == 0;
                }
        });
        return same && hit == snap.size();
    };

    Trainer t4(mc, tc, 55);
    Dataset final_form = align_dataset(ds);
    for (char mod : {'L', 'V', 'A'}) t4.train_stage1(final_form, mod);
    const auto enc_snap = snapshot(t4.model, {"text", "visual", "audio"});
    t4.train_stage2(final_form);
    const bool frozen_after2 = unchanged(t4.model, enc_snap);
    const auto dcca_snap = snapshot(t4.model, {"dcca"});
    t4.train_stage3(final_form);
    const bool frozen_after3 = unchanged(t4.model, enc_snap) && unchanged(t4.model, dcca_snap);

    report(8, "deterministic, persistent, stage-frozen",
           repeat_same && roundtrip && frozen_after2 && frozen_after3,
           fmt("repeat run %s, round-trip %s, freeze %s", repeat_same ? "bit-equal" : "diverged",
               roundtrip ? "bit-equal" : "diverged",
               frozen_after2 && frozen_after3 ? "bit-equal" : "moved"));
}

// 9. The scorer agrees with a from-scratch rewrite on a random fixture
//    (counts exact, ratios within 1e-12) and puts uniform one-hot guesses
//    at chance level within three binomial standard deviations.
void check_scorer() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t n = 50;
    std::vector<ClassProbs> probs(n);
    std::vector<Labels> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        double z = 0.0;
        for (double& p : probs[i]) {
            p = unit(rng) + 1e-3;
            z += p;
        }
        for (double& p : probs[i]) p /= z;
        labels[i].sentiment = 6.0 * unit(rng) - 3.0;
        for (double& e : labels[i].emotions) e = 3.0 * unit(rng);
    }
    const MetricsReport got = score_predictions(probs, labels);

    std::size_t confusion[kNumClasses][kNumClasses] = {};
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t truth = 0, pred = 0;
        for (std::size_t c = 1; c < kNumClasses; ++c) {
            if (labels[i].emotions[c] > labels[i].emotions[truth]) truth = c;
            if (probs[i][c] > probs[i][pred]) pred = c;
        }
        ++confusion[truth][pred];
    }
    bool counts_ok = got.n == n;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < kNumClasses; ++r)
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            counts_ok = counts_ok && got.confusion[r][c] == confusion[r][c];
            if (r == c) hits += confusion[r][c];
        }

    double drift = std::fabs(got.acc6 - double(hits) / double(n));
    double weighted = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t tp = confusion[c][c], fp = 0, fn = 0;
        for (std::size_t o = 0; o < kNumClasses; ++o)
            if (o != c) {
                fp += confusion[o][c];
                fn += confusion[c][o];
            }
        const std::size_t tn = n - tp - fp - fn;
        const double acc2 = double(tp + tn) / double(n);
        const double prec = tp + fp ? double(tp) / double(tp + fp) : 0.0;
        const double rec = tp + fn ? double(tp) / double(tp + fn) : 0.0;
        const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        weighted += double(tp + fn) * f1 / double(n);
        drift = std::max({drift, std::fabs(got.acc2[c] - acc2), std::fabs(got.f1[c] - f1)});
    }
    double mae = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < kNumClasses; ++c)
            mae += std::fabs(3.0 * probs[i][c] - labels[i].emotions[c]);
    mae /= double(n) * double(kNumClasses);
    drift = std::max({drift, std::fabs(got.weighted_f1 - weighted), std::fabs(got.mae - mae)});

    std::mt19937_64 coin(101);
    const std::size_t big = 5000;
    std::vector<ClassProbs> up(big);
    std::vector<Labels> ul(big);
    for (std::size_t i = 0; i < big; ++i) {
        const std::size_t truth = coin() % kNumClasses;
        const std::size_t pred = coin() % kNumClasses;
        ul[i].emotions[truth] = 3.0;
        up[i] = {};
        up[i][pred] = 1.0;
    }
    const double acc = score_predictions(up, ul).acc6;
    const double band = 3.0 * std::sqrt((1.0 / 6.0) * (5.0 / 6.0) / double(big));

    report(9, "scorer agrees with an independent rewrite",
           counts_ok && drift <= 1e-12 && std::fabs(acc - 1.0 / 6.0) <= band,
           fmt("counts %s, ratio drift %.1e, chance %.4f within %.4f",
               counts_ok ? "exact" : "off", drift, acc, band));
}

} // namespace

int main() {
    check_gradients();
    check_delta_invariance();
    check_masks();
    check_cca_oracle();
    check_param_claim();
    check_benchmark();
    check_determinism();
    check_scorer();
    if (g_failed) {
        std::printf("acceptance: %d check(s) FAILED\n", g_failed);
        return 1;
    }
    std::printf("acceptance: all checks passed\n");
    return 0;
}
