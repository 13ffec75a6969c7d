#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "deltafusion/checkpoint.hpp"
#include "deltafusion/config.hpp"
#include "deltafusion/data.hpp"
#include "deltafusion/metrics.hpp"
#include "deltafusion/training.hpp"

using namespace deltafusion;

namespace {

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.text_dim = 4;
    cfg.visual_dim = 6;
    cfg.audio_dim = 5;
    cfg.channels = 6;
    cfg.key_dim = 6;
    cfg.value_dim = 6;
    cfg.out_dim = 6;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.conv_kernel = 3;
    cfg.t_max = 12;
    cfg.dcca_hidden = 5;
    cfg.dcca_out = 4;
    cfg.dcca_kernel = 1;
    cfg.cca_reg = 1e-3;
    cfg.fused_dim = 8;
    return cfg;
}

TrainConfig toy_stages() {
    TrainConfig tc;
    tc.text = {3, 3e-3, 4, 1e-4};
    tc.visual = {3, 3e-3, 4, 1e-4};
    tc.audio = {3, 3e-3, 4, 1e-4};
    tc.dcca = {8, 1e-3, 4, 1e-6};
    tc.fused = {10, 3e-3, 4, 1e-6};
    return tc;
}

Dataset toy_data(std::size_t n, std::uint64_t seed) {
    SynthSpec spec;
    spec.n_samples = n;
    spec.intervals_min = 2;
    spec.intervals_max = 4;
    const ModelConfig cfg = toy_config();
    const FeatureDims dims{cfg.text_dim, cfg.visual_dim, cfg.audio_dim};
    return align_dataset(synth_dataset(spec, dims, seed));
}

std::vector<double> losses_for(const std::string& lines, const std::string& tag) {
    std::vector<double> out;
    std::istringstream in(lines);
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream fields(line);
        std::string t, epoch, loss;
        std::getline(fields, t, '\t');
        std::getline(fields, epoch, '\t');
        std::getline(fields, loss, '\t');
        if (t == tag) out.push_back(std::stod(loss));
    }
    return out;
}

std::vector<double> snapshot(FusionModel& m) {
    std::vector<double> out;
    m.visit_params([&](const std::string&, Tensor& t) {
        out.insert(out.end(), t.data().begin(), t.data().end());
    });
    return out;
}

std::vector<Labels> balanced_labels(std::size_t per_class) {
    std::vector<Labels> out;
    for (std::size_t c = 0; c < kNumClasses; ++c)
        for (std::size_t k = 0; k < per_class; ++k) {
            Labels l;
            l.emotions.fill(0.0);
            l.emotions[c] = 3.0;
            out.push_back(l);
        }
    return out;
}

ClassProbs one_hot(std::size_t c) {
    ClassProbs p{};
    p[c] = 1.0;
    return p;
}

} // namespace

// ---- metrics ----------------------------------------------------------------

TEST_CASE("perfect predictions score perfectly") {
    std::vector<Labels> labels = balanced_labels(2);
    std::vector<ClassProbs> probs;
    for (const Labels& l : labels) probs.push_back(one_hot(l.dominant()));
    MetricsReport rep = score_predictions(probs, labels);
    REQUIRE(rep.n == 12);
    REQUIRE(rep.acc6 == 1.0);
    REQUIRE(rep.weighted_f1 == 1.0);
    REQUIRE(rep.mae == 0.0);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        REQUIRE(rep.f1[c] == 1.0);
        REQUIRE(rep.acc2[c] == 1.0);
        REQUIRE(rep.confusion[c][c] == 2);
    }
}

TEST_CASE("a constant predictor on balanced data scores at chance") {
    std::vector<Labels> labels = balanced_labels(2);
    std::vector<ClassProbs> probs(labels.size(), one_hot(0));
    MetricsReport rep = score_predictions(probs, labels);
    REQUIRE(rep.acc6 == Catch::Approx(1.0 / 6.0));
    // Precision 1/6 and recall 1 on the predicted class, 0 elsewhere.
    REQUIRE(rep.f1[0] == Catch::Approx(2.0 / 7.0));
    for (std::size_t c = 1; c < kNumClasses; ++c) {
        REQUIRE(rep.f1[c] == 0.0);
        REQUIRE(rep.acc2[c] == Catch::Approx(10.0 / 12.0));
    }
    REQUIRE(rep.acc2[0] == Catch::Approx(2.0 / 12.0));
    REQUIRE(rep.weighted_f1 == Catch::Approx((2.0 / 7.0) / 6.0));
    // Ten of twelve samples miss: |3-0| on two classes, averaged over six.
    REQUIRE(rep.mae == Catch::Approx(10.0 / 12.0));
    std::size_t row_sum = 0;
    for (std::size_t p = 0; p < kNumClasses; ++p) row_sum += rep.confusion[2][p];
    REQUIRE(row_sum == 2);
}

TEST_CASE("metric ranges hold for arbitrary distributions") {
    std::vector<Labels> labels = balanced_labels(3);
    std::mt19937_64 rng(5);
    std::vector<ClassProbs> probs;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ClassProbs p{};
        double z = 0.0;
        for (double& v : p) {
            v = double(rng() % 1000) + 1.0;
            z += v;
        }
        for (double& v : p) v /= z;
        probs.push_back(p);
    }
    MetricsReport rep = score_predictions(probs, labels);
    REQUIRE(rep.acc6 >= 0.0);
    REQUIRE(rep.acc6 <= 1.0);
    REQUIRE(rep.weighted_f1 >= 0.0);
    REQUIRE(rep.weighted_f1 <= 1.0);
    REQUIRE(rep.mae >= 0.0);
    REQUIRE(rep.mae <= 3.0);
    const std::string tsv = rep.tsv_line();
    REQUIRE(tsv.find('\t') != std::string::npos);
    REQUIRE(MetricsReport::tsv_header().substr(0, 2) == "n\t");
}

TEST_CASE("scorer rejects mismatched input sizes") {
    REQUIRE_THROWS_AS(score_predictions({one_hot(0)}, balanced_labels(2)), ShapeError);
    REQUIRE_THROWS_AS(score_predictions({}, {}), ShapeError);
}

// ---- checkpoints ------------------------------------------------------------

TEST_CASE("checkpoints restore every tensor bit for bit") {
    const ModelConfig cfg = toy_config();
    FusionModel a = FusionModel::init(cfg, 42);
    // The fitted projections are state too; make them distinctive.
    for (std::size_t i = 0; i < a.proj_text.size(); ++i) a.proj_text.data()[i] = 0.1 * double(i);
    for (std::size_t i = 0; i < a.mean_audio.size(); ++i) a.mean_audio.data()[i] = -1.5 + double(i);

    const std::string path = "toy_model.ckpt";
    save_checkpoint(path, a, "fused", 42);

    FusionModel b = FusionModel::init(cfg, 777);
    CheckpointMeta meta = load_checkpoint(path, b, "fused");
    REQUIRE(meta.stage == "fused");
    REQUIRE(meta.seed == 42);
    REQUIRE(nlohmann::json(meta.config) == nlohmann::json(cfg));
    REQUIRE(snapshot(a) == snapshot(b));

    SECTION("forward pass after load matches exactly") {
        Dataset ds = toy_data(2, 9);
        const ModalitySequence& seq = ds[0].text;
        Tensor ya = a.text.forward(seq.features, seq.valid_rows()).logits;
        Tensor yb = b.text.forward(seq.features, seq.valid_rows()).logits;
        for (std::size_t i = 0; i < ya.size(); ++i) REQUIRE(ya.data()[i] == yb.data()[i]);
    }
    SECTION("peek reads the manifest without a model") {
        CheckpointMeta peeked = peek_checkpoint(path);
        REQUIRE(peeked.stage == "fused");
        REQUIRE(peeked.seed == 42);
    }
    SECTION("stage tag must match when one is expected") {
        REQUIRE_THROWS_AS(load_checkpoint(path, b, "selfattn_l"), CheckpointError);
    }
    SECTION("payload tampering is caught by the checksum") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-1, std::ios::end);
        f.put('\x7f');
        f.close();
        REQUIRE_THROWS_WITH(load_checkpoint(path, b),
                            Catch::Matchers::ContainsSubstring("checksum"));
    }
    SECTION("garbage files are rejected up front") {
        std::ofstream f("not_a.ckpt", std::ios::binary);
        f << "totally not a checkpoint";
        f.close();
        REQUIRE_THROWS_WITH(load_checkpoint("not_a.ckpt", b),
                            Catch::Matchers::ContainsSubstring("not a checkpoint"));
        std::remove("not_a.ckpt");
    }
    SECTION("a model of different shape cannot absorb the payload") {
        ModelConfig other = cfg;
        other.channels = 8;
        other.key_dim = 8;
        other.value_dim = 8;
        other.out_dim = 8;
        FusionModel c = FusionModel::init(other, 1);
        REQUIRE_THROWS_AS(load_checkpoint(path, c), CheckpointError);
    }
    std::remove(path.c_str());
}

// ---- training stages ----------------------------------------------------------

TEST_CASE("zero learning rate leaves parameters untouched") {
    Dataset ds = toy_data(8, 3);
    TrainConfig tc = toy_stages();
    tc.text.lr = 0.0;
    Trainer t(toy_config(), tc, 5);
    std::vector<double> before = snapshot(t.model);
    t.train_stage1(ds, 'L');
    REQUIRE(snapshot(t.model) == before);
}

TEST_CASE("one stage-1 epoch does not increase the loss on a toy set") {
    Dataset ds = toy_data(4, 17);
    TrainConfig tc = toy_stages();
    tc.text.epochs = 2;
    Trainer t(toy_config(), tc, 5);
    std::vector<double> curve = losses_for(t.train_stage1(ds, 'L'), "stage1.L");
    REQUIRE(curve.size() == 2);
    REQUIRE(curve.back() <= curve.front());
}

TEST_CASE("training is deterministic in the seed") {
    Dataset ds = toy_data(10, 23);
    std::ostringstream log_a, log_b;
    Trainer a(toy_config(), toy_stages(), 9);
    Trainer b(toy_config(), toy_stages(), 9);
    a.fit(ds, true, 3, 1, &log_a);
    b.fit(ds, true, 3, 1, &log_b);
    REQUIRE(log_a.str() == log_b.str());
    REQUIRE(snapshot(a.model) == snapshot(b.model));

    SECTION("a different seed gives a different run") {
        Trainer c(toy_config(), toy_stages(), 10);
        c.fit(ds, true, 3, 1, nullptr);
        REQUIRE(snapshot(a.model) != snapshot(c.model));
    }
}

TEST_CASE("threaded stage 1 reproduces the sequential run") {
    Dataset ds = toy_data(10, 29);
    std::ostringstream log_a, log_b;
    Trainer a(toy_config(), toy_stages(), 4);
    Trainer b(toy_config(), toy_stages(), 4);
    a.fit(ds, true, 1, 1, &log_a);
    b.fit(ds, true, 1, 3, &log_b);
    REQUIRE(log_a.str() == log_b.str());
    REQUIRE(snapshot(a.model) == snapshot(b.model));
}

TEST_CASE("later stages never touch earlier weights") {
    Dataset ds = toy_data(10, 31);
    Trainer t(toy_config(), toy_stages(), 7);
    for (char m : {'L', 'V', 'A'}) t.train_stage1(ds, m);

    auto encoder_bits = [&] {
        std::vector<double> out;
        for (char m : {'L', 'V', 'A'})
            t.model.encoder(m).visit_params("", [&](const std::string&, Tensor& p) {
                out.insert(out.end(), p.data().begin(), p.data().end());
            });
        return out;
    };
    auto view_bits = [&] {
        std::vector<double> out;
        for (char m : {'L', 'V', 'A'})
            t.model.view_encoder(m).visit_params("", [&](const std::string&, Tensor& p) {
                out.insert(out.end(), p.data().begin(), p.data().end());
            });
        return out;
    };

    const std::vector<double> enc_before = encoder_bits();
    std::string lines2 = t.train_stage2(ds);
    REQUIRE(encoder_bits() == enc_before);

    const std::vector<double> views_before = view_bits();
    t.train_stage3(ds);
    REQUIRE(encoder_bits() == enc_before);
    REQUIRE(view_bits() == views_before);

    SECTION("the correlation objective trends downward") {
        std::vector<double> curve = losses_for(lines2, "stage2.dcca");
        REQUIRE(curve.size() == toy_stages().dcca.epochs);
        REQUIRE(curve.back() < curve.front());
    }
}

TEST_CASE("identical views under identical encoders saturate the correlation") {
    const ModelConfig cfg = toy_config();
    FusionModel model = FusionModel::init(cfg, 3);
    model.dcca_visual = model.dcca_text;
    model.dcca_audio = model.dcca_text;
    // With identical inputs and encoders the gap to -3c is pure ridge shrink.
    model.cfg.cca_reg = 1e-6;

    std::mt19937_64 rng(8);
    EncodedViews ev;
    ev.text = Tensor::uniform({20, cfg.out_dim}, 1.0, rng);
    ev.visual = ev.text;
    ev.audio = ev.text;
    ev.text_valid.assign(20, true);
    ev.visual_valid = ev.text_valid;
    ev.audio_valid = ev.text_valid;

    Tensor loss = correlation_loss(model, {&ev});
    REQUIRE(loss.item() < -3.0 * double(cfg.dcca_out) * 0.99);
    REQUIRE(loss.item() >= -3.0 * double(cfg.dcca_out) - 1e-9);
}

TEST_CASE("a converged toy run beats chance on its training data") {
    Dataset ds = toy_data(24, 41);
    Trainer t(toy_config(), toy_stages(), 13);
    t.fit(ds, true, 3, 1, nullptr);
    MetricsReport rep = t.evaluate(ds, true);
    REQUIRE(rep.n == 24);
    REQUIRE(rep.acc6 > 1.0 / 6.0);

    SECTION("the unimodal heads predict too") {
        MetricsReport uni = t.evaluate_unimodal('L', ds, true);
        REQUIRE(uni.n == 24);
        REQUIRE(uni.acc6 > 1.0 / 6.0);
    }
}
