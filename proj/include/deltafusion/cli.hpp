#pragma once

// Command-line front end. Five commands: synth, train, eval, gradcheck,
// paramcount. Every command is deterministic given its inputs and seed and
// writes only under its output directory. Exit codes: 0 success, 1 runtime
// failure, 2 usage or config error.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "deltafusion/checkpoint.hpp"
#include "deltafusion/config.hpp"
#include "deltafusion/data.hpp"
#include "deltafusion/errors.hpp"
#include "deltafusion/fusion.hpp"
#include "deltafusion/gradcheck_suite.hpp"
#include "deltafusion/metrics.hpp"
#include "deltafusion/training.hpp"

namespace deltafusion {

// One run's worth of settings; a config file carries these fields and
// command-line flags override them.
struct RunConfig {
    std::string dataset; // path to a dataset file, or
    SynthSpec synth;     // an inline synthetic spec
    bool has_synth = false;
    std::string align = "aligned";
    std::uint64_t seed = 0;
    std::string out;
    std::size_t jobs = 1;
    bool merge_valid = false;
    ModelConfig model;
    TrainConfig stages;
};

namespace detail {

inline std::string default_out_root() {
    const char* env = std::getenv("DELTAFUSION_OUT_ROOT");
    return (env && *env) ? std::string(env) : std::string("runs");
}

inline nlohmann::json load_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string(what) + ": cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string(what) + ": '" + path + "' is not valid JSON: " + e.what());
    }
}

inline void require_alignment_mode(const std::string& align) {
    if (align != "aligned" && align != "unaligned")
        throw ConfigError("alignment mode must be 'aligned' or 'unaligned', got '" + align + "'");
}

// Canonical stage order; a standalone later stage expects its predecessors'
// checkpoint under the output directory.
inline const std::vector<std::string>& stage_tags() {
    static const std::vector<std::string> tags = {"selfattn_l", "selfattn_v", "selfattn_a", "dcca",
                                                  "fused"};
    return tags;
}

inline int stage_rank(const std::string& tag) {
    const auto& tags = stage_tags();
    for (std::size_t i = 0; i < tags.size(); ++i)
        if (tags[i] == tag) return int(i) + 1;
    return 0;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text,
                            bool append = false) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw DataError("short write to '" + path.string() + "'");
}

inline std::string metrics_tsv(const MetricsReport& rep) {
    return MetricsReport::tsv_header() + "\n" + rep.tsv_line() + "\n";
}

} // namespace detail

// The "synth" key takes either an inline spec object or a path to one.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig rc;
    detail::for_each_known(j, "run config", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "dataset") v.get_to(rc.dataset);
        else if (k == "synth") {
            rc.synth = v.is_string()
                           ? detail::load_json_file(v.get<std::string>(), "synth spec").get<SynthSpec>()
                           : v.get<SynthSpec>();
            rc.has_synth = true;
        }
        else if (k == "align") v.get_to(rc.align);
        else if (k == "seed") v.get_to(rc.seed);
        else if (k == "out") v.get_to(rc.out);
        else if (k == "jobs") v.get_to(rc.jobs);
        else if (k == "merge_valid") v.get_to(rc.merge_valid);
        else if (k == "model") rc.model = v.get<ModelConfig>();
        else if (k == "stages") rc.stages = v.get<TrainConfig>();
        else return false;
        return true;
    });
    return rc;
}

// Loads the configured data source: a dataset file or a synthetic spec,
// exactly one of which must be present.
inline Dataset load_source(const RunConfig& rc) {
    if (!rc.dataset.empty() && rc.has_synth)
        throw ConfigError("config offers both a dataset path and a synth spec; pick one");
    if (!rc.dataset.empty()) return load_dataset(rc.dataset);
    if (rc.has_synth) {
        const FeatureDims dims{rc.model.text_dim, rc.model.visual_dim, rc.model.audio_dim};
        return synth_dataset(rc.synth, dims, rc.seed);
    }
    throw ConfigError("config needs a dataset path or a synth spec");
}

inline int cmd_synth(const SynthSpec& spec, const std::string& out_dir, std::uint64_t seed,
                     std::ostream& out) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Dataset ds = synth_dataset(spec, FeatureDims{}, seed);
    const fs::path path = fs::path(out_dir) / "dataset.jsonl";
    save_dataset(path.string(), ds);
    std::array<std::size_t, kNumClasses> hist{};
    for (const Sample& s : ds) ++hist[s.labels.dominant()];
    out << "samples\t" << ds.size() << '\n';
    for (std::size_t c = 0; c < kNumClasses; ++c)
        out << "class\t" << class_names()[c] << '\t' << hist[c] << '\n';
    out << "wrote\t" << path.string() << '\n';
    return 0;
}

inline int cmd_train(const RunConfig& rc, const std::string& stage, std::ostream& out) {
    namespace fs = std::filesystem;
    detail::require_alignment_mode(rc.align);
    if (stage != "all" && detail::stage_rank(stage) == 0)
        throw ConfigError("unknown stage '" + stage + "'");
    fs::create_directories(rc.out);
    const fs::path out_dir(rc.out);
    const fs::path current = out_dir / "model.ckpt";

    Dataset full = load_source(rc);
    SplitDataset split = split_dataset(full, detail::mix_seed(rc.seed, std::uint64_t('S')));
    Dataset train = split.train;
    if (rc.merge_valid)
        train.insert(train.end(), split.valid.begin(), split.valid.end());
    const bool aligned = rc.align == "aligned";
    Dataset prep = aligned ? align_dataset(train) : train;

    Trainer trainer(rc.model, rc.stages, rc.seed);
    int done_rank = 0;
    if (stage == "all") {
        // A full run always starts from a fresh initialization.
    } else if (fs::exists(current)) {
        CheckpointMeta meta = load_checkpoint(current.string(), trainer.model);
        done_rank = detail::stage_rank(meta.stage);
        out << "resumed\t" << meta.stage << '\n';
    }
    const int want = stage == "all" ? 5 : detail::stage_rank(stage);
    if (stage == "dcca" && done_rank < 3)
        throw CheckpointError("stage dcca needs the three unimodal stages checkpointed first");
    if (stage == "fused" && done_rank < 4)
        throw CheckpointError("stage fused needs the dcca stage checkpointed first");

    auto finish_stage = [&](const std::string& tag, const std::string& lines) {
        detail::write_text_file(out_dir / "train_log.tsv", lines, /*append=*/true);
        save_checkpoint((out_dir / (tag + ".ckpt")).string(), trainer.model, tag, rc.seed);
        save_checkpoint(current.string(), trainer.model, tag, rc.seed);
        out << "stage\t" << tag << "\tdone\n";
    };

    if (stage == "all") {
        const char mods[3] = {'L', 'V', 'A'};
        if (rc.jobs > 1) {
            std::string buf[3];
            std::vector<std::thread> pool;
            for (int k = 0; k < 3; ++k)
                pool.emplace_back([&, k] { buf[k] = trainer.train_stage1(prep, mods[k]); });
            for (std::thread& t : pool) t.join();
            for (int k = 0; k < 3; ++k) finish_stage(detail::stage_tags()[std::size_t(k)], buf[k]);
        } else {
            for (int k = 0; k < 3; ++k)
                finish_stage(detail::stage_tags()[std::size_t(k)],
                             trainer.train_stage1(prep, mods[k]));
        }
        finish_stage("dcca", trainer.train_stage2(prep));
        finish_stage("fused", trainer.train_stage3(prep));
    } else if (stage == "selfattn_l") {
        finish_stage(stage, trainer.train_stage1(prep, 'L'));
    } else if (stage == "selfattn_v") {
        finish_stage(stage, trainer.train_stage1(prep, 'V'));
    } else if (stage == "selfattn_a") {
        finish_stage(stage, trainer.train_stage1(prep, 'A'));
    } else if (stage == "dcca") {
        finish_stage(stage, trainer.train_stage2(prep));
    } else {
        finish_stage(stage, trainer.train_stage3(prep));
    }

    if (want >= 5) {
        if (split.test.empty()) {
            out << "no holdout samples; skipping evaluation\n";
        } else {
            MetricsReport rep = trainer.evaluate(split.test, aligned);
            detail::write_text_file(out_dir / "metrics.json", rep.to_json().dump(2) + "\n");
            detail::write_text_file(out_dir / "metrics.tsv", detail::metrics_tsv(rep));
            out << detail::metrics_tsv(rep);
        }
    }
    return 0;
}

inline int cmd_eval(const RunConfig& rc, std::ostream& out) {
    namespace fs = std::filesystem;
    detail::require_alignment_mode(rc.align);
    const fs::path ckpt = fs::path(rc.out) / "model.ckpt";
    if (!fs::exists(ckpt))
        throw CheckpointError("no checkpoint at '" + ckpt.string() + "'; train first");
    CheckpointMeta meta = peek_checkpoint(ckpt.string());
    Trainer trainer(meta.config, TrainConfig{}, meta.seed);
    load_checkpoint(ckpt.string(), trainer.model, "fused");

    RunConfig data_rc = rc;
    data_rc.model = meta.config; // synth feature widths follow the trained model
    Dataset ds = load_source(data_rc);
    if (ds.empty()) throw DataError("eval: dataset is empty");
    MetricsReport rep = trainer.evaluate(ds, rc.align == "aligned");
    detail::write_text_file(fs::path(rc.out) / "eval_metrics.json", rep.to_json().dump(2) + "\n");
    detail::write_text_file(fs::path(rc.out) / "eval_metrics.tsv", detail::metrics_tsv(rep));
    out << rep.to_json().dump(2) << '\n' << detail::metrics_tsv(rep);
    return 0;
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
    const std::vector<GradSuiteEntry> entries = run_gradcheck_suite(seed);
    double worst = 0.0;
    bool ok = true;
    for (const GradSuiteEntry& e : entries) {
        out << e.name << '\t' << std::setprecision(6) << e.result.max_rel_err << '\t'
            << e.result.entries_checked << '\n';
        worst = std::max(worst, e.result.max_rel_err);
        if (!(e.result.max_rel_err < 1e-4)) ok = false;
    }
    out << "gradcheck\t" << (ok ? "PASS" : "FAIL") << '\t' << std::setprecision(6) << worst << '\n';
    return ok ? 0 : 1;
}

inline int cmd_paramcount(const ModelConfig& cfg, std::ostream& out) {
    cfg.validate();
    const ParamBreakdown mine = proposed_param_breakdown(cfg);
    const ParamBreakdown ref = reference_param_breakdown(cfg);

    std::size_t mine_enum = 0;
    FusionModel model = FusionModel::init(cfg, 0);
    model.visit_params([&](const std::string&, Tensor& t) {
        if (t.requires_grad()) mine_enum += t.size();
    });
    const std::size_t ref_enum = ReferenceModel::init(cfg, 0).param_count();

    for (const auto& [name, n] : mine.buckets) out << "model." << name << '\t' << n << '\n';
    for (const auto& [name, n] : ref.buckets) out << "reference." << name << '\t' << n << '\n';
    out << "model_param_count\t" << mine.total() << '\n';
    out << "model_param_enumerated\t" << mine_enum << '\n';
    out << "mult_reference_param_count\t" << ref.total() << '\n';
    out << "mult_reference_param_enumerated\t" << ref_enum << '\n';
    out << "param_ratio\t" << std::setprecision(17) << param_ratio(cfg) << '\n';
    return 0;
}

// Parses and dispatches. Output goes to `out`, usage and error text to `err`.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    CLI::App app{"hierarchical delta-attention multimodal fusion"};
    app.require_subcommand(1);

    std::string config_path, out_dir, stage = "all", align;
    std::uint64_t seed = 0;
    std::size_t jobs = 0;
    bool merge_valid = false;

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--config", config_path, "synth spec file (JSON, all fields optional)");
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--out", out_dir, "output directory");

    CLI::App* train = app.add_subcommand("train", "run the training stages");
    train->add_option("--config", config_path, "run config file (JSON)");
    train->add_option("--seed", seed, "override the config seed");
    train->add_option("--out", out_dir, "override the output directory");
    train->add_option("--jobs", jobs, "stage-1 worker threads (default 1)");
    train->add_option("--stage", stage, "stage to run")
        ->check(CLI::IsMember({"all", "selfattn_l", "selfattn_v", "selfattn_a", "dcca", "fused"}));
    train->add_option("--align", align, "alignment mode")
        ->check(CLI::IsMember({"aligned", "unaligned"}));
    train->add_flag("--merge-valid", merge_valid, "fold the validation split into training");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a trained checkpoint");
    eval->add_option("--config", config_path, "run config file naming the dataset");
    eval->add_option("--out", out_dir, "directory holding model.ckpt");
    eval->add_option("--align", align, "alignment mode")
        ->check(CLI::IsMember({"aligned", "unaligned"}));

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op");
    gradcheck->add_option("--seed", seed, "probe seed");

    CLI::App* paramcount = app.add_subcommand("paramcount", "parameter accounting vs the reference");
    paramcount->add_option("--config", config_path, "run config file (JSON)");

    std::vector<const char*> argv;
    argv.push_back("deltafusion");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (synth->parsed()) {
            SynthSpec spec;
            if (!config_path.empty())
                spec = detail::load_json_file(config_path, "synth spec").get<SynthSpec>();
            if (out_dir.empty())
                out_dir = (std::filesystem::path(detail::default_out_root()) / "synth").string();
            return cmd_synth(spec, out_dir, seed, out);
        }
        if (train->parsed() || eval->parsed()) {
            RunConfig rc;
            if (!config_path.empty())
                rc = run_config_from_json(detail::load_json_file(config_path, "run config"));
            CLI::App* cmd = train->parsed() ? train : eval;
            if (cmd->count("--out")) rc.out = out_dir;
            if (!align.empty()) rc.align = align;
            if (train->parsed()) {
                if (train->count("--seed")) rc.seed = seed;
                if (jobs > 0) rc.jobs = jobs;
                if (merge_valid) rc.merge_valid = true;
            }
            if (rc.out.empty())
                rc.out = (std::filesystem::path(detail::default_out_root()) / "run").string();
            return train->parsed() ? cmd_train(rc, stage, out) : cmd_eval(rc, out);
        }
        if (gradcheck->parsed()) {
            return cmd_gradcheck(gradcheck->count("--seed") ? seed : 20240901ULL, out);
        }
        ModelConfig cfg;
        if (!config_path.empty()) {
            RunConfig rc = run_config_from_json(detail::load_json_file(config_path, "run config"));
            cfg = rc.model;
        }
        return cmd_paramcount(cfg, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

inline int run_cli(int argc, const char* const argv[], std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args, out, err);
}

} // namespace deltafusion
