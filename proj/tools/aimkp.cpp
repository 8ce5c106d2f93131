// Command-line surface: data generation, training under each schedule,
// evaluation across input conditions, telemetry/correlation analysis, and a
// mask debug dump.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "aimkp/analysis.hpp"
#include "aimkp/data.hpp"
#include "aimkp/decode.hpp"
#include "aimkp/errors.hpp"
#include "aimkp/io.hpp"
#include "aimkp/masking.hpp"
#include "aimkp/metrics.hpp"
#include "aimkp/model.hpp"
#include "aimkp/objective.hpp"
#include "aimkp/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace aimkp;

namespace {

std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct GenFlags {
    GenSpec spec;
    std::string out_dir;
};

void add_gen_data(CLI::App& app, GenFlags& flags) {
    CLI::App* cmd = app.add_subcommand("gen-data", "generate a synthetic paired-modality dataset");
    cmd->add_option("--n", flags.spec.n_samples, "number of samples")->capture_default_str();
    cmd->add_option("--seed", flags.spec.seed, "generator seed")->capture_default_str();
    cmd->add_option("--out", flags.out_dir, "output directory")->required();
    cmd->add_option("--grid-height", flags.spec.grid_h)->capture_default_str();
    cmd->add_option("--grid-width", flags.spec.grid_w)->capture_default_str();
    cmd->add_option("--text-len", flags.spec.text_len)->capture_default_str();
    cmd->add_option("--visual-concepts", flags.spec.n_visual_concepts)->capture_default_str();
    cmd->add_option("--text-concepts", flags.spec.n_text_concepts)->capture_default_str();
    cmd->add_option("--joint-concepts", flags.spec.n_joint_concepts)->capture_default_str();
    cmd->add_option("--visual-distractors", flags.spec.n_visual_distractors)->capture_default_str();
    cmd->add_option("--text-distractors", flags.spec.n_text_distractors)->capture_default_str();
    cmd->add_option("--visual-cue-copies", flags.spec.visual_cue_copies)->capture_default_str();
    cmd->add_option("--text-cue-copies", flags.spec.text_cue_copies)->capture_default_str();
    cmd->add_option("--prompt-len", flags.spec.prompt_len)->capture_default_str();
    cmd->add_option("--train-frac", flags.spec.train_frac)->capture_default_str();
    cmd->add_option("--valid-frac", flags.spec.valid_frac)->capture_default_str();
    cmd->callback([&flags]() {
        Dataset ds = generate_synthetic(flags.spec);
        save_dataset(ds, flags.out_dir);
        int n_train = 0, n_valid = 0, n_test = 0;
        for (const auto& s : ds.samples) {
            if (s.split == Split::train) ++n_train;
            else if (s.split == Split::valid) ++n_valid;
            else ++n_test;
        }
        std::cout << "wrote " << ds.samples.size() << " samples (" << n_train << "/" << n_valid
                  << "/" << n_test << " train/valid/test) to " << flags.out_dir << "\n";
    });
}

struct TrainFlags {
    std::string data_dir;
    std::string out_dir;
    std::string schedule = "aimkp";
    std::string stride_mode = "per-sample";
    std::string val_metric = "composite";
    std::string convention = "last-in-stride";
    TrainConfig cfg;
    int embed_dim = 32;
    int num_layers = 2;
    int num_heads = 4;
};

TrainConfig resolve_train_config(const TrainFlags& f) {
    TrainConfig cfg = f.cfg;
    cfg.schedule = schedule_from_string(f.schedule);
    if (f.schedule.rfind("fixed:", 0) == 0) cfg.fixed_gamma = std::stoi(f.schedule.substr(6));
    else if (cfg.schedule == Schedule::fixed)
        throw CLI::ValidationError("--schedule", "use fixed:<gamma>");
    if (f.stride_mode == "global") cfg.global_stride = true;
    else if (f.stride_mode != "per-sample")
        throw CLI::ValidationError("--stride-mode", "must be per-sample or global");
    if (f.val_metric == "f1at1") cfg.val_metric = ValMetric::f1_at_1;
    else if (f.val_metric != "composite")
        throw CLI::ValidationError("--val-metric", "must be composite or f1at1");
    if (f.convention == "formula-anchor") cfg.convention = MaskConvention::formula_anchor;
    else if (f.convention == "last-in-stride") cfg.convention = MaskConvention::last_in_stride;
    else throw CLI::ValidationError("--convention", "must be last-in-stride or formula-anchor");
    return cfg;
}

void add_train(CLI::App& app, TrainFlags& f) {
    CLI::App* cmd = app.add_subcommand("train", "train a model under a masking schedule");
    cmd->add_option("--data", f.data_dir, "dataset directory")->required();
    cmd->add_option("--out", f.out_dir, "run output directory")->required();
    cmd->add_option("--schedule", f.schedule,
                    "aimkp | baseline | fixed:<gamma> | no-filter | mask-text-only | "
                    "mask-image-only")
        ->capture_default_str();
    cmd->add_option("--epochs", f.cfg.epochs)->capture_default_str();
    cmd->add_option("--warmup-epochs", f.cfg.warmup_epochs)->capture_default_str();
    cmd->add_option("--tau-v", f.cfg.tau_v)->capture_default_str();
    cmd->add_option("--tau-t", f.cfg.tau_t)->capture_default_str();
    cmd->add_option("--gamma-init", f.cfg.gamma_init)->capture_default_str();
    cmd->add_option("--lr", f.cfg.lr)->capture_default_str();
    cmd->add_option("--lr-warmup-ratio", f.cfg.lr_warmup_ratio)->capture_default_str();
    cmd->add_option("--accumulation", f.cfg.accumulation)->capture_default_str();
    cmd->add_option("--seed", f.cfg.seed)->capture_default_str();
    cmd->add_option("--aux-weight-v", f.cfg.aux_weight_v)->capture_default_str();
    cmd->add_option("--aux-weight-t", f.cfg.aux_weight_t)->capture_default_str();
    cmd->add_option("--stride-mode", f.stride_mode, "per-sample | global")->capture_default_str();
    cmd->add_option("--val-metric", f.val_metric, "composite | f1at1")->capture_default_str();
    cmd->add_option("--convention", f.convention, "last-in-stride | formula-anchor")
        ->capture_default_str();
    cmd->add_option("--embed-dim", f.embed_dim)->capture_default_str();
    cmd->add_option("--layers", f.num_layers)->capture_default_str();
    cmd->add_option("--heads", f.num_heads)->capture_default_str();
    cmd->callback([&f]() {
        TrainConfig cfg = resolve_train_config(f);
        Dataset ds = load_dataset(f.data_dir);
        TrainData td = make_train_data(ds);
        ModelConfig mc = model_config_for(ds);
        mc.embed_dim = f.embed_dim;
        mc.num_layers = f.num_layers;
        mc.num_heads = f.num_heads;

        fs::create_directories(f.out_dir);
        TrainResult result =
            run_training(td, mc, cfg, [](const std::string& m) { std::cout << m << "\n"; });

        fs::path out(f.out_dir);
        save_checkpoint(result.best_params, (out / "best.ckpt").string());
        save_checkpoint(result.final_params, (out / "final.ckpt").string());
        write_file_atomic((out / "telemetry.csv").string(), telemetry_to_csv(result.telemetry));
        write_file_atomic((out / "decisions.jsonl").string(), decisions_to_jsonl(result.decisions));

        nlohmann::json manifest;
        manifest["tool"] = "aimkp";
        manifest["command"] = "train";
        manifest["seed"] = cfg.seed;
        manifest["config"] = {
            {"schedule", to_string(cfg.schedule)},
            {"epochs", cfg.epochs},
            {"warmup_epochs", cfg.warmup_epochs},
            {"tau_v", result.tau_v_effective},
            {"tau_t", result.tau_t_effective},
            {"gamma_init", cfg.gamma_init},
            {"fixed_gamma", cfg.fixed_gamma},
            {"lr", cfg.lr},
            {"lr_warmup_ratio", cfg.lr_warmup_ratio},
            {"accumulation", cfg.accumulation},
            {"aux_weight_v", cfg.aux_weight_v},
            {"aux_weight_t", cfg.aux_weight_t},
            {"stride_mode", cfg.global_stride ? "global" : "per-sample"},
            {"val_metric", cfg.val_metric == ValMetric::composite_mean ? "composite" : "f1at1"},
            {"convention", to_string(cfg.convention)},
        };
        manifest["model"] = model_config_to_json(result.final_params.config);
        manifest["data"] = {{"path", f.data_dir},
                            {"n_train", td.train.size()},
                            {"n_valid", td.valid.size()}};
        nlohmann::json val = nlohmann::json::array();
        for (const auto& v : result.validation)
            val.push_back({{"epoch", v.epoch},
                           {"f1_at_1", v.f1_at_1},
                           {"f1_at_3", v.f1_at_3},
                           {"map_at_5", v.map_at_5},
                           {"composite", v.composite},
                           {"score", v.score}});
        manifest["validation"] = val;
        manifest["outputs"] = {
            {"best_checkpoint", "best.ckpt"},
            {"final_checkpoint", "final.ckpt"},
            {"telemetry", "telemetry.csv"},
            {"decisions", "decisions.jsonl"},
            {"best_epoch", result.best_epoch},
            {"best_score", result.best_score},
            {"param_digest_best", hex64(param_digest(result.best_params))},
            {"param_digest_final", hex64(param_digest(result.final_params))},
            {"diverged", result.diverged},
        };
        write_file_atomic((out / "manifest.json").string(), manifest.dump(2));

        if (result.diverged) throw NumericError("training diverged: " + result.divergence_note);
        std::cout << "best epoch " << result.best_epoch << " score "
                  << format_double(result.best_score) << "; artifacts in " << f.out_dir << "\n";
    });
}

struct EvalFlags {
    std::string ckpt;
    std::string data_dir;
    std::string split = "test";
    std::string condition = "multimodal";
    std::string strategy = "beam";
    int beam = 5;
    double temperature = 0.5;
    int repeats = 3;
    uint64_t seed = 0;
    std::string out_path;
    std::string dump_preds;
};

EvalCondition condition_from_string(const std::string& s) {
    if (s == "multimodal") return EvalCondition::multimodal;
    if (s == "text-only") return EvalCondition::text_only;
    if (s == "image-only") return EvalCondition::image_only;
    throw CLI::ValidationError("--condition", "unknown condition " + s);
}

EvalReport eval_once(const ModelParams& params, const Dataset& ds, Split split,
                     EvalCondition condition, const DecodeConfig& dc, std::string* dump) {
    std::vector<EvalPair> pairs;
    for (const DataSample* s : ds.split_view(split)) {
        Sample ctx = s->sample;
        if (condition == EvalCondition::text_only) ctx = ablate_modality(ctx, Modality::visual);
        if (condition == EvalCondition::image_only) ctx = ablate_modality(ctx, Modality::text);
        DecodeConfig per = dc;
        per.seed = derive_seed(dc.seed, "eval-sample", fnv1a64(s->sample.id));
        EvalPair pair;
        pair.preds = decode(params, ctx, per, ds.vocab);
        pair.gold = s->keyphrases;
        if (dump) {
            nlohmann::json j{
                {"id", s->sample.id}, {"preds", pair.preds}, {"gold", pair.gold}};
            *dump += j.dump();
            *dump += '\n';
        }
        pairs.push_back(std::move(pair));
    }
    return evaluate_corpus(pairs, condition);
}

std::string report_csv(const EvalReport& rep, const std::string& split,
                       const std::string& strategy, int repeats) {
    return "condition,split,strategy,repeats,f1_at_1,f1_at_3,map_at_5,n_samples\n" +
           std::string(to_string(rep.condition)) + "," + split + "," + strategy + "," +
           std::to_string(repeats) + "," + format_double(rep.f1_at_1) + "," +
           format_double(rep.f1_at_3) + "," + format_double(rep.map_at_5) + "," +
           std::to_string(rep.n_samples) + "\n";
}

void print_report(const EvalReport& rep, const std::string& split) {
    std::cout << "condition=" << to_string(rep.condition) << " split=" << split
              << " n=" << rep.n_samples << "\n"
              << "  F1@1  = " << format_double(rep.f1_at_1) << "\n"
              << "  F1@3  = " << format_double(rep.f1_at_3) << "\n"
              << "  MAP@5 = " << format_double(rep.map_at_5) << "\n";
}

void add_eval(CLI::App& app, EvalFlags& f) {
    CLI::App* cmd = app.add_subcommand("eval", "decode a checkpoint and score keyphrases");
    cmd->add_option("--ckpt", f.ckpt)->required();
    cmd->add_option("--data", f.data_dir)->required();
    cmd->add_option("--split", f.split, "train | valid | test")->capture_default_str();
    cmd->add_option("--condition", f.condition, "multimodal | text-only | image-only")
        ->capture_default_str();
    cmd->add_option("--strategy", f.strategy, "greedy | beam")->capture_default_str();
    cmd->add_option("--beam", f.beam)->capture_default_str();
    cmd->add_option("--temperature", f.temperature)->capture_default_str();
    cmd->add_option("--repeats", f.repeats)->capture_default_str();
    cmd->add_option("--seed", f.seed)->capture_default_str();
    cmd->add_option("--out", f.out_path, "report CSV path");
    cmd->add_option("--dump-preds", f.dump_preds,
                    "write decoded predictions as JSONL (first repeat only)");
    cmd->callback([&f]() {
        ModelParams params = load_checkpoint(f.ckpt);
        Dataset ds = load_dataset(f.data_dir);
        Split split = split_from_string(f.split);
        EvalCondition condition = condition_from_string(f.condition);
        if (f.repeats < 1) throw CLI::ValidationError("--repeats", "must be >= 1");

        DecodeConfig dc;
        dc.strategy = decode_strategy_from_string(f.strategy);
        dc.beam_size = f.beam;
        dc.temperature = f.temperature;
        dc.max_len = params.config.max_target_len;

        EvalReport mean;
        mean.condition = condition;
        std::string dump;
        for (int r = 0; r < f.repeats; ++r) {
            dc.seed = f.seed + static_cast<uint64_t>(r);
            EvalReport rep =
                eval_once(params, ds, split, condition, dc,
                          (r == 0 && !f.dump_preds.empty()) ? &dump : nullptr);
            mean.f1_at_1 += rep.f1_at_1;
            mean.f1_at_3 += rep.f1_at_3;
            mean.map_at_5 += rep.map_at_5;
            mean.n_samples = rep.n_samples;
        }
        mean.f1_at_1 /= f.repeats;
        mean.f1_at_3 /= f.repeats;
        mean.map_at_5 /= f.repeats;

        if (!f.out_path.empty())
            write_file_atomic(f.out_path, report_csv(mean, f.split, f.strategy, f.repeats));
        if (!f.dump_preds.empty()) write_file_atomic(f.dump_preds, dump);
        print_report(mean, f.split);
    });
}

struct ScoreFlags {
    std::string pairs_path;
    std::string condition = "multimodal";
    std::string out_path;
};

void add_score(CLI::App& app, ScoreFlags& f) {
    CLI::App* cmd = app.add_subcommand(
        "score", "score a prediction/gold JSONL file ({\"id\",\"preds\",\"gold\"} per line)");
    cmd->add_option("--pairs", f.pairs_path, "JSONL file of prediction/gold pairs")->required();
    cmd->add_option("--condition", f.condition, "label for the report row")->capture_default_str();
    cmd->add_option("--out", f.out_path, "report CSV path");
    cmd->callback([&f]() {
        EvalCondition condition = condition_from_string(f.condition);
        std::istringstream in(read_file(f.pairs_path));
        std::vector<EvalPair> pairs;
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            try {
                auto j = nlohmann::json::parse(line);
                EvalPair p;
                p.preds = j.at("preds").get<std::vector<std::string>>();
                p.gold = j.at("gold").get<std::vector<std::string>>();
                pairs.push_back(std::move(p));
            } catch (const nlohmann::json::exception& e) {
                throw DataError(f.pairs_path + " line " + std::to_string(line_no) + ": " +
                                e.what());
            }
        }
        EvalReport rep = evaluate_corpus(pairs, condition);
        if (!f.out_path.empty())
            write_file_atomic(f.out_path, report_csv(rep, "-", "-", 1));
        print_report(rep, "-");
    });
}

struct AnalyzeFlags {
    std::string what;
    std::string ckpt;
    std::string data_dir;
    std::string split = "valid";
    std::string decisions_path;
    std::string out_path;
    std::vector<int> gammas = {2, 4};
    int max_variants = 400;
};

void add_analyze(CLI::App& app, AnalyzeFlags& f) {
    CLI::App* cmd = app.add_subcommand("analyze", "training analyses");
    cmd->add_option("--what", f.what, "fig3-correlation | appendixC-curves")->required();
    cmd->add_option("--ckpt", f.ckpt);
    cmd->add_option("--data", f.data_dir);
    cmd->add_option("--split", f.split)->capture_default_str();
    cmd->add_option("--decisions", f.decisions_path);
    cmd->add_option("--gammas", f.gammas, "strides to probe")->capture_default_str();
    cmd->add_option("--max-variants", f.max_variants)->capture_default_str();
    cmd->add_option("--out", f.out_path, "output CSV path")->required();
    cmd->callback([&f]() {
        if (f.what == "fig3-correlation") {
            if (f.ckpt.empty() || f.data_dir.empty())
                throw CLI::ValidationError("--what", "fig3-correlation needs --ckpt and --data");
            ModelParams params = load_checkpoint(f.ckpt);
            Dataset ds = load_dataset(f.data_dir);
            std::vector<Sample> samples;
            for (const DataSample* s : ds.split_view(split_from_string(f.split)))
                samples.push_back(s->sample);
            auto points = collect_variant_points(params, samples, f.gammas, f.max_variants);
            write_file_atomic(f.out_path, variant_points_to_csv(points));
            std::vector<double> cos, ratio;
            for (const auto& p : points) {
                cos.push_back(p.cos_sim);
                ratio.push_back(p.ppl_ratio);
            }
            auto rho = spearman_rho(cos, ratio);
            if (rho.has_value())
                std::cout << "spearman_rho " << format_double(*rho) << " n " << points.size()
                          << "\n";
            else
                std::cout << "spearman_rho degenerate n " << points.size() << "\n";
        } else if (f.what == "appendixC-curves") {
            if (f.decisions_path.empty())
                throw CLI::ValidationError("--what", "appendixC-curves needs --decisions");
            auto decisions = decisions_from_jsonl(read_file(f.decisions_path));
            write_file_atomic(f.out_path, telemetry_to_csv(aggregate_telemetry(decisions)));
            std::cout << "re-derived telemetry for " << decisions.size() << " decisions\n";
        } else {
            throw CLI::ValidationError("--what", "unknown analysis " + f.what);
        }
    });
}

struct MaskDumpFlags {
    int height = 0;
    int width = 0;
    int length = 0;
    int gamma = 2;
    std::string convention = "last-in-stride";
};

void add_mask_dump(CLI::App& app, MaskDumpFlags& f) {
    CLI::App* cmd = app.add_subcommand("mask-dump", "print a stride mask as a bit grid");
    cmd->add_option("--height", f.height);
    cmd->add_option("--width", f.width);
    cmd->add_option("--len", f.length, "1D mask length");
    cmd->add_option("--gamma", f.gamma)->capture_default_str();
    cmd->add_option("--convention", f.convention, "last-in-stride | formula-anchor")
        ->capture_default_str();
    cmd->callback([&f]() {
        MaskConvention conv = f.convention == "formula-anchor" ? MaskConvention::formula_anchor
                                                               : MaskConvention::last_in_stride;
        KeepMask mask;
        if (f.length > 0) mask = build_stride_mask_1d(f.length, f.gamma, conv);
        else mask = build_stride_mask_2d(f.height, f.width, f.gamma, conv);
        std::cout << render_mask(mask);
        std::cout << "retention " << format_double(retention_ratio(mask)) << "\n";
    });
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"aimkp: progressive modality masking with gradient-based filtering"};
    app.require_subcommand(1);
    app.set_config("--config", "",
                   "flat key=value config file (keys like train.epochs=4); flags override");

    GenFlags gen_flags;
    TrainFlags train_flags;
    EvalFlags eval_flags;
    ScoreFlags score_flags;
    AnalyzeFlags analyze_flags;
    MaskDumpFlags mask_flags;
    add_gen_data(app, gen_flags);
    add_train(app, train_flags);
    add_eval(app, eval_flags);
    add_score(app, score_flags);
    add_analyze(app, analyze_flags);
    add_mask_dump(app, mask_flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
