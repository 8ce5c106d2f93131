#include "aimkp/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "aimkp/decode.hpp"
#include "aimkp/errors.hpp"
#include "aimkp/io.hpp"
#include "aimkp/metrics.hpp"
#include "aimkp/rng.hpp"
#include "json.hpp"

namespace aimkp {

double cosine_similarity(const GradientVector& a, const GradientVector& b, bool* degenerate) {
    if (a.values.size() != b.values.size())
        throw std::invalid_argument("cosine_similarity: length mismatch");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na2 += a.values[i] * a.values[i];
        nb2 += b.values[i] * b.values[i];
    }
    if (degenerate) *degenerate = false;
    if (std::sqrt(na2) < 1e-12 || std::sqrt(nb2) < 1e-12) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    // sqrt(na2*nb2) keeps self-similarity at exactly 1.
    double s = dot / std::sqrt(na2 * nb2);
    return std::clamp(s, -1.0, 1.0);
}

int filter_switch(double s, double tau) {
    return s >= tau ? 1 : 0;
}

GradientVector total_gradient(const GradientVector& g, const GradientVector& g_v_masked,
                              const GradientVector& g_t_masked, const FilterDecision& decision,
                              double weight_v, double weight_t) {
    GradientVector out;
    out.values = g.values;
    if (decision.lambda_visual) {
        if (g_v_masked.values.size() != out.values.size())
            throw std::invalid_argument("total_gradient: visual gradient length mismatch");
        for (size_t i = 0; i < out.values.size(); ++i)
            out.values[i] += weight_v * g_v_masked.values[i];
    }
    if (decision.lambda_text) {
        if (g_t_masked.values.size() != out.values.size())
            throw std::invalid_argument("total_gradient: text gradient length mismatch");
        for (size_t i = 0; i < out.values.size(); ++i)
            out.values[i] += weight_t * g_t_masked.values[i];
    }
    out.finalize_norm();
    return out;
}

int largest_pow2_le(int v) {
    if (v < 1) return 0;
    int p = 1;
    while (p * 2 <= v) p *= 2;
    return p;
}

void register_sample(StrideState& state, const std::string& id, const SampleDims& dims,
                     int gamma_init) {
    StrideEntry e;
    e.cap_visual = largest_pow2_le(std::min(dims.grid_h, dims.grid_w));
    e.cap_text = largest_pow2_le(dims.text_len);
    e.gamma_visual = e.visual_maskable() ? std::clamp(gamma_init, 2, e.cap_visual) : 0;
    e.gamma_text = e.text_maskable() ? std::clamp(gamma_init, 2, e.cap_text) : 0;
    state.entries[id] = e;
}

const StrideEntry& stride_entry(const StrideState& state, const std::string& id) {
    auto it = state.entries.find(id);
    if (it == state.entries.end()) throw std::invalid_argument("unknown sample id: " + id);
    return it->second;
}

void update_stride(StrideState& state, const std::string& id, Modality modality, int lambda) {
    auto it = state.entries.find(id);
    if (it == state.entries.end()) throw std::invalid_argument("unknown sample id: " + id);
    StrideEntry& e = it->second;
    if (modality == Modality::visual) {
        if (!e.visual_maskable()) return; // frozen
        e.gamma_visual = lambda ? std::min(e.gamma_visual * 2, e.cap_visual)
                                : std::max(e.gamma_visual / 2, 2);
    } else if (modality == Modality::text) {
        if (!e.text_maskable()) return;
        e.gamma_text = lambda ? std::min(e.gamma_text * 2, e.cap_text)
                              : std::max(e.gamma_text / 2, 2);
    }
}

std::vector<TelemetryRecord> aggregate_telemetry(const std::vector<DecisionRecord>& decisions) {
    struct Acc {
        std::vector<double> s;
        std::vector<int> gamma;
        int accepted = 0;
    };
    std::map<int, Acc> vis, txt;
    for (const auto& d : decisions) {
        if (d.s_v.has_value()) {
            Acc& a = vis[d.epoch];
            a.s.push_back(*d.s_v);
            a.gamma.push_back(d.gamma_v);
            a.accepted += d.lambda_v;
        }
        if (d.s_t.has_value()) {
            Acc& a = txt[d.epoch];
            a.s.push_back(*d.s_t);
            a.gamma.push_back(d.gamma_t);
            a.accepted += d.lambda_t;
        }
    }
    auto emit = [](int epoch, Modality m, const Acc& a, std::vector<TelemetryRecord>& out) {
        TelemetryRecord r;
        r.epoch = epoch;
        r.modality = m;
        double n = static_cast<double>(a.s.size());
        double mean = std::accumulate(a.s.begin(), a.s.end(), 0.0) / n;
        double var = 0.0;
        for (double v : a.s) var += (v - mean) * (v - mean);
        r.mean_cos_sim = mean;
        r.std_cos_sim = std::sqrt(var / n);
        r.pct_above_threshold = 100.0 * static_cast<double>(a.accepted) / n;
        r.mean_stride = std::accumulate(a.gamma.begin(), a.gamma.end(), 0.0) / n;
        r.accepted_count = a.accepted;
        r.rejected_count = static_cast<int>(a.s.size()) - a.accepted;
        out.push_back(r);
    };
    std::vector<TelemetryRecord> out;
    std::vector<int> epochs;
    for (const auto& [e, _] : vis) epochs.push_back(e);
    for (const auto& [e, _] : txt)
        if (!vis.count(e)) epochs.push_back(e);
    std::sort(epochs.begin(), epochs.end());
    for (int e : epochs) {
        if (auto it = vis.find(e); it != vis.end()) emit(e, Modality::visual, it->second, out);
        if (auto it = txt.find(e); it != txt.end()) emit(e, Modality::text, it->second, out);
    }
    return out;
}

std::string telemetry_to_csv(const std::vector<TelemetryRecord>& records) {
    std::string out =
        "epoch,modality,mean_cos_sim,std_cos_sim,pct_above_threshold,mean_stride,"
        "accepted_count,rejected_count\n";
    for (const auto& r : records) {
        out += std::to_string(r.epoch);
        out += ',';
        out += to_string(r.modality);
        out += ',';
        out += format_double(r.mean_cos_sim);
        out += ',';
        out += format_double(r.std_cos_sim);
        out += ',';
        out += format_double(r.pct_above_threshold);
        out += ',';
        out += format_double(r.mean_stride);
        out += ',';
        out += std::to_string(r.accepted_count);
        out += ',';
        out += std::to_string(r.rejected_count);
        out += '\n';
    }
    return out;
}

namespace {

nlohmann::json opt_to_json(const std::optional<double>& v) {
    if (v.has_value()) return *v;
    return nullptr;
}

std::optional<double> opt_from_json(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

} // namespace

std::string decisions_to_jsonl(const std::vector<DecisionRecord>& decisions) {
    std::string out;
    for (const auto& d : decisions) {
        nlohmann::json j{
            {"sample_id", d.sample_id},
            {"epoch", d.epoch},
            {"s_v", opt_to_json(d.s_v)},
            {"s_t", opt_to_json(d.s_t)},
            {"lambda_v", d.lambda_v},
            {"lambda_t", d.lambda_t},
            {"gamma_v", d.gamma_v},
            {"gamma_t", d.gamma_t},
            {"loss", d.loss},
            {"loss_v_masked", opt_to_json(d.loss_v_masked)},
            {"loss_t_masked", opt_to_json(d.loss_t_masked)},
        };
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<DecisionRecord> decisions_from_jsonl(const std::string& content) {
    std::vector<DecisionRecord> out;
    std::istringstream in(content);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            DecisionRecord d;
            d.sample_id = j.at("sample_id").get<std::string>();
            d.epoch = j.at("epoch").get<int>();
            d.s_v = opt_from_json(j.at("s_v"));
            d.s_t = opt_from_json(j.at("s_t"));
            d.lambda_v = j.at("lambda_v").get<int>();
            d.lambda_t = j.at("lambda_t").get<int>();
            d.gamma_v = j.at("gamma_v").get<int>();
            d.gamma_t = j.at("gamma_t").get<int>();
            d.loss = j.at("loss").get<double>();
            d.loss_v_masked = opt_from_json(j.at("loss_v_masked"));
            d.loss_t_masked = opt_from_json(j.at("loss_t_masked"));
            out.push_back(std::move(d));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("decision log line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void adam_update(ModelParams& params, const std::vector<double>& grad, AdamState& state,
                 double lr) {
    if (grad.size() != params.values.size())
        throw std::invalid_argument("adam_update: gradient length mismatch");
    if (state.m.empty()) {
        state.m.assign(grad.size(), 0.0);
        state.v.assign(grad.size(), 0.0);
    }
    ++state.t;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < grad.size(); ++i) {
        double g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        params.values[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

double lr_at_step(double base_lr, int64_t step, int64_t total_steps, double warmup_ratio) {
    if (total_steps <= 0) return base_lr;
    int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(warmup_ratio * total_steps));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total_steps <= warmup) return base_lr;
    double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

Schedule schedule_from_string(const std::string& s) {
    if (s == "baseline") return Schedule::baseline;
    if (s == "aimkp") return Schedule::aimkp;
    if (s == "no-filter" || s == "no_filter") return Schedule::no_filter;
    if (s == "mask-text-only" || s == "mask_text_only") return Schedule::mask_text_only;
    if (s == "mask-image-only" || s == "mask_image_only") return Schedule::mask_image_only;
    if (s.rfind("fixed", 0) == 0) return Schedule::fixed;
    throw std::invalid_argument("unknown schedule: " + s);
}

const char* to_string(Schedule s) {
    switch (s) {
        case Schedule::baseline: return "baseline";
        case Schedule::aimkp: return "aimkp";
        case Schedule::fixed: return "fixed";
        case Schedule::no_filter: return "no-filter";
        case Schedule::mask_text_only: return "mask-text-only";
        case Schedule::mask_image_only: return "mask-image-only";
    }
    return "?";
}

StepResult train_step(const ModelParams& params, const Sample& sample, const StrideEntry& entry,
                      const StepConfig& cfg, int epoch) {
    StepResult result;
    DecisionRecord& rec = result.record;
    rec.sample_id = sample.id;
    rec.epoch = epoch;
    rec.gamma_v = entry.gamma_visual;
    rec.gamma_t = entry.gamma_text;

    LossAndGrad original = loss_and_grad(params, sample, unmasked_plan(sample.dims()));
    rec.loss = original.loss;

    FilterDecision& dec = result.decision;
    dec.tau_visual = cfg.tau_v;
    dec.tau_text = cfg.tau_t;

    GradientVector g_v, g_t;
    bool do_visual = cfg.mask_visual && entry.visual_maskable() && sample.has_visual();
    bool do_text = cfg.mask_text && entry.text_maskable() && !sample.text.empty();
    if (do_visual) {
        MaskPlan plan = compose_mask_plan(sample.dims(), {entry.gamma_visual, entry.gamma_text},
                                          Modality::visual, cfg.convention);
        LossAndGrad masked = loss_and_grad(params, sample, plan);
        rec.loss_v_masked = masked.loss;
        dec.s_visual = cosine_similarity(original.grad, masked.grad, &result.degenerate_visual);
        dec.lambda_visual = filter_switch(dec.s_visual, cfg.tau_v);
        rec.s_v = dec.s_visual;
        rec.lambda_v = dec.lambda_visual;
        g_v = std::move(masked.grad);
    }
    if (do_text) {
        MaskPlan plan = compose_mask_plan(sample.dims(), {entry.gamma_visual, entry.gamma_text},
                                          Modality::text, cfg.convention);
        LossAndGrad masked = loss_and_grad(params, sample, plan);
        rec.loss_t_masked = masked.loss;
        dec.s_text = cosine_similarity(original.grad, masked.grad, &result.degenerate_text);
        dec.lambda_text = filter_switch(dec.s_text, cfg.tau_t);
        rec.s_t = dec.s_text;
        rec.lambda_t = dec.lambda_text;
        g_t = std::move(masked.grad);
    }
    result.total = total_gradient(original.grad, g_v, g_t, dec, cfg.aux_weight_v, cfg.aux_weight_t);
    return result;
}

namespace {

EpochValidation validate_epoch(const ModelParams& params, const TrainData& data, int epoch,
                               ValMetric metric) {
    std::vector<EvalPair> pairs;
    pairs.reserve(data.valid.size());
    DecodeConfig dc;
    dc.strategy = DecodeConfig::Strategy::greedy;
    dc.max_len = params.config.max_target_len;
    for (const auto& vs : data.valid) {
        EvalPair p;
        p.preds = decode(params, vs.sample, dc, data.vocab);
        p.gold = vs.gold;
        pairs.push_back(std::move(p));
    }
    EvalReport report = evaluate_corpus(pairs, EvalCondition::multimodal);
    EpochValidation v;
    v.epoch = epoch;
    v.f1_at_1 = report.f1_at_1;
    v.f1_at_3 = report.f1_at_3;
    v.map_at_5 = report.map_at_5;
    v.composite = (report.f1_at_1 + report.f1_at_3 + report.map_at_5) / 3.0;
    v.score = metric == ValMetric::composite_mean ? v.composite : v.f1_at_1;
    return v;
}

} // namespace

TrainResult run_training(const TrainData& data, const ModelConfig& model_config,
                         const TrainConfig& cfg,
                         const std::function<void(const std::string&)>& log) {
    if (data.train.empty()) throw DataError("run_training: empty training split");
    if (data.valid.empty()) throw DataError("run_training: empty validation split");

    auto say = [&log](const std::string& m) {
        if (log) log(m);
    };

    ModelConfig mc = model_config;
    mc.seed = derive_seed(cfg.seed, "model-seed");
    TrainResult result;
    result.tau_v_effective = cfg.schedule == Schedule::no_filter ? -1.0 : cfg.tau_v;
    result.tau_t_effective = cfg.schedule == Schedule::no_filter ? -1.0 : cfg.tau_t;

    ModelParams params = init_model(mc);
    result.best_params = params;

    StrideState strides;
    int init_gamma = cfg.schedule == Schedule::fixed ? cfg.fixed_gamma : cfg.gamma_init;
    for (const auto& ts : data.train)
        register_sample(strides, ts.sample.id, ts.sample.dims(), init_gamma);

    // Global fallback mode: one stride per modality, doubled each masked
    // epoch, capped by the tightest sample.
    int global_gamma_v = init_gamma, global_gamma_t = init_gamma;
    int global_cap_v = 1 << 30, global_cap_t = 1 << 30;
    for (const auto& [id, e] : strides.entries) {
        global_cap_v = std::min(global_cap_v, e.cap_visual);
        global_cap_t = std::min(global_cap_t, e.cap_text);
    }

    StepConfig step_cfg;
    step_cfg.mask_visual = cfg.schedule != Schedule::mask_text_only;
    step_cfg.mask_text = cfg.schedule != Schedule::mask_image_only;
    step_cfg.tau_v = result.tau_v_effective;
    step_cfg.tau_t = result.tau_t_effective;
    step_cfg.aux_weight_v = cfg.aux_weight_v;
    step_cfg.aux_weight_t = cfg.aux_weight_t;
    step_cfg.convention = cfg.convention;

    const int n_train = static_cast<int>(data.train.size());
    const int64_t steps_per_epoch =
        (n_train + cfg.accumulation - 1) / static_cast<int64_t>(cfg.accumulation);
    const int64_t total_steps = steps_per_epoch * cfg.epochs;

    AdamState adam;
    std::vector<double> grad_window;
    std::vector<int> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        strides.epoch_index = epoch;
        ModelParams epoch_start = params;
        bool masked_epoch = epoch >= cfg.warmup_epochs && cfg.schedule != Schedule::baseline;
        auto rng = make_rng(cfg.seed, "epoch-order", static_cast<uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);

        grad_window.assign(static_cast<size_t>(params.layout.total), 0.0);
        int in_window = 0;
        auto flush = [&]() {
            if (in_window == 0) return;
            double lr = lr_at_step(cfg.lr, adam.t, total_steps, cfg.lr_warmup_ratio);
            adam_update(params, grad_window, adam, lr);
            grad_window.assign(grad_window.size(), 0.0);
            in_window = 0;
        };

        try {
            for (int oi = 0; oi < n_train; ++oi) {
                const TrainSample& ts = data.train[static_cast<size_t>(order[static_cast<size_t>(oi)])];
                if (!masked_epoch) {
                    std::vector<double> g;
                    backward_accumulate(params, ts.sample, unmasked_plan(ts.sample.dims()), 1.0, g);
                    for (size_t i = 0; i < g.size(); ++i) grad_window[i] += g[i];
                } else {
                    StrideEntry entry = stride_entry(strides, ts.sample.id);
                    if (cfg.global_stride) {
                        entry.gamma_visual = std::min(global_gamma_v, entry.cap_visual);
                        entry.gamma_text = std::min(global_gamma_t, entry.cap_text);
                    }
                    StepResult step = train_step(params, ts.sample, entry, step_cfg, epoch);
                    if (step.degenerate_visual || step.degenerate_text)
                        say("warning: degenerate gradient (zero norm) for sample " +
                            ts.sample.id + " at epoch " + std::to_string(epoch));
                    if (cfg.global_stride) {
                        step.record.gamma_v = entry.gamma_visual;
                        step.record.gamma_t = entry.gamma_text;
                    }
                    for (size_t i = 0; i < step.total.values.size(); ++i)
                        grad_window[i] += step.total.values[i];
                    if (!cfg.global_stride && cfg.schedule != Schedule::fixed) {
                        if (step.record.s_v.has_value())
                            update_stride(strides, ts.sample.id, Modality::visual,
                                          step.record.lambda_v);
                        if (step.record.s_t.has_value())
                            update_stride(strides, ts.sample.id, Modality::text,
                                          step.record.lambda_t);
                    }
                    result.decisions.push_back(std::move(step.record));
                }
                ++in_window;
                if (in_window == cfg.accumulation) flush();
            }
            flush();
        } catch (const NumericError& e) {
            result.diverged = true;
            result.divergence_note =
                "epoch " + std::to_string(epoch) + ": " + e.what() + "; restored last good params";
            params = epoch_start;
            say(result.divergence_note);
            break;
        }

        if (masked_epoch && cfg.global_stride && cfg.schedule != Schedule::fixed) {
            global_gamma_v = std::min(global_gamma_v * 2, std::max(global_cap_v, 2));
            global_gamma_t = std::min(global_gamma_t * 2, std::max(global_cap_t, 2));
        }

        EpochValidation val = validate_epoch(params, data, epoch, cfg.val_metric);
        result.validation.push_back(val);
        if (val.score > result.best_score) {
            result.best_score = val.score;
            result.best_epoch = epoch;
            result.best_params = params;
        }
        say("epoch " + std::to_string(epoch) + (masked_epoch ? " [masked]" : " [plain]") +
            " val_score=" + format_double(val.score));
    }

    result.telemetry = aggregate_telemetry(result.decisions);
    result.final_params = std::move(params);
    if (result.best_epoch < 0) result.best_params = result.final_params;
    return result;
}

} // namespace aimkp
