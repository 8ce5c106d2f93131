#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aimkp/masking.hpp"
#include "aimkp/model.hpp"

namespace aimkp {

// --- gradient filtering -----------------------------------------------------

// dot(a,b) / (|a||b|), clamped to [-1,1]. Either norm below 1e-12 yields 0
// (degenerate gradients carry no signal and are rejected under positive
// thresholds); callers that care can log via the optional flag.
double cosine_similarity(const GradientVector& a, const GradientVector& b,
                         bool* degenerate = nullptr);

// 1 iff s >= tau (boundary inclusive). tau = -1 accepts everything.
int filter_switch(double s, double tau);

struct FilterDecision {
    double s_visual = 0.0;
    double s_text = 0.0;
    int lambda_visual = 0;
    int lambda_text = 0;
    double tau_visual = 0.0;
    double tau_text = 0.0;
};

// g + lambda_v * g_v + lambda_t * g_t with unit weights; a zero switch skips
// the addition entirely so a fully rejected step bit-matches plain training.
GradientVector total_gradient(const GradientVector& g, const GradientVector& g_v_masked,
                              const GradientVector& g_t_masked, const FilterDecision& decision,
                              double weight_v = 1.0, double weight_t = 1.0);

// --- stride curriculum -------------------------------------------------------

int largest_pow2_le(int v);

struct StrideEntry {
    int gamma_visual = 2;
    int gamma_text = 2;
    int cap_visual = 2;
    int cap_text = 2;

    bool visual_maskable() const { return cap_visual >= 2; }
    bool text_maskable() const { return cap_text >= 2; }
};

// Per-sample, per-modality stride state. Strides stay powers of two in
// [2, cap]; caps are the largest power of two that fits the sample's axes.
struct StrideState {
    std::map<std::string, StrideEntry> entries;
    int epoch_index = 0;
};

void register_sample(StrideState& state, const std::string& id, const SampleDims& dims,
                     int gamma_init);
const StrideEntry& stride_entry(const StrideState& state, const std::string& id);

// Accepted -> double (capped); rejected -> halve (floor 2). Unknown ids throw.
void update_stride(StrideState& state, const std::string& id, Modality modality, int lambda);

// --- telemetry ----------------------------------------------------------------

struct DecisionRecord {
    std::string sample_id;
    int epoch = 0;
    std::optional<double> s_v; // absent when the variant was skipped/frozen
    std::optional<double> s_t;
    int lambda_v = 0;
    int lambda_t = 0;
    int gamma_v = 0;
    int gamma_t = 0;
    double loss = 0.0;
    std::optional<double> loss_v_masked;
    std::optional<double> loss_t_masked;
};

struct TelemetryRecord {
    int epoch = 0;
    Modality modality = Modality::visual;
    double mean_cos_sim = 0.0;
    double std_cos_sim = 0.0;
    double pct_above_threshold = 0.0;
    double mean_stride = 0.0;
    int accepted_count = 0;
    int rejected_count = 0;
};

// One record per (epoch, modality) over the decisions that actually computed
// a variant. Both the trainer and the log re-derivation use this path, so the
// two tables agree byte for byte.
std::vector<TelemetryRecord> aggregate_telemetry(const std::vector<DecisionRecord>& decisions);

std::string telemetry_to_csv(const std::vector<TelemetryRecord>& records);
std::string decisions_to_jsonl(const std::vector<DecisionRecord>& decisions);
std::vector<DecisionRecord> decisions_from_jsonl(const std::string& content);

// --- optimizer -----------------------------------------------------------------

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

void adam_update(ModelParams& params, const std::vector<double>& grad, AdamState& state,
                 double lr);

// Linear warmup into cosine decay over the run's optimizer steps.
double lr_at_step(double base_lr, int64_t step, int64_t total_steps, double warmup_ratio);

// --- training loop ---------------------------------------------------------------

enum class Schedule { baseline, aimkp, fixed, no_filter, mask_text_only, mask_image_only };

Schedule schedule_from_string(const std::string& s);
const char* to_string(Schedule s);

enum class ValMetric { composite_mean, f1_at_1 };

struct TrainConfig {
    Schedule schedule = Schedule::aimkp;
    int epochs = 4;
    int warmup_epochs = 1;
    double tau_v = 0.4;
    double tau_t = 0.1;
    int gamma_init = 2;
    int fixed_gamma = 2;
    double lr = 3e-3;
    double lr_warmup_ratio = 0.03;
    int accumulation = 1;
    uint64_t seed = 1;
    double aux_weight_v = 1.0;
    double aux_weight_t = 1.0;
    bool global_stride = false; // fallback: one stride per modality, doubled each epoch
    ValMetric val_metric = ValMetric::composite_mean;
    MaskConvention convention = MaskConvention::last_in_stride;
};

struct StepConfig {
    bool mask_visual = true;
    bool mask_text = true;
    double tau_v = 0.4;
    double tau_t = 0.1;
    double aux_weight_v = 1.0;
    double aux_weight_t = 1.0;
    MaskConvention convention = MaskConvention::last_in_stride;
};

struct StepResult {
    DecisionRecord record;
    FilterDecision decision;
    GradientVector total; // combined gradient, not yet applied
    bool degenerate_visual = false; // a cosine hit the zero-norm guard
    bool degenerate_text = false;
};

// One filtered step: original gradient, masked variants at the entry's
// strides, cosine scores, switches, combined gradient. Stride state is not
// mutated here; the caller applies update_stride from the recorded switches.
StepResult train_step(const ModelParams& params, const Sample& sample, const StrideEntry& entry,
                      const StepConfig& cfg, int epoch);

struct TrainSample {
    Sample sample;
    std::vector<std::string> gold; // keyphrases for validation scoring
};

struct TrainData {
    std::vector<TrainSample> train;
    std::vector<TrainSample> valid;
    std::vector<std::string> vocab; // output token id -> word
};

struct EpochValidation {
    int epoch = 0;
    double f1_at_1 = 0.0;
    double f1_at_3 = 0.0;
    double map_at_5 = 0.0;
    double composite = 0.0;
    double score = 0.0; // per val_metric
};

struct TrainResult {
    ModelParams final_params;
    ModelParams best_params;
    int best_epoch = -1;
    double best_score = -1.0;
    std::vector<DecisionRecord> decisions;
    std::vector<TelemetryRecord> telemetry;
    std::vector<EpochValidation> validation;
    double tau_v_effective = 0.0;
    double tau_t_effective = 0.0;
    bool diverged = false;
    std::string divergence_note;
};

// Warm-up epochs train on unmasked data; masked epochs run train_step per
// sample with per-sample decisions, summing combined gradients over the
// accumulation window. Deterministic given the seed.
TrainResult run_training(const TrainData& data, const ModelConfig& model_config,
                         const TrainConfig& cfg,
                         const std::function<void(const std::string&)>& log = nullptr);

} // namespace aimkp
