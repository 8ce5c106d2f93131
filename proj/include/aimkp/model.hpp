#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aimkp/masking.hpp"

namespace aimkp {

// Reserved decoder-vocabulary ids. Prompt tokens occupy
// [kPromptBase, kPromptBase + prompt_len).
inline constexpr int kEosId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kPromptBase = 2;

// Decoder-only causal transformer over [visual | text | prompt | target].
// Visual tokens carry 2D positional terms (row + column), text and decoder
// tokens 1D ones. RMSNorm, SiLU MLP, no biases, zero-initialized output
// projection so a fresh model emits uniform logits.
struct ModelConfig {
    int visual_vocab = 32;
    int text_vocab = 32;
    int output_vocab = 64;
    int grid_height = 6;
    int grid_width = 6;
    int embed_dim = 32;
    int num_layers = 2;
    int num_heads = 4;
    int max_text_len = 16;
    int max_target_len = 24;
    int prompt_len = 2;
    uint64_t seed = 1;
    int64_t param_budget = 4'000'000;

    int mlp_hidden() const { return 4 * embed_dim; }
    int head_dim() const { return embed_dim / num_heads; }
    bool operator==(const ModelConfig&) const = default;
};

struct ParamEntry {
    std::string name;
    int64_t offset = 0;
    int64_t rows = 0;
    int64_t cols = 0;
    int64_t size() const { return rows * cols; }
};

// Offsets of every block inside the flat parameter vector.
struct ParamLayout {
    std::vector<ParamEntry> entries;
    int64_t total = 0;

    // Cached indices for the hot path.
    int vis_emb = -1, vis_pos_row = -1, vis_pos_col = -1;
    int txt_emb = -1, txt_pos = -1;
    int out_emb = -1, dec_pos = -1;
    struct LayerIdx {
        int attn_norm = -1, wq = -1, wk = -1, wv = -1, wo = -1;
        int mlp_norm = -1, w1 = -1, w2 = -1;
    };
    std::vector<LayerIdx> layers;
    int final_norm = -1, out_proj = -1;

    const ParamEntry& entry(int idx) const { return entries[static_cast<size_t>(idx)]; }
};

ParamLayout build_layout(const ModelConfig& config);
int64_t param_count(const ModelConfig& config);

// Stable digest of the layout table; checkpoints refuse to load when it
// changes.
uint64_t layout_digest(const ParamLayout& layout);

struct ModelParams {
    ModelConfig config;
    ParamLayout layout;
    std::vector<double> values;

    std::span<double> block(int idx) {
        const auto& e = layout.entry(idx);
        return {values.data() + e.offset, static_cast<size_t>(e.size())};
    }
    std::span<const double> block(int idx) const {
        const auto& e = layout.entry(idx);
        return {values.data() + e.offset, static_cast<size_t>(e.size())};
    }
};

// Paired grid/text inputs with the ordered target keyphrase token sequence
// (separator-joined, terminated by kEosId). An ablated modality is simply
// empty (grid_h == grid_w == 0, or text empty).
struct Sample {
    std::string id;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<int> grid; // row-major visual token ids
    std::vector<int> text; // content-text token ids
    std::vector<int> target;

    bool has_visual() const { return grid_h > 0 && grid_w > 0; }
    SampleDims dims() const { return {grid_h, grid_w, static_cast<int>(text.size())}; }
};

struct GradientVector {
    std::vector<double> values;
    double l2_norm = 0.0;

    void finalize_norm();
};

// Throws when the parameter count exceeds config.param_budget or the config
// is malformed.
ModelParams init_model(const ModelConfig& config);

// Mean per-token negative log-likelihood of the target under teacher forcing.
// Positions dropped by the plan are excluded from attention entirely.
double forward_nll(const ModelParams& params, const Sample& sample, const MaskPlan& plan);

struct LossAndGrad {
    double loss = 0.0;
    GradientVector grad;
};

// Exact reverse-mode gradient of forward_nll. Aborts (throws) on non-finite
// values.
LossAndGrad loss_and_grad(const ModelParams& params, const Sample& sample, const MaskPlan& plan);
GradientVector backward(const ModelParams& params, const Sample& sample, const MaskPlan& plan);

// Adds scale * d(forward_nll)/d(params) into grad_accum (resizing if empty).
// Returns the loss.
double backward_accumulate(const ModelParams& params, const Sample& sample, const MaskPlan& plan,
                           double scale, std::vector<double>& grad_accum);

// Central-difference gradient, optionally restricted to a coordinate subset
// (empty = all coordinates; skipped coordinates are left at zero).
GradientVector finite_difference_gradient(const ModelParams& params, const Sample& sample,
                                          const MaskPlan& plan, double epsilon,
                                          const std::vector<int64_t>& coords = {});

double perplexity(const ModelParams& params, const Sample& sample, const MaskPlan& plan);

// Teacher-forced next-token logits for every scored target position
// (row-major [target_len x output_vocab]); used by tests to cross-check the
// incremental decoder.
std::vector<double> forward_logits(const ModelParams& params, const Sample& sample,
                                   const MaskPlan& plan);

} // namespace aimkp
