#include "aimkp/model.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

#include "aimkp/errors.hpp"
#include "aimkp/rng.hpp"

namespace aimkp {

namespace {
constexpr double kRmsEps = 1e-8;
constexpr double kInitStd = 0.08;

double silu(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return x * s;
}

double silu_grad(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}
} // namespace

void GradientVector::finalize_norm() {
    double sum = 0.0;
    for (double v : values) sum += v * v;
    l2_norm = std::sqrt(sum);
}

ParamLayout build_layout(const ModelConfig& c) {
    ParamLayout layout;
    auto add = [&layout](const std::string& name, int64_t rows, int64_t cols) {
        ParamEntry e;
        e.name = name;
        e.offset = layout.total;
        e.rows = rows;
        e.cols = cols;
        layout.total += e.size();
        layout.entries.push_back(std::move(e));
        return static_cast<int>(layout.entries.size()) - 1;
    };
    const int d = c.embed_dim;
    layout.vis_emb = add("vis_emb", c.visual_vocab, d);
    layout.vis_pos_row = add("vis_pos_row", c.grid_height, d);
    layout.vis_pos_col = add("vis_pos_col", c.grid_width, d);
    layout.txt_emb = add("txt_emb", c.text_vocab, d);
    layout.txt_pos = add("txt_pos", c.max_text_len, d);
    layout.out_emb = add("out_emb", c.output_vocab, d);
    layout.dec_pos = add("dec_pos", c.prompt_len + c.max_target_len, d);
    layout.layers.resize(static_cast<size_t>(c.num_layers));
    for (int l = 0; l < c.num_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        auto& idx = layout.layers[static_cast<size_t>(l)];
        idx.attn_norm = add(p + "attn_norm", 1, d);
        idx.wq = add(p + "wq", d, d);
        idx.wk = add(p + "wk", d, d);
        idx.wv = add(p + "wv", d, d);
        idx.wo = add(p + "wo", d, d);
        idx.mlp_norm = add(p + "mlp_norm", 1, d);
        idx.w1 = add(p + "w1", d, c.mlp_hidden());
        idx.w2 = add(p + "w2", c.mlp_hidden(), d);
    }
    layout.final_norm = add("final_norm", 1, d);
    layout.out_proj = add("out_proj", d, c.output_vocab);
    return layout;
}

int64_t param_count(const ModelConfig& config) {
    return build_layout(config).total;
}

uint64_t layout_digest(const ParamLayout& layout) {
    std::string repr;
    for (const auto& e : layout.entries) {
        repr += e.name;
        repr += ':';
        repr += std::to_string(e.rows);
        repr += 'x';
        repr += std::to_string(e.cols);
        repr += '@';
        repr += std::to_string(e.offset);
        repr += ';';
    }
    return fnv1a64(repr);
}

namespace {

void validate_config(const ModelConfig& c) {
    if (c.embed_dim < 1 || c.num_layers < 1 || c.num_heads < 1 || c.visual_vocab < 1 ||
        c.text_vocab < 1 || c.grid_height < 1 || c.grid_width < 1 || c.max_text_len < 1 ||
        c.max_target_len < 1 || c.prompt_len < 1) {
        throw std::invalid_argument("model config: all counts must be >= 1");
    }
    if (c.embed_dim % c.num_heads != 0)
        throw std::invalid_argument("model config: embed_dim must be divisible by num_heads");
    if (c.output_vocab < kPromptBase + c.prompt_len + 1)
        throw std::invalid_argument("model config: output_vocab too small for eos/sep/prompt ids");
}

} // namespace

ModelParams init_model(const ModelConfig& config) {
    validate_config(config);
    ModelParams params;
    params.config = config;
    params.layout = build_layout(config);
    if (params.layout.total > config.param_budget) {
        throw std::invalid_argument("model config exceeds parameter budget: " +
                                    std::to_string(params.layout.total) + " > " +
                                    std::to_string(config.param_budget));
    }
    params.values.assign(static_cast<size_t>(params.layout.total), 0.0);
    std::mt19937_64 rng(derive_seed(config.seed, "model-init"));
    std::normal_distribution<double> dist(0.0, kInitStd);
    for (size_t i = 0; i < params.layout.entries.size(); ++i) {
        const auto& e = params.layout.entries[i];
        auto span = params.block(static_cast<int>(i));
        if (e.name == "out_proj") {
            continue; // zero-init keeps initial logits uniform
        }
        if (e.name.find("norm") != std::string::npos) {
            for (auto& v : span) v = 1.0;
            continue;
        }
        for (auto& v : span) v = dist(rng);
    }
    return params;
}

namespace {

enum class PosKind : uint8_t { visual, text, prompt, target_in };

// One visible position of the compacted sequence. Masked positions are
// excluded from attention entirely, which realizes attention-mask zeroing:
// nothing downstream can see them.
struct SeqPos {
    PosKind kind;
    int index;    // original index within its region
    int token;    // token id within its region's vocabulary
    int aux = 0;  // row for visual; decoder position for prompt/target
    int aux2 = 0; // column for visual
};

struct SeqInfo {
    std::vector<SeqPos> pos;
    std::vector<int> scored; // compacted positions whose logits are scored
    int target_len = 0;
};

void validate_sample(const ModelConfig& c, const Sample& s, const MaskPlan& plan) {
    if (s.has_visual()) {
        if (s.grid_h != c.grid_height || s.grid_w != c.grid_width)
            throw std::invalid_argument("sample grid dims do not match model config");
        if (s.grid.size() != static_cast<size_t>(s.grid_h) * static_cast<size_t>(s.grid_w))
            throw std::invalid_argument("sample grid size mismatch");
        for (int t : s.grid)
            if (t < 0 || t >= c.visual_vocab) throw std::invalid_argument("visual token out of range");
    }
    if (static_cast<int>(s.text.size()) > c.max_text_len)
        throw std::invalid_argument("text longer than max_text_len");
    for (int t : s.text)
        if (t < 0 || t >= c.text_vocab) throw std::invalid_argument("text token out of range");
    if (s.target.empty()) throw std::invalid_argument("sample target is empty");
    if (static_cast<int>(s.target.size()) > c.max_target_len)
        throw std::invalid_argument("target longer than max_target_len");
    for (int t : s.target)
        if (t < 0 || t >= c.output_vocab) throw std::invalid_argument("target token out of range");
    int vh = s.has_visual() ? s.grid_h : 0;
    int vw = s.has_visual() ? s.grid_w : 0;
    if (plan.visual_mask.height != (vh == 0 ? 0 : vh) || plan.visual_mask.width != vw) {
        if (!(vh == 0 && plan.visual_mask.total() == 0))
            throw std::invalid_argument("plan visual mask dims do not match sample");
    }
    if (plan.text_mask.width != static_cast<int>(s.text.size()))
        throw std::invalid_argument("plan text mask length does not match sample");
}

SeqInfo build_sequence(const ModelConfig& c, const Sample& s, const MaskPlan& plan) {
    SeqInfo info;
    info.target_len = static_cast<int>(s.target.size());
    info.pos.reserve(s.grid.size() + s.text.size() + static_cast<size_t>(c.prompt_len) +
                     s.target.size());
    if (s.has_visual()) {
        for (int r = 0; r < s.grid_h; ++r) {
            for (int col = 0; col < s.grid_w; ++col) {
                if (!plan.visual_mask.at(r, col)) continue;
                int k = r * s.grid_w + col;
                info.pos.push_back({PosKind::visual, k, s.grid[static_cast<size_t>(k)], r, col});
            }
        }
    }
    for (int t = 0; t < static_cast<int>(s.text.size()); ++t) {
        if (!plan.text_mask.at(t)) continue;
        info.pos.push_back({PosKind::text, t, s.text[static_cast<size_t>(t)], 0, 0});
    }
    for (int p = 0; p < c.prompt_len; ++p) {
        info.pos.push_back({PosKind::prompt, p, kPromptBase + p, p, 0});
    }
    // Teacher forcing: last prompt token predicts y_1, the position fed y_i
    // predicts y_{i+1}; y_n itself is never an input.
    info.scored.push_back(static_cast<int>(info.pos.size()) - 1);
    for (int i = 1; i < info.target_len; ++i) {
        info.pos.push_back({PosKind::target_in, i - 1, s.target[static_cast<size_t>(i - 1)],
                            c.prompt_len - 1 + i, 0});
        info.scored.push_back(static_cast<int>(info.pos.size()) - 1);
    }
    return info;
}

struct LayerCache {
    std::vector<double> h_in;   // [S,d] residual entering the block
    std::vector<double> a_in;   // normed attention input
    std::vector<double> rms_a;  // [S] 1/rms
    std::vector<double> q, k, v; // [S,d]
    std::vector<double> probs;  // [heads, S, S] attention probabilities
    std::vector<double> att;    // [S,d] concatenated head outputs
    std::vector<double> h_mid;  // residual after attention
    std::vector<double> m_in;   // normed MLP input
    std::vector<double> rms_m;  // [S]
    std::vector<double> h1;     // [S,hidden] pre-activation
    std::vector<double> a1;     // [S,hidden]
};

struct ForwardCache {
    SeqInfo seq;
    std::vector<double> x0;     // [S,d] embeddings
    std::vector<LayerCache> layers;
    std::vector<double> h_out;  // [S,d] residual after last layer
    std::vector<double> f;      // [n,d] final-normed scored positions
    std::vector<double> rms_f;  // [n]
    std::vector<double> logits; // [n,V]
    std::vector<double> probs;  // [n,V]
    double loss = 0.0;
};

void rmsnorm_forward(const double* x, const double* gain, double* out, double* rms_inv, int n,
                     int d) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<int64_t>(i) * d;
        double sum = 0.0;
        for (int j = 0; j < d; ++j) sum += xi[j] * xi[j];
        double inv = 1.0 / std::sqrt(sum / d + kRmsEps);
        rms_inv[i] = inv;
        double* oi = out + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) oi[j] = gain[j] * xi[j] * inv;
    }
}

// d(out)/d(x) and d(out)/d(gain) for y_i = g_i * x_i * r, r = (mean(x^2)+eps)^-1/2.
void rmsnorm_backward(const double* x, const double* gain, const double* rms_inv,
                      const double* dout, double* dx_add, double* dgain, int n, int d) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<int64_t>(i) * d;
        const double* doi = dout + static_cast<int64_t>(i) * d;
        double* dxi = dx_add + static_cast<int64_t>(i) * d;
        double r = rms_inv[i];
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += doi[j] * gain[j] * xi[j];
        double coeff = r * r * r * dot / d;
        for (int j = 0; j < d; ++j) {
            dgain[j] += doi[j] * xi[j] * r;
            dxi[j] += doi[j] * gain[j] * r - coeff * xi[j];
        }
    }
}

// out[i,:] += x[i,:] * W for W of shape [din, dout].
void matmul(const double* x, const double* w, double* out, int n, int din, int dout) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<int64_t>(i) * din;
        double* oi = out + static_cast<int64_t>(i) * dout;
        for (int a = 0; a < din; ++a) {
            double xa = xi[a];
            if (xa == 0.0) continue;
            const double* wrow = w + static_cast<int64_t>(a) * dout;
            for (int b = 0; b < dout; ++b) oi[b] += xa * wrow[b];
        }
    }
}

// dW += x^T dout; dx += dout W^T.
void matmul_backward(const double* x, const double* w, const double* dout, double* dx,
                     double* dw, int n, int din, int dout_dim) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<int64_t>(i) * din;
        const double* doi = dout + static_cast<int64_t>(i) * dout_dim;
        double* dxi = dx + static_cast<int64_t>(i) * din;
        for (int a = 0; a < din; ++a) {
            const double* wrow = w + static_cast<int64_t>(a) * dout_dim;
            double* dwrow = dw + static_cast<int64_t>(a) * dout_dim;
            double acc = 0.0;
            double xa = xi[a];
            for (int b = 0; b < dout_dim; ++b) {
                acc += doi[b] * wrow[b];
                dwrow[b] += xa * doi[b];
            }
            dxi[a] += acc;
        }
    }
}

ForwardCache run_forward(const ModelParams& params, const Sample& sample, const MaskPlan& plan) {
    const ModelConfig& c = params.config;
    validate_sample(c, sample, plan);

    ForwardCache cache;
    cache.seq = build_sequence(c, sample, plan);
    const int S = static_cast<int>(cache.seq.pos.size());
    const int d = c.embed_dim;
    const int H = c.num_heads;
    const int hd = c.head_dim();
    const int hidden = c.mlp_hidden();
    const int n = cache.seq.target_len;
    const int V = c.output_vocab;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto vis_emb = params.block(params.layout.vis_emb);
    auto vis_row = params.block(params.layout.vis_pos_row);
    auto vis_col = params.block(params.layout.vis_pos_col);
    auto txt_emb = params.block(params.layout.txt_emb);
    auto txt_pos = params.block(params.layout.txt_pos);
    auto out_emb = params.block(params.layout.out_emb);
    auto dec_pos = params.block(params.layout.dec_pos);

    cache.x0.assign(static_cast<size_t>(S) * d, 0.0);
    for (int i = 0; i < S; ++i) {
        const SeqPos& p = cache.seq.pos[static_cast<size_t>(i)];
        double* xi = cache.x0.data() + static_cast<int64_t>(i) * d;
        switch (p.kind) {
            case PosKind::visual:
                for (int j = 0; j < d; ++j)
                    xi[j] = vis_emb[static_cast<size_t>(p.token) * d + j] +
                            vis_row[static_cast<size_t>(p.aux) * d + j] +
                            vis_col[static_cast<size_t>(p.aux2) * d + j];
                break;
            case PosKind::text:
                for (int j = 0; j < d; ++j)
                    xi[j] = txt_emb[static_cast<size_t>(p.token) * d + j] +
                            txt_pos[static_cast<size_t>(p.index) * d + j];
                break;
            case PosKind::prompt:
            case PosKind::target_in:
                for (int j = 0; j < d; ++j)
                    xi[j] = out_emb[static_cast<size_t>(p.token) * d + j] +
                            dec_pos[static_cast<size_t>(p.aux) * d + j];
                break;
        }
    }

    cache.layers.resize(static_cast<size_t>(c.num_layers));
    std::vector<double> h = cache.x0;
    for (int l = 0; l < c.num_layers; ++l) {
        LayerCache& lc = cache.layers[static_cast<size_t>(l)];
        const auto& idx = params.layout.layers[static_cast<size_t>(l)];
        lc.h_in = h;
        lc.a_in.assign(static_cast<size_t>(S) * d, 0.0);
        lc.rms_a.assign(static_cast<size_t>(S), 0.0);
        rmsnorm_forward(lc.h_in.data(), params.block(idx.attn_norm).data(), lc.a_in.data(),
                        lc.rms_a.data(), S, d);
        lc.q.assign(static_cast<size_t>(S) * d, 0.0);
        lc.k.assign(static_cast<size_t>(S) * d, 0.0);
        lc.v.assign(static_cast<size_t>(S) * d, 0.0);
        matmul(lc.a_in.data(), params.block(idx.wq).data(), lc.q.data(), S, d, d);
        matmul(lc.a_in.data(), params.block(idx.wk).data(), lc.k.data(), S, d, d);
        matmul(lc.a_in.data(), params.block(idx.wv).data(), lc.v.data(), S, d, d);

        lc.probs.assign(static_cast<size_t>(H) * S * S, 0.0);
        lc.att.assign(static_cast<size_t>(S) * d, 0.0);
        std::vector<double> scores(static_cast<size_t>(S));
        for (int h_i = 0; h_i < H; ++h_i) {
            const int off = h_i * hd;
            double* probs_h = lc.probs.data() + static_cast<int64_t>(h_i) * S * S;
            for (int i = 0; i < S; ++i) {
                const double* qi = lc.q.data() + static_cast<int64_t>(i) * d + off;
                double maxs = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = lc.k.data() + static_cast<int64_t>(j) * d + off;
                    double s2 = 0.0;
                    for (int a = 0; a < hd; ++a) s2 += qi[a] * kj[a];
                    s2 *= scale;
                    scores[static_cast<size_t>(j)] = s2;
                    if (s2 > maxs) maxs = s2;
                }
                double sum = 0.0;
                double* pi = probs_h + static_cast<int64_t>(i) * S;
                for (int j = 0; j <= i; ++j) {
                    double e = std::exp(scores[static_cast<size_t>(j)] - maxs);
                    pi[j] = e;
                    sum += e;
                }
                double inv = 1.0 / sum;
                double* oi = lc.att.data() + static_cast<int64_t>(i) * d + off;
                for (int j = 0; j <= i; ++j) {
                    pi[j] *= inv;
                    const double* vj = lc.v.data() + static_cast<int64_t>(j) * d + off;
                    double pij = pi[j];
                    for (int a = 0; a < hd; ++a) oi[a] += pij * vj[a];
                }
            }
        }

        lc.h_mid = lc.h_in;
        matmul(lc.att.data(), params.block(idx.wo).data(), lc.h_mid.data(), S, d, d);

        lc.m_in.assign(static_cast<size_t>(S) * d, 0.0);
        lc.rms_m.assign(static_cast<size_t>(S), 0.0);
        rmsnorm_forward(lc.h_mid.data(), params.block(idx.mlp_norm).data(), lc.m_in.data(),
                        lc.rms_m.data(), S, d);
        lc.h1.assign(static_cast<size_t>(S) * hidden, 0.0);
        matmul(lc.m_in.data(), params.block(idx.w1).data(), lc.h1.data(), S, d, hidden);
        lc.a1.assign(static_cast<size_t>(S) * hidden, 0.0);
        for (size_t i = 0; i < lc.h1.size(); ++i) lc.a1[i] = silu(lc.h1[i]);
        h = lc.h_mid;
        matmul(lc.a1.data(), params.block(idx.w2).data(), h.data(), S, hidden, d);
    }
    cache.h_out = std::move(h);

    // Final norm + output projection only at scored positions.
    cache.f.assign(static_cast<size_t>(n) * d, 0.0);
    cache.rms_f.assign(static_cast<size_t>(n), 0.0);
    std::vector<double> scored_h(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
        std::memcpy(scored_h.data() + static_cast<int64_t>(i) * d,
                    cache.h_out.data() + static_cast<int64_t>(cache.seq.scored[static_cast<size_t>(i)]) * d,
                    sizeof(double) * static_cast<size_t>(d));
    }
    rmsnorm_forward(scored_h.data(), params.block(params.layout.final_norm).data(), cache.f.data(),
                    cache.rms_f.data(), n, d);
    cache.logits.assign(static_cast<size_t>(n) * V, 0.0);
    matmul(cache.f.data(), params.block(params.layout.out_proj).data(), cache.logits.data(), n, d,
           V);

    cache.probs.assign(static_cast<size_t>(n) * V, 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* li = cache.logits.data() + static_cast<int64_t>(i) * V;
        double* pi = cache.probs.data() + static_cast<int64_t>(i) * V;
        double maxl = li[0];
        for (int j = 1; j < V; ++j) maxl = std::max(maxl, li[j]);
        double sum = 0.0;
        for (int j = 0; j < V; ++j) {
            double e = std::exp(li[j] - maxl);
            pi[j] = e;
            sum += e;
        }
        double inv = 1.0 / sum;
        for (int j = 0; j < V; ++j) pi[j] *= inv;
        int y = sample.target[static_cast<size_t>(i)];
        total += std::log(sum) + maxl - li[y];
    }
    cache.loss = total / n;
    if (!std::isfinite(cache.loss))
        throw NumericError("forward_nll produced a non-finite loss for sample " + sample.id);
    return cache;
}

void run_backward(const ModelParams& params, const Sample& sample, const ForwardCache& cache,
                  double scale_factor, std::vector<double>& grad) {
    const ModelConfig& c = params.config;
    const int S = static_cast<int>(cache.seq.pos.size());
    const int d = c.embed_dim;
    const int H = c.num_heads;
    const int hd = c.head_dim();
    const int hidden = c.mlp_hidden();
    const int n = cache.seq.target_len;
    const int V = c.output_vocab;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (grad.empty()) grad.assign(static_cast<size_t>(params.layout.total), 0.0);
    if (grad.size() != static_cast<size_t>(params.layout.total))
        throw std::invalid_argument("gradient accumulator has wrong length");
    auto gblock = [&grad, &params](int idx) {
        const auto& e = params.layout.entry(idx);
        return grad.data() + e.offset;
    };

    // Cross-entropy + output projection.
    std::vector<double> dlogits(static_cast<size_t>(n) * V);
    const double inv_n = scale_factor / n;
    for (int i = 0; i < n; ++i) {
        const double* pi = cache.probs.data() + static_cast<int64_t>(i) * V;
        double* dli = dlogits.data() + static_cast<int64_t>(i) * V;
        for (int j = 0; j < V; ++j) dli[j] = pi[j] * inv_n;
        dli[sample.target[static_cast<size_t>(i)]] -= inv_n;
    }
    std::vector<double> df(static_cast<size_t>(n) * d, 0.0);
    matmul_backward(cache.f.data(), params.block(params.layout.out_proj).data(), dlogits.data(),
                    df.data(), gblock(params.layout.out_proj), n, d, V);

    // Final norm back to the scored residual positions.
    std::vector<double> scored_h(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
        std::memcpy(scored_h.data() + static_cast<int64_t>(i) * d,
                    cache.h_out.data() + static_cast<int64_t>(cache.seq.scored[static_cast<size_t>(i)]) * d,
                    sizeof(double) * static_cast<size_t>(d));
    }
    std::vector<double> dscored(static_cast<size_t>(n) * d, 0.0);
    rmsnorm_backward(scored_h.data(), params.block(params.layout.final_norm).data(),
                     cache.rms_f.data(), df.data(), dscored.data(), gblock(params.layout.final_norm),
                     n, d);
    std::vector<double> dh(static_cast<size_t>(S) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        double* dst = dh.data() + static_cast<int64_t>(cache.seq.scored[static_cast<size_t>(i)]) * d;
        const double* src = dscored.data() + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
    }

    std::vector<double> da1(static_cast<size_t>(S) * hidden);
    std::vector<double> dh1(static_cast<size_t>(S) * hidden);
    std::vector<double> dm_in(static_cast<size_t>(S) * d);
    std::vector<double> datt(static_cast<size_t>(S) * d);
    std::vector<double> dq(static_cast<size_t>(S) * d);
    std::vector<double> dk(static_cast<size_t>(S) * d);
    std::vector<double> dv(static_cast<size_t>(S) * d);
    std::vector<double> da_in(static_cast<size_t>(S) * d);
    std::vector<double> dp(static_cast<size_t>(S));

    for (int l = c.num_layers - 1; l >= 0; --l) {
        const LayerCache& lc = cache.layers[static_cast<size_t>(l)];
        const auto& idx = params.layout.layers[static_cast<size_t>(l)];

        // MLP branch: dh covers both the residual skip and the branch input.
        std::fill(da1.begin(), da1.end(), 0.0);
        matmul_backward(lc.a1.data(), params.block(idx.w2).data(), dh.data(), da1.data(),
                        gblock(idx.w2), S, hidden, d);
        for (size_t i = 0; i < dh1.size(); ++i) dh1[i] = da1[i] * silu_grad(lc.h1[i]);
        std::fill(dm_in.begin(), dm_in.end(), 0.0);
        matmul_backward(lc.m_in.data(), params.block(idx.w1).data(), dh1.data(), dm_in.data(),
                        gblock(idx.w1), S, d, hidden);
        rmsnorm_backward(lc.h_mid.data(), params.block(idx.mlp_norm).data(), lc.rms_m.data(),
                         dm_in.data(), dh.data(), gblock(idx.mlp_norm), S, d);

        // Attention branch.
        std::fill(datt.begin(), datt.end(), 0.0);
        matmul_backward(lc.att.data(), params.block(idx.wo).data(), dh.data(), datt.data(),
                        gblock(idx.wo), S, d, d);
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int h_i = 0; h_i < H; ++h_i) {
            const int off = h_i * hd;
            const double* probs_h = lc.probs.data() + static_cast<int64_t>(h_i) * S * S;
            for (int i = 0; i < S; ++i) {
                const double* doi = datt.data() + static_cast<int64_t>(i) * d + off;
                const double* pi = probs_h + static_cast<int64_t>(i) * S;
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double* vj = lc.v.data() + static_cast<int64_t>(j) * d + off;
                    double dpij = 0.0;
                    for (int a = 0; a < hd; ++a) dpij += doi[a] * vj[a];
                    dp[static_cast<size_t>(j)] = dpij;
                    dot += pi[j] * dpij;
                    double* dvj = dv.data() + static_cast<int64_t>(j) * d + off;
                    double pij = pi[j];
                    for (int a = 0; a < hd; ++a) dvj[a] += pij * doi[a];
                }
                const double* qi = lc.q.data() + static_cast<int64_t>(i) * d + off;
                double* dqi = dq.data() + static_cast<int64_t>(i) * d + off;
                for (int j = 0; j <= i; ++j) {
                    double ds = pi[j] * (dp[static_cast<size_t>(j)] - dot) * att_scale;
                    if (ds == 0.0) continue;
                    const double* kj = lc.k.data() + static_cast<int64_t>(j) * d + off;
                    double* dkj = dk.data() + static_cast<int64_t>(j) * d + off;
                    for (int a = 0; a < hd; ++a) {
                        dqi[a] += ds * kj[a];
                        dkj[a] += ds * qi[a];
                    }
                }
            }
        }
        std::fill(da_in.begin(), da_in.end(), 0.0);
        matmul_backward(lc.a_in.data(), params.block(idx.wq).data(), dq.data(), da_in.data(),
                        gblock(idx.wq), S, d, d);
        matmul_backward(lc.a_in.data(), params.block(idx.wk).data(), dk.data(), da_in.data(),
                        gblock(idx.wk), S, d, d);
        matmul_backward(lc.a_in.data(), params.block(idx.wv).data(), dv.data(), da_in.data(),
                        gblock(idx.wv), S, d, d);
        rmsnorm_backward(lc.h_in.data(), params.block(idx.attn_norm).data(), lc.rms_a.data(),
                         da_in.data(), dh.data(), gblock(idx.attn_norm), S, d);
    }

    // Scatter embedding gradients.
    double* g_vis = gblock(params.layout.vis_emb);
    double* g_row = gblock(params.layout.vis_pos_row);
    double* g_col = gblock(params.layout.vis_pos_col);
    double* g_txt = gblock(params.layout.txt_emb);
    double* g_tpos = gblock(params.layout.txt_pos);
    double* g_out = gblock(params.layout.out_emb);
    double* g_dpos = gblock(params.layout.dec_pos);
    for (int i = 0; i < S; ++i) {
        const SeqPos& p = cache.seq.pos[static_cast<size_t>(i)];
        const double* di = dh.data() + static_cast<int64_t>(i) * d;
        switch (p.kind) {
            case PosKind::visual:
                for (int j = 0; j < d; ++j) {
                    g_vis[static_cast<size_t>(p.token) * d + j] += di[j];
                    g_row[static_cast<size_t>(p.aux) * d + j] += di[j];
                    g_col[static_cast<size_t>(p.aux2) * d + j] += di[j];
                }
                break;
            case PosKind::text:
                for (int j = 0; j < d; ++j) {
                    g_txt[static_cast<size_t>(p.token) * d + j] += di[j];
                    g_tpos[static_cast<size_t>(p.index) * d + j] += di[j];
                }
                break;
            case PosKind::prompt:
            case PosKind::target_in:
                for (int j = 0; j < d; ++j) {
                    g_out[static_cast<size_t>(p.token) * d + j] += di[j];
                    g_dpos[static_cast<size_t>(p.aux) * d + j] += di[j];
                }
                break;
        }
    }
}

} // namespace

double forward_nll(const ModelParams& params, const Sample& sample, const MaskPlan& plan) {
    return run_forward(params, sample, plan).loss;
}

std::vector<double> forward_logits(const ModelParams& params, const Sample& sample,
                                   const MaskPlan& plan) {
    return run_forward(params, sample, plan).logits;
}

double backward_accumulate(const ModelParams& params, const Sample& sample, const MaskPlan& plan,
                           double scale, std::vector<double>& grad_accum) {
    ForwardCache cache = run_forward(params, sample, plan);
    run_backward(params, sample, cache, scale, grad_accum);
    return cache.loss;
}

LossAndGrad loss_and_grad(const ModelParams& params, const Sample& sample, const MaskPlan& plan) {
    LossAndGrad out;
    out.loss = backward_accumulate(params, sample, plan, 1.0, out.grad.values);
    for (double v : out.grad.values) {
        if (!std::isfinite(v))
            throw NumericError("backward produced a non-finite gradient for sample " + sample.id);
    }
    out.grad.finalize_norm();
    return out;
}

GradientVector backward(const ModelParams& params, const Sample& sample, const MaskPlan& plan) {
    return loss_and_grad(params, sample, plan).grad;
}

GradientVector finite_difference_gradient(const ModelParams& params, const Sample& sample,
                                          const MaskPlan& plan, double epsilon,
                                          const std::vector<int64_t>& coords) {
    if (epsilon < 1e-6 || epsilon > 1e-2)
        throw std::invalid_argument("finite difference epsilon must be in [1e-6, 1e-2]");
    GradientVector g;
    g.values.assign(static_cast<size_t>(params.layout.total), 0.0);
    ModelParams work = params;
    auto probe = [&work, &sample, &plan](int64_t i, double eps) {
        double saved = work.values[static_cast<size_t>(i)];
        work.values[static_cast<size_t>(i)] = saved + eps;
        double up = forward_nll(work, sample, plan);
        work.values[static_cast<size_t>(i)] = saved - eps;
        double down = forward_nll(work, sample, plan);
        work.values[static_cast<size_t>(i)] = saved;
        return (up - down) / (2.0 * eps);
    };
    if (coords.empty()) {
        for (int64_t i = 0; i < params.layout.total; ++i)
            g.values[static_cast<size_t>(i)] = probe(i, epsilon);
    } else {
        for (int64_t i : coords) {
            if (i < 0 || i >= params.layout.total)
                throw std::invalid_argument("finite difference coordinate out of range");
            g.values[static_cast<size_t>(i)] = probe(i, epsilon);
        }
    }
    g.finalize_norm();
    return g;
}

double perplexity(const ModelParams& params, const Sample& sample, const MaskPlan& plan) {
    return std::exp(forward_nll(params, sample, plan));
}

} // namespace aimkp
