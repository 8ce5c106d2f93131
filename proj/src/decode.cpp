#include "aimkp/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "aimkp/rng.hpp"

namespace aimkp {

namespace {
constexpr double kRmsEps = 1e-8;

// Single-row mirror of the batch kernels; loop order matches so a replayed
// sequence reproduces the training-time forward bit for bit.
void row_matmul(const double* x, const double* w, double* out, int din, int dout) {
    for (int b = 0; b < dout; ++b) out[b] = 0.0;
    for (int a = 0; a < din; ++a) {
        double xa = x[a];
        if (xa == 0.0) continue;
        const double* wrow = w + static_cast<int64_t>(a) * dout;
        for (int b = 0; b < dout; ++b) out[b] += xa * wrow[b];
    }
}

void row_rmsnorm(const double* x, const double* gain, double* out, int d) {
    double sum = 0.0;
    for (int j = 0; j < d; ++j) sum += x[j] * x[j];
    double inv = 1.0 / std::sqrt(sum / d + kRmsEps);
    for (int j = 0; j < d; ++j) out[j] = gain[j] * x[j] * inv;
}

double silu(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return x * s;
}

// Incremental decoder state: per-layer key/value caches over the positions
// appended so far.
struct Session {
    const ModelParams* params = nullptr;
    int steps = 0;
    std::vector<std::vector<double>> k_cache; // per layer, [steps*d]
    std::vector<std::vector<double>> v_cache;
    std::vector<double> last_h; // residual output of the last position

    explicit Session(const ModelParams& p) : params(&p) {
        k_cache.resize(static_cast<size_t>(p.config.num_layers));
        v_cache.resize(static_cast<size_t>(p.config.num_layers));
    }

    void append(const std::vector<double>& x0) {
        const ModelConfig& c = params->config;
        const int d = c.embed_dim;
        const int H = c.num_heads;
        const int hd = c.head_dim();
        const int hidden = c.mlp_hidden();
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

        std::vector<double> h = x0;
        std::vector<double> a(static_cast<size_t>(d));
        std::vector<double> q(static_cast<size_t>(d)), k(static_cast<size_t>(d)),
            v(static_cast<size_t>(d));
        std::vector<double> att(static_cast<size_t>(d), 0.0);
        std::vector<double> h1(static_cast<size_t>(hidden)), a1(static_cast<size_t>(hidden));
        std::vector<double> mlp_out(static_cast<size_t>(d));
        std::vector<double> probs(static_cast<size_t>(steps) + 1);

        for (int l = 0; l < c.num_layers; ++l) {
            const auto& idx = params->layout.layers[static_cast<size_t>(l)];
            row_rmsnorm(h.data(), params->block(idx.attn_norm).data(), a.data(), d);
            row_matmul(a.data(), params->block(idx.wq).data(), q.data(), d, d);
            row_matmul(a.data(), params->block(idx.wk).data(), k.data(), d, d);
            row_matmul(a.data(), params->block(idx.wv).data(), v.data(), d, d);
            auto& kc = k_cache[static_cast<size_t>(l)];
            auto& vc = v_cache[static_cast<size_t>(l)];
            kc.insert(kc.end(), k.begin(), k.end());
            vc.insert(vc.end(), v.begin(), v.end());

            const int S = steps + 1;
            std::fill(att.begin(), att.end(), 0.0);
            for (int h_i = 0; h_i < H; ++h_i) {
                const int off = h_i * hd;
                const double* qi = q.data() + off;
                double maxs = -1e300;
                for (int j = 0; j < S; ++j) {
                    const double* kj = kc.data() + static_cast<int64_t>(j) * d + off;
                    double s2 = 0.0;
                    for (int x = 0; x < hd; ++x) s2 += qi[x] * kj[x];
                    s2 *= scale;
                    probs[static_cast<size_t>(j)] = s2;
                    if (s2 > maxs) maxs = s2;
                }
                double sum = 0.0;
                for (int j = 0; j < S; ++j) {
                    double e = std::exp(probs[static_cast<size_t>(j)] - maxs);
                    probs[static_cast<size_t>(j)] = e;
                    sum += e;
                }
                double inv = 1.0 / sum;
                double* oi = att.data() + off;
                for (int j = 0; j < S; ++j) {
                    double pij = probs[static_cast<size_t>(j)] * inv;
                    const double* vj = vc.data() + static_cast<int64_t>(j) * d + off;
                    for (int x = 0; x < hd; ++x) oi[x] += pij * vj[x];
                }
            }
            std::vector<double> att_out(static_cast<size_t>(d));
            row_matmul(att.data(), params->block(idx.wo).data(), att_out.data(), d, d);
            for (int j = 0; j < d; ++j) h[static_cast<size_t>(j)] += att_out[static_cast<size_t>(j)];

            row_rmsnorm(h.data(), params->block(idx.mlp_norm).data(), a.data(), d);
            row_matmul(a.data(), params->block(idx.w1).data(), h1.data(), d, hidden);
            for (int j = 0; j < hidden; ++j) a1[static_cast<size_t>(j)] = silu(h1[static_cast<size_t>(j)]);
            row_matmul(a1.data(), params->block(idx.w2).data(), mlp_out.data(), hidden, d);
            for (int j = 0; j < d; ++j) h[static_cast<size_t>(j)] += mlp_out[static_cast<size_t>(j)];
        }
        last_h = std::move(h);
        ++steps;
    }

    std::vector<double> logits() const {
        const ModelConfig& c = params->config;
        std::vector<double> f(static_cast<size_t>(c.embed_dim));
        row_rmsnorm(last_h.data(), params->block(params->layout.final_norm).data(), f.data(),
                    c.embed_dim);
        std::vector<double> out(static_cast<size_t>(c.output_vocab));
        row_matmul(f.data(), params->block(params->layout.out_proj).data(), out.data(),
                   c.embed_dim, c.output_vocab);
        return out;
    }
};

std::vector<double> embed_visual(const ModelParams& p, int token, int r, int col) {
    const int d = p.config.embed_dim;
    auto emb = p.block(p.layout.vis_emb);
    auto row = p.block(p.layout.vis_pos_row);
    auto colp = p.block(p.layout.vis_pos_col);
    std::vector<double> x(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        x[static_cast<size_t>(j)] = emb[static_cast<size_t>(token) * d + j] +
                                    row[static_cast<size_t>(r) * d + j] +
                                    colp[static_cast<size_t>(col) * d + j];
    return x;
}

std::vector<double> embed_text(const ModelParams& p, int token, int t) {
    const int d = p.config.embed_dim;
    auto emb = p.block(p.layout.txt_emb);
    auto pos = p.block(p.layout.txt_pos);
    std::vector<double> x(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        x[static_cast<size_t>(j)] = emb[static_cast<size_t>(token) * d + j] +
                                    pos[static_cast<size_t>(t) * d + j];
    return x;
}

std::vector<double> embed_decoder(const ModelParams& p, int token, int dec_index) {
    const int d = p.config.embed_dim;
    auto emb = p.block(p.layout.out_emb);
    auto pos = p.block(p.layout.dec_pos);
    std::vector<double> x(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j)
        x[static_cast<size_t>(j)] = emb[static_cast<size_t>(token) * d + j] +
                                    pos[static_cast<size_t>(dec_index) * d + j];
    return x;
}

Session prefill(const ModelParams& params, const Sample& context) {
    Session s(params);
    if (context.has_visual()) {
        for (int r = 0; r < context.grid_h; ++r)
            for (int col = 0; col < context.grid_w; ++col)
                s.append(embed_visual(params, context.grid[static_cast<size_t>(r * context.grid_w + col)], r, col));
    }
    for (int t = 0; t < static_cast<int>(context.text.size()); ++t)
        s.append(embed_text(params, context.text[static_cast<size_t>(t)], t));
    for (int p = 0; p < params.config.prompt_len; ++p)
        s.append(embed_decoder(params, kPromptBase + p, p));
    return s;
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
    double maxl = logits[0];
    for (double v : logits) maxl = std::max(maxl, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - maxl);
    double lse = std::log(sum) + maxl;
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

std::vector<int> decode_greedy(const ModelParams& params, const Sample& context, int max_len) {
    Session s = prefill(params, context);
    std::vector<int> out;
    const int P = params.config.prompt_len;
    for (int step = 1; step <= max_len; ++step) {
        auto logits = s.logits();
        int best = 0;
        for (int j = 1; j < static_cast<int>(logits.size()); ++j)
            if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
        if (best == kEosId) break;
        out.push_back(best);
        if (step == max_len) break;
        s.append(embed_decoder(params, best, P - 1 + step));
    }
    return out;
}

struct Beam {
    Session session;
    std::vector<int> tokens;
    double score = 0.0; // sum of model log-probabilities
    bool finished = false;
};

std::vector<int> decode_beam_sample(const ModelParams& params, const Sample& context,
                                    const DecodeConfig& cfg, int max_len) {
    const int B = std::max(1, cfg.beam_size);
    const double temp = std::max(cfg.temperature, 1e-9);
    std::mt19937_64 rng(derive_seed(cfg.seed, "beam-sample"));
    std::uniform_real_distribution<double> uni(std::numeric_limits<double>::min(), 1.0);
    const int P = params.config.prompt_len;

    std::vector<Beam> beams;
    beams.push_back(Beam{prefill(params, context), {}, 0.0, false});

    struct Candidate {
        int beam = 0;
        int token = kEosId;
        double score = 0.0;
        bool from_finished = false;
    };

    for (int step = 1; step <= max_len; ++step) {
        std::vector<Candidate> cands;
        bool any_live = false;
        for (int b = 0; b < static_cast<int>(beams.size()); ++b) {
            Beam& beam = beams[static_cast<size_t>(b)];
            if (beam.finished) {
                cands.push_back({b, kEosId, beam.score, true});
                continue;
            }
            any_live = true;
            auto logits = beam.session.logits();
            auto lp = log_softmax(logits);
            // Gumbel top-k over the tempered distribution samples tokens
            // without replacement; ranking uses the untempered likelihood.
            std::vector<double> keys(logits.size());
            for (size_t j = 0; j < logits.size(); ++j) {
                double g = -std::log(-std::log(uni(rng)));
                keys[j] = logits[j] / temp + g;
            }
            std::vector<int> order(logits.size());
            for (size_t j = 0; j < order.size(); ++j) order[j] = static_cast<int>(j);
            int take = std::min<int>(B, static_cast<int>(order.size()));
            std::partial_sort(order.begin(), order.begin() + take, order.end(),
                              [&keys](int a, int b2) { return keys[static_cast<size_t>(a)] > keys[static_cast<size_t>(b2)]; });
            for (int j = 0; j < take; ++j) {
                int tok = order[static_cast<size_t>(j)];
                cands.push_back({b, tok, beam.score + lp[static_cast<size_t>(tok)], false});
            }
        }
        if (!any_live) break;
        std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b2) {
            if (a.score != b2.score) return a.score > b2.score;
            if (a.beam != b2.beam) return a.beam < b2.beam;
            return a.token < b2.token;
        });
        int keep = std::min<int>(B, static_cast<int>(cands.size()));
        std::vector<Beam> next;
        next.reserve(static_cast<size_t>(keep));
        for (int ci = 0; ci < keep; ++ci) {
            const Candidate& cand = cands[static_cast<size_t>(ci)];
            Beam& src = beams[static_cast<size_t>(cand.beam)];
            if (cand.from_finished) {
                next.push_back(src);
                continue;
            }
            Beam nb{src.session, src.tokens, cand.score, false};
            if (cand.token == kEosId) {
                nb.finished = true;
            } else {
                nb.tokens.push_back(cand.token);
                if (step < max_len) nb.session.append(embed_decoder(params, cand.token, P - 1 + step));
                nb.finished = static_cast<int>(nb.tokens.size()) >= max_len;
            }
            next.push_back(std::move(nb));
        }
        beams = std::move(next);
        bool all_done = true;
        for (const Beam& b : beams)
            if (!b.finished) all_done = false;
        if (all_done) break;
    }

    const Beam* best = &beams.front();
    for (const Beam& b : beams) {
        if (b.finished && !best->finished) { best = &b; continue; }
        if (b.finished == best->finished && b.score > best->score) best = &b;
    }
    return best->tokens;
}

} // namespace

DecodeConfig::Strategy decode_strategy_from_string(const std::string& s) {
    if (s == "greedy") return DecodeConfig::Strategy::greedy;
    if (s == "beam" || s == "beam-sample" || s == "beam_sample")
        return DecodeConfig::Strategy::beam_sample;
    throw std::invalid_argument("unknown decode strategy: " + s);
}

std::vector<int> decode_tokens(const ModelParams& params, const Sample& context,
                               const DecodeConfig& cfg) {
    int max_len = std::min(cfg.max_len, params.config.max_target_len);
    if (max_len < 1) throw std::invalid_argument("decode max_len must be >= 1");
    if (cfg.strategy == DecodeConfig::Strategy::greedy)
        return decode_greedy(params, context, max_len);
    return decode_beam_sample(params, context, cfg, max_len);
}

std::vector<std::string> tokens_to_phrases(const std::vector<int>& tokens,
                                           const std::vector<std::string>& vocab) {
    std::vector<std::string> phrases;
    std::string current;
    auto flush = [&phrases, &current]() {
        if (!current.empty()) phrases.push_back(current);
        current.clear();
    };
    for (int tok : tokens) {
        if (tok == kSepId) {
            flush();
            continue;
        }
        if (tok == kEosId) break;
        std::string word = (tok >= 0 && tok < static_cast<int>(vocab.size()))
                               ? vocab[static_cast<size_t>(tok)]
                               : ("<" + std::to_string(tok) + ">");
        if (!current.empty()) current.push_back(' ');
        current += word;
    }
    flush();
    return phrases;
}

std::vector<std::string> decode(const ModelParams& params, const Sample& context,
                                const DecodeConfig& cfg, const std::vector<std::string>& vocab) {
    return tokens_to_phrases(decode_tokens(params, context, cfg), vocab);
}

} // namespace aimkp
