#include "aimkp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "aimkp/io.hpp"

namespace aimkp {

std::vector<VariantPoint> collect_variant_points(const ModelParams& params,
                                                 const std::vector<Sample>& samples,
                                                 const std::vector<int>& gammas,
                                                 int max_variants) {
    std::vector<VariantPoint> points;
    for (const Sample& sample : samples) {
        if (max_variants > 0 && static_cast<int>(points.size()) >= max_variants) break;
        SampleDims dims = sample.dims();
        LossAndGrad base = loss_and_grad(params, sample, unmasked_plan(dims));
        double ppl_base = std::exp(base.loss);
        for (Modality m : {Modality::visual, Modality::text}) {
            int axis = m == Modality::visual ? std::min(dims.grid_h, dims.grid_w) : dims.text_len;
            for (int gamma : gammas) {
                if (gamma < 2 || gamma > axis) continue;
                if (max_variants > 0 && static_cast<int>(points.size()) >= max_variants) break;
                MaskPlan plan = compose_mask_plan(dims, {gamma, gamma}, m);
                LossAndGrad masked = loss_and_grad(params, sample, plan);
                VariantPoint p;
                p.sample_id = sample.id;
                p.modality = m;
                p.gamma = gamma;
                p.cos_sim = cosine_similarity(base.grad, masked.grad);
                p.ppl_ratio = std::exp(masked.loss) / ppl_base;
                points.push_back(std::move(p));
            }
        }
    }
    return points;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& values) {
    const size_t n = values.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&values](size_t a, size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

} // namespace

std::optional<double> spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman_rho: length mismatch");
    if (x.size() < 2) return std::nullopt;
    auto rx = average_ranks(x);
    auto ry = average_ranks(y);
    double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
    double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < rx.size(); ++i) {
        double dx = rx[i] - mx;
        double dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if (vx == 0.0 || vy == 0.0) return std::nullopt;
    return cov / std::sqrt(vx * vy);
}

std::string variant_points_to_csv(const std::vector<VariantPoint>& points) {
    std::string out = "sample_id,modality,gamma,cos_sim,ppl_ratio\n";
    for (const auto& p : points) {
        out += p.sample_id;
        out += ',';
        out += to_string(p.modality);
        out += ',';
        out += std::to_string(p.gamma);
        out += ',';
        out += format_double(p.cos_sim);
        out += ',';
        out += format_double(p.ppl_ratio);
        out += '\n';
    }
    return out;
}

} // namespace aimkp
