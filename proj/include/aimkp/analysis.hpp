#pragma once

#include <optional>
#include <string>
#include <vector>

#include "aimkp/model.hpp"
#include "aimkp/objective.hpp"

namespace aimkp {

// One masked variant of one sample: gradient cosine against the unmasked
// gradient and the masked/unmasked perplexity ratio.
struct VariantPoint {
    std::string sample_id;
    Modality modality = Modality::visual;
    int gamma = 2;
    double cos_sim = 0.0;
    double ppl_ratio = 1.0;
};

// Computes variant points over the given samples and strides, skipping
// strides a sample cannot support. Stops after max_variants (0 = no limit).
std::vector<VariantPoint> collect_variant_points(const ModelParams& params,
                                                 const std::vector<Sample>& samples,
                                                 const std::vector<int>& gammas,
                                                 int max_variants = 0);

// Spearman rank correlation with average ranks for ties; nullopt when either
// series is constant (undefined / degenerate).
std::optional<double> spearman_rho(const std::vector<double>& x, const std::vector<double>& y);

std::string variant_points_to_csv(const std::vector<VariantPoint>& points);

} // namespace aimkp
