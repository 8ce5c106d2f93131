#include "aimkp/masking.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace aimkp {

const char* to_string(Modality m) {
    switch (m) {
        case Modality::visual: return "visual";
        case Modality::text: return "text";
        case Modality::none: return "none";
    }
    return "?";
}

const char* to_string(MaskConvention c) {
    return c == MaskConvention::formula_anchor ? "formula-anchor" : "last-in-stride";
}

int KeepMask::popcount() const {
    return static_cast<int>(std::count(bits.begin(), bits.end(), uint8_t{1}));
}

KeepMask all_ones_1d(int length) {
    if (length < 0) throw std::invalid_argument("mask length must be >= 0");
    KeepMask m;
    m.is_2d = false;
    m.height = 1;
    m.width = length;
    m.bits.assign(static_cast<size_t>(length), 1);
    return m;
}

KeepMask all_ones_2d(int height, int width) {
    if (height < 0 || width < 0) throw std::invalid_argument("mask dims must be >= 0");
    KeepMask m;
    m.is_2d = true;
    m.height = height;
    m.width = width;
    m.bits.assign(static_cast<size_t>(height) * static_cast<size_t>(width), 1);
    return m;
}

namespace {

// Keep flags along one axis of the given length.
std::vector<uint8_t> axis_keep(int length, int gamma, MaskConvention conv) {
    std::vector<uint8_t> keep(static_cast<size_t>(length), 0);
    if (conv == MaskConvention::formula_anchor) {
        for (int t = 0; t < length; ++t) keep[static_cast<size_t>(t)] = (t % gamma == 0) ? 1 : 0;
    } else {
        // Last index of each window of gamma consecutive positions; a final
        // partial window keeps its last position too.
        for (int start = 0; start < length; start += gamma) {
            int last = std::min(start + gamma, length) - 1;
            keep[static_cast<size_t>(last)] = 1;
        }
    }
    return keep;
}

} // namespace

KeepMask build_stride_mask_1d(int length, int gamma, MaskConvention conv) {
    if (gamma < 1) throw std::invalid_argument("stride gamma must be >= 1");
    if (length < 1) throw std::invalid_argument("mask length must be >= 1");
    KeepMask m;
    m.is_2d = false;
    m.height = 1;
    m.width = length;
    m.bits = axis_keep(length, gamma, conv);
    return m;
}

KeepMask build_stride_mask_2d(int height, int width, int gamma, MaskConvention conv) {
    if (gamma < 1) throw std::invalid_argument("stride gamma must be >= 1");
    if (height < 1 || width < 1) throw std::invalid_argument("mask dims must be >= 1");
    KeepMask m;
    m.is_2d = true;
    m.height = height;
    m.width = width;
    m.bits.assign(static_cast<size_t>(height) * static_cast<size_t>(width), 0);
    const auto keep_r = axis_keep(height, gamma, conv);
    const auto keep_c = axis_keep(width, gamma, conv);
    for (int i = 0; i < height; ++i) {
        if (!keep_r[static_cast<size_t>(i)]) continue;
        for (int j = 0; j < width; ++j) {
            if (keep_c[static_cast<size_t>(j)]) m.bits[static_cast<size_t>(i) * width + j] = 1;
        }
    }
    return m;
}

double retention_ratio(const KeepMask& mask) {
    if (mask.total() <= 0) throw std::invalid_argument("retention_ratio of empty mask");
    return static_cast<double>(mask.popcount()) / static_cast<double>(mask.total());
}

MaskPlan unmasked_plan(const SampleDims& dims) {
    MaskPlan plan;
    plan.target = Modality::none;
    plan.visual_mask = all_ones_2d(dims.grid_h, dims.grid_w);
    plan.text_mask = all_ones_1d(dims.text_len);
    plan.stride_used = 1;
    return plan;
}

MaskPlan compose_mask_plan(const SampleDims& dims, const StridePair& strides, Modality target,
                           MaskConvention conv) {
    if (target == Modality::none) return unmasked_plan(dims);

    MaskPlan plan;
    plan.target = target;
    if (target == Modality::visual) {
        if (strides.visual < 2) throw std::invalid_argument("visual stride must be >= 2");
        if (strides.visual > dims.grid_h || strides.visual > dims.grid_w)
            throw std::invalid_argument("visual stride exceeds grid dimension");
        plan.visual_mask = build_stride_mask_2d(dims.grid_h, dims.grid_w, strides.visual, conv);
        plan.text_mask = all_ones_1d(dims.text_len);
        plan.stride_used = strides.visual;
    } else {
        if (strides.text < 2) throw std::invalid_argument("text stride must be >= 2");
        if (strides.text > dims.text_len)
            throw std::invalid_argument("text stride exceeds text length");
        plan.visual_mask = all_ones_2d(dims.grid_h, dims.grid_w);
        plan.text_mask = build_stride_mask_1d(dims.text_len, strides.text, conv);
        plan.stride_used = strides.text;
    }
    return plan;
}

std::string render_mask(const KeepMask& mask) {
    std::string out;
    out.reserve(mask.bits.size() + static_cast<size_t>(mask.height));
    for (int i = 0; i < mask.height; ++i) {
        for (int j = 0; j < mask.width; ++j) {
            out.push_back(mask.bits[static_cast<size_t>(i) * mask.width + j] ? '#' : '.');
        }
        out.push_back('\n');
    }
    return out;
}

} // namespace aimkp
