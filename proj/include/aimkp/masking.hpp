#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace aimkp {

// Which token of each stride window survives. `formula_anchor` keeps indices
// that are multiples of the stride; `last_in_stride` keeps the final index of
// each window and is the convention training uses.
enum class MaskConvention { formula_anchor, last_in_stride };

enum class Modality { visual, text, none };

const char* to_string(Modality m);
const char* to_string(MaskConvention c);

// Binary keep-mask over a 1D token sequence or a 2D token grid.
// bit = 1 means the token stays visible to attention.
struct KeepMask {
    bool is_2d = false;
    int height = 1; // 1 for 1D masks
    int width = 0;  // length for 1D masks
    std::vector<uint8_t> bits; // row-major, size height*width

    int total() const { return height * width; }
    int popcount() const;
    bool at(int t) const { return bits[static_cast<size_t>(t)] != 0; }
    bool at(int i, int j) const { return bits[static_cast<size_t>(i) * width + j] != 0; }
    bool all_ones() const { return popcount() == total(); }
};

KeepMask all_ones_1d(int length);
KeepMask all_ones_2d(int height, int width);

// Throws std::invalid_argument for gamma == 0 or empty shapes.
KeepMask build_stride_mask_1d(int length, int gamma, MaskConvention conv);
KeepMask build_stride_mask_2d(int height, int width, int gamma, MaskConvention conv);

// popcount / total positions. In (0,1] for non-empty masks.
double retention_ratio(const KeepMask& mask);

struct SampleDims {
    int grid_h = 0;
    int grid_w = 0;
    int text_len = 0;
};

struct StridePair {
    int visual = 2;
    int text = 2;
};

// One modality carries a stride mask, the other stays all-ones. Prompt and
// target positions are outside both masks and are never hidden.
struct MaskPlan {
    Modality target = Modality::none;
    KeepMask visual_mask;
    KeepMask text_mask;
    int stride_used = 1;
};

MaskPlan unmasked_plan(const SampleDims& dims);

// Mask composition refuses a stride larger than the masked axis instead of
// silently clamping; the stride scheduler enforces caps so this never fires
// in a normal run.
MaskPlan compose_mask_plan(const SampleDims& dims, const StridePair& strides, Modality target,
                           MaskConvention conv = MaskConvention::last_in_stride);

// Text rendering of a mask ('#' kept, '.' dropped), one row per line.
std::string render_mask(const KeepMask& mask);

} // namespace aimkp
