#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "masters/model.hpp"

namespace masters {

// Per-tensor binary masks over a model's parameters. Only entries of rank >= 2
// (embedding / attention / MLP matrices) are maskable; 1-D entries (norm
// gains) are always fully kept and do not appear in the plan.
struct LayerMask {
    std::string layer_name;
    // Smallest kept |w|; +inf when the layer is fully masked.
    double threshold{0.0};
    // One bit per element, packed 8/byte, little-endian bit order; 1 = kept.
    std::vector<uint8_t> bits;
    int64_t element_count{0};
    int64_t kept_count{0};

    bool bit(int64_t index) const { return (bits[index >> 3] >> (index & 7)) & 1; }
    void set_bit(int64_t index) { bits[index >> 3] |= static_cast<uint8_t>(1u << (index & 7)); }
};

struct MaskPlan {
    double ratio{0.0};
    std::vector<LayerMask> per_layer;

    const LayerMask* find(std::string_view name) const;
};

// Masks the floor(ratio * N_l) smallest-magnitude elements of each maskable
// layer; ties broken by ascending flat index. DomainError unless 0 <= ratio <= 1.
MaskPlan build_mask(const ParameterView& teacher, double ratio);

// Elementwise mask * weight; the input view is untouched. StructuralError on
// layer name / shape mismatch.
ParameterView apply_mask(const ParameterView& teacher, const MaskPlan& plan);

struct MaskedFraction {
    std::vector<std::pair<std::string, double>> per_layer;
    double global{0.0};
};

MaskedFraction masked_fraction(const MaskPlan& plan);

}  // namespace masters
