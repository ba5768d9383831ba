#include "masters/masking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace masters {

const LayerMask* MaskPlan::find(std::string_view name) const {
    for (const auto& lm : per_layer)
        if (lm.layer_name == name) return &lm;
    return nullptr;
}

MaskPlan build_mask(const ParameterView& teacher, double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw DomainError("build_mask: ratio must lie in [0, 1], got " + std::to_string(ratio));

    MaskPlan plan;
    plan.ratio = ratio;
    for (const auto& entry : teacher.entries) {
        if (entry.rank() < 2) continue;
        const int64_t n = entry.count();
        const int64_t masked = static_cast<int64_t>(std::floor(ratio * static_cast<double>(n)));

        std::vector<int64_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            const double ma = std::fabs(entry.values[a]);
            const double mb = std::fabs(entry.values[b]);
            if (ma != mb) return ma < mb;
            return a < b;
        });

        LayerMask lm;
        lm.layer_name = entry.name;
        lm.element_count = n;
        lm.kept_count = n - masked;
        lm.bits.assign(static_cast<size_t>((n + 7) / 8), 0xFF);
        // clear padding bits past n
        if (n % 8 != 0) lm.bits.back() = static_cast<uint8_t>((1u << (n % 8)) - 1);
        for (int64_t r = 0; r < masked; ++r) {
            const int64_t idx = order[r];
            lm.bits[idx >> 3] &= static_cast<uint8_t>(~(1u << (idx & 7)));
        }
        lm.threshold = masked < n ? std::fabs(entry.values[order[masked]])
                                  : std::numeric_limits<double>::infinity();
        plan.per_layer.push_back(std::move(lm));
    }
    return plan;
}

ParameterView apply_mask(const ParameterView& teacher, const MaskPlan& plan) {
    for (const auto& lm : plan.per_layer) {
        const ParamEntry* entry = teacher.find(lm.layer_name);
        if (!entry) throw StructuralError("apply_mask: plan layer not in view: " + lm.layer_name);
        if (entry->count() != lm.element_count)
            throw StructuralError("apply_mask: element count mismatch for " + lm.layer_name);
    }

    ParameterView out = teacher;
    for (auto& entry : out.entries) {
        const LayerMask* lm = plan.find(entry.name);
        if (!lm) continue;
        for (int64_t i = 0; i < entry.count(); ++i)
            entry.values[i] *= lm->bit(i) ? 1.0 : 0.0;
    }
    return out;
}

MaskedFraction masked_fraction(const MaskPlan& plan) {
    MaskedFraction out;
    int64_t total = 0;
    int64_t total_masked = 0;
    for (const auto& lm : plan.per_layer) {
        const int64_t masked = lm.element_count - lm.kept_count;
        out.per_layer.emplace_back(lm.layer_name,
                                   static_cast<double>(masked) / static_cast<double>(lm.element_count));
        total += lm.element_count;
        total_masked += masked;
    }
    out.global = total > 0 ? static_cast<double>(total_masked) / static_cast<double>(total) : 0.0;
    return out;
}

}  // namespace masters
