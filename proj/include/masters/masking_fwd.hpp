#pragma once

namespace masters {
struct MaskPlan;
struct LayerMask;
}  // namespace masters
