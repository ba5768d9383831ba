#pragma once

#include <filesystem>

#include "masters/masking_fwd.hpp"
#include "masters/model.hpp"

namespace masters {

// Self-describing binary containers, little-endian throughout. Doubles are
// stored as raw IEEE-754 bytes so save/load round-trips bit-exactly.

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);  // MissingArtifactError / StructuralError

void save_mask_plan(const MaskPlan& plan, const std::filesystem::path& path);
MaskPlan load_mask_plan(const std::filesystem::path& path);

// Bare parameter views (optimizer moments and the like).
void save_parameter_view(const ParameterView& view, const std::filesystem::path& path);
ParameterView load_parameter_view(const std::filesystem::path& path);

}  // namespace masters
