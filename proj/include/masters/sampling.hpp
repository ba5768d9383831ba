#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "masters/model.hpp"

namespace masters {

struct SamplingConfig {
    double temperature{1.0};
    double top_p{0.9};
    int top_k{50};
    double repetition_penalty{1.05};
    int max_new_tokens{16};
    bool greedy{false};  // argmax limit of the pipeline; filters become moot

    void validate() const;  // ConfigError on out-of-range values
};

// Next-token log-probabilities after the full filter pipeline, applied in
// order: repetition penalty (over already-generated tokens: positive logits
// divided by the penalty, negative multiplied), temperature division, top-k
// truncation, top-p truncation, renormalization. Filtered-out tokens are
// -inf. Greedy mode is the temperature->0 limit: a point mass at the argmax
// of the penalty-adjusted logits.
std::vector<double> filtered_log_probs(std::span<const double> logits,
                                       const SamplingConfig& config,
                                       std::span<const int> generated_so_far);

struct SampledSequence {
    std::vector<int> tokens;        // generated only; ends with eos when emitted
    std::vector<double> logprobs;   // realized log-prob per token, post-filter
};

// Autoregressive sampling from the model; stops at eos_id or max_new_tokens
// (or when the context fills). DomainError on an empty prompt.
SampledSequence sample_sequence(const Model& model, std::span<const int> prompt,
                                const SamplingConfig& config, uint64_t seed, int eos_id);

// Log-probs the pipeline assigned to an existing response; equals the values
// recorded at generation time exactly.
std::vector<double> rescore_logprobs(const Model& model, std::span<const int> prompt,
                                     std::span<const int> tokens,
                                     const SamplingConfig& config);

}  // namespace masters
