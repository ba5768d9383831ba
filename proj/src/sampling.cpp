#include "masters/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "masters/rng.hpp"

namespace masters {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

void SamplingConfig::validate() const {
    if (!greedy && temperature <= 0.0)
        throw ConfigError("sampling: temperature must be positive (or use greedy)");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("sampling: top_p must lie in (0, 1]");
    if (top_k < 1) throw ConfigError("sampling: top_k must be >= 1");
    if (repetition_penalty < 1.0) throw ConfigError("sampling: repetition_penalty must be >= 1");
    if (max_new_tokens < 1) throw ConfigError("sampling: max_new_tokens must be >= 1");
}

std::vector<double> filtered_log_probs(std::span<const double> logits,
                                       const SamplingConfig& config,
                                       std::span<const int> generated_so_far) {
    const int64_t v_size = static_cast<int64_t>(logits.size());
    std::vector<double> z(logits.begin(), logits.end());

    if (config.repetition_penalty != 1.0) {
        std::set<int> seen(generated_so_far.begin(), generated_so_far.end());
        for (int tok : seen) {
            if (tok < 0 || tok >= v_size) continue;
            z[tok] = z[tok] > 0.0 ? z[tok] / config.repetition_penalty
                                  : z[tok] * config.repetition_penalty;
        }
    }

    std::vector<double> out(static_cast<size_t>(v_size), kNegInf);
    if (config.greedy) {
        int64_t best = 0;
        for (int64_t i = 1; i < v_size; ++i)
            if (z[i] > z[best]) best = i;
        out[best] = 0.0;
        return out;
    }

    for (double& value : z) value /= config.temperature;

    std::vector<int64_t> order(static_cast<size_t>(v_size));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (z[a] != z[b]) return z[a] > z[b];
        return a < b;
    });

    const int64_t keep_k = std::min<int64_t>(config.top_k, v_size);

    // softmax over the top-k survivors, in descending order
    const double max_z = z[order[0]];
    double sum = 0.0;
    std::vector<double> probs(static_cast<size_t>(keep_k));
    for (int64_t r = 0; r < keep_k; ++r) {
        probs[r] = std::exp(z[order[r]] - max_z);
        sum += probs[r];
    }

    int64_t keep_p = keep_k;
    double cumulative = 0.0;
    for (int64_t r = 0; r < keep_k; ++r) {
        cumulative += probs[r] / sum;
        if (cumulative >= config.top_p) {
            keep_p = r + 1;
            break;
        }
    }

    double survivor_sum = 0.0;
    for (int64_t r = 0; r < keep_p; ++r) survivor_sum += std::exp(z[order[r]] - max_z);
    const double log_norm = max_z + std::log(survivor_sum);
    for (int64_t r = 0; r < keep_p; ++r) out[order[r]] = z[order[r]] - log_norm;
    return out;
}

SampledSequence sample_sequence(const Model& model, std::span<const int> prompt,
                                const SamplingConfig& config, uint64_t seed, int eos_id) {
    if (prompt.empty()) throw DomainError("sample_sequence: empty prompt");
    config.validate();

    Rng rng(seed);
    std::vector<int> sequence(prompt.begin(), prompt.end());
    SampledSequence result;

    for (int step = 0; step < config.max_new_tokens; ++step) {
        if (static_cast<int64_t>(sequence.size()) >= model.config().context_len) break;
        const auto rows = model.forward(sequence);
        const auto lp = filtered_log_probs(rows.back().values, config, result.tokens);

        int chosen = -1;
        if (config.greedy) {
            for (size_t v = 0; v < lp.size(); ++v)
                if (lp[v] == 0.0) {
                    chosen = static_cast<int>(v);
                    break;
                }
        } else {
            const double u = rng.next_double();
            double cumulative = 0.0;
            int last_alive = -1;
            for (size_t v = 0; v < lp.size(); ++v) {
                if (lp[v] == kNegInf) continue;
                last_alive = static_cast<int>(v);
                cumulative += std::exp(lp[v]);
                if (u < cumulative) {
                    chosen = static_cast<int>(v);
                    break;
                }
            }
            if (chosen < 0) chosen = last_alive;
        }

        result.tokens.push_back(chosen);
        result.logprobs.push_back(lp[chosen]);
        sequence.push_back(chosen);
        if (chosen == eos_id) break;
    }
    return result;
}

std::vector<double> rescore_logprobs(const Model& model, std::span<const int> prompt,
                                     std::span<const int> tokens,
                                     const SamplingConfig& config) {
    if (prompt.empty()) throw DomainError("rescore_logprobs: empty prompt");
    if (tokens.empty()) return {};

    std::vector<int> sequence(prompt.begin(), prompt.end());
    sequence.insert(sequence.end(), tokens.begin(), tokens.end());
    const auto rows = model.forward(sequence);

    std::vector<double> out;
    out.reserve(tokens.size());
    const int64_t prompt_len = static_cast<int64_t>(prompt.size());
    for (size_t j = 0; j < tokens.size(); ++j) {
        const auto& logits = rows[prompt_len - 1 + static_cast<int64_t>(j)].values;
        const auto lp = filtered_log_probs(logits, config, tokens.subspan(0, j));
        out.push_back(lp[tokens[j]]);
    }
    return out;
}

}  // namespace masters
