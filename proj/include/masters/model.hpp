#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "masters/errors.hpp"

namespace masters {

struct ModelConfig {
    int64_t vocab_size{0};
    int64_t context_len{0};
    int64_t n_layers{0};
    int64_t d_model{0};
    int64_t n_heads{0};
    uint64_t seed{0};

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// One model's trainable tensors as named, ordered, flat f64 arrays. Order is
// a pure function of ModelConfig, so two views built from the same config
// align entry-by-entry.
struct ParamEntry {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<double> values;

    int64_t count() const { return static_cast<int64_t>(values.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
};

struct ParameterView {
    std::vector<ParamEntry> entries;

    int64_t total_count() const;
    const ParamEntry& at(std::string_view name) const;
    ParamEntry& at(std::string_view name);
    const ParamEntry* find(std::string_view name) const;

    static ParameterView zeros_like(const ParameterView& other);
};

struct LogitsRow {
    std::vector<double> values;
    int64_t position{0};
};

// Stable log-softmax (max subtraction). Throws NumericError on non-finite input.
std::vector<double> log_softmax(std::span<const double> logits);
inline std::vector<double> log_softmax(const LogitsRow& row) {
    return log_softmax(std::span<const double>(row.values));
}

// Activations cached by forward_trace, consumed by backward.
struct ForwardTrace;

// Pre-norm decoder-only transformer: learned token + position embeddings,
// per-layer (rmsnorm -> causal multi-head attention -> residual) and
// (rmsnorm -> gelu MLP -> residual), final rmsnorm, linear unembedding.
// All arithmetic in f64. Immutable after construction except through params().
class Model {
public:
    explicit Model(ModelConfig cfg);                 // all parameters zero
    Model(ModelConfig cfg, ParameterView params);    // adopts params, shape-checked

    static Model random_init(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const ParameterView& params() const { return params_; }
    ParameterView& params() { return params_; }
    int64_t param_count() const { return params_.total_count(); }

    std::vector<LogitsRow> forward(std::span<const int> tokens) const;
    ForwardTrace forward_trace(std::span<const int> tokens) const;

    // dlogits[t][v] is dLoss/dlogits at position t; result aligns with params().
    ParameterView backward(const ForwardTrace& trace,
                           const std::vector<std::vector<double>>& dlogits) const;
    void accumulate_backward(const ForwardTrace& trace,
                             const std::vector<std::vector<double>>& dlogits,
                             ParameterView& grad) const;

    // Convenience: forward + backward in one call.
    ParameterView backward(std::span<const int> tokens,
                           const std::vector<std::vector<double>>& dlogits) const;

private:
    void check_tokens(std::span<const int> tokens) const;

    ModelConfig cfg_;
    ParameterView params_;
};

struct ForwardTrace {
    std::vector<int> tokens;

    struct LayerTrace {
        std::vector<std::vector<double>> attn_in;      // [T][d] residual stream entering the block
        std::vector<double> attn_inv_rms;              // [T]
        std::vector<std::vector<double>> attn_normed;  // [T][d] post-norm, pre-qkv
        std::vector<std::vector<double>> q, k, v;      // [T][d]
        // weights[t][h] has t+1 entries (causal)
        std::vector<std::vector<std::vector<double>>> weights;
        std::vector<std::vector<double>> attn_cat;     // [T][d] head outputs, pre-Wo
        std::vector<std::vector<double>> mlp_in;       // [T][d]
        std::vector<double> mlp_inv_rms;               // [T]
        std::vector<std::vector<double>> mlp_normed;   // [T][d]
        std::vector<std::vector<double>> mlp_pre;      // [T][4d] pre-activation
        std::vector<std::vector<double>> mlp_act;      // [T][4d]
    };

    std::vector<LayerTrace> layers;
    std::vector<std::vector<double>> final_in;      // [T][d]
    std::vector<double> final_inv_rms;              // [T]
    std::vector<std::vector<double>> final_normed;  // [T][d]
    std::vector<LogitsRow> logits;                  // [T]
};

}  // namespace masters
