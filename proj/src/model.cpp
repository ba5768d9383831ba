#include "masters/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "masters/rng.hpp"

namespace masters {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kInitStd = 0.08;

// y = W x, W row-major [out_dim, in_dim]
void matvec(std::span<const double> w, int64_t out_dim, int64_t in_dim,
            const double* x, double* y) {
    for (int64_t o = 0; o < out_dim; ++o) {
        const double* row = w.data() + o * in_dim;
        double acc = 0.0;
        for (int64_t i = 0; i < in_dim; ++i) acc += row[i] * x[i];
        y[o] = acc;
    }
}

// dW[o,i] += dy[o] x[i];  dx[i] += sum_o W[o,i] dy[o]
void matvec_backward(std::span<const double> w, int64_t out_dim, int64_t in_dim,
                     const double* x, const double* dy, double* dw, double* dx) {
    for (int64_t o = 0; o < out_dim; ++o) {
        const double g = dy[o];
        if (g == 0.0) continue;
        const double* row = w.data() + o * in_dim;
        double* drow = dw + o * in_dim;
        for (int64_t i = 0; i < in_dim; ++i) {
            drow[i] += g * x[i];
            dx[i] += row[i] * g;
        }
    }
}

double rms_inv(const double* x, int64_t n) {
    double sq = 0.0;
    for (int64_t i = 0; i < n; ++i) sq += x[i] * x[i];
    return 1.0 / std::sqrt(sq / static_cast<double>(n) + kRmsEps);
}

// tanh-approximation gelu; smooth, so finite differences stay valid everywhere
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// y_i = g_i * x_i * inv
void rmsnorm(const double* x, const double* gain, int64_t n, double inv, double* y) {
    for (int64_t i = 0; i < n; ++i) y[i] = gain[i] * x[i] * inv;
}

// dgain_i += dy_i x_i inv;  dx_j += dy_j g_j inv - x_j inv^3 / n * sum_i dy_i g_i x_i
void rmsnorm_backward(const double* x, const double* gain, int64_t n, double inv,
                      const double* dy, double* dgain, double* dx) {
    double proj = 0.0;
    for (int64_t i = 0; i < n; ++i) proj += dy[i] * gain[i] * x[i];
    const double scale = proj * inv * inv * inv / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
        dgain[i] += dy[i] * x[i] * inv;
        dx[i] += dy[i] * gain[i] * inv - x[i] * scale;
    }
}

std::string layer_prefix(int64_t layer) { return "layers." + std::to_string(layer) + "."; }

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (context_len < 2) throw ConfigError("model: context_len must be >= 2");
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (d_model < 1) throw ConfigError("model: d_model must be >= 1");
    if (n_heads < 1) throw ConfigError("model: n_heads must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
}

int64_t ParameterView::total_count() const {
    int64_t total = 0;
    for (const auto& e : entries) total += e.count();
    return total;
}

const ParamEntry* ParameterView::find(std::string_view name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

const ParamEntry& ParameterView::at(std::string_view name) const {
    if (const ParamEntry* e = find(name)) return *e;
    throw StructuralError("parameter entry not found: " + std::string(name));
}

ParamEntry& ParameterView::at(std::string_view name) {
    return const_cast<ParamEntry&>(static_cast<const ParameterView*>(this)->at(name));
}

ParameterView ParameterView::zeros_like(const ParameterView& other) {
    ParameterView out;
    out.entries.reserve(other.entries.size());
    for (const auto& e : other.entries) {
        out.entries.push_back(ParamEntry{e.name, e.shape, std::vector<double>(e.values.size(), 0.0)});
    }
    return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
    if (logits.empty()) throw NumericError("log_softmax: empty input");
    double max_val = -std::numeric_limits<double>::infinity();
    for (double v : logits) {
        if (!std::isfinite(v)) throw NumericError("log_softmax: non-finite logit");
        max_val = std::max(max_val, v);
    }
    double sum_exp = 0.0;
    for (double v : logits) sum_exp += std::exp(v - max_val);
    const double log_z = max_val + std::log(sum_exp);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_z;
    return out;
}

Model::Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int64_t d = cfg_.d_model;
    auto add = [&](std::string name, std::vector<int64_t> shape) {
        int64_t n = 1;
        for (int64_t s : shape) n *= s;
        params_.entries.push_back(ParamEntry{std::move(name), std::move(shape),
                                             std::vector<double>(static_cast<size_t>(n), 0.0)});
    };
    add("embed.token", {cfg_.vocab_size, d});
    add("embed.pos", {cfg_.context_len, d});
    for (int64_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = layer_prefix(l);
        add(p + "attn_norm.gain", {d});
        add(p + "attn.wq", {d, d});
        add(p + "attn.wk", {d, d});
        add(p + "attn.wv", {d, d});
        add(p + "attn.wo", {d, d});
        add(p + "mlp_norm.gain", {d});
        add(p + "mlp.w_in", {4 * d, d});
        add(p + "mlp.w_out", {d, 4 * d});
    }
    add("final_norm.gain", {d});
    add("unembed", {cfg_.vocab_size, d});
}

Model::Model(ModelConfig cfg, ParameterView params) : Model(cfg) {
    if (params.entries.size() != params_.entries.size())
        throw StructuralError("model: parameter entry count mismatch");
    for (size_t i = 0; i < params.entries.size(); ++i) {
        const auto& got = params.entries[i];
        const auto& want = params_.entries[i];
        if (got.name != want.name || got.shape != want.shape || got.values.size() != want.values.size())
            throw StructuralError("model: parameter entry mismatch at " + want.name);
    }
    params_ = std::move(params);
}

Model Model::random_init(const ModelConfig& cfg) {
    Model model(cfg);
    Rng rng(derive_seed(cfg.seed, "model-init"));
    for (auto& entry : model.params_.entries) {
        const bool is_gain = entry.name.ends_with(".gain");
        for (double& v : entry.values) v = is_gain ? 1.0 : kInitStd * rng.next_gaussian();
    }
    return model;
}

void Model::check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) throw LengthError("forward: empty token sequence");
    if (static_cast<int64_t>(tokens.size()) > cfg_.context_len)
        throw LengthError("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds context_len " + std::to_string(cfg_.context_len));
    for (int id : tokens) {
        if (id < 0 || id >= cfg_.vocab_size)
            throw VocabError("forward: token id " + std::to_string(id) + " outside vocabulary");
    }
}

std::vector<LogitsRow> Model::forward(std::span<const int> tokens) const {
    check_tokens(tokens);
    const int64_t T = static_cast<int64_t>(tokens.size());
    const int64_t d = cfg_.d_model;
    const int64_t heads = cfg_.n_heads;
    const int64_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const auto& tok = params_.entries[0].values;
    const auto& pos = params_.entries[1].values;

    std::vector<std::vector<double>> x(T, std::vector<double>(d));
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < d; ++i)
            x[t][i] = tok[tokens[t] * d + i] + pos[t * d + i];

    std::vector<std::vector<double>> q(T, std::vector<double>(d)), k(q), v(q);
    std::vector<double> h(d), scores, ctx(d), pre(4 * d);

    for (int64_t l = 0; l < cfg_.n_layers; ++l) {
        const size_t base = 2 + static_cast<size_t>(l) * 8;
        const auto& g_attn = params_.entries[base + 0].values;
        const auto& wq = params_.entries[base + 1].values;
        const auto& wk = params_.entries[base + 2].values;
        const auto& wv = params_.entries[base + 3].values;
        const auto& wo = params_.entries[base + 4].values;
        const auto& g_mlp = params_.entries[base + 5].values;
        const auto& w_in = params_.entries[base + 6].values;
        const auto& w_out = params_.entries[base + 7].values;

        for (int64_t t = 0; t < T; ++t) {
            const double inv = rms_inv(x[t].data(), d);
            rmsnorm(x[t].data(), g_attn.data(), d, inv, h.data());
            matvec(wq, d, d, h.data(), q[t].data());
            matvec(wk, d, d, h.data(), k[t].data());
            matvec(wv, d, d, h.data(), v[t].data());
        }
        for (int64_t t = 0; t < T; ++t) {
            std::vector<double> cat(d);
            for (int64_t hh = 0; hh < heads; ++hh) {
                const int64_t off = hh * hd;
                scores.assign(static_cast<size_t>(t + 1), 0.0);
                double max_s = -std::numeric_limits<double>::infinity();
                for (int64_t u = 0; u <= t; ++u) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < hd; ++j) dot += q[t][off + j] * k[u][off + j];
                    scores[u] = dot * scale;
                    max_s = std::max(max_s, scores[u]);
                }
                double sum = 0.0;
                for (int64_t u = 0; u <= t; ++u) {
                    scores[u] = std::exp(scores[u] - max_s);
                    sum += scores[u];
                }
                for (int64_t j = 0; j < hd; ++j) {
                    double acc = 0.0;
                    for (int64_t u = 0; u <= t; ++u) acc += scores[u] * v[u][off + j];
                    cat[off + j] = acc / sum;
                }
            }
            matvec(wo, d, d, cat.data(), ctx.data());
            for (int64_t i = 0; i < d; ++i) x[t][i] += ctx[i];
        }
        for (int64_t t = 0; t < T; ++t) {
            const double inv = rms_inv(x[t].data(), d);
            rmsnorm(x[t].data(), g_mlp.data(), d, inv, h.data());
            matvec(w_in, 4 * d, d, h.data(), pre.data());
            for (int64_t i = 0; i < 4 * d; ++i) pre[i] = gelu(pre[i]);
            matvec(w_out, d, 4 * d, pre.data(), ctx.data());
            for (int64_t i = 0; i < d; ++i) x[t][i] += ctx[i];
        }
    }

    const auto& g_final = params_.entries[2 + static_cast<size_t>(cfg_.n_layers) * 8].values;
    const auto& unembed = params_.entries[3 + static_cast<size_t>(cfg_.n_layers) * 8].values;
    std::vector<LogitsRow> rows(T);
    for (int64_t t = 0; t < T; ++t) {
        const double inv = rms_inv(x[t].data(), d);
        rmsnorm(x[t].data(), g_final.data(), d, inv, h.data());
        rows[t].position = t;
        rows[t].values.resize(cfg_.vocab_size);
        matvec(unembed, cfg_.vocab_size, d, h.data(), rows[t].values.data());
    }
    return rows;
}

ForwardTrace Model::forward_trace(std::span<const int> tokens) const {
    check_tokens(tokens);
    const int64_t T = static_cast<int64_t>(tokens.size());
    const int64_t d = cfg_.d_model;
    const int64_t heads = cfg_.n_heads;
    const int64_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardTrace tr;
    tr.tokens.assign(tokens.begin(), tokens.end());
    tr.layers.resize(cfg_.n_layers);

    const auto& tok = params_.entries[0].values;
    const auto& pos = params_.entries[1].values;

    std::vector<std::vector<double>> x(T, std::vector<double>(d));
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < d; ++i)
            x[t][i] = tok[tokens[t] * d + i] + pos[t * d + i];

    for (int64_t l = 0; l < cfg_.n_layers; ++l) {
        auto& lt = tr.layers[l];
        const size_t base = 2 + static_cast<size_t>(l) * 8;
        const auto& g_attn = params_.entries[base + 0].values;
        const auto& wq = params_.entries[base + 1].values;
        const auto& wk = params_.entries[base + 2].values;
        const auto& wv = params_.entries[base + 3].values;
        const auto& wo = params_.entries[base + 4].values;
        const auto& g_mlp = params_.entries[base + 5].values;
        const auto& w_in = params_.entries[base + 6].values;
        const auto& w_out = params_.entries[base + 7].values;

        lt.attn_in = x;
        lt.attn_inv_rms.resize(T);
        lt.attn_normed.assign(T, std::vector<double>(d));
        lt.q.assign(T, std::vector<double>(d));
        lt.k.assign(T, std::vector<double>(d));
        lt.v.assign(T, std::vector<double>(d));
        lt.weights.assign(T, {});
        lt.attn_cat.assign(T, std::vector<double>(d));

        for (int64_t t = 0; t < T; ++t) {
            lt.attn_inv_rms[t] = rms_inv(x[t].data(), d);
            rmsnorm(x[t].data(), g_attn.data(), d, lt.attn_inv_rms[t], lt.attn_normed[t].data());
            matvec(wq, d, d, lt.attn_normed[t].data(), lt.q[t].data());
            matvec(wk, d, d, lt.attn_normed[t].data(), lt.k[t].data());
            matvec(wv, d, d, lt.attn_normed[t].data(), lt.v[t].data());
        }
        std::vector<double> ctx(d);
        for (int64_t t = 0; t < T; ++t) {
            lt.weights[t].assign(heads, {});
            for (int64_t hh = 0; hh < heads; ++hh) {
                const int64_t off = hh * hd;
                auto& w = lt.weights[t][hh];
                w.assign(static_cast<size_t>(t + 1), 0.0);
                double max_s = -std::numeric_limits<double>::infinity();
                for (int64_t u = 0; u <= t; ++u) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < hd; ++j) dot += lt.q[t][off + j] * lt.k[u][off + j];
                    w[u] = dot * scale;
                    max_s = std::max(max_s, w[u]);
                }
                double sum = 0.0;
                for (int64_t u = 0; u <= t; ++u) {
                    w[u] = std::exp(w[u] - max_s);
                    sum += w[u];
                }
                for (int64_t u = 0; u <= t; ++u) w[u] /= sum;
                for (int64_t j = 0; j < hd; ++j) {
                    double acc = 0.0;
                    for (int64_t u = 0; u <= t; ++u) acc += w[u] * lt.v[u][off + j];
                    lt.attn_cat[t][off + j] = acc;
                }
            }
            matvec(wo, d, d, lt.attn_cat[t].data(), ctx.data());
            for (int64_t i = 0; i < d; ++i) x[t][i] += ctx[i];
        }

        lt.mlp_in = x;
        lt.mlp_inv_rms.resize(T);
        lt.mlp_normed.assign(T, std::vector<double>(d));
        lt.mlp_pre.assign(T, std::vector<double>(4 * d));
        lt.mlp_act.assign(T, std::vector<double>(4 * d));
        for (int64_t t = 0; t < T; ++t) {
            lt.mlp_inv_rms[t] = rms_inv(x[t].data(), d);
            rmsnorm(x[t].data(), g_mlp.data(), d, lt.mlp_inv_rms[t], lt.mlp_normed[t].data());
            matvec(w_in, 4 * d, d, lt.mlp_normed[t].data(), lt.mlp_pre[t].data());
            for (int64_t i = 0; i < 4 * d; ++i) lt.mlp_act[t][i] = gelu(lt.mlp_pre[t][i]);
            matvec(w_out, d, 4 * d, lt.mlp_act[t].data(), ctx.data());
            for (int64_t i = 0; i < d; ++i) x[t][i] += ctx[i];
        }
    }

    const auto& g_final = params_.entries[2 + static_cast<size_t>(cfg_.n_layers) * 8].values;
    const auto& unembed = params_.entries[3 + static_cast<size_t>(cfg_.n_layers) * 8].values;
    tr.final_in = x;
    tr.final_inv_rms.resize(T);
    tr.final_normed.assign(T, std::vector<double>(d));
    tr.logits.resize(T);
    for (int64_t t = 0; t < T; ++t) {
        tr.final_inv_rms[t] = rms_inv(x[t].data(), d);
        rmsnorm(x[t].data(), g_final.data(), d, tr.final_inv_rms[t], tr.final_normed[t].data());
        tr.logits[t].position = t;
        tr.logits[t].values.resize(cfg_.vocab_size);
        matvec(unembed, cfg_.vocab_size, d, tr.final_normed[t].data(), tr.logits[t].values.data());
    }
    return tr;
}

ParameterView Model::backward(const ForwardTrace& trace,
                              const std::vector<std::vector<double>>& dlogits) const {
    ParameterView grad = ParameterView::zeros_like(params_);
    accumulate_backward(trace, dlogits, grad);
    return grad;
}

ParameterView Model::backward(std::span<const int> tokens,
                              const std::vector<std::vector<double>>& dlogits) const {
    return backward(forward_trace(tokens), dlogits);
}

void Model::accumulate_backward(const ForwardTrace& trace,
                                const std::vector<std::vector<double>>& dlogits,
                                ParameterView& grad) const {
    const int64_t T = static_cast<int64_t>(trace.tokens.size());
    const int64_t d = cfg_.d_model;
    const int64_t heads = cfg_.n_heads;
    const int64_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (static_cast<int64_t>(dlogits.size()) != T)
        throw StructuralError("backward: dlogits row count does not match trace length");
    for (const auto& row : dlogits)
        if (static_cast<int64_t>(row.size()) != cfg_.vocab_size)
            throw StructuralError("backward: dlogits row width does not match vocab_size");
    if (grad.entries.size() != params_.entries.size())
        throw StructuralError("backward: gradient view does not match parameter view");

    const size_t final_norm_idx = 2 + static_cast<size_t>(cfg_.n_layers) * 8;
    const auto& g_final = params_.entries[final_norm_idx].values;
    const auto& unembed = params_.entries[final_norm_idx + 1].values;

    std::vector<std::vector<double>> dx(T, std::vector<double>(d, 0.0));
    std::vector<double> dn(d);

    // unembedding + final norm
    for (int64_t t = 0; t < T; ++t) {
        std::fill(dn.begin(), dn.end(), 0.0);
        matvec_backward(unembed, cfg_.vocab_size, d, trace.final_normed[t].data(),
                        dlogits[t].data(), grad.entries[final_norm_idx + 1].values.data(), dn.data());
        rmsnorm_backward(trace.final_in[t].data(), g_final.data(), d, trace.final_inv_rms[t],
                         dn.data(), grad.entries[final_norm_idx].values.data(), dx[t].data());
    }

    std::vector<double> dpre(4 * d), dact(4 * d), dh(d), dcat(d);
    std::vector<std::vector<double>> dq(T, std::vector<double>(d)), dk(dq), dv(dq);

    for (int64_t l = cfg_.n_layers - 1; l >= 0; --l) {
        const auto& lt = trace.layers[l];
        const size_t base = 2 + static_cast<size_t>(l) * 8;
        const auto& g_attn = params_.entries[base + 0].values;
        const auto& wq = params_.entries[base + 1].values;
        const auto& wk = params_.entries[base + 2].values;
        const auto& wv = params_.entries[base + 3].values;
        const auto& wo = params_.entries[base + 4].values;
        const auto& g_mlp = params_.entries[base + 5].values;
        const auto& w_in = params_.entries[base + 6].values;
        const auto& w_out = params_.entries[base + 7].values;

        // MLP block: x_out = mlp_in + w_out * gelu(w_in * norm(mlp_in))
        for (int64_t t = 0; t < T; ++t) {
            std::fill(dact.begin(), dact.end(), 0.0);
            matvec_backward(w_out, d, 4 * d, lt.mlp_act[t].data(), dx[t].data(),
                            grad.entries[base + 7].values.data(), dact.data());
            for (int64_t i = 0; i < 4 * d; ++i)
                dpre[i] = dact[i] * gelu_derivative(lt.mlp_pre[t][i]);
            std::fill(dh.begin(), dh.end(), 0.0);
            matvec_backward(w_in, 4 * d, d, lt.mlp_normed[t].data(), dpre.data(),
                            grad.entries[base + 6].values.data(), dh.data());
            // residual passthrough keeps dx[t]; norm path adds to it
            rmsnorm_backward(lt.mlp_in[t].data(), g_mlp.data(), d, lt.mlp_inv_rms[t],
                             dh.data(), grad.entries[base + 5].values.data(), dx[t].data());
        }

        // attention block: x_out = attn_in + wo * concat_heads(attn(q, k, v))
        for (auto& row : dq) std::fill(row.begin(), row.end(), 0.0);
        for (auto& row : dk) std::fill(row.begin(), row.end(), 0.0);
        for (auto& row : dv) std::fill(row.begin(), row.end(), 0.0);

        for (int64_t t = 0; t < T; ++t) {
            std::fill(dcat.begin(), dcat.end(), 0.0);
            matvec_backward(wo, d, d, lt.attn_cat[t].data(), dx[t].data(),
                            grad.entries[base + 4].values.data(), dcat.data());
            for (int64_t hh = 0; hh < heads; ++hh) {
                const int64_t off = hh * hd;
                const auto& w = lt.weights[t][hh];
                std::vector<double> dw(static_cast<size_t>(t + 1), 0.0);
                for (int64_t u = 0; u <= t; ++u) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < hd; ++j) {
                        acc += dcat[off + j] * lt.v[u][off + j];
                        dv[u][off + j] += w[u] * dcat[off + j];
                    }
                    dw[u] = acc;
                }
                double dot = 0.0;
                for (int64_t u = 0; u <= t; ++u) dot += w[u] * dw[u];
                for (int64_t u = 0; u <= t; ++u) {
                    const double ds = w[u] * (dw[u] - dot) * scale;
                    for (int64_t j = 0; j < hd; ++j) {
                        dq[t][off + j] += ds * lt.k[u][off + j];
                        dk[u][off + j] += ds * lt.q[t][off + j];
                    }
                }
            }
        }
        for (int64_t t = 0; t < T; ++t) {
            std::fill(dh.begin(), dh.end(), 0.0);
            matvec_backward(wq, d, d, lt.attn_normed[t].data(), dq[t].data(),
                            grad.entries[base + 1].values.data(), dh.data());
            matvec_backward(wk, d, d, lt.attn_normed[t].data(), dk[t].data(),
                            grad.entries[base + 2].values.data(), dh.data());
            matvec_backward(wv, d, d, lt.attn_normed[t].data(), dv[t].data(),
                            grad.entries[base + 3].values.data(), dh.data());
            rmsnorm_backward(lt.attn_in[t].data(), g_attn.data(), d, lt.attn_inv_rms[t],
                             dh.data(), grad.entries[base + 0].values.data(), dx[t].data());
        }
    }

    auto& dtok = grad.entries[0].values;
    auto& dpos = grad.entries[1].values;
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t i = 0; i < d; ++i) {
            dtok[trace.tokens[t] * d + i] += dx[t][i];
            dpos[t * d + i] += dx[t][i];
        }
    }
}

}  // namespace masters
