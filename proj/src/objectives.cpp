#include "masters/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace masters {

namespace {

constexpr double kLn2 = 0.6931471805599453;
constexpr double kAdvantageEps = 1e-8;

double log_add_exp(double a, double b) {
    const double hi = std::max(a, b);
    const double lo = std::min(a, b);
    if (hi == -std::numeric_limits<double>::infinity()) return hi;
    return hi + std::log1p(std::exp(lo - hi));
}

// KL(P || Q) from log-probs.
double kl_from_logprobs(std::span<const double> lp, std::span<const double> lq) {
    double acc = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) acc += std::exp(lp[i]) * (lp[i] - lq[i]);
    return std::max(acc, 0.0);
}

}  // namespace

double jsd_from_logprobs(std::span<const double> lp, std::span<const double> lq) {
    if (lp.size() != lq.size()) throw StructuralError("jsd: distribution size mismatch");
    double kl_p = 0.0, kl_q = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) {
        const double lm = log_add_exp(lp[i], lq[i]) - kLn2;
        kl_p += std::exp(lp[i]) * (lp[i] - lm);
        kl_q += std::exp(lq[i]) * (lq[i] - lm);
    }
    // clamp fp noise at the closed interval's edges
    return std::clamp(0.5 * (kl_p + kl_q), 0.0, kLn2);
}

double jsd(std::span<const double> p_logits, std::span<const double> q_logits) {
    if (p_logits.size() != q_logits.size()) throw StructuralError("jsd: logits size mismatch");
    return jsd_from_logprobs(log_softmax(p_logits), log_softmax(q_logits));
}

DivergenceReport sequence_divergence(const Model& teacher, const Model& student,
                                     std::span<const int> prompt,
                                     std::span<const int> response) {
    if (prompt.empty()) throw DomainError("sequence_divergence: empty prompt");
    if (response.empty()) throw DomainError("sequence_divergence: empty response");

    std::vector<int> sequence(prompt.begin(), prompt.end());
    sequence.insert(sequence.end(), response.begin(), response.end());
    const auto teacher_rows = teacher.forward(sequence);
    const auto student_rows = student.forward(sequence);

    DivergenceReport report;
    const size_t prompt_len = prompt.size();
    report.per_token.reserve(response.size());
    for (size_t j = 0; j < response.size(); ++j) {
        const auto& t_row = teacher_rows[prompt_len - 1 + j].values;
        const auto& s_row = student_rows[prompt_len - 1 + j].values;
        report.per_token.push_back(jsd(t_row, s_row));
        report.mean += report.per_token.back();
    }
    report.mean /= static_cast<double>(response.size());
    return report;
}

std::vector<double> distill_reward(std::span<const double> divergences) {
    if (divergences.size() < 2)
        throw DomainError("distill_reward: need a group of at least 2 divergences");
    const auto [min_it, max_it] = std::minmax_element(divergences.begin(), divergences.end());
    const double lo = *min_it, hi = *max_it;
    std::vector<double> rewards(divergences.size());
    if (hi == lo) {
        std::fill(rewards.begin(), rewards.end(), 0.5);
        return rewards;
    }
    for (size_t i = 0; i < divergences.size(); ++i)
        rewards[i] = (hi - divergences[i]) / (hi - lo);
    return rewards;
}

AdvantageGroup compute_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2)
        throw DomainError("advantages: need a group of at least 2 rewards");
    AdvantageGroup out;
    out.rewards.assign(rewards.begin(), rewards.end());
    out.advantages.resize(rewards.size(), 0.0);
    bool all_equal = true;
    for (double r : rewards) all_equal = all_equal && r == rewards[0];
    if (all_equal) return out;

    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double std_dev = std::sqrt(var / n);
    if (std_dev == 0.0) return out;
    for (size_t i = 0; i < rewards.size(); ++i)
        out.advantages[i] = (rewards[i] - mean) / (std_dev + kAdvantageEps);
    return out;
}

GroupScore score_group(const Model& student, const Model& teacher, const Model* reference,
                       std::span<const GroupRecord> group) {
    GroupScore score;
    score.records.reserve(group.size());
    for (const auto& record : group) {
        if (record.prompt.empty()) throw DomainError("score_group: empty prompt");
        if (record.response.empty()) throw DomainError("score_group: empty response");

        std::vector<int> sequence(record.prompt.begin(), record.prompt.end());
        sequence.insert(sequence.end(), record.response.begin(), record.response.end());

        RecordScore rs;
        rs.student_trace = student.forward_trace(sequence);
        const auto teacher_rows = teacher.forward(sequence);
        std::vector<LogitsRow> ref_rows;
        if (reference) ref_rows = reference->forward(sequence);

        const size_t prompt_len = record.prompt.size();
        const size_t t_resp = record.response.size();
        rs.student_logp.resize(t_resp);
        rs.teacher_logp.resize(t_resp);
        if (reference) {
            rs.ref_logp.resize(t_resp);
            rs.token_kl_ref.resize(t_resp);
        }
        rs.token_jsd.resize(t_resp);
        for (size_t j = 0; j < t_resp; ++j) {
            const size_t row = prompt_len - 1 + j;
            rs.student_logp[j] = log_softmax(rs.student_trace.logits[row].values);
            rs.teacher_logp[j] = log_softmax(teacher_rows[row].values);
            rs.token_jsd[j] = jsd_from_logprobs(rs.teacher_logp[j], rs.student_logp[j]);
            rs.divergence_mean += rs.token_jsd[j];
            if (reference) {
                rs.ref_logp[j] = log_softmax(ref_rows[row].values);
                rs.token_kl_ref[j] = kl_from_logprobs(rs.student_logp[j], rs.ref_logp[j]);
            }
        }
        rs.divergence_mean /= static_cast<double>(t_resp);
        score.records.push_back(std::move(rs));
    }
    return score;
}

LossAssembly assemble_objective(const GroupScore& score, std::span<const double> advantages,
                                double beta, bool grpo_enabled, bool jsd_enabled) {
    const size_t g = score.records.size();
    if (g == 0) throw StructuralError("assemble_objective: empty group");
    if (grpo_enabled && advantages.size() != g)
        throw StructuralError("assemble_objective: advantages misaligned with group");

    LossAssembly out;
    out.dlogits.resize(g);
    const double inv_g = 1.0 / static_cast<double>(g);

    for (size_t j = 0; j < g; ++j) {
        const auto& rs = score.records[j];
        const size_t t_resp = rs.student_logp.size();
        const size_t seq_len = rs.student_trace.tokens.size();
        const size_t prompt_len = seq_len - t_resp;
        const size_t v_size = rs.student_logp.front().size();
        const double inv_t = 1.0 / static_cast<double>(t_resp);

        auto& drows = out.dlogits[j];
        drows.assign(seq_len, std::vector<double>(v_size, 0.0));

        double record_kl = 0.0;
        double record_jsd = 0.0;
        for (size_t t = 0; t < t_resp; ++t) {
            const auto& ls = rs.student_logp[t];
            auto& dz = drows[prompt_len - 1 + t];

            if (jsd_enabled) {
                record_jsd += rs.token_jsd[t];
                const auto& lt = rs.teacher_logp[t];
                // dJSD/dz_k = 0.5 p_k ((ls_k - lm_k) - KL(P_S || M))
                double kl_sm = 0.0;
                std::vector<double> delta(v_size);
                for (size_t k = 0; k < v_size; ++k) {
                    const double lm = log_add_exp(ls[k], lt[k]) - kLn2;
                    delta[k] = ls[k] - lm;
                    kl_sm += std::exp(ls[k]) * delta[k];
                }
                const double coef = inv_g * inv_t * 0.5;
                for (size_t k = 0; k < v_size; ++k)
                    dz[k] += coef * std::exp(ls[k]) * (delta[k] - kl_sm);
            }

            if (grpo_enabled) {
                const int y = rs.student_trace.tokens[prompt_len + t];
                const double adv_coef = -inv_g * inv_t * advantages[j];
                for (size_t k = 0; k < v_size; ++k) {
                    const double p = std::exp(ls[k]);
                    dz[k] += adv_coef * ((static_cast<int>(k) == y ? 1.0 : 0.0) - p);
                }
                const double kl_t = rs.token_kl_ref[t];
                record_kl += kl_t;
                const auto& lr = rs.ref_logp[t];
                const double kl_coef = inv_g * inv_t * beta;
                for (size_t k = 0; k < v_size; ++k)
                    dz[k] += kl_coef * std::exp(ls[k]) * ((ls[k] - lr[k]) - kl_t);
            }
        }

        if (grpo_enabled) {
            out.values.loss_grpo += -inv_g * (advantages[j] - beta * record_kl * inv_t);
            out.values.kl_ref += inv_g * record_kl * inv_t;
        }
        if (jsd_enabled) out.values.loss_jsd += inv_g * record_jsd * inv_t;
    }
    out.values.loss_total = out.values.loss_grpo + out.values.loss_jsd;
    return out;
}

ObjectiveResult final_objective(const Model& student, const Model& teacher,
                                const Model* reference, std::span<const GroupRecord> group,
                                std::span<const double> advantages, double beta,
                                bool grpo_enabled, bool jsd_enabled) {
    if (grpo_enabled && !reference)
        throw StructuralError("final_objective: GRPO needs a reference policy");
    const GroupScore score = score_group(student, teacher, grpo_enabled ? reference : nullptr, group);
    LossAssembly assembly = assemble_objective(score, advantages, beta, grpo_enabled, jsd_enabled);

    ObjectiveResult result;
    result.values = assembly.values;
    result.grad = ParameterView::zeros_like(student.params());
    result.divergences.reserve(score.records.size());
    for (size_t j = 0; j < score.records.size(); ++j) {
        student.accumulate_backward(score.records[j].student_trace, assembly.dlogits[j],
                                    result.grad);
        result.divergences.push_back(score.records[j].divergence_mean);
    }
    return result;
}

FrozenGroupContext freeze_group_context(const GroupScore& score) {
    FrozenGroupContext frozen;
    for (const auto& rs : score.records) {
        frozen.teacher_logp.push_back(rs.teacher_logp);
        frozen.ref_logp.push_back(rs.ref_logp);
        const size_t t_resp = rs.student_logp.size();
        const size_t prompt_len = rs.student_trace.tokens.size() - t_resp;
        std::vector<double> baseline(t_resp);
        for (size_t t = 0; t < t_resp; ++t)
            baseline[t] = rs.student_logp[t][rs.student_trace.tokens[prompt_len + t]];
        frozen.baseline_logp.push_back(std::move(baseline));
    }
    return frozen;
}

double final_objective_value(const Model& student, std::span<const GroupRecord> group,
                             const FrozenGroupContext& frozen,
                             std::span<const double> advantages, double beta,
                             bool grpo_enabled, bool jsd_enabled) {
    const size_t g = group.size();
    const double inv_g = 1.0 / static_cast<double>(g);
    double loss = 0.0;

    for (size_t j = 0; j < g; ++j) {
        const auto& record = group[j];
        std::vector<int> sequence(record.prompt.begin(), record.prompt.end());
        sequence.insert(sequence.end(), record.response.begin(), record.response.end());
        const auto rows = student.forward(sequence);

        const size_t prompt_len = record.prompt.size();
        const size_t t_resp = record.response.size();
        const double inv_t = 1.0 / static_cast<double>(t_resp);

        double ratio_sum = 0.0, kl_sum = 0.0, jsd_sum = 0.0;
        for (size_t t = 0; t < t_resp; ++t) {
            const auto ls = log_softmax(rows[prompt_len - 1 + t].values);
            if (grpo_enabled) {
                const int y = record.response[t];
                ratio_sum += std::exp(ls[y] - frozen.baseline_logp[j][t]);
                kl_sum += kl_from_logprobs(ls, frozen.ref_logp[j][t]);
            }
            if (jsd_enabled) jsd_sum += jsd_from_logprobs(frozen.teacher_logp[j][t], ls);
        }
        if (grpo_enabled)
            loss += -inv_g * (advantages[j] * ratio_sum * inv_t - beta * kl_sum * inv_t);
        if (jsd_enabled) loss += inv_g * jsd_sum * inv_t;
    }
    return loss;
}

}  // namespace masters
