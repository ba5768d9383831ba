#pragma once

#include <span>
#include <vector>

#include "masters/model.hpp"

namespace masters {

// Jensen-Shannon divergence between two next-token distributions given as
// raw logits; natural log, so the range is [0, ln 2]. StructuralError on a
// vocab-size mismatch.
double jsd(std::span<const double> p_logits, std::span<const double> q_logits);
double jsd_from_logprobs(std::span<const double> lp, std::span<const double> lq);

struct DivergenceReport {
    std::vector<double> per_token;
    double mean{0.0};
};

// Teacher-forces both models on prompt + response and reports the JSD at
// every response-token position. LengthError when the sequence overflows a
// context.
DivergenceReport sequence_divergence(const Model& teacher, const Model& student,
                                     std::span<const int> prompt,
                                     std::span<const int> response);

// Reverse min-max normalization of a group's divergences: the smallest
// divergence maps to 1.0, the largest to 0.0; an all-equal group maps to 0.5
// (no discriminative signal). DomainError when fewer than 2 entries.
std::vector<double> distill_reward(std::span<const double> divergences);

struct AdvantageGroup {
    std::vector<double> rewards;
    std::vector<double> advantages;
};

// Group-normalized advantages (R - mean) / (population std + 1e-8); an
// all-equal group yields the zero vector. DomainError when fewer than 2.
AdvantageGroup compute_advantages(std::span<const double> rewards);

struct GroupRecord {
    std::vector<int> prompt;
    std::vector<int> response;
};

// Everything teacher-forced scoring produces for one record; the student
// trace is retained so gradient assembly can backpropagate.
struct RecordScore {
    ForwardTrace student_trace;
    std::vector<std::vector<double>> student_logp;  // [T_resp][V]
    std::vector<std::vector<double>> teacher_logp;  // [T_resp][V]
    std::vector<std::vector<double>> ref_logp;      // [T_resp][V], empty without a reference
    std::vector<double> token_jsd;                  // [T_resp]
    std::vector<double> token_kl_ref;               // [T_resp], empty without a reference
    double divergence_mean{0.0};
};

struct GroupScore {
    std::vector<RecordScore> records;
};

GroupScore score_group(const Model& student, const Model& teacher, const Model* reference,
                       std::span<const GroupRecord> group);

struct ObjectiveBreakdown {
    double loss_total{0.0};
    double loss_grpo{0.0};
    double loss_jsd{0.0};
    double kl_ref{0.0};  // mean per-token KL(student || reference), diagnostics
};

struct LossAssembly {
    ObjectiveBreakdown values;
    // dLoss/dlogits per record over the full sequence (prompt rows zero).
    std::vector<std::vector<std::vector<double>>> dlogits;
};

// loss_grpo = -(1/G) sum_j [ mean_t(ratio * A_j) - beta * mean_t KL_t ]
// with ratio == 1 in value and exp(logp - frozen logp) in gradient;
// loss_jsd  =  (1/G) sum_j mean_t JSD_t.
// StructuralError when advantages are misaligned with the group.
LossAssembly assemble_objective(const GroupScore& score, std::span<const double> advantages,
                                double beta, bool grpo_enabled, bool jsd_enabled);

struct ObjectiveResult {
    ObjectiveBreakdown values;
    ParameterView grad;
    std::vector<double> divergences;  // per record mean JSD
};

// Unified loss + gradient with respect to the student only.
ObjectiveResult final_objective(const Model& student, const Model& teacher,
                                const Model* reference, std::span<const GroupRecord> group,
                                std::span<const double> advantages, double beta,
                                bool grpo_enabled, bool jsd_enabled);

// Frozen center-point context for derivative-free re-evaluation: teacher and
// reference scores do not move with the student, and the policy-ratio
// baseline stays at the center point's log-probs.
struct FrozenGroupContext {
    std::vector<std::vector<std::vector<double>>> teacher_logp;
    std::vector<std::vector<std::vector<double>>> ref_logp;
    std::vector<std::vector<double>> baseline_logp;  // per record, chosen-token log-probs
};

FrozenGroupContext freeze_group_context(const GroupScore& score);

double final_objective_value(const Model& student, std::span<const GroupRecord> group,
                             const FrozenGroupContext& frozen,
                             std::span<const double> advantages, double beta,
                             bool grpo_enabled, bool jsd_enabled);

}  // namespace masters
