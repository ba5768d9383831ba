#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "masters/config.hpp"
#include "masters/objectives.hpp"
#include "masters/schedule.hpp"
#include "masters/store.hpp"
#include "masters/tasks.hpp"

namespace masters {

struct MetricRow {
    int64_t iteration{0};
    std::string teacher_id;
    double ratio{0.0};
    double loss_total{0.0};
    double loss_grpo{0.0};
    double loss_jsd{0.0};
    double kl_ref{0.0};
    std::optional<double> mean_reward_acc;
    std::optional<double> mean_reward_distill;
    std::optional<double> eval_accuracy;
};

void write_metrics_csv(std::span<const MetricRow> rows, const std::filesystem::path& path);

// One decoupled-weight-decay adaptive-moment step; `step` is 1-based for the
// bias correction.
void adamw_update(ParameterView& params, ParameterView& m1, ParameterView& m2,
                  const ParameterView& grad, const OptimizerConfig& opt, int64_t step);

Model make_initial_student(const RunConfig& config);

// The distillation question pool: the per-family train-split prefix of size
// distill_count (whole split when 0).
std::vector<const TaskInstance*> distill_pool(const RunConfig& config, const TaskSet& tasks);

struct TrainState {
    Model student;
    ParameterView m1, m2;  // first/second moments, aligned with student params
    Model reference;       // frozen policy snapshot
    int64_t iteration{0};
    uint64_t rng_state{0};
    std::vector<MetricRow> metrics;
};

void save_train_state(const TrainState& state, const std::filesystem::path& dir);
TrainState load_train_state(const std::filesystem::path& dir);

struct GroupBatch {
    std::vector<GroupRecord> records;
    std::vector<double> acc_rewards;  // aligned with records; empty without rewards
};

struct RunResult {
    std::filesystem::path checkpoint_path;
    std::filesystem::path metrics_path;
    EvalReport final_eval;
};

// Owns everything one training run needs: tasks, stage plan, staged teacher
// cache, shards, and (for gen data) the judged rollout store.
class Trainer {
public:
    explicit Trainer(RunConfig config);

    const StagePlan& plan() const { return plan_; }
    const TaskSet& tasks() const { return tasks_; }
    const RunConfig& config() const { return config_; }

    TrainState init_state() const;
    GroupBatch batch_for(const PlanEntry& entry) const;
    const Model& teacher_for(const PlanEntry& entry);

    // Runs iteration state.iteration + 1. Halts with NumericError on a
    // non-finite loss after persisting the state.
    MetricRow step(TrainState& state);

    RunResult run();  // full loop + artifacts under run_dir(mode)

    EvalReport evaluate_student(const Model& student, int sample_limit = 0) const;

private:
    void verify_store() const;

    RunConfig config_;
    TaskSet tasks_;
    std::map<std::string, const TaskInstance*> by_id_;
    StagePlan plan_;
    std::vector<TeacherSweep> sweeps_;
    std::map<std::string, std::vector<std::vector<std::string>>> shards_;  // teacher -> stage -> qids
    std::optional<RolloutStore> store_;
    std::map<std::string, Model> teacher_cache_;  // staged checkpoint path -> model
};

struct PretrainResult {
    Model model;
    double heldout_accuracy{0.0};
    int64_t steps_run{0};
};

// Plain next-token training of a task model (used to produce teachers);
// stops early once held-out accuracy reaches the target.
PretrainResult pretrain_model(const ModelConfig& model_config, const TaskSet& tasks,
                              const PretrainConfig& pretrain, uint64_t seed);

}  // namespace masters
