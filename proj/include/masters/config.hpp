#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "masters/model.hpp"
#include "masters/sampling.hpp"
#include "masters/tasks.hpp"

namespace masters {

struct OptimizerConfig {
    double learning_rate{1e-6};
    double beta1{0.9};
    double beta2{0.999};
    double weight_decay{0.01};
    double eps{1e-8};
};

struct TeacherSpec {
    std::string id;
    ModelConfig model;   // vocab_size and seed filled in by the loader
    double r_max{0.2};
    int64_t iterations{0};  // this teacher's share of the run
};

struct PretrainConfig {
    int64_t steps{3000};
    int batch{16};
    double learning_rate{3e-3};
    double target_accuracy{0.9};
    int64_t eval_every{250};
};

struct RunConfig {
    uint64_t seed{1};
    std::string mode{"masters"};  // naive | progressive | masters
    std::filesystem::path workdir{"work"};

    std::vector<TaskFamily> families;
    int train_count{64};
    int eval_count{64};
    int difficulty{1};
    // questions (per family) drawn into the distillation pool; 0 = all of train
    int distill_count{0};

    ModelConfig student;
    std::vector<TeacherSpec> teachers;

    double decrement{0.05};  // s
    int64_t iterations{0};   // I; 0 lets the teacher budgets define it
    int group_size{8};       // G
    int mix_student{4};
    int mix_teacher{4};

    SamplingConfig sampling;
    std::string judge{"rule"};  // rule | external
    OptimizerConfig optimizer;
    double grpo_beta{0.1};

    std::optional<bool> rewards_override;
    std::optional<std::string> data_source_override;  // "gen" | "labels"
    bool student_refresh_per_stage{false};
    bool reference_refresh_per_stage{false};

    int64_t eval_period{0};  // 0 = only after training
    int eval_sample{0};      // 0 = whole eval split
    int workers{1};

    PretrainConfig pretrain;

    // Mode presets, honoring explicit overrides.
    bool rewards_enabled() const;
    std::string data_source() const;
    double effective_r_max(const TeacherSpec& teacher) const;  // 0 under naive

    // Artifact layout under workdir.
    std::filesystem::path tasks_path() const { return workdir / "tasks.jsonl"; }
    std::filesystem::path teachers_dir() const { return workdir / "teachers"; }
    std::filesystem::path masks_dir() const { return workdir / "masks"; }
    std::filesystem::path store_dir() const { return workdir / "store"; }
    std::filesystem::path report_dir() const { return workdir / "report"; }
    std::filesystem::path schedule_csv_path() const { return workdir / "schedule.csv"; }
    std::filesystem::path teacher_base_path(const std::string& id) const;
    std::filesystem::path staged_teacher_path(const std::string& id, double ratio) const;
    std::filesystem::path mask_path(const std::string& id, double ratio) const;
    std::filesystem::path run_dir(const std::string& run_mode) const;

    void validate() const;  // ConfigError naming the offending field
};

std::string format_ratio(double ratio);  // fixed "%.4f" used in artifact names

// Loads, applies `--set dotted.path=value` overrides, validates.
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides = {});
RunConfig config_from_json(nlohmann::json doc);
nlohmann::json config_to_json(const RunConfig& config);

void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace masters
