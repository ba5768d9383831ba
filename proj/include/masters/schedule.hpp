#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "masters/errors.hpp"

namespace masters {

// Staged decay of the masking ratio: M = r_max / s + 1 stages whose ratios
// step down by s and end at exactly 0. Stage index for iteration i (1-based)
// is min(floor((i - 1) * M / I), M - 1); the literal floor(i * M / I) would
// step past the final stage on the last iteration, while this form plateaus
// at ratio 0.
struct Stage {
    int index{0};
    double ratio{0.0};
    int64_t first_iteration{0};  // inclusive, 1-based
    int64_t last_iteration{0};   // inclusive
};

struct StageSchedule {
    double r_max{0.0};
    double decrement{0.0};  // s
    int64_t total_iterations{0};
    int stage_count{0};  // M
    std::vector<Stage> stages;

    // ConfigError when r_max is not an integer multiple of s or I < M.
    static StageSchedule make(double r_max, double decrement, int64_t iterations);

    double ratio_at(int64_t iteration) const;  // DomainError outside [1, I]
    int stage_index_at(int64_t iteration) const;
};

// One row per iteration of the whole run: which teacher, at which mask
// ratio, reading which data shard.
struct PlanEntry {
    int64_t iteration{0};
    std::string teacher_id;
    double ratio{0.0};
    int stage_index{0};  // within the teacher's sweep
    int shard_id{0};     // global shard index
};

struct TeacherSweep {
    std::string teacher_id;
    StageSchedule schedule;
};

struct StagePlan {
    std::vector<PlanEntry> entries;  // entries[i - 1] is iteration i
    int shard_count{0};

    const PlanEntry& at(int64_t iteration) const;
    void write_csv(const std::filesystem::path& path) const;
};

// Concatenates per-teacher sweeps; budgets are the sweeps' total_iterations.
// ConfigError on an empty curriculum.
StagePlan stage_plan(const std::vector<TeacherSweep>& sweeps);

// Seeded shuffle of question ids into `shards` near-equal contiguous chunks.
std::vector<std::vector<std::string>> make_shards(std::vector<std::string> question_ids,
                                                  int shards, uint64_t seed);

}  // namespace masters
