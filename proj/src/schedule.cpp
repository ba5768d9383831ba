#include "masters/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "masters/rng.hpp"

namespace masters {

StageSchedule StageSchedule::make(double r_max, double decrement, int64_t iterations) {
    if (r_max < 0.0 || r_max > 1.0)
        throw ConfigError("schedule: r_max must lie in [0, 1]");
    int steps = 0;
    if (r_max > 0.0) {
        if (decrement <= 0.0) throw ConfigError("schedule: decrement s must be positive");
        const double k = r_max / decrement;
        steps = static_cast<int>(std::llround(k));
        if (std::fabs(k - static_cast<double>(steps)) > 1e-9 || steps < 1)
            throw ConfigError("schedule: r_max must be an integer multiple of s");
    }
    const int stage_count = steps + 1;
    if (iterations < stage_count)
        throw ConfigError("schedule: iterations must be >= stage count " + std::to_string(stage_count));

    StageSchedule sched;
    sched.r_max = r_max;
    sched.decrement = decrement;
    sched.total_iterations = iterations;
    sched.stage_count = stage_count;
    sched.stages.reserve(stage_count);
    const int64_t M = stage_count;
    for (int k = 0; k < stage_count; ++k) {
        Stage stage;
        stage.index = k;
        // s * (M - 1 - k) equals r_max - s*k and lands on exactly 0.0 last.
        stage.ratio = decrement * static_cast<double>(stage_count - 1 - k);
        const auto ceil_div = [](int64_t a, int64_t b) { return (a + b - 1) / b; };
        stage.first_iteration = ceil_div(static_cast<int64_t>(k) * iterations, M) + 1;
        stage.last_iteration = ceil_div(static_cast<int64_t>(k + 1) * iterations, M);
        sched.stages.push_back(stage);
    }
    return sched;
}

int StageSchedule::stage_index_at(int64_t iteration) const {
    if (iteration < 1 || iteration > total_iterations)
        throw DomainError("schedule: iteration " + std::to_string(iteration) + " outside [1, " +
                          std::to_string(total_iterations) + "]");
    const int64_t raw = (iteration - 1) * static_cast<int64_t>(stage_count) / total_iterations;
    return static_cast<int>(std::min<int64_t>(raw, stage_count - 1));
}

double StageSchedule::ratio_at(int64_t iteration) const {
    return stages[stage_index_at(iteration)].ratio;
}

const PlanEntry& StagePlan::at(int64_t iteration) const {
    if (iteration < 1 || iteration > static_cast<int64_t>(entries.size()))
        throw DomainError("stage plan: iteration " + std::to_string(iteration) + " out of range");
    return entries[static_cast<size_t>(iteration - 1)];
}

void StagePlan::write_csv(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw MissingArtifactError("cannot write " + path.string());
    out << "iteration,teacher_id,ratio,stage,shard\n";
    char buf[64];
    for (const auto& e : entries) {
        std::snprintf(buf, sizeof(buf), "%.4f", e.ratio);
        out << e.iteration << ',' << e.teacher_id << ',' << buf << ',' << e.stage_index << ','
            << e.shard_id << '\n';
    }
}

StagePlan stage_plan(const std::vector<TeacherSweep>& sweeps) {
    if (sweeps.empty()) throw ConfigError("stage plan: curriculum is empty");

    StagePlan plan;
    int64_t iteration = 0;
    int shard_base = 0;
    for (const auto& sweep : sweeps) {
        for (int64_t local = 1; local <= sweep.schedule.total_iterations; ++local) {
            PlanEntry entry;
            entry.iteration = ++iteration;
            entry.teacher_id = sweep.teacher_id;
            entry.stage_index = sweep.schedule.stage_index_at(local);
            entry.ratio = sweep.schedule.stages[entry.stage_index].ratio;
            entry.shard_id = shard_base + entry.stage_index;
            plan.entries.push_back(std::move(entry));
        }
        shard_base += sweep.schedule.stage_count;
    }
    plan.shard_count = shard_base;
    return plan;
}

std::vector<std::vector<std::string>> make_shards(std::vector<std::string> question_ids,
                                                  int shards, uint64_t seed) {
    if (shards < 1) throw DomainError("make_shards: shard count must be >= 1");
    if (question_ids.empty()) throw DomainError("make_shards: no question ids");
    std::sort(question_ids.begin(), question_ids.end());
    Rng rng(seed);
    rng.shuffle(question_ids);

    std::vector<std::vector<std::string>> out(static_cast<size_t>(shards));
    const int64_t n = static_cast<int64_t>(question_ids.size());
    for (int k = 0; k < shards; ++k) {
        const int64_t first = k * n / shards;
        const int64_t last = (k + 1) * n / shards;
        out[k].assign(question_ids.begin() + first, question_ids.begin() + last);
    }
    return out;
}

}  // namespace masters
