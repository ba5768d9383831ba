#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "masters/model.hpp"
#include "masters/sampling.hpp"
#include "masters/tasks.hpp"

namespace masters {

// Runs body(0..count-1) across up to `workers` threads. Output written by
// index stays deterministic regardless of the worker count.
void parallel_indexed(int64_t count, int workers, const std::function<void(int64_t)>& body);

struct Rewards {
    double acc{0.0};
    double distill{0.0};
    double total{0.0};
};

// One pre-generated response. (question_id, teacher_id, stage_index, source,
// sample_index) identifies a record; token fields are immutable once written.
struct ResponseRecord {
    std::string question_id;
    std::string teacher_id;
    int stage_index{0};
    double stage_ratio{0.0};
    std::string source;  // "teacher" | "student"
    int sample_index{0};
    std::vector<int> tokens;
    std::vector<double> gen_logprobs;
    std::optional<double> judge_score;
    std::optional<std::string> judge_rationale;
    std::optional<double> distill_divergence;
    std::optional<Rewards> rewards;

    std::string key() const;
};

struct GenerationGroup {
    std::string question_id;
    std::string teacher_id;
    int stage_index{0};
    double stage_ratio{0.0};
    std::vector<const ResponseRecord*> records;
};

struct Judgment {
    std::string key;
    double score{0.0};
    std::optional<std::string> rationale;
};

// Directory layout: <dir>/records.jsonl (one record per line) plus an
// optional append-only <dir>/judgments.jsonl with score revisions.
class RolloutStore {
public:
    static void write_records(const std::filesystem::path& dir,
                              const std::vector<ResponseRecord>& records);
    static void append_judgments(const std::filesystem::path& dir,
                                 const std::vector<Judgment>& judgments);
    static bool has_records(const std::filesystem::path& dir);
    static bool has_judgments(const std::filesystem::path& dir);

    static RolloutStore load(const std::filesystem::path& dir);

    const std::vector<ResponseRecord>& records() const { return records_; }
    std::vector<ResponseRecord>& records() { return records_; }
    int judged_count() const;

    // Records of one (question, teacher, stage) cell, in stored order.
    GenerationGroup group(std::string_view question_id, std::string_view teacher_id,
                          int stage_index) const;

private:
    std::vector<ResponseRecord> records_;
    std::map<std::string, size_t> index_;
};

struct StagedTeacher {
    std::string id;
    int stage_index{0};
    double ratio{0.0};
    Model model;
};

struct PregenerateSpec {
    std::vector<const TaskInstance*> questions;  // typically the train split
    const std::vector<StagedTeacher>* staged_teachers{nullptr};
    const Model* student{nullptr};
    SamplingConfig sampling;
    int student_per_group{4};
    int teacher_per_group{4};
    uint64_t seed{0};
    // When set, the student's responses are re-sampled per stage instead of
    // reusing the initial pre-generation.
    bool refresh_student_per_stage{false};
    int workers{1};
};

// One group per (question, staged teacher); records ordered student-first.
// Reproducible record-by-record from (seed, question_id, source, sample_index)
// (plus the stage for teacher records and, when refreshing, student records).
std::vector<ResponseRecord> pregenerate(const PregenerateSpec& spec);

}  // namespace masters
