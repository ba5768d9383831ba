#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "masters/errors.hpp"
#include "masters/model.hpp"

namespace masters {

// Shared word-level vocabulary for every model in a run.
namespace vocab {

constexpr int kBos = 0;
constexpr int kEos = 1;

const std::vector<std::string>& tokens();
int size();
int id(std::string_view token);                     // VocabError on unknown token
int digit_id(int digit);                            // 0..9
std::vector<int> encode(std::string_view text);     // whitespace-separated tokens
std::string decode(std::span<const int> ids, bool skip_special = true);

}  // namespace vocab

enum class TaskFamily { modular_arithmetic, sequence_copy, sorting, parity };

const char* family_name(TaskFamily family);
TaskFamily family_from_name(std::string_view name);  // ConfigError on unknown name
const std::vector<TaskFamily>& all_families();

struct TaskInstance {
    std::string question_id;
    TaskFamily family{TaskFamily::modular_arithmetic};
    std::vector<int> prompt_tokens;  // starts with <bos>
    std::string question_text;       // prompt without specials
    std::string label;               // unique correct answer, space-joined tokens
    std::string split;               // "train" | "eval"
};

// Deterministic per seed; prompts within the returned list are unique.
std::vector<TaskInstance> generate_tasks(TaskFamily family, int count, int difficulty,
                                         uint64_t seed);

struct TaskSet {
    std::vector<TaskInstance> train;
    std::vector<TaskInstance> eval;

    const TaskInstance& by_id(std::string_view question_id) const;
    std::vector<std::string> train_ids() const;
};

// Per family: train_count + eval_count unique instances, split disjointly.
TaskSet generate_task_set(const std::vector<TaskFamily>& families, int train_count,
                          int eval_count, int difficulty, uint64_t seed);

void save_tasks(const TaskSet& tasks, const std::filesystem::path& path);
TaskSet load_tasks(const std::filesystem::path& path);

// Token ids a family's answers are drawn from; empty when open-ended.
std::vector<int> family_answer_token_ids(TaskFamily family);

struct EvalReport {
    std::map<std::string, double> per_family_accuracy;
    std::map<std::string, int> per_family_count;
    double overall_accuracy{0.0};
    int total_count{0};
};

// prompt tokens -> generated tokens (response only, may end with <eos>)
using Generator = std::function<std::vector<int>(std::span<const int>)>;

Generator make_greedy_generator(const Model& model, int max_new_tokens);
// Single-token decoding restricted to `answer_ids`; used where the answer
// space is closed.
Generator make_answer_constrained_generator(const Model& model,
                                            std::vector<int> answer_ids);

// Accuracy under rule_judge. DomainError on an empty instance list.
EvalReport evaluate(const Generator& generate, std::span<const TaskInstance> instances);

}  // namespace masters
