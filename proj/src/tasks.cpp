#include "masters/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "masters/judge.hpp"
#include "masters/rng.hpp"

namespace masters {

namespace vocab {

const std::vector<std::string>& tokens() {
    static const std::vector<std::string> table = [] {
        std::vector<std::string> t{"<bos>", "<eos>"};
        for (int d = 0; d <= 9; ++d) t.push_back(std::to_string(d));
        for (char c = 'a'; c <= 'h'; ++c) t.push_back(std::string(1, c));
        for (const char* w : {"(", ")", "+", "mod", "copy", "sort", "parity", "="})
            t.push_back(w);
        return t;
    }();
    return table;
}

int size() { return static_cast<int>(tokens().size()); }

int id(std::string_view token) {
    const auto& table = tokens();
    for (size_t i = 0; i < table.size(); ++i)
        if (table[i] == token) return static_cast<int>(i);
    throw VocabError("unknown token: " + std::string(token));
}

int digit_id(int digit) {
    if (digit < 0 || digit > 9) throw VocabError("digit out of range");
    return 2 + digit;
}

std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    std::istringstream stream{std::string(text)};
    std::string word;
    while (stream >> word) out.push_back(id(word));
    return out;
}

std::string decode(std::span<const int> ids, bool skip_special) {
    const auto& table = tokens();
    std::string out;
    for (int t : ids) {
        if (t < 0 || t >= size()) throw VocabError("token id out of range: " + std::to_string(t));
        if (skip_special && (t == kBos || t == kEos)) continue;
        if (!out.empty()) out.push_back(' ');
        out += table[static_cast<size_t>(t)];
    }
    return out;
}

}  // namespace vocab

const char* family_name(TaskFamily family) {
    switch (family) {
        case TaskFamily::modular_arithmetic: return "modular-arithmetic";
        case TaskFamily::sequence_copy: return "sequence-copy";
        case TaskFamily::sorting: return "sorting";
        case TaskFamily::parity: return "parity";
    }
    return "unknown";
}

TaskFamily family_from_name(std::string_view name) {
    for (TaskFamily family : all_families())
        if (name == family_name(family)) return family;
    throw ConfigError("unknown task family: " + std::string(name));
}

const std::vector<TaskFamily>& all_families() {
    static const std::vector<TaskFamily> families{
        TaskFamily::modular_arithmetic, TaskFamily::sequence_copy, TaskFamily::sorting,
        TaskFamily::parity};
    return families;
}

namespace {

const char* family_short_name(TaskFamily family) {
    switch (family) {
        case TaskFamily::modular_arithmetic: return "mod";
        case TaskFamily::sequence_copy: return "copy";
        case TaskFamily::sorting: return "sort";
        case TaskFamily::parity: return "parity";
    }
    return "unknown";
}

struct DraftInstance {
    std::vector<std::string> prompt_words;  // without specials, ends with "="
    std::vector<std::string> label_words;
};

DraftInstance draw_instance(TaskFamily family, int difficulty, Rng& rng) {
    DraftInstance draft;
    switch (family) {
        case TaskFamily::modular_arithmetic: {
            // difficulty widens the operand range and count
            const int operands = std::min(1 + difficulty, 4);
            const int operand_range = std::min(6 + difficulty, 10);
            const int modulus = 2 + static_cast<int>(rng.next_below(8));
            int sum = 0;
            draft.prompt_words.push_back("(");
            for (int i = 0; i < operands; ++i) {
                if (i > 0) draft.prompt_words.push_back("+");
                const int value = static_cast<int>(rng.next_below(operand_range));
                sum += value;
                draft.prompt_words.push_back(std::to_string(value));
            }
            draft.prompt_words.push_back(")");
            draft.prompt_words.push_back("mod");
            draft.prompt_words.push_back(std::to_string(modulus));
            draft.label_words.push_back(std::to_string(sum % modulus));
            break;
        }
        case TaskFamily::sequence_copy: {
            const int len = 2 + static_cast<int>(rng.next_below(2 + difficulty));
            draft.prompt_words.push_back("copy");
            for (int i = 0; i < len; ++i) {
                const char c = static_cast<char>('a' + rng.next_below(8));
                draft.prompt_words.push_back(std::string(1, c));
                draft.label_words.push_back(std::string(1, c));
            }
            break;
        }
        case TaskFamily::sorting: {
            const int len = 2 + static_cast<int>(rng.next_below(2 + difficulty));
            draft.prompt_words.push_back("sort");
            std::vector<int> values;
            for (int i = 0; i < len; ++i) {
                const int value = static_cast<int>(rng.next_below(10));
                values.push_back(value);
                draft.prompt_words.push_back(std::to_string(value));
            }
            std::sort(values.begin(), values.end());
            for (int value : values) draft.label_words.push_back(std::to_string(value));
            break;
        }
        case TaskFamily::parity: {
            // 4-way: answer is the symbol sum mod 4; difficulty widens the
            // alphabet from bits to {0..3} and lengthens the string
            const int alphabet = difficulty >= 2 ? 4 : 2;
            const int len = 6 + static_cast<int>(rng.next_below(2 + difficulty));
            draft.prompt_words.push_back("parity");
            int sum = 0;
            for (int i = 0; i < len; ++i) {
                const int value = static_cast<int>(rng.next_below(alphabet));
                sum += value;
                draft.prompt_words.push_back(std::to_string(value));
            }
            draft.label_words.push_back(std::to_string(sum % 4));
            break;
        }
    }
    draft.prompt_words.push_back("=");
    return draft;
}

TaskInstance finish_instance(TaskFamily family, const DraftInstance& draft) {
    TaskInstance instance;
    instance.family = family;
    instance.prompt_tokens.push_back(vocab::kBos);
    std::string text;
    for (const auto& word : draft.prompt_words) {
        instance.prompt_tokens.push_back(vocab::id(word));
        if (!text.empty()) text.push_back(' ');
        text += word;
    }
    instance.question_text = std::move(text);
    std::string label;
    for (const auto& word : draft.label_words) {
        if (!label.empty()) label.push_back(' ');
        label += word;
    }
    instance.label = std::move(label);
    return instance;
}

}  // namespace

std::vector<TaskInstance> generate_tasks(TaskFamily family, int count, int difficulty,
                                         uint64_t seed) {
    if (count < 1) throw DomainError("generate_tasks: count must be >= 1");
    if (difficulty < 1) throw ConfigError("generate_tasks: difficulty must be >= 1");

    Rng rng(seed);
    std::vector<TaskInstance> out;
    std::set<std::vector<int>> seen;
    const int64_t max_attempts = static_cast<int64_t>(count) * 400 + 10000;
    int64_t attempts = 0;
    while (static_cast<int>(out.size()) < count) {
        if (++attempts > max_attempts)
            throw ConfigError(std::string("generate_tasks: could not draw ") +
                              std::to_string(count) + " unique " + family_name(family) +
                              " instances; lower the count or raise the difficulty");
        TaskInstance instance = finish_instance(family, draw_instance(family, difficulty, rng));
        if (!seen.insert(instance.prompt_tokens).second) continue;
        instance.question_id = std::string(family_short_name(family)) + "-" +
                               std::to_string(out.size());
        out.push_back(std::move(instance));
    }
    return out;
}

const TaskInstance& TaskSet::by_id(std::string_view question_id) const {
    for (const auto& t : train)
        if (t.question_id == question_id) return t;
    for (const auto& t : eval)
        if (t.question_id == question_id) return t;
    throw MissingArtifactError("unknown question id: " + std::string(question_id));
}

std::vector<std::string> TaskSet::train_ids() const {
    std::vector<std::string> ids;
    ids.reserve(train.size());
    for (const auto& t : train) ids.push_back(t.question_id);
    return ids;
}

TaskSet generate_task_set(const std::vector<TaskFamily>& families, int train_count,
                          int eval_count, int difficulty, uint64_t seed) {
    if (families.empty()) throw ConfigError("generate_task_set: no task families");
    TaskSet set;
    for (TaskFamily family : families) {
        auto instances = generate_tasks(family, train_count + eval_count, difficulty,
                                        derive_seed(seed, "tasks", family_name(family)));
        for (int i = 0; i < train_count; ++i) {
            auto& inst = instances[static_cast<size_t>(i)];
            inst.question_id =
                std::string(family_short_name(family)) + "-train-" + std::to_string(i);
            inst.split = "train";
            set.train.push_back(std::move(inst));
        }
        for (int i = 0; i < eval_count; ++i) {
            auto& inst = instances[static_cast<size_t>(train_count + i)];
            inst.question_id =
                std::string(family_short_name(family)) + "-eval-" + std::to_string(i);
            inst.split = "eval";
            set.eval.push_back(std::move(inst));
        }
    }
    return set;
}

void save_tasks(const TaskSet& tasks, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw MissingArtifactError("cannot write " + path.string());
    auto dump = [&](const TaskInstance& t) {
        nlohmann::json j;
        j["question_id"] = t.question_id;
        j["family"] = family_name(t.family);
        j["prompt_tokens"] = t.prompt_tokens;
        j["question_text"] = t.question_text;
        j["label"] = t.label;
        j["split"] = t.split;
        out << j.dump() << '\n';
    };
    for (const auto& t : tasks.train) dump(t);
    for (const auto& t : tasks.eval) dump(t);
}

TaskSet load_tasks(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open tasks file " + path.string());
    TaskSet set;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        TaskInstance t;
        t.question_id = j.at("question_id").get<std::string>();
        t.family = family_from_name(j.at("family").get<std::string>());
        t.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
        t.question_text = j.at("question_text").get<std::string>();
        t.label = j.at("label").get<std::string>();
        t.split = j.at("split").get<std::string>();
        (t.split == "eval" ? set.eval : set.train).push_back(std::move(t));
    }
    return set;
}

std::vector<int> family_answer_token_ids(TaskFamily family) {
    std::vector<int> ids;
    switch (family) {
        case TaskFamily::modular_arithmetic:
            for (int d = 0; d <= 9; ++d) ids.push_back(vocab::digit_id(d));
            break;
        case TaskFamily::parity:
            for (int d = 0; d <= 3; ++d) ids.push_back(vocab::digit_id(d));
            break;
        default:
            break;  // open-ended
    }
    return ids;
}

Generator make_greedy_generator(const Model& model, int max_new_tokens) {
    return [&model, max_new_tokens](std::span<const int> prompt) {
        std::vector<int> sequence(prompt.begin(), prompt.end());
        std::vector<int> generated;
        for (int step = 0; step < max_new_tokens; ++step) {
            if (static_cast<int64_t>(sequence.size()) >= model.config().context_len) break;
            const auto rows = model.forward(sequence);
            const auto& logits = rows.back().values;
            int best = 0;
            for (size_t v = 1; v < logits.size(); ++v)
                if (logits[v] > logits[best]) best = static_cast<int>(v);
            sequence.push_back(best);
            generated.push_back(best);
            if (best == vocab::kEos) break;
        }
        return generated;
    };
}

Generator make_answer_constrained_generator(const Model& model, std::vector<int> answer_ids) {
    if (answer_ids.empty()) throw DomainError("answer-constrained generator needs a non-empty answer set");
    return [&model, ids = std::move(answer_ids)](std::span<const int> prompt) {
        const auto rows = model.forward(prompt);
        const auto& logits = rows.back().values;
        int best = ids.front();
        for (int candidate : ids)
            if (logits[candidate] > logits[best]) best = candidate;
        return std::vector<int>{best, vocab::kEos};
    };
}

EvalReport evaluate(const Generator& generate, std::span<const TaskInstance> instances) {
    if (instances.empty()) throw DomainError("evaluate: empty instance list");
    EvalReport report;
    std::map<std::string, double> correct;
    for (const auto& instance : instances) {
        const auto generated = generate(instance.prompt_tokens);
        const std::string text = vocab::decode(generated);
        const JudgeVerdict verdict = rule_judge(instance.question_text, text, instance.label);
        const std::string name = family_name(instance.family);
        correct[name] += verdict.score;
        report.per_family_count[name] += 1;
    }
    double total_correct = 0.0;
    for (const auto& [name, count] : report.per_family_count) {
        report.per_family_accuracy[name] = correct[name] / static_cast<double>(count);
        total_correct += correct[name];
        report.total_count += count;
    }
    report.overall_accuracy = total_correct / static_cast<double>(report.total_count);
    return report;
}

}  // namespace masters
