#include "masters/store.hpp"

#include <atomic>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "masters/rng.hpp"

namespace masters {

namespace {

std::string make_key(std::string_view question_id, std::string_view teacher_id, int stage_index,
                     std::string_view source, int sample_index) {
    std::string key;
    key.reserve(question_id.size() + teacher_id.size() + source.size() + 12);
    key.append(question_id);
    key.push_back('|');
    key.append(teacher_id);
    key.push_back('|');
    key.append(std::to_string(stage_index));
    key.push_back('|');
    key.append(source);
    key.push_back('|');
    key.append(std::to_string(sample_index));
    return key;
}

nlohmann::json record_to_json(const ResponseRecord& r) {
    nlohmann::json j;
    j["question_id"] = r.question_id;
    j["teacher_id"] = r.teacher_id;
    j["stage_index"] = r.stage_index;
    j["stage_ratio"] = r.stage_ratio;
    j["source"] = r.source;
    j["sample_index"] = r.sample_index;
    j["tokens"] = r.tokens;
    j["gen_logprobs"] = r.gen_logprobs;
    j["judge_score"] = r.judge_score ? nlohmann::json(*r.judge_score) : nlohmann::json(nullptr);
    j["judge_rationale"] =
        r.judge_rationale ? nlohmann::json(*r.judge_rationale) : nlohmann::json(nullptr);
    j["distill_divergence"] =
        r.distill_divergence ? nlohmann::json(*r.distill_divergence) : nlohmann::json(nullptr);
    if (r.rewards) {
        j["rewards"] = {{"acc", r.rewards->acc},
                        {"distill", r.rewards->distill},
                        {"total", r.rewards->total}};
    } else {
        j["rewards"] = nullptr;
    }
    return j;
}

ResponseRecord record_from_json(const nlohmann::json& j) {
    ResponseRecord r;
    r.question_id = j.at("question_id").get<std::string>();
    r.teacher_id = j.at("teacher_id").get<std::string>();
    r.stage_index = j.at("stage_index").get<int>();
    r.stage_ratio = j.at("stage_ratio").get<double>();
    r.source = j.at("source").get<std::string>();
    r.sample_index = j.at("sample_index").get<int>();
    r.tokens = j.at("tokens").get<std::vector<int>>();
    r.gen_logprobs = j.at("gen_logprobs").get<std::vector<double>>();
    if (!j.at("judge_score").is_null()) r.judge_score = j.at("judge_score").get<double>();
    if (!j.at("judge_rationale").is_null())
        r.judge_rationale = j.at("judge_rationale").get<std::string>();
    if (!j.at("distill_divergence").is_null())
        r.distill_divergence = j.at("distill_divergence").get<double>();
    if (!j.at("rewards").is_null()) {
        Rewards rw;
        rw.acc = j.at("rewards").at("acc").get<double>();
        rw.distill = j.at("rewards").at("distill").get<double>();
        rw.total = j.at("rewards").at("total").get<double>();
        r.rewards = rw;
    }
    return r;
}

}  // namespace

void parallel_indexed(int64_t count, int workers, const std::function<void(int64_t)>& body) {
    if (workers <= 1 || count <= 1) {
        for (int64_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<int64_t> next{0};
    auto worker = [&] {
        for (;;) {
            const int64_t i = next.fetch_add(1);
            if (i >= count) return;
            body(i);
        }
    };
    std::vector<std::thread> pool;
    const int n = std::min<int>(workers, static_cast<int>(count));
    pool.reserve(n);
    for (int w = 0; w < n; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

std::string ResponseRecord::key() const {
    return make_key(question_id, teacher_id, stage_index, source, sample_index);
}

void RolloutStore::write_records(const std::filesystem::path& dir,
                                 const std::vector<ResponseRecord>& records) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "records.jsonl", std::ios::trunc | std::ios::binary);
    if (!out) throw MissingArtifactError("cannot write store at " + dir.string());
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

void RolloutStore::append_judgments(const std::filesystem::path& dir,
                                    const std::vector<Judgment>& judgments) {
    std::ofstream out(dir / "judgments.jsonl", std::ios::app | std::ios::binary);
    if (!out) throw MissingArtifactError("cannot write judgments at " + dir.string());
    for (const auto& j : judgments) {
        nlohmann::json doc;
        doc["key"] = j.key;
        doc["judge_score"] = j.score;
        doc["rationale"] = j.rationale ? nlohmann::json(*j.rationale) : nlohmann::json(nullptr);
        out << doc.dump() << '\n';
    }
}

bool RolloutStore::has_records(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "records.jsonl");
}

bool RolloutStore::has_judgments(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "judgments.jsonl");
}

RolloutStore RolloutStore::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "records.jsonl", std::ios::binary);
    if (!in) throw MissingArtifactError("no rollout store at " + dir.string());

    RolloutStore store;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ResponseRecord r = record_from_json(nlohmann::json::parse(line));
        store.index_[r.key()] = store.records_.size();
        store.records_.push_back(std::move(r));
    }

    std::ifstream revisions(dir / "judgments.jsonl", std::ios::binary);
    if (revisions) {
        while (std::getline(revisions, line)) {
            if (line.empty()) continue;
            const nlohmann::json doc = nlohmann::json::parse(line);
            const std::string key = doc.at("key").get<std::string>();
            const auto it = store.index_.find(key);
            if (it == store.index_.end())
                throw StructuralError("judgment for unknown record: " + key);
            auto& record = store.records_[it->second];
            record.judge_score = doc.at("judge_score").get<double>();
            if (!doc.at("rationale").is_null())
                record.judge_rationale = doc.at("rationale").get<std::string>();
        }
    }
    return store;
}

int RolloutStore::judged_count() const {
    int n = 0;
    for (const auto& r : records_)
        if (r.judge_score) ++n;
    return n;
}

GenerationGroup RolloutStore::group(std::string_view question_id, std::string_view teacher_id,
                                    int stage_index) const {
    GenerationGroup g;
    g.question_id = std::string(question_id);
    g.teacher_id = std::string(teacher_id);
    g.stage_index = stage_index;
    for (const auto& r : records_) {
        if (r.question_id == question_id && r.teacher_id == teacher_id &&
            r.stage_index == stage_index) {
            g.stage_ratio = r.stage_ratio;
            g.records.push_back(&r);
        }
    }
    return g;
}

std::vector<ResponseRecord> pregenerate(const PregenerateSpec& spec) {
    if (!spec.staged_teachers || spec.staged_teachers->empty())
        throw ConfigError("pregenerate: no staged teachers");
    if (!spec.student) throw ConfigError("pregenerate: no student model");
    if (spec.questions.empty()) throw ConfigError("pregenerate: no questions");
    spec.sampling.validate();

    const int group_size = spec.student_per_group + spec.teacher_per_group;
    std::vector<ResponseRecord> records;
    records.resize(spec.questions.size() * spec.staged_teachers->size() *
                   static_cast<size_t>(group_size));

    struct Slot {
        const TaskInstance* question;
        const StagedTeacher* stage;
        bool is_student;
        int sample_index;
    };
    std::vector<Slot> slots;
    slots.reserve(records.size());
    for (const auto& stage : *spec.staged_teachers) {
        for (const TaskInstance* question : spec.questions) {
            for (int s = 0; s < spec.student_per_group; ++s)
                slots.push_back(Slot{question, &stage, true, s});
            for (int t = 0; t < spec.teacher_per_group; ++t)
                slots.push_back(Slot{question, &stage, false, t});
        }
    }

    parallel_indexed(static_cast<int64_t>(slots.size()), spec.workers, [&](int64_t i) {
        const Slot& slot = slots[static_cast<size_t>(i)];
        ResponseRecord r;
        r.question_id = slot.question->question_id;
        r.teacher_id = slot.stage->id;
        r.stage_index = slot.stage->stage_index;
        r.stage_ratio = slot.stage->ratio;
        r.source = slot.is_student ? "student" : "teacher";
        r.sample_index = slot.sample_index;

        uint64_t seed;
        const Model* model;
        if (slot.is_student) {
            model = spec.student;
            seed = spec.refresh_student_per_stage
                       ? derive_seed(spec.seed, "gen", "student", slot.stage->id,
                                     static_cast<uint64_t>(slot.stage->stage_index),
                                     r.question_id, static_cast<uint64_t>(slot.sample_index))
                       : derive_seed(spec.seed, "gen", "student", r.question_id,
                                     static_cast<uint64_t>(slot.sample_index));
        } else {
            model = &slot.stage->model;
            seed = derive_seed(spec.seed, "gen", "teacher", slot.stage->id,
                               static_cast<uint64_t>(slot.stage->stage_index), r.question_id,
                               static_cast<uint64_t>(slot.sample_index));
        }

        const auto sampled = sample_sequence(*model, slot.question->prompt_tokens, spec.sampling,
                                             seed, vocab::kEos);
        r.tokens = sampled.tokens;
        r.gen_logprobs = sampled.logprobs;
        records[static_cast<size_t>(i)] = std::move(r);
    });

    return records;
}

}  // namespace masters
