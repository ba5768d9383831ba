#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "masters/store.hpp"

using namespace masters;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag)
        : path(std::filesystem::temp_directory_path() / ("masters_store_" + tag)) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

ModelConfig mini_config(uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = vocab::size();
    cfg.context_len = 32;
    cfg.n_layers = 1;
    cfg.d_model = 12;
    cfg.n_heads = 2;
    cfg.seed = seed;
    return cfg;
}

struct Fixture {
    TaskSet tasks;
    std::vector<StagedTeacher> staged;
    Model student;
    PregenerateSpec spec;

    explicit Fixture(int stages, uint64_t seed = 5)
        : tasks(generate_task_set({TaskFamily::parity}, 2, 2, 1, 31)),
          student(Model::random_init(mini_config(900))) {
        for (int k = 0; k < stages; ++k) {
            const double ratio = 0.05 * (stages - 1 - k);
            staged.push_back(StagedTeacher{"large", k, ratio,
                                           Model::random_init(mini_config(100 + k))});
        }
        for (const auto& t : tasks.train) spec.questions.push_back(&t);
        spec.staged_teachers = &staged;
        spec.student = &student;
        spec.sampling.max_new_tokens = 6;
        spec.seed = seed;
    }
};

}  // namespace

TEST_CASE("2 questions x 5 stages x 8 responses persists exactly 80 records") {
    Fixture fx(5);
    const auto records = pregenerate(fx.spec);
    CHECK(records.size() == 80);

    TempDir dir("count");
    RolloutStore::write_records(dir.path, records);
    const auto store = RolloutStore::load(dir.path);
    CHECK(store.records().size() == 80);

    // every group holds exactly G records, student entries first
    for (int stage = 0; stage < 5; ++stage) {
        for (const auto& task : fx.tasks.train) {
            const auto group = store.group(task.question_id, "large", stage);
            REQUIRE(group.records.size() == 8);
            for (int i = 0; i < 4; ++i) CHECK(group.records[i]->source == "student");
            for (int i = 4; i < 8; ++i) CHECK(group.records[i]->source == "teacher");
        }
    }
}

TEST_CASE("rerun with an identical seed produces a byte-identical store") {
    Fixture fx(3);
    TempDir dir_a("bytes_a");
    TempDir dir_b("bytes_b");
    RolloutStore::write_records(dir_a.path, pregenerate(fx.spec));

    Fixture fx2(3);
    RolloutStore::write_records(dir_b.path, pregenerate(fx2.spec));
    CHECK(read_file(dir_a.path / "records.jsonl") == read_file(dir_b.path / "records.jsonl"));

    // and a different seed changes it
    Fixture fx3(3, 6);
    TempDir dir_c("bytes_c");
    RolloutStore::write_records(dir_c.path, pregenerate(fx3.spec));
    CHECK(read_file(dir_a.path / "records.jsonl") != read_file(dir_c.path / "records.jsonl"));
}

TEST_CASE("worker parallelism does not change the store") {
    Fixture serial(4);
    serial.spec.workers = 1;
    Fixture parallel(4);
    parallel.spec.workers = 4;
    TempDir dir_a("workers_a");
    TempDir dir_b("workers_b");
    RolloutStore::write_records(dir_a.path, pregenerate(serial.spec));
    RolloutStore::write_records(dir_b.path, pregenerate(parallel.spec));
    CHECK(read_file(dir_a.path / "records.jsonl") == read_file(dir_b.path / "records.jsonl"));
}

TEST_CASE("student-only mix override") {
    Fixture fx(2);
    fx.spec.student_per_group = 8;
    fx.spec.teacher_per_group = 0;
    const auto records = pregenerate(fx.spec);
    CHECK(records.size() == 2 * 2 * 8);
    for (const auto& r : records) CHECK(r.source == "student");
}

TEST_CASE("student records repeat across stages unless refresh is set") {
    Fixture fx(3);
    const auto records = pregenerate(fx.spec);
    const auto store_tokens = [&](int stage, int sample) {
        for (const auto& r : records)
            if (r.stage_index == stage && r.source == "student" && r.sample_index == sample &&
                r.question_id == fx.tasks.train[0].question_id)
                return r.tokens;
        return std::vector<int>{};
    };
    CHECK(store_tokens(0, 1) == store_tokens(1, 1));
    CHECK(store_tokens(1, 1) == store_tokens(2, 1));

    Fixture fresh(3);
    fresh.spec.refresh_student_per_stage = true;
    const auto refreshed = pregenerate(fresh.spec);
    bool differs = false;
    for (int stage = 1; stage < 3 && !differs; ++stage) {
        for (const auto& r : refreshed) {
            if (r.stage_index == stage && r.source == "student") {
                for (const auto& r0 : refreshed) {
                    if (r0.stage_index == 0 && r0.source == "student" &&
                        r0.question_id == r.question_id && r0.sample_index == r.sample_index &&
                        r0.tokens != r.tokens)
                        differs = true;
                }
            }
        }
    }
    CHECK(differs);
}

TEST_CASE("teacher records carry their stage ratio") {
    Fixture fx(5);
    const auto records = pregenerate(fx.spec);
    for (const auto& r : records) {
        if (r.source != "teacher") continue;
        CHECK(r.stage_ratio == doctest::Approx(0.05 * (4 - r.stage_index)).epsilon(1e-12));
        CHECK(r.tokens.size() == r.gen_logprobs.size());
        CHECK_FALSE(r.tokens.empty());
    }
}

TEST_CASE("judgments append without altering token fields") {
    Fixture fx(2);
    const auto records = pregenerate(fx.spec);
    TempDir dir("judged");
    RolloutStore::write_records(dir.path, records);
    const std::string before = read_file(dir.path / "records.jsonl");

    std::vector<Judgment> judgments;
    for (const auto& r : records) judgments.push_back(Judgment{r.key(), 1.0, std::nullopt});
    RolloutStore::append_judgments(dir.path, judgments);

    CHECK(read_file(dir.path / "records.jsonl") == before);  // base file untouched
    const auto store = RolloutStore::load(dir.path);
    CHECK(store.judged_count() == static_cast<int>(records.size()));
    for (const auto& r : store.records()) {
        CHECK(r.judge_score.value() == 1.0);
        CHECK_FALSE(r.tokens.empty());
    }

    // later revisions win
    RolloutStore::append_judgments(dir.path, {Judgment{records[0].key(), 0.0, "revised"}});
    const auto revised = RolloutStore::load(dir.path);
    CHECK(revised.records()[0].judge_score.value() == 0.0);
    CHECK(revised.judged_count() == static_cast<int>(records.size()));
}

TEST_CASE("judgments for unknown records are rejected") {
    Fixture fx(2);
    TempDir dir("unknown");
    RolloutStore::write_records(dir.path, pregenerate(fx.spec));
    RolloutStore::append_judgments(dir.path, {Judgment{"bogus|key|0|student|0", 1.0, std::nullopt}});
    CHECK_THROWS_AS((void)RolloutStore::load(dir.path), StructuralError);
}

TEST_CASE("record json round-trips optionals") {
    Fixture fx(2);
    auto records = pregenerate(fx.spec);
    records[0].judge_score = 1.0;
    records[0].distill_divergence = 0.123;
    records[0].rewards = Rewards{1.0, 0.5, 1.5};
    TempDir dir("optional");
    RolloutStore::write_records(dir.path, records);
    const auto store = RolloutStore::load(dir.path);
    const auto& r = store.records()[0];
    CHECK(r.judge_score.value() == 1.0);
    CHECK(r.distill_divergence.value() == 0.123);
    CHECK(r.rewards->total == 1.5);
    CHECK(store.records()[1].judge_score.has_value() == false);
}

TEST_CASE("pregenerate validates its inputs") {
    Fixture fx(2);
    PregenerateSpec empty = fx.spec;
    empty.questions.clear();
    CHECK_THROWS_AS((void)pregenerate(empty), ConfigError);
    PregenerateSpec no_teachers = fx.spec;
    std::vector<StagedTeacher> none;
    no_teachers.staged_teachers = &none;
    CHECK_THROWS_AS((void)pregenerate(no_teachers), ConfigError);
}
