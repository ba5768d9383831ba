#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

using std::filesystem::path;

namespace {

struct TempDir {
    path dir;
    explicit TempDir(const std::string& tag)
        : dir(std::filesystem::temp_directory_path() / ("masters_cli_" + tag)) {
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
    }
    ~TempDir() { std::filesystem::remove_all(dir); }
};

struct RunOutput {
    int exit_code{0};
    std::string text;
};

RunOutput run_cli(const TempDir& tmp, const std::string& args) {
    const path out_file = tmp.dir / "cli_output.txt";
    const std::string command =
        std::string(MASTERS_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
    const int status = std::system(command.c_str());
    RunOutput out;
    out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    out.text = buf.str();
    return out;
}

path write_smallest_config(const TempDir& tmp) {
    nlohmann::json doc;
    doc["seed"] = 5;
    doc["workdir"] = (tmp.dir / "work").string();
    doc["mode"] = "masters";
    doc["tasks"] = {{"families", {"parity", "sequence-copy"}},
                    {"train_count", 6},
                    {"eval_count", 6},
                    {"difficulty", 1}};
    doc["student"] = {{"d_model", 8}, {"n_layers", 1}, {"n_heads", 2}, {"context_len", 24}};
    doc["teachers"] = {{{"id", "large"},
                        {"d_model", 12},
                        {"n_layers", 1},
                        {"n_heads", 2},
                        {"context_len", 24},
                        {"r_max", 0.1},
                        {"iterations", 6}}};
    doc["iterations"] = 6;
    doc["group_size"] = 4;
    doc["mix"] = {{"student", 2}, {"teacher", 2}};
    doc["sampling"] = {{"max_new_tokens", 4}};
    doc["optimizer"] = {{"learning_rate", 0.005}};
    doc["pretrain"] = {{"steps", 30}, {"batch", 4}, {"learning_rate", 0.003},
                       {"target_accuracy", 0.99}, {"eval_every", 30}};
    const path cfg_path = tmp.dir / "config.json";
    std::ofstream out(cfg_path);
    out << doc.dump(2);
    return cfg_path;
}

}  // namespace

TEST_CASE("--help lists all eight subcommands and exits 0") {
    TempDir tmp("help");
    const auto out = run_cli(tmp, "--help");
    CHECK(out.exit_code == 0);
    for (const char* name : {"pretrain-teacher", "mask", "gen-tasks", "pregenerate", "judge",
                             "train", "evaluate", "report"})
        CHECK(out.text.find(name) != std::string::npos);
}

TEST_CASE("unknown commands produce usage text and a nonzero exit") {
    TempDir tmp("unknown");
    const auto out = run_cli(tmp, "frobnicate");
    CHECK(out.exit_code != 0);
    CHECK(out.text.find("Usage") != std::string::npos);  // usage text on bad commands
}

TEST_CASE("train without a store is a configuration error naming the store") {
    TempDir tmp("nostore");
    const path cfg = write_smallest_config(tmp);
    REQUIRE(run_cli(tmp, "gen-tasks --config " + cfg.string()).exit_code == 0);
    const auto out = run_cli(tmp, "train --config " + cfg.string());
    CHECK(out.exit_code == 2);
    CHECK(out.text.find("configuration error") != std::string::npos);
    CHECK(out.text.find("pregenerate") != std::string::npos);
}

TEST_CASE("full scripted pipeline across all eight commands") {
    TempDir tmp("pipeline");
    const path cfg = write_smallest_config(tmp);
    const std::string c = " --config " + cfg.string();

    CHECK(run_cli(tmp, "gen-tasks" + c).exit_code == 0);
    CHECK(run_cli(tmp, "pretrain-teacher" + c).exit_code == 0);
    CHECK(run_cli(tmp, "mask" + c).exit_code == 0);
    CHECK(run_cli(tmp, "pregenerate" + c).exit_code == 0);
    CHECK(run_cli(tmp, "judge" + c).exit_code == 0);
    CHECK(run_cli(tmp, "train --mode naive" + c).exit_code == 0);
    CHECK(run_cli(tmp, "train --mode progressive" + c).exit_code == 0);
    CHECK(run_cli(tmp, "train --mode masters" + c).exit_code == 0);
    const auto eval_out = run_cli(tmp, "evaluate" + c);
    CHECK(eval_out.exit_code == 0);
    CHECK(eval_out.text.find("overall") != std::string::npos);

    const auto report_out = run_cli(tmp, "report" + c);
    CHECK(report_out.exit_code == 0);

    const path work = tmp.dir / "work";
    CHECK(std::filesystem::exists(work / "report" / "summary.csv"));
    CHECK(std::filesystem::exists(work / "report" / "series.csv"));
    CHECK(std::filesystem::exists(work / "report" / "table.txt"));

    // three mode rows in the summary
    std::ifstream summary(work / "report" / "summary.csv");
    std::string line;
    std::getline(summary, line);
    CHECK(line.find("mode,overall_accuracy") == 0);
    int rows = 0;
    bool saw_naive = false, saw_progressive = false, saw_masters = false;
    while (std::getline(summary, line)) {
        if (line.empty()) continue;
        ++rows;
        saw_naive |= line.rfind("naive,", 0) == 0;
        saw_progressive |= line.rfind("progressive,", 0) == 0;
        saw_masters |= line.rfind("masters,", 0) == 0;
    }
    CHECK(rows == 3);
    CHECK(saw_naive);
    CHECK(saw_progressive);
    CHECK(saw_masters);
}

TEST_CASE("commands refuse to overwrite outputs unless forced") {
    TempDir tmp("force");
    const path cfg = write_smallest_config(tmp);
    const std::string c = " --config " + cfg.string();

    REQUIRE(run_cli(tmp, "gen-tasks" + c).exit_code == 0);
    const auto refused = run_cli(tmp, "gen-tasks" + c);
    CHECK(refused.exit_code == 2);
    CHECK(refused.text.find("--force") != std::string::npos);
    CHECK(run_cli(tmp, "gen-tasks --force" + c).exit_code == 0);
}

TEST_CASE("external judge emits prompt files and waits for replies") {
    TempDir tmp("external");
    const path cfg = write_smallest_config(tmp);
    const std::string c = " --config " + cfg.string();
    REQUIRE(run_cli(tmp, "gen-tasks" + c).exit_code == 0);
    REQUIRE(run_cli(tmp, "pretrain-teacher" + c).exit_code == 0);
    REQUIRE(run_cli(tmp, "mask" + c).exit_code == 0);
    REQUIRE(run_cli(tmp, "pregenerate" + c).exit_code == 0);

    const auto first = run_cli(tmp, "judge --judge external" + c);
    CHECK(first.exit_code == 3);
    const path prompts = tmp.dir / "work" / "store" / "prompts";
    REQUIRE(std::filesystem::exists(prompts));

    // answer every prompt with a fixed accepting reply
    const path replies = tmp.dir / "work" / "store" / "replies";
    std::filesystem::create_directories(replies);
    for (const auto& entry : std::filesystem::directory_iterator(prompts)) {
        std::string name = entry.path().filename().string();
        name = name.substr(0, name.size() - std::string(".eval.txt").size());
        std::ofstream reply(replies / (name + ".txt"));
        reply << "the response looks right. <answer>1</answer>\n";
    }
    const auto second = run_cli(tmp, "judge --judge external" + c);
    CHECK(second.exit_code == 0);
    CHECK(second.text.find("mean accuracy reward 1.0000") != std::string::npos);
}

TEST_CASE("missing checkpoint at evaluate exits with the artifact code") {
    TempDir tmp("nockpt");
    const path cfg = write_smallest_config(tmp);
    REQUIRE(run_cli(tmp, "gen-tasks --config " + cfg.string()).exit_code == 0);
    const auto out = run_cli(tmp, "evaluate --config " + cfg.string());
    CHECK(out.exit_code == 3);
}
