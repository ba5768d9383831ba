#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "masters/checkpoint.hpp"
#include "masters/rng.hpp"
#include "masters/config.hpp"
#include "masters/judge.hpp"
#include "masters/masking.hpp"
#include "masters/schedule.hpp"
#include "masters/store.hpp"
#include "masters/trainer.hpp"

namespace {

using namespace masters;

struct CommandResult {
    int exit_code{0};
    std::vector<std::string> artifacts;
    std::string summary;
};

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    bool force{false};
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_force = true) {
    cmd->add_option("--config", args.config_path, "run configuration file")->required();
    cmd->add_option("--set", args.overrides, "override a config key, e.g. --set seed=7");
    if (with_force) cmd->add_flag("--force", args.force, "overwrite existing outputs");
}

void refuse_existing(const std::filesystem::path& path, bool force) {
    if (!force && std::filesystem::exists(path))
        throw ConfigError("output already exists: " + path.string() + " (use --force to overwrite)");
}

std::string accuracy_line(const EvalReport& report) {
    std::ostringstream line;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", report.overall_accuracy);
    line << "overall " << buf;
    for (const auto& [family, acc] : report.per_family_accuracy) {
        std::snprintf(buf, sizeof(buf), "%.4f", acc);
        line << "  " << family << " " << buf;
    }
    return line.str();
}

TaskSet load_tasks_or_hint(const RunConfig& cfg) {
    try {
        return load_tasks(cfg.tasks_path());
    } catch (const MissingArtifactError&) {
        throw ConfigError("tasks file missing at " + cfg.tasks_path().string() +
                          "; run `masters gen-tasks` first");
    }
}

CommandResult cmd_gen_tasks(const CommonArgs& args) {
    const RunConfig cfg = load_config(args.config_path, args.overrides);
    refuse_existing(cfg.tasks_path(), args.force);
    const TaskSet tasks =
        generate_task_set(cfg.families, cfg.train_count, cfg.eval_count, cfg.difficulty, cfg.seed);
    save_tasks(tasks, cfg.tasks_path());
    CommandResult result;
    result.artifacts.push_back(cfg.tasks_path().string());
    result.summary = "generated " + std::to_string(tasks.train.size()) + " train / " +
                     std::to_string(tasks.eval.size()) + " eval instances across " +
                     std::to_string(cfg.families.size()) + " families";
    return result;
}

CommandResult cmd_pretrain_teacher(const CommonArgs& args, const std::string& only_teacher) {
    const RunConfig cfg = load_config(args.config_path, args.overrides);
    const TaskSet tasks = load_tasks_or_hint(cfg);

    CommandResult result;
    std::ostringstream summary;
    bool any = false;
    for (const auto& teacher : cfg.teachers) {
        if (!only_teacher.empty() && teacher.id != only_teacher) continue;
        any = true;
        const auto path = cfg.teacher_base_path(teacher.id);
        refuse_existing(path, args.force);
        const PretrainResult pre =
            pretrain_model(teacher.model, tasks, cfg.pretrain, derive_seed(cfg.seed, "teacher", teacher.id));
        save_model(pre.model, path);
        nlohmann::json meta;
        meta["teacher_id"] = teacher.id;
        meta["heldout_accuracy"] = pre.heldout_accuracy;
        meta["steps_run"] = pre.steps_run;
        meta["param_count"] = pre.model.param_count();
        std::ofstream meta_out(cfg.teachers_dir() / (teacher.id + ".json"),
                               std::ios::trunc | std::ios::binary);
        meta_out << meta.dump(2) << '\n';

        result.artifacts.push_back(path.string());
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", pre.heldout_accuracy);
        summary << teacher.id << ": held-out accuracy " << buf << " after "
                << pre.steps_run << " steps (" << pre.model.param_count() << " params)";
        if (pre.heldout_accuracy < cfg.pretrain.target_accuracy)
            summary << " [below target " << cfg.pretrain.target_accuracy << "]";
        summary << "; ";
        any = true;
    }
    if (!any) throw ConfigError("no teacher named '" + only_teacher + "' in the config");
    result.summary = summary.str();
    return result;
}

CommandResult cmd_mask(const CommonArgs& args) {
    const RunConfig cfg = load_config(args.config_path, args.overrides);
    CommandResult result;
    int staged = 0;
    for (const auto& teacher : cfg.teachers) {
        Model base = [&] {
            try {
                return load_model(cfg.teacher_base_path(teacher.id));
            } catch (const MissingArtifactError&) {
                throw ConfigError("teacher checkpoint missing: " +
                                  cfg.teacher_base_path(teacher.id).string() +
                                  "; run `masters pretrain-teacher` first");
            }
        }();
        const auto sched = StageSchedule::make(teacher.r_max, cfg.decrement, teacher.iterations);
        for (const auto& stage : sched.stages) {
            const auto ckpt_path = cfg.staged_teacher_path(teacher.id, stage.ratio);
            const auto mask_path = cfg.mask_path(teacher.id, stage.ratio);
            refuse_existing(ckpt_path, args.force);
            const MaskPlan plan = build_mask(base.params(), stage.ratio);
            const Model masked(base.config(), apply_mask(base.params(), plan));
            save_model(masked, ckpt_path);
            save_mask_plan(plan, mask_path);
            result.artifacts.push_back(ckpt_path.string());
            ++staged;
        }
    }
    result.summary = "staged " + std::to_string(staged) + " masked teacher checkpoints";
    return result;
}

CommandResult cmd_pregenerate(const CommonArgs& args, int workers_flag) {
    RunConfig cfg = load_config(args.config_path, args.overrides);
    if (workers_flag > 0) cfg.workers = workers_flag;
    const TaskSet tasks = load_tasks_or_hint(cfg);
    refuse_existing(cfg.store_dir() / "records.jsonl", args.force);

    std::vector<StagedTeacher> staged;
    for (const auto& teacher : cfg.teachers) {
        const auto sched = StageSchedule::make(teacher.r_max, cfg.decrement, teacher.iterations);
        for (const auto& stage : sched.stages) {
            const auto path = cfg.staged_teacher_path(teacher.id, stage.ratio);
            try {
                staged.push_back(StagedTeacher{teacher.id, stage.index, stage.ratio,
                                               load_model(path)});
            } catch (const MissingArtifactError&) {
                throw ConfigError("staged teacher checkpoint missing: " + path.string() +
                                  "; run `masters mask` first");
            }
        }
    }

    const Model student = make_initial_student(cfg);
    save_model(student, cfg.workdir / "student_init.ckpt");

    PregenerateSpec spec;
    spec.questions = distill_pool(cfg, tasks);
    spec.staged_teachers = &staged;
    spec.student = &student;
    spec.sampling = cfg.sampling;
    spec.student_per_group = cfg.mix_student;
    spec.teacher_per_group = cfg.mix_teacher;
    spec.seed = cfg.seed;
    spec.refresh_student_per_stage = cfg.student_refresh_per_stage;
    spec.workers = cfg.workers;

    const auto records = pregenerate(spec);
    RolloutStore::write_records(cfg.store_dir(), records);

    CommandResult result;
    result.artifacts.push_back((cfg.store_dir() / "records.jsonl").string());
    result.summary = "pre-generated " + std::to_string(records.size()) + " responses (" +
                     std::to_string(staged.size()) + " staged teachers x " +
                     std::to_string(spec.questions.size()) + " questions x " +
                     std::to_string(cfg.group_size) + " per group)";
    return result;
}

CommandResult cmd_judge(const CommonArgs& args, const std::string& judge_flag, int workers_flag) {
    RunConfig cfg = load_config(args.config_path, args.overrides);
    if (!judge_flag.empty()) cfg.judge = judge_flag;
    if (workers_flag > 0) cfg.workers = workers_flag;
    const TaskSet tasks = load_tasks_or_hint(cfg);

    if (!RolloutStore::has_records(cfg.store_dir()))
        throw ConfigError("rollout store missing at " + cfg.store_dir().string() +
                          "; run `masters pregenerate` first");
    const auto judgments_path = cfg.store_dir() / "judgments.jsonl";
    if (std::filesystem::exists(judgments_path)) {
        if (!args.force)
            throw ConfigError("store is already judged: " + judgments_path.string() +
                              " (use --force to re-judge)");
        std::filesystem::remove(judgments_path);
    }

    RolloutStore store = RolloutStore::load(cfg.store_dir());
    const auto& records = store.records();
    std::vector<Judgment> judgments(records.size());

    CommandResult result;
    if (cfg.judge == "rule") {
        parallel_indexed(static_cast<int64_t>(records.size()), cfg.workers, [&](int64_t i) {
            const auto& record = records[static_cast<size_t>(i)];
            const TaskInstance& task = tasks.by_id(record.question_id);
            const JudgeVerdict verdict =
                rule_judge(task.question_text, vocab::decode(record.tokens), task.label);
            judgments[static_cast<size_t>(i)] =
                Judgment{record.key(), verdict.score, verdict.rationale};
        });
    } else {
        const auto replies_dir = cfg.store_dir() / "replies";
        if (!std::filesystem::exists(replies_dir)) {
            const auto prompts_dir = cfg.store_dir() / "prompts";
            std::filesystem::create_directories(prompts_dir);
            for (const auto& record : records) {
                const TaskInstance& task = tasks.by_id(record.question_id);
                const auto pair = render_judge_prompts(
                    task.question_text, vocab::decode(record.tokens), task.label);
                std::ofstream out(prompts_dir / (record.key() + ".eval.txt"),
                                  std::ios::trunc | std::ios::binary);
                out << pair.evaluation_prompt;
            }
            throw MissingArtifactError(
                "external judge: wrote " + std::to_string(records.size()) + " prompts to " +
                prompts_dir.string() + "; place replies in " + replies_dir.string() +
                "/<key>.txt and rerun");
        }
        std::vector<std::string> missing;
        for (size_t i = 0; i < records.size(); ++i) {
            const auto reply_path = replies_dir / (records[i].key() + ".txt");
            std::ifstream in(reply_path, std::ios::binary);
            if (!in) {
                missing.push_back(reply_path.string());
                continue;
            }
            std::ostringstream reply;
            reply << in.rdbuf();
            const JudgeVerdict verdict = parse_judge_reply(reply.str());
            judgments[i] = Judgment{records[i].key(), verdict.score, verdict.rationale};
        }
        if (!missing.empty())
            throw MissingArtifactError("external judge: " + std::to_string(missing.size()) +
                                       " replies missing, first: " + missing.front());
    }

    RolloutStore::append_judgments(cfg.store_dir(), judgments);
    double positive = 0.0;
    for (const auto& j : judgments) positive += j.score;
    result.artifacts.push_back(judgments_path.string());
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", positive / static_cast<double>(judgments.size()));
    result.summary = "judged " + std::to_string(judgments.size()) + " responses with the " +
                     cfg.judge + " judge; mean accuracy reward " + buf;
    return result;
}

CommandResult cmd_train(const CommonArgs& args, const std::string& mode_flag) {
    RunConfig cfg = load_config(args.config_path, args.overrides);
    if (!mode_flag.empty()) {
        cfg.mode = mode_flag;
        cfg.validate();
    }
    refuse_existing(cfg.run_dir(cfg.mode) / "metrics.csv", args.force);

    Trainer trainer(cfg);
    const RunResult run = trainer.run();

    CommandResult result;
    result.artifacts.push_back(run.checkpoint_path.string());
    result.artifacts.push_back(run.metrics_path.string());
    result.summary = "mode " + cfg.mode + " finished " +
                     std::to_string(trainer.plan().entries.size()) +
                     " iterations; held-out " + accuracy_line(run.final_eval);
    return result;
}

CommandResult cmd_evaluate(const CommonArgs& args, const std::string& checkpoint_flag) {
    const RunConfig cfg = load_config(args.config_path, args.overrides);
    const TaskSet tasks = load_tasks_or_hint(cfg);
    const std::filesystem::path checkpoint = checkpoint_flag.empty()
        ? cfg.run_dir(cfg.mode) / "student_final.ckpt"
        : std::filesystem::path(checkpoint_flag);
    const Model model = load_model(checkpoint);

    int budget = 1;
    for (const auto& t : tasks.eval)
        budget = std::max(budget, static_cast<int>(vocab::encode(t.label).size()) + 1);
    const auto report = evaluate(make_greedy_generator(model, budget), tasks.eval);

    CommandResult result;
    result.summary = "checkpoint " + checkpoint.string() + ": " + accuracy_line(report);
    return result;
}

CommandResult cmd_report(const CommonArgs& args) {
    const RunConfig cfg = load_config(args.config_path, args.overrides);
    const std::vector<std::string> modes{"naive", "progressive", "masters"};

    struct ModeRow {
        std::string mode;
        nlohmann::json eval;
        std::vector<std::string> metric_lines;  // csv rows without header
    };
    std::vector<ModeRow> rows;
    for (const auto& mode : modes) {
        const auto eval_path = cfg.run_dir(mode) / "eval.json";
        const auto metrics_path = cfg.run_dir(mode) / "metrics.csv";
        if (!std::filesystem::exists(eval_path) || !std::filesystem::exists(metrics_path)) continue;
        ModeRow row;
        row.mode = mode;
        std::ifstream eval_in(eval_path, std::ios::binary);
        row.eval = nlohmann::json::parse(eval_in);
        std::ifstream metrics_in(metrics_path, std::ios::binary);
        std::string line;
        std::getline(metrics_in, line);  // header
        while (std::getline(metrics_in, line))
            if (!line.empty()) row.metric_lines.push_back(line);
        rows.push_back(std::move(row));
    }
    if (rows.empty())
        throw ConfigError("report: no completed runs under " + (cfg.workdir / "runs").string() +
                          "; run `masters train` first");

    std::filesystem::create_directories(cfg.report_dir());
    const auto summary_path = cfg.report_dir() / "summary.csv";
    refuse_existing(summary_path, args.force);

    std::vector<std::string> family_names;
    for (const auto& [name, _] : rows.front().eval.at("per_family_accuracy").items())
        family_names.push_back(name);

    {
        std::ofstream out(summary_path, std::ios::trunc | std::ios::binary);
        out << "mode,overall_accuracy";
        for (const auto& name : family_names) out << ',' << name;
        out << ",final_loss_total\n";
        for (const auto& row : rows) {
            const std::string last = row.metric_lines.empty() ? "" : row.metric_lines.back();
            std::string final_loss;
            int commas = 0;
            for (char c : last) {
                if (c == ',') {
                    ++commas;
                    continue;
                }
                if (commas == 3) final_loss.push_back(c);
                if (commas > 3) break;
            }
            out << row.mode << ',' << row.eval.at("overall_accuracy").get<double>();
            for (const auto& name : family_names)
                out << ',' << row.eval.at("per_family_accuracy").at(name).get<double>();
            out << ',' << final_loss << '\n';
        }
    }
    {
        std::ofstream out(cfg.report_dir() / "series.csv", std::ios::trunc | std::ios::binary);
        out << "mode,iteration,teacher_id,ratio,loss_total,loss_grpo,loss_jsd,kl_ref,"
               "mean_reward_acc,mean_reward_distill,eval_accuracy\n";
        for (const auto& row : rows)
            for (const auto& line : row.metric_lines) out << row.mode << ',' << line << '\n';
    }

    std::ostringstream table;
    table << "mode          overall";
    for (const auto& name : family_names) table << "  " << name;
    table << '\n';
    char buf[32];
    for (const auto& row : rows) {
        table << row.mode << std::string(14 - std::min<size_t>(13, row.mode.size()) - 1, ' ');
        std::snprintf(buf, sizeof(buf), "%7.4f", row.eval.at("overall_accuracy").get<double>());
        table << buf;
        for (const auto& name : family_names) {
            std::snprintf(buf, sizeof(buf), "%*.4f", static_cast<int>(name.size() + 2),
                          row.eval.at("per_family_accuracy").at(name).get<double>());
            table << buf;
        }
        table << '\n';
    }
    {
        std::ofstream out(cfg.report_dir() / "table.txt", std::ios::trunc | std::ios::binary);
        out << table.str();
    }

    CommandResult result;
    result.artifacts.push_back(summary_path.string());
    result.artifacts.push_back((cfg.report_dir() / "series.csv").string());
    result.artifacts.push_back((cfg.report_dir() / "table.txt").string());
    result.summary = "report over " + std::to_string(rows.size()) + " mode(s)\n" + table.str();
    return result;
}

int finish(const CommandResult& result) {
    for (const auto& artifact : result.artifacts) std::cout << "wrote " << artifact << '\n';
    if (!result.summary.empty()) std::cout << result.summary << '\n';
    return result.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mask-progressive distillation pipeline with offline RL"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    CommonArgs pretrain_args, mask_args, gen_tasks_args, pregen_args, judge_args, train_args,
        eval_args, report_args;
    std::string only_teacher, judge_kind, train_mode, checkpoint_path;
    int pregen_workers = 0, judge_workers = 0;

    auto* pretrain_cmd =
        app.add_subcommand("pretrain-teacher", "train teacher checkpoints on the task suite");
    add_common(pretrain_cmd, pretrain_args);
    pretrain_cmd->add_option("--teacher", only_teacher, "restrict to one teacher id");

    auto* mask_cmd = app.add_subcommand("mask", "build per-stage masked teacher checkpoints");
    add_common(mask_cmd, mask_args);

    auto* gen_tasks_cmd = app.add_subcommand("gen-tasks", "generate the synthetic task suite");
    add_common(gen_tasks_cmd, gen_tasks_args);

    auto* pregen_cmd =
        app.add_subcommand("pregenerate", "sample multi-response groups from every staged teacher");
    add_common(pregen_cmd, pregen_args);
    pregen_cmd->add_option("--workers", pregen_workers, "parallel generation workers");

    auto* judge_cmd = app.add_subcommand("judge", "annotate stored responses with accuracy rewards");
    add_common(judge_cmd, judge_args);
    judge_cmd->add_option("--judge", judge_kind, "rule|external")
        ->check(CLI::IsMember({"rule", "external"}));
    judge_cmd->add_option("--workers", judge_workers, "parallel judging workers");

    auto* train_cmd = app.add_subcommand("train", "run the distillation training loop");
    add_common(train_cmd, train_args);
    train_cmd->add_option("--mode", train_mode, "naive|progressive|masters")
        ->check(CLI::IsMember({"naive", "progressive", "masters"}));

    auto* eval_cmd = app.add_subcommand("evaluate", "measure held-out accuracy of a checkpoint");
    add_common(eval_cmd, eval_args, /*with_force=*/false);
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint path (default: current mode's final)");

    auto* report_cmd = app.add_subcommand("report", "aggregate metrics across modes");
    add_common(report_cmd, report_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain_cmd->parsed()) return finish(cmd_pretrain_teacher(pretrain_args, only_teacher));
        if (mask_cmd->parsed()) return finish(cmd_mask(mask_args));
        if (gen_tasks_cmd->parsed()) return finish(cmd_gen_tasks(gen_tasks_args));
        if (pregen_cmd->parsed()) return finish(cmd_pregenerate(pregen_args, pregen_workers));
        if (judge_cmd->parsed()) return finish(cmd_judge(judge_args, judge_kind, judge_workers));
        if (train_cmd->parsed()) return finish(cmd_train(train_args, train_mode));
        if (eval_cmd->parsed()) return finish(cmd_evaluate(eval_args, checkpoint_path));
        if (report_cmd->parsed()) return finish(cmd_report(report_args));
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
