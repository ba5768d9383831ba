#include "masters/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "masters/checkpoint.hpp"
#include "masters/rng.hpp"

namespace masters {

namespace {

std::string format_metric(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

double mean_of(std::span<const double> values) {
    double acc = 0.0;
    for (double v : values) acc += v;
    return values.empty() ? 0.0 : acc / static_cast<double>(values.size());
}

int max_label_tokens(const TaskSet& tasks) {
    size_t longest = 1;
    for (const auto& t : tasks.train) longest = std::max(longest, vocab::encode(t.label).size());
    for (const auto& t : tasks.eval) longest = std::max(longest, vocab::encode(t.label).size());
    return static_cast<int>(longest) + 1;  // room for <eos>
}

nlohmann::json metric_to_json(const MetricRow& row) {
    nlohmann::json j;
    j["iteration"] = row.iteration;
    j["teacher_id"] = row.teacher_id;
    j["ratio"] = row.ratio;
    j["loss_total"] = row.loss_total;
    j["loss_grpo"] = row.loss_grpo;
    j["loss_jsd"] = row.loss_jsd;
    j["kl_ref"] = row.kl_ref;
    j["mean_reward_acc"] =
        row.mean_reward_acc ? nlohmann::json(*row.mean_reward_acc) : nlohmann::json(nullptr);
    j["mean_reward_distill"] = row.mean_reward_distill ? nlohmann::json(*row.mean_reward_distill)
                                                       : nlohmann::json(nullptr);
    j["eval_accuracy"] =
        row.eval_accuracy ? nlohmann::json(*row.eval_accuracy) : nlohmann::json(nullptr);
    return j;
}

MetricRow metric_from_json(const nlohmann::json& j) {
    MetricRow row;
    row.iteration = j.at("iteration").get<int64_t>();
    row.teacher_id = j.at("teacher_id").get<std::string>();
    row.ratio = j.at("ratio").get<double>();
    row.loss_total = j.at("loss_total").get<double>();
    row.loss_grpo = j.at("loss_grpo").get<double>();
    row.loss_jsd = j.at("loss_jsd").get<double>();
    row.kl_ref = j.at("kl_ref").get<double>();
    if (!j.at("mean_reward_acc").is_null()) row.mean_reward_acc = j.at("mean_reward_acc").get<double>();
    if (!j.at("mean_reward_distill").is_null())
        row.mean_reward_distill = j.at("mean_reward_distill").get<double>();
    if (!j.at("eval_accuracy").is_null()) row.eval_accuracy = j.at("eval_accuracy").get<double>();
    return row;
}

}  // namespace

void write_metrics_csv(std::span<const MetricRow> rows, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw MissingArtifactError("cannot write metrics to " + path.string());
    out << "iteration,teacher_id,ratio,loss_total,loss_grpo,loss_jsd,kl_ref,"
           "mean_reward_acc,mean_reward_distill,eval_accuracy\n";
    for (const auto& row : rows) {
        out << row.iteration << ',' << row.teacher_id << ',' << format_ratio(row.ratio) << ','
            << format_metric(row.loss_total) << ',' << format_metric(row.loss_grpo) << ','
            << format_metric(row.loss_jsd) << ',' << format_metric(row.kl_ref) << ',';
        if (row.mean_reward_acc) out << format_metric(*row.mean_reward_acc);
        out << ',';
        if (row.mean_reward_distill) out << format_metric(*row.mean_reward_distill);
        out << ',';
        if (row.eval_accuracy) out << format_metric(*row.eval_accuracy);
        out << '\n';
    }
}

void adamw_update(ParameterView& params, ParameterView& m1, ParameterView& m2,
                  const ParameterView& grad, const OptimizerConfig& opt, int64_t step) {
    if (params.entries.size() != grad.entries.size() || params.entries.size() != m1.entries.size() ||
        params.entries.size() != m2.entries.size())
        throw StructuralError("adamw: view shapes misaligned");
    const double bias1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
    const double bias2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
    for (size_t e = 0; e < params.entries.size(); ++e) {
        auto& w = params.entries[e].values;
        auto& m = m1.entries[e].values;
        auto& v = m2.entries[e].values;
        const auto& g = grad.entries[e].values;
        if (w.size() != g.size()) throw StructuralError("adamw: gradient size mismatch");
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            w[i] -= opt.learning_rate * (m_hat / (std::sqrt(v_hat) + opt.eps) +
                                         opt.weight_decay * w[i]);
        }
    }
}

Model make_initial_student(const RunConfig& config) {
    return Model::random_init(config.student);
}

std::vector<const TaskInstance*> distill_pool(const RunConfig& config, const TaskSet& tasks) {
    std::vector<const TaskInstance*> pool;
    std::map<TaskFamily, int> taken;
    for (const auto& task : tasks.train) {
        if (config.distill_count > 0 && taken[task.family] >= config.distill_count) continue;
        ++taken[task.family];
        pool.push_back(&task);
    }
    return pool;
}

void save_train_state(const TrainState& state, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_model(state.student, dir / "student.ckpt");
    save_model(state.reference, dir / "reference.ckpt");
    save_parameter_view(state.m1, dir / "m1.pv");
    save_parameter_view(state.m2, dir / "m2.pv");
    nlohmann::json meta;
    meta["iteration"] = state.iteration;
    meta["rng_state"] = state.rng_state;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : state.metrics) rows.push_back(metric_to_json(row));
    meta["metrics"] = std::move(rows);
    std::ofstream out(dir / "state.json", std::ios::trunc | std::ios::binary);
    out << meta.dump(2) << '\n';
}

TrainState load_train_state(const std::filesystem::path& dir) {
    std::ifstream in(dir / "state.json", std::ios::binary);
    if (!in) throw MissingArtifactError("no train state at " + dir.string());
    nlohmann::json meta = nlohmann::json::parse(in);
    TrainState state{load_model(dir / "student.ckpt"),
                     load_parameter_view(dir / "m1.pv"),
                     load_parameter_view(dir / "m2.pv"),
                     load_model(dir / "reference.ckpt"),
                     meta.at("iteration").get<int64_t>(),
                     meta.at("rng_state").get<uint64_t>(),
                     {}};
    for (const auto& j : meta.at("metrics")) state.metrics.push_back(metric_from_json(j));
    return state;
}

Trainer::Trainer(RunConfig config) : config_(std::move(config)) {
    config_.validate();
    try {
        tasks_ = load_tasks(config_.tasks_path());
    } catch (const MissingArtifactError&) {
        throw ConfigError("trainer: tasks file missing at " + config_.tasks_path().string() +
                          "; run `masters gen-tasks` first");
    }
    for (const auto& t : tasks_.train) by_id_[t.question_id] = &t;
    for (const auto& t : tasks_.eval) by_id_[t.question_id] = &t;

    for (const auto& teacher : config_.teachers) {
        TeacherSweep sweep;
        sweep.teacher_id = teacher.id;
        sweep.schedule = StageSchedule::make(config_.effective_r_max(teacher), config_.decrement,
                                             teacher.iterations);
        sweeps_.push_back(std::move(sweep));
    }
    plan_ = stage_plan(sweeps_);

    std::vector<std::string> pool_ids;
    for (const TaskInstance* task : distill_pool(config_, tasks_))
        pool_ids.push_back(task->question_id);
    for (const auto& sweep : sweeps_) {
        shards_[sweep.teacher_id] =
            make_shards(pool_ids, sweep.schedule.stage_count,
                        derive_seed(config_.seed, "shards", sweep.teacher_id));
    }

    if (config_.data_source() == "gen") {
        try {
            store_ = RolloutStore::load(config_.store_dir());
        } catch (const MissingArtifactError&) {
            throw ConfigError("trainer: rollout store missing at " + config_.store_dir().string() +
                              "; run `masters pregenerate` first");
        }
        verify_store();
    }
}

void Trainer::verify_store() const {
    std::vector<std::string> missing;
    std::vector<std::string> unjudged;
    const bool need_judgments = config_.rewards_enabled();
    for (const auto& sweep : sweeps_) {
        const auto& stage_shards = shards_.at(sweep.teacher_id);
        for (int stage = 0; stage < sweep.schedule.stage_count; ++stage) {
            for (const auto& qid : stage_shards[static_cast<size_t>(stage)]) {
                const auto group = store_->group(qid, sweep.teacher_id, stage);
                if (static_cast<int>(group.records.size()) != config_.group_size) {
                    missing.push_back("(" + qid + ", " + sweep.teacher_id + " stage " +
                                      std::to_string(stage) + ")");
                    continue;
                }
                if (need_judgments) {
                    for (const auto* record : group.records) {
                        if (!record->judge_score) {
                            unjudged.push_back("(" + qid + ", " + sweep.teacher_id + " stage " +
                                               std::to_string(stage) + ")");
                            break;
                        }
                    }
                }
            }
        }
    }
    auto summarize = [](const std::vector<std::string>& items) {
        std::string text;
        const size_t shown = std::min<size_t>(items.size(), 20);
        for (size_t i = 0; i < shown; ++i) {
            if (i) text += ", ";
            text += items[i];
        }
        if (items.size() > shown)
            text += " and " + std::to_string(items.size() - shown) + " more";
        return text;
    };
    if (!missing.empty())
        throw ConfigError("trainer: store is missing groups for " + summarize(missing));
    if (!unjudged.empty())
        throw ConfigError("trainer: store lacks judge scores for " + summarize(unjudged) +
                          "; run `masters judge` first");
}

TrainState Trainer::init_state() const {
    Model student = make_initial_student(config_);
    ParameterView m1 = ParameterView::zeros_like(student.params());
    ParameterView m2 = ParameterView::zeros_like(student.params());
    Model reference = student;
    return TrainState{std::move(student), std::move(m1), std::move(m2), std::move(reference),
                      0, derive_seed(config_.seed, "train", config_.mode), {}};
}

const Model& Trainer::teacher_for(const PlanEntry& entry) {
    const auto path = config_.staged_teacher_path(entry.teacher_id, entry.ratio);
    const std::string key = path.string();
    auto it = teacher_cache_.find(key);
    if (it != teacher_cache_.end()) return it->second;
    try {
        auto [inserted, _] = teacher_cache_.emplace(key, load_model(path));
        return inserted->second;
    } catch (const MissingArtifactError&) {
        throw ConfigError("trainer: masked teacher checkpoint missing: " + key +
                          "; run `masters mask` first");
    }
}

GroupBatch Trainer::batch_for(const PlanEntry& entry) const {
    GroupBatch batch;
    const auto& stage_shards = shards_.at(entry.teacher_id);
    const auto& shard = stage_shards[static_cast<size_t>(entry.stage_index)];
    if (shard.empty())
        throw ConfigError("trainer: empty shard for teacher " + entry.teacher_id + " stage " +
                          std::to_string(entry.stage_index));

    // first global iteration of this (teacher, stage) block
    int64_t first = entry.iteration;
    while (first > 1) {
        const auto& prev = plan_.at(first - 1);
        if (prev.teacher_id != entry.teacher_id || prev.stage_index != entry.stage_index) break;
        --first;
    }
    const int64_t offset = entry.iteration - first;

    if (config_.data_source() == "gen") {
        const auto& qid = shard[static_cast<size_t>(offset % static_cast<int64_t>(shard.size()))];
        const auto group = store_->group(qid, entry.teacher_id, entry.stage_index);
        const auto& prompt = by_id_.at(qid)->prompt_tokens;
        for (const auto* record : group.records) {
            batch.records.push_back(GroupRecord{prompt, record->tokens});
            if (config_.rewards_enabled())
                batch.acc_rewards.push_back(record->judge_score.value_or(0.0));
        }
    } else {
        for (int k = 0; k < config_.group_size; ++k) {
            const int64_t pos = (offset * config_.group_size + k) %
                                static_cast<int64_t>(shard.size());
            const TaskInstance* task = by_id_.at(shard[static_cast<size_t>(pos)]);
            std::vector<int> response = vocab::encode(task->label);
            response.push_back(vocab::kEos);
            batch.records.push_back(GroupRecord{task->prompt_tokens, std::move(response)});
        }
    }
    return batch;
}

MetricRow Trainer::step(TrainState& state) {
    const int64_t i = state.iteration + 1;
    const PlanEntry& entry = plan_.at(i);

    if (config_.reference_refresh_per_stage && i > 1) {
        const PlanEntry& prev = plan_.at(i - 1);
        if (prev.teacher_id != entry.teacher_id || prev.stage_index != entry.stage_index)
            state.reference = state.student;
    }

    const Model& teacher = teacher_for(entry);
    const GroupBatch batch = batch_for(entry);
    const bool rewards = config_.rewards_enabled();

    // any non-finite value downstream halts the run with the state preserved
    auto halt = [&](const std::string& what) -> NumericError {
        const auto halt_dir = config_.run_dir(config_.mode) / "halt_state";
        save_train_state(state, halt_dir);
        return NumericError("trainer: " + what + " at iteration " + std::to_string(i) +
                            "; state preserved in " + halt_dir.string());
    };

    GroupScore score;
    try {
        score = score_group(state.student, teacher, rewards ? &state.reference : nullptr,
                            batch.records);
    } catch (const NumericError& e) {
        throw halt(e.what());
    }

    MetricRow row;
    row.iteration = i;
    row.teacher_id = entry.teacher_id;
    row.ratio = entry.ratio;

    std::vector<double> advantages;
    if (rewards) {
        std::vector<double> divergences;
        divergences.reserve(score.records.size());
        for (const auto& rs : score.records) divergences.push_back(rs.divergence_mean);
        const std::vector<double> distill = distill_reward(divergences);
        std::vector<double> totals(distill.size());
        for (size_t j = 0; j < distill.size(); ++j)
            totals[j] = batch.acc_rewards[j] + distill[j];
        advantages = compute_advantages(totals).advantages;
        row.mean_reward_acc = mean_of(batch.acc_rewards);
        row.mean_reward_distill = mean_of(distill);
    }

    const LossAssembly assembly =
        assemble_objective(score, advantages, config_.grpo_beta, rewards, true);
    row.loss_total = assembly.values.loss_total;
    row.loss_grpo = assembly.values.loss_grpo;
    row.loss_jsd = assembly.values.loss_jsd;
    row.kl_ref = assembly.values.kl_ref;

    if (!std::isfinite(row.loss_total)) throw halt("non-finite loss");

    ParameterView grad = ParameterView::zeros_like(state.student.params());
    for (size_t j = 0; j < score.records.size(); ++j)
        state.student.accumulate_backward(score.records[j].student_trace, assembly.dlogits[j],
                                          grad);

    adamw_update(state.student.params(), state.m1, state.m2, grad, config_.optimizer, i);
    state.iteration = i;

    if (config_.eval_period > 0 && i % config_.eval_period == 0)
        row.eval_accuracy = evaluate_student(state.student, config_.eval_sample).overall_accuracy;

    state.metrics.push_back(row);
    return row;
}

EvalReport Trainer::evaluate_student(const Model& student, int sample_limit) const {
    std::span<const TaskInstance> instances(tasks_.eval);
    if (sample_limit > 0 && sample_limit < static_cast<int>(instances.size()))
        instances = instances.subspan(0, static_cast<size_t>(sample_limit));
    const auto generator = make_greedy_generator(student, max_label_tokens(tasks_));
    return evaluate(generator, instances);
}

RunResult Trainer::run() {
    TrainState state = init_state();
    while (state.iteration < plan_.entries.back().iteration) step(state);

    const auto dir = config_.run_dir(config_.mode);
    std::filesystem::create_directories(dir);
    plan_.write_csv(config_.schedule_csv_path());

    RunResult result;
    result.checkpoint_path = dir / "student_final.ckpt";
    save_model(state.student, result.checkpoint_path);
    result.metrics_path = dir / "metrics.csv";
    write_metrics_csv(state.metrics, result.metrics_path);

    result.final_eval = evaluate_student(state.student);
    nlohmann::json eval_doc;
    eval_doc["mode"] = config_.mode;
    eval_doc["iterations"] = state.iteration;
    eval_doc["overall_accuracy"] = result.final_eval.overall_accuracy;
    eval_doc["per_family_accuracy"] = result.final_eval.per_family_accuracy;
    eval_doc["per_family_count"] = result.final_eval.per_family_count;
    eval_doc["total_count"] = result.final_eval.total_count;
    std::ofstream eval_out(dir / "eval.json", std::ios::trunc | std::ios::binary);
    eval_out << eval_doc.dump(2) << '\n';
    return result;
}

PretrainResult pretrain_model(const ModelConfig& model_config, const TaskSet& tasks,
                              const PretrainConfig& pretrain, uint64_t seed) {
    if (tasks.train.empty() || tasks.eval.empty())
        throw ConfigError("pretrain: tasks must have train and eval splits");

    Model model = Model::random_init(model_config);
    ParameterView m1 = ParameterView::zeros_like(model.params());
    ParameterView m2 = ParameterView::zeros_like(model.params());
    OptimizerConfig opt;
    opt.learning_rate = pretrain.learning_rate;

    Rng rng(derive_seed(seed, "pretrain"));
    const int gen_budget = max_label_tokens(tasks);
    const int probe_size = std::min<int>(96, static_cast<int>(tasks.eval.size()));

    PretrainResult result{std::move(model), 0.0, 0};
    for (int64_t step = 1; step <= pretrain.steps; ++step) {
        // next-token loss on label + <eos> positions only
        ParameterView grad = ParameterView::zeros_like(result.model.params());
        std::vector<std::span<const int>> batch_sequences;
        std::vector<std::vector<int>> sequences;
        std::vector<size_t> prompt_lens;
        int64_t total_positions = 0;
        for (int b = 0; b < pretrain.batch; ++b) {
            const auto& task =
                tasks.train[static_cast<size_t>(rng.next_below(tasks.train.size()))];
            std::vector<int> seq = task.prompt_tokens;
            for (int id : vocab::encode(task.label)) seq.push_back(id);
            seq.push_back(vocab::kEos);
            total_positions += static_cast<int64_t>(seq.size() - task.prompt_tokens.size());
            prompt_lens.push_back(task.prompt_tokens.size());
            sequences.push_back(std::move(seq));
        }

        for (int b = 0; b < pretrain.batch; ++b) {
            const auto& seq = sequences[static_cast<size_t>(b)];
            const size_t prompt_len = prompt_lens[static_cast<size_t>(b)];
            const ForwardTrace trace = result.model.forward_trace(seq);
            std::vector<std::vector<double>> dlogits(
                seq.size(), std::vector<double>(model_config.vocab_size, 0.0));
            for (size_t pos = prompt_len; pos < seq.size(); ++pos) {
                const auto lp = log_softmax(trace.logits[pos - 1].values);
                const int target = seq[pos];
                auto& dz = dlogits[pos - 1];
                for (size_t k = 0; k < lp.size(); ++k)
                    dz[k] = (std::exp(lp[k]) - (static_cast<int>(k) == target ? 1.0 : 0.0)) /
                            static_cast<double>(total_positions);
            }
            result.model.accumulate_backward(trace, dlogits, grad);
        }
        adamw_update(result.model.params(), m1, m2, grad, opt, step);
        result.steps_run = step;

        if (step % pretrain.eval_every == 0 || step == pretrain.steps) {
            const auto generator = make_greedy_generator(result.model, gen_budget);
            const auto probe = evaluate(
                generator, std::span<const TaskInstance>(tasks.eval).subspan(
                               0, static_cast<size_t>(probe_size)));
            if (probe.overall_accuracy >= pretrain.target_accuracy) {
                const auto full = evaluate(generator, tasks.eval);
                result.heldout_accuracy = full.overall_accuracy;
                if (full.overall_accuracy >= pretrain.target_accuracy) return result;
            }
        }
    }
    const auto generator = make_greedy_generator(result.model, gen_budget);
    result.heldout_accuracy = evaluate(generator, tasks.eval).overall_accuracy;
    return result;
}

}  // namespace masters
