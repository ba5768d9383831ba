#include "masters/config.hpp"

#include <cmath>
#include <fstream>

#include "masters/rng.hpp"
#include "masters/schedule.hpp"

namespace masters {

namespace {

ModelConfig model_from_json(const nlohmann::json& j, const ModelConfig& defaults) {
    ModelConfig cfg = defaults;
    cfg.context_len = j.value("context_len", defaults.context_len);
    cfg.n_layers = j.value("n_layers", defaults.n_layers);
    cfg.d_model = j.value("d_model", defaults.d_model);
    cfg.n_heads = j.value("n_heads", defaults.n_heads);
    return cfg;
}

nlohmann::json model_to_json(const ModelConfig& cfg) {
    return {{"context_len", cfg.context_len},
            {"n_layers", cfg.n_layers},
            {"d_model", cfg.d_model},
            {"n_heads", cfg.n_heads}};
}

}  // namespace

std::string format_ratio(double ratio) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", ratio);
    return buf;
}

bool RunConfig::rewards_enabled() const {
    if (rewards_override) return *rewards_override;
    return mode == "masters";
}

std::string RunConfig::data_source() const {
    if (data_source_override) return *data_source_override;
    return mode == "naive" ? "labels" : "gen";
}

double RunConfig::effective_r_max(const TeacherSpec& teacher) const {
    return mode == "naive" ? 0.0 : teacher.r_max;
}

std::filesystem::path RunConfig::teacher_base_path(const std::string& id) const {
    return teachers_dir() / (id + ".ckpt");
}

std::filesystem::path RunConfig::staged_teacher_path(const std::string& id, double ratio) const {
    return teachers_dir() / (id + ".r" + format_ratio(ratio) + ".ckpt");
}

std::filesystem::path RunConfig::mask_path(const std::string& id, double ratio) const {
    return masks_dir() / (id + ".r" + format_ratio(ratio) + ".mask");
}

std::filesystem::path RunConfig::run_dir(const std::string& run_mode) const {
    return workdir / "runs" / run_mode;
}

void RunConfig::validate() const {
    if (mode != "naive" && mode != "progressive" && mode != "masters")
        throw ConfigError("config: mode must be naive, progressive, or masters (got '" + mode + "')");
    if (judge != "rule" && judge != "external")
        throw ConfigError("config: judge must be rule or external");
    if (families.empty()) throw ConfigError("config: tasks.families is empty");
    if (train_count < 1) throw ConfigError("config: tasks.train_count must be >= 1");
    if (eval_count < 1) throw ConfigError("config: tasks.eval_count must be >= 1");
    if (distill_count < 0 || distill_count > train_count)
        throw ConfigError("config: tasks.distill_count must lie in [0, train_count]");
    if (difficulty < 1) throw ConfigError("config: tasks.difficulty must be >= 1");
    if (group_size < 2) throw ConfigError("config: group_size must be >= 2");
    if (mix_student < 0 || mix_teacher < 0)
        throw ConfigError("config: mix counts must be nonnegative");
    if (mix_student + mix_teacher != group_size)
        throw ConfigError("config: mix.student + mix.teacher must equal group_size (" +
                          std::to_string(mix_student) + "+" + std::to_string(mix_teacher) +
                          " != " + std::to_string(group_size) + ")");
    if (teachers.empty()) throw ConfigError("config: teachers list is empty");
    if (optimizer.learning_rate < 0.0)
        throw ConfigError("config: optimizer.learning_rate must be nonnegative");
    if (grpo_beta < 0.0) throw ConfigError("config: grpo_beta must be nonnegative");
    if (eval_period < 0) throw ConfigError("config: eval_period must be nonnegative");
    if (workers < 1) throw ConfigError("config: workers must be >= 1");
    const std::string source = data_source();
    if (source != "gen" && source != "labels")
        throw ConfigError("config: data_source must be gen or labels");

    student.validate();
    int64_t budget_total = 0;
    const int64_t pool_per_family = distill_count > 0 ? distill_count : train_count;
    const int64_t train_questions =
        static_cast<int64_t>(families.size()) * pool_per_family;
    for (const auto& teacher : teachers) {
        if (teacher.id.empty()) throw ConfigError("config: teacher id is empty");
        if (teacher.iterations < 1)
            throw ConfigError("config: teacher '" + teacher.id + "' iterations must be >= 1");
        teacher.model.validate();
        // also enforces r_max = k * s and budget >= stage count
        const auto sched = StageSchedule::make(teacher.r_max, decrement, teacher.iterations);
        if (train_questions < sched.stage_count)
            throw ConfigError("config: teacher '" + teacher.id + "' needs at least " +
                              std::to_string(sched.stage_count) + " train questions for its " +
                              std::to_string(sched.stage_count) + " stages");
        budget_total += teacher.iterations;
    }
    if (iterations != 0 && iterations != budget_total)
        throw ConfigError("config: iterations (" + std::to_string(iterations) +
                          ") must equal the sum of teacher budgets (" +
                          std::to_string(budget_total) + ")");
    sampling.validate();
}

RunConfig config_from_json(nlohmann::json doc) {
    if (doc.is_null()) doc = nlohmann::json::object();
    RunConfig cfg;
    cfg.seed = doc.value("seed", cfg.seed);
    cfg.mode = doc.value("mode", cfg.mode);
    cfg.workdir = std::filesystem::path(doc.value("workdir", cfg.workdir.string()));

    const nlohmann::json tasks = doc.value("tasks", nlohmann::json::object());
    if (tasks.contains("families")) {
        for (const auto& name : tasks.at("families"))
            cfg.families.push_back(family_from_name(name.get<std::string>()));
    } else {
        cfg.families = all_families();
    }
    cfg.train_count = tasks.value("train_count", cfg.train_count);
    cfg.eval_count = tasks.value("eval_count", cfg.eval_count);
    cfg.difficulty = tasks.value("difficulty", cfg.difficulty);
    cfg.distill_count = tasks.value("distill_count", cfg.distill_count);

    ModelConfig model_defaults;
    model_defaults.vocab_size = vocab::size();
    model_defaults.context_len = 48;
    model_defaults.n_layers = 2;
    model_defaults.d_model = 24;
    model_defaults.n_heads = 4;

    cfg.student = model_from_json(doc.value("student", nlohmann::json::object()), model_defaults);
    cfg.student.vocab_size = vocab::size();
    cfg.student.seed = derive_seed(cfg.seed, "init", "student");

    if (doc.contains("teachers")) {
        for (const auto& tj : doc.at("teachers")) {
            TeacherSpec spec;
            spec.id = tj.value("id", std::string("teacher"));
            ModelConfig teacher_defaults = model_defaults;
            teacher_defaults.n_layers = 3;
            teacher_defaults.d_model = 56;
            spec.model = model_from_json(tj, teacher_defaults);
            spec.model.vocab_size = vocab::size();
            spec.model.seed = derive_seed(cfg.seed, "init", "teacher", spec.id);
            spec.r_max = tj.value("r_max", spec.r_max);
            spec.iterations = tj.value("iterations", static_cast<int64_t>(0));
            cfg.teachers.push_back(std::move(spec));
        }
    } else {
        TeacherSpec spec;
        spec.id = "large";
        spec.model = model_defaults;
        spec.model.n_layers = 3;
        spec.model.d_model = 56;
        spec.model.vocab_size = vocab::size();
        spec.model.seed = derive_seed(cfg.seed, "init", "teacher", spec.id);
        cfg.teachers.push_back(std::move(spec));
    }

    cfg.decrement = doc.value("s", cfg.decrement);
    cfg.iterations = doc.value("iterations", cfg.iterations);
    // an omitted per-teacher budget takes an equal share of the total
    int64_t unassigned = 0;
    for (const auto& t : cfg.teachers)
        if (t.iterations == 0) ++unassigned;
    if (unassigned > 0) {
        int64_t assigned = 0;
        for (const auto& t : cfg.teachers) assigned += t.iterations;
        const int64_t total = cfg.iterations > 0 ? cfg.iterations : 200 * unassigned + assigned;
        const int64_t share = (total - assigned) / unassigned;
        int64_t remainder = (total - assigned) - share * unassigned;
        for (auto& t : cfg.teachers) {
            if (t.iterations == 0) {
                t.iterations = share + (remainder > 0 ? 1 : 0);
                if (remainder > 0) --remainder;
            }
        }
    }
    if (cfg.iterations == 0)
        for (const auto& t : cfg.teachers) cfg.iterations += t.iterations;

    cfg.group_size = doc.value("group_size", cfg.group_size);
    const nlohmann::json mix = doc.value("mix", nlohmann::json::object());
    cfg.mix_student = mix.value("student", cfg.mix_student);
    cfg.mix_teacher = mix.value("teacher", cfg.mix_teacher);

    const nlohmann::json sampling = doc.value("sampling", nlohmann::json::object());
    cfg.sampling.temperature = sampling.value("temperature", cfg.sampling.temperature);
    cfg.sampling.top_p = sampling.value("top_p", cfg.sampling.top_p);
    cfg.sampling.top_k = sampling.value("top_k", cfg.sampling.top_k);
    cfg.sampling.repetition_penalty =
        sampling.value("repetition_penalty", cfg.sampling.repetition_penalty);
    cfg.sampling.max_new_tokens = sampling.value("max_new_tokens", cfg.sampling.max_new_tokens);

    cfg.judge = doc.value("judge", cfg.judge);

    const nlohmann::json opt = doc.value("optimizer", nlohmann::json::object());
    cfg.optimizer.learning_rate = opt.value("learning_rate", cfg.optimizer.learning_rate);
    cfg.optimizer.beta1 = opt.value("beta1", cfg.optimizer.beta1);
    cfg.optimizer.beta2 = opt.value("beta2", cfg.optimizer.beta2);
    cfg.optimizer.weight_decay = opt.value("weight_decay", cfg.optimizer.weight_decay);
    cfg.optimizer.eps = opt.value("eps", cfg.optimizer.eps);

    cfg.grpo_beta = doc.value("grpo_beta", cfg.grpo_beta);
    if (doc.contains("rewards_enabled") && !doc.at("rewards_enabled").is_null())
        cfg.rewards_override = doc.at("rewards_enabled").get<bool>();
    if (doc.contains("data_source") && !doc.at("data_source").is_null())
        cfg.data_source_override = doc.at("data_source").get<std::string>();
    cfg.student_refresh_per_stage =
        doc.value("student_refresh_per_stage", cfg.student_refresh_per_stage);
    cfg.reference_refresh_per_stage =
        doc.value("reference_refresh_per_stage", cfg.reference_refresh_per_stage);
    cfg.eval_period = doc.value("eval_period", cfg.eval_period);
    cfg.eval_sample = doc.value("eval_sample", cfg.eval_sample);
    cfg.workers = doc.value("workers", cfg.workers);

    const nlohmann::json pre = doc.value("pretrain", nlohmann::json::object());
    cfg.pretrain.steps = pre.value("steps", cfg.pretrain.steps);
    cfg.pretrain.batch = pre.value("batch", cfg.pretrain.batch);
    cfg.pretrain.learning_rate = pre.value("learning_rate", cfg.pretrain.learning_rate);
    cfg.pretrain.target_accuracy = pre.value("target_accuracy", cfg.pretrain.target_accuracy);
    cfg.pretrain.eval_every = pre.value("eval_every", cfg.pretrain.eval_every);

    cfg.validate();
    return cfg;
}

nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json doc;
    doc["seed"] = cfg.seed;
    doc["mode"] = cfg.mode;
    doc["workdir"] = cfg.workdir.string();

    nlohmann::json families = nlohmann::json::array();
    for (TaskFamily family : cfg.families) families.push_back(family_name(family));
    doc["tasks"] = {{"families", families},
                    {"train_count", cfg.train_count},
                    {"eval_count", cfg.eval_count},
                    {"difficulty", cfg.difficulty},
                    {"distill_count", cfg.distill_count}};

    doc["student"] = model_to_json(cfg.student);
    nlohmann::json teachers = nlohmann::json::array();
    for (const auto& t : cfg.teachers) {
        nlohmann::json tj = model_to_json(t.model);
        tj["id"] = t.id;
        tj["r_max"] = t.r_max;
        tj["iterations"] = t.iterations;
        teachers.push_back(std::move(tj));
    }
    doc["teachers"] = std::move(teachers);

    doc["s"] = cfg.decrement;
    doc["iterations"] = cfg.iterations;
    doc["group_size"] = cfg.group_size;
    doc["mix"] = {{"student", cfg.mix_student}, {"teacher", cfg.mix_teacher}};
    doc["sampling"] = {{"temperature", cfg.sampling.temperature},
                       {"top_p", cfg.sampling.top_p},
                       {"top_k", cfg.sampling.top_k},
                       {"repetition_penalty", cfg.sampling.repetition_penalty},
                       {"max_new_tokens", cfg.sampling.max_new_tokens}};
    doc["judge"] = cfg.judge;
    doc["optimizer"] = {{"learning_rate", cfg.optimizer.learning_rate},
                        {"beta1", cfg.optimizer.beta1},
                        {"beta2", cfg.optimizer.beta2},
                        {"weight_decay", cfg.optimizer.weight_decay},
                        {"eps", cfg.optimizer.eps}};
    doc["grpo_beta"] = cfg.grpo_beta;
    doc["rewards_enabled"] =
        cfg.rewards_override ? nlohmann::json(*cfg.rewards_override) : nlohmann::json(nullptr);
    doc["data_source"] = cfg.data_source_override ? nlohmann::json(*cfg.data_source_override)
                                                  : nlohmann::json(nullptr);
    doc["student_refresh_per_stage"] = cfg.student_refresh_per_stage;
    doc["reference_refresh_per_stage"] = cfg.reference_refresh_per_stage;
    doc["eval_period"] = cfg.eval_period;
    doc["eval_sample"] = cfg.eval_sample;
    doc["workers"] = cfg.workers;
    doc["pretrain"] = {{"steps", cfg.pretrain.steps},
                       {"batch", cfg.pretrain.batch},
                       {"learning_rate", cfg.pretrain.learning_rate},
                       {"target_accuracy", cfg.pretrain.target_accuracy},
                       {"eval_every", cfg.pretrain.eval_every}};
    return doc;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw_value = assignment.substr(eq + 1);

    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw_value);
    } catch (const nlohmann::json::parse_error&) {
        value = raw_value;  // bare strings stay strings
    }

    nlohmann::json* node = &doc;
    size_t begin = 0;
    std::vector<std::string> parts;
    while (begin <= path.size()) {
        const size_t dot = path.find('.', begin);
        parts.push_back(path.substr(begin, dot == std::string::npos ? dot : dot - begin));
        if (dot == std::string::npos) break;
        begin = dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        const std::string& part = parts[i];
        if (!part.empty() && std::isdigit(static_cast<unsigned char>(part[0]))) {
            node = &(*node)[static_cast<size_t>(std::stoul(part))];
        } else {
            node = &(*node)[part];
        }
    }
    const std::string& last = parts.back();
    if (!last.empty() && std::isdigit(static_cast<unsigned char>(last[0]))) {
        (*node)[static_cast<size_t>(std::stoul(last))] = value;
    } else {
        (*node)[last] = value;
    }
}

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot open config file " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    for (const auto& assignment : overrides) apply_override(doc, assignment);
    try {
        return config_from_json(std::move(doc));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config error in " + path.string() + ": " + e.what());
    }
}

}  // namespace masters
