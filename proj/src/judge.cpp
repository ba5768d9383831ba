#include "masters/judge.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <vector>

namespace masters {

namespace {

const std::string kEvaluationTemplate = R"(System:
You are an evaluation assistant that gives accuracy scores
compared with Ground Truth and Generated Text from AI.
Question is in <question> </question> tag.
Ground Truth is in <ground truth> </ground truth> tag.
Generated Text in <generated text> </generated text> tag.
After reading the Question, compare the Generated Text
against the Ground Truth summary:
  - If the Generated Text fully and correctly captures the core point → 1
  - If it is incorrect or irrelevant → 0
  - If it has repetitive response → 0
  - If it has empty response → 0
Output the numerical evaluation score (0 or 1) after giving a brief explanation.
  - The evaluation score should be wrapped in <answer> </answer> tag.

User:
<question>
{}
</question>

<ground truth>
{}
</ground truth>

<generated text>
{}
</generated text>

Provide the numerical evaluation score after giving a brief explanation.
The evaluation score should be wrapped in <answer> </answer> tag.
)";

const std::string kParsingTemplate = R"(System:
You are an evaluation assistant that gives binary accuracy scores (0 or 1)
based on the provided overall summary.
The summary will be wrapped inside <overall_summary>
and </overall_summary> tag.
After reading the summary, briefly output the integer score (0 or 1)
without any text.
Your final output must include only the integer value.

User:
<overall_summary>
{}
</overall_summary>

Please output your integer accuracy score (0 or 1)
based on the summary above without any text.
)";

bool is_strippable_punct(char c) {
    static const std::string punct = ".,;:!?'\"`()[]{}";
    return punct.find(c) != std::string::npos;
}

std::string canonicalize_token(const std::string& token) {
    size_t pos = 0;
    bool negative = false;
    if (pos < token.size() && (token[pos] == '+' || token[pos] == '-')) {
        negative = token[pos] == '-';
        ++pos;
    }
    if (pos >= token.size()) return token;
    for (size_t i = pos; i < token.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(token[i]))) return token;
    while (pos < token.size() - 1 && token[pos] == '0') ++pos;
    std::string digits = token.substr(pos);
    if (negative && digits != "0") return "-" + digits;
    return digits;
}

std::vector<std::string> split_tokens(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!current.empty()) tokens.push_back(std::move(current)), current.clear();
        } else {
            current.push_back(c);
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::string replace_slots(std::string templ, std::initializer_list<std::string_view> values) {
    size_t from = 0;
    for (std::string_view value : values) {
        const size_t at = templ.find("{}", from);
        if (at == std::string::npos) break;
        templ.replace(at, 2, value);
        from = at + value.size();
    }
    return templ;
}

std::string trim(std::string_view s) {
    size_t begin = 0, end = s.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(s[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1]))) --end;
    return std::string(s.substr(begin, end - begin));
}

}  // namespace

std::string normalize_answer(std::string_view text) {
    std::string cleaned;
    cleaned.reserve(text.size());
    for (char c : text) {
        if (is_strippable_punct(c)) {
            cleaned.push_back(' ');
        } else {
            cleaned.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    std::string out;
    for (auto& token : split_tokens(cleaned)) {
        if (!out.empty()) out.push_back(' ');
        out += canonicalize_token(token);
    }
    return out;
}

std::string extract_answer(std::string_view normalized) {
    static const std::string marker = "answer is";
    const size_t at = normalized.rfind(marker);
    if (at == std::string::npos) return std::string(normalized);
    return trim(normalized.substr(at + marker.size()));
}

bool is_degenerate_repetition(std::string_view text) {
    const auto tokens = split_tokens(normalize_answer(text));
    constexpr size_t gram = 4, repeats = 3;
    if (tokens.size() < gram * repeats) return false;
    for (size_t start = 0; start + gram * repeats <= tokens.size(); ++start) {
        bool all_equal = true;
        for (size_t rep = 1; rep < repeats && all_equal; ++rep)
            for (size_t j = 0; j < gram && all_equal; ++j)
                all_equal = tokens[start + j] == tokens[start + rep * gram + j];
        if (all_equal) return true;
    }
    return false;
}

JudgeVerdict rule_judge(std::string_view /*question*/, std::string_view generated,
                        std::string_view label) {
    const std::string norm_generated = normalize_answer(generated);
    if (norm_generated.empty()) return {0.0, "empty response", false};
    if (is_degenerate_repetition(generated)) return {0.0, "repetitive response", false};
    const bool match = extract_answer(norm_generated) == normalize_answer(label);
    return {match ? 1.0 : 0.0, std::nullopt, false};
}

const std::string& evaluation_prompt_template() { return kEvaluationTemplate; }
const std::string& parsing_prompt_template() { return kParsingTemplate; }

JudgePromptPair render_judge_prompts(std::string_view question, std::string_view generated,
                                     std::string_view label, std::string_view summary) {
    JudgePromptPair pair;
    pair.evaluation_prompt = replace_slots(kEvaluationTemplate, {question, label, generated});
    pair.parsing_prompt = replace_slots(kParsingTemplate, {summary});
    return pair;
}

std::optional<std::string> extract_tag(std::string_view rendered, std::string_view tag) {
    // the template's instruction text mentions the tags too; the fill block
    // is the last open-tag-on-its-own-line occurrence
    const std::string open = "<" + std::string(tag) + ">\n";
    const std::string close = "\n</" + std::string(tag) + ">";
    const size_t begin = rendered.rfind(open);
    if (begin == std::string_view::npos) return std::nullopt;
    const size_t body = begin + open.size();
    const size_t end = rendered.find(close, body);
    if (end == std::string_view::npos) return std::nullopt;
    return std::string(rendered.substr(body, end - body));
}

JudgeVerdict parse_judge_reply(std::string_view reply) {
    const size_t open = reply.find("<answer>");
    if (open != std::string_view::npos) {
        const size_t body = open + 8;
        const size_t close = reply.find("</answer>", body);
        if (close != std::string_view::npos) {
            const std::string inner = trim(reply.substr(body, close - body));
            if (inner == "0") return {0.0, std::nullopt, false};
            if (inner == "1") return {1.0, std::nullopt, false};
        }
    }
    const auto tokens = split_tokens(reply);
    for (auto it = tokens.rbegin(); it != tokens.rend(); ++it) {
        if (*it == "0") return {0.0, std::nullopt, false};
        if (*it == "1") return {1.0, std::nullopt, false};
    }
    return {0.0, "unparseable judge reply", true};
}

}  // namespace masters
