#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace masters {

struct JudgeVerdict {
    double score{0.0};  // binary judges emit exactly 0.0 or 1.0
    std::optional<std::string> rationale;
    bool unparseable{false};
};

// Deterministic rule-based judge: 1 iff the normalized answer extracted from
// the generated text equals the normalized label. Empty and degenerately
// repetitive responses score 0. Total function, never throws.
JudgeVerdict rule_judge(std::string_view question, std::string_view generated,
                        std::string_view label);

// lowercase, strip punctuation, collapse whitespace, canonicalize integer tokens
std::string normalize_answer(std::string_view text);

// Portion of the normalized text after the last "answer is", if any.
std::string extract_answer(std::string_view normalized);

// A token 4-gram repeating >= 3 times consecutively marks a response repetitive.
bool is_degenerate_repetition(std::string_view text);

struct JudgePromptPair {
    std::string evaluation_prompt;
    std::string parsing_prompt;
};

// Raw two-stage templates with {} slots (question / ground truth / generated
// text, then overall summary).
const std::string& evaluation_prompt_template();
const std::string& parsing_prompt_template();

// Fills the template slots. The parsing prompt's summary slot is filled with
// `summary` (the first-stage reply), empty by default so the tags stay intact.
JudgePromptPair render_judge_prompts(std::string_view question, std::string_view generated,
                                     std::string_view label, std::string_view summary = "");

// Recovers a tag body from a rendered prompt (inverse of the slot fill).
std::optional<std::string> extract_tag(std::string_view rendered, std::string_view tag);

// Reads the integer inside <answer></answer>, else the final standalone 0/1
// token; anything else is score 0 with the unparseable flag set.
JudgeVerdict parse_judge_reply(std::string_view reply);

}  // namespace masters
