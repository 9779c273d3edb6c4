#pragma once

#include <map>
#include <string>
#include <string_view>

namespace ctxfilter {

// Fixed prompt strings. These are interface contracts: downstream judging and
// the golden files under templates/ must stay byte-identical to them, so edit
// with care. Slots use {name} syntax and are substituted by render_template().

inline constexpr std::string_view kResponsePlaceholder = "[Response provided]";

inline constexpr std::string_view kAssistantOmittedSystemMessage =
    "In this conversation, previous assistant responses are shown as '[Response provided]' "
    "to save memory. These are placeholders indicating the turn was already answered and "
    "has passed. Focus only on answering the user's most recent message.";

inline constexpr std::string_view kSummaryPromptTemplate =
    "Summarize the following assistant response in exactly one sentence: {response}. "
    "One-sentence summary:";

inline constexpr std::string_view kPairwiseJudgeFullHistoryTemplate =
    R"(You are an expert evaluator of AI assistant responses. You will evaluate two responses to round {round_num} of {total_rounds} in a multi-turn conversation.

CONVERSATION CONTEXT FOR RESPONSE A (All Past User and Assistant Turns):
{context_for_a}

RESPONSE A:
{first_resp}

CONVERSATION CONTEXT FOR RESPONSE B (All Past User and Assistant Turns):
{context_for_b}

RESPONSE B:
{second_resp}

EVALUATION CRITERIA:
You must compare the two responses on TWO separate dimensions and pick a winner for each:

1. Overall Quality: How well does the response address the user's current prompt?
   - Completeness in addressing the user's request
   - Accuracy of information provided
   - Clarity and coherence of the response
   - Helpfulness and usefulness to the user

2. On-Topic: Does the response stay focused on the conversation?
   - Stays on-topic and relevant to the conversation thread
   - Avoids topic drift, tangents, or unrelated content
   - Avoids repetitive phrases or unnecessary fillers

TASK:
For EACH dimension, directly compare the two responses and pick a winner. If the responses are roughly equal on a dimension, declare a tie. Provide your evaluation in the following JSON format:

{
  "quality_winner": "A" or "B" or "tie",
  "quality_justification": "<explanation comparing both responses on quality>",
  "ontopic_winner": "A" or "B" or "tie",
  "ontopic_justification": "<explanation comparing both responses on on-topic relevance>",
  "confidence": <float from 0.0 to 1.0 indicating how confident you are in your judgments>
}

Be objective and thorough in your evaluation. Respond ONLY with valid JSON.)";

inline constexpr std::string_view kPairwiseJudgeUserOnlyTemplate =
    R"(You are an expert evaluator of AI assistant responses. You will evaluate two responses to round {round_num} of {total_rounds} in a multi-turn conversation.

CONVERSATION CONTEXT (All User Prompts Up To This Round):
{context_prompt}

RESPONSE A:
{first_resp}

RESPONSE B:
{second_resp}

EVALUATION CRITERIA:
You must compare the two responses on TWO separate dimensions and pick a winner for each:

1. Overall Quality: How well does the response address the user's current prompt?
   - Completeness in addressing the user's request
   - Accuracy of information provided
   - Clarity and coherence of the response
   - Helpfulness and usefulness to the user

2. On-Topic: Does the response stay focused on the conversation?
   - Stays on-topic and relevant to the conversation thread
   - Avoids topic drift, tangents, or unrelated content
   - Avoids repetitive phrases or unnecessary fillers

TASK:
For EACH dimension, directly compare the two responses and pick a winner. If the responses are roughly equal on a dimension, declare a tie. Provide your evaluation in the following JSON format:

{
  "quality_winner": "A" or "B" or "tie",
  "quality_justification": "<explanation comparing both responses on quality>",
  "ontopic_winner": "A" or "B" or "tie",
  "ontopic_justification": "<explanation comparing both responses on on-topic relevance>",
  "confidence": <float from 0.0 to 1.0 indicating how confident you are in your judgments>
}

Be objective and thorough in your evaluation. Respond ONLY with valid JSON.)";

inline constexpr std::string_view kPromptClassificationTemplate =
    R"(Classify this user turn from a multi-turn conversation.

CONVERSATION CONTEXT (previous turns):
{conversation_context}

CURRENT USER TURN TO CLASSIFY:
{current_round_prompt}

CLASSIFICATION RULES:
First, identify context-dependent elements in the current turn:
- Pronouns with unclear referents (this, that, it, these, those, "the [noun]")
- Negations implying correction ("X is not right", "No", "Not X", "Don't", "Never")
- References to numbered/ordered items (the first, the second, etc.)
- Short fragments that only make sense as responses (e.g., "Really?", "Not X?")
- Imperatives about previous behavior (e.g., "do not repeat...")

CRITICAL: If ANY context-dependent elements exist, the turn CANNOT be new_ask.

CATEGORIES:
1. new_ask: A completely standalone prompt. Must be fully understandable without ANY prior conversation.
2. feedback: The user provides concrete, actionable feedback on a previous response. Examples: "Make it shorter", "X is not right, use Y instead", "Add more examples"
3. no_feedback: The user references a previous response without concrete feedback. Examples: "Reflect on your response", "The second one is wrong", "Not X?"

TASK:
Output ONLY this JSON (no other text):

{
  "context_dependent_elements": ["<list any found>"],
  "category": "<name>",
  "confidence": <1-10>
})";

inline constexpr std::string_view kNumericJudgeTemplate =
    R"(You are an expert evaluator of AI assistant responses. You will evaluate a response to round {round_num} of {total_rounds} in a multi-turn conversation.

FULL CONVERSATION CONTEXT (All User Prompts And This Assistant's Previous Responses):
{context_prompt}

CURRENT ROUND'S USER PROMPT:
{current_round_prompt}

ASSISTANT'S RESPONSE:
{response}

EVALUATION CRITERIA:
You must evaluate this response on TWO separate dimensions:

1. Overall Quality Score (1-10): How well does the response address the user's current prompt?
   - Completeness in addressing the user's request
   - Accuracy of information provided
   - Clarity and coherence of the response
   - Helpfulness and usefulness to the user

2. On-Topic Score (1-10): Does the response stay focused on the conversation?
   - Stays on-topic and relevant to the conversation thread
   - Avoids topic drift, tangents, or unrelated content
   - Avoids repetitive phrases or unnecessary fillers

TASK:
Evaluate this response on BOTH dimensions (1-10 scale). Provide your evaluation in the following JSON format:

{
  "quality_score": <integer from 1 to 10>,
  "ontopic_score": <integer from 1 to 10>,
  "quality_justification": "<brief explanation>",
  "ontopic_justification": "<brief explanation>"
}

Scoring guide for BOTH dimensions: 9-10: Excellent; 7-8: Good; 5-6: Adequate; 3-4: Poor; 1-2: Very poor.

Be objective and thorough in your evaluation. Respond ONLY with valid JSON.)";

/// Substitutes {name} slots that appear in `values`. Unknown braced text is
/// copied verbatim (the judge templates contain literal JSON braces), and
/// substituted values are never rescanned.
inline std::string render_template(std::string_view tmpl,
                                   const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            std::size_t close = tmpl.find('}', i + 1);
            if (close != std::string_view::npos) {
                std::string key(tmpl.substr(i + 1, close - i - 1));
                auto it = values.find(key);
                if (it != values.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(tmpl[i]);
        ++i;
    }
    return out;
}

} // namespace ctxfilter
