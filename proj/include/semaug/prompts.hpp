#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "semaug/common.hpp"

namespace semaug {

enum class TemplateId { clean_caption, explain, explain_triggers, zero_shot_classify };

inline const char* template_name(TemplateId t) {
  switch (t) {
    case TemplateId::clean_caption: return "clean_caption";
    case TemplateId::explain: return "explain";
    case TemplateId::explain_triggers: return "explain_triggers";
    case TemplateId::zero_shot_classify: return "zero_shot_classify";
  }
  return "?";
}

inline TemplateId template_from_name(const std::string& s) {
  if (s == "clean_caption") return TemplateId::clean_caption;
  if (s == "explain") return TemplateId::explain;
  if (s == "explain_triggers") return TemplateId::explain_triggers;
  if (s == "zero_shot_classify") return TemplateId::zero_shot_classify;
  throw ValidationError("unknown template '" + s + "'");
}

struct PromptTemplate {
  TemplateId id;
  std::string body;                         // named {placeholder} slots
  std::vector<std::string> placeholders;    // exactly the slots the body declares
  std::size_t max_response_tokens = 0;      // instruction to the model, not enforced locally
};

inline const PromptTemplate& get_template(TemplateId id) {
  static const PromptTemplate clean{
      TemplateId::clean_caption,
      R"(You are an AI assistant that cleans and corrects image descriptions.
Improve the following description by fixing grammatical errors,
removing repetitive phrases, and ensuring it is clear and coherent.
Provide only the cleaned description without any additional notes
or explanations. If the description is too corrupted to fix, respond with
"INVALID DESCRIPTION".

Description: {text})",
      {"text"},
      256};

  static const PromptTemplate explain{
      TemplateId::explain,
      R"(Analyze this meme text: '{text}' and image: '{img}'
Your task: Explain what idea or message this meme is trying to convey.
Rules:
1. Response must be ONE clear, concise sentence (max 50 tokens)
2. Focus on the main message or emotional impact
3. Be specific and direct
4. Only respond 'NA' if the text is completely incomprehensible)",
      {"text", "img"},
      50};

  static const PromptTemplate triggers{
      TemplateId::explain_triggers,
      R"(You are analyzing memes to train a hateful content classifier.
It is crucial that you reproduce all text exactly as provided,
including any profanity, slurs, or offensive terms.
Do not mask, omit, or alter them.

Provide:
1) A brief explanation (max 50 tokens) of the meme's implied meaning
and cultural context.
2) A combined TRIGGERS list (max 20 tokens), which must include:
   - Themes or categories (e.g., racism, islamophobia, etc.)
   - Any hateful or offensive words/phrases directly quoted from the
   meme text.
Use the following plain-text format (no extra commentary):
[Explanation]
TRIGGERS: [themes and words]
Meme text: {text}

Meme image: {img}

Response:)",
      {"text", "img"},
      70};

  static const PromptTemplate zero_shot{
      TemplateId::zero_shot_classify,
      R"(You are an expert in identifying propaganda techniques in images.
You have a hierarchy of propaganda techniques with the following nodes
(each bullet is a node):
- ROOT
  - Logos
    - Repetition
    - Obfuscation, Intentional vagueness, Confusion
    - Reasoning
      - Simplification
        - Causal Oversimplification
        - Black-and-white Fallacy/Dictatorship
        - Thought-terminating cliché
      - Distraction
        - Misrepresentation of Someone's Position (Straw Man)
        - Presenting Irrelevant Data (Red Herring)
        - Whataboutism
    - Justification
      - Slogans
      - Bandwagon
      - Appeal to authority
      - Flag-waving
      - Appeal to fear/prejudice
  - Ethos
    - Appeal to authority
    - Glittering generalities (Virtue)
    - Bandwagon
    - Ad Hominem
      - Doubt
      - Name calling/Labeling
      - Smears
      - Reductio ad hitlerum
      - Whataboutism
    - Transfer
  - Pathos
    - Exaggeration/Minimisation
    - Loaded Language
    - Appeal to (Strong) Emotions
    - Appeal to fear/prejudice
    - Flag-waving
    - Transfer

Instructions:
- Return only a JSON object with:
  {
    "labels": ["<label1>", "<label2>", ...]
  }
- Do not include explanations, reasoning, or any text outside of the JSON object.
- Do not include code blocks, markdown formatting, or backticks.
- The labels must be chosen from the provided hierarchy.
- Multiple labels are allowed if applicable. If none apply,
return an empty list for "labels".
- The final answer must be a valid JSON object without extra formatting.

Meme text: {text}
Meme image: {img})",
      {"text", "img"},
      128};

  switch (id) {
    case TemplateId::clean_caption: return clean;
    case TemplateId::explain: return explain;
    case TemplateId::explain_triggers: return triggers;
    case TemplateId::zero_shot_classify: return zero_shot;
  }
  throw ValidationError("unknown template id");
}

// Exact textual substitution of {placeholder} slots. Field values are
// inserted as-is: no escaping, no trimming. A single left-to-right pass over
// the template body, so inserted values are never rescanned and a value that
// happens to contain "{img}" stays literal.
inline std::string render_prompt(TemplateId id,
                                 const std::map<std::string, std::string>& field_values) {
  const PromptTemplate& t = get_template(id);
  for (const auto& [key, _] : field_values) {
    if (std::find(t.placeholders.begin(), t.placeholders.end(), key) == t.placeholders.end())
      throw ValidationError(std::string("render_prompt: template '") + template_name(id) +
                            "' has no placeholder '" + key + "'");
  }
  for (const std::string& name : t.placeholders) {
    if (!field_values.count(name))
      throw ValidationError(std::string("render_prompt: missing binding for '{") + name +
                            "}' in template '" + template_name(id) + "'");
  }
  std::string out;
  out.reserve(t.body.size());
  std::size_t i = 0;
  while (i < t.body.size()) {
    if (t.body[i] == '{') {
      const std::size_t close = t.body.find('}', i + 1);
      if (close != std::string::npos) {
        const std::string name = t.body.substr(i + 1, close - i - 1);
        auto it = field_values.find(name);
        if (it != field_values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += t.body[i++];
  }
  return out;
}

}  // namespace semaug
