#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semaug/datasets.hpp"
#include "semaug/llm_client.hpp"

namespace semaug {

inline const std::vector<std::string>& default_refusal_lexicon() {
  static const std::vector<std::string> lex = {
      "I apologize",
      "I cannot",
      "I'm not able to",
      "do not feel comfortable",
  };
  return lex;
}

// Refusals announce themselves early; scanning a bounded prefix avoids false
// positives on completions that merely quote refusal-like phrases later on.
inline bool detect_refusal(const std::string& text,
                           const std::vector<std::string>& lexicon = default_refusal_lexicon()) {
  const std::string head = text.substr(0, 200);
  for (const std::string& phrase : lexicon)
    if (icontains(head, phrase)) return true;
  return false;
}

struct AugmentOptions {
  std::string model_id = "mock-model";
  double clean_temperature = 0.0;
  double explain_temperature = 0.7;
  std::vector<std::string> refusal_lexicon = default_refusal_lexicon();
  std::vector<std::string> captioner_preference = {"blip", "git", "human"};
};

// ---------------------------------------------------------------------------
// Caption cleaning
// ---------------------------------------------------------------------------

struct CleanResult {
  bool valid = false;
  std::string cleaned;  // nonempty iff valid
  std::string digest;
};

namespace detail {

inline std::string strip_quotes_and_period(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                        (s.front() == '\'' && s.back() == '\'')))
    s = trim(s.substr(1, s.size() - 2));
  if (!s.empty() && s.back() == '.') s = trim(s.substr(0, s.size() - 1));
  return s;
}

}  // namespace detail

inline bool is_invalid_description(const std::string& completion) {
  const std::string t = trim(completion);
  if (t.empty()) return true;
  static const std::string kSentinel = "INVALID DESCRIPTION";
  if (icontains(t.substr(0, kSentinel.size() + 2), kSentinel)) return true;
  return to_lower_ascii(detail::strip_quotes_and_period(t)) == to_lower_ascii(kSentinel);
}

// Deterministic by construction: temperature 0 and a fixed run index, so the
// same caption always maps to the same cache entry.
inline CleanResult clean_caption(LlmClient& client, const std::string& caption,
                                 const AugmentOptions& opts) {
  CompletionRequest req;
  req.template_id = TemplateId::clean_caption;
  req.field_values = {{"text", caption}};
  req.model_id = opts.model_id;
  req.temperature = opts.clean_temperature;
  req.run_index = 0;
  const Completion c = client.complete(req);
  CleanResult r;
  r.digest = c.digest;
  if (detect_refusal(c.raw_text, opts.refusal_lexicon) || is_invalid_description(c.raw_text)) {
    r.valid = false;
    return r;
  }
  r.cleaned = trim(c.raw_text);
  r.valid = !r.cleaned.empty();
  return r;
}

// ---------------------------------------------------------------------------
// Explanation generation
// ---------------------------------------------------------------------------

inline bool is_na_response(const std::string& completion) {
  return detail::strip_quotes_and_period(completion) == "NA";
}

struct ExplanationResult {
  std::optional<std::string> explanation;  // absent on NA or refusal
  bool refusal = false;
  std::string digest;
};

inline ExplanationResult gen_explanation(LlmClient& client, const std::string& text,
                                         const std::string& img_binding,
                                         const AugmentOptions& opts, int run_index) {
  CompletionRequest req;
  req.template_id = TemplateId::explain;
  req.field_values = {{"text", text}, {"img", img_binding}};
  req.model_id = opts.model_id;
  req.temperature = opts.explain_temperature;
  req.run_index = run_index;
  const Completion c = client.complete(req);
  ExplanationResult r;
  r.digest = c.digest;
  if (detect_refusal(c.raw_text, opts.refusal_lexicon)) {
    r.refusal = true;
    return r;
  }
  if (is_na_response(c.raw_text)) return r;
  const std::string body = trim(c.raw_text);
  if (!body.empty()) r.explanation = body;
  return r;
}

// ---------------------------------------------------------------------------
// Trigger generation
// ---------------------------------------------------------------------------

struct TriggerParse {
  std::string explanation;
  std::vector<std::string> triggers;
};

namespace detail {

inline bool is_trigger_line(const std::string& line, std::size_t* after_prefix) {
  std::size_t i = 0;
  while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
  static const std::string kWord = "triggers";
  if (to_lower_ascii(line.substr(i, kWord.size())) != kWord) return false;
  i += kWord.size();
  while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
  if (i >= line.size() || line[i] != ':') return false;
  *after_prefix = i + 1;
  return true;
}

inline std::string strip_one_bracket_pair(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = trim(s.substr(1, s.size() - 2));
  return s;
}

// Split on commas outside single or double quotes. Quotes are kept in the
// items; models quote offensive phrases and downstream consumers want them
// verbatim.
inline std::vector<std::string> split_trigger_items(const std::string& content) {
  std::vector<std::string> items;
  std::string cur;
  char quote = 0;
  for (char ch : content) {
    if (quote) {
      if (ch == quote) quote = 0;
      cur += ch;
      continue;
    }
    if (ch == '"' || ch == '\'') {
      quote = ch;
      cur += ch;
      continue;
    }
    if (ch == ',') {
      items.push_back(cur);
      cur.clear();
      continue;
    }
    cur += ch;
  }
  items.push_back(cur);
  std::vector<std::string> out;
  for (std::string& item : items) {
    std::string t = trim(item);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

// The trigger line is the last line starting with "TRIGGERS:" (any case,
// leading whitespace allowed). The list runs from after the colon to the end
// of the completion, so wrapped lists still parse. Everything above the
// trigger line is the explanation.
inline TriggerParse parse_trigger_output(const std::string& raw) {
  const std::vector<std::string> lines = split_lines(raw);
  std::size_t trigger_line = lines.size();
  std::size_t after_prefix = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::size_t ap = 0;
    if (detail::is_trigger_line(lines[i], &ap)) {
      trigger_line = i;
      after_prefix = ap;
    }
  }
  if (trigger_line == lines.size())
    throw ValidationError("no TRIGGERS: line in completion");

  TriggerParse out;
  std::string expl;
  for (std::size_t i = 0; i < trigger_line; ++i) {
    if (i) expl += "\n";
    expl += lines[i];
  }
  out.explanation = detail::strip_one_bracket_pair(expl);

  std::string content = lines[trigger_line].substr(after_prefix);
  for (std::size_t i = trigger_line + 1; i < lines.size(); ++i) content += "\n" + lines[i];
  content = detail::strip_one_bracket_pair(content);
  std::vector<std::string> items = detail::split_trigger_items(content);
  if (items.size() == 1) {
    const std::string lone = to_lower_ascii(detail::strip_quotes_and_period(items[0]));
    if (lone == "none" || lone == "n/a") items.clear();
  }
  out.triggers = std::move(items);
  return out;
}

struct TriggerResult {
  std::optional<std::string> explanation;
  std::optional<std::vector<std::string>> triggers;  // nonempty when present
  bool refusal = false;
  bool parse_error = false;
  std::string digest;
};

// One retry on refusal or unparseable output, bypassing the cache lookup so
// the retry actually reaches the provider. Whatever the retry yields stands.
inline TriggerResult gen_triggers(LlmClient& client, const std::string& text,
                                  const std::string& img_binding, const AugmentOptions& opts,
                                  int run_index) {
  CompletionRequest req;
  req.template_id = TemplateId::explain_triggers;
  req.field_values = {{"text", text}, {"img", img_binding}};
  req.model_id = opts.model_id;
  req.temperature = opts.explain_temperature;
  req.run_index = run_index;

  TriggerResult r;
  for (int attempt = 0; attempt < 2; ++attempt) {
    req.cache_policy = attempt == 0 ? CachePolicy::use : CachePolicy::refresh;
    const Completion c = client.complete(req);
    r.digest = c.digest;
    if (detect_refusal(c.raw_text, opts.refusal_lexicon)) {
      r.refusal = true;
      r.parse_error = false;
      continue;
    }
    r.refusal = false;
    try {
      TriggerParse parsed = parse_trigger_output(c.raw_text);
      r.parse_error = false;
      if (!parsed.explanation.empty()) r.explanation = parsed.explanation;
      if (!parsed.triggers.empty()) r.triggers = std::move(parsed.triggers);
      return r;
    } catch (const ValidationError&) {
      r.parse_error = true;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Per-sample augmentation record
// ---------------------------------------------------------------------------

struct AugmentationRecord {
  std::string sample_id;
  int run_index = 0;
  std::optional<std::string> explanation;
  std::optional<std::vector<std::string>> triggers;  // nonempty when present
  bool refusal = false;
  bool parse_error = false;
  std::map<std::string, std::string> digests;  // template name -> request digest
};

inline nlohmann::json record_to_json(const AugmentationRecord& r) {
  nlohmann::json j;
  j["id"] = r.sample_id;
  j["run_index"] = r.run_index;
  if (r.explanation) j["explanation"] = *r.explanation;
  if (r.triggers) j["triggers"] = *r.triggers;
  if (r.refusal) j["refusal"] = true;
  if (r.parse_error) j["parse_error"] = true;
  if (!r.digests.empty()) j["digests"] = r.digests;
  return j;
}

inline AugmentationRecord record_from_json(const nlohmann::json& j) {
  AugmentationRecord r;
  try {
    r.sample_id = j.at("id").get<std::string>();
    r.run_index = j.at("run_index").get<int>();
    if (j.contains("explanation")) r.explanation = j.at("explanation").get<std::string>();
    if (j.contains("triggers")) {
      auto t = j.at("triggers").get<std::vector<std::string>>();
      if (t.empty()) throw ValidationError("record: triggers present but empty");
      r.triggers = std::move(t);
    }
    r.refusal = j.value("refusal", false);
    r.parse_error = j.value("parse_error", false);
    if (j.contains("digests")) r.digests = j.at("digests").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed augmentation record: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Caption selection
// ---------------------------------------------------------------------------

using CleanMap = std::map<std::string, CleanResult>;  // captioner -> result

// Preference order first, then the lexicographically first remaining
// captioner, so selection never depends on map iteration luck.
inline const std::string* pick_raw_caption(const Sample& s, const std::vector<std::string>& pref) {
  for (const std::string& name : pref) {
    auto it = s.captions.find(name);
    if (it != s.captions.end()) return &it->second;
  }
  for (const auto& [name, caption] : s.captions) {
    (void)name;
    return &caption;
  }
  return nullptr;
}

inline const CleanResult* pick_clean_caption(const CleanMap& clean,
                                             const std::vector<std::string>& pref) {
  for (const std::string& name : pref) {
    auto it = clean.find(name);
    if (it != clean.end() && it->second.valid) return &it->second;
  }
  for (const auto& [name, r] : clean) {
    (void)name;
    if (r.valid) return &r;
  }
  return nullptr;
}

// {img} binding for generation prompts: valid cleaned caption first, then a
// raw caption, then an explicit marker so the slot is never empty.
inline std::string best_caption_binding(const Sample& s, const CleanMap* clean,
                                        const std::vector<std::string>& pref) {
  if (clean) {
    if (const CleanResult* c = pick_clean_caption(*clean, pref)) return c->cleaned;
  }
  if (const std::string* raw = pick_raw_caption(s, pref)) return *raw;
  return "NONE";
}

// ---------------------------------------------------------------------------
// Condition matrix composition
// ---------------------------------------------------------------------------

enum class Condition { T, TC, TE, TCE, E };
enum class Strategy { explanation, triggers };

inline const char* condition_name(Condition c) {
  switch (c) {
    case Condition::T: return "T";
    case Condition::TC: return "TC";
    case Condition::TE: return "TE";
    case Condition::TCE: return "TCE";
    case Condition::E: return "E";
  }
  return "?";
}

inline Condition condition_from_name(const std::string& s) {
  if (s == "T") return Condition::T;
  if (s == "TC") return Condition::TC;
  if (s == "TE") return Condition::TE;
  if (s == "TCE") return Condition::TCE;
  if (s == "E") return Condition::E;
  throw ValidationError("unknown condition '" + s + "' (expected T, TC, TE, TCE, or E)");
}

inline const char* strategy_name(Strategy s) {
  return s == Strategy::explanation ? "explanation" : "triggers";
}

inline Strategy strategy_from_name(const std::string& s) {
  if (s == "explanation") return Strategy::explanation;
  if (s == "triggers") return Strategy::triggers;
  throw ValidationError("unknown strategy '" + s + "' (expected explanation or triggers)");
}

inline bool condition_uses_captions(Condition c) {
  return c == Condition::TC || c == Condition::TCE;
}

inline bool condition_uses_explanation(Condition c) {
  return c == Condition::TE || c == Condition::TCE || c == Condition::E;
}

struct ComposeOptions {
  std::string separator = " [SEP] ";
  std::vector<std::string> captioner_preference = {"blip", "git", "human"};
};

struct ComposedPart {
  std::string role;  // text | caption | explanation | triggers
  std::string content;
};

struct ComposedInput {
  std::string sample_id;
  Condition condition = Condition::T;
  std::vector<ComposedPart> parts;
  std::string text;    // parts joined by the separator
  bool usable = true;  // false only for E with nothing to compose
};

// Missing pieces degrade instead of failing: TCE without a valid caption
// behaves like TE, TE without an explanation behaves like T, and E without an
// explanation is marked unusable. TC takes captions as they arrived; TCE
// takes them through cleaning.
inline ComposedInput compose_input(const Sample& sample, const AugmentationRecord* record,
                                   const CleanMap* clean, Condition condition, Strategy strategy,
                                   const ComposeOptions& opts = {}) {
  ComposedInput out;
  out.sample_id = sample.id;
  out.condition = condition;

  if (condition != Condition::E) out.parts.push_back({"text", sample.text});

  if (condition_uses_captions(condition)) {
    if (condition == Condition::TC) {
      if (const std::string* raw = pick_raw_caption(sample, opts.captioner_preference))
        out.parts.push_back({"caption", *raw});
    } else if (clean) {
      if (const CleanResult* c = pick_clean_caption(*clean, opts.captioner_preference))
        out.parts.push_back({"caption", c->cleaned});
    }
  }

  if (condition_uses_explanation(condition) && record) {
    if (record->explanation)
      out.parts.push_back({"explanation", *record->explanation});
    if (strategy == Strategy::triggers && record->triggers) {
      std::string joined = "TRIGGERS: ";
      for (std::size_t i = 0; i < record->triggers->size(); ++i) {
        if (i) joined += ", ";
        joined += (*record->triggers)[i];
      }
      out.parts.push_back({"triggers", joined});
    }
  }

  if (out.parts.empty()) {
    out.usable = false;
    return out;
  }
  for (std::size_t i = 0; i < out.parts.size(); ++i) {
    if (i) out.text += opts.separator;
    out.text += out.parts[i].content;
  }
  return out;
}

inline nlohmann::json composed_to_json(const ComposedInput& c, Strategy strategy) {
  nlohmann::json parts = nlohmann::json::array();
  for (const ComposedPart& p : c.parts) parts.push_back({{"role", p.role}, {"content", p.content}});
  return nlohmann::json{{"id", c.sample_id},
                        {"condition", condition_name(c.condition)},
                        {"strategy", strategy_name(strategy)},
                        {"text", c.text},
                        {"parts", parts},
                        {"usable", c.usable}};
}

inline ComposedInput composed_from_json(const nlohmann::json& j) {
  ComposedInput c;
  try {
    c.sample_id = j.at("id").get<std::string>();
    c.condition = condition_from_name(j.at("condition").get<std::string>());
    c.text = j.at("text").get<std::string>();
    for (const auto& pj : j.at("parts"))
      c.parts.push_back({pj.at("role").get<std::string>(), pj.at("content").get<std::string>()});
    c.usable = j.value("usable", true);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed composed input: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Caption validity reporting
// ---------------------------------------------------------------------------

struct ValidityCell {
  std::size_t valid = 0;
  std::size_t total = 0;
};

// captioner -> split name -> counts
using ValidityTable = std::map<std::string, std::map<std::string, ValidityCell>>;

inline ValidityTable validity_rate(const std::vector<Sample>& samples,
                                   const std::map<std::string, CleanMap>& clean_by_sample) {
  ValidityTable table;
  for (const Sample& s : samples) {
    auto it = clean_by_sample.find(s.id);
    if (it == clean_by_sample.end()) continue;
    for (const auto& [captioner, result] : it->second) {
      ValidityCell& cell = table[captioner][split_name(s.split)];
      ++cell.total;
      if (result.valid) ++cell.valid;
    }
  }
  return table;
}

inline std::string format_validity(const ValidityTable& table) {
  std::vector<std::string> splits;
  for (Split sp : {Split::train, Split::dev, Split::test}) splits.push_back(split_name(sp));

  std::string out = "captioner";
  for (const std::string& sp : splits) out += "\t" + sp;
  out += "\n";
  for (const auto& [captioner, by_split] : table) {
    out += captioner;
    for (const std::string& sp : splits) {
      auto it = by_split.find(sp);
      if (it == by_split.end() || it->second.total == 0) {
        out += "\t--";
      } else {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.1f",
                      100.0 * static_cast<double>(it->second.valid) /
                          static_cast<double>(it->second.total));
        out += "\t";
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::json validity_to_json(const ValidityTable& table) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [captioner, by_split] : table) {
    nlohmann::json row = nlohmann::json::object();
    for (const auto& [split, cell] : by_split) {
      row[split] = {{"valid", cell.valid}, {"total", cell.total}};
    }
    j[captioner] = row;
  }
  return j;
}

inline nlohmann::json clean_map_to_json(const CleanMap& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [captioner, r] : m) {
    nlohmann::json e = {{"valid", r.valid}, {"digest", r.digest}};
    if (r.valid) e["cleaned"] = r.cleaned;
    j[captioner] = e;
  }
  return j;
}

inline CleanMap clean_map_from_json(const nlohmann::json& j) {
  CleanMap m;
  try {
    for (const auto& [captioner, e] : j.items()) {
      CleanResult r;
      r.valid = e.at("valid").get<bool>();
      r.digest = e.value("digest", std::string());
      if (r.valid) r.cleaned = e.at("cleaned").get<std::string>();
      m[captioner] = std::move(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed clean map: ") + e.what());
  }
  return m;
}

}  // namespace semaug
