#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <nlohmann/json.hpp>

#include "semaug/taxonomy.hpp"

namespace semaug {

enum class DatasetId { semeval_memes, jigsaw_toxic, hateful_memes };
enum class Split { train, dev, test };

inline const char* dataset_name(DatasetId d) {
  switch (d) {
    case DatasetId::semeval_memes: return "semeval_memes";
    case DatasetId::jigsaw_toxic: return "jigsaw_toxic";
    case DatasetId::hateful_memes: return "hateful_memes";
  }
  return "?";
}

inline DatasetId dataset_from_name(const std::string& s) {
  if (s == "semeval_memes" || s == "semeval") return DatasetId::semeval_memes;
  if (s == "jigsaw_toxic" || s == "jigsaw") return DatasetId::jigsaw_toxic;
  if (s == "hateful_memes" || s == "hateful") return DatasetId::hateful_memes;
  throw ValidationError("unknown dataset '" + s + "'");
}

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

// One normalized data point; the canonical JSONL of these records is the only
// format downstream stages consume.
struct Sample {
  std::string id;
  DatasetId dataset = DatasetId::semeval_memes;
  Split split = Split::train;
  std::string text;
  std::map<std::string, std::string> captions;  // captioner id ("blip", "git", "human") -> raw caption
  std::optional<std::string> image_ref;
  LabelSet gold;
  std::optional<std::string> human_explanation;

  bool operator==(const Sample&) const = default;
};

// Unicode NFC, collapse whitespace runs to a single space, strip ends.
// Nothing else: casing and offensive tokens pass through untouched.
inline std::string normalize_text(const std::string& raw) {
  std::string nfc = raw;
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
  if (U_SUCCESS(status)) {
    const icu::UnicodeString u = icu::UnicodeString::fromUTF8(raw);
    const icu::UnicodeString out = norm->normalize(u, status);
    if (U_SUCCESS(status)) {
      nfc.clear();
      out.toUTF8String(nfc);
    }
  }
  std::string collapsed;
  collapsed.reserve(nfc.size());
  bool in_ws = false;
  for (char c : nfc) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_ws = true;
      continue;
    }
    if (in_ws && !collapsed.empty()) collapsed.push_back(' ');
    in_ws = false;
    collapsed.push_back(c);
  }
  return collapsed;
}

inline nlohmann::json sample_to_json(const Sample& s) {
  nlohmann::json j;
  j["id"] = s.id;
  j["dataset"] = dataset_name(s.dataset);
  j["split"] = split_name(s.split);
  j["text"] = s.text;
  j["gold"] = s.gold;
  if (!s.captions.empty()) j["captions"] = s.captions;
  if (s.image_ref) j["image_ref"] = *s.image_ref;
  if (s.human_explanation) j["human_explanation"] = *s.human_explanation;
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.id = j.at("id").get<std::string>();
  s.dataset = dataset_from_name(j.at("dataset").get<std::string>());
  s.split = split_from_name(j.at("split").get<std::string>());
  s.text = j.at("text").get<std::string>();
  for (const auto& l : j.at("gold")) s.gold.insert(l.get<std::string>());
  if (j.contains("captions"))
    s.captions = j.at("captions").get<std::map<std::string, std::string>>();
  if (j.contains("image_ref")) s.image_ref = j.at("image_ref").get<std::string>();
  if (j.contains("human_explanation"))
    s.human_explanation = j.at("human_explanation").get<std::string>();
  return s;
}

inline void write_samples_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StageError("cannot write '" + path + "'");
  for (const Sample& s : samples) out << sample_to_json(s).dump() << '\n';
}

inline std::vector<Sample> read_samples_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open corpus '" + path + "'");
  std::vector<Sample> samples;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (trim(line).empty()) continue;
    try {
      samples.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("corpus '" + path + "' line " + std::to_string(ln) + ": " + e.what());
    }
  }
  return samples;
}

struct LoadOptions {
  bool skip_bad = false;
  Split split = Split::train;
  std::vector<std::string>* issues = nullptr;  // optional sink for skipped-record reports
};

namespace detail {

inline void report_or_throw(const LoadOptions& opt, const std::string& msg) {
  if (!opt.skip_bad) throw ValidationError(msg);
  if (opt.issues) opt.issues->push_back(msg);
}

inline std::string json_id(const nlohmann::json& j) {
  const auto& v = j.at("id");
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw ValidationError("record id is neither string nor integer");
}

}  // namespace detail

// SemEval release adapter: a JSON array of records with id, text, labels and
// an optional image field. Optional "captions" and "human_explanation" fields
// carry pre-generated captioner output and crowd annotations when present.
inline std::vector<Sample> load_semeval(const std::string& path, const Taxonomy& taxonomy,
                                        const LoadOptions& opt = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in '" + path + "': " + e.what());
  }
  if (!doc.is_array())
    throw ValidationError("'" + path + "': expected a JSON array of records");

  std::vector<Sample> samples;
  std::set<std::string> seen_ids;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& rec = doc[i];
    try {
      Sample s;
      s.dataset = DatasetId::semeval_memes;
      s.split = opt.split;
      s.id = detail::json_id(rec);
      s.text = normalize_text(rec.at("text").get<std::string>());
      if (s.text.empty()) throw ValidationError("text empty after normalization");
      if (!seen_ids.insert(s.id).second)
        throw ValidationError("duplicate sample id '" + s.id + "'");
      for (const auto& l : rec.at("labels"))
        s.gold.insert(taxonomy.canonicalize(l.get<std::string>()));
      if (rec.contains("image") && rec.at("image").is_string())
        s.image_ref = rec.at("image").get<std::string>();
      if (rec.contains("captions"))
        for (const auto& [k, v] : rec.at("captions").items())
          s.captions[k] = normalize_text(v.get<std::string>());
      if (rec.contains("human_explanation") && rec.at("human_explanation").is_string())
        s.human_explanation = normalize_text(rec.at("human_explanation").get<std::string>());
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      detail::report_or_throw(opt, "'" + path + "' record " + std::to_string(i) + ": " + e.what());
    }
  }
  return samples;
}

namespace detail {

// RFC-4180 reader: quoted fields, doubled-quote escapes, embedded newlines.
inline std::vector<std::vector<std::string>> parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"': quoted = true; break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        break;
      case '\r': break;
      case '\n':
        row.push_back(std::move(field));
        field.clear();
        rows.push_back(std::move(row));
        row.clear();
        break;
      default: field.push_back(c);
    }
  }
  if (quoted) throw ValidationError("CSV: unterminated quoted field");
  if (any && (!field.empty() || !row.empty())) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

inline const std::vector<std::string>& jigsaw_label_columns() {
  static const std::vector<std::string> cols = {"toxic",  "severe_toxic", "obscene",
                                                "threat", "insult",       "identity_hate"};
  return cols;
}

// Jigsaw toxic-comments adapter: CSV with a fixed header and 0/1 label cells.
inline std::vector<Sample> load_jigsaw(const std::string& path, const LoadOptions& opt = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  const auto rows = detail::parse_csv(in);
  if (rows.empty()) throw ValidationError("'" + path + "': empty CSV");

  const std::vector<std::string> expected = [] {
    std::vector<std::string> h = {"id", "comment_text"};
    for (const auto& c : jigsaw_label_columns()) h.push_back(c);
    return h;
  }();
  if (rows[0] != expected) {
    std::string msg = "'" + path + "': unexpected CSV header, need";
    for (const auto& h : expected) msg += " " + h;
    throw ValidationError(msg);
  }

  std::vector<Sample> samples;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    try {
      if (row.size() != expected.size())
        throw ValidationError("wrong column count (" + std::to_string(row.size()) + ")");
      Sample s;
      s.dataset = DatasetId::jigsaw_toxic;
      s.split = opt.split;
      s.id = row[0];
      s.text = normalize_text(row[1]);
      if (s.text.empty()) throw ValidationError("comment empty after normalization");
      for (std::size_t c = 0; c < jigsaw_label_columns().size(); ++c) {
        const std::string& cell = row[2 + c];
        if (cell == "1")
          s.gold.insert(jigsaw_label_columns()[c]);
        else if (cell != "0")
          throw ValidationError("non-binary cell '" + cell + "' in column " +
                                jigsaw_label_columns()[c]);
      }
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      detail::report_or_throw(opt, "'" + path + "' row " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return samples;
}

inline const Label& hateful_label() {
  static const Label l = "hateful";
  return l;
}

// Facebook hateful-memes adapter: JSONL with id, img, label (0/1), text.
inline std::vector<Sample> load_hateful(const std::string& path, const LoadOptions& opt = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::vector<Sample> samples;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (trim(line).empty()) continue;
    try {
      const nlohmann::json rec = nlohmann::json::parse(line);
      Sample s;
      s.dataset = DatasetId::hateful_memes;
      s.split = opt.split;
      s.id = detail::json_id(rec);
      s.text = normalize_text(rec.at("text").get<std::string>());
      if (s.text.empty()) throw ValidationError("text empty after normalization");
      s.image_ref = rec.at("img").get<std::string>();
      const auto& label = rec.at("label");
      if (!label.is_number_integer() ||
          (label.get<int>() != 0 && label.get<int>() != 1))
        throw ValidationError("label must be 0 or 1, got " + label.dump());
      if (label.get<int>() == 1) s.gold.insert(hateful_label());
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      detail::report_or_throw(opt, "'" + path + "' line " + std::to_string(ln) + ": " + e.what());
    }
  }
  return samples;
}

struct DistributionRow {
  Label label;
  std::size_t count = 0;
};

// Per-label occurrence counts. For semeval the percentage denominator is the
// total number of technique occurrences (multi-label, so counts sum past the
// sample count); for jigsaw/hateful it is the sample count.
struct DistributionTable {
  std::vector<DistributionRow> rows;
  std::size_t total_samples = 0;
  std::size_t denominator = 0;

  double percentage(std::size_t i) const {
    return denominator > 0 ? 100.0 * static_cast<double>(rows[i].count) / denominator : 0.0;
  }
};

inline DistributionTable label_distribution(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ValidationError("label_distribution: empty sample list");
  DistributionTable t;
  t.total_samples = samples.size();
  if (samples.front().dataset == DatasetId::hateful_memes) {
    // Binary task: the published table lists both classes, so the absence of
    // the positive label counts as the negative row.
    std::size_t hateful = 0;
    for (const Sample& s : samples) hateful += s.gold.count(hateful_label());
    t.denominator = samples.size();
    t.rows.push_back({hateful_label(), hateful});
    t.rows.push_back({"non-hateful", samples.size() - hateful});
    return t;
  }
  std::map<Label, std::size_t> counts;
  std::size_t occurrences = 0;
  for (const Sample& s : samples)
    for (const Label& l : s.gold) {
      ++counts[l];
      ++occurrences;
    }
  t.denominator =
      samples.front().dataset == DatasetId::semeval_memes ? occurrences : samples.size();
  for (const auto& [label, count] : counts) t.rows.push_back({label, count});
  std::sort(t.rows.begin(), t.rows.end(), [](const DistributionRow& a, const DistributionRow& b) {
    return a.count != b.count ? a.count > b.count : a.label < b.label;
  });
  return t;
}

inline std::string format_distribution(const DistributionTable& t, int decimals = 2) {
  std::ostringstream out;
  out << "Label\tCount\tPercentage (%)\n";
  char buf[32];
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, t.percentage(i));
    out << t.rows[i].label << '\t' << t.rows[i].count << '\t' << buf << '\n';
  }
  out << "Total samples\t" << t.total_samples << "\t\n";
  return out.str();
}

// Seeded 10% holdout used when a release ships no dev file.
inline void assign_dev_holdout(std::vector<Sample>& samples, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == Split::train) train_idx.push_back(i);
  std::mt19937_64 rng(seed);
  std::shuffle(train_idx.begin(), train_idx.end(), rng);
  const std::size_t n_dev = static_cast<std::size_t>(train_idx.size() * fraction);
  for (std::size_t k = 0; k < n_dev; ++k) samples[train_idx[k]].split = Split::dev;
}

}  // namespace semaug
