#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semaug/augment.hpp"
#include "semaug/classifier.hpp"
#include "semaug/datasets.hpp"
#include "semaug/llm_client.hpp"
#include "semaug/metrics.hpp"
#include "semaug/stats.hpp"
#include "semaug/taxonomy.hpp"

namespace semaug {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string name = "experiment";
  std::string corpus_path;  // canonical samples JSONL (semaug ingest output)
  DatasetId dataset = DatasetId::semeval_memes;
  std::vector<Condition> conditions = {Condition::T, Condition::TC, Condition::TE,
                                       Condition::TCE};
  Strategy strategy = Strategy::explanation;
  int runs_per_condition = 5;
  bool include_zero_shot = false;

  std::string provider = "mock";  // mock | http
  std::string mock_scenario;      // scenario file, mock provider only
  std::string model_id = "mock-model";
  std::string cache_dir;  // empty: <runs_dir>/<name>/cache
  std::string runs_dir = "runs";
  double clean_temperature = 0.0;
  double explain_temperature = 0.7;
  int parallelism = 4;

  Split train_split = Split::train;
  Split eval_split = Split::test;
  bool hierarchy_closure = false;
  TrainConfig classifier;
  std::vector<std::string> captioner_preference = {"blip", "git", "human"};
  std::string separator = " [SEP] ";

  double alpha = 0.05;
  std::string primary_metric;  // empty: h_f1 for semeval_memes, micro_f1 otherwise
};

inline std::string effective_primary_metric(const ExperimentConfig& c) {
  if (!c.primary_metric.empty()) return c.primary_metric;
  return c.dataset == DatasetId::semeval_memes ? "h_f1" : "micro_f1";
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json conditions = nlohmann::json::array();
  for (Condition cond : c.conditions) conditions.push_back(condition_name(cond));
  return nlohmann::json{
      {"format_version", 1},
      {"name", c.name},
      {"corpus_path", c.corpus_path},
      {"dataset", dataset_name(c.dataset)},
      {"conditions", conditions},
      {"strategy", strategy_name(c.strategy)},
      {"runs_per_condition", c.runs_per_condition},
      {"include_zero_shot", c.include_zero_shot},
      {"provider", c.provider},
      {"mock_scenario", c.mock_scenario},
      {"model_id", c.model_id},
      {"cache_dir", c.cache_dir},
      {"runs_dir", c.runs_dir},
      {"clean_temperature", c.clean_temperature},
      {"explain_temperature", c.explain_temperature},
      {"parallelism", c.parallelism},
      {"train_split", split_name(c.train_split)},
      {"eval_split", split_name(c.eval_split)},
      {"hierarchy_closure", c.hierarchy_closure},
      {"classifier",
       {{"dimensionality", c.classifier.features.dimensionality},
        {"word_ngrams", c.classifier.features.word_ngrams},
        {"char_ngrams", c.classifier.features.char_ngrams},
        {"lowercase", c.classifier.features.lowercase},
        {"epochs", c.classifier.epochs},
        {"learning_rate", c.classifier.learning_rate},
        {"l2", c.classifier.l2},
        {"batch_size", c.classifier.batch_size},
        {"seed", c.classifier.seed},
        {"threshold", c.classifier.threshold}}},
      {"captioner_preference", c.captioner_preference},
      {"separator", c.separator},
      {"alpha", c.alpha},
      {"primary_metric", c.primary_metric}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.value("format_version", 1) != 1)
      throw ValidationError("config: unsupported format_version");
    c.name = j.value("name", c.name);
    c.corpus_path = j.at("corpus_path").get<std::string>();
    c.dataset = dataset_from_name(j.value("dataset", std::string("semeval_memes")));
    if (j.contains("conditions")) {
      c.conditions.clear();
      for (const auto& cj : j.at("conditions"))
        c.conditions.push_back(condition_from_name(cj.get<std::string>()));
    }
    if (j.contains("strategy")) c.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    c.runs_per_condition = j.value("runs_per_condition", c.runs_per_condition);
    c.include_zero_shot = j.value("include_zero_shot", c.include_zero_shot);
    c.provider = j.value("provider", c.provider);
    c.mock_scenario = j.value("mock_scenario", c.mock_scenario);
    c.model_id = j.value("model_id", c.model_id);
    c.cache_dir = j.value("cache_dir", c.cache_dir);
    c.runs_dir = j.value("runs_dir", c.runs_dir);
    c.clean_temperature = j.value("clean_temperature", c.clean_temperature);
    c.explain_temperature = j.value("explain_temperature", c.explain_temperature);
    c.parallelism = j.value("parallelism", c.parallelism);
    if (j.contains("train_split")) c.train_split = split_from_name(j.at("train_split").get<std::string>());
    if (j.contains("eval_split")) c.eval_split = split_from_name(j.at("eval_split").get<std::string>());
    c.hierarchy_closure = j.value("hierarchy_closure", c.hierarchy_closure);
    if (j.contains("classifier")) {
      const nlohmann::json& k = j.at("classifier");
      c.classifier.features.dimensionality =
          k.value("dimensionality", c.classifier.features.dimensionality);
      if (k.contains("word_ngrams"))
        c.classifier.features.word_ngrams = k.at("word_ngrams").get<std::vector<int>>();
      if (k.contains("char_ngrams"))
        c.classifier.features.char_ngrams = k.at("char_ngrams").get<std::vector<int>>();
      c.classifier.features.lowercase = k.value("lowercase", c.classifier.features.lowercase);
      c.classifier.epochs = k.value("epochs", c.classifier.epochs);
      c.classifier.learning_rate = k.value("learning_rate", c.classifier.learning_rate);
      c.classifier.l2 = k.value("l2", c.classifier.l2);
      c.classifier.batch_size = k.value("batch_size", c.classifier.batch_size);
      c.classifier.seed = k.value("seed", c.classifier.seed);
      c.classifier.threshold = k.value("threshold", c.classifier.threshold);
    }
    if (j.contains("captioner_preference"))
      c.captioner_preference = j.at("captioner_preference").get<std::vector<std::string>>();
    c.separator = j.value("separator", c.separator);
    c.alpha = j.value("alpha", c.alpha);
    c.primary_metric = j.value("primary_metric", c.primary_metric);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed experiment config: ") + e.what());
  }
  return c;
}

inline void validate_config(const ExperimentConfig& c) {
  if (c.name.empty()) throw ValidationError("config: name must be nonempty");
  for (char ch : c.name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_'))
      throw ValidationError("config: name may only contain alphanumerics, '-', '_'");
  if (c.corpus_path.empty()) throw ValidationError("config: corpus_path must be set");
  if (c.conditions.empty()) throw ValidationError("config: at least one condition required");
  {
    std::set<std::string> seen;
    for (Condition cond : c.conditions)
      if (!seen.insert(condition_name(cond)).second)
        throw ValidationError("config: duplicate condition " + std::string(condition_name(cond)));
  }
  if (c.runs_per_condition < 1) throw ValidationError("config: runs_per_condition must be >= 1");
  if (c.provider != "mock" && c.provider != "http")
    throw ValidationError("config: provider must be mock or http");
  if (c.provider == "mock" && c.mock_scenario.empty())
    throw ValidationError("config: mock provider needs mock_scenario");
  if (c.parallelism < 1) throw ValidationError("config: parallelism must be >= 1");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ValidationError("config: alpha must lie in (0, 1)");
  if (c.train_split == c.eval_split)
    throw ValidationError("config: train_split and eval_split must differ");
  if (c.include_zero_shot && c.dataset != DatasetId::semeval_memes)
    throw ValidationError("config: zero-shot classification needs the semeval_memes taxonomy");
  const std::string metric = effective_primary_metric(c);
  static const std::set<std::string> known = {"h_f1", "micro_f1", "macro_f1"};
  if (!known.count(metric))
    throw ValidationError("config: unknown primary metric '" + metric + "'");
  if (metric == "h_f1" && c.dataset != DatasetId::semeval_memes)
    throw ValidationError("config: h_f1 needs the semeval_memes taxonomy");
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config is not valid JSON (" + path + "): " + e.what());
  }
  ExperimentConfig c = config_from_json(j);
  validate_config(c);
  return c;
}

inline std::string config_digest(const ExperimentConfig& c) {
  return digest128_hex(config_to_json(c).dump());
}

// ---------------------------------------------------------------------------
// Experiment runner: staged, resumable, deterministic artifacts
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> stages = {"corpus",  "clean",    "augment",
                                                  "compose", "train",    "predict",
                                                  "evaluate", "zero_shot", "report"};
  return stages;
}

class ExperimentRunner {
 public:
  explicit ExperimentRunner(ExperimentConfig config) : config_(std::move(config)) {
    validate_config(config_);
    taxonomy_ = &Taxonomy::semeval();
  }

  std::filesystem::path run_dir() const {
    return std::filesystem::path(config_.runs_dir) / config_.name;
  }

  // Executes outstanding stages in order. Returns true when the report stage
  // finished; false when execution stopped at halt_after (resume later by
  // calling run again).
  bool run(const std::string& halt_after = "") {
    if (!halt_after.empty() &&
        std::find(stage_names().begin(), stage_names().end(), halt_after) == stage_names().end())
      throw ValidationError("unknown stage '" + halt_after + "'");

    std::filesystem::create_directories(run_dir());
    load_or_init_manifest();

    for (const std::string& stage : stage_names()) {
      if (!completed(stage)) {
        run_stage(stage);
        manifest_["completed"].push_back(stage);
        save_manifest();
      }
      if (stage == halt_after) return false;
    }
    return true;
  }

  int runs_for(Condition c) const {
    return condition_uses_explanation(c) ? config_.runs_per_condition : 1;
  }

  const ExperimentConfig& config() const { return config_; }

 private:
  // -- manifest ------------------------------------------------------------

  bool completed(const std::string& stage) const {
    for (const auto& s : manifest_.at("completed"))
      if (s.get<std::string>() == stage) return true;
    return false;
  }

  void load_or_init_manifest() {
    const auto path = run_dir() / "manifest.json";
    std::ifstream in(path);
    if (in) {
      nlohmann::json m;
      try {
        in >> m;
      } catch (const nlohmann::json::exception& e) {
        throw StageError("manifest is corrupt (" + path.string() + "): " + e.what());
      }
      if (m.value("config_digest", "") != config_digest(config_))
        throw ValidationError(
            "run '" + config_.name +
            "' exists with a different configuration; use a new name or delete " +
            run_dir().string());
      manifest_ = std::move(m);
      return;
    }
    manifest_ = nlohmann::json{{"format_version", 1},
                               {"name", config_.name},
                               {"config_digest", config_digest(config_)},
                               {"config", config_to_json(config_)},
                               {"completed", nlohmann::json::array()},
                               {"counts", nlohmann::json::object()},
                               {"refusals", 0},
                               {"parse_errors", 0},
                               {"request_digests", nlohmann::json::array()}};
    save_manifest();
  }

  void save_manifest() const {
    write_atomic(run_dir() / "manifest.json", manifest_.dump(2) + "\n");
  }

  static void write_atomic(const std::filesystem::path& path, const std::string& content) {
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw StageError("cannot write " + tmp);
      out << content;
    }
    std::filesystem::rename(tmp, path);
  }

  void note_digests(const std::vector<std::string>& digests) {
    std::set<std::string> all;
    for (const auto& d : manifest_.at("request_digests")) all.insert(d.get<std::string>());
    for (const std::string& d : digests)
      if (!d.empty()) all.insert(d);
    manifest_["request_digests"] = std::vector<std::string>(all.begin(), all.end());
  }

  // -- shared state --------------------------------------------------------

  const std::vector<Sample>& samples() {
    if (samples_.empty()) {
      samples_ = read_samples_jsonl((run_dir() / "corpus" / "samples.jsonl").string());
      if (samples_.empty()) throw StageError("run corpus is empty");
    }
    return samples_;
  }

  bool any_captions() {
    for (const Sample& s : samples())
      if (!s.captions.empty()) return true;
    return false;
  }

  bool needs_explanations() const {
    for (Condition c : config_.conditions)
      if (condition_uses_explanation(c)) return true;
    return false;
  }

  bool needs_cleaning() {
    bool wants = config_.include_zero_shot || needs_explanations();
    for (Condition c : config_.conditions) wants = wants || c == Condition::TCE;
    return wants && any_captions();
  }

  LlmClient& client() {
    if (!client_) {
      std::shared_ptr<Provider> provider;
      RetryPolicy retry;
      if (config_.provider == "mock") {
        provider = std::make_shared<MockProvider>(MockProvider::from_file(config_.mock_scenario));
        retry = RetryPolicy{5, 0.01, 0.05};
      } else {
        provider = std::make_shared<HttpProviderHolder>();
        retry = RetryPolicy{};
      }
      const std::filesystem::path cache =
          config_.cache_dir.empty() ? run_dir() / "cache" : std::filesystem::path(config_.cache_dir);
      client_.emplace(provider, CompletionCache(cache), retry);
    }
    return *client_;
  }

  // The http provider lives in its own header to keep the socket dependency
  // out of library consumers; the runner reaches it through this indirection,
  // wired up by the CLI.
  struct HttpProviderHolder : Provider {
    ProviderReply complete(const RenderedRequest&) override {
      throw ProviderError("http provider not wired; use the semaug CLI for http runs");
    }
    std::string name() const override { return "http"; }
  };

 public:
  // Injection point for the CLI (http) and for tests that want a scripted
  // provider without a scenario file. Must be called before run().
  void set_provider(std::shared_ptr<Provider> provider, RetryPolicy retry = {}) {
    const std::filesystem::path cache =
        config_.cache_dir.empty() ? run_dir() / "cache" : std::filesystem::path(config_.cache_dir);
    std::filesystem::create_directories(run_dir());
    client_.emplace(std::move(provider), CompletionCache(cache), retry);
  }

 private:
  AugmentOptions augment_options() const {
    AugmentOptions o;
    o.model_id = config_.model_id;
    o.clean_temperature = config_.clean_temperature;
    o.explain_temperature = config_.explain_temperature;
    o.captioner_preference = config_.captioner_preference;
    return o;
  }

  std::vector<Label> label_space() const {
    switch (config_.dataset) {
      case DatasetId::semeval_memes: return taxonomy_->leaves();
      case DatasetId::jigsaw_toxic: return jigsaw_label_columns();
      case DatasetId::hateful_memes: return {hateful_label()};
    }
    throw StageError("unreachable dataset id");
  }

  const std::map<std::string, CleanMap>& clean_by_sample() {
    if (!clean_loaded_) {
      const auto path = run_dir() / "augment" / "clean.jsonl";
      std::ifstream in(path);
      if (in) {
        std::string line;
        while (std::getline(in, line)) {
          if (trim(line).empty()) continue;
          nlohmann::json j = nlohmann::json::parse(line);
          clean_by_sample_[j.at("id").get<std::string>()] =
              clean_map_from_json(j.at("captioners"));
        }
      }
      clean_loaded_ = true;
    }
    return clean_by_sample_;
  }

  std::vector<AugmentationRecord> load_records(int run) {
    const auto path = run_dir() / "augment" / ("run" + std::to_string(run) + ".jsonl");
    std::ifstream in(path);
    if (!in) throw StageError("missing augmentation output " + path.string());
    std::vector<AugmentationRecord> records;
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      records.push_back(record_from_json(nlohmann::json::parse(line)));
    }
    return records;
  }

  std::string img_binding_for(const Sample& s) {
    const auto& clean = clean_by_sample();
    auto it = clean.find(s.id);
    return best_caption_binding(s, it != clean.end() ? &it->second : nullptr,
                                config_.captioner_preference);
  }

  // -- stages ----------------------------------------------------------------

  void run_stage(const std::string& stage) {
    if (stage == "corpus") stage_corpus();
    else if (stage == "clean") stage_clean();
    else if (stage == "augment") stage_augment();
    else if (stage == "compose") stage_compose();
    else if (stage == "train") stage_train();
    else if (stage == "predict") stage_predict();
    else if (stage == "evaluate") stage_evaluate();
    else if (stage == "zero_shot") stage_zero_shot();
    else if (stage == "report") stage_report();
    else throw StageError("unknown stage " + stage);
  }

  void stage_corpus() {
    std::vector<Sample> loaded = read_samples_jsonl(config_.corpus_path);
    if (loaded.empty()) throw ValidationError("corpus " + config_.corpus_path + " is empty");
    std::sort(loaded.begin(), loaded.end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });
    for (std::size_t i = 0; i + 1 < loaded.size(); ++i)
      if (loaded[i].id == loaded[i + 1].id)
        throw ValidationError("corpus has duplicate sample id '" + loaded[i].id + "'");
    for (const Sample& s : loaded)
      if (s.dataset != config_.dataset)
        throw ValidationError("sample '" + s.id + "' belongs to " + dataset_name(s.dataset) +
                              ", config says " + dataset_name(config_.dataset));
    std::filesystem::create_directories(run_dir() / "corpus");
    write_samples_jsonl((run_dir() / "corpus" / "samples.jsonl").string(), loaded);
    samples_ = std::move(loaded);

    std::map<std::string, std::size_t> counts;
    for (const Sample& s : samples_) ++counts[split_name(s.split)];
    nlohmann::json cj{{"samples", samples_.size()}};
    for (const auto& [k, v] : counts) cj[k] = v;
    manifest_["counts"] = cj;

    std::size_t train_n = counts.count(split_name(config_.train_split))
                              ? counts[split_name(config_.train_split)]
                              : 0;
    std::size_t eval_n = counts.count(split_name(config_.eval_split))
                             ? counts[split_name(config_.eval_split)]
                             : 0;
    if (train_n == 0)
      throw ValidationError("corpus has no samples in the train split '" +
                            std::string(split_name(config_.train_split)) + "'");
    if (eval_n == 0)
      throw ValidationError("corpus has no samples in the eval split '" +
                            std::string(split_name(config_.eval_split)) + "'");
  }

  void stage_clean() {
    std::filesystem::create_directories(run_dir() / "augment");
    const auto path = run_dir() / "augment" / "clean.jsonl";
    if (!needs_cleaning()) {
      write_atomic(path, "");
      return;
    }
    const std::vector<Sample>& all = samples();
    const AugmentOptions opts = augment_options();
    LlmClient& llm = client();  // construct before fanning out
    (void)llm;
    std::vector<CleanMap> results(all.size());
    std::vector<std::string> digests;
    parallel_for(all.size(), static_cast<std::size_t>(config_.parallelism), [&](std::size_t i) {
      CleanMap m;
      for (const auto& [captioner, caption] : all[i].captions)
        m[captioner] = clean_caption(client(), caption, opts);
      results[i] = std::move(m);
    });
    std::string out;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (all[i].captions.empty()) continue;
      for (const auto& [captioner, r] : results[i]) digests.push_back(r.digest);
      nlohmann::json j{{"id", all[i].id}, {"captioners", clean_map_to_json(results[i])}};
      out += j.dump() + "\n";
    }
    write_atomic(path, out);
    note_digests(digests);
  }

  void stage_augment() {
    std::filesystem::create_directories(run_dir() / "augment");
    if (!needs_explanations()) return;
    const std::vector<Sample>& all = samples();
    const AugmentOptions opts = augment_options();
    clean_by_sample();  // load before going parallel
    client();

    std::size_t refusals = manifest_.value("refusals", 0);
    std::size_t parse_errors = manifest_.value("parse_errors", 0);
    for (int run = 0; run < config_.runs_per_condition; ++run) {
      std::vector<AugmentationRecord> records(all.size());
      std::vector<std::string> digests(all.size() * 2);
      parallel_for(all.size(), static_cast<std::size_t>(config_.parallelism), [&](std::size_t i) {
        const Sample& s = all[i];
        AugmentationRecord rec;
        rec.sample_id = s.id;
        rec.run_index = run;
        const std::string img = img_binding_for(s);
        if (config_.strategy == Strategy::explanation) {
          ExplanationResult e = gen_explanation(client(), s.text, img, opts, run);
          rec.explanation = e.explanation;
          rec.refusal = e.refusal;
          rec.digests["explain"] = e.digest;
          digests[i * 2] = e.digest;
        } else {
          TriggerResult t = gen_triggers(client(), s.text, img, opts, run);
          rec.explanation = t.explanation;
          rec.triggers = t.triggers;
          rec.refusal = t.refusal;
          rec.parse_error = t.parse_error;
          rec.digests["explain_triggers"] = t.digest;
          digests[i * 2] = t.digest;
        }
        records[i] = std::move(rec);
      });
      std::string out;
      for (const AugmentationRecord& rec : records) {
        refusals += rec.refusal;
        parse_errors += rec.parse_error;
        out += record_to_json(rec).dump() + "\n";
      }
      write_atomic(run_dir() / "augment" / ("run" + std::to_string(run) + ".jsonl"), out);
      note_digests(digests);
    }
    manifest_["refusals"] = refusals;
    manifest_["parse_errors"] = parse_errors;
  }

  void stage_compose() {
    std::filesystem::create_directories(run_dir() / "compose");
    const std::vector<Sample>& all = samples();
    ComposeOptions copts;
    copts.separator = config_.separator;
    copts.captioner_preference = config_.captioner_preference;

    for (Condition cond : config_.conditions) {
      const bool wants_records = condition_uses_explanation(cond);
      for (int run = 0; run < runs_for(cond); ++run) {
        std::map<std::string, AugmentationRecord> by_id;
        if (wants_records)
          for (AugmentationRecord& r : load_records(run)) by_id[r.sample_id] = std::move(r);
        std::string out;
        for (const Sample& s : all) {
          const AugmentationRecord* rec = nullptr;
          if (wants_records) {
            auto it = by_id.find(s.id);
            if (it == by_id.end())
              throw StageError("no augmentation record for sample '" + s.id + "' in run " +
                               std::to_string(run));
            rec = &it->second;
          }
          const auto& clean = clean_by_sample();
          auto cit = clean.find(s.id);
          ComposedInput ci = compose_input(s, rec, cit != clean.end() ? &cit->second : nullptr,
                                           cond, config_.strategy, copts);
          nlohmann::json j = composed_to_json(ci, config_.strategy);
          j["split"] = split_name(s.split);
          j["gold"] = std::vector<Label>(s.gold.begin(), s.gold.end());
          out += j.dump() + "\n";
        }
        write_atomic(compose_path(cond, run), out);
      }
    }
  }

  std::filesystem::path compose_path(Condition c, int run) const {
    return run_dir() / "compose" /
           (std::string(condition_name(c)) + "_run" + std::to_string(run) + ".jsonl");
  }

  struct ComposedRow {
    ComposedInput input;
    Split split = Split::train;
    LabelSet gold;
  };

  std::vector<ComposedRow> load_composed(Condition c, int run) {
    std::ifstream in(compose_path(c, run));
    if (!in) throw StageError("missing composed corpus " + compose_path(c, run).string());
    std::vector<ComposedRow> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      ComposedRow row;
      row.input = composed_from_json(j);
      row.split = split_from_name(j.at("split").get<std::string>());
      for (const auto& lj : j.at("gold")) row.gold.insert(lj.get<std::string>());
      rows.push_back(std::move(row));
    }
    return rows;
  }

  void stage_train() {
    std::filesystem::create_directories(run_dir() / "models");
    const std::vector<Label> space = label_space();
    for (Condition cond : config_.conditions) {
      for (int run = 0; run < runs_for(cond); ++run) {
        std::vector<TrainExample> corpus;
        for (const ComposedRow& row : load_composed(cond, run)) {
          if (row.split != config_.train_split || !row.input.usable) continue;
          corpus.push_back({row.input.sample_id,
                            featurize(row.input.text, config_.classifier.features), row.gold});
        }
        if (corpus.empty())
          throw StageError("no usable training examples for condition " +
                           std::string(condition_name(cond)) + " run " + std::to_string(run));
        Model model = train(std::move(corpus), space, config_.classifier);
        save_model(model, model_path(cond, run).string());
      }
    }
  }

  std::filesystem::path model_path(Condition c, int run) const {
    return run_dir() / "models" /
           (std::string(condition_name(c)) + "_run" + std::to_string(run) + ".json");
  }

  std::filesystem::path predictions_path(Condition c, int run) const {
    return run_dir() / "predictions" /
           (std::string(condition_name(c)) + "_run" + std::to_string(run) + ".jsonl");
  }

  void stage_predict() {
    std::filesystem::create_directories(run_dir() / "predictions");
    const std::vector<Label> space = label_space();
    for (Condition cond : config_.conditions) {
      for (int run = 0; run < runs_for(cond); ++run) {
        const Model model = load_model(model_path(cond, run).string());
        std::string out;
        for (const ComposedRow& row : load_composed(cond, run)) {
          if (row.split != config_.eval_split) continue;
          PredictionSet pred;
          pred.sample_id = row.input.sample_id;
          if (row.input.usable) {
            pred = predict(model, row.input.text);
            pred.sample_id = row.input.sample_id;
            if (config_.hierarchy_closure) apply_hierarchy_closure(pred, *taxonomy_, space);
          }
          nlohmann::json j{{"id", pred.sample_id},
                           {"labels", std::vector<Label>(pred.labels.begin(), pred.labels.end())},
                           {"scores", pred.scores},
                           {"gold", std::vector<Label>(row.gold.begin(), row.gold.end())},
                           {"usable", row.input.usable}};
          out += j.dump() + "\n";
        }
        write_atomic(predictions_path(cond, run), out);
      }
    }
  }

  struct PredRow {
    PredictionSet pred;
    LabelSet gold;
    bool usable = true;
  };

  std::vector<PredRow> load_predictions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw StageError("missing predictions " + path.string());
    std::vector<PredRow> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      PredRow row;
      row.pred.sample_id = j.at("id").get<std::string>();
      for (const auto& lj : j.at("labels")) row.pred.labels.insert(lj.get<std::string>());
      if (j.contains("scores")) row.pred.scores = j.at("scores").get<std::map<Label, double>>();
      for (const auto& lj : j.at("gold")) row.gold.insert(lj.get<std::string>());
      row.usable = j.value("usable", true);
      rows.push_back(std::move(row));
    }
    return rows;
  }

  nlohmann::json compute_metrics(const std::vector<PredRow>& rows) {
    std::vector<LabelSet> gold, pred;
    gold.reserve(rows.size());
    pred.reserve(rows.size());
    for (const PredRow& r : rows) {
      gold.push_back(r.gold);
      pred.push_back(r.pred.labels);
    }
    nlohmann::json m;
    m["n"] = rows.size();
    if (config_.dataset == DatasetId::semeval_memes) {
      const HF1Result h = hierarchical_f1(gold, pred, *taxonomy_);
      m["h_precision"] = h.h_precision;
      m["h_recall"] = h.h_recall;
      m["h_f1"] = h.h_f1;
    }
    const std::vector<Label> space = label_space();
    const FlatF1Result f = flat_f1(gold, pred, space);
    m["micro_f1"] = f.micro_f1;
    m["macro_f1"] = f.macro_f1;

    // macro AUC over labels where both classes occur; omitted when undefined
    double auc_sum = 0;
    std::size_t auc_n = 0;
    for (const Label& label : space) {
      std::vector<double> scores;
      std::vector<bool> positives;
      bool any_pos = false, any_neg = false;
      for (const PredRow& r : rows) {
        auto it = r.pred.scores.find(label);
        scores.push_back(it != r.pred.scores.end() ? it->second : 0.0);
        const bool pos = r.gold.count(label) > 0;
        positives.push_back(pos);
        (pos ? any_pos : any_neg) = true;
      }
      if (!any_pos || !any_neg) continue;
      auc_sum += roc_auc(scores, positives);
      ++auc_n;
    }
    if (auc_n > 0) m["auc_macro"] = auc_sum / static_cast<double>(auc_n);
    return m;
  }

  std::filesystem::path metrics_path(Condition c, int run) const {
    return run_dir() / "metrics" /
           (std::string(condition_name(c)) + "_run" + std::to_string(run) + ".json");
  }

  void stage_evaluate() {
    std::filesystem::create_directories(run_dir() / "metrics");
    for (Condition cond : config_.conditions) {
      for (int run = 0; run < runs_for(cond); ++run) {
        nlohmann::json m = compute_metrics(load_predictions(predictions_path(cond, run)));
        m["condition"] = condition_name(cond);
        m["run"] = run;
        write_atomic(metrics_path(cond, run), m.dump(2) + "\n");
      }
    }
  }

  void stage_zero_shot() {
    if (!config_.include_zero_shot) return;
    std::filesystem::create_directories(run_dir() / "predictions");
    std::filesystem::create_directories(run_dir() / "metrics");
    const std::vector<Sample>& all = samples();
    std::vector<const Sample*> eval;
    for (const Sample& s : all)
      if (s.split == config_.eval_split) eval.push_back(&s);
    clean_by_sample();
    client();

    std::vector<ZeroShotResult> results(eval.size());
    parallel_for(eval.size(), static_cast<std::size_t>(config_.parallelism), [&](std::size_t i) {
      results[i] =
          zero_shot_classify(client(), *eval[i], *taxonomy_, img_binding_for(*eval[i]),
                             config_.model_id);
    });

    std::string out;
    std::size_t dropped = 0, parse_errors = 0;
    std::vector<PredRow> rows;
    std::vector<std::string> digests;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      const ZeroShotResult& r = results[i];
      dropped += r.dropped_labels;
      parse_errors += r.parse_error;
      digests.push_back(r.digest);
      nlohmann::json j{
          {"id", eval[i]->id},
          {"labels", std::vector<Label>(r.prediction.labels.begin(), r.prediction.labels.end())},
          {"scores", r.prediction.scores},
          {"gold", std::vector<Label>(eval[i]->gold.begin(), eval[i]->gold.end())},
          {"usable", !r.parse_error}};
      out += j.dump() + "\n";
      rows.push_back({r.prediction, eval[i]->gold, !r.parse_error});
    }
    write_atomic(run_dir() / "predictions" / "zero_shot.jsonl", out);
    note_digests(digests);

    nlohmann::json m = compute_metrics(rows);
    m["condition"] = "zero_shot";
    m["dropped_labels"] = dropped;
    m["parse_errors"] = parse_errors;
    write_atomic(run_dir() / "metrics" / "zero_shot.json", m.dump(2) + "\n");
  }

  // -- report ----------------------------------------------------------------

  double metric_value(const nlohmann::json& m, const std::string& key) const {
    if (!m.contains(key))
      throw StageError("metrics file lacks '" + key + "'");
    return m.at(key).get<double>();
  }

  struct ComparisonRow {
    std::string comparison;
    std::string test;
    double statistic = 0;
    double raw_p = 1.0;
    double adjusted_p = 1.0;
    bool significant = false;
    std::size_t n = 0;
    std::string note;
  };

  void stage_report() {
    const std::string metric = effective_primary_metric(config_);

    std::map<std::string, std::vector<nlohmann::json>> metrics_by_cond;
    std::map<std::string, std::vector<double>> values_by_cond;
    for (Condition cond : config_.conditions) {
      for (int run = 0; run < runs_for(cond); ++run) {
        std::ifstream in(metrics_path(cond, run));
        if (!in) throw StageError("missing metrics " + metrics_path(cond, run).string());
        nlohmann::json m;
        in >> m;
        metrics_by_cond[condition_name(cond)].push_back(m);
        values_by_cond[condition_name(cond)].push_back(metric_value(m, metric));
      }
    }

    nlohmann::json conditions = nlohmann::json::object();
    for (Condition cond : config_.conditions) {
      const std::string name = condition_name(cond);
      const std::vector<double>& vals = values_by_cond.at(name);
      std::vector<double> scaled;
      scaled.reserve(vals.size());
      for (double v : vals) scaled.push_back(100.0 * v);
      const RunAggregate agg = aggregate_runs(scaled);
      conditions[name] = {{"runs", vals.size()},
                          {"per_run", vals},
                          {"mean", agg.mean / 100.0},
                          {"std_dev", agg.std_dev / 100.0},
                          {"best", agg.best / 100.0},
                          {"cell", format_aggregate_cell(agg)},
                          {"metrics", metrics_by_cond.at(name)}};
    }

    // declared comparison family: each multi-run condition against its
    // natural baseline, TCE preferring TC, everything else falling back to T
    std::vector<std::pair<Condition, Condition>> family;
    auto have = [&](Condition c) {
      return std::find(config_.conditions.begin(), config_.conditions.end(), c) !=
             config_.conditions.end();
    };
    for (Condition cond : config_.conditions) {
      if (runs_for(cond) < 2) continue;
      Condition base = Condition::T;
      if (cond == Condition::TCE && have(Condition::TC)) base = Condition::TC;
      if (!have(base)) continue;
      family.emplace_back(cond, base);
    }

    std::vector<ComparisonRow> rows;
    std::vector<double> raw_ps;
    for (const auto& [cond, base] : family) {
      const std::vector<double>& xs = values_by_cond.at(condition_name(cond));
      const std::vector<double>& ys = values_by_cond.at(condition_name(base));
      ComparisonRow row;
      row.comparison = std::string(condition_name(cond)) + " vs " + condition_name(base);
      try {
        if (ys.size() > 1) {
          if (xs.size() != ys.size())
            throw ValidationError("paired comparison needs equal run counts");
          const TestResult t = wilcoxon_signed_rank(xs, ys);
          row.test = test_method_name(t.method);
          row.statistic = t.statistic;
          row.raw_p = t.p_value;
          row.n = t.n;
        } else {
          const TestResult t = t_one_sample(xs, ys.at(0));
          row.test = test_method_name(t.method);
          row.statistic = t.statistic;
          row.raw_p = t.p_value;
          row.n = t.n;
        }
      } catch (const ValidationError& e) {
        row.test = ys.size() > 1 ? "wilcoxon" : "t_one_sample";
        row.statistic = 0;
        row.raw_p = 1.0;
        row.n = xs.size();
        row.note = std::string("degenerate: ") + e.what();
      }
      raw_ps.push_back(row.raw_p);
      rows.push_back(std::move(row));
    }
    if (!rows.empty()) {
      const BHDecision bh = bh_correct(raw_ps, config_.alpha);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].adjusted_p = bh.adjusted_p[i];
        rows[i].significant = bh.significant[i];
      }
    }

    nlohmann::json significance = nlohmann::json::array();
    for (const ComparisonRow& r : rows) {
      nlohmann::json j{{"comparison", r.comparison}, {"test", r.test},
                       {"statistic", r.statistic},   {"raw_p", r.raw_p},
                       {"adjusted_p", r.adjusted_p}, {"significant", r.significant},
                       {"n", r.n}};
      if (!r.note.empty()) j["note"] = r.note;
      significance.push_back(j);
    }

    nlohmann::json report{{"format_version", 1},
                          {"name", config_.name},
                          {"dataset", dataset_name(config_.dataset)},
                          {"strategy", strategy_name(config_.strategy)},
                          {"eval_split", split_name(config_.eval_split)},
                          {"primary_metric", metric},
                          {"alpha", config_.alpha},
                          {"conditions", conditions},
                          {"significance", significance},
                          {"refusals", manifest_.value("refusals", 0)},
                          {"parse_errors", manifest_.value("parse_errors", 0)}};

    ValidityTable validity;
    if (needs_cleaning()) {
      validity = validity_rate(samples(), clean_by_sample());
      report["validity"] = validity_to_json(validity);
    }
    {
      std::ifstream zs(run_dir() / "metrics" / "zero_shot.json");
      if (zs) {
        nlohmann::json m;
        zs >> m;
        report["zero_shot"] = m;
      }
    }

    write_atomic(run_dir() / "report.json", report.dump(2) + "\n");
    write_atomic(run_dir() / "report.txt", render_text_report(report, validity));
  }

  std::string render_text_report(const nlohmann::json& report, const ValidityTable& validity) {
    char buf[128];
    std::string out;
    out += "experiment: " + report.at("name").get<std::string>() + "\n";
    out += "dataset: " + report.at("dataset").get<std::string>();
    out += "  strategy: " + report.at("strategy").get<std::string>();
    out += "  eval split: " + report.at("eval_split").get<std::string>() + "\n";
    out += "primary metric: " + report.at("primary_metric").get<std::string>() + " (x100)\n\n";

    out += "condition\tavg (std) / best\truns\n";
    for (Condition cond : config_.conditions) {
      const nlohmann::json& cj = report.at("conditions").at(condition_name(cond));
      out += std::string(condition_name(cond)) + "\t" + cj.at("cell").get<std::string>() + "\t" +
             std::to_string(cj.at("runs").get<std::size_t>()) + "\n";
    }
    if (report.contains("zero_shot")) {
      const nlohmann::json& zj = report.at("zero_shot");
      const std::string metric = report.at("primary_metric").get<std::string>();
      if (zj.contains(metric)) {
        std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * zj.at(metric).get<double>());
        out += "zero_shot\t" + std::string(buf) + "\t1\n";
      }
    }
    out += "\n";

    if (!validity.empty()) {
      out += "caption validity (% valid)\n";
      out += format_validity(validity);
      out += "\n";
    }

    const nlohmann::json& sig = report.at("significance");
    if (!sig.empty()) {
      std::snprintf(buf, sizeof(buf), "%g", config_.alpha);
      out += "significance (alpha = " + std::string(buf) + ", Benjamini-Hochberg)\n";
      out += "comparison\ttest\tstatistic\traw p\tadj p\tsignificant\n";
      for (const auto& row : sig) {
        std::snprintf(buf, sizeof(buf), "%.4g\t%.4g\t%.4g", row.at("statistic").get<double>(),
                      row.at("raw_p").get<double>(), row.at("adjusted_p").get<double>());
        out += row.at("comparison").get<std::string>() + "\t" +
               row.at("test").get<std::string>() + "\t" + buf + "\t" +
               (row.at("significant").get<bool>() ? "yes" : "no") + "\n";
      }
    }
    const std::size_t refusals = report.at("refusals").get<std::size_t>();
    const std::size_t parse_errors = report.at("parse_errors").get<std::size_t>();
    if (refusals || parse_errors) {
      out += "\nrefusals: " + std::to_string(refusals) +
             "  parse errors: " + std::to_string(parse_errors) + "\n";
    }
    return out;
  }

  ExperimentConfig config_;
  const Taxonomy* taxonomy_ = nullptr;
  nlohmann::json manifest_;
  std::vector<Sample> samples_;
  std::map<std::string, CleanMap> clean_by_sample_;
  bool clean_loaded_ = false;
  std::optional<LlmClient> client_;
};

}  // namespace semaug
