// Command line front end for the semantic augmentation pipeline.

#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "semaug/augment.hpp"
#include "semaug/classifier.hpp"
#include "semaug/datasets.hpp"
#include "semaug/http_provider.hpp"
#include "semaug/llm_client.hpp"
#include "semaug/metrics.hpp"
#include "semaug/runner.hpp"
#include "semaug/stats.hpp"
#include "semaug/taxonomy.hpp"

namespace {

using namespace semaug;

std::shared_ptr<Provider> make_provider(const std::string& provider,
                                        const std::string& scenario) {
  if (provider == "mock") {
    if (scenario.empty())
      throw ValidationError("mock provider needs --scenario");
    return std::make_shared<MockProvider>(MockProvider::from_file(scenario));
  }
  if (provider == "http") return std::make_shared<HttpProvider>(HttpProvider::from_env());
  throw ValidationError("unknown provider '" + provider + "' (expected mock or http)");
}

RetryPolicy retry_for(const std::string& provider) {
  return provider == "mock" ? RetryPolicy{5, 0.01, 0.05} : RetryPolicy{};
}

LlmClient make_client(const std::string& provider, const std::string& scenario,
                      const std::string& cache_dir) {
  std::optional<CompletionCache> cache;
  if (!cache_dir.empty()) cache.emplace(cache_dir);
  return LlmClient(make_provider(provider, scenario), std::move(cache), retry_for(provider));
}

const Taxonomy& taxonomy_from(const std::string& path) {
  if (path.empty()) return Taxonomy::semeval();
  static std::optional<Taxonomy> loaded;
  loaded = Taxonomy::load_file(path);
  return *loaded;
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("not a number: '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("empty value list");
  return out;
}

std::vector<Sample> eval_subset(const std::vector<Sample>& all, Split split) {
  std::vector<Sample> out;
  for (const Sample& s : all)
    if (s.split == split) out.push_back(s);
  if (out.empty())
    throw ValidationError(std::string("no samples in split '") + split_name(split) + "'");
  return out;
}

std::map<std::string, CleanMap> read_clean_file(const std::string& path) {
  std::map<std::string, CleanMap> out;
  if (path.empty()) return out;
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read clean results '" + path + "'");
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (trim(line).empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      out[j.at("id").get<std::string>()] = clean_map_from_json(j.at("captioners"));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("clean results '" + path + "' line " + std::to_string(ln) + ": " +
                            e.what());
    }
  }
  return out;
}

std::map<std::string, AugmentationRecord> read_records_file(const std::string& path) {
  std::map<std::string, AugmentationRecord> out;
  if (path.empty()) return out;
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read augmentation records '" + path + "'");
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    AugmentationRecord r = record_from_json(nlohmann::json::parse(line));
    out[r.sample_id] = std::move(r);
  }
  return out;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"semaug: LLM semantic augmentation experiments"};
  app.require_subcommand(1);

  // ---- ingest ----
  auto* ingest = app.add_subcommand("ingest", "Convert a raw dataset release to canonical JSONL");
  std::string in_dataset, in_input, in_output, in_split = "train", in_taxonomy;
  bool in_skip_bad = false;
  double in_dev_holdout = 0.0;
  std::uint64_t in_seed = 42;
  ingest->add_option("--dataset", in_dataset, "semeval | jigsaw | hateful")->required();
  ingest->add_option("--input", in_input, "raw dataset file")->required();
  ingest->add_option("--output", in_output, "canonical JSONL path")->required();
  ingest->add_option("--split", in_split, "split tag for the loaded records");
  ingest->add_option("--taxonomy", in_taxonomy, "taxonomy spec (default: built in)");
  ingest->add_flag("--skip-bad", in_skip_bad, "skip malformed records instead of failing");
  ingest->add_option("--dev-holdout", in_dev_holdout, "carve this fraction of train into dev");
  ingest->add_option("--seed", in_seed, "holdout shuffle seed");
  ingest->callback([&] {
    LoadOptions opt;
    opt.skip_bad = in_skip_bad;
    opt.split = split_from_name(in_split);
    std::vector<std::string> issues;
    opt.issues = &issues;
    const DatasetId id = dataset_from_name(in_dataset);
    std::vector<Sample> samples;
    switch (id) {
      case DatasetId::semeval_memes:
        samples = load_semeval(in_input, taxonomy_from(in_taxonomy), opt);
        break;
      case DatasetId::jigsaw_toxic: samples = load_jigsaw(in_input, opt); break;
      case DatasetId::hateful_memes: samples = load_hateful(in_input, opt); break;
    }
    if (samples.empty()) throw ValidationError("no usable records in '" + in_input + "'");
    if (in_dev_holdout > 0.0) assign_dev_holdout(samples, in_dev_holdout, in_seed);
    write_samples_jsonl(in_output, samples);
    for (const std::string& issue : issues) std::cerr << "skipped: " << issue << "\n";
    std::cout << "wrote " << samples.size() << " samples to " << in_output << "\n";
  });

  // ---- distribution ----
  auto* dist = app.add_subcommand("distribution", "Label distribution of a canonical corpus");
  std::string d_input;
  int d_decimals = 2;
  dist->add_option("--input", d_input, "canonical JSONL")->required();
  dist->add_option("--decimals", d_decimals, "percentage decimals");
  dist->callback([&] {
    const DistributionTable t = label_distribution(read_samples_jsonl(d_input));
    std::cout << format_distribution(t, d_decimals);
  });

  // ---- clean ----
  auto* clean = app.add_subcommand("clean", "Clean captions through the LLM");
  std::string c_input, c_output, c_model = "mock-model", c_provider = "mock", c_scenario,
              c_cache;
  int c_parallelism = 4;
  clean->add_option("--input", c_input, "canonical JSONL")->required();
  clean->add_option("--output", c_output, "clean results JSONL")->required();
  clean->add_option("--model", c_model, "model id");
  clean->add_option("--provider", c_provider, "mock | http");
  clean->add_option("--scenario", c_scenario, "mock scenario file");
  clean->add_option("--cache", c_cache, "completion cache directory");
  clean->add_option("--parallelism", c_parallelism, "worker threads")->check(CLI::PositiveNumber);
  clean->callback([&] {
    const std::vector<Sample> samples = read_samples_jsonl(c_input);
    LlmClient client = make_client(c_provider, c_scenario, c_cache);
    AugmentOptions opts;
    opts.model_id = c_model;
    std::vector<CleanMap> results(samples.size());
    parallel_for(samples.size(), static_cast<std::size_t>(c_parallelism), [&](std::size_t i) {
      CleanMap m;
      for (const auto& [captioner, caption] : samples[i].captions)
        m[captioner] = clean_caption(client, caption, opts);
      results[i] = std::move(m);
    });
    std::ofstream out(c_output);
    if (!out) throw StageError("cannot write '" + c_output + "'");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].captions.empty()) continue;
      out << nlohmann::json{{"id", samples[i].id}, {"captioners", clean_map_to_json(results[i])}}
                 .dump()
          << "\n";
    }
    const ValidityTable table = [&] {
      std::map<std::string, CleanMap> by_sample;
      for (std::size_t i = 0; i < samples.size(); ++i)
        if (!samples[i].captions.empty()) by_sample[samples[i].id] = results[i];
      return validity_rate(samples, by_sample);
    }();
    std::cout << format_validity(table);
  });

  // ---- augment ----
  auto* aug = app.add_subcommand("augment", "Generate explanations (or triggers) per sample");
  std::string a_input, a_clean, a_output, a_strategy = "explanation", a_model = "mock-model",
              a_provider = "mock", a_scenario, a_cache;
  int a_run = 0, a_parallelism = 4;
  aug->add_option("--input", a_input, "canonical JSONL")->required();
  aug->add_option("--clean", a_clean, "clean results JSONL (optional)");
  aug->add_option("--output", a_output, "augmentation records JSONL")->required();
  aug->add_option("--strategy", a_strategy, "explanation | triggers");
  aug->add_option("--run-index", a_run, "sampling run index");
  aug->add_option("--model", a_model, "model id");
  aug->add_option("--provider", a_provider, "mock | http");
  aug->add_option("--scenario", a_scenario, "mock scenario file");
  aug->add_option("--cache", a_cache, "completion cache directory");
  aug->add_option("--parallelism", a_parallelism, "worker threads")->check(CLI::PositiveNumber);
  aug->callback([&] {
    const Strategy strategy = strategy_from_name(a_strategy);
    const std::vector<Sample> samples = read_samples_jsonl(a_input);
    const std::map<std::string, CleanMap> clean_by_sample = read_clean_file(a_clean);
    LlmClient client = make_client(a_provider, a_scenario, a_cache);
    AugmentOptions opts;
    opts.model_id = a_model;
    std::vector<AugmentationRecord> records(samples.size());
    parallel_for(samples.size(), static_cast<std::size_t>(a_parallelism), [&](std::size_t i) {
      const Sample& s = samples[i];
      auto it = clean_by_sample.find(s.id);
      const std::string img = best_caption_binding(
          s, it != clean_by_sample.end() ? &it->second : nullptr, opts.captioner_preference);
      AugmentationRecord rec;
      rec.sample_id = s.id;
      rec.run_index = a_run;
      if (strategy == Strategy::explanation) {
        ExplanationResult e = gen_explanation(client, s.text, img, opts, a_run);
        rec.explanation = e.explanation;
        rec.refusal = e.refusal;
        rec.digests["explain"] = e.digest;
      } else {
        TriggerResult t = gen_triggers(client, s.text, img, opts, a_run);
        rec.explanation = t.explanation;
        rec.triggers = t.triggers;
        rec.refusal = t.refusal;
        rec.parse_error = t.parse_error;
        rec.digests["explain_triggers"] = t.digest;
      }
      records[i] = std::move(rec);
    });
    std::ofstream out(a_output);
    if (!out) throw StageError("cannot write '" + a_output + "'");
    std::size_t refusals = 0;
    for (const AugmentationRecord& r : records) {
      refusals += r.refusal;
      out << record_to_json(r).dump() << "\n";
    }
    std::cout << "augmented " << records.size() << " samples (" << refusals << " refusals)\n";
  });

  // ---- compose ----
  auto* comp = app.add_subcommand("compose", "Compose classifier inputs for one condition");
  std::string m_input, m_records, m_clean, m_output, m_condition, m_strategy = "explanation",
              m_separator = " [SEP] ";
  comp->add_option("--input", m_input, "canonical JSONL")->required();
  comp->add_option("--records", m_records, "augmentation records JSONL");
  comp->add_option("--clean", m_clean, "clean results JSONL");
  comp->add_option("--output", m_output, "composed corpus JSONL")->required();
  comp->add_option("--condition", m_condition, "T | TC | TE | TCE | E")->required();
  comp->add_option("--strategy", m_strategy, "explanation | triggers");
  comp->add_option("--separator", m_separator, "part separator");
  comp->callback([&] {
    const Condition condition = condition_from_name(m_condition);
    const Strategy strategy = strategy_from_name(m_strategy);
    const std::vector<Sample> samples = read_samples_jsonl(m_input);
    const std::map<std::string, CleanMap> clean_by_sample = read_clean_file(m_clean);
    const std::map<std::string, AugmentationRecord> records = read_records_file(m_records);
    if (condition_uses_explanation(condition) && records.empty())
      throw ValidationError("condition " + m_condition + " needs --records");
    ComposeOptions copts;
    copts.separator = m_separator;
    std::ofstream out(m_output);
    if (!out) throw StageError("cannot write '" + m_output + "'");
    for (const Sample& s : samples) {
      const AugmentationRecord* rec = nullptr;
      if (auto it = records.find(s.id); it != records.end()) rec = &it->second;
      const CleanMap* clean = nullptr;
      if (auto it = clean_by_sample.find(s.id); it != clean_by_sample.end()) clean = &it->second;
      ComposedInput ci = compose_input(s, rec, clean, condition, strategy, copts);
      nlohmann::json j = composed_to_json(ci, strategy);
      j["split"] = split_name(s.split);
      j["gold"] = std::vector<Label>(s.gold.begin(), s.gold.end());
      out << j.dump() << "\n";
    }
  });

  // ---- train ----
  auto* tr = app.add_subcommand("train", "Train the multi-label classifier");
  std::string t_composed, t_dataset = "semeval", t_output, t_split = "train";
  TrainConfig t_config;
  tr->add_option("--composed", t_composed, "composed corpus JSONL")->required();
  tr->add_option("--dataset", t_dataset, "semeval | jigsaw | hateful");
  tr->add_option("--output", t_output, "model JSON path")->required();
  tr->add_option("--split", t_split, "training split");
  tr->add_option("--epochs", t_config.epochs);
  tr->add_option("--learning-rate", t_config.learning_rate);
  tr->add_option("--l2", t_config.l2);
  tr->add_option("--batch-size", t_config.batch_size);
  tr->add_option("--seed", t_config.seed);
  tr->add_option("--dimensionality", t_config.features.dimensionality);
  tr->add_option("--threshold", t_config.threshold);
  bool t_tune = false;
  tr->add_flag("--tune-dev", t_tune, "tune per-label thresholds on the dev split");
  tr->callback([&] {
    const DatasetId id = dataset_from_name(t_dataset);
    const Split split = split_from_name(t_split);
    std::vector<Label> space;
    switch (id) {
      case DatasetId::semeval_memes: space = Taxonomy::semeval().leaves(); break;
      case DatasetId::jigsaw_toxic: space = jigsaw_label_columns(); break;
      case DatasetId::hateful_memes: space = {hateful_label()}; break;
    }
    std::ifstream in(t_composed);
    if (!in) throw ValidationError("cannot read '" + t_composed + "'");
    std::vector<TrainExample> corpus, dev;
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      const Split row_split = split_from_name(j.at("split").get<std::string>());
      if (row_split != split && !(t_tune && row_split == Split::dev)) continue;
      ComposedInput ci = composed_from_json(j);
      if (!ci.usable) continue;
      LabelSet gold;
      for (const auto& lj : j.at("gold")) gold.insert(lj.get<std::string>());
      (row_split == split ? corpus : dev)
          .push_back({ci.sample_id, featurize(ci.text, t_config.features), std::move(gold)});
    }
    if (corpus.empty()) throw ValidationError("no usable training rows in '" + t_composed + "'");
    Model model = train(std::move(corpus), space, t_config);
    if (t_tune) {
      if (dev.empty())
        throw ValidationError("--tune-dev: no usable dev rows in '" + t_composed + "'");
      tune_thresholds(model, dev);
    }
    save_model(model, t_output);
    std::cout << "trained on " << model.label_space.size() << " labels; final loss "
              << model.epoch_loss.back() << "\n";
  });

  // ---- predict ----
  auto* pr = app.add_subcommand("predict", "Score composed inputs with a trained model");
  std::string p_model, p_composed, p_output, p_split = "test";
  bool p_closure = false;
  pr->add_option("--model", p_model, "model JSON")->required();
  pr->add_option("--composed", p_composed, "composed corpus JSONL")->required();
  pr->add_option("--output", p_output, "predictions JSONL")->required();
  pr->add_option("--split", p_split, "split to score");
  pr->add_flag("--closure", p_closure, "add ancestors of predicted labels");
  pr->callback([&] {
    const Model model = load_model(p_model);
    const Split split = split_from_name(p_split);
    std::ifstream in(p_composed);
    if (!in) throw ValidationError("cannot read '" + p_composed + "'");
    std::ofstream out(p_output);
    if (!out) throw StageError("cannot write '" + p_output + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      if (split_from_name(j.at("split").get<std::string>()) != split) continue;
      ComposedInput ci = composed_from_json(j);
      PredictionSet pred;
      pred.sample_id = ci.sample_id;
      if (ci.usable) {
        pred = predict(model, ci.text);
        pred.sample_id = ci.sample_id;
        if (p_closure)
          apply_hierarchy_closure(pred, Taxonomy::semeval(), model.label_space);
      }
      out << nlohmann::json{{"id", pred.sample_id},
                            {"labels", std::vector<Label>(pred.labels.begin(), pred.labels.end())},
                            {"scores", pred.scores},
                            {"gold", j.at("gold")},
                            {"usable", ci.usable}}
                 .dump()
          << "\n";
    }
  });

  // ---- evaluate ----
  auto* ev = app.add_subcommand("evaluate", "Metrics for a predictions file");
  std::string e_predictions, e_dataset = "semeval", e_taxonomy;
  ev->add_option("--predictions", e_predictions, "predictions JSONL")->required();
  ev->add_option("--dataset", e_dataset, "semeval | jigsaw | hateful");
  ev->add_option("--taxonomy", e_taxonomy, "taxonomy spec (default: built in)");
  ev->callback([&] {
    const DatasetId id = dataset_from_name(e_dataset);
    std::ifstream in(e_predictions);
    if (!in) throw ValidationError("cannot read '" + e_predictions + "'");
    std::vector<LabelSet> gold, pred;
    std::vector<std::map<Label, double>> scores;
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      LabelSet g, p;
      for (const auto& lj : j.at("gold")) g.insert(lj.get<std::string>());
      for (const auto& lj : j.at("labels")) p.insert(lj.get<std::string>());
      gold.push_back(std::move(g));
      pred.push_back(std::move(p));
      scores.push_back(j.contains("scores") ? j.at("scores").get<std::map<Label, double>>()
                                            : std::map<Label, double>{});
    }
    nlohmann::json m;
    m["n"] = gold.size();
    std::vector<Label> space;
    switch (id) {
      case DatasetId::semeval_memes: {
        const Taxonomy& tax = taxonomy_from(e_taxonomy);
        const HF1Result h = hierarchical_f1(gold, pred, tax);
        m["h_precision"] = h.h_precision;
        m["h_recall"] = h.h_recall;
        m["h_f1"] = h.h_f1;
        space = tax.leaves();
        break;
      }
      case DatasetId::jigsaw_toxic: space = jigsaw_label_columns(); break;
      case DatasetId::hateful_memes: space = {hateful_label()}; break;
    }
    const FlatF1Result f = flat_f1(gold, pred, space);
    m["micro_f1"] = f.micro_f1;
    m["macro_f1"] = f.macro_f1;
    double auc_sum = 0;
    std::size_t auc_n = 0;
    for (const Label& label : space) {
      std::vector<double> ls;
      std::vector<bool> pos;
      bool any_pos = false, any_neg = false;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        auto it = scores[i].find(label);
        ls.push_back(it != scores[i].end() ? it->second : 0.0);
        const bool is_pos = gold[i].count(label) > 0;
        pos.push_back(is_pos);
        (is_pos ? any_pos : any_neg) = true;
      }
      if (!any_pos || !any_neg) continue;
      auc_sum += roc_auc(ls, pos);
      ++auc_n;
    }
    if (auc_n > 0) m["auc_macro"] = auc_sum / static_cast<double>(auc_n);
    std::cout << m.dump(2) << "\n";
  });

  // ---- zero-shot ----
  auto* zs = app.add_subcommand("zero-shot", "Classify through the LLM, no training");
  std::string z_input, z_output, z_split = "test", z_model = "mock-model", z_provider = "mock",
              z_scenario, z_cache, z_clean;
  int z_parallelism = 4;
  zs->add_option("--input", z_input, "canonical JSONL")->required();
  zs->add_option("--output", z_output, "predictions JSONL")->required();
  zs->add_option("--split", z_split, "split to classify");
  zs->add_option("--clean", z_clean, "clean results JSONL (optional)");
  zs->add_option("--model", z_model, "model id");
  zs->add_option("--provider", z_provider, "mock | http");
  zs->add_option("--scenario", z_scenario, "mock scenario file");
  zs->add_option("--cache", z_cache, "completion cache directory");
  zs->add_option("--parallelism", z_parallelism, "worker threads")->check(CLI::PositiveNumber);
  zs->callback([&] {
    const std::vector<Sample> samples =
        eval_subset(read_samples_jsonl(z_input), split_from_name(z_split));
    const std::map<std::string, CleanMap> clean_by_sample = read_clean_file(z_clean);
    LlmClient client = make_client(z_provider, z_scenario, z_cache);
    const Taxonomy& tax = Taxonomy::semeval();
    std::vector<ZeroShotResult> results(samples.size());
    parallel_for(samples.size(), static_cast<std::size_t>(z_parallelism), [&](std::size_t i) {
      auto it = clean_by_sample.find(samples[i].id);
      const std::string img = best_caption_binding(
          samples[i], it != clean_by_sample.end() ? &it->second : nullptr, {"blip", "git", "human"});
      results[i] = zero_shot_classify(client, samples[i], tax, img, z_model);
    });
    std::ofstream out(z_output);
    if (!out) throw StageError("cannot write '" + z_output + "'");
    std::size_t dropped = 0, parse_errors = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      dropped += results[i].dropped_labels;
      parse_errors += results[i].parse_error;
      out << nlohmann::json{{"id", samples[i].id},
                            {"labels", std::vector<Label>(results[i].prediction.labels.begin(),
                                                          results[i].prediction.labels.end())},
                            {"scores", results[i].prediction.scores},
                            {"gold", std::vector<Label>(samples[i].gold.begin(),
                                                        samples[i].gold.end())},
                            {"usable", !results[i].parse_error}}
                 .dump()
          << "\n";
    }
    std::cout << "classified " << samples.size() << " samples (" << dropped
              << " labels dropped, " << parse_errors << " parse errors)\n";
  });

  // ---- stats ----
  auto* st = app.add_subcommand("stats", "Significance tests on value lists");
  auto* st_t = st->add_subcommand("t", "One-sample t test against a baseline value");
  std::string stt_values;
  double stt_mu0 = 0.0;
  st_t->add_option("--values", stt_values, "comma separated values")->required();
  st_t->add_option("--mu0", stt_mu0, "baseline value")->required();
  st_t->callback([&] {
    const TestResult r = t_one_sample(parse_doubles(stt_values), stt_mu0);
    std::cout << nlohmann::json{{"test", test_method_name(r.method)},
                                {"statistic", r.statistic},
                                {"p_value", r.p_value},
                                {"n", r.n}}
                     .dump(2)
              << "\n";
  });
  auto* st_w = st->add_subcommand("wilcoxon", "Paired Wilcoxon signed-rank test");
  std::string stw_x, stw_y;
  st_w->add_option("--x", stw_x, "comma separated values")->required();
  st_w->add_option("--y", stw_y, "comma separated values")->required();
  st_w->callback([&] {
    const TestResult r = wilcoxon_signed_rank(parse_doubles(stw_x), parse_doubles(stw_y));
    std::cout << nlohmann::json{{"test", test_method_name(r.method)},
                                {"statistic", r.statistic},
                                {"p_value", r.p_value},
                                {"n", r.n}}
                     .dump(2)
              << "\n";
  });
  auto* st_bh = st->add_subcommand("bh", "Benjamini-Hochberg correction");
  std::string stb_p;
  double stb_alpha = 0.05;
  st_bh->add_option("--p", stb_p, "comma separated raw p-values")->required();
  st_bh->add_option("--alpha", stb_alpha, "significance level");
  st_bh->callback([&] {
    const BHDecision d = bh_correct(parse_doubles(stb_p), stb_alpha);
    std::cout << nlohmann::json{{"raw_p", d.raw_p},
                                {"adjusted_p", d.adjusted_p},
                                {"significant", d.significant},
                                {"alpha", d.alpha}}
                     .dump(2)
              << "\n";
  });
  st->require_subcommand(1);

  // ---- run ----
  auto* run = app.add_subcommand("run", "Execute a full experiment from a config file");
  std::string r_config, r_halt_after;
  run->add_option("--config", r_config, "experiment config JSON")->required();
  run->add_option("--halt-after", r_halt_after, "stop after this stage (resumable)")
      ->group("");  // internal: deterministic interrupt for resume testing
  run->callback([&] {
    ExperimentConfig cfg = load_config(r_config);
    ExperimentRunner runner(cfg);
    runner.set_provider(make_provider(cfg.provider, cfg.mock_scenario), retry_for(cfg.provider));
    if (runner.run(r_halt_after)) {
      std::cout << "run complete: " << (runner.run_dir() / "report.txt").string() << "\n";
    } else {
      std::cout << "halted after stage '" << r_halt_after << "' (resume by running again)\n";
    }
  });

  // ---- report ----
  auto* rep = app.add_subcommand("report", "Print the report of a finished run");
  std::string rp_dir;
  bool rp_json = false;
  rep->add_option("--run-dir", rp_dir, "run directory (runs/<name>)")->required();
  rep->add_flag("--json", rp_json, "print report.json instead of the text report");
  rep->callback([&] {
    const std::filesystem::path path =
        std::filesystem::path(rp_dir) / (rp_json ? "report.json" : "report.txt");
    std::ifstream in(path);
    if (!in)
      throw ValidationError("no report at " + path.string() + " (run may be unfinished)");
    std::cout << in.rdbuf();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const semaug::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const semaug::ProviderError& e) {
    std::cerr << "provider error: " << e.what() << "\n";
    return 3;
  } catch (const semaug::StageError& e) {
    std::cerr << "stage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
