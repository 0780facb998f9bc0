// Experiment runner behavior: config serialization and validation, staged
// execution with a resumable manifest, deterministic artifacts, and the
// structure of the final report.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <semaug/runner.hpp>

#include "support.hpp"
#include "support_synth.hpp"

using namespace semaug;
using Catch::Matchers::ContainsSubstring;
using testsupport::TempDir;

namespace {

ExperimentConfig small_config(const std::string& name, const std::string& corpus,
                              const std::string& scenario, const std::string& runs_dir) {
  ExperimentConfig c;
  c.name = name;
  c.corpus_path = corpus;
  c.mock_scenario = scenario;
  c.runs_dir = runs_dir;
  c.conditions = {Condition::T, Condition::TE};
  c.runs_per_condition = 2;
  c.parallelism = 2;
  c.classifier.features.dimensionality = 1u << 14;
  c.classifier.features.word_ngrams = {1};
  c.classifier.features.char_ngrams = {};
  c.classifier.epochs = 6;
  return c;
}

nlohmann::json parse_file(const std::filesystem::path& p) {
  return nlohmann::json::parse(testsupport::read_file(p));
}

std::size_t line_count(const std::filesystem::path& p) {
  const std::string text = testsupport::read_file(p);
  std::size_t n = 0;
  for (char ch : text)
    if (ch == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("experiment config round trips through JSON", "[runner]") {
  ExperimentConfig c;
  c.name = "exp-01";
  c.corpus_path = "corpus.jsonl";
  c.dataset = DatasetId::jigsaw_toxic;
  c.conditions = {Condition::TCE, Condition::E};
  c.strategy = Strategy::triggers;
  c.runs_per_condition = 3;
  c.provider = "http";
  c.model_id = "remote-1";
  c.cache_dir = "warm";
  c.runs_dir = "out";
  c.clean_temperature = 0.1;
  c.explain_temperature = 0.9;
  c.parallelism = 8;
  c.eval_split = Split::dev;
  c.hierarchy_closure = true;
  c.classifier.features.dimensionality = 1u << 12;
  c.classifier.features.word_ngrams = {1};
  c.classifier.features.char_ngrams = {2, 3};
  c.classifier.features.lowercase = false;
  c.classifier.epochs = 7;
  c.classifier.learning_rate = 0.25;
  c.classifier.l2 = 1e-4;
  c.classifier.batch_size = 8;
  c.classifier.seed = 9;
  c.classifier.threshold = 0.4;
  c.captioner_preference = {"git"};
  c.separator = " | ";
  c.alpha = 0.01;
  c.primary_metric = "macro_f1";

  const ExperimentConfig back = config_from_json(config_to_json(c));
  CHECK(config_to_json(back) == config_to_json(c));
  CHECK(config_digest(back) == config_digest(c));

  ExperimentConfig other = back;
  other.alpha = 0.05;
  CHECK(config_digest(other) != config_digest(c));

  CHECK(effective_primary_metric(ExperimentConfig{}) == "h_f1");
  ExperimentConfig jig;
  jig.dataset = DatasetId::jigsaw_toxic;
  CHECK(effective_primary_metric(jig) == "micro_f1");
  CHECK(effective_primary_metric(c) == "macro_f1");

  // corpus_path is the one required key
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"name", "x"}}), ValidationError);
  nlohmann::json unsupported = config_to_json(c);
  unsupported["format_version"] = 2;
  CHECK_THROWS_AS(config_from_json(unsupported), ValidationError);
  // defaults fill everything else in
  const ExperimentConfig sparse =
      config_from_json(nlohmann::json{{"corpus_path", "c.jsonl"}});
  CHECK(sparse.name == "experiment");
  CHECK(sparse.runs_per_condition == 5);
  CHECK(sparse.conditions.size() == 4);
}

TEST_CASE("config validation rejects inconsistent setups", "[runner]") {
  ExperimentConfig good;
  good.corpus_path = "c.jsonl";
  good.mock_scenario = "s.json";
  CHECK_NOTHROW(validate_config(good));

  auto reject = [&](auto mutate, const std::string& phrase) {
    ExperimentConfig c = good;
    mutate(c);
    CHECK_THROWS_WITH(validate_config(c), ContainsSubstring(phrase));
  };
  reject([](ExperimentConfig& c) { c.name = ""; }, "name");
  reject([](ExperimentConfig& c) { c.name = "bad name!"; }, "alphanumerics");
  reject([](ExperimentConfig& c) { c.corpus_path.clear(); }, "corpus_path");
  reject([](ExperimentConfig& c) { c.conditions.clear(); }, "condition");
  reject([](ExperimentConfig& c) { c.conditions = {Condition::T, Condition::T}; },
         "duplicate condition");
  reject([](ExperimentConfig& c) { c.runs_per_condition = 0; }, "runs_per_condition");
  reject([](ExperimentConfig& c) { c.provider = "grpc"; }, "provider");
  reject([](ExperimentConfig& c) { c.mock_scenario.clear(); }, "mock_scenario");
  reject([](ExperimentConfig& c) { c.parallelism = 0; }, "parallelism");
  reject([](ExperimentConfig& c) { c.alpha = 0.0; }, "alpha");
  reject([](ExperimentConfig& c) { c.alpha = 1.0; }, "alpha");
  reject([](ExperimentConfig& c) { c.eval_split = Split::train; }, "must differ");
  reject(
      [](ExperimentConfig& c) {
        c.include_zero_shot = true;
        c.dataset = DatasetId::hateful_memes;
      },
      "zero-shot");
  reject([](ExperimentConfig& c) { c.primary_metric = "auc"; }, "unknown primary metric");
  reject(
      [](ExperimentConfig& c) {
        c.primary_metric = "h_f1";
        c.dataset = DatasetId::jigsaw_toxic;
      },
      "h_f1");

  // http providers do not need a scenario file
  ExperimentConfig http = good;
  http.provider = "http";
  http.mock_scenario.clear();
  CHECK_NOTHROW(validate_config(http));
}

TEST_CASE("config files load with validation applied", "[runner]") {
  TempDir tmp("runner-config");
  CHECK_THROWS_AS(load_config(tmp.file("missing.json")), ValidationError);

  testsupport::write_file(tmp.file("bad.json"), "{nope");
  CHECK_THROWS_WITH(load_config(tmp.file("bad.json")), ContainsSubstring("not valid JSON"));

  ExperimentConfig c;
  c.name = "from-file";
  c.corpus_path = "c.jsonl";
  c.mock_scenario = "s.json";
  testsupport::write_file(tmp.file("good.json"), config_to_json(c).dump());
  const ExperimentConfig loaded = load_config(tmp.file("good.json"));
  CHECK(config_to_json(loaded) == config_to_json(c));

  c.alpha = 2.0;
  testsupport::write_file(tmp.file("bad-alpha.json"), config_to_json(c).dump());
  CHECK_THROWS_WITH(load_config(tmp.file("bad-alpha.json")), ContainsSubstring("alpha"));
}

TEST_CASE("explanation conditions get the configured number of runs", "[runner]") {
  ExperimentConfig c;
  c.corpus_path = "c.jsonl";
  c.mock_scenario = "s.json";
  c.runs_per_condition = 4;
  ExperimentRunner r(c);
  CHECK(r.runs_for(Condition::T) == 1);
  CHECK(r.runs_for(Condition::TC) == 1);
  CHECK(r.runs_for(Condition::TE) == 4);
  CHECK(r.runs_for(Condition::TCE) == 4);
  CHECK(r.runs_for(Condition::E) == 4);
  CHECK(r.run_dir() == std::filesystem::path("runs") / "experiment");
}

TEST_CASE("a mock experiment runs end to end with the documented artifacts", "[runner]") {
  TempDir tmp("runner-full");
  testsupport::SynthCorpus sc = testsupport::signal_corpus(40, 2);
  nlohmann::json& rules = sc.scenario["rules"];
  rules.insert(rules.begin(),
               nlohmann::json{{"template", "explain"},
                              {"prompt_contains", testsupport::synth_marker(5)},
                              {"run_index", 0},
                              {"response", "I cannot describe this content."}});
  rules.push_back(
      {{"template", "zero_shot_classify"}, {"response", "{\"labels\": [\"Smears\"]}"}});
  testsupport::write_corpus_and_scenario(sc, tmp.file("corpus.jsonl"), tmp.file("scenario.json"));

  ExperimentConfig c = small_config("full-mock", tmp.file("corpus.jsonl"),
                                    tmp.file("scenario.json"), tmp.file("runs"));
  c.include_zero_shot = true;
  ExperimentRunner runner(c);
  REQUIRE(runner.run());
  const std::filesystem::path dir = runner.run_dir();

  SECTION("manifest records config digest and completed stages") {
    const nlohmann::json manifest = parse_file(dir / "manifest.json");
    CHECK(manifest.at("config_digest").get<std::string>() == config_digest(c));
    REQUIRE(manifest.at("completed").size() == stage_names().size());
    for (std::size_t i = 0; i < stage_names().size(); ++i)
      CHECK(manifest.at("completed").at(i).get<std::string>() == stage_names()[i]);
    CHECK(manifest.at("counts").at("samples") == 40);
    CHECK(manifest.at("counts").at("train") == 28);
    CHECK(manifest.at("counts").at("test") == 12);
    CHECK(manifest.at("refusals") == 1);
    CHECK(manifest.at("parse_errors") == 0);
    CHECK(manifest.at("request_digests").size() > 0);
  }

  SECTION("every stage leaves its artifact") {
    for (const char* f :
         {"corpus/samples.jsonl", "augment/clean.jsonl", "augment/run0.jsonl",
          "augment/run1.jsonl", "compose/T_run0.jsonl", "compose/TE_run0.jsonl",
          "compose/TE_run1.jsonl", "models/T_run0.json", "models/TE_run0.json",
          "models/TE_run1.json", "predictions/T_run0.jsonl", "predictions/TE_run1.jsonl",
          "predictions/zero_shot.jsonl", "metrics/T_run0.json", "metrics/TE_run1.json",
          "metrics/zero_shot.json", "report.json", "report.txt"}) {
      INFO(f);
      CHECK(std::filesystem::exists(dir / f));
    }
    CHECK(line_count(dir / "compose" / "T_run0.jsonl") == 40);
    CHECK(line_count(dir / "compose" / "TE_run0.jsonl") == 40);
    CHECK(line_count(dir / "predictions" / "T_run0.jsonl") == 12);
    CHECK(line_count(dir / "predictions" / "zero_shot.jsonl") == 12);
  }

  SECTION("per-run metrics carry the full battery") {
    const nlohmann::json m = parse_file(dir / "metrics" / "TE_run1.json");
    CHECK(m.at("condition") == "TE");
    CHECK(m.at("run") == 1);
    CHECK(m.at("n") == 12);
    for (const char* key : {"h_precision", "h_recall", "h_f1", "micro_f1", "macro_f1",
                            "auc_macro"}) {
      INFO(key);
      REQUIRE(m.contains(key));
      CHECK(m.at(key).get<double>() >= 0.0);
      CHECK(m.at(key).get<double>() <= 1.0);
    }
  }

  SECTION("report aggregates conditions and runs the comparison family") {
    const nlohmann::json report = parse_file(dir / "report.json");
    CHECK(report.at("format_version") == 1);
    CHECK(report.at("name") == "full-mock");
    CHECK(report.at("dataset") == "semeval_memes");
    CHECK(report.at("strategy") == "explanation");
    CHECK(report.at("eval_split") == "test");
    CHECK(report.at("primary_metric") == "h_f1");
    CHECK(report.at("alpha") == 0.05);
    CHECK(report.at("refusals") == 1);
    CHECK(report.at("parse_errors") == 0);

    const nlohmann::json& t = report.at("conditions").at("T");
    CHECK(t.at("runs") == 1);
    CHECK(t.at("per_run").size() == 1);
    const nlohmann::json& te = report.at("conditions").at("TE");
    CHECK(te.at("runs") == 2);
    CHECK(te.at("per_run").size() == 2);
    CHECK(te.at("metrics").size() == 2);
    for (const char* key : {"mean", "std_dev", "best", "cell"}) {
      INFO(key);
      CHECK(te.contains(key));
    }
    CHECK(te.at("mean").get<double>() >= 0.0);
    CHECK(te.at("mean").get<double>() <= 1.0);
    CHECK_THAT(te.at("cell").get<std::string>(), ContainsSubstring(" / "));

    REQUIRE(report.at("significance").size() == 1);
    const nlohmann::json& row = report.at("significance").at(0);
    CHECK(row.at("comparison") == "TE vs T");
    CHECK(row.at("test") == "t_one_sample");
    CHECK(row.at("n") == 2);
    CHECK(row.at("raw_p").get<double>() >= 0.0);
    CHECK(row.at("raw_p").get<double>() <= 1.0);
    CHECK(row.at("adjusted_p").get<double>() >= row.at("raw_p").get<double>() - 1e-15);
    CHECK(row.contains("significant"));

    REQUIRE(report.contains("validity"));
    CHECK(report.at("validity").at("blip").at("train").at("total") == 28);
    CHECK(report.at("validity").at("blip").at("train").at("valid") == 28);
    CHECK(report.at("validity").at("blip").at("test").at("total") == 12);

    REQUIRE(report.contains("zero_shot"));
    CHECK(report.at("zero_shot").at("parse_errors") == 0);
    CHECK(report.at("zero_shot").at("dropped_labels") == 0);
    CHECK(report.at("zero_shot").contains("h_f1"));
  }

  SECTION("text report lists conditions, zero-shot, significance, refusals") {
    const std::string text = testsupport::read_file(dir / "report.txt");
    CHECK_THAT(text, ContainsSubstring("experiment: full-mock"));
    CHECK_THAT(text, ContainsSubstring("primary metric: h_f1"));
    CHECK_THAT(text, ContainsSubstring("condition\tavg (std) / best\truns"));
    CHECK_THAT(text, ContainsSubstring("\nTE\t"));
    CHECK_THAT(text, ContainsSubstring("zero_shot\t"));
    CHECK_THAT(text, ContainsSubstring("significance (alpha = 0.05, Benjamini-Hochberg)"));
    CHECK_THAT(text, ContainsSubstring("TE vs T"));
    CHECK_THAT(text, ContainsSubstring("caption validity (% valid)"));
    CHECK_THAT(text, ContainsSubstring("refusals: 1  parse errors: 0"));
  }
}

TEST_CASE("wiping a run directory reproduces byte-identical reports", "[runner]") {
  TempDir tmp("runner-determinism");
  const testsupport::SynthCorpus sc = testsupport::determinism_corpus(30);
  testsupport::write_corpus_and_scenario(sc, tmp.file("corpus.jsonl"), tmp.file("scenario.json"));
  ExperimentConfig c = small_config("det", tmp.file("corpus.jsonl"), tmp.file("scenario.json"),
                                    tmp.file("runs"));
  c.conditions = {Condition::T, Condition::TCE};

  ExperimentRunner first(c);
  REQUIRE(first.run());
  const std::string report_json = testsupport::read_file(first.run_dir() / "report.json");
  const std::string report_text = testsupport::read_file(first.run_dir() / "report.txt");
  REQUIRE(!report_json.empty());
  std::filesystem::remove_all(first.run_dir());

  ExperimentRunner second(c);
  REQUIRE(second.run());
  CHECK(testsupport::read_file(second.run_dir() / "report.json") == report_json);
  CHECK(testsupport::read_file(second.run_dir() / "report.txt") == report_text);
}

TEST_CASE("interrupted runs resume to the same report", "[runner]") {
  TempDir tmp("runner-resume");
  const testsupport::SynthCorpus sc = testsupport::determinism_corpus(30);
  testsupport::write_corpus_and_scenario(sc, tmp.file("corpus.jsonl"), tmp.file("scenario.json"));
  ExperimentConfig c = small_config("resume", tmp.file("corpus.jsonl"), tmp.file("scenario.json"),
                                    tmp.file("runs-straight"));
  c.conditions = {Condition::T, Condition::TC, Condition::TCE};

  ExperimentRunner straight(c);
  REQUIRE(straight.run());
  const std::string want_json = testsupport::read_file(straight.run_dir() / "report.json");
  const std::string want_text = testsupport::read_file(straight.run_dir() / "report.txt");

  ExperimentConfig c2 = c;
  c2.runs_dir = tmp.file("runs-resumed");
  ExperimentRunner part(c2);
  REQUIRE_FALSE(part.run("augment"));
  const nlohmann::json mid = parse_file(part.run_dir() / "manifest.json");
  CHECK(mid.at("completed") == nlohmann::json({"corpus", "clean", "augment"}));
  CHECK_FALSE(std::filesystem::exists(part.run_dir() / "report.json"));

  ExperimentRunner rest(c2);
  REQUIRE(rest.run());
  CHECK(testsupport::read_file(rest.run_dir() / "report.json") == want_json);
  CHECK(testsupport::read_file(rest.run_dir() / "report.txt") == want_text);

  // the TC condition trains exactly one run on raw captions
  CHECK(std::filesystem::exists(rest.run_dir() / "models" / "TC_run0.json"));
  CHECK_FALSE(std::filesystem::exists(rest.run_dir() / "models" / "TC_run1.json"));
}

TEST_CASE("an existing run rejects a different configuration", "[runner]") {
  TempDir tmp("runner-clash");
  const testsupport::SynthCorpus sc = testsupport::determinism_corpus(10);
  testsupport::write_corpus_and_scenario(sc, tmp.file("corpus.jsonl"), tmp.file("scenario.json"));
  ExperimentConfig c = small_config("clash", tmp.file("corpus.jsonl"), tmp.file("scenario.json"),
                                    tmp.file("runs"));
  c.conditions = {Condition::T};

  ExperimentRunner r(c);
  REQUIRE_FALSE(r.run("corpus"));

  ExperimentConfig changed = c;
  changed.alpha = 0.01;
  ExperimentRunner clash(changed);
  CHECK_THROWS_WITH(clash.run(), ContainsSubstring("exists with a different configuration"));

  // the unchanged config resumes and finishes
  ExperimentRunner resume(c);
  REQUIRE(resume.run());
  const nlohmann::json report = parse_file(resume.run_dir() / "report.json");
  CHECK(report.at("conditions").at("T").at("runs") == 1);
  CHECK(report.at("significance").empty());
  // text-only run: no captions were cleaned, so no validity table
  CHECK_FALSE(report.contains("validity"));
}

TEST_CASE("stage selection and corpus files are validated", "[runner]") {
  TempDir tmp("runner-validate");
  const testsupport::SynthCorpus sc = testsupport::determinism_corpus(10);
  testsupport::write_corpus_and_scenario(sc, tmp.file("corpus.jsonl"), tmp.file("scenario.json"));

  SECTION("unknown halt stage") {
    ExperimentConfig c = small_config("halt", tmp.file("corpus.jsonl"), tmp.file("scenario.json"),
                                      tmp.file("runs"));
    ExperimentRunner r(c);
    CHECK_THROWS_WITH(r.run("paint"), ContainsSubstring("unknown stage 'paint'"));
  }

  SECTION("duplicate sample ids") {
    std::vector<Sample> dup = {testsupport::synth_sample(0), testsupport::synth_sample(1)};
    dup[1].id = dup[0].id;
    write_samples_jsonl(tmp.file("dup.jsonl"), dup);
    ExperimentConfig c = small_config("dup", tmp.file("dup.jsonl"), tmp.file("scenario.json"),
                                      tmp.file("runs"));
    ExperimentRunner r(c);
    CHECK_THROWS_WITH(r.run(), ContainsSubstring("duplicate sample id"));
  }

  SECTION("dataset mismatch") {
    std::vector<Sample> wrong = {testsupport::synth_sample(0), testsupport::synth_sample(7)};
    wrong[0].dataset = DatasetId::jigsaw_toxic;
    write_samples_jsonl(tmp.file("wrong.jsonl"), wrong);
    ExperimentConfig c = small_config("wrong", tmp.file("wrong.jsonl"), tmp.file("scenario.json"),
                                      tmp.file("runs"));
    ExperimentRunner r(c);
    CHECK_THROWS_WITH(r.run(), ContainsSubstring("belongs to jigsaw_toxic"));
  }

  SECTION("empty eval split") {
    std::vector<Sample> all_train;
    for (std::size_t i = 0; i < 4; ++i) {
      Sample s = testsupport::synth_sample(i);
      s.split = Split::train;
      all_train.push_back(std::move(s));
    }
    write_samples_jsonl(tmp.file("train-only.jsonl"), all_train);
    ExperimentConfig c = small_config("train-only", tmp.file("train-only.jsonl"),
                                      tmp.file("scenario.json"), tmp.file("runs"));
    ExperimentRunner r(c);
    CHECK_THROWS_WITH(r.run(), ContainsSubstring("no samples in the eval split"));
  }

  SECTION("missing corpus file") {
    ExperimentConfig c = small_config("missing", tmp.file("nope.jsonl"), tmp.file("scenario.json"),
                                      tmp.file("runs"));
    ExperimentRunner r(c);
    CHECK_THROWS_AS(r.run(), ValidationError);
  }
}
