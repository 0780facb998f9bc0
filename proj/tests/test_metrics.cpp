#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "semaug/metrics.hpp"
#include "support_taxonomy.hpp"

using namespace semaug;

namespace {

std::vector<Label> label_pool() {
  std::vector<Label> pool;
  for (const Label& n : Taxonomy::semeval().nodes())
    if (n != Taxonomy::kRoot) pool.push_back(n);
  return pool;
}

LabelSet random_subset(const std::vector<Label>& pool, std::mt19937& rng, int max_size) {
  std::uniform_int_distribution<int> size_dist(0, max_size);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  LabelSet out;
  const int k = size_dist(rng);
  for (int i = 0; i < k; ++i) out.insert(pool[pick(rng)]);
  return out;
}

std::set<std::string> as_std(const LabelSet& s) { return std::set<std::string>(s.begin(), s.end()); }

// O(n^2) pairwise AUC with ties worth half a win.
double auc_by_pairs(const std::vector<double>& scores, const std::vector<bool>& positives) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positives[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positives[j]) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("worked hierarchical F1 example") {
  const Taxonomy& t = Taxonomy::semeval();
  // gold {Smears} expands to {Smears, Ad Hominem, Ethos}; the prediction
  // {Name calling/Labeling} shares the two internal nodes, so 2 of 3 match
  // on both sides.
  const HF1Result r = hierarchical_f1({{"Smears"}}, {{"Name calling/Labeling"}}, t);
  CHECK(r.h_precision == 2.0 / 3.0);
  CHECK(r.h_recall == 2.0 / 3.0);
  CHECK(r.h_f1 == 2.0 / 3.0);
  CHECK(r.n_samples == 1);
}

TEST_CASE("hierarchical F1 endpoints") {
  const Taxonomy& t = Taxonomy::semeval();
  SECTION("identity predictions score 1") {
    const std::vector<LabelSet> g = {{"Smears"}, {"Loaded Language", "Repetition"}};
    const HF1Result r = hierarchical_f1(g, g, t);
    CHECK(r.h_f1 == 1.0);
  }
  SECTION("all-empty predictions score 0") {
    const HF1Result r = hierarchical_f1({{"Smears"}, {"Doubt"}}, {{}, {}}, t);
    CHECK(r.h_precision == 0.0);
    CHECK(r.h_recall == 0.0);
    CHECK(r.h_f1 == 0.0);
  }
  SECTION("validation") {
    CHECK_THROWS_AS(hierarchical_f1({{"Smears"}}, {}, t), ValidationError);
    CHECK_THROWS_AS(hierarchical_f1({}, {}, t), ValidationError);
  }
}

TEST_CASE("hierarchical F1 matches the expansion oracle on random corpora") {
  const Taxonomy& t = Taxonomy::semeval();
  const std::vector<Label> pool = label_pool();
  std::mt19937 rng(20240417);
  std::uniform_int_distribution<int> n_dist(1, 50);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = n_dist(rng);
    std::vector<LabelSet> gold, pred;
    std::vector<std::set<std::string>> ogold, opred;
    for (int i = 0; i < n; ++i) {
      gold.push_back(random_subset(pool, rng, 3));
      pred.push_back(random_subset(pool, rng, 3));
      ogold.push_back(as_std(gold.back()));
      opred.push_back(as_std(pred.back()));
    }
    const HF1Result got = hierarchical_f1(gold, pred, t);
    const testsupport::OracleHF1 want = testsupport::oracle_h_f1(ogold, opred);
    INFO("trial " << trial << ", n = " << n);
    CHECK_THAT(got.h_precision, Catch::Matchers::WithinAbs(want.precision, 1e-12));
    CHECK_THAT(got.h_recall, Catch::Matchers::WithinAbs(want.recall, 1e-12));
    CHECK_THAT(got.h_f1, Catch::Matchers::WithinAbs(want.f1, 1e-12));
  }
}

TEST_CASE("flat F1 worked example") {
  const std::vector<Label> space = {"a", "b", "c"};
  const std::vector<LabelSet> gold = {{"a"}, {"a", "b"}, {}};
  const std::vector<LabelSet> pred = {{"a"}, {"b"}, {"b"}};
  const FlatF1Result r = flat_f1(gold, pred, space);

  CHECK(r.per_label.at("a").precision == 1.0);
  CHECK(r.per_label.at("a").recall == 0.5);
  CHECK(r.per_label.at("a").f1 == 2.0 / 3.0);
  CHECK(r.per_label.at("a").support == 2);

  CHECK(r.per_label.at("b").precision == 0.5);
  CHECK(r.per_label.at("b").recall == 1.0);
  CHECK(r.per_label.at("b").f1 == 2.0 / 3.0);

  // c never occurs: zero scores, and it stays out of the macro average
  CHECK(r.per_label.at("c").f1 == 0.0);
  CHECK(r.per_label.at("c").support == 0);

  CHECK(r.micro_f1 == 2.0 / 3.0);
  CHECK(r.macro_f1 == 2.0 / 3.0);
}

TEST_CASE("flat F1 edge behavior") {
  const std::vector<Label> space = {"a", "b"};
  SECTION("perfect predictions") {
    const std::vector<LabelSet> g = {{"a"}, {"b"}, {"a", "b"}};
    const FlatF1Result r = flat_f1(g, g, space);
    CHECK(r.micro_f1 == 1.0);
    CHECK(r.macro_f1 == 1.0);
  }
  SECTION("labels outside the space are ignored") {
    const FlatF1Result r = flat_f1({{"z"}}, {{"z"}}, space);
    CHECK(r.micro_f1 == 0.0);
    CHECK(r.per_label.size() == 2);
  }
  SECTION("length mismatch") {
    CHECK_THROWS_AS(flat_f1({{"a"}}, {}, space), ValidationError);
  }
}

TEST_CASE("ROC-AUC worked examples") {
  SECTION("clean separation with one inversion") {
    const double auc = roc_auc({0.1, 0.4, 0.35, 0.8}, {false, false, true, true});
    CHECK(auc == 0.75);
  }
  SECTION("all scores tied gives chance level") {
    CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {true, false, true, false}) == 0.5);
  }
  SECTION("degenerate classes are rejected") {
    CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {true, true}), ValidationError);
    CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {false, false}), ValidationError);
    CHECK_THROWS_AS(roc_auc({0.1}, {true, false}), ValidationError);
  }
}

TEST_CASE("ROC-AUC matches pairwise counting on random score sets") {
  std::mt19937 rng(991);
  std::uniform_int_distribution<int> n_dist(2, 60);
  std::uniform_int_distribution<int> level_dist(0, 9);  // coarse levels force ties
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 150; ++trial) {
    const int n = n_dist(rng);
    std::vector<double> scores;
    std::vector<bool> positives;
    bool any_pos = false, any_neg = false;
    for (int i = 0; i < n; ++i) {
      scores.push_back(level_dist(rng) / 10.0);
      positives.push_back(coin(rng));
      (positives.back() ? any_pos : any_neg) = true;
    }
    if (!any_pos || !any_neg) continue;
    INFO("trial " << trial);
    CHECK_THAT(roc_auc(scores, positives),
               Catch::Matchers::WithinAbs(auc_by_pairs(scores, positives), 1e-12));
  }
}

TEST_CASE("run aggregation and the ablation-style cell") {
  const RunAggregate a = aggregate_runs({60.0, 61.0, 62.0});
  CHECK(a.mean == 61.0);
  CHECK(a.std_dev == 1.0);
  CHECK(a.best == 62.0);
  CHECK(format_aggregate_cell(a) == "61.0 (1.0) / 62.0");

  const RunAggregate single = aggregate_runs({59.95});
  CHECK(single.std_dev == 0.0);
  CHECK(format_aggregate_cell(single) == "60.0 (0.0) / 60.0");

  CHECK_THROWS_AS(aggregate_runs({}), ValidationError);
}
