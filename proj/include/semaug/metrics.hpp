#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "semaug/taxonomy.hpp"

namespace semaug {

struct HF1Result {
  double h_precision = 0.0;
  double h_recall = 0.0;
  double h_f1 = 0.0;
  std::size_t n_samples = 0;
};

// Micro-aggregated hierarchical F1: every gold and predicted set is expanded
// with its taxonomy ancestors, then a single corpus-wide precision/recall
// ratio is formed. An empty prediction contributes nothing to either the
// intersection or the prediction denominator.
inline HF1Result hierarchical_f1(const std::vector<LabelSet>& gold,
                                 const std::vector<LabelSet>& pred,
                                 const Taxonomy& taxonomy) {
  if (gold.size() != pred.size())
    throw ValidationError("hierarchical_f1: gold and pred have different lengths (" +
                          std::to_string(gold.size()) + " vs " + std::to_string(pred.size()) + ")");
  if (gold.empty()) throw ValidationError("hierarchical_f1: empty corpus");

  std::size_t inter = 0, gold_total = 0, pred_total = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const LabelSet g = taxonomy.expand(gold[i]);
    const LabelSet p = taxonomy.expand(pred[i]);
    gold_total += g.size();
    pred_total += p.size();
    std::vector<Label> common;
    std::set_intersection(g.begin(), g.end(), p.begin(), p.end(), std::back_inserter(common));
    inter += common.size();
  }

  HF1Result r;
  r.n_samples = gold.size();
  r.h_precision = pred_total > 0 ? static_cast<double>(inter) / pred_total : 0.0;
  r.h_recall = gold_total > 0 ? static_cast<double>(inter) / gold_total : 0.0;
  r.h_f1 = (r.h_precision + r.h_recall) > 0.0
               ? 2.0 * r.h_precision * r.h_recall / (r.h_precision + r.h_recall)
               : 0.0;
  return r;
}

struct LabelPRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // gold positives
};

struct FlatF1Result {
  std::map<Label, LabelPRF> per_label;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
};

// Standard one-vs-rest confusion counting. A label with neither gold nor
// predicted positives has f1 = 0 and is excluded from the macro average.
inline FlatF1Result flat_f1(const std::vector<LabelSet>& gold,
                            const std::vector<LabelSet>& pred,
                            const std::vector<Label>& label_space) {
  if (gold.size() != pred.size())
    throw ValidationError("flat_f1: gold and pred have different lengths");

  FlatF1Result r;
  std::size_t micro_tp = 0, micro_fp = 0, micro_fn = 0;
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  for (const Label& l : label_space) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const bool g = gold[i].count(l) != 0;
      const bool p = pred[i].count(l) != 0;
      tp += (g && p);
      fp += (!g && p);
      fn += (g && !p);
    }
    LabelPRF prf;
    prf.support = tp + fn;
    prf.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    prf.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    prf.f1 = (prf.precision + prf.recall) > 0.0
                 ? 2.0 * prf.precision * prf.recall / (prf.precision + prf.recall)
                 : 0.0;
    r.per_label[l] = prf;
    micro_tp += tp;
    micro_fp += fp;
    micro_fn += fn;
    if (tp + fp + fn > 0) {
      macro_sum += prf.f1;
      ++macro_n;
    }
  }
  const double mp = (micro_tp + micro_fp) > 0 ? static_cast<double>(micro_tp) / (micro_tp + micro_fp) : 0.0;
  const double mr = (micro_tp + micro_fn) > 0 ? static_cast<double>(micro_tp) / (micro_tp + micro_fn) : 0.0;
  r.micro_f1 = (mp + mr) > 0.0 ? 2.0 * mp * mr / (mp + mr) : 0.0;
  r.macro_f1 = macro_n > 0 ? macro_sum / macro_n : 0.0;
  return r;
}

// Mann-Whitney AUC with ties counted as half. Computed from midranks so large
// inputs stay O(n log n); the tests compare against O(n^2) pair counting.
inline double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positives) {
  if (scores.size() != positives.size())
    throw ValidationError("roc_auc: scores and positives have different lengths");
  const std::size_t n_pos = static_cast<std::size_t>(
      std::count(positives.begin(), positives.end(), true));
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ValidationError("roc_auc: undefined, needs at least one positive and one negative");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (positives[order[k]]) pos_rank_sum += midrank;
    i = j;
  }
  const double u = pos_rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct RunAggregate {
  double mean = 0.0;
  double std_dev = 0.0;  // sample standard deviation (n - 1); 0 for a singleton
  double best = 0.0;
  std::vector<double> per_run;
};

inline RunAggregate aggregate_runs(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("aggregate_runs: empty value list");
  RunAggregate a;
  a.per_run = values;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  a.best = *std::max_element(values.begin(), values.end());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std_dev = std::sqrt(ss / (values.size() - 1));
  }
  return a;
}

// "avg (std) / best" cell, one decimal, as used in the ablation table.
inline std::string format_aggregate_cell(const RunAggregate& a) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.1f (%.1f) / %.1f", a.mean, a.std_dev, a.best);
  return buf;
}

}  // namespace semaug
