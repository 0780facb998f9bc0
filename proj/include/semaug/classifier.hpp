#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "semaug/datasets.hpp"
#include "semaug/llm_client.hpp"
#include "semaug/taxonomy.hpp"

namespace semaug {

// ---------------------------------------------------------------------------
// Feature extraction: hashed word and character n-gram counts, L2 normalized
// ---------------------------------------------------------------------------

struct FeatureSpec {
  std::uint32_t dimensionality = 1u << 18;
  std::vector<int> word_ngrams = {1, 2};
  std::vector<int> char_ngrams = {3, 4, 5};
  bool lowercase = true;
};

inline bool operator==(const FeatureSpec& a, const FeatureSpec& b) {
  return a.dimensionality == b.dimensionality && a.word_ngrams == b.word_ngrams &&
         a.char_ngrams == b.char_ngrams && a.lowercase == b.lowercase;
}

// Sorted by index, indices unique, L2 norm 1 for nonempty text.
using FeatureVector = std::vector<std::pair<std::uint32_t, double>>;

inline FeatureVector featurize(const std::string& text, const FeatureSpec& spec) {
  if (spec.dimensionality == 0) throw ValidationError("feature dimensionality must be positive");
  const std::string s = spec.lowercase ? to_lower_ascii(text) : text;

  std::unordered_map<std::uint32_t, double> counts;
  auto bump = [&](const std::string& key) {
    counts[static_cast<std::uint32_t>(fnv1a64(key) % spec.dimensionality)] += 1.0;
  };

  std::vector<std::string> tokens;
  {
    std::string cur;
    for (char c : s) {
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!cur.empty()) tokens.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
  }
  for (int n : spec.word_ngrams) {
    if (n <= 0) throw ValidationError("word n-gram orders must be positive");
    if (tokens.size() < static_cast<std::size_t>(n)) continue;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string key = "w" + std::to_string(n) + ":";
      for (int k = 0; k < n; ++k) {
        if (k) key += ' ';
        key += tokens[i + k];
      }
      bump(key);
    }
  }
  std::string squeezed;  // char n-grams ignore whitespace structure entirely
  for (const std::string& tok : tokens) {
    if (!squeezed.empty()) squeezed += ' ';
    squeezed += tok;
  }
  for (int n : spec.char_ngrams) {
    if (n <= 0) throw ValidationError("char n-gram orders must be positive");
    if (squeezed.size() < static_cast<std::size_t>(n)) continue;
    for (std::size_t i = 0; i + n <= squeezed.size(); ++i)
      bump("c" + std::to_string(n) + ":" + squeezed.substr(i, n));
  }

  FeatureVector out(counts.begin(), counts.end());
  std::sort(out.begin(), out.end());
  double norm = 0;
  for (const auto& [idx, v] : out) norm += v * v;
  if (norm > 0) {
    norm = std::sqrt(norm);
    for (auto& [idx, v] : out) v /= norm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-label logistic regression, trained with mini-batch gradient descent
// ---------------------------------------------------------------------------

struct TrainExample {
  std::string id;
  FeatureVector features;
  LabelSet labels;
};

struct TrainConfig {
  FeatureSpec features;
  int epochs = 20;
  double learning_rate = 0.5;
  double l2 = 1e-6;
  int batch_size = 16;
  std::uint64_t seed = 42;
  double threshold = 0.5;
};

struct LabelModel {
  std::vector<std::pair<std::uint32_t, double>> weights;  // sparse, sorted, nonzero
  double bias = 0;
  double threshold = 0.5;
};

struct Model {
  FeatureSpec features;
  std::vector<Label> label_space;  // sorted
  std::map<Label, LabelModel> per_label;
  std::vector<double> epoch_loss;  // objective summed over labels, one entry per epoch
  std::uint64_t seed = 42;
};

namespace detail {

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// -log p with the usual clamp so a saturated sigmoid cannot produce inf
inline double log_loss_term(double p, bool y) {
  const double eps = 1e-12;
  p = std::min(1.0 - eps, std::max(eps, p));
  return y ? -std::log(p) : -std::log(1.0 - p);
}

}  // namespace detail

// Mean logistic loss over the corpus plus (l2/2)*||w||^2, for one label. The
// dense signature exists so the gradient can be checked against finite
// differences.
inline double logistic_objective(const std::vector<TrainExample>& corpus, const Label& label,
                                 const std::vector<double>& w, double bias, double l2) {
  if (corpus.empty()) throw ValidationError("logistic_objective: empty corpus");
  double loss = 0;
  for (const TrainExample& ex : corpus) {
    double z = bias;
    for (const auto& [idx, v] : ex.features) z += w.at(idx) * v;
    loss += detail::log_loss_term(detail::sigmoid(z), ex.labels.count(label) > 0);
  }
  loss /= static_cast<double>(corpus.size());
  double sq = 0;
  for (double x : w) sq += x * x;
  return loss + 0.5 * l2 * sq;
}

// Analytic gradient of logistic_objective with respect to (w, bias).
inline std::pair<std::vector<double>, double> logistic_gradient(
    const std::vector<TrainExample>& corpus, const Label& label, const std::vector<double>& w,
    double bias, double l2) {
  if (corpus.empty()) throw ValidationError("logistic_gradient: empty corpus");
  std::vector<double> gw(w.size(), 0.0);
  double gb = 0;
  for (const TrainExample& ex : corpus) {
    double z = bias;
    for (const auto& [idx, v] : ex.features) z += w.at(idx) * v;
    const double err = detail::sigmoid(z) - (ex.labels.count(label) > 0 ? 1.0 : 0.0);
    for (const auto& [idx, v] : ex.features) gw.at(idx) += err * v;
    gb += err;
  }
  const double inv_n = 1.0 / static_cast<double>(corpus.size());
  for (std::size_t i = 0; i < gw.size(); ++i) gw[i] = gw[i] * inv_n + l2 * w[i];
  return {std::move(gw), gb * inv_n};
}

namespace detail {

// Scaled-weight representation: w_true = scale * w_stored. L2 decay then
// costs one multiply per batch instead of a pass over the whole vector, and
// stays exact.
struct ScaledWeights {
  std::vector<double> stored;
  double scale = 1.0;

  void renormalize_if_needed(const std::vector<std::uint32_t>& active) {
    if (scale > 1e-9) return;
    for (std::uint32_t idx : active) stored[idx] *= scale;
    scale = 1.0;
  }
};

inline double objective_sparse(const std::vector<TrainExample>& corpus,
                               const std::vector<char>& y, const ScaledWeights& w, double bias,
                               double l2, const std::vector<std::uint32_t>& active) {
  double loss = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    double z = bias;
    for (const auto& [idx, v] : corpus[i].features) z += w.stored[idx] * v;
    z = bias + (z - bias) * w.scale;
    loss += log_loss_term(sigmoid(z), y[i] != 0);
  }
  loss /= static_cast<double>(corpus.size());
  double sq = 0;
  for (std::uint32_t idx : active) sq += w.stored[idx] * w.stored[idx];
  return loss + 0.5 * l2 * sq * w.scale * w.scale;
}

}  // namespace detail

// Canonical example order is by sorted id, so shuffled corpora train to
// identical models under the same seed. Each epoch must not increase the
// objective: an epoch that does is rolled back and retried with a halved
// learning rate.
inline Model train(std::vector<TrainExample> corpus, const std::vector<Label>& label_space,
                   const TrainConfig& config) {
  if (corpus.empty()) throw ValidationError("train: empty corpus");
  if (label_space.empty()) throw ValidationError("train: empty label space");
  if (config.epochs < 1) throw ValidationError("train: epochs must be >= 1");
  if (config.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (config.learning_rate <= 0) throw ValidationError("train: learning_rate must be positive");
  if (config.l2 < 0) throw ValidationError("train: l2 must be >= 0");

  std::vector<Label> labels = label_space;
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  {
    const std::set<Label> space(labels.begin(), labels.end());
    for (const TrainExample& ex : corpus)
      for (const Label& l : ex.labels)
        if (!space.count(l))
          throw ValidationError("train: example '" + ex.id + "' has label '" + l +
                                "' outside the label space");
  }

  std::sort(corpus.begin(), corpus.end(),
            [](const TrainExample& a, const TrainExample& b) { return a.id < b.id; });

  std::vector<std::uint32_t> active;
  {
    std::set<std::uint32_t> idxs;
    for (const TrainExample& ex : corpus)
      for (const auto& [idx, v] : ex.features) idxs.insert(idx);
    active.assign(idxs.begin(), idxs.end());
  }

  const std::size_t n = corpus.size();
  std::vector<std::vector<std::size_t>> epoch_order(static_cast<std::size_t>(config.epochs));
  {
    // one RNG for the batch schedule, shared by every label
    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> base(n);
    std::iota(base.begin(), base.end(), 0);
    for (int e = 0; e < config.epochs; ++e) {
      std::shuffle(base.begin(), base.end(), rng);
      epoch_order[static_cast<std::size_t>(e)] = base;
    }
  }

  Model model;
  model.features = config.features;
  model.label_space = labels;
  model.seed = config.seed;
  model.epoch_loss.assign(static_cast<std::size_t>(config.epochs), 0.0);

  std::vector<double> stored(config.features.dimensionality, 0.0);
  for (const Label& label : labels) {
    std::fill(stored.begin(), stored.end(), 0.0);
    detail::ScaledWeights w{std::move(stored), 1.0};
    double bias = 0;
    double lr = config.learning_rate;

    std::vector<char> y(n, 0);
    for (std::size_t i = 0; i < n; ++i) y[i] = corpus[i].labels.count(label) ? 1 : 0;

    double prev = detail::objective_sparse(corpus, y, w, bias, config.l2, active);

    std::vector<double> snapshot(active.size());
    std::unordered_map<std::uint32_t, double> grad;
    for (int e = 0; e < config.epochs; ++e) {
      for (std::size_t k = 0; k < active.size(); ++k) snapshot[k] = w.stored[active[k]];
      const double snap_scale = w.scale;
      const double snap_bias = bias;

      double after = prev;
      for (int halving = 0; halving < 30; ++halving) {
        const auto& order = epoch_order[static_cast<std::size_t>(e)];
        for (std::size_t start = 0; start < n; start += config.batch_size) {
          const std::size_t end = std::min(n, start + config.batch_size);
          grad.clear();
          double gb = 0;
          for (std::size_t k = start; k < end; ++k) {
            const TrainExample& ex = corpus[order[k]];
            double z = bias;
            for (const auto& [idx, v] : ex.features) z += w.stored[idx] * v;
            z = bias + (z - bias) * w.scale;
            const double err = detail::sigmoid(z) - (y[order[k]] ? 1.0 : 0.0);
            for (const auto& [idx, v] : ex.features) grad[idx] += err * v;
            gb += err;
          }
          const double inv_b = 1.0 / static_cast<double>(end - start);
          w.scale *= (1.0 - lr * config.l2);
          if (w.scale <= 0) throw StageError("train: learning rate too large for l2 decay");
          for (const auto& [idx, g] : grad) w.stored[idx] -= lr * g * inv_b / w.scale;
          bias -= lr * gb * inv_b;
          w.renormalize_if_needed(active);
        }
        after = detail::objective_sparse(corpus, y, w, bias, config.l2, active);
        if (after <= prev + 1e-12) break;
        for (std::size_t k = 0; k < active.size(); ++k) w.stored[active[k]] = snapshot[k];
        w.scale = snap_scale;
        bias = snap_bias;
        lr *= 0.5;
        after = prev;
      }
      prev = std::min(after, prev);
      model.epoch_loss[static_cast<std::size_t>(e)] += prev;
    }

    LabelModel lm;
    lm.bias = bias;
    lm.threshold = config.threshold;
    for (std::uint32_t idx : active) {
      const double v = w.stored[idx] * w.scale;
      if (v != 0.0) lm.weights.emplace_back(idx, v);
    }
    model.per_label[label] = std::move(lm);
    stored = std::move(w.stored);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

struct PredictionSet {
  std::string sample_id;
  std::map<Label, double> scores;
  LabelSet labels;
};

inline double score_features(const LabelModel& lm, const FeatureVector& x) {
  double z = lm.bias;
  std::size_t i = 0, j = 0;
  while (i < lm.weights.size() && j < x.size()) {
    if (lm.weights[i].first < x[j].first) {
      ++i;
    } else if (x[j].first < lm.weights[i].first) {
      ++j;
    } else {
      z += lm.weights[i].second * x[j].second;
      ++i;
      ++j;
    }
  }
  return detail::sigmoid(z);
}

inline PredictionSet predict(const Model& model, const std::string& text) {
  const FeatureVector x = featurize(text, model.features);
  PredictionSet out;
  for (const Label& label : model.label_space) {
    const LabelModel& lm = model.per_label.at(label);
    const double p = score_features(lm, x);
    out.scores[label] = p;
    if (p >= lm.threshold) out.labels.insert(label);
  }
  return out;
}

// Adds every ancestor of a predicted label that lives inside the label space.
// Scores are left alone; closure is a set operation.
inline void apply_hierarchy_closure(PredictionSet& pred, const Taxonomy& taxonomy,
                                    const std::vector<Label>& label_space) {
  const std::set<Label> space(label_space.begin(), label_space.end());
  LabelSet expanded = taxonomy.expand(pred.labels);
  LabelSet kept;
  for (const Label& l : expanded)
    if (space.count(l)) kept.insert(l);
  pred.labels = std::move(kept);
}

// Per-label threshold sweep on a held-out corpus, maximizing that label's F1.
// Ties keep the lowest threshold. Labels without positives keep the default.
inline void tune_thresholds(Model& model, const std::vector<TrainExample>& dev) {
  if (dev.empty()) throw ValidationError("tune_thresholds: empty dev corpus");
  std::vector<FeatureVector> feats;
  feats.reserve(dev.size());
  for (const TrainExample& ex : dev) feats.push_back(ex.features);
  for (const Label& label : model.label_space) {
    LabelModel& lm = model.per_label.at(label);
    std::vector<double> scores(dev.size());
    for (std::size_t i = 0; i < dev.size(); ++i) scores[i] = score_features(lm, feats[i]);
    std::size_t positives = 0;
    for (const TrainExample& ex : dev) positives += ex.labels.count(label);
    if (positives == 0) continue;
    double best_f1 = -1, best_t = lm.threshold;
    for (int step = 1; step <= 19; ++step) {
      const double t = step * 0.05;
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < dev.size(); ++i) {
        const bool pred_pos = scores[i] >= t;
        const bool gold_pos = dev[i].labels.count(label) > 0;
        if (pred_pos && gold_pos) ++tp;
        else if (pred_pos) ++fp;
        else if (gold_pos) ++fn;
      }
      const double denom = 2.0 * tp + fp + fn;
      const double f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
      if (f1 > best_f1 + 1e-12) {
        best_f1 = f1;
        best_t = t;
      }
    }
    lm.threshold = best_t;
  }
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

inline nlohmann::json model_to_json(const Model& model) {
  nlohmann::json labels = nlohmann::json::object();
  for (const auto& [label, lm] : model.per_label) {
    nlohmann::json weights = nlohmann::json::array();
    for (const auto& [idx, v] : lm.weights) weights.push_back({idx, v});
    labels[label] = {{"bias", lm.bias}, {"threshold", lm.threshold}, {"weights", weights}};
  }
  return nlohmann::json{{"format_version", 1},
                        {"type", "semaug-linear"},
                        {"features",
                         {{"dimensionality", model.features.dimensionality},
                          {"word_ngrams", model.features.word_ngrams},
                          {"char_ngrams", model.features.char_ngrams},
                          {"lowercase", model.features.lowercase}}},
                        {"seed", model.seed},
                        {"label_space", model.label_space},
                        {"labels", labels},
                        {"epoch_loss", model.epoch_loss}};
}

inline Model model_from_json(const nlohmann::json& j) {
  Model model;
  try {
    if (j.at("format_version").get<int>() != 1)
      throw ValidationError("model: unsupported format_version");
    if (j.at("type").get<std::string>() != "semaug-linear")
      throw ValidationError("model: unsupported type");
    const nlohmann::json& f = j.at("features");
    model.features.dimensionality = f.at("dimensionality").get<std::uint32_t>();
    model.features.word_ngrams = f.at("word_ngrams").get<std::vector<int>>();
    model.features.char_ngrams = f.at("char_ngrams").get<std::vector<int>>();
    model.features.lowercase = f.at("lowercase").get<bool>();
    model.seed = j.at("seed").get<std::uint64_t>();
    model.label_space = j.at("label_space").get<std::vector<Label>>();
    model.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    for (const auto& [label, lj] : j.at("labels").items()) {
      LabelModel lm;
      lm.bias = lj.at("bias").get<double>();
      lm.threshold = lj.at("threshold").get<double>();
      for (const auto& wj : lj.at("weights"))
        lm.weights.emplace_back(wj.at(0).get<std::uint32_t>(), wj.at(1).get<double>());
      model.per_label[label] = std::move(lm);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed model JSON: ") + e.what());
  }
  for (const Label& label : model.label_space)
    if (!model.per_label.count(label))
      throw ValidationError("model: label space entry '" + label + "' has no weights");
  return model;
}

inline void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw StageError("cannot write model to " + path);
  out << model_to_json(model).dump(2) << "\n";
}

inline Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read model from " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("model file is not valid JSON (" + path + "): " + e.what());
  }
  return model_from_json(j);
}

// ---------------------------------------------------------------------------
// Zero-shot classification through the LLM
// ---------------------------------------------------------------------------

inline std::string strip_code_fences(const std::string& raw) {
  std::string t = trim(raw);
  if (t.rfind("```", 0) != 0) return t;
  const std::size_t nl = t.find('\n');
  t = nl == std::string::npos ? std::string() : t.substr(nl + 1);
  const std::size_t fence = t.rfind("```");
  if (fence != std::string::npos) t = t.substr(0, fence);
  return trim(t);
}

struct ZeroShotResult {
  PredictionSet prediction;
  std::size_t dropped_labels = 0;  // returned labels that failed to canonicalize
  bool parse_error = false;        // output not JSON even after fence stripping
  std::string digest;
};

inline ZeroShotResult zero_shot_classify(LlmClient& client, const Sample& sample,
                                         const Taxonomy& taxonomy,
                                         const std::string& img_binding,
                                         const std::string& model_id, int run_index = 0) {
  CompletionRequest req;
  req.template_id = TemplateId::zero_shot_classify;
  req.field_values = {{"text", sample.text}, {"img", img_binding}};
  req.model_id = model_id;
  req.temperature = 0.0;
  req.run_index = run_index;
  const Completion c = client.complete(req);

  ZeroShotResult out;
  out.digest = c.digest;
  out.prediction.sample_id = sample.id;

  nlohmann::json j;
  bool parsed = false;
  try {
    j = nlohmann::json::parse(trim(c.raw_text));
    parsed = true;
  } catch (const nlohmann::json::exception&) {
  }
  if (!parsed) {
    try {
      j = nlohmann::json::parse(strip_code_fences(c.raw_text));
      parsed = true;
    } catch (const nlohmann::json::exception&) {
    }
  }
  if (!parsed || !j.is_object() || !j.contains("labels") || !j.at("labels").is_array()) {
    out.parse_error = true;
    return out;
  }
  for (const auto& lj : j.at("labels")) {
    if (!lj.is_string()) {
      ++out.dropped_labels;
      continue;
    }
    try {
      const Label canonical = taxonomy.canonicalize(lj.get<std::string>());
      out.prediction.labels.insert(canonical);
      out.prediction.scores[canonical] = 1.0;
    } catch (const ValidationError&) {
      ++out.dropped_labels;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// External classifier bridge
// ---------------------------------------------------------------------------

struct ExternalExample {
  std::string id;
  std::string input_text;
  LabelSet gold;
};

inline void export_external(const std::string& path, const std::vector<ExternalExample>& rows) {
  std::ofstream out(path);
  if (!out) throw StageError("cannot write external export to " + path);
  for (const ExternalExample& row : rows) {
    nlohmann::json j{{"id", row.id},
                     {"input_text", row.input_text},
                     {"gold_labels", std::vector<Label>(row.gold.begin(), row.gold.end())}};
    out << j.dump() << "\n";
  }
}

// Accepts one JSON object per line carrying "labels", "scores", or both.
// Score-only rows are thresholded. The id set must match expected_ids
// exactly; results come back in expected order.
inline std::vector<PredictionSet> import_external(const std::string& path,
                                                  const std::vector<std::string>& expected_ids,
                                                  double threshold = 0.5) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read external predictions from " + path);
  std::map<std::string, PredictionSet> by_id;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("external predictions line " + std::to_string(line_no) +
                            " is not valid JSON: " + e.what());
    }
    PredictionSet p;
    try {
      p.sample_id = j.at("id").get<std::string>();
      if (j.contains("scores"))
        p.scores = j.at("scores").get<std::map<Label, double>>();
      if (j.contains("labels")) {
        for (const auto& lj : j.at("labels")) p.labels.insert(lj.get<std::string>());
      } else if (j.contains("scores")) {
        for (const auto& [label, score] : p.scores)
          if (score >= threshold) p.labels.insert(label);
      } else {
        throw ValidationError("external predictions line " + std::to_string(line_no) +
                              " has neither labels nor scores");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("external predictions line " + std::to_string(line_no) +
                            " is malformed: " + e.what());
    }
    if (by_id.count(p.sample_id))
      throw ValidationError("external predictions: duplicate id '" + p.sample_id + "'");
    by_id[p.sample_id] = std::move(p);
  }
  std::vector<PredictionSet> out;
  out.reserve(expected_ids.size());
  for (const std::string& id : expected_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw ValidationError("external predictions: missing id '" + id + "'");
    out.push_back(std::move(it->second));
    by_id.erase(it);
  }
  if (!by_id.empty())
    throw ValidationError("external predictions: unexpected id '" + by_id.begin()->first + "'");
  return out;
}

}  // namespace semaug
