#pragma once

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "semaug/common.hpp"

namespace semaug {

using Label = std::string;
using LabelSet = std::set<Label>;

// Persuasion-technique label hierarchy: a DAG rooted at ROOT in which a node
// may have several parents. Immutable after construction, so concurrent
// readers need no locking.
class Taxonomy {
 public:
  static constexpr const char* kRoot = "ROOT";

  // Fixture grammar, one directive per line:
  //   node <name>
  //   edge <parent> -> <child>
  //   alias <raw> -> <canonical>
  // '#' starts a comment. Node names may contain spaces, commas, slashes and
  // parentheses; the literal " -> " separator is the only reserved token.
  static Taxonomy parse(const std::string& spec_text) {
    Taxonomy t;
    const auto lines = split_lines(spec_text);
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
      std::string line = trim(lines[ln]);
      if (line.empty() || line[0] == '#') continue;
      const auto where = [&] { return " (line " + std::to_string(ln + 1) + ")"; };
      if (line.rfind("node ", 0) == 0) {
        const std::string name = trim(line.substr(5));
        if (name.empty()) throw ValidationError("taxonomy: empty node name" + where());
        if (t.index_.count(name))
          throw ValidationError("taxonomy: duplicate node name '" + name + "'" + where());
        t.index_[name] = t.names_.size();
        t.names_.push_back(name);
        t.parents_.emplace_back();
        t.children_.emplace_back();
      } else if (line.rfind("edge ", 0) == 0) {
        auto [from, to] = split_arrow(line.substr(5), where());
        const std::size_t p = t.require(from, where());
        const std::size_t c = t.require(to, where());
        t.parents_[c].push_back(p);
        t.children_[p].push_back(c);
      } else if (line.rfind("alias ", 0) == 0) {
        auto [raw, canonical] = split_arrow(line.substr(6), where());
        if (!t.index_.count(canonical))
          throw ValidationError("taxonomy: alias '" + raw + "' points to unknown node '" +
                                canonical + "'" + where());
        t.aliases_[to_lower_ascii(raw)] = canonical;
      } else {
        throw ValidationError("taxonomy: unrecognized directive '" + line + "'" + where());
      }
    }
    t.validate();
    t.finish();
    return t;
  }

  static Taxonomy load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("taxonomy: cannot open file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  static const std::string& default_spec_text();

  // The shipped SemEval-2024 persuasion-technique hierarchy.
  static const Taxonomy& semeval() {
    static const Taxonomy t = parse(default_spec_text());
    return t;
  }

  const std::vector<Label>& nodes() const { return names_; }
  const std::vector<Label>& leaves() const { return leaves_; }

  bool contains(const Label& name) const { return index_.count(name) != 0; }

  bool is_leaf(const Label& name) const {
    return children_[require(name, "")].empty();
  }

  std::vector<Label> parents(const Label& name) const {
    std::vector<Label> out;
    for (std::size_t p : parents_[require(name, "")]) out.push_back(names_[p]);
    return out;
  }

  // Alias- and case-insensitive resolution of a raw label string. Unknown
  // strings are always rejected.
  Label canonicalize(const std::string& raw) const {
    const std::string key = to_lower_ascii(trim(raw));
    auto it = lookup_.find(key);
    if (it == lookup_.end())
      throw ValidationError("unknown label '" + trim(raw) + "'");
    return it->second;
  }

  // Union of all nodes on every ROOT-to-label path, excluding ROOT and the
  // label itself. Internal nodes are included.
  LabelSet ancestors(const Label& name) const {
    const std::size_t start = require(name, "");
    LabelSet out;
    std::deque<std::size_t> frontier(parents_[start].begin(), parents_[start].end());
    std::vector<bool> seen(names_.size(), false);
    while (!frontier.empty()) {
      const std::size_t n = frontier.front();
      frontier.pop_front();
      if (seen[n]) continue;
      seen[n] = true;
      if (n != root_) out.insert(names_[n]);
      for (std::size_t p : parents_[n]) frontier.push_back(p);
    }
    return out;
  }

  // labels plus every ancestor of each label. Idempotent and monotone.
  LabelSet expand(const LabelSet& labels) const {
    LabelSet out = labels;
    for (const Label& l : labels) {
      const LabelSet anc = ancestors(l);
      out.insert(anc.begin(), anc.end());
    }
    return out;
  }

 private:
  Taxonomy() = default;

  static std::pair<std::string, std::string> split_arrow(std::string_view rest,
                                                         const std::string& where) {
    const std::size_t pos = rest.find(" -> ");
    if (pos == std::string_view::npos)
      throw ValidationError("taxonomy: expected ' -> ' separator" + where);
    std::string lhs = trim(rest.substr(0, pos));
    std::string rhs = trim(rest.substr(pos + 4));
    if (lhs.empty() || rhs.empty())
      throw ValidationError("taxonomy: empty name around ' -> '" + where);
    return {lhs, rhs};
  }

  std::size_t require(const std::string& name, const std::string& where) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ValidationError("unknown label '" + name + "'" + where);
    return it->second;
  }

  void validate() {
    auto root_it = index_.find(kRoot);
    if (root_it == index_.end()) throw ValidationError("taxonomy: no ROOT node");
    root_ = root_it->second;

    // Kahn toposort detects cycles.
    std::vector<std::size_t> indegree(names_.size(), 0);
    for (std::size_t n = 0; n < names_.size(); ++n) indegree[n] = parents_[n].size();
    std::deque<std::size_t> queue;
    for (std::size_t n = 0; n < names_.size(); ++n)
      if (indegree[n] == 0) queue.push_back(n);
    std::size_t visited = 0;
    while (!queue.empty()) {
      const std::size_t n = queue.front();
      queue.pop_front();
      ++visited;
      for (std::size_t c : children_[n])
        if (--indegree[c] == 0) queue.push_back(c);
    }
    if (visited != names_.size())
      throw ValidationError("taxonomy: cycle detected among " +
                            std::to_string(names_.size() - visited) + " node(s)");

    // Everything must hang off ROOT.
    std::vector<bool> reach(names_.size(), false);
    std::deque<std::size_t> frontier{root_};
    reach[root_] = true;
    while (!frontier.empty()) {
      const std::size_t n = frontier.front();
      frontier.pop_front();
      for (std::size_t c : children_[n])
        if (!reach[c]) {
          reach[c] = true;
          frontier.push_back(c);
        }
    }
    for (std::size_t n = 0; n < names_.size(); ++n)
      if (!reach[n])
        throw ValidationError("taxonomy: node '" + names_[n] + "' unreachable from ROOT");
  }

  void finish() {
    for (std::size_t n = 0; n < names_.size(); ++n)
      if (children_[n].empty()) leaves_.push_back(names_[n]);
    std::sort(leaves_.begin(), leaves_.end());
    for (const auto& name : names_) lookup_[to_lower_ascii(name)] = name;
    for (const auto& [raw, canonical] : aliases_) lookup_[raw] = canonical;
  }

  std::vector<Label> names_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> parents_;
  std::vector<std::vector<std::size_t>> children_;
  std::map<std::string, Label> aliases_;  // lowercased raw -> canonical
  std::map<std::string, Label> lookup_;   // lowercased name or alias -> canonical
  std::vector<Label> leaves_;
  std::size_t root_ = 0;
};

inline const std::string& Taxonomy::default_spec_text() {
  static const std::string text = R"tax(# SemEval-2024 task 4 persuasion-technique hierarchy.
# Directives: node <name> | edge <parent> -> <child> | alias <raw> -> <canonical>

node ROOT
node Logos
node Ethos
node Pathos
node Reasoning
node Justification
node Simplification
node Distraction
node Ad Hominem

node Repetition
node Obfuscation, Intentional vagueness, Confusion
node Causal Oversimplification
node Black-and-white Fallacy/Dictatorship
node Thought-terminating cliché
node Misrepresentation of Someone's Position (Straw Man)
node Presenting Irrelevant Data (Red Herring)
node Whataboutism
node Slogans
node Bandwagon
node Appeal to authority
node Flag-waving
node Appeal to fear/prejudice
node Glittering generalities (Virtue)
node Doubt
node Name calling/Labeling
node Smears
node Reductio ad hitlerum
node Transfer
node Exaggeration/Minimisation
node Loaded Language
node Appeal to (Strong) Emotions

edge ROOT -> Logos
edge ROOT -> Ethos
edge ROOT -> Pathos

edge Logos -> Repetition
edge Logos -> Obfuscation, Intentional vagueness, Confusion
edge Logos -> Reasoning
edge Logos -> Justification

edge Reasoning -> Simplification
edge Reasoning -> Distraction

edge Simplification -> Causal Oversimplification
edge Simplification -> Black-and-white Fallacy/Dictatorship
edge Simplification -> Thought-terminating cliché

edge Distraction -> Misrepresentation of Someone's Position (Straw Man)
edge Distraction -> Presenting Irrelevant Data (Red Herring)
edge Distraction -> Whataboutism

edge Justification -> Slogans
edge Justification -> Bandwagon
edge Justification -> Appeal to authority
edge Justification -> Flag-waving
edge Justification -> Appeal to fear/prejudice

edge Ethos -> Appeal to authority
edge Ethos -> Glittering generalities (Virtue)
edge Ethos -> Bandwagon
edge Ethos -> Ad Hominem
edge Ethos -> Transfer

edge Ad Hominem -> Doubt
edge Ad Hominem -> Name calling/Labeling
edge Ad Hominem -> Smears
edge Ad Hominem -> Reductio ad hitlerum
edge Ad Hominem -> Whataboutism

edge Pathos -> Exaggeration/Minimisation
edge Pathos -> Loaded Language
edge Pathos -> Appeal to (Strong) Emotions
edge Pathos -> Appeal to fear/prejudice
edge Pathos -> Flag-waving
edge Pathos -> Transfer

alias Straw Man -> Misrepresentation of Someone's Position (Straw Man)
alias Red Herring -> Presenting Irrelevant Data (Red Herring)
alias Obfuscation -> Obfuscation, Intentional vagueness, Confusion
)tax";
  return text;
}

}  // namespace semaug
