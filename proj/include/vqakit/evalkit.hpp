#pragma once

// Answer scoring and reporting: exact accuracy, Wu-Palmer similarity over a
// user-supplied taxonomy (WUPS at configurable thresholds), the
// min(count/3, 1) consensus score for ten-answer records, and a per-question-
// type breakdown rendered as a fixed-width text table.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vqakit/core.hpp"
#include "vqakit/text.hpp"

namespace vqakit::evalkit {

// Single-parent, single-root term hierarchy loaded from "child<TAB>parent"
// lines. Depth counts nodes from the root, root itself at depth 1.
struct TaxonomyTree {
  std::string root;
  std::map<std::string, std::string> parent;  // every node except the root
  std::map<std::string, int> depth;

  bool contains(const std::string& term) const { return depth.count(term) != 0; }
  int depth_of(const std::string& term) const { return depth.at(term); }
  std::size_t size() const { return depth.size(); }

  static TaxonomyTree from_edges(const std::vector<std::pair<std::string, std::string>>& edges) {
    TaxonomyTree t;
    std::set<std::string> nodes;
    for (const auto& [child, parent] : edges) {
      VQAKIT_REQUIRE(!child.empty() && !parent.empty(), "taxonomy: empty term in edge");
      VQAKIT_REQUIRE(child != parent, "taxonomy: self-edge at '" + child + "'");
      auto [it, fresh] = t.parent.emplace(child, parent);
      VQAKIT_REQUIRE(fresh || it->second == parent,
                     "taxonomy: '" + child + "' has two different parents");
      VQAKIT_REQUIRE(fresh, "taxonomy: duplicate edge for '" + child + "'");
      nodes.insert(child);
      nodes.insert(parent);
    }
    VQAKIT_REQUIRE(!nodes.empty(), "taxonomy: no edges");

    for (const std::string& n : nodes)
      if (t.parent.count(n) == 0) {
        VQAKIT_REQUIRE(t.root.empty(),
                       "taxonomy: multiple roots ('" + t.root + "' and '" + n + "')");
        t.root = n;
      }
    VQAKIT_REQUIRE(!t.root.empty(), "taxonomy: no root (cycle covers every node)");

    // walk each node up to the root; a chain longer than the node count
    // can only mean a cycle
    for (const std::string& n : nodes) {
      if (t.depth.count(n)) continue;
      std::vector<std::string> chain;
      std::string cur = n;
      while (t.depth.count(cur) == 0 && cur != t.root) {
        chain.push_back(cur);
        VQAKIT_REQUIRE(chain.size() <= nodes.size(), "taxonomy: cycle through '" + n + "'");
        cur = t.parent.at(cur);
      }
      int d = cur == t.root ? 1 : t.depth.at(cur);
      if (cur == t.root) t.depth[t.root] = 1;
      for (auto it = chain.rbegin(); it != chain.rend(); ++it) t.depth[*it] = ++d;
    }
    t.depth[t.root] = 1;
    return t;
  }

  static TaxonomyTree load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("taxonomy: cannot read " + path.string());
    std::vector<std::pair<std::string, std::string>> edges;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      if (tab == std::string::npos || tab == 0 || tab + 1 == line.size())
        throw IoError("taxonomy: " + path.string() + " line " + std::to_string(line_no) +
                      ": expected 'child<TAB>parent'");
      edges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return from_edges(edges);
  }
};

// Lowercased tokens re-joined with single spaces; the common ground for
// every string comparison in this module.
inline std::string normalize_answer(const std::string& s) {
  std::string out;
  for (const std::string& tok : text::tokenize(s)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

// Wu-Palmer similarity: twice the depth of the deepest common ancestor over
// the summed term depths. Identical strings score 1 even outside the
// taxonomy (an exact match is perfect regardless of lexical coverage);
// otherwise any out-of-taxonomy term scores 0.
inline double wup_similarity(const TaxonomyTree& tax, const std::string& a, const std::string& b) {
  if (a == b) return 1.0;
  if (!tax.contains(a) || !tax.contains(b)) return 0.0;

  std::map<std::string, int> up;  // a's ancestor chain with depths
  std::string cur = a;
  up[cur] = tax.depth_of(cur);
  while (cur != tax.root) {
    cur = tax.parent.at(cur);
    up[cur] = tax.depth_of(cur);
  }
  cur = b;
  while (up.count(cur) == 0) cur = tax.parent.at(cur);  // first hit = deepest common
  return 2.0 * up.at(cur) / (tax.depth_of(a) + tax.depth_of(b));
}

struct WupsOptions {
  double threshold = 0.9;
  double down_weight = 0.1;  // multiplier for below-threshold similarities
};

namespace detail {

inline double thresholded_wup(const TaxonomyTree& tax, const std::string& a, const std::string& b,
                              const WupsOptions& opt) {
  const double w = wup_similarity(tax, a, b);
  return w >= opt.threshold ? w : opt.down_weight * w;
}

// One prediction/truth pair: per direction, every token must find support in
// the other side (min over own tokens of max over the other's), and the
// directions are combined with another min.
inline double pair_wups(const TaxonomyTree& tax, const std::string& prediction,
                        const std::string& truth, const WupsOptions& opt) {
  const std::vector<std::string> pred = text::tokenize(prediction);
  const std::vector<std::string> gold = text::tokenize(truth);
  if (pred.empty() || gold.empty()) return pred.empty() && gold.empty() ? 1.0 : 0.0;

  auto directional = [&](const std::vector<std::string>& from, const std::vector<std::string>& to) {
    double worst = 1.0;
    for (const std::string& f : from) {
      double best = 0.0;
      for (const std::string& t : to) best = std::max(best, thresholded_wup(tax, f, t, opt));
      worst = std::min(worst, best);
    }
    return worst;
  };
  return std::min(directional(pred, gold), directional(gold, pred));
}

}  // namespace detail

// Mean pairwise WUPS over aligned prediction/truth lists, as a percentage.
inline double wups_score(const std::vector<std::string>& predictions,
                         const std::vector<std::string>& ground_truths, const TaxonomyTree& tax,
                         double threshold, double down_weight = 0.1) {
  VQAKIT_REQUIRE(predictions.size() == ground_truths.size(),
                 "wups_score: prediction/truth length mismatch");
  VQAKIT_REQUIRE(!predictions.empty(), "wups_score: empty lists");
  const WupsOptions opt{threshold, down_weight};
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    sum += detail::pair_wups(tax, predictions[i], ground_truths[i], opt);
  return 100.0 * sum / static_cast<double>(predictions.size());
}

// Case-insensitive, token-normalized string equality, as a percentage.
inline double exact_accuracy(const std::vector<std::string>& predictions,
                             const std::vector<std::string>& ground_truths) {
  VQAKIT_REQUIRE(predictions.size() == ground_truths.size(),
                 "exact_accuracy: prediction/truth length mismatch");
  VQAKIT_REQUIRE(!predictions.empty(), "exact_accuracy: empty lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (normalize_answer(predictions[i]) == normalize_answer(ground_truths[i])) ++hits;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Consensus credit: a third of a point per agreeing human, capped at one.
inline double vqa_consensus(const std::string& prediction,
                            const std::vector<std::string>& human_answers) {
  VQAKIT_REQUIRE(!human_answers.empty(), "vqa_consensus: need at least one human answer");
  const std::string norm = normalize_answer(prediction);
  std::size_t count = 0;
  for (const std::string& h : human_answers)
    if (normalize_answer(h) == norm) ++count;
  return std::min(static_cast<double>(count) / 3.0, 1.0);
}

// Longest matching lowercase prefix from the table; no match falls back to
// "others", which the table must contain.
inline std::string question_type(const std::string& question,
                                 const std::vector<std::string>& prefix_table) {
  VQAKIT_REQUIRE(!prefix_table.empty(), "question_type: empty prefix table");
  VQAKIT_REQUIRE(std::find(prefix_table.begin(), prefix_table.end(), "others") !=
                     prefix_table.end(),
                 "question_type: prefix table must include the fallback 'others'");
  std::string q = question;
  for (char& c : q) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

  std::string best;
  for (const std::string& prefix : prefix_table) {
    if (prefix == "others" || prefix.size() < best.size()) continue;
    if (q.compare(0, prefix.size(), prefix) == 0 && prefix.size() > best.size()) best = prefix;
  }
  return best.empty() ? "others" : best;
}

// One scored question: a single ground truth is matched exactly,
// two or more are treated as a human-consensus panel.
struct EvalRecord {
  std::string question;
  std::string prediction;
  std::vector<std::string> ground_truths;
};

struct EvalReport {
  double accuracy = 0.0;  // percentages throughout
  double wups_at_09 = 0.0;
  double wups_at_00 = 0.0;
  struct TypeRow {
    std::string type;
    std::size_t count = 0;
    double accuracy = 0.0;
  };
  std::vector<TypeRow> per_type;  // prefix-table order
  std::size_t total = 0;
  std::string table;  // rendered fixed-width text
};

inline EvalReport build_report(const std::vector<EvalRecord>& records, const TaxonomyTree& tax,
                               const std::vector<std::string>& prefix_table,
                               double down_weight = 0.1) {
  VQAKIT_REQUIRE(!records.empty(), "build_report: no records");

  // per-record scores are collected first and summed in sorted order, so
  // the report is bit-identical under any permutation of the records
  std::map<std::string, std::vector<double>> buckets;
  std::vector<double> accs, w9s, w0s;
  const WupsOptions at09{0.9, down_weight};
  const WupsOptions at00{0.0, down_weight};

  for (const EvalRecord& r : records) {
    VQAKIT_REQUIRE(!r.ground_truths.empty(), "build_report: record with no ground truth");
    const double acc =
        r.ground_truths.size() >= 2
            ? vqa_consensus(r.prediction, r.ground_truths)
            : (normalize_answer(r.prediction) == normalize_answer(r.ground_truths[0]) ? 1.0 : 0.0);

    // similarity against the closest acceptable answer
    double w9 = 0.0, w0 = 0.0;
    for (const std::string& gt : r.ground_truths) {
      w9 = std::max(w9, detail::pair_wups(tax, r.prediction, gt, at09));
      w0 = std::max(w0, detail::pair_wups(tax, r.prediction, gt, at00));
    }

    accs.push_back(acc);
    w9s.push_back(w9);
    w0s.push_back(w0);
    buckets[question_type(r.question, prefix_table)].push_back(acc);
  }

  const auto sorted_sum = [](std::vector<double>& xs) {
    std::sort(xs.begin(), xs.end());
    double sum = 0.0;
    for (double x : xs) sum += x;
    return sum;
  };

  EvalReport rep;
  rep.total = records.size();
  const double n = static_cast<double>(records.size());
  rep.accuracy = 100.0 * sorted_sum(accs) / n;
  rep.wups_at_09 = 100.0 * sorted_sum(w9s) / n;
  rep.wups_at_00 = 100.0 * sorted_sum(w0s) / n;

  std::vector<std::string> row_order;
  for (const std::string& p : prefix_table)
    if (std::find(row_order.begin(), row_order.end(), p) == row_order.end()) row_order.push_back(p);
  if (std::find(row_order.begin(), row_order.end(), "others") == row_order.end())
    row_order.push_back("others");

  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-20s %7s %9s\n", "question type", "count", "acc(%)");
  out << line;
  out << std::string(38, '-') << '\n';
  for (const std::string& type : row_order) {
    std::vector<double> scores = buckets.count(type) ? buckets.at(type) : std::vector<double>{};
    const std::size_t count = scores.size();
    const double acc = count == 0 ? 0.0 : 100.0 * sorted_sum(scores) / static_cast<double>(count);
    rep.per_type.push_back({type, count, acc});
    std::snprintf(line, sizeof line, "%-20s %7zu %9.2f\n", type.c_str(), count, acc);
    out << line;
  }
  out << std::string(38, '-') << '\n';
  std::snprintf(line, sizeof line, "%-20s %7zu %9.2f\n", "overall", rep.total, rep.accuracy);
  out << line;
  std::snprintf(line, sizeof line, "WUPS@0.9 %9.2f\nWUPS@0.0 %9.2f\n", rep.wups_at_09,
                rep.wups_at_00);
  out << line;
  rep.table = out.str();
  return rep;
}

}  // namespace vqakit::evalkit
