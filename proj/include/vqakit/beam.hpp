#pragma once

// Width-W sequence decoding, shared by the captioner and the answering
// model. The search is exact: because every extension adds log p <= 0, a
// best-first frontier with the completed-set bound prunes admissibly, so
// the W results are the true top-W sequences under the model, identical to
// exhaustive enumeration. Scoring is the raw sum of per-step natural-log
// probabilities (no length normalization).
//
// A model plugs in through a Stepper with:
//   State initial() const;                      // state before the first token
//   std::vector<float> step_probs(const State&) // next-token distribution;
//                                               // masked tokens carry 0
//   State advance(const State&, int token) const;
//   int end_token() const;
//
// A sequence completes by emitting the end token (its probability factor is
// included, the token is not part of the surface form) or by reaching
// max_len tokens (cut off with no end factor).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include "vqakit/core.hpp"

namespace vqakit::decode {

struct BeamItem {
  std::vector<int> tokens;
  double log_prob = 0.0;
};

struct BeamResult {
  std::vector<BeamItem> items;  // descending log_prob, ties lexicographic
  bool width_clamped = false;   // W exceeded the live options at step 1
  bool truncated = false;       // expansion budget hit (pathological models)
};

namespace detail {

// Ordering used everywhere: higher score first, then lexicographically
// smaller token sequence first.
inline bool beam_before(const BeamItem& a, const BeamItem& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

}  // namespace detail

template <typename Stepper>
BeamResult beam_search(const Stepper& stepper, int beam_width, int max_len,
                       std::uint64_t expansion_budget = 200000) {
  VQAKIT_REQUIRE(beam_width >= 1, "beam_search: beam_width must be >= 1");
  VQAKIT_REQUIRE(max_len >= 1, "beam_search: max_len must be >= 1");

  using State = decltype(stepper.initial());
  struct Node {
    BeamItem item;
    State state;
  };
  struct NodeAfter {
    bool operator()(const Node& a, const Node& b) const {
      return detail::beam_before(b.item, a.item);  // priority_queue pops the "largest"
    }
  };

  BeamResult result;
  const int end = stepper.end_token();

  std::priority_queue<Node, std::vector<Node>, NodeAfter> open;
  open.push(Node{BeamItem{}, stepper.initial()});

  std::vector<BeamItem> completed;
  int width = beam_width;
  bool first_expansion = true;
  std::uint64_t expansions = 0;

  auto worst_kept = [&]() -> double {
    // score of the W-th best completed sequence so far
    return completed[static_cast<std::size_t>(width) - 1].log_prob;
  };

  while (!open.empty()) {
    if (static_cast<int>(completed.size()) >= width &&
        open.top().item.log_prob < worst_kept())
      break;
    if (expansions >= expansion_budget) {
      result.truncated = true;
      break;
    }
    ++expansions;

    Node node = open.top();
    open.pop();

    const std::vector<float> probs = stepper.step_probs(node.state);
    if (first_expansion) {
      int live = 0;
      for (float p : probs)
        if (p > 0.0f) ++live;
      if (width > live && live >= 1) {
        width = live;
        result.width_clamped = true;
      }
      first_expansion = false;
    }

    for (int tok = 0; tok < static_cast<int>(probs.size()); ++tok) {
      const float p = probs[static_cast<std::size_t>(tok)];
      if (p <= 0.0f) continue;
      const double score = node.item.log_prob + std::log(static_cast<double>(p));
      if (tok == end) {
        completed.push_back(BeamItem{node.item.tokens, score});
        std::sort(completed.begin(), completed.end(), detail::beam_before);
        if (static_cast<int>(completed.size()) > width) completed.resize(width);
        continue;
      }
      BeamItem ext{node.item.tokens, score};
      ext.tokens.push_back(tok);
      if (static_cast<int>(ext.tokens.size()) >= max_len) {
        completed.push_back(std::move(ext));
        std::sort(completed.begin(), completed.end(), detail::beam_before);
        if (static_cast<int>(completed.size()) > width) completed.resize(width);
        continue;
      }
      // bound check before paying for the state copy
      if (static_cast<int>(completed.size()) >= width && score < worst_kept()) continue;
      open.push(Node{std::move(ext), stepper.advance(node.state, tok)});
    }
  }

  std::sort(completed.begin(), completed.end(), detail::beam_before);
  if (static_cast<int>(completed.size()) > width) completed.resize(width);
  result.items = std::move(completed);
  return result;
}

// Plain argmax walk: emit the most probable token each step (lowest index on
// ties) until the end token or max_len. The greedy path is not in general
// the globally most probable sequence; beam_search(W=1) returns the latter.
// On confidently peaked models the two coincide. When `dists` is supplied it
// receives the full distribution inspected at each step, the final (END or
// cutoff) step included.
template <typename Stepper>
BeamItem greedy_decode(const Stepper& stepper, int max_len,
                       std::vector<std::vector<float>>* dists = nullptr) {
  VQAKIT_REQUIRE(max_len >= 1, "greedy_decode: max_len must be >= 1");
  auto state = stepper.initial();
  const int end = stepper.end_token();
  BeamItem out;
  for (int step = 0; step < max_len; ++step) {
    const std::vector<float> probs = stepper.step_probs(state);
    if (dists) dists->push_back(probs);
    int best = -1;
    float best_p = 0.0f;
    for (int tok = 0; tok < static_cast<int>(probs.size()); ++tok)
      if (probs[static_cast<std::size_t>(tok)] > best_p) {
        best_p = probs[static_cast<std::size_t>(tok)];
        best = tok;
      }
    VQAKIT_REQUIRE(best >= 0, "greedy_decode: all-zero distribution");
    out.log_prob += std::log(static_cast<double>(best_p));
    if (best == end) break;
    out.tokens.push_back(best);
    if (static_cast<int>(out.tokens.size()) >= max_len) break;
    state = stepper.advance(state, best);
  }
  return out;
}

}  // namespace vqakit::decode
