#pragma once

// Attribute-conditioned caption generation. The attribute vector enters the
// LSTM once, as a learned projection at step 0; afterwards the model runs
// as a plain word-level language model. Decoding uses the exact beam
// decoder; the five best captions are kept and the hidden state after each
// caption's last word (recomputed by teacher forcing, so it is independent
// of beam bookkeeping) is average-pooled into v_cap.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vqakit/beam.hpp"
#include "vqakit/core.hpp"
#include "vqakit/numkit.hpp"
#include "vqakit/tensor_io.hpp"
#include "vqakit/text.hpp"

namespace vqakit::captioner {

using numkit::LstmCellCache;
using numkit::LstmGrads;
using numkit::LstmParams;
using numkit::LstmState;
using numkit::Rng;
using numkit::Tensor;

// Word vocabulary with the three control tokens at fixed indices. Files
// store one token per line and must list the control tokens explicitly.
struct WordVocab {
  static constexpr const char* kStart = "<start>";
  static constexpr const char* kEnd = "<end>";
  static constexpr const char* kUnk = "<unk>";

  std::vector<std::string> tokens;
  std::map<std::string, int> index;

  int size() const { return static_cast<int>(tokens.size()); }
  int start_id() const { return index.at(kStart); }
  int end_id() const { return index.at(kEnd); }
  int unk_id() const { return index.at(kUnk); }

  int id_or_unk(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? unk_id() : it->second;
  }

  // fnv1a over tokens joined by newlines; stored in checkpoints so a model
  // is never silently applied with the wrong vocabulary.
  std::uint64_t hash() const {
    std::string joined;
    for (const std::string& t : tokens) {
      joined += t;
      joined += '\n';
    }
    return numkit::fnv1a64(joined);
  }

  static WordVocab from_tokens(std::vector<std::string> toks) {
    WordVocab v;
    v.tokens = std::move(toks);
    std::set<std::string> seen;
    for (int i = 0; i < v.size(); ++i) {
      VQAKIT_REQUIRE(!v.tokens[i].empty(), "WordVocab: empty token");
      VQAKIT_REQUIRE(seen.insert(v.tokens[i]).second,
                     "WordVocab: duplicate token '" + v.tokens[i] + "'");
      v.index[v.tokens[i]] = i;
    }
    VQAKIT_REQUIRE(v.index.count(kStart) && v.index.count(kEnd) && v.index.count(kUnk),
                   "WordVocab: control tokens <start>/<end>/<unk> are required");
    return v;
  }

  // Control tokens first, then corpus words ordered by first appearance.
  static WordVocab build(const std::vector<std::vector<std::string>>& sentences) {
    std::vector<std::string> toks{kStart, kEnd, kUnk};
    std::set<std::string> seen(toks.begin(), toks.end());
    for (const auto& s : sentences)
      for (const std::string& w : s)
        if (seen.insert(w).second) toks.push_back(w);
    return from_tokens(std::move(toks));
  }

  static WordVocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("WordVocab: cannot open " + path.string());
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) toks.push_back(line);
    }
    return from_tokens(std::move(toks));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("WordVocab: cannot write " + path.string());
    for (const std::string& t : tokens) out << t << '\n';
  }
};

using text::tokenize;

struct CaptionConfig {
  int hidden_dim = 512;
  int embed_dim = 256;
  int beam_width = 5;
  int max_len = 16;
  int epochs = 100;
  float lr = 0.01f;
  float momentum = 0.9f;
  float clip_norm = 5.0f;
  float init_scale = 0.08f;
  std::uint64_t seed = 1;
};

struct CaptionModel {
  WordVocab vocab;
  Tensor w_att, b_att;  // {E, c}, {E}: attribute vector -> step-0 input
  Tensor w_emb;         // {V, E}
  LstmParams lstm;      // input E, hidden H
  Tensor w_out, b_out;  // {V, H}, {V}

  int attr_dim() const { return w_att.cols(); }
  int embed_dim() const { return w_att.rows(); }
  int hidden_dim() const { return lstm.hidden_dim(); }

  static CaptionModel init(WordVocab vocab, int attr_dim, const CaptionConfig& cfg,
                           Rng& rng) {
    VQAKIT_REQUIRE(attr_dim > 0, "CaptionModel: attr_dim must be positive");
    CaptionModel m;
    m.vocab = std::move(vocab);
    const int v = m.vocab.size();
    m.w_att = Tensor({cfg.embed_dim, attr_dim});
    m.b_att = Tensor({cfg.embed_dim});
    m.w_emb = Tensor({v, cfg.embed_dim});
    m.w_out = Tensor({v, cfg.hidden_dim});
    m.b_out = Tensor({v});
    rng.fill_uniform(m.w_att, -cfg.init_scale, cfg.init_scale);
    rng.fill_uniform(m.w_emb, -cfg.init_scale, cfg.init_scale);
    rng.fill_uniform(m.w_out, -cfg.init_scale, cfg.init_scale);
    m.lstm = LstmParams::init(cfg.embed_dim, cfg.hidden_dim, rng, cfg.init_scale);
    return m;
  }

  void save(const std::filesystem::path& path) const {
    numkit::TensorFile tf;
    tf.meta["kind"] = "captioner";
    tf.meta["attr_dim"] = std::to_string(attr_dim());
    tf.meta["embed_dim"] = std::to_string(embed_dim());
    tf.meta["hidden_dim"] = std::to_string(hidden_dim());
    tf.meta["vocab_hash"] = std::to_string(vocab.hash());
    std::string joined;
    for (const std::string& t : vocab.tokens) {
      joined += t;
      joined += '\n';
    }
    tf.meta["vocab"] = joined;
    tf.tensors["w_att"] = w_att;
    tf.tensors["b_att"] = b_att;
    tf.tensors["w_emb"] = w_emb;
    tf.tensors["lstm/w_x"] = lstm.w_x;
    tf.tensors["lstm/w_h"] = lstm.w_h;
    tf.tensors["lstm/b"] = lstm.b;
    tf.tensors["w_out"] = w_out;
    tf.tensors["b_out"] = b_out;
    tf.save(path);
  }

  static CaptionModel load(const std::filesystem::path& path) {
    numkit::TensorFile tf = numkit::TensorFile::load(path);
    if (tf.meta["kind"] != "captioner")
      throw IoError("CaptionModel: not a caption model checkpoint: " + path.string());
    CaptionModel m;
    std::vector<std::string> toks;
    std::istringstream vs(tf.meta.at("vocab"));
    std::string line;
    while (std::getline(vs, line))
      if (!line.empty()) toks.push_back(line);
    m.vocab = WordVocab::from_tokens(std::move(toks));
    if (std::to_string(m.vocab.hash()) != tf.meta.at("vocab_hash"))
      throw IoError("CaptionModel: vocabulary hash mismatch in " + path.string());
    m.w_att = tf.get("w_att");
    m.b_att = tf.get("b_att");
    m.w_emb = tf.get("w_emb");
    m.lstm.w_x = tf.get("lstm/w_x");
    m.lstm.w_h = tf.get("lstm/w_h");
    m.lstm.b = tf.get("lstm/b");
    m.w_out = tf.get("w_out");
    m.b_out = tf.get("b_out");
    return m;
  }
};

struct Caption {
  std::vector<int> tokens;  // surface word ids, end token excluded
  double log_prob = 0.0;
  std::vector<float> final_hidden;

  std::string text(const WordVocab& vocab) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ' ';
      out += vocab.tokens[static_cast<std::size_t>(tokens[i])];
    }
    return out;
  }
};

struct CaptionSetEncoding {
  std::vector<Caption> captions;  // exactly 5
  std::vector<float> v_cap;       // mean of the 5 final_hidden vectors
  bool degenerate = false;        // fewer than 5 distinct completions padded
};

namespace detail {

inline std::vector<float> attr_input(const CaptionModel& m,
                                     std::span<const float> v_att) {
  VQAKIT_REQUIRE(static_cast<int>(v_att.size()) == m.attr_dim(),
                 "captioner: attribute vector length mismatch");
  std::vector<float> x(m.embed_dim());
  for (int i = 0; i < m.embed_dim(); ++i) x[i] = m.b_att[i];
  numkit::matvec(m.w_att, v_att, x, true);
  return x;
}

// Next-word distribution with the given token ids masked out (probability
// zero, rest renormalized by softmax over the surviving logits).
inline std::vector<float> masked_word_dist(const CaptionModel& m,
                                           const std::vector<float>& h,
                                           const std::vector<int>& masked) {
  std::vector<float> logits(m.vocab.size());
  for (int i = 0; i < m.vocab.size(); ++i) logits[i] = m.b_out[i];
  numkit::matvec(m.w_out, h, logits, true);

  std::vector<char> drop(logits.size(), 0);
  for (int id : masked) drop[static_cast<std::size_t>(id)] = 1;
  std::vector<float> kept;
  kept.reserve(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!drop[i]) kept.push_back(logits[i]);
  const std::vector<float> kp = numkit::softmax(kept);
  std::vector<float> probs(logits.size(), 0.0f);
  std::size_t j = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!drop[i]) probs[i] = kp[j++];
  return probs;
}

struct CaptionStepper {
  const CaptionModel* model;
  LstmState start_state;
  std::vector<int> masked;  // start + unk

  LstmState initial() const { return start_state; }

  std::vector<float> step_probs(const LstmState& s) const {
    return masked_word_dist(*model, s.h, masked);
  }

  LstmState advance(const LstmState& s, int token) const {
    return numkit::lstm_cell(model->lstm, model->w_emb.row(token), s);
  }

  int end_token() const { return model->vocab.end_id(); }
};

}  // namespace detail

// Ranked caption candidates for one attribute vector. The beam consumes the
// step-0 attribute input before the first word; <start> and <unk> are never
// emitted.
inline decode::BeamResult beam_search(const CaptionModel& m, std::span<const float> v_att,
                                      int beam_width, int max_len) {
  detail::CaptionStepper stepper;
  stepper.model = &m;
  const std::vector<float> x0 = detail::attr_input(m, v_att);
  stepper.start_state = numkit::lstm_cell(m.lstm, x0, LstmState(m.hidden_dim()));
  stepper.masked = {m.vocab.start_id(), m.vocab.unk_id()};
  return decode::beam_search(stepper, beam_width, max_len);
}

// Hidden state after teacher-forcing the step-0 attribute input and every
// surface word of the caption; for an empty caption this is the state after
// the attribute input alone.
inline std::vector<float> final_hidden(const CaptionModel& m, std::span<const float> v_att,
                                       const std::vector<int>& tokens) {
  LstmState s = numkit::lstm_cell(m.lstm, detail::attr_input(m, v_att),
                                  LstmState(m.hidden_dim()));
  for (int tok : tokens) {
    VQAKIT_REQUIRE(tok >= 0 && tok < m.vocab.size(), "final_hidden: token out of range");
    s = numkit::lstm_cell(m.lstm, m.w_emb.row(tok), s);
  }
  return s.h;
}

// Componentwise mean of the final_hidden vectors.
inline std::vector<float> pool_hidden(const std::vector<Caption>& captions) {
  VQAKIT_REQUIRE(!captions.empty(), "pool_hidden: no captions");
  const std::size_t d = captions.front().final_hidden.size();
  std::vector<double> acc(d, 0.0);
  for (const Caption& c : captions) {
    VQAKIT_REQUIRE(c.final_hidden.size() == d, "pool_hidden: hidden length mismatch");
    for (std::size_t i = 0; i < d; ++i) acc[i] += c.final_hidden[i];
  }
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i)
    out[i] = static_cast<float>(acc[i] / static_cast<double>(captions.size()));
  return out;
}

inline CaptionSetEncoding generate_caption_set(const CaptionModel& m,
                                               std::span<const float> v_att,
                                               const CaptionConfig& cfg = {}) {
  const int width = std::max(cfg.beam_width, 5);
  decode::BeamResult beams = beam_search(m, v_att, width, cfg.max_len);
  VQAKIT_REQUIRE(!beams.items.empty(), "generate_caption_set: no completed sequences");

  CaptionSetEncoding enc;
  for (const decode::BeamItem& it : beams.items) {
    if (static_cast<int>(enc.captions.size()) == 5) break;
    Caption c;
    c.tokens = it.tokens;
    c.log_prob = it.log_prob;
    c.final_hidden = final_hidden(m, v_att, c.tokens);
    enc.captions.push_back(std::move(c));
  }
  if (enc.captions.size() < 5) {
    enc.degenerate = true;
    while (enc.captions.size() < 5) enc.captions.push_back(enc.captions.front());
  }
  enc.v_cap = pool_hidden(enc.captions);
  return enc;
}

struct CaptionPair {
  std::vector<float> v_att;
  std::vector<int> reference;  // surface word ids, no end token
};

struct CaptionTrainResult {
  std::vector<float> epoch_losses;  // mean per-token cross-entropy
  int skipped_empty = 0;
};

namespace detail {

struct CaptionGrads {
  Tensor w_att, b_att, w_emb, w_out, b_out;
  LstmGrads lstm;

  explicit CaptionGrads(const CaptionModel& m)
      : w_att(m.w_att.shape()),
        b_att(m.b_att.shape()),
        w_emb(m.w_emb.shape()),
        w_out(m.w_out.shape()),
        b_out(m.b_out.shape()),
        lstm(m.lstm) {}
};

// Teacher-forced pass over one pair: inputs [proj(v_att), emb(w_1..w_L)],
// targets [w_1..w_L, end]. Returns total cross-entropy over the L+1 steps
// and accumulates gradients when asked.
inline double caption_pair_pass(const CaptionModel& m, const CaptionPair& pair,
                                CaptionGrads* grads, int* correct = nullptr,
                                int* total = nullptr) {
  const int steps = static_cast<int>(pair.reference.size()) + 1;
  const int d_h = m.hidden_dim();

  std::vector<std::vector<float>> inputs;
  inputs.reserve(steps);
  inputs.push_back(attr_input(m, pair.v_att));
  for (int t = 0; t + 1 < steps; ++t) {
    const int tok = pair.reference[static_cast<std::size_t>(t)];
    VQAKIT_REQUIRE(tok >= 0 && tok < m.vocab.size(), "train_captioner: token out of range");
    std::span<const float> row = m.w_emb.row(tok);
    inputs.emplace_back(row.begin(), row.end());
  }

  std::vector<LstmCellCache> caches(steps);
  std::vector<LstmState> states(steps);
  LstmState s(d_h);
  for (int t = 0; t < steps; ++t) {
    s = numkit::lstm_cell(m.lstm, inputs[static_cast<std::size_t>(t)], s,
                          grads ? &caches[static_cast<std::size_t>(t)] : nullptr);
    states[static_cast<std::size_t>(t)] = s;
  }

  double loss = 0.0;
  std::vector<std::vector<float>> dlogits(grads ? steps : 0);
  for (int t = 0; t < steps; ++t) {
    const int target = t + 1 < steps ? pair.reference[static_cast<std::size_t>(t)]
                                     : m.vocab.end_id();
    std::vector<float> logits(m.vocab.size());
    for (int i = 0; i < m.vocab.size(); ++i) logits[i] = m.b_out[i];
    numkit::matvec(m.w_out, states[static_cast<std::size_t>(t)].h, logits, true);
    const std::vector<float> p = numkit::softmax(logits);
    // accumulated in double so summed losses keep finite-difference resolution
    loss += -std::log(std::max(static_cast<double>(p[static_cast<std::size_t>(target)]), 1e-12));
    if (correct) {
      int argmax = 0;
      for (int i = 1; i < m.vocab.size(); ++i)
        if (p[static_cast<std::size_t>(i)] > p[static_cast<std::size_t>(argmax)]) argmax = i;
      if (argmax == target) ++*correct;
      ++*total;
    }
    if (grads) {
      dlogits[static_cast<std::size_t>(t)] = p;
      dlogits[static_cast<std::size_t>(t)][static_cast<std::size_t>(target)] -= 1.0f;
    }
  }
  if (!grads) return loss;

  std::vector<float> dh(d_h, 0.0f);
  std::vector<float> dc(d_h, 0.0f);
  for (int t = steps - 1; t >= 0; --t) {
    const std::vector<float>& dl = dlogits[static_cast<std::size_t>(t)];
    numkit::outer_acc(grads->w_out, dl, states[static_cast<std::size_t>(t)].h);
    for (int i = 0; i < m.vocab.size(); ++i) grads->b_out[i] += dl[i];
    numkit::matvec_t(m.w_out, dl, dh, true);

    std::vector<float> dx(inputs[static_cast<std::size_t>(t)].size(), 0.0f);
    std::vector<float> dh_prev;
    numkit::lstm_cell_backward(m.lstm, caches[static_cast<std::size_t>(t)], dh, dc,
                               grads->lstm, dx, dh_prev);
    dh = std::move(dh_prev);

    if (t == 0) {
      numkit::outer_acc(grads->w_att, dx, pair.v_att);
      for (int i = 0; i < m.embed_dim(); ++i) grads->b_att[i] += dx[i];
    } else {
      const int tok = pair.reference[static_cast<std::size_t>(t) - 1];
      std::span<float> row = grads->w_emb.row(tok);
      for (int i = 0; i < m.embed_dim(); ++i) row[i] += dx[i];
    }
  }
  return loss;
}

}  // namespace detail

// Total teacher-forced cross-entropy for one pair (sum over the L+1 steps).
// Exposed for gradient checking.
inline double caption_loss(const CaptionModel& m, const CaptionPair& pair,
                           detail::CaptionGrads* grads = nullptr) {
  return detail::caption_pair_pass(m, pair, grads);
}

// Teacher-forced next-token accuracy over a set of pairs.
inline double caption_accuracy(const CaptionModel& m, const std::vector<CaptionPair>& pairs) {
  int correct = 0, total = 0;
  for (const CaptionPair& p : pairs)
    detail::caption_pair_pass(m, p, nullptr, &correct, &total);
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

inline CaptionTrainResult train_captioner(CaptionModel& m,
                                          const std::vector<CaptionPair>& pairs,
                                          const CaptionConfig& cfg) {
  VQAKIT_REQUIRE(!pairs.empty(), "train_captioner: empty dataset");
  Rng rng(numkit::derive_seed(cfg.seed, "train_captioner"));

  detail::CaptionGrads vel(m);
  CaptionTrainResult result;

  std::vector<int> usable;
  for (int i = 0; i < static_cast<int>(pairs.size()); ++i) {
    if (pairs[static_cast<std::size_t>(i)].reference.empty()) {
      ++result.skipped_empty;
    } else {
      usable.push_back(i);
    }
  }
  VQAKIT_REQUIRE(!usable.empty(), "train_captioner: every reference is empty");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(usable);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (int pi : usable) {
      const CaptionPair& pair = pairs[static_cast<std::size_t>(pi)];
      detail::CaptionGrads g(m);
      epoch_loss += detail::caption_pair_pass(m, pair, &g);
      epoch_tokens += pair.reference.size() + 1;

      numkit::clip_gradients({&g.w_att, &g.b_att, &g.w_emb, &g.lstm.w_x, &g.lstm.w_h,
                              &g.lstm.b, &g.w_out, &g.b_out},
                             cfg.clip_norm);
      numkit::sgd_step(m.w_att, g.w_att, cfg.lr, cfg.momentum, vel.w_att);
      numkit::sgd_step(m.b_att, g.b_att, cfg.lr, cfg.momentum, vel.b_att);
      numkit::sgd_step(m.w_emb, g.w_emb, cfg.lr, cfg.momentum, vel.w_emb);
      numkit::sgd_step(m.lstm.w_x, g.lstm.w_x, cfg.lr, cfg.momentum, vel.lstm.w_x);
      numkit::sgd_step(m.lstm.w_h, g.lstm.w_h, cfg.lr, cfg.momentum, vel.lstm.w_h);
      numkit::sgd_step(m.lstm.b, g.lstm.b, cfg.lr, cfg.momentum, vel.lstm.b);
      numkit::sgd_step(m.w_out, g.w_out, cfg.lr, cfg.momentum, vel.w_out);
      numkit::sgd_step(m.b_out, g.b_out, cfg.lr, cfg.momentum, vel.b_out);
    }
    result.epoch_losses.push_back(
        static_cast<float>(epoch_loss / static_cast<double>(epoch_tokens)));
  }
  return result;
}

}  // namespace vqakit::captioner
