#pragma once

// The answering model: one shared-weight LSTM first encodes three modality
// embeddings (attributes, captions, knowledge) and the question words, then
// keeps running as a decoder over the answer words. The hidden state after
// the last question word predicts the first answer word; after feeding
// answer word t it predicts word t+1; the final target is END, giving
// exactly l+1 prediction terms for an l-word answer.

#include <algorithm>
#include <cmath>
#include <filesystem>
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

namespace vqakit::vqalstm {

using numkit::derive_seed;
using numkit::fnv1a64;
using numkit::LstmCellCache;
using numkit::LstmGrads;
using numkit::LstmParams;
using numkit::LstmState;
using numkit::Rng;
using numkit::Tensor;
using numkit::TensorFile;

using text::tokenize;

// Joint question/answer vocabulary. END terminates decoding; UNK absorbs
// everything unseen. No start token: decoding is primed by the encoder.
struct VqaVocab {
  static constexpr const char* kEnd = "<end>";
  static constexpr const char* kUnk = "<unk>";

  std::vector<std::string> tokens;
  std::map<std::string, int> index;

  int size() const { return static_cast<int>(tokens.size()); }
  int end_id() const { return index.at(kEnd); }
  int unk_id() const { return index.at(kUnk); }

  int id_or_unk(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? unk_id() : it->second;
  }

  std::uint64_t hash() const {
    std::string joined;
    for (const std::string& t : tokens) {
      joined += t;
      joined += '\n';
    }
    return fnv1a64(joined);
  }

  static VqaVocab from_tokens(std::vector<std::string> toks) {
    VqaVocab v;
    v.tokens = std::move(toks);
    for (std::size_t i = 0; i < v.tokens.size(); ++i) {
      auto [it, fresh] = v.index.emplace(v.tokens[i], static_cast<int>(i));
      VQAKIT_REQUIRE(fresh, "VqaVocab: duplicate token '" + v.tokens[i] + "'");
    }
    VQAKIT_REQUIRE(v.index.count(kEnd) == 1, "VqaVocab: END token missing");
    VQAKIT_REQUIRE(v.index.count(kUnk) == 1, "VqaVocab: UNK token missing");
    return v;
  }

  // END and UNK first, then every distinct word in first-appearance order.
  static VqaVocab build(const std::vector<std::vector<std::string>>& texts) {
    std::vector<std::string> toks{kEnd, kUnk};
    std::set<std::string> seen{kEnd, kUnk};
    for (const std::vector<std::string>& words : texts)
      for (const std::string& w : words)
        if (seen.insert(w).second) toks.push_back(w);
    return from_tokens(std::move(toks));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("VqaVocab: cannot write " + path.string());
    for (const std::string& t : tokens) out << t << '\n';
  }

  static VqaVocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("VqaVocab: cannot read " + path.string());
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) toks.push_back(line);
    return from_tokens(std::move(toks));
  }
};

struct Modalities {
  bool att = true;
  bool cap = true;
  bool know = true;

  int count() const { return (att ? 1 : 0) + (cap ? 1 : 0) + (know ? 1 : 0); }

  std::string to_string() const {
    std::string s;
    for (const char* name : {att ? "att" : nullptr, cap ? "cap" : nullptr, know ? "know" : nullptr})
      if (name) {
        if (!s.empty()) s += ',';
        s += name;
      }
    return s;
  }

  static Modalities parse(const std::string& s) {
    Modalities m{false, false, false};
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (part == "att") m.att = true;
      else if (part == "cap") m.cap = true;
      else if (part == "know") m.know = true;
      else if (!part.empty())
        throw ContractViolation("Modalities: unknown modality '" + part + "'");
    }
    return m;
  }
};

struct VqaConfig {
  int embed_dim = 256;  // d_e == d_h: one LSTM handles modality and word steps
  int epochs = 100;
  int batch_size = 100;
  float lr = 0.001f;
  float momentum = 0.9f;
  float clip_norm = 5.0f;
  float dropout = 0.5f;
  float lambda = 1e-5f;  // weight-matrix L2; biases exempt
  float init_scale = 0.08f;
  std::uint64_t seed = 1;
  Modalities modalities;
  std::filesystem::path checkpoint_dir;  // per-epoch checkpoints when set
};

struct Episode {
  std::vector<float> v_att, v_cap, v_know;
  std::vector<int> question;  // token ids, n >= 1
  std::vector<int> answer;    // token ids; may be empty (END is still a target)
};

struct VqaModel {
  VqaVocab vocab;
  Modalities modalities;
  Tensor w_att;   // {d_e, c}   attribute vector -> encoder step 0
  Tensor w_cap;   // {d_e, 512} caption vector   -> encoder step 1
  Tensor w_know;  // {d_e, 500} knowledge vector -> encoder step 2
  Tensor w_emb;   // {V, d_e}   word embeddings, shared by question and answer
  LstmParams lstm;
  Tensor w_out;   // {V, d_h}
  Tensor b_out;   // {V}

  int attr_dim() const { return static_cast<int>(w_att.cols()); }
  int cap_dim() const { return static_cast<int>(w_cap.cols()); }
  int know_dim() const { return static_cast<int>(w_know.cols()); }
  int embed_dim() const { return static_cast<int>(w_emb.cols()); }
  int hidden_dim() const { return static_cast<int>(lstm.hidden_dim()); }
  int vocab_size() const { return vocab.size(); }

  static VqaModel init(VqaVocab vocab, int attr_dim, int cap_dim, int know_dim, int embed_dim,
                       Modalities modalities, Rng& rng, float scale = 0.08f) {
    VQAKIT_REQUIRE(attr_dim > 0 && cap_dim > 0 && know_dim > 0 && embed_dim > 0,
                   "VqaModel: dimensions must be positive");
    VqaModel m;
    m.vocab = std::move(vocab);
    m.modalities = modalities;
    const int v = m.vocab.size();
    m.w_att = Tensor::zeros({embed_dim, attr_dim});
    m.w_cap = Tensor::zeros({embed_dim, cap_dim});
    m.w_know = Tensor::zeros({embed_dim, know_dim});
    m.w_emb = Tensor::zeros({v, embed_dim});
    rng.fill_uniform(m.w_att, -scale, scale);
    rng.fill_uniform(m.w_cap, -scale, scale);
    rng.fill_uniform(m.w_know, -scale, scale);
    rng.fill_uniform(m.w_emb, -scale, scale);
    m.lstm = LstmParams::init(embed_dim, embed_dim, rng, scale);
    m.w_out = Tensor::zeros({v, embed_dim});
    rng.fill_uniform(m.w_out, -scale, scale);
    m.b_out = Tensor::zeros({v});
    return m;
  }

  void save(const std::filesystem::path& path) const {
    TensorFile f;
    f.meta["kind"] = "vqalstm";
    f.meta["embed_dim"] = std::to_string(embed_dim());
    f.meta["hidden_dim"] = std::to_string(hidden_dim());
    f.meta["modalities"] = modalities.to_string();
    f.meta["vocab_hash"] = std::to_string(vocab.hash());
    std::string joined;
    for (const std::string& t : vocab.tokens) {
      joined += t;
      joined += '\n';
    }
    f.meta["vocab"] = joined;
    f.tensors.emplace("w_att", w_att);
    f.tensors.emplace("w_cap", w_cap);
    f.tensors.emplace("w_know", w_know);
    f.tensors.emplace("w_emb", w_emb);
    f.tensors.emplace("lstm_w_x", lstm.w_x);
    f.tensors.emplace("lstm_w_h", lstm.w_h);
    f.tensors.emplace("lstm_b", lstm.b);
    f.tensors.emplace("w_out", w_out);
    f.tensors.emplace("b_out", b_out);
    f.save(path);
  }

  static VqaModel load(const std::filesystem::path& path) {
    TensorFile f = TensorFile::load(path);
    if (f.meta.count("kind") == 0 || f.meta.at("kind") != "vqalstm")
      throw IoError("VqaModel: " + path.string() + " is not an answering-model checkpoint");

    VqaModel m;
    std::vector<std::string> toks;
    std::stringstream ss(f.meta.at("vocab"));
    std::string line;
    while (std::getline(ss, line)) toks.push_back(line);
    m.vocab = VqaVocab::from_tokens(std::move(toks));
    if (std::to_string(m.vocab.hash()) != f.meta.at("vocab_hash"))
      throw IoError("VqaModel: vocabulary hash mismatch in " + path.string());

    m.modalities = Modalities::parse(f.meta.at("modalities"));
    m.w_att = f.get("w_att");
    m.w_cap = f.get("w_cap");
    m.w_know = f.get("w_know");
    m.w_emb = f.get("w_emb");
    m.lstm.w_x = f.get("lstm_w_x");
    m.lstm.w_h = f.get("lstm_w_h");
    m.lstm.b = f.get("lstm_b");
    m.w_out = f.get("w_out");
    m.b_out = f.get("b_out");
    VQAKIT_REQUIRE(m.embed_dim() == std::stoi(f.meta.at("embed_dim")),
                   "VqaModel: embed_dim mismatch");
    VQAKIT_REQUIRE(m.hidden_dim() == std::stoi(f.meta.at("hidden_dim")),
                   "VqaModel: hidden_dim mismatch");
    return m;
  }
};

struct EmbeddedInputs {
  std::vector<float> x_att, x_cap, x_know;
};

// Pure linear maps, no biases. Disabled modalities are handled at sequence
// assembly, not here.
inline EmbeddedInputs embed_inputs(const VqaModel& m, std::span<const float> v_att,
                                   std::span<const float> v_cap, std::span<const float> v_know) {
  VQAKIT_REQUIRE(v_att.size() == static_cast<std::size_t>(m.attr_dim()),
                 "embed_inputs: attribute vector length mismatch");
  VQAKIT_REQUIRE(v_cap.size() == static_cast<std::size_t>(m.cap_dim()),
                 "embed_inputs: caption vector length mismatch");
  VQAKIT_REQUIRE(v_know.size() == static_cast<std::size_t>(m.know_dim()),
                 "embed_inputs: knowledge vector length mismatch");
  EmbeddedInputs e;
  e.x_att.resize(m.embed_dim());
  e.x_cap.resize(m.embed_dim());
  e.x_know.resize(m.embed_dim());
  numkit::matvec(m.w_att, v_att, e.x_att);
  numkit::matvec(m.w_cap, v_cap, e.x_cap);
  numkit::matvec(m.w_know, v_know, e.x_know);
  return e;
}

namespace detail {

enum class StepKind { att, cap, know, word };

struct SeqStep {
  StepKind kind;
  int token = -1;  // word steps only
};

// The full input schedule for one episode: three modality slots (zeroed
// when disabled), the question, then the answer words that are fed back.
inline std::vector<SeqStep> episode_schedule(const Episode& ep) {
  VQAKIT_REQUIRE(!ep.question.empty(), "episode: question must have at least one token");
  std::vector<SeqStep> steps;
  steps.push_back({StepKind::att, -1});
  steps.push_back({StepKind::cap, -1});
  steps.push_back({StepKind::know, -1});
  for (int q : ep.question) steps.push_back({StepKind::word, q});
  for (int a : ep.answer) steps.push_back({StepKind::word, a});
  return steps;
}

inline std::vector<float> step_input(const VqaModel& m, const Episode& ep, const SeqStep& step) {
  std::vector<float> x(m.embed_dim(), 0.0f);
  switch (step.kind) {
    case StepKind::att:
      if (m.modalities.att) {
        VQAKIT_REQUIRE(ep.v_att.size() == static_cast<std::size_t>(m.attr_dim()),
                       "episode: attribute vector length mismatch");
        numkit::matvec(m.w_att, ep.v_att, x);
      }
      break;
    case StepKind::cap:
      if (m.modalities.cap) {
        VQAKIT_REQUIRE(ep.v_cap.size() == static_cast<std::size_t>(m.cap_dim()),
                       "episode: caption vector length mismatch");
        numkit::matvec(m.w_cap, ep.v_cap, x);
      }
      break;
    case StepKind::know:
      if (m.modalities.know) {
        VQAKIT_REQUIRE(ep.v_know.size() == static_cast<std::size_t>(m.know_dim()),
                       "episode: knowledge vector length mismatch");
        numkit::matvec(m.w_know, ep.v_know, x);
      }
      break;
    case StepKind::word: {
      VQAKIT_REQUIRE(step.token >= 0 && step.token < m.vocab_size(),
                     "episode: token id out of vocabulary range");
      std::span<const float> row = m.w_emb.row(step.token);
      std::copy(row.begin(), row.end(), x.begin());
      break;
    }
  }
  return x;
}

}  // namespace detail

struct VqaGrads {
  Tensor w_att, w_cap, w_know, w_emb;
  LstmGrads lstm;
  Tensor w_out, b_out;

  explicit VqaGrads(const VqaModel& m)
      : w_att(Tensor::zeros({m.w_att.rows(), m.w_att.cols()})),
        w_cap(Tensor::zeros({m.w_cap.rows(), m.w_cap.cols()})),
        w_know(Tensor::zeros({m.w_know.rows(), m.w_know.cols()})),
        w_emb(Tensor::zeros({m.w_emb.rows(), m.w_emb.cols()})),
        lstm(m.lstm),
        w_out(Tensor::zeros({m.w_out.rows(), m.w_out.cols()})),
        b_out(Tensor::zeros({m.b_out.rows()})) {}

  std::vector<Tensor*> all() {
    return {&w_att, &w_cap, &w_know, &w_emb, &lstm.w_x, &lstm.w_h, &lstm.b, &w_out, &b_out};
  }
};

struct EpisodeForward {
  std::vector<std::vector<float>> step_probs;  // one distribution per target
  std::vector<int> targets;                    // answer words then END
  double log_likelihood = 0.0;
};

namespace detail {

struct DropoutPlan {
  // One input mask per sequence step and one hidden mask per prediction
  // step; empty plan means dropout off.
  std::vector<std::vector<float>> input_masks;
  std::vector<std::vector<float>> hidden_masks;
  bool active() const { return !input_masks.empty(); }
};

inline DropoutPlan make_dropout_plan(Rng& rng, float p_drop, std::size_t steps,
                                     std::size_t predictions, int dim) {
  DropoutPlan plan;
  if (p_drop <= 0.0f) return plan;
  plan.input_masks.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i)
    plan.input_masks.push_back(numkit::dropout_mask(rng, p_drop, dim));
  plan.hidden_masks.reserve(predictions);
  for (std::size_t i = 0; i < predictions; ++i)
    plan.hidden_masks.push_back(numkit::dropout_mask(rng, p_drop, dim));
  return plan;
}

// Forward + optional backward for one episode. Returns the per-episode
// negative log-likelihood (double accumulation); gradients are ADDED into
// `grads` when given. `forward` optionally captures the per-target
// distributions for inspection.
inline double episode_pass(const VqaModel& m, const Episode& ep, const DropoutPlan& dropout,
                           VqaGrads* grads, EpisodeForward* forward = nullptr,
                           std::size_t* correct = nullptr, std::size_t* total = nullptr) {
  const std::vector<SeqStep> steps = episode_schedule(ep);
  const int d = m.embed_dim();
  const int v = m.vocab_size();
  const std::size_t n_steps = steps.size();
  const std::size_t n_question = ep.question.size();
  const std::size_t n_predictions = ep.answer.size() + 1;
  const std::size_t first_pred_step = 3 + n_question - 1;  // h here predicts a_1

  std::vector<int> targets(ep.answer);
  targets.push_back(m.vocab.end_id());

  std::vector<std::vector<float>> inputs(n_steps);
  std::vector<LstmCellCache> caches(n_steps);
  std::vector<LstmState> states;
  states.reserve(n_steps + 1);
  states.emplace_back(m.hidden_dim());  // zero initial state

  std::vector<std::vector<float>> dropped_hidden(n_predictions);
  std::vector<std::vector<float>> probs(n_predictions);
  double nll = 0.0;

  for (std::size_t t = 0; t < n_steps; ++t) {
    inputs[t] = step_input(m, ep, steps[t]);
    if (dropout.active())
      for (int k = 0; k < d; ++k) inputs[t][k] *= dropout.input_masks[t][k];
    states.push_back(numkit::lstm_cell(m.lstm, inputs[t], states.back(),
                                       grads ? &caches[t] : nullptr));

    if (t < first_pred_step) continue;
    const std::size_t pi = t - first_pred_step;
    if (pi >= n_predictions) continue;

    std::vector<float>& h = dropped_hidden[pi];
    h.assign(states.back().h.begin(), states.back().h.end());
    if (dropout.active())
      for (int k = 0; k < d; ++k) h[k] *= dropout.hidden_masks[pi][k];

    std::vector<float> logits(v);
    numkit::matvec(m.w_out, h, logits);
    for (int r = 0; r < v; ++r) logits[r] += m.b_out[r];
    probs[pi] = numkit::softmax(logits);
    nll += -std::log(std::max(static_cast<double>(probs[pi][targets[pi]]), 1e-12));
    if (correct && total) {
      const int argmax = static_cast<int>(std::max_element(probs[pi].begin(), probs[pi].end()) -
                                          probs[pi].begin());
      if (argmax == targets[pi]) ++(*correct);
      ++(*total);
    }
  }

  if (forward) {
    forward->step_probs = probs;
    forward->targets = targets;
    forward->log_likelihood = -nll;
  }
  if (!grads) return nll;

  // Backward: walk the sequence in reverse, merging the prediction-head
  // gradient into the recurrent one at each prediction step.
  std::vector<float> dh(d, 0.0f), dc(d, 0.0f), dx(d), dh_prev(d);
  for (std::size_t t = n_steps; t-- > 0;) {
    if (t >= first_pred_step && t - first_pred_step < n_predictions) {
      const std::size_t pi = t - first_pred_step;
      std::vector<float> dlogits(v);
      for (int r = 0; r < v; ++r)
        dlogits[r] = probs[pi][r] - (r == targets[pi] ? 1.0f : 0.0f);

      numkit::outer_acc(grads->w_out, dlogits, dropped_hidden[pi]);
      for (int r = 0; r < v; ++r) grads->b_out[r] += dlogits[r];

      std::vector<float> dhid(d, 0.0f);
      numkit::matvec_t(m.w_out, dlogits, dhid);
      if (dropout.active())
        for (int k = 0; k < d; ++k) dhid[k] *= dropout.hidden_masks[pi][k];
      for (int k = 0; k < d; ++k) dh[k] += dhid[k];
    }

    std::fill(dx.begin(), dx.end(), 0.0f);
    numkit::lstm_cell_backward(m.lstm, caches[t], dh, dc, grads->lstm, dx, dh_prev);
    dh = dh_prev;
    if (dropout.active())
      for (int k = 0; k < d; ++k) dx[k] *= dropout.input_masks[t][k];

    switch (steps[t].kind) {
      case StepKind::att:
        if (m.modalities.att) numkit::outer_acc(grads->w_att, dx, ep.v_att);
        break;
      case StepKind::cap:
        if (m.modalities.cap) numkit::outer_acc(grads->w_cap, dx, ep.v_cap);
        break;
      case StepKind::know:
        if (m.modalities.know) numkit::outer_acc(grads->w_know, dx, ep.v_know);
        break;
      case StepKind::word: {
        std::span<float> row = grads->w_emb.row(steps[t].token);
        for (int k = 0; k < d; ++k) row[k] += dx[k];
        break;
      }
    }
  }
  return nll;
}

}  // namespace detail

// Teacher-forced forward pass; dropout off. Returns one distribution per
// prediction term (answer words, then END) and the sequence log-likelihood.
inline EpisodeForward forward_episode(const VqaModel& m, const Episode& ep) {
  EpisodeForward out;
  detail::episode_pass(m, ep, {}, nullptr, &out);
  return out;
}

// Mean negative log-likelihood over the batch plus lambda * sum of squared
// weight-matrix entries (biases exempt). Fills gradients when asked;
// dropout stays off unless a plan source is supplied via `dropout_rng`.
inline double training_cost(const VqaModel& m, const std::vector<Episode>& batch, float lambda,
                            VqaGrads* grads = nullptr, Rng* dropout_rng = nullptr,
                            float dropout = 0.0f) {
  VQAKIT_REQUIRE(!batch.empty(), "training_cost: batch must be nonempty");
  VQAKIT_REQUIRE(lambda >= 0.0f, "training_cost: lambda must be nonnegative");

  double nll_sum = 0.0;
  for (const Episode& ep : batch) {
    detail::DropoutPlan plan;
    if (dropout_rng && dropout > 0.0f)
      plan = detail::make_dropout_plan(*dropout_rng, dropout,
                                       3 + ep.question.size() + ep.answer.size(),
                                       ep.answer.size() + 1, m.embed_dim());
    nll_sum += detail::episode_pass(m, ep, plan, grads);
  }

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  if (grads)
    for (Tensor* g : grads->all())
      for (float& x : g->span()) x *= static_cast<float>(inv_n);

  double reg = 0.0;
  const std::vector<const Tensor*> weights{&m.w_att, &m.w_cap, &m.w_know, &m.w_emb,
                                           &m.lstm.w_x, &m.lstm.w_h, &m.w_out};
  if (lambda > 0.0f) {
    for (const Tensor* w : weights)
      for (float x : w->span()) reg += static_cast<double>(x) * x;
    if (grads) {
      const std::vector<Tensor*> weight_grads{&grads->w_att, &grads->w_cap, &grads->w_know,
                                              &grads->w_emb, &grads->lstm.w_x, &grads->lstm.w_h,
                                              &grads->w_out};
      for (std::size_t i = 0; i < weights.size(); ++i) {
        const std::span<const float> w = weights[i]->span();
        std::span<float> g = weight_grads[i]->span();
        for (std::size_t k = 0; k < w.size(); ++k) g[k] += 2.0f * lambda * w[k];
      }
    }
  }
  return nll_sum * inv_n + static_cast<double>(lambda) * reg;
}

// Fraction of prediction terms whose argmax matches the target, over the
// whole dataset (teacher forcing, dropout off).
inline double teacher_accuracy(const VqaModel& m, const std::vector<Episode>& episodes) {
  VQAKIT_REQUIRE(!episodes.empty(), "teacher_accuracy: need at least one episode");
  std::size_t correct = 0, total = 0;
  for (const Episode& ep : episodes)
    detail::episode_pass(m, ep, {}, nullptr, nullptr, &correct, &total);
  return static_cast<double>(correct) / static_cast<double>(total);
}

struct VqaTrainResult {
  std::vector<double> epoch_losses;  // mean training_cost over the epoch's batches
};

inline VqaTrainResult train_vqa(VqaModel& m, const std::vector<Episode>& dataset,
                                const VqaConfig& cfg) {
  VQAKIT_REQUIRE(!dataset.empty(), "train_vqa: dataset must be nonempty");
  VQAKIT_REQUIRE(cfg.batch_size > 0 && cfg.epochs > 0, "train_vqa: config values must be positive");
  for (const Episode& ep : dataset)
    VQAKIT_REQUIRE(!ep.answer.empty(), "train_vqa: training answers must be nonempty");

  Rng order_rng(derive_seed(cfg.seed, "train_vqa_order"));
  Rng dropout_rng(derive_seed(cfg.seed, "train_vqa_dropout"));

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  VqaGrads velocity(m);
  VqaTrainResult result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_cost = 0.0;
    std::size_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Episode> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(dataset[order[i]]);

      VqaGrads grads(m);
      epoch_cost += training_cost(m, batch, cfg.lambda, &grads, &dropout_rng, cfg.dropout);
      ++batches;

      numkit::clip_gradients(grads.all(), cfg.clip_norm);
      std::vector<Tensor*> params{&m.w_att, &m.w_cap, &m.w_know, &m.w_emb,
                                  &m.lstm.w_x, &m.lstm.w_h, &m.lstm.b, &m.w_out, &m.b_out};
      std::vector<Tensor*> gs = grads.all();
      std::vector<Tensor*> vs = velocity.all();
      for (std::size_t i = 0; i < params.size(); ++i)
        numkit::sgd_step(*params[i], *gs[i], cfg.lr, cfg.momentum, *vs[i]);
    }

    result.epoch_losses.push_back(epoch_cost / static_cast<double>(batches));
    if (!cfg.checkpoint_dir.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      m.save(cfg.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".bin"));
    }
  }
  return result;
}

struct AnswerConfig {
  int max_len = 8;
  int beam_width = 1;  // 1 decodes greedily, by definition
};

struct DecodeResult {
  std::vector<int> tokens;  // END excluded
  double log_prob = 0.0;
  std::vector<std::vector<float>> step_probs;  // greedy path only
};

namespace detail {

// Probability source for answer decoding: encoder state is the LSTM after
// the three modality steps and the question; UNK is masked out.
struct AnswerStepper {
  const VqaModel* model;
  LstmState start_state;

  using State = LstmState;

  State initial() const { return start_state; }

  std::vector<float> step_probs(const State& s) const {
    const int v = model->vocab_size();
    std::vector<float> logits(v);
    numkit::matvec(model->w_out, s.h, logits);
    for (int r = 0; r < v; ++r) logits[r] += model->b_out[r];

    const int unk = model->vocab.unk_id();
    std::vector<float> kept;
    kept.reserve(v - 1);
    for (int r = 0; r < v; ++r)
      if (r != unk) kept.push_back(logits[r]);
    const std::vector<float> p = numkit::softmax(kept);

    std::vector<float> out(v, 0.0f);
    std::size_t j = 0;
    for (int r = 0; r < v; ++r)
      if (r != unk) out[r] = p[j++];
    return out;
  }

  State advance(const State& s, int token) const {
    std::span<const float> row = model->w_emb.row(token);
    return numkit::lstm_cell(model->lstm, row, s);
  }

  int end_token() const { return model->vocab.end_id(); }
};

inline AnswerStepper make_stepper(const VqaModel& m, const Episode& ep) {
  const std::vector<SeqStep> steps = episode_schedule(ep);
  LstmState state(m.hidden_dim());
  for (const SeqStep& step : steps) state = numkit::lstm_cell(m.lstm, step_input(m, ep, step), state);
  return AnswerStepper{&m, state};
}

}  // namespace detail

inline DecodeResult answer(const VqaModel& m, const std::vector<float>& v_att,
                           const std::vector<float>& v_cap, const std::vector<float>& v_know,
                           const std::vector<int>& question, const AnswerConfig& cfg = {}) {
  VQAKIT_REQUIRE(cfg.max_len >= 1, "answer: max_len must be at least 1");
  Episode ep;
  ep.v_att = v_att;
  ep.v_cap = v_cap;
  ep.v_know = v_know;
  ep.question = question;
  detail::AnswerStepper stepper = detail::make_stepper(m, ep);

  DecodeResult out;
  if (cfg.beam_width <= 1) {
    decode::BeamItem g = decode::greedy_decode(stepper, cfg.max_len, &out.step_probs);
    out.tokens = g.tokens;
    out.log_prob = g.log_prob;
    return out;
  }

  decode::BeamResult beam = decode::beam_search(stepper, cfg.beam_width, cfg.max_len);
  VQAKIT_REQUIRE(!beam.items.empty(), "answer: beam returned no sequences");
  out.tokens = beam.items.front().tokens;
  out.log_prob = beam.items.front().log_prob;
  return out;
}

// All beam candidates, for oracle tests and ranked output.
inline decode::BeamResult answer_beam(const VqaModel& m, const Episode& ep, int beam_width,
                                      int max_len) {
  return decode::beam_search(detail::make_stepper(m, ep), beam_width, max_len);
}

}  // namespace vqakit::vqalstm
