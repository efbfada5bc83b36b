#pragma once

// Distributed-memory paragraph embeddings. Each training document owns a
// vector that is averaged with the context word vectors inside a sliding
// window; the mean is pushed through a plain softmax to predict the center
// word. Unseen documents get a vector by freezing every trained weight and
// running gradient steps on a fresh document vector alone.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vqakit/core.hpp"
#include "vqakit/numkit.hpp"
#include "vqakit/tensor_io.hpp"
#include "vqakit/text.hpp"

namespace vqakit::doc2vec {

using numkit::derive_seed;
using numkit::fnv1a64;
using numkit::Rng;
using numkit::Tensor;
using numkit::TensorFile;

using text::tokenize;

struct Doc2VecConfig {
  int dim = 500;
  int window = 4;
  int min_count = 1;
  int epochs = 50;
  float lr = 0.05f;
  float lr_end = -1.0f;  // linear per-epoch decay toward this when 0 <= lr_end <= lr
  std::uint64_t seed = 1;

  float lr_at(int epoch, int total_epochs) const {
    if (lr_end < 0.0f || lr_end > lr || total_epochs < 2) return lr;
    const float t = static_cast<float>(epoch) / static_cast<float>(total_epochs - 1);
    return lr + (lr_end - lr) * t;
  }
};

struct Doc2VecModel {
  static constexpr const char* kUnk = "<unk>";

  std::vector<std::string> words;  // words[0] == kUnk
  std::map<std::string, int> index;
  Tensor w_word;  // {V, d} context word vectors
  Tensor w_doc;   // {N, d} one row per training document
  Tensor w_out;   // {V, d} center-word prediction weights
  int window = 4;

  int dim() const { return static_cast<int>(w_word.cols()); }
  int vocab_size() const { return static_cast<int>(words.size()); }
  int doc_count() const { return static_cast<int>(w_doc.rows()); }

  int id_or_unk(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? 0 : it->second;
  }

  std::uint64_t vocab_hash() const {
    std::string joined;
    for (const std::string& w : words) {
      joined += w;
      joined += '\n';
    }
    return fnv1a64(joined);
  }

  void rebuild_index() {
    index.clear();
    for (std::size_t i = 0; i < words.size(); ++i)
      index[words[i]] = static_cast<int>(i);
    VQAKIT_REQUIRE(index.size() == words.size(),
                   "Doc2VecModel: duplicate vocabulary word");
    VQAKIT_REQUIRE(!words.empty() && words[0] == kUnk,
                   "Doc2VecModel: vocabulary must start with the unknown token");
  }

  void save(const std::filesystem::path& path) const {
    TensorFile f;
    f.meta["kind"] = "doc2vec";
    f.meta["window"] = std::to_string(window);
    f.meta["vocab_hash"] = std::to_string(vocab_hash());
    f.tensors.emplace("w_word", w_word);
    f.tensors.emplace("w_doc", w_doc);
    f.tensors.emplace("w_out", w_out);
    f.save(path);

    const std::filesystem::path side = path.string() + ".vocab";
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw IoError("Doc2VecModel: cannot write " + side.string());
    for (const std::string& w : words) out << w << '\n';
  }

  static Doc2VecModel load(const std::filesystem::path& path) {
    TensorFile f = TensorFile::load(path);
    if (f.meta.count("kind") == 0 || f.meta.at("kind") != "doc2vec")
      throw IoError("Doc2VecModel: " + path.string() + " is not a paragraph embedding checkpoint");

    Doc2VecModel m;
    m.window = std::stoi(f.meta.at("window"));
    m.w_word = f.get("w_word");
    m.w_doc = f.get("w_doc");
    m.w_out = f.get("w_out");

    const std::filesystem::path side = path.string() + ".vocab";
    std::ifstream in(side);
    if (!in) throw IoError("Doc2VecModel: cannot read " + side.string());
    std::string line;
    while (std::getline(in, line)) m.words.push_back(line);
    m.rebuild_index();

    if (std::to_string(m.vocab_hash()) != f.meta.at("vocab_hash"))
      throw IoError("Doc2VecModel: vocabulary sidecar does not match checkpoint");
    VQAKIT_REQUIRE(static_cast<std::size_t>(m.w_word.rows()) == m.words.size(),
                   "Doc2VecModel: word row count mismatch");
    VQAKIT_REQUIRE(m.w_out.same_shape(m.w_word), "Doc2VecModel: output weight shape mismatch");
    VQAKIT_REQUIRE(m.w_doc.cols() == m.w_word.cols(), "Doc2VecModel: document vector width mismatch");
    return m;
  }
};

inline std::vector<int> tokens_to_ids(const Doc2VecModel& m, const std::vector<std::string>& tokens) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(m.id_or_unk(t));
  return ids;
}

// One document per line; a trailing newline does not add an empty document.
inline std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("doc2vec: cannot read corpus " + path.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) docs.push_back(line);
  return docs;
}

namespace detail {

struct DmStep {
  std::vector<int> ctx;       // word ids inside the window, center excluded
  std::vector<float> h;       // mean of document vector and context vectors
  std::vector<float> probs;   // softmax over real words; probs[0] stays 0
  double loss = 0.0;
};

// Forward pass for one center position. The unknown token never appears as
// a prediction target: its output row is masked out of the softmax.
inline DmStep dm_forward(const Tensor& w_word, const Tensor& w_out,
                         std::span<const float> doc_vec,
                         const std::vector<int>& ids, int pos, int window) {
  const int d = static_cast<int>(w_word.cols());
  const int v = static_cast<int>(w_out.rows());
  DmStep s;
  const int lo = std::max(0, pos - window);
  const int hi = std::min(static_cast<int>(ids.size()) - 1, pos + window);
  for (int j = lo; j <= hi; ++j)
    if (j != pos) s.ctx.push_back(ids[j]);

  s.h.assign(d, 0.0f);
  for (int k = 0; k < d; ++k) {
    double acc = doc_vec[k];
    for (int c : s.ctx) acc += w_word(c, k);
    s.h[k] = static_cast<float>(acc / (1.0 + static_cast<double>(s.ctx.size())));
  }

  std::vector<float> logits(v - 1);
  for (int r = 1; r < v; ++r) {
    double acc = 0.0;
    for (int k = 0; k < d; ++k) acc += static_cast<double>(w_out(r, k)) * s.h[k];
    logits[r - 1] = static_cast<float>(acc);
  }
  const std::vector<float> p = numkit::softmax(logits);
  s.probs.assign(v, 0.0f);
  for (int r = 1; r < v; ++r) s.probs[r] = p[r - 1];

  const int center = ids[pos];
  s.loss = -std::log(std::max(static_cast<double>(s.probs[center]), 1e-12));
  return s;
}

}  // namespace detail

struct Doc2VecGrads {
  Tensor w_word, w_doc, w_out;
  explicit Doc2VecGrads(const Doc2VecModel& m)
      : w_word(Tensor::zeros({m.w_word.rows(), m.w_word.cols()})),
        w_doc(Tensor::zeros({m.w_doc.rows(), m.w_doc.cols()})),
        w_out(Tensor::zeros({m.w_out.rows(), m.w_out.cols()})) {}
};

// Mean prediction loss over every real-word center in the corpus; fills
// analytic gradients when asked. Unknown-token centers are skipped.
inline double dm_loss(const Doc2VecModel& m,
                      const std::vector<std::vector<int>>& doc_ids,
                      Doc2VecGrads* grads = nullptr) {
  VQAKIT_REQUIRE(doc_ids.size() == static_cast<std::size_t>(m.w_doc.rows()),
                 "dm_loss: one id sequence per document row required");
  const int d = m.dim();
  double total = 0.0;
  std::size_t positions = 0;

  for (std::size_t doc = 0; doc < doc_ids.size(); ++doc) {
    const std::vector<int>& ids = doc_ids[doc];
    for (int pos = 0; pos < static_cast<int>(ids.size()); ++pos) {
      if (ids[pos] == 0) continue;
      detail::DmStep s = detail::dm_forward(m.w_word, m.w_out, m.w_doc.row(doc), ids, pos, m.window);
      total += s.loss;
      ++positions;
      if (!grads) continue;

      const float inv = 1.0f / (1.0f + static_cast<float>(s.ctx.size()));
      std::vector<float> dh(d, 0.0f);
      for (int r = 1; r < m.vocab_size(); ++r) {
        const float dlogit = s.probs[r] - (r == ids[pos] ? 1.0f : 0.0f);
        for (int k = 0; k < d; ++k) {
          grads->w_out(r, k) += dlogit * s.h[k];
          dh[k] += dlogit * m.w_out(r, k);
        }
      }
      for (int k = 0; k < d; ++k) grads->w_doc(doc, k) += dh[k] * inv;
      for (int c : s.ctx)
        for (int k = 0; k < d; ++k) grads->w_word(c, k) += dh[k] * inv;
    }
  }

  VQAKIT_REQUIRE(positions > 0, "dm_loss: no trainable center words");
  if (grads) {
    const float scale = 1.0f / static_cast<float>(positions);
    for (Tensor* g : {&grads->w_word, &grads->w_doc, &grads->w_out})
      for (float& x : g->span()) x *= scale;
  }
  return total / static_cast<double>(positions);
}

struct Doc2VecTrainResult {
  Doc2VecModel model;
  std::vector<double> epoch_losses;  // mean center-word loss per epoch
  std::vector<std::vector<int>> doc_ids;
};

inline Doc2VecTrainResult train_doc2vec(const std::vector<std::string>& docs,
                                        const Doc2VecConfig& cfg) {
  VQAKIT_REQUIRE(!docs.empty(), "train_doc2vec: corpus is empty");
  VQAKIT_REQUIRE(cfg.dim > 0 && cfg.window > 0 && cfg.epochs > 0 && cfg.min_count > 0,
                 "train_doc2vec: config values must be positive");

  std::vector<std::vector<std::string>> doc_tokens;
  doc_tokens.reserve(docs.size());
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> order;  // first-appearance order
  for (const std::string& doc : docs) {
    doc_tokens.push_back(tokenize(doc));
    for (const std::string& t : doc_tokens.back()) {
      if (counts[t]++ == 0) order.push_back(t);
    }
  }

  Doc2VecTrainResult out;
  Doc2VecModel& m = out.model;
  m.window = cfg.window;
  m.words.push_back(Doc2VecModel::kUnk);
  for (const std::string& w : order)
    if (counts[w] >= static_cast<std::size_t>(cfg.min_count) && w != Doc2VecModel::kUnk)
      m.words.push_back(w);
  if (m.words.size() < 2)
    throw ContractViolation("train_doc2vec: vocabulary is empty after min-count filtering");
  m.rebuild_index();

  out.doc_ids.reserve(docs.size());
  for (const std::vector<std::string>& toks : doc_tokens)
    out.doc_ids.push_back(tokens_to_ids(m, toks));

  const int v = m.vocab_size();
  const int d = cfg.dim;
  Rng rng(derive_seed(cfg.seed, "train_doc2vec"));
  const float init = 0.5f / static_cast<float>(d);
  m.w_word = Tensor::zeros({v, d});
  m.w_doc = Tensor::zeros({static_cast<int>(docs.size()), d});
  m.w_out = Tensor::zeros({v, d});
  rng.fill_uniform(m.w_word, -init, init);
  rng.fill_uniform(m.w_doc, -init, init);

  std::vector<std::size_t> visit(docs.size());
  for (std::size_t i = 0; i < visit.size(); ++i) visit[i] = i;
  std::vector<float> dh(d);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = cfg.lr_at(epoch, cfg.epochs);
    rng.shuffle(visit);
    double total = 0.0;
    std::size_t positions = 0;
    for (std::size_t doc : visit) {
      const std::vector<int>& ids = out.doc_ids[doc];
      for (int pos = 0; pos < static_cast<int>(ids.size()); ++pos) {
        if (ids[pos] == 0) continue;
        detail::DmStep s = detail::dm_forward(m.w_word, m.w_out, m.w_doc.row(doc), ids, pos, m.window);
        total += s.loss;
        ++positions;

        // dh must read the output weights before they move.
        std::fill(dh.begin(), dh.end(), 0.0f);
        for (int r = 1; r < v; ++r) {
          const float dlogit = s.probs[r] - (r == ids[pos] ? 1.0f : 0.0f);
          for (int k = 0; k < d; ++k) {
            dh[k] += dlogit * m.w_out(r, k);
            m.w_out(r, k) -= lr * dlogit * s.h[k];
          }
        }
        const float inv = 1.0f / (1.0f + static_cast<float>(s.ctx.size()));
        for (int k = 0; k < d; ++k) m.w_doc(doc, k) -= lr * dh[k] * inv;
        for (int c : s.ctx)
          for (int k = 0; k < d; ++k) m.w_word(c, k) -= lr * dh[k] * inv;
      }
    }
    VQAKIT_REQUIRE(positions > 0, "train_doc2vec: no trainable center words");
    out.epoch_losses.push_back(total / static_cast<double>(positions));
  }
  return out;
}

struct InferredVector {
  std::vector<float> values;
  bool no_coverage = false;  // no in-vocabulary token survived tokenization
};

// Gradient steps on a fresh document vector with every model weight frozen.
// One step passes once over all real-word centers of the paragraph.
inline InferredVector infer_vector(const Doc2VecModel& m, const std::string& paragraph,
                                   int steps = 100, float lr = 0.05f,
                                   std::uint64_t seed = 1) {
  VQAKIT_REQUIRE(steps > 0, "infer_vector: steps must be positive");
  const int d = m.dim();
  InferredVector out;
  out.values.assign(d, 0.0f);

  const std::vector<int> ids = tokens_to_ids(m, tokenize(paragraph));
  bool any_center = false;
  for (int id : ids)
    if (id != 0) any_center = true;
  if (!any_center) {
    out.no_coverage = true;
    return out;
  }

  Rng rng(derive_seed(seed, "infer_vector"));
  const float init = 0.5f / static_cast<float>(d);
  for (float& x : out.values) x = static_cast<float>(rng.uniform(-init, init));

  std::vector<float> dh(d);
  for (int step = 0; step < steps; ++step) {
    for (int pos = 0; pos < static_cast<int>(ids.size()); ++pos) {
      if (ids[pos] == 0) continue;
      detail::DmStep s = detail::dm_forward(m.w_word, m.w_out,
                                            std::span<const float>(out.values), ids, pos, m.window);
      std::fill(dh.begin(), dh.end(), 0.0f);
      for (int r = 1; r < m.vocab_size(); ++r) {
        const float dlogit = s.probs[r] - (r == ids[pos] ? 1.0f : 0.0f);
        for (int k = 0; k < d; ++k) dh[k] += dlogit * m.w_out(r, k);
      }
      const float inv = 1.0f / (1.0f + static_cast<float>(s.ctx.size()));
      for (int k = 0; k < d; ++k) out.values[k] -= lr * dh[k] * inv;
    }
  }
  return out;
}

inline double cosine(std::span<const float> a, std::span<const float> b) {
  VQAKIT_REQUIRE(a.size() == b.size(), "cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace vqakit::doc2vec
