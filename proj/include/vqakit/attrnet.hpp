#pragma once

// Attribute-based image representation: a shared scorer (one or two affine
// layers, logistic or softmax head) maps each region proposal's feature
// vector to per-attribute probabilities, and cross-region max-pooling
// collapses them into a single vector v_att per image. Trained with
// elementwise binary cross-entropy against multi-label attribute targets,
// with the max-pool subgradient routed to the winning region (lowest index
// on ties).

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "vqakit/core.hpp"
#include "vqakit/numkit.hpp"
#include "vqakit/tensor_io.hpp"

namespace vqakit::attrnet {

using numkit::Rng;
using numkit::Tensor;

// Ordered attribute terms; index order is the canonical layout of every
// v_att. Loaded from a text file with one term per line.
struct AttributeVocab {
  std::vector<std::string> terms;

  std::size_t size() const { return terms.size(); }

  void validate() const {
    VQAKIT_REQUIRE(!terms.empty(), "AttributeVocab: empty vocabulary");
    std::set<std::string> seen;
    for (const std::string& t : terms) {
      VQAKIT_REQUIRE(!t.empty(), "AttributeVocab: empty term");
      for (unsigned char ch : t)
        VQAKIT_REQUIRE(!std::isupper(ch), "AttributeVocab: terms must be lowercase");
      VQAKIT_REQUIRE(seen.insert(t).second, "AttributeVocab: duplicate term '" + t + "'");
    }
  }

  static AttributeVocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("AttributeVocab: cannot open " + path.string());
    AttributeVocab v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) v.terms.push_back(line);
    }
    v.validate();
    return v;
  }
};

// Per-image bundle of externally supplied region features, one row per
// region proposal.
struct RegionFeatureSet {
  std::string image_id;
  Tensor features;  // {R, D}

  int region_count() const { return features.rows(); }
  int feature_dim() const { return features.cols(); }
};

struct AttrConfig {
  int hidden_dim = 0;         // 0 = single affine layer straight to logits
  bool softmax_head = false;  // default is the elementwise logistic head
  int epochs = 40;
  float lr_hidden = 0.001f;
  float lr_pred = 0.01f;
  float lr_decay = 0.1f;
  int decay_every = 10;
  float momentum = 0.9f;
  float dropout = 0.5f;
  float init_scale = 0.08f;
  std::uint64_t seed = 1;

  // Piecewise-constant schedule: the base rate is divided by 10 every
  // decay_every epochs (epochs counted from 0).
  float lr_at(int epoch, float base) const {
    float lr = base;
    for (int k = 0; k < epoch / decay_every; ++k) lr *= lr_decay;
    return lr;
  }
};

// Shared per-region scorer. The same parameters are applied to every region.
struct AttrModel {
  int input_dim = 0;
  int hidden_dim = 0;  // 0 when there is no hidden layer
  int vocab_size = 0;
  bool softmax_head = false;

  Tensor w_hidden, b_hidden;  // {H, D}, {H}; absent when hidden_dim == 0
  Tensor w_pred, b_pred;      // {c, H or D}, {c}

  static AttrModel init(int input_dim, int vocab_size, const AttrConfig& cfg, Rng& rng) {
    VQAKIT_REQUIRE(input_dim > 0 && vocab_size > 0, "AttrModel: dims must be positive");
    AttrModel m;
    m.input_dim = input_dim;
    m.hidden_dim = cfg.hidden_dim;
    m.vocab_size = vocab_size;
    m.softmax_head = cfg.softmax_head;
    const int pred_in = cfg.hidden_dim > 0 ? cfg.hidden_dim : input_dim;
    if (cfg.hidden_dim > 0) {
      m.w_hidden = Tensor({cfg.hidden_dim, input_dim});
      m.b_hidden = Tensor({cfg.hidden_dim});
      rng.fill_uniform(m.w_hidden, -cfg.init_scale, cfg.init_scale);
    }
    m.w_pred = Tensor({vocab_size, pred_in});
    m.b_pred = Tensor({vocab_size});
    rng.fill_uniform(m.w_pred, -cfg.init_scale, cfg.init_scale);
    return m;
  }

  void save(const std::filesystem::path& path) const {
    numkit::TensorFile tf;
    tf.meta["kind"] = "attrnet";
    tf.meta["input_dim"] = std::to_string(input_dim);
    tf.meta["hidden_dim"] = std::to_string(hidden_dim);
    tf.meta["vocab_size"] = std::to_string(vocab_size);
    tf.meta["head"] = softmax_head ? "softmax" : "sigmoid";
    if (hidden_dim > 0) {
      tf.tensors["w_hidden"] = w_hidden;
      tf.tensors["b_hidden"] = b_hidden;
    }
    tf.tensors["w_pred"] = w_pred;
    tf.tensors["b_pred"] = b_pred;
    tf.save(path);
  }

  static AttrModel load(const std::filesystem::path& path) {
    numkit::TensorFile tf = numkit::TensorFile::load(path);
    if (tf.meta["kind"] != "attrnet")
      throw IoError("AttrModel: not an attribute model checkpoint: " + path.string());
    AttrModel m;
    m.input_dim = std::stoi(tf.meta.at("input_dim"));
    m.hidden_dim = std::stoi(tf.meta.at("hidden_dim"));
    m.vocab_size = std::stoi(tf.meta.at("vocab_size"));
    m.softmax_head = tf.meta.at("head") == "softmax";
    if (m.hidden_dim > 0) {
      m.w_hidden = tf.get("w_hidden");
      m.b_hidden = tf.get("b_hidden");
    }
    m.w_pred = tf.get("w_pred");
    m.b_pred = tf.get("b_pred");
    return m;
  }
};

namespace detail {

// Forward for one region, optionally with a dropout mask on the hidden
// activations and a cache of intermediates for the backward pass.
struct RegionCache {
  std::vector<float> hidden_pre;   // before ReLU
  std::vector<float> hidden_post;  // after ReLU and mask
  std::vector<float> mask;
  std::vector<float> probs;
};

inline std::vector<float> score_one_region(const AttrModel& m, std::span<const float> x,
                                           const std::vector<float>* mask,
                                           RegionCache* cache) {
  const std::vector<float>* pred_in_vec = nullptr;
  std::vector<float> hidden;
  if (m.hidden_dim > 0) {
    hidden.resize(m.hidden_dim);
    for (int i = 0; i < m.hidden_dim; ++i) hidden[i] = m.b_hidden[i];
    numkit::matvec(m.w_hidden, x, hidden, true);
    if (cache) cache->hidden_pre = hidden;
    for (float& v : hidden) v = std::max(v, 0.0f);
    if (mask)
      for (int i = 0; i < m.hidden_dim; ++i) hidden[i] *= (*mask)[i];
    if (cache) {
      cache->hidden_post = hidden;
      if (mask) cache->mask = *mask;
    }
    pred_in_vec = &hidden;
  }

  std::vector<float> logits(m.vocab_size);
  for (int i = 0; i < m.vocab_size; ++i) logits[i] = m.b_pred[i];
  std::span<const float> pred_in = pred_in_vec ? std::span<const float>(*pred_in_vec) : x;
  numkit::matvec(m.w_pred, pred_in, logits, true);

  std::vector<float> probs;
  if (m.softmax_head) {
    probs = numkit::softmax(logits);
  } else {
    probs.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = numkit::sigmoidf(logits[i]);
  }
  if (cache) cache->probs = probs;
  return probs;
}

}  // namespace detail

// Per-region probabilities, one row per region. Pure inference path: no
// dropout.
inline Tensor score_regions(const AttrModel& m, const RegionFeatureSet& regions) {
  VQAKIT_REQUIRE(regions.feature_dim() == m.input_dim,
                 "score_regions: feature dimension mismatch");
  VQAKIT_REQUIRE(regions.region_count() >= 1, "score_regions: no regions");
  Tensor out({regions.region_count(), m.vocab_size});
  for (int r = 0; r < regions.region_count(); ++r) {
    const std::vector<float> p =
        detail::score_one_region(m, regions.features.row(r), nullptr, nullptr);
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

// Columnwise max across regions; the winning region index per attribute is
// optionally reported (lowest index on ties).
inline std::vector<float> max_pool_hypotheses(const Tensor& per_region,
                                              std::vector<int>* argmax = nullptr) {
  VQAKIT_REQUIRE(per_region.shape().size() == 2 && per_region.rows() >= 1,
                 "max_pool_hypotheses: need at least one region row");
  const int r_count = per_region.rows(), c = per_region.cols();
  std::vector<float> pooled(per_region.row(0).begin(), per_region.row(0).end());
  if (argmax) argmax->assign(c, 0);
  for (int r = 1; r < r_count; ++r) {
    std::span<const float> row = per_region.row(r);
    for (int j = 0; j < c; ++j) {
      if (row[j] > pooled[j]) {
        pooled[j] = row[j];
        if (argmax) (*argmax)[j] = r;
      }
    }
  }
  return pooled;
}

// Top-k terms by descending score, ties broken by ascending vocabulary
// index.
inline std::vector<std::string> top_k_attributes(const std::vector<float>& scores,
                                                 const AttributeVocab& vocab, int k) {
  VQAKIT_REQUIRE(scores.size() == vocab.size(),
                 "top_k_attributes: score/vocab size mismatch");
  VQAKIT_REQUIRE(k >= 1 && k <= static_cast<int>(scores.size()),
                 "top_k_attributes: k out of range");
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<std::string> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) out.push_back(vocab.terms[idx[i]]);
  return out;
}

struct AttrExample {
  RegionFeatureSet regions;
  std::vector<float> labels;  // length c, entries in {0, 1}
};

struct AttrTrainResult {
  std::vector<float> epoch_losses;  // mean per-example BCE per epoch
};

namespace detail {

// Loss and gradients for one example. The pooled probability per attribute
// is the max over regions; its gradient flows only into the winning region.
// d(loss)/d(prob) is converted to d/d(logits) per head and backpropagated
// through the shared layers. Returns the mean elementwise BCE.
inline double attr_example_pass(const AttrModel& m, const AttrExample& ex,
                                const std::vector<std::vector<float>>* masks,
                                AttrModel* grads) {
  const int r_count = ex.regions.region_count();
  const int c = m.vocab_size;
  VQAKIT_REQUIRE(static_cast<int>(ex.labels.size()) == c,
                 "train_attr: label length != vocabulary size");
  VQAKIT_REQUIRE(ex.regions.feature_dim() == m.input_dim,
                 "train_attr: feature dimension mismatch");

  std::vector<RegionCache> caches(r_count);
  Tensor per_region({r_count, c});
  for (int r = 0; r < r_count; ++r) {
    const std::vector<float>* mask = masks ? &(*masks)[r] : nullptr;
    const std::vector<float> p =
        score_one_region(m, ex.regions.features.row(r), mask, &caches[r]);
    std::copy(p.begin(), p.end(), per_region.row(r).begin());
  }

  std::vector<int> winner;
  const std::vector<float> pooled = max_pool_hypotheses(per_region, &winner);

  double loss = 0.0;
  for (int j = 0; j < c; ++j) {
    const double p = std::clamp(static_cast<double>(pooled[j]), 1e-12, 1.0 - 1e-12);
    const double y = ex.labels[j];
    loss += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  loss /= c;
  if (!grads) return loss;

  // d(mean BCE)/d(pooled prob), routed to the winning region per attribute.
  std::vector<std::vector<float>> dprob(r_count, std::vector<float>(c, 0.0f));
  for (int j = 0; j < c; ++j) {
    const double p = std::clamp(static_cast<double>(pooled[j]), 1e-12, 1.0 - 1e-12);
    const double y = ex.labels[j];
    dprob[winner[j]][j] = static_cast<float>((p - y) / (p * (1.0 - p)) / c);
  }

  for (int r = 0; r < r_count; ++r) {
    const RegionCache& cc = caches[r];
    std::vector<float> dlogits(c, 0.0f);
    if (m.softmax_head) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += static_cast<double>(dprob[r][j]) * cc.probs[j];
      for (int j = 0; j < c; ++j)
        dlogits[j] = cc.probs[j] * (dprob[r][j] - static_cast<float>(dot));
    } else {
      for (int j = 0; j < c; ++j)
        dlogits[j] = dprob[r][j] * cc.probs[j] * (1.0f - cc.probs[j]);
    }

    bool any = false;
    for (int j = 0; j < c; ++j)
      if (dlogits[j] != 0.0f) { any = true; break; }
    if (!any) continue;

    std::span<const float> x = ex.regions.features.row(r);
    if (m.hidden_dim > 0) {
      numkit::outer_acc(grads->w_pred, dlogits, cc.hidden_post);
      for (int j = 0; j < c; ++j) grads->b_pred[j] += dlogits[j];
      std::vector<float> dhidden(m.hidden_dim, 0.0f);
      numkit::matvec_t(m.w_pred, dlogits, dhidden);
      for (int i = 0; i < m.hidden_dim; ++i) {
        if (!cc.mask.empty()) dhidden[i] *= cc.mask[i];
        if (cc.hidden_pre[i] <= 0.0f) dhidden[i] = 0.0f;
      }
      numkit::outer_acc(grads->w_hidden, dhidden, x);
      for (int i = 0; i < m.hidden_dim; ++i) grads->b_hidden[i] += dhidden[i];
    } else {
      numkit::outer_acc(grads->w_pred, dlogits, x);
      for (int j = 0; j < c; ++j) grads->b_pred[j] += dlogits[j];
    }
  }
  return loss;
}

}  // namespace detail

// Mean elementwise BCE between the pooled prediction and the labels,
// without dropout. Exposed for gradient checking and evaluation.
inline double attr_loss(const AttrModel& m, const AttrExample& ex,
                        AttrModel* grads = nullptr) {
  return detail::attr_example_pass(m, ex, nullptr, grads);
}

// Per-example SGD with momentum, per-layer learning rates, a step-decay
// schedule, and dropout on the hidden activations.
inline AttrTrainResult train_attr(AttrModel& m, const std::vector<AttrExample>& dataset,
                                  const AttrConfig& cfg) {
  VQAKIT_REQUIRE(!dataset.empty(), "train_attr: empty dataset");
  Rng rng(numkit::derive_seed(cfg.seed, "train_attr"));

  AttrModel vel = m;
  if (m.hidden_dim > 0) {
    vel.w_hidden.fill(0.0f);
    vel.b_hidden.fill(0.0f);
  }
  vel.w_pred.fill(0.0f);
  vel.b_pred.fill(0.0f);

  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  AttrTrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr_h = cfg.lr_at(epoch, cfg.lr_hidden);
    const float lr_p = cfg.lr_at(epoch, cfg.lr_pred);
    rng.shuffle(order);

    double epoch_loss = 0.0;
    for (int ei : order) {
      const AttrExample& ex = dataset[static_cast<std::size_t>(ei)];
      AttrModel grads = m;
      if (m.hidden_dim > 0) {
        grads.w_hidden.fill(0.0f);
        grads.b_hidden.fill(0.0f);
      }
      grads.w_pred.fill(0.0f);
      grads.b_pred.fill(0.0f);

      std::vector<std::vector<float>> masks;
      const std::vector<std::vector<float>>* masks_ptr = nullptr;
      if (m.hidden_dim > 0 && cfg.dropout > 0.0f) {
        masks.reserve(ex.regions.region_count());
        for (int r = 0; r < ex.regions.region_count(); ++r)
          masks.push_back(numkit::dropout_mask(rng, cfg.dropout, m.hidden_dim));
        masks_ptr = &masks;
      }

      epoch_loss += detail::attr_example_pass(m, ex, masks_ptr, &grads);

      if (m.hidden_dim > 0) {
        numkit::sgd_step(m.w_hidden, grads.w_hidden, lr_h, cfg.momentum, vel.w_hidden);
        numkit::sgd_step(m.b_hidden, grads.b_hidden, lr_h, cfg.momentum, vel.b_hidden);
      }
      numkit::sgd_step(m.w_pred, grads.w_pred, lr_p, cfg.momentum, vel.w_pred);
      numkit::sgd_step(m.b_pred, grads.b_pred, lr_p, cfg.momentum, vel.b_pred);
    }
    result.epoch_losses.push_back(static_cast<float>(epoch_loss / dataset.size()));
  }
  return result;
}

}  // namespace vqakit::attrnet
