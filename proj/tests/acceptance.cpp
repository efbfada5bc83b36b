// Release gate for the whole toolkit. Each numbered check prints one
// [PASS]/[FAIL] line with its key numbers and wall time; the exit code is
// the number of failures. Oracles here are independent re-derivations
// (double-precision replays, exhaustive enumeration, byte comparisons),
// never the code paths they judge.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vqakit/pipeline.hpp"

using namespace vqakit;
namespace fs = std::filesystem;
using numkit::Rng;
using numkit::Tensor;

namespace {

// ---------------------------------------------------------------- harness

struct Check {
  bool ok = true;
  std::string note;

  void expect(bool cond, const std::string& msg) {
    if (!cond) {
      ok = false;
      if (!note.empty()) note += "; ";
      note += msg;
    }
  }
  void info(const std::string& msg) {
    if (!ok) return;  // failures own the note
    if (!note.empty()) note += ", ";
    note += msg;
  }
};

std::string fmt(double v, int prec = 2) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string fmt_sci(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

fs::path scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "vqakit_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("acceptance: cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& body) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  out << body;
}

// ------------------------------------------------- 1. gradient fidelity

float softmax_xent_reldiff() {
  Rng rng(3);
  Tensor w({4, 3}), b({4});
  rng.fill_uniform(w, -0.5f, 0.5f);
  rng.fill_uniform(b, -0.5f, 0.5f);
  Tensor x({3});
  rng.fill_uniform(x, -1.0f, 1.0f);
  const int target = 2;

  auto loss_fn = [&]() {
    std::vector<float> logits(4);
    for (int i = 0; i < 4; ++i) logits[i] = b[i];
    numkit::matvec(w, x.span(), logits, true);
    return numkit::cross_entropy(numkit::softmax(logits), target);
  };
  std::vector<float> logits(4);
  for (int i = 0; i < 4; ++i) logits[i] = b[i];
  numkit::matvec(w, x.span(), logits, true);
  std::vector<float> dlogits(4);
  numkit::softmax_xent(logits, target, dlogits);
  Tensor gw({4, 3}), gb({4});
  numkit::outer_acc(gw, dlogits, x.span());
  for (int i = 0; i < 4; ++i) gb[i] = dlogits[i];

  Rng coords(17);
  return numkit::finite_diff_check(loss_fn, {{"w", &w}, {"b", &b}}, {&gw, &gb}, 1e-3f, coords)
      .max_rel_error;
}

float lstm_cell_reldiff() {
  Rng rng(7);
  numkit::LstmParams p = numkit::LstmParams::init(3, 4, rng, 0.5f);
  const std::vector<float> x{0.9f, -1.3f, 0.6f};
  numkit::LstmState prev(4);
  prev.h = {0.4f, -0.5f, 0.3f, -0.6f};
  prev.c = {-0.3f, 0.6f, -0.4f, 0.5f};
  const std::vector<float> u{1.0f, -0.7f, 0.8f, -1.1f};
  const std::vector<float> v{-0.6f, 0.9f, 1.2f, -0.8f};

  auto loss_fn = [&]() {
    numkit::LstmState out = numkit::lstm_cell(p, x, prev);
    double l = 0.0;
    for (int k = 0; k < 4; ++k)
      l += static_cast<double>(u[k]) * out.h[k] + static_cast<double>(v[k]) * out.c[k];
    return l;
  };
  numkit::LstmCellCache cache;
  numkit::lstm_cell(p, x, prev, &cache);
  numkit::LstmGrads g(p);
  std::vector<float> dc(v), dh_prev;
  Tensor dx({3});
  numkit::lstm_cell_backward(p, cache, u, dc, g, dx.span(), dh_prev);

  Rng coords(99);
  return numkit::finite_diff_check(loss_fn, {{"w_x", &p.w_x}, {"w_h", &p.w_h}, {"b", &p.b}},
                                   {&g.w_x, &g.w_h, &g.b}, 1e-3f, coords)
      .max_rel_error;
}

captioner::WordVocab small_caption_vocab() {
  return captioner::WordVocab::from_tokens({captioner::WordVocab::kStart,
                                            captioner::WordVocab::kEnd,
                                            captioner::WordVocab::kUnk, "ant", "bee", "cow"});
}

captioner::CaptionModel caption_model(std::uint64_t seed, float scale = 0.8f) {
  captioner::CaptionConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 5;
  cfg.init_scale = scale;
  Rng rng(seed);
  return captioner::CaptionModel::init(small_caption_vocab(), 3, cfg, rng);
}

float caption_step_reldiff() {
  // five surface words and a wide init: every parameter keeps a gradient
  // large enough to sit clear of float32 forward-difference noise
  captioner::CaptionConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 5;
  cfg.init_scale = 1.0f;
  Rng rng(66);
  captioner::CaptionModel m = captioner::CaptionModel::init(
      captioner::WordVocab::from_tokens({captioner::WordVocab::kStart,
                                         captioner::WordVocab::kEnd,
                                         captioner::WordVocab::kUnk, "ant", "bee", "cow",
                                         "dog", "elk"}),
      3, cfg, rng);
  captioner::CaptionPair pair;
  pair.v_att = {0.8f, -0.4f, 0.6f};
  pair.reference = {3, 5, 4};

  captioner::detail::CaptionGrads g(m);
  captioner::caption_loss(m, pair, &g);
  auto loss_fn = [&]() { return captioner::caption_loss(m, pair); };

  Rng coords(7);
  return numkit::finite_diff_check(
             loss_fn,
             {{"w_att", &m.w_att}, {"b_att", &m.b_att}, {"w_emb", &m.w_emb},
              {"lstm/w_x", &m.lstm.w_x}, {"lstm/w_h", &m.lstm.w_h}, {"lstm/b", &m.lstm.b},
              {"w_out", &m.w_out}, {"b_out", &m.b_out}},
             {&g.w_att, &g.b_att, &g.w_emb, &g.lstm.w_x, &g.lstm.w_h, &g.lstm.b, &g.w_out,
              &g.b_out},
             2e-2f, coords)
      .max_rel_error;
}

float doc2vec_reldiff() {
  doc2vec::Doc2VecConfig cfg;
  cfg.dim = 8;
  cfg.window = 2;
  cfg.epochs = 1;
  cfg.lr = 0.0f;
  doc2vec::Doc2VecTrainResult r = doc2vec::train_doc2vec(
      {"red green blue red", "green blue yellow", "blue red yellow green"}, cfg);
  doc2vec::Doc2VecModel& m = r.model;
  Rng fill(31);
  fill.fill_uniform(m.w_word, -0.8f, 0.8f);
  fill.fill_uniform(m.w_doc, -0.8f, 0.8f);
  fill.fill_uniform(m.w_out, -0.8f, 0.8f);

  doc2vec::Doc2VecGrads g(m);
  doc2vec::dm_loss(m, r.doc_ids, &g);
  Rng coords(17);
  return numkit::finite_diff_check([&]() { return doc2vec::dm_loss(m, r.doc_ids); },
                                   {{"w_word", &m.w_word}, {"w_doc", &m.w_doc},
                                    {"w_out", &m.w_out}},
                                   {&g.w_word, &g.w_doc, &g.w_out}, 5e-3f, coords)
      .max_rel_error;
}

vqalstm::VqaVocab answer_vocab() {
  return vqalstm::VqaVocab::from_tokens({"<end>", "<unk>", "red", "blue", "dog", "cat"});
}

vqalstm::VqaModel answer_model(std::uint64_t seed, float scale = 1.2f) {
  Rng rng(seed);
  return vqalstm::VqaModel::init(answer_vocab(), 3, 4, 5, 4, vqalstm::Modalities{}, rng, scale);
}

std::vector<float> random_vec(Rng& rng, int n, float lim = 1.5f) {
  std::vector<float> out(n);
  for (float& x : out) x = rng.uniform(-lim, lim);
  return out;
}

std::vector<vqalstm::Episode> answer_batch(std::uint64_t seed) {
  Rng rng(seed);
  const vqalstm::VqaVocab v = answer_vocab();
  vqalstm::Episode a;
  a.v_att = random_vec(rng, 3);
  a.v_cap = random_vec(rng, 4);
  a.v_know = random_vec(rng, 5);
  a.question = {v.id_or_unk("red"), v.id_or_unk("dog")};
  a.answer = {v.id_or_unk("blue"), v.id_or_unk("cat"), v.id_or_unk("red")};
  vqalstm::Episode b;
  b.v_att = random_vec(rng, 3);
  b.v_cap = random_vec(rng, 4);
  b.v_know = random_vec(rng, 5);
  b.question = {v.id_or_unk("cat")};
  b.answer = {v.id_or_unk("red"), v.id_or_unk("cat")};
  return {a, b};
}

float episode_cost_reldiff() {
  vqalstm::VqaModel m = answer_model(17, 1.2f);
  std::vector<vqalstm::Episode> batch = answer_batch(117);

  vqalstm::VqaGrads grads(m);
  vqalstm::training_cost(m, batch, 1e-3f, &grads);
  auto loss_fn = [&]() { return vqalstm::training_cost(m, batch, 1e-3f); };

  Rng coords(17);
  return numkit::finite_diff_check(
             loss_fn,
             {{"w_att", &m.w_att}, {"w_cap", &m.w_cap}, {"w_know", &m.w_know},
              {"w_emb", &m.w_emb}, {"lstm/w_x", &m.lstm.w_x}, {"lstm/w_h", &m.lstm.w_h},
              {"lstm/b", &m.lstm.b}, {"w_out", &m.w_out}, {"b_out", &m.b_out}},
             {&grads.w_att, &grads.w_cap, &grads.w_know, &grads.w_emb, &grads.lstm.w_x,
              &grads.lstm.w_h, &grads.lstm.b, &grads.w_out, &grads.b_out},
             2e-2f, coords)
      .max_rel_error;
}

void criterion_gradients(Check& c) {
  const struct {
    const char* name;
    float rel;
  } runs[] = {{"softmax-xent", softmax_xent_reldiff()},
              {"lstm-cell", lstm_cell_reldiff()},
              {"caption-step", caption_step_reldiff()},
              {"doc2vec-dm", doc2vec_reldiff()},
              {"episode-cost", episode_cost_reldiff()}};
  float worst = 0.0f;
  std::string worst_name;
  for (const auto& r : runs) {
    c.expect(r.rel < 1e-2f, std::string(r.name) + " rel " + fmt_sci(r.rel) + " >= 1e-2");
    if (r.rel > worst) {
      worst = r.rel;
      worst_name = r.name;
    }
  }
  c.info("worst " + worst_name + " rel " + fmt_sci(worst));
}

// ------------------------------------- 2. beam search vs exhaustion

// independent double-precision rescoring of one caption token sequence
double caption_rescore(const captioner::CaptionModel& m, const std::vector<float>& v_att,
                       const std::vector<int>& tokens, int max_len, bool* valid) {
  *valid = true;
  std::vector<float> x0(m.embed_dim());
  for (int i = 0; i < m.embed_dim(); ++i) {
    double a = m.b_att[i];
    for (int j = 0; j < m.attr_dim(); ++j) a += static_cast<double>(m.w_att(i, j)) * v_att[j];
    x0[i] = static_cast<float>(a);
  }
  numkit::LstmState s = numkit::lstm_cell(m.lstm, x0, numkit::LstmState(m.hidden_dim()));

  auto dist = [&](const numkit::LstmState& st) {
    std::vector<float> logits(m.vocab.size());
    for (int i = 0; i < m.vocab.size(); ++i) {
      double a = m.b_out[i];
      for (int j = 0; j < m.hidden_dim(); ++j)
        a += static_cast<double>(m.w_out(i, j)) * st.h[static_cast<std::size_t>(j)];
      logits[i] = static_cast<float>(a);
    }
    std::vector<float> kept;
    std::vector<int> kept_ids;
    for (int i = 0; i < m.vocab.size(); ++i)
      if (i != m.vocab.start_id() && i != m.vocab.unk_id()) {
        kept.push_back(logits[i]);
        kept_ids.push_back(i);
      }
    const std::vector<float> kp = numkit::softmax(kept);
    std::vector<float> probs(logits.size(), 0.0f);
    for (std::size_t k = 0; k < kept_ids.size(); ++k)
      probs[static_cast<std::size_t>(kept_ids[k])] = kp[k];
    return probs;
  };

  double score = 0.0;
  for (int tok : tokens) {
    const std::vector<float> p = dist(s);
    if (p[static_cast<std::size_t>(tok)] <= 0.0f) {
      *valid = false;
      return 0.0;
    }
    score += std::log(static_cast<double>(p[static_cast<std::size_t>(tok)]));
    s = numkit::lstm_cell(m.lstm, m.w_emb.row(tok), s);
  }
  if (static_cast<int>(tokens.size()) < max_len) {
    const std::vector<float> p = dist(s);
    const float pe = p[static_cast<std::size_t>(m.vocab.end_id())];
    if (pe <= 0.0f) {
      *valid = false;
      return 0.0;
    }
    score += std::log(static_cast<double>(pe));
  }
  return score;
}

std::vector<decode::BeamItem> caption_exhaustive(const captioner::CaptionModel& m,
                                                 const std::vector<float>& v_att, int max_len) {
  std::vector<int> words;
  for (int i = 0; i < m.vocab.size(); ++i)
    if (i != m.vocab.start_id() && i != m.vocab.unk_id() && i != m.vocab.end_id())
      words.push_back(i);

  std::vector<decode::BeamItem> all;
  std::vector<std::vector<int>> frontier{{}};
  for (int len = 0; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& seq : frontier) {
      bool valid = false;
      const double score = caption_rescore(m, v_att, seq, max_len, &valid);
      if (valid) all.push_back({seq, score});
      if (len < max_len)
        for (int w : words) {
          auto ext = seq;
          ext.push_back(w);
          next.push_back(std::move(ext));
        }
    }
    frontier = std::move(next);
  }
  std::sort(all.begin(), all.end(), [](const decode::BeamItem& a, const decode::BeamItem& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;
  });
  return all;
}

void answer_enumerate(const vqalstm::detail::AnswerStepper& stepper,
                      const numkit::LstmState& state, std::vector<int>& prefix,
                      double score, int max_len, std::vector<decode::BeamItem>& out) {
  const std::vector<float> probs = stepper.step_probs(state);
  for (int tok = 0; tok < static_cast<int>(probs.size()); ++tok) {
    if (probs[tok] <= 0.0f) continue;
    const double next = score + std::log(static_cast<double>(probs[tok]));
    if (tok == stepper.end_token()) {
      out.push_back({prefix, next});
      continue;
    }
    prefix.push_back(tok);
    if (static_cast<int>(prefix.size()) >= max_len)
      out.push_back({prefix, next});
    else
      answer_enumerate(stepper, stepper.advance(state, tok), prefix, next, max_len, out);
    prefix.pop_back();
  }
}

void criterion_beam_oracle(Check& c) {
  int models = 0;
  double worst_gap = 0.0;

  for (int i = 0; i < 10; ++i) {  // caption decoder
    const int width = 1 + i % 4;
    const int max_len = 2 + i % 3;
    const captioner::CaptionModel m = caption_model(100 + static_cast<std::uint64_t>(i), 1.0f);
    Rng rng(500 + static_cast<std::uint64_t>(i));
    const std::vector<float> v_att = random_vec(rng, 3, 1.0f);

    const decode::BeamResult beam = captioner::beam_search(m, v_att, width, max_len);
    const std::vector<decode::BeamItem> oracle = caption_exhaustive(m, v_att, max_len);
    c.expect(beam.items.size() == std::min<std::size_t>(width, oracle.size()),
             "caption model " + std::to_string(i) + ": beam size mismatch");
    for (std::size_t k = 0; k < beam.items.size() && k < oracle.size(); ++k) {
      c.expect(beam.items[k].tokens == oracle[k].tokens,
               "caption model " + std::to_string(i) + ": sequence " + std::to_string(k) +
                   " differs from enumeration");
      const double gap = std::abs(beam.items[k].log_prob - oracle[k].log_prob);
      worst_gap = std::max(worst_gap, gap);
      c.expect(gap < 1e-5, "caption model " + std::to_string(i) + ": log-prob gap " +
                               fmt_sci(gap));
    }
    ++models;
  }

  for (int i = 0; i < 10; ++i) {  // answer decoder
    const int width = 1 + i % 4;
    const int max_len = 2 + i % 3;
    const vqalstm::VqaModel m = answer_model(200 + static_cast<std::uint64_t>(i));
    vqalstm::Episode ep = answer_batch(300 + static_cast<std::uint64_t>(i))[0];
    ep.answer.clear();

    const vqalstm::detail::AnswerStepper stepper = vqalstm::detail::make_stepper(m, ep);
    std::vector<decode::BeamItem> all;
    std::vector<int> prefix;
    answer_enumerate(stepper, stepper.initial(), prefix, 0.0, max_len, all);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.tokens < b.tokens;
    });

    const decode::BeamResult beam = vqalstm::answer_beam(m, ep, width, max_len);
    c.expect(beam.items.size() == std::min<std::size_t>(width, all.size()),
             "answer model " + std::to_string(i) + ": beam size mismatch");
    for (std::size_t k = 0; k < beam.items.size() && k < all.size(); ++k) {
      c.expect(beam.items[k].tokens == all[k].tokens,
               "answer model " + std::to_string(i) + ": sequence " + std::to_string(k) +
                   " differs from enumeration");
      const double gap = std::abs(beam.items[k].log_prob - all[k].log_prob);
      worst_gap = std::max(worst_gap, gap);
      c.expect(gap < 1e-5,
               "answer model " + std::to_string(i) + ": log-prob gap " + fmt_sci(gap));
    }

    // the public answering entry point must surface the beam winner
    if (width >= 2) {
      const vqalstm::DecodeResult top =
          vqalstm::answer(m, ep.v_att, ep.v_cap, ep.v_know, ep.question, {max_len, width});
      c.expect(top.tokens == beam.items.front().tokens &&
                   std::abs(top.log_prob - beam.items.front().log_prob) < 1e-9,
               "answer model " + std::to_string(i) + ": answer() disagrees with its own beam");
    }
    ++models;
  }
  c.info(std::to_string(models) + " random models, worst log-prob gap " + fmt_sci(worst_gap));
}

// ------------------------------------------------------- 3. overfit

void criterion_overfit(Check& c) {
  Rng rng(1);
  std::vector<std::vector<std::string>> texts;
  std::vector<std::string> pool;
  for (int i = 0; i < 48; ++i) pool.push_back("w" + std::to_string(i));
  texts.push_back(pool);
  const vqalstm::VqaVocab vocab = vqalstm::VqaVocab::build(texts);

  std::vector<vqalstm::Episode> episodes;
  for (int i = 0; i < 32; ++i) {
    vqalstm::Episode ep;
    ep.v_att = random_vec(rng, 8);
    ep.v_cap = random_vec(rng, 10);
    ep.v_know = random_vec(rng, 12);
    const int qlen = 2 + static_cast<int>(rng.next_below(3));
    const int alen = 1 + static_cast<int>(rng.next_below(2));
    for (int k = 0; k < qlen; ++k)
      ep.question.push_back(2 + static_cast<int>(rng.next_below(48)));
    for (int k = 0; k < alen; ++k)
      ep.answer.push_back(2 + static_cast<int>(rng.next_below(48)));
    episodes.push_back(std::move(ep));
  }

  vqalstm::VqaConfig cfg;
  cfg.embed_dim = 64;
  cfg.epochs = 300;
  cfg.batch_size = 8;
  cfg.lr = 0.1f;
  cfg.dropout = 0.0f;
  cfg.lambda = 0.0f;
  cfg.seed = 1;
  Rng init(1);
  vqalstm::VqaModel m =
      vqalstm::VqaModel::init(vocab, 8, 10, 12, cfg.embed_dim, cfg.modalities, init);
  vqalstm::train_vqa(m, episodes, cfg);

  const double acc = vqalstm::teacher_accuracy(m, episodes);
  c.expect(acc >= 0.95, "teacher-forced accuracy " + fmt(acc * 100, 1) + "% < 95%");
  c.info("32 episodes, vocab 50, d=64: " + fmt(acc * 100, 1) + "% teacher-forced");
}

// ------------------------------------------------ 4. ablation ordering

// 24 episodes over 6 answers; the attribute vector and the question carry
// no signal, and the uninformative modality is the SAME constant vector
// everywhere so it cannot even be memorized. The answer is readable only
// from the caption vector in the first half, only from the knowledge
// vector in the second.
std::vector<vqalstm::Episode> ablation_set(const vqalstm::VqaVocab& vocab) {
  Rng rng(1234);
  const int first_answer = vocab.id_or_unk("a0");
  std::vector<vqalstm::Episode> out;
  for (int i = 0; i < 24; ++i) {
    vqalstm::Episode ep;
    ep.question = {vocab.id_or_unk("what"), vocab.id_or_unk("is"), vocab.id_or_unk("it")};
    const int ans = i % 6;
    ep.answer = {first_answer + ans};
    ep.v_att.assign(6, 0.3f);
    if (i < 12) {
      ep.v_cap = random_vec(rng, 10, 0.3f);
      ep.v_cap[ans] = 2.5f;
      ep.v_know.assign(10, 0.2f);
    } else {
      ep.v_know = random_vec(rng, 10, 0.3f);
      ep.v_know[ans] = 2.5f;
      ep.v_cap.assign(10, 0.2f);
    }
    out.push_back(std::move(ep));
  }
  return out;
}

double ablation_accuracy(const std::vector<vqalstm::Episode>& episodes,
                         const vqalstm::Modalities& mods, std::uint64_t seed) {
  std::vector<std::vector<std::string>> texts{{"what", "is", "it", "a0", "a1", "a2", "a3",
                                               "a4", "a5"}};
  const vqalstm::VqaVocab vocab = vqalstm::VqaVocab::build(texts);
  vqalstm::VqaConfig cfg;
  cfg.embed_dim = 24;
  cfg.epochs = 150;
  cfg.batch_size = 8;
  cfg.lr = 0.1f;
  cfg.dropout = 0.0f;
  cfg.lambda = 0.0f;
  cfg.seed = seed;
  cfg.modalities = mods;
  Rng init(seed);
  vqalstm::VqaModel m = vqalstm::VqaModel::init(vocab, 6, 10, 10, cfg.embed_dim, mods, init);
  vqalstm::train_vqa(m, episodes, cfg);

  int hits = 0;
  for (const vqalstm::Episode& ep : episodes) {
    const vqalstm::DecodeResult dec =
        vqalstm::answer(m, ep.v_att, ep.v_cap, ep.v_know, ep.question, {2, 1});
    if (dec.tokens == ep.answer) ++hits;
  }
  return 100.0 * hits / static_cast<double>(episodes.size());
}

void criterion_ablation(Check& c) {
  std::vector<std::vector<std::string>> texts{{"what", "is", "it", "a0", "a1", "a2", "a3",
                                               "a4", "a5"}};
  const vqalstm::VqaVocab vocab = vqalstm::VqaVocab::build(texts);
  const std::vector<vqalstm::Episode> episodes = ablation_set(vocab);

  int seeds_holding = 0;
  std::string first_summary;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const double att = ablation_accuracy(episodes, vqalstm::Modalities::parse("att"), seed);
    const double att_cap =
        ablation_accuracy(episodes, vqalstm::Modalities::parse("att,cap"), seed);
    const double att_know =
        ablation_accuracy(episodes, vqalstm::Modalities::parse("att,know"), seed);
    const double cap_know =
        ablation_accuracy(episodes, vqalstm::Modalities::parse("cap,know"), seed);
    const double full =
        ablation_accuracy(episodes, vqalstm::Modalities::parse("att,cap,know"), seed);
    const bool holds = full >= att + 10.0 && att_cap > att && att_know > att && cap_know > att;
    if (holds) ++seeds_holding;
    if (seed == 1)
      first_summary = "seed 1: att " + fmt(att, 0) + " / +cap " + fmt(att_cap, 0) +
                      " / +know " + fmt(att_know, 0) + " / cap+know " + fmt(cap_know, 0) +
                      " / all " + fmt(full, 0);
  }
  c.expect(seeds_holding >= 2,
           "ordering held for only " + std::to_string(seeds_holding) + "/3 seeds");
  c.info(first_summary + "; held " + std::to_string(seeds_holding) + "/3 seeds");
}

// ------------------------------------------------- 5. metric hand values

void criterion_metrics(Check& c) {
  const evalkit::TaxonomyTree tax = evalkit::TaxonomyTree::from_edges(
      {{"animal", "root"}, {"dog", "animal"}, {"cat", "animal"}, {"plant", "root"},
       {"tree", "plant"}});

  const double wup = evalkit::wup_similarity(tax, "dog", "cat");
  c.expect(std::abs(wup - 0.6667) < 1e-4, "wup(dog,cat) = " + fmt(wup, 5));

  const double w9 = evalkit::wups_score({"dog"}, {"cat"}, tax, 0.9);
  const double w0 = evalkit::wups_score({"dog"}, {"cat"}, tax, 0.0);
  c.expect(std::abs(w9 - 6.67) < 0.01, "single-pair score at 0.9 = " + fmt(w9, 3));
  c.expect(std::abs(w0 - 66.67) < 0.01, "single-pair score at 0.0 = " + fmt(w0, 3));

  const std::vector<std::string> words{"dog",  "cat",   "animal", "plant",
                                       "tree", "root",  "sofa",   "dog"};
  Rng rng(71);
  bool dominated = true;
  for (int set = 0; set < 1000; ++set) {
    const int n = 1 + static_cast<int>(rng.next_below(6));
    std::vector<std::string> preds, truths;
    for (int i = 0; i < n; ++i) {
      preds.push_back(words[rng.next_below(words.size())]);
      truths.push_back(words[rng.next_below(words.size())]);
    }
    const double lo = evalkit::wups_score(preds, truths, tax, 0.9);
    const double hi = evalkit::wups_score(preds, truths, tax, 0.0);
    if (hi < lo - 1e-9) dominated = false;
  }
  c.expect(dominated, "a threshold-0.0 score fell below its 0.9 counterpart");

  const std::vector<double> expected{0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0};
  for (int k = 0; k <= 4; ++k) {
    std::vector<std::string> humans;
    for (int i = 0; i < k; ++i) humans.push_back("yes");
    while (humans.size() < 5) humans.push_back("maybe" + std::to_string(humans.size()));
    const double got = evalkit::vqa_consensus("yes", humans);
    c.expect(got == expected[static_cast<std::size_t>(k)],
             "consensus(" + std::to_string(k) + " matches) = " + fmt(got, 4));
  }
  c.info("wup " + fmt(wup, 4) + ", pair scores " + fmt(w9, 2) + "/" + fmt(w0, 2) +
         ", 1000 random sets dominated");
}

// --------------------------------------------- 6. knowledge wire contract

class ScriptedEndpoint {
 public:
  ScriptedEndpoint() {
    server_.Get("/sparql", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests;
      if (fail_next > 0) {
        --fail_next;
        res.status = 500;
        res.set_content("busy", "text/plain");
        return;
      }
      const std::string resource = extract_resource(req.get_param_value("query"));
      if (bodies_.count(resource)) {
        res.set_content(bodies_.at(resource), "application/sparql-results+json");
        return;
      }
      nlohmann::json body;
      body["head"]["vars"] = {"comment"};
      body["results"]["bindings"] = nlohmann::json::array();
      if (comments_.count(resource)) {
        nlohmann::json binding;
        binding["comment"]["type"] = "literal";
        binding["comment"]["xml:lang"] = "en";
        binding["comment"]["value"] = comments_.at(resource);
        body["results"]["bindings"].push_back(binding);
      }
      res.set_content(body.dump(), "application/sparql-results+json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw IoError("acceptance: cannot bind the scripted endpoint");
    thread_ = std::thread([this]() { server_.listen_after_bind(); });
    while (!server_.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }

  ~ScriptedEndpoint() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/sparql"; }
  void serve(const std::string& r, const std::string& comment) { comments_[r] = comment; }
  void serve_body(const std::string& r, const std::string& raw) { bodies_[r] = raw; }

  std::atomic<int> requests{0};
  std::atomic<int> fail_next{0};

 private:
  static std::string extract_resource(const std::string& query) {
    const std::string prefix = "<http://dbpedia.org/resource/";
    const auto start = query.find(prefix);
    if (start == std::string::npos) return "";
    const auto stop = query.find('>', start);
    if (stop == std::string::npos) return "";
    return query.substr(start + prefix.size(), stop - start - prefix.size());
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::map<std::string, std::string> comments_;
  std::map<std::string, std::string> bodies_;
};

void criterion_knowledge_wire(Check& c) {
  const std::string golden =
      slurp(fs::path(VQAKIT_REPO_DIR) / "fixtures" / "sparql" / "dog.rq");
  c.expect(knowledge::build_comment_query("dog").text == golden,
           "rendered dog query differs from the golden file");

  ScriptedEndpoint mock;
  mock.serve("Dog", "the dog is a domesticated canid");
  mock.serve("Cat", "the cat is a small feline");
  mock.serve_body("Zzz", "{not json");

  knowledge::FetchPolicy policy;
  policy.now = []() { return std::string("2026-01-01T00:00:00Z"); };
  policy.sleep_ms = [](int) {};

  const fs::path cache_path = scratch() / "wire_cache.jsonl";
  fs::remove(cache_path);
  knowledge::KbCache cache(cache_path);

  // success
  const knowledge::KnowledgePassage dog =
      knowledge::fetch_comment(mock.url(), knowledge::build_comment_query("dog"), cache, policy);
  c.expect(!dog.not_found && dog.comment == "the dog is a domesticated canid",
           "successful fetch returned the wrong passage");

  // no binding -> remembered as absent
  const knowledge::KnowledgePassage unicorn = knowledge::fetch_comment(
      mock.url(), knowledge::build_comment_query("unicorn"), cache, policy);
  c.expect(unicorn.not_found && unicorn.comment.empty(), "missing resource not flagged");

  // two 500s, then success, within the retry budget
  mock.fail_next = 2;
  const int before_retry = mock.requests;
  const knowledge::KnowledgePassage cat =
      knowledge::fetch_comment(mock.url(), knowledge::build_comment_query("cat"), cache, policy);
  c.expect(!cat.not_found && cat.comment == "the cat is a small feline",
           "retry did not recover from transient failures");
  c.expect(mock.requests - before_retry == 3,
           "expected 3 attempts, saw " + std::to_string(mock.requests - before_retry));

  // malformed body is a loud failure
  bool malformed_thrown = false;
  try {
    knowledge::fetch_comment(mock.url(), knowledge::build_comment_query("zzz"), cache, policy);
  } catch (const knowledge::MalformedResponse&) {
    malformed_thrown = true;
  }
  c.expect(malformed_thrown, "malformed body did not raise");

  // a warm cache answers everything without touching the wire
  const int before_warm = mock.requests;
  knowledge::fetch_terms(mock.url(), {"dog", "cat", "unicorn"}, cache, policy);
  c.expect(mock.requests == before_warm,
           "warm cache still issued " + std::to_string(mock.requests - before_warm) +
               " requests");
  c.info("golden query byte-equal, retries and cache behave, warm rerun = 0 requests");
}

// ------------------------------------------------ 7. pipeline determinism

pipeline::PipelineConfig determinism_world() {
  const fs::path root = scratch() / "determinism";
  const fs::path data = root / "data";
  fs::create_directories(data);

  const std::vector<std::string> attrs{"red", "blue", "dog", "cat"};
  write_text(data / "attrs.txt", "red\nblue\ndog\ncat\n");

  const std::vector<std::pair<int, int>> img_attrs{{0, 2}, {1, 3}, {0, 3}};
  Rng rng(900);
  numkit::TensorFile features;
  for (std::size_t i = 0; i < img_attrs.size(); ++i) {
    Tensor t({2, 6});
    for (float& v : t.span()) v = 0.05f * rng.uniform(-1.0f, 1.0f);
    t.span()[static_cast<std::size_t>(img_attrs[i].first)] += 2.0f;
    t.span()[6 + static_cast<std::size_t>(img_attrs[i].second)] += 2.0f;
    features.tensors["img" + std::to_string(i + 1)] = t;
  }
  features.save(data / "features.bin");

  std::string labels, caps;
  const std::vector<std::string> cap_text{"a red dog", "a blue cat", "a red cat"};
  for (std::size_t i = 0; i < img_attrs.size(); ++i) {
    nlohmann::json lj;
    lj["image_id"] = "img" + std::to_string(i + 1);
    lj["attributes"] = {attrs[img_attrs[i].first], attrs[img_attrs[i].second]};
    labels += lj.dump() + "\n";
    nlohmann::json cj;
    cj["image_id"] = "img" + std::to_string(i + 1);
    cj["caption"] = cap_text[i];
    caps += cj.dump() + "\n";
  }
  write_text(data / "attr_labels.jsonl", labels);
  write_text(data / "captions.jsonl", caps);
  write_text(data / "corpus.txt",
             "red is a warm color\nblue is a cool color\na dog is a loyal animal\n"
             "a cat is a quiet animal\n");

  std::string ds;
  auto rec = [](const std::string& id, const std::string& q, const std::string& a) {
    nlohmann::json j;
    j["image_id"] = id;
    j["question"] = q;
    j["answers"] = {a};
    return j.dump() + "\n";
  };
  ds += rec("img1", "what color is the dog", "red");
  ds += rec("img1", "what animal is this", "dog");
  ds += rec("img2", "what color is the cat", "blue");
  ds += rec("img3", "what color is the cat", "red");
  write_text(data / "train.jsonl", ds);

  {
    knowledge::KbCache cache(data / "cache.jsonl");
    const std::vector<std::string> comments{"red is a warm color", "blue is a cool color",
                                            "a dog is a loyal animal",
                                            "a cat is a quiet animal"};
    for (std::size_t i = 0; i < attrs.size(); ++i) {
      knowledge::KnowledgePassage p;
      p.term = attrs[i];
      p.comment = comments[i];
      p.not_found = false;
      p.fetched_at = "2026-01-01T00:00:00Z";
      cache.put("http://mock.test", p);
    }
  }

  nlohmann::json cj;
  cj["dataset"] = (data / "train.jsonl").string();
  cj["features"] = (data / "features.bin").string();
  cj["attr_vocab"] = (data / "attrs.txt").string();
  cj["attr_labels"] = (data / "attr_labels.jsonl").string();
  cj["captions"] = (data / "captions.jsonl").string();
  cj["corpus"] = (data / "corpus.txt").string();
  cj["taxonomy"] = (fs::path(VQAKIT_REPO_DIR) / "fixtures" / "taxonomy.tsv").string();
  cj["work_dir"] = (root / "work").string();
  cj["kb_cache"] = (data / "cache.jsonl").string();
  cj["endpoint"] = "";
  cj["seed"] = 21;
  cj["embed_dim"] = 16;
  cj["caption_hidden"] = 10;
  cj["caption_embed"] = 8;
  cj["doc2vec_dim"] = 7;
  cj["top_k_terms"] = 2;
  cj["doc2vec_window"] = 2;
  cj["answer_max_len"] = 3;
  cj["attr_epochs"] = 15;
  cj["caption_epochs"] = 20;
  cj["doc2vec_epochs"] = 6;
  cj["vqa_epochs"] = 40;
  cj["batch_size"] = 4;
  cj["lr"] = 0.05;
  cj["attr_lr"] = 0.1;
  cj["dropout"] = 0.5;  // active dropout makes determinism a real claim
  write_text(root / "config.json", cj.dump());
  return pipeline::load_config(root / "config.json");
}

std::map<std::string, std::string> pipeline_artifacts(const pipeline::PipelineConfig& cfg) {
  pipeline::prepare(cfg, true);
  pipeline::train_attr_stage(cfg, true);
  pipeline::train_captioner_stage(cfg, true);
  pipeline::train_doc2vec_stage(cfg, true);
  pipeline::precompute_stage(cfg, true);
  pipeline::train_vqa_stage(cfg, true);
  pipeline::eval_stage(cfg, true);

  const pipeline::Artifacts art(cfg);
  std::map<std::string, std::string> bytes;
  for (const fs::path& p : {art.attr_model, art.caption_model, art.doc2vec_model,
                            art.precomputed, art.vqa_model, art.report, art.prepared_train,
                            art.prepared_eval, art.vqa_vocab, art.stats})
    bytes[p.filename().string()] = slurp(p);
  const fs::path sidecar = art.doc2vec_model.string() + ".vocab";
  bytes[sidecar.filename().string()] = slurp(sidecar);
  for (const auto& e : fs::directory_iterator(art.vqa_epoch_dir))
    bytes["vqa_epochs/" + e.path().filename().string()] = slurp(e.path());
  return bytes;
}

void criterion_determinism(Check& c) {
  const pipeline::PipelineConfig cfg = determinism_world();

  const std::map<std::string, std::string> first = pipeline_artifacts(cfg);
  fs::remove_all(cfg.work_dir);
  const std::map<std::string, std::string> second = pipeline_artifacts(cfg);

  c.expect(first.size() == second.size(),
           "runs produced different artifact sets (" + std::to_string(first.size()) + " vs " +
               std::to_string(second.size()) + ")");
  std::size_t identical = 0;
  for (const auto& [name, blob] : first) {
    const auto it = second.find(name);
    if (it == second.end()) {
      c.expect(false, "second run is missing " + name);
      continue;
    }
    if (it->second == blob)
      ++identical;
    else
      c.expect(false, name + " differs between runs");
  }
  c.info(std::to_string(identical) + " artifacts bit-identical across two runs");
}

// ------------------------------------- 8. paragraph embedding separation

std::vector<std::string> topic_corpus(int docs_per_topic, int doc_len, std::uint64_t seed) {
  const std::vector<std::string> art{"red",    "green", "blue",  "paint",
                                     "wall",   "brush", "color", "hue"};
  const std::vector<std::string> car{"engine", "wheel", "brake", "gear",
                                     "road",   "fuel",  "motor", "drive"};
  Rng rng(seed);
  std::vector<std::string> docs;
  for (int topic = 0; topic < 2; ++topic) {
    const auto& pool = topic == 0 ? art : car;
    for (int i = 0; i < docs_per_topic; ++i) {
      const std::size_t f1 = rng.next_below(pool.size());
      const std::size_t f2 = rng.next_below(pool.size());
      std::string doc;
      for (int w = 0; w < doc_len; ++w) {
        if (w) doc += ' ';
        if (rng.next_below(100) < 85)
          doc += pool[rng.next_below(2) ? f1 : f2];
        else
          doc += pool[rng.next_below(pool.size())];
      }
      docs.push_back(doc);
    }
  }
  return docs;
}

double topic_separation(const Tensor& w_doc, int docs_per_topic) {
  double within = 0.0, across = 0.0;
  std::size_t nw = 0, na = 0;
  const int n = static_cast<int>(w_doc.rows());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double cv = doc2vec::cosine(w_doc.row(i), w_doc.row(j));
      if ((i < docs_per_topic) == (j < docs_per_topic)) {
        within += cv;
        ++nw;
      } else {
        across += cv;
        ++na;
      }
    }
  return within / static_cast<double>(nw) - across / static_cast<double>(na);
}

void criterion_doc2vec_separation(Check& c) {
  const std::vector<std::string> docs = topic_corpus(20, 24, 77);
  int hits = 0;
  double first_ratio = 0.0, first_sep = 0.0;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    doc2vec::Doc2VecConfig cfg;
    cfg.dim = 16;
    cfg.window = 1;
    cfg.epochs = 900;
    cfg.lr = 0.3f;
    cfg.lr_end = 0.01f;
    cfg.seed = seed;
    const doc2vec::Doc2VecTrainResult r = doc2vec::train_doc2vec(docs, cfg);
    const double sep = topic_separation(r.model.w_doc, 20);
    if (sep >= 0.2) ++hits;
    if (seed == 1) {
      first_ratio = r.epoch_losses.back() / r.epoch_losses.front();
      first_sep = sep;
      c.expect(r.epoch_losses.back() <= 0.5 * r.epoch_losses.front(),
               "loss only fell to " + fmt(first_ratio, 3) + " of its start");
    }
  }
  c.expect(hits >= 2, "separation >= 0.2 in only " + std::to_string(hits) + "/3 seeds");
  c.info("separation " + fmt(first_sep, 2) + " (seed 1), loss ratio " + fmt(first_ratio, 3) +
         ", " + std::to_string(hits) + "/3 seeds apart");
}

// --------------------------------------------- 9. checkpoint round trips

void criterion_roundtrip(Check& c) {
  const fs::path dir = scratch() / "roundtrip";
  fs::create_directories(dir);
  const auto roundtrip = [&](const std::string& name, auto model, auto loader) {
    const fs::path p1 = dir / (name + "_1.bin");
    const fs::path p2 = dir / (name + "_2.bin");
    model.save(p1);
    const auto reloaded = loader(p1);
    reloaded.save(p2);
    c.expect(slurp(p1) == slurp(p2), name + " round trip changed bytes");
  };

  Rng r1(5);
  roundtrip("attr", attrnet::AttrModel::init(4, 5, attrnet::AttrConfig{}, r1),
            [](const fs::path& p) { return attrnet::AttrModel::load(p); });
  roundtrip("caption", caption_model(6),
            [](const fs::path& p) { return captioner::CaptionModel::load(p); });
  doc2vec::Doc2VecConfig dcfg;
  dcfg.dim = 4;
  dcfg.epochs = 1;
  roundtrip("doc2vec", doc2vec::train_doc2vec({"a b c", "c b a"}, dcfg).model,
            [](const fs::path& p) { return doc2vec::Doc2VecModel::load(p); });
  c.expect(slurp(dir / "doc2vec_1.bin.vocab") == slurp(dir / "doc2vec_2.bin.vocab"),
           "doc2vec vocabulary sidecar changed in the round trip");
  roundtrip("answer", answer_model(7),
            [](const fs::path& p) { return vqalstm::VqaModel::load(p); });
  c.info("attr, caption, doc2vec, answer models byte-stable");
}

}  // namespace

int main() {
  struct Row {
    int id;
    const char* name;
    void (*fn)(Check&);
    double budget_s;  // 0 = no runtime bound
  };
  const Row rows[] = {
      {1, "gradient fidelity", criterion_gradients, 120.0},
      {2, "beam search equals exhaustive search", criterion_beam_oracle, 0.0},
      {3, "answer model overfits synthetic episodes", criterion_overfit, 300.0},
      {4, "modal ablation ordering", criterion_ablation, 0.0},
      {5, "metric hand values", criterion_metrics, 0.0},
      {6, "knowledge wire contract", criterion_knowledge_wire, 0.0},
      {7, "pipeline determinism", criterion_determinism, 0.0},
      {8, "paragraph embedding separation", criterion_doc2vec_separation, 0.0},
      {9, "checkpoint round trips", criterion_roundtrip, 0.0},
  };

  int failures = 0;
  for (const Row& row : rows) {
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      row.fn(c);
    } catch (const std::exception& e) {
      c.ok = false;
      c.note = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (row.budget_s > 0.0 && secs > row.budget_s) {
      c.ok = false;
      c.note += (c.note.empty() ? "" : "; ") + ("over the " + fmt(row.budget_s, 0) +
                                                "s budget");
    }
    if (!c.ok) ++failures;
    std::printf("[%s] %d. %s: %s (%.1fs)\n", c.ok ? "PASS" : "FAIL", row.id, row.name,
                c.note.c_str(), secs);
    std::fflush(stdout);
  }
  if (failures == 0)
    std::printf("all %zu checks passed\n", std::size(rows));
  else
    std::printf("%d of %zu checks FAILED\n", failures, std::size(rows));
  return failures;
}
