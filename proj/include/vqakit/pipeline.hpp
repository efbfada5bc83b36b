#pragma once

// End-to-end orchestration: a JSON config names the inputs, a work
// directory collects every artifact, and each stage reads its
// prerequisites from disk so stages can run (and re-run) independently.
// Stage seeds derive from one master seed, making whole-pipeline runs
// bit-reproducible.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqakit/attrnet.hpp"
#include "vqakit/captioner.hpp"
#include "vqakit/doc2vec.hpp"
#include "vqakit/evalkit.hpp"
#include "vqakit/knowledge.hpp"
#include "vqakit/text.hpp"
#include "vqakit/vqalstm.hpp"

namespace vqakit::pipeline {

using numkit::derive_seed;
using numkit::fnv1a64;
using numkit::Rng;
using numkit::Tensor;
using numkit::TensorFile;

struct PipelineConfig {
  // inputs
  std::filesystem::path dataset;       // training questions (JSONL)
  std::filesystem::path eval_dataset;  // optional; falls back to `dataset`
  std::filesystem::path features;      // named-tensor container: image_id -> {R, D}
  std::filesystem::path attr_vocab;
  std::filesystem::path attr_labels;   // JSONL: image_id + attribute list
  std::filesystem::path captions;      // JSONL: image_id + caption text
  std::filesystem::path corpus;        // one paragraph per line
  std::filesystem::path taxonomy;      // child<TAB>parent lines

  // outputs / caches
  std::filesystem::path work_dir = "out";
  std::filesystem::path kb_cache;  // defaults to work_dir/kb_cache.jsonl

  std::string endpoint;  // SPARQL endpoint; empty = cache-only
  std::uint64_t seed = 1;
  vqalstm::Modalities modalities;

  // model dims
  int embed_dim = 256;        // answering model d_e = d_h
  int caption_hidden = 512;   // caption encoder width = v_cap length
  int caption_embed = 256;
  int doc2vec_dim = 500;      // v_know length
  int attr_hidden = 0;
  int top_k_terms = 5;
  int doc2vec_window = 4;

  // decoding
  int answer_max_len = 8;
  int beam_width = 1;

  // optimization
  int attr_epochs = 40;
  int caption_epochs = 60;
  int doc2vec_epochs = 50;
  int vqa_epochs = 100;
  int batch_size = 100;
  float lr = 0.001f;
  float attr_lr = 0.01f;
  float caption_lr = 0.01f;
  float doc2vec_lr = 0.05f;
  float doc2vec_lr_end = -1.0f;
  float momentum = 0.9f;
  float clip_norm = 5.0f;
  float dropout = 0.5f;
  float lambda = 1e-5f;

  std::vector<std::string> question_prefixes{"what color", "what colour", "what kind",
                                             "what is",    "what",        "how many",
                                             "where",      "who",         "why",
                                             "others"};

  std::filesystem::path kb_cache_path() const {
    return kb_cache.empty() ? work_dir / "kb_cache.jsonl" : kb_cache;
  }
};

namespace detail {

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset.string();
  j["eval_dataset"] = c.eval_dataset.string();
  j["features"] = c.features.string();
  j["attr_vocab"] = c.attr_vocab.string();
  j["attr_labels"] = c.attr_labels.string();
  j["captions"] = c.captions.string();
  j["corpus"] = c.corpus.string();
  j["taxonomy"] = c.taxonomy.string();
  j["work_dir"] = c.work_dir.string();
  j["kb_cache"] = c.kb_cache.string();
  j["endpoint"] = c.endpoint;
  j["seed"] = c.seed;
  j["modalities"] = c.modalities.to_string();
  j["embed_dim"] = c.embed_dim;
  j["caption_hidden"] = c.caption_hidden;
  j["caption_embed"] = c.caption_embed;
  j["doc2vec_dim"] = c.doc2vec_dim;
  j["attr_hidden"] = c.attr_hidden;
  j["top_k_terms"] = c.top_k_terms;
  j["doc2vec_window"] = c.doc2vec_window;
  j["answer_max_len"] = c.answer_max_len;
  j["beam_width"] = c.beam_width;
  j["attr_epochs"] = c.attr_epochs;
  j["caption_epochs"] = c.caption_epochs;
  j["doc2vec_epochs"] = c.doc2vec_epochs;
  j["vqa_epochs"] = c.vqa_epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["attr_lr"] = c.attr_lr;
  j["caption_lr"] = c.caption_lr;
  j["doc2vec_lr"] = c.doc2vec_lr;
  j["doc2vec_lr_end"] = c.doc2vec_lr_end;
  j["momentum"] = c.momentum;
  j["clip_norm"] = c.clip_norm;
  j["dropout"] = c.dropout;
  j["lambda"] = c.lambda;
  j["question_prefixes"] = c.question_prefixes;
  return j;
}

}  // namespace detail

// Hash of the effective configuration (CLI overrides applied), stamped into
// every artifact so mismatched stage outputs are detectable.
inline std::string config_hash(const PipelineConfig& c) {
  const std::uint64_t h = fnv1a64(detail::config_to_json(c).dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot read " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ContractViolation("config: " + path.string() + " is not valid JSON");
  if (!j.is_object()) throw ContractViolation("config: " + path.string() + " must be a JSON object");

  PipelineConfig c;
  const auto base = path.parent_path();
  // relative paths in the file are taken relative to the file itself
  const auto as_path = [&](const nlohmann::json& v, const char* key) {
    if (!v.is_string())
      throw ContractViolation(std::string("config: '") + key + "' must be a string");
    const std::filesystem::path p = v.get<std::string>();
    if (p.empty() || p.is_absolute()) return p;
    return base / p;
  };

  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "dataset") c.dataset = as_path(value, "dataset");
      else if (key == "eval_dataset") c.eval_dataset = as_path(value, "eval_dataset");
      else if (key == "features") c.features = as_path(value, "features");
      else if (key == "attr_vocab") c.attr_vocab = as_path(value, "attr_vocab");
      else if (key == "attr_labels") c.attr_labels = as_path(value, "attr_labels");
      else if (key == "captions") c.captions = as_path(value, "captions");
      else if (key == "corpus") c.corpus = as_path(value, "corpus");
      else if (key == "taxonomy") c.taxonomy = as_path(value, "taxonomy");
      else if (key == "work_dir") c.work_dir = as_path(value, "work_dir");
      else if (key == "kb_cache") c.kb_cache = as_path(value, "kb_cache");
      else if (key == "endpoint") c.endpoint = value.get<std::string>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "modalities") c.modalities = vqalstm::Modalities::parse(value.get<std::string>());
      else if (key == "embed_dim") c.embed_dim = value.get<int>();
      else if (key == "caption_hidden") c.caption_hidden = value.get<int>();
      else if (key == "caption_embed") c.caption_embed = value.get<int>();
      else if (key == "doc2vec_dim") c.doc2vec_dim = value.get<int>();
      else if (key == "attr_hidden") c.attr_hidden = value.get<int>();
      else if (key == "top_k_terms") c.top_k_terms = value.get<int>();
      else if (key == "doc2vec_window") c.doc2vec_window = value.get<int>();
      else if (key == "answer_max_len") c.answer_max_len = value.get<int>();
      else if (key == "beam_width") c.beam_width = value.get<int>();
      else if (key == "attr_epochs") c.attr_epochs = value.get<int>();
      else if (key == "caption_epochs") c.caption_epochs = value.get<int>();
      else if (key == "doc2vec_epochs") c.doc2vec_epochs = value.get<int>();
      else if (key == "vqa_epochs") c.vqa_epochs = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "lr") c.lr = value.get<float>();
      else if (key == "attr_lr") c.attr_lr = value.get<float>();
      else if (key == "caption_lr") c.caption_lr = value.get<float>();
      else if (key == "doc2vec_lr") c.doc2vec_lr = value.get<float>();
      else if (key == "doc2vec_lr_end") c.doc2vec_lr_end = value.get<float>();
      else if (key == "momentum") c.momentum = value.get<float>();
      else if (key == "clip_norm") c.clip_norm = value.get<float>();
      else if (key == "dropout") c.dropout = value.get<float>();
      else if (key == "lambda") c.lambda = value.get<float>();
      else if (key == "question_prefixes") c.question_prefixes = value.get<std::vector<std::string>>();
      else throw ContractViolation("config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ContractViolation("config: bad value for '" + key + "'");
    }
  }

  if (c.dataset.empty()) throw ContractViolation("config: 'dataset' is required");
  if (c.embed_dim <= 0 || c.top_k_terms <= 0 || c.answer_max_len <= 0 || c.batch_size <= 0)
    throw ContractViolation("config: dimensions and sizes must be positive");
  if (std::find(c.question_prefixes.begin(), c.question_prefixes.end(), "others") ==
      c.question_prefixes.end())
    throw ContractViolation("config: 'question_prefixes' must include \"others\"");
  if (c.eval_dataset.empty()) c.eval_dataset = c.dataset;
  return c;
}

// Everything a pipeline run writes, addressed relative to work_dir.
struct Artifacts {
  std::filesystem::path vqa_vocab, prepared_train, prepared_eval, stats;
  std::filesystem::path attr_model, caption_model, doc2vec_model;
  std::filesystem::path precomputed, vqa_epoch_dir, vqa_model, report;

  explicit Artifacts(const PipelineConfig& c)
      : vqa_vocab(c.work_dir / "vqa_vocab.txt"),
        prepared_train(c.work_dir / "prepared_train.jsonl"),
        prepared_eval(c.work_dir / "prepared_eval.jsonl"),
        stats(c.work_dir / "prepare_stats.json"),
        attr_model(c.work_dir / "attr_model.bin"),
        caption_model(c.work_dir / "caption_model.bin"),
        doc2vec_model(c.work_dir / "doc2vec_model.bin"),
        precomputed(c.work_dir / "precomputed.bin"),
        vqa_epoch_dir(c.work_dir / "vqa_epochs"),
        vqa_model(c.work_dir / "vqa_model.bin"),
        report(c.work_dir / "report.txt") {}
};

struct DatasetRecord {
  std::string image_id;
  std::string question;
  std::vector<std::string> answers;  // 1 answer or a 10-judge panel
  std::string type;                  // optional
};

inline std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("dataset: cannot read " + path.string());
  std::vector<DatasetRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "dataset: " + path.string() + " line " + std::to_string(line_no);
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw ContractViolation(where + ": not a JSON object");
    DatasetRecord r;
    try {
      r.image_id = j.at("image_id").get<std::string>();
      r.question = j.at("question").get<std::string>();
      r.answers = j.at("answers").get<std::vector<std::string>>();
      if (j.count("type")) r.type = j.at("type").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ContractViolation(where + ": " + e.what());
    }
    for (const auto& [key, value] : j.items())
      if (key != "image_id" && key != "question" && key != "answers" && key != "type")
        throw ContractViolation(where + ": unknown field '" + key + "'");
    if (r.image_id.empty()) throw ContractViolation(where + ": empty image_id");
    if (r.answers.empty()) throw ContractViolation(where + ": record needs at least one answer");
    records.push_back(std::move(r));
  }
  return records;
}

struct PreparedRecord {
  DatasetRecord raw;
  std::vector<int> question_ids;
  std::vector<std::vector<int>> answer_ids;
  int train_answer = 0;  // index of the consensus pick among answers
};

namespace detail {

inline void require_artifact(const std::filesystem::path& p, const std::string& what,
                             const std::string& stage) {
  if (!std::filesystem::exists(p))
    throw IoError(what + " not found at " + p.string() + "; run '" + stage + "' first");
}

inline void log(bool quiet, const std::string& msg) {
  if (!quiet) std::cerr << msg << '\n';
}

// most frequent normalized answer, earliest on ties
inline int consensus_pick(const std::vector<std::string>& answers) {
  std::map<std::string, int> counts;
  for (const std::string& a : answers) ++counts[evalkit::normalize_answer(a)];
  int best = 0, best_count = 0;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    const int c = counts.at(evalkit::normalize_answer(answers[i]));
    if (c > best_count) {
      best_count = c;
      best = static_cast<int>(i);
    }
  }
  return best;
}

inline void annotate_artifact(const std::filesystem::path& p, const std::string& hash,
                              std::uint64_t seed) {
  TensorFile f = TensorFile::load(p);
  f.meta["config_hash"] = hash;
  f.meta["seed"] = std::to_string(seed);
  f.save(p);
}

inline void write_prepared(const std::filesystem::path& path, const nlohmann::json& header,
                           const std::vector<PreparedRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("prepare: cannot write " + path.string());
  out << header.dump() << '\n';
  for (const PreparedRecord& r : records) {
    nlohmann::json j;
    j["image_id"] = r.raw.image_id;
    j["question"] = r.raw.question;
    j["answers"] = r.raw.answers;
    if (!r.raw.type.empty()) j["type"] = r.raw.type;
    j["question_ids"] = r.question_ids;
    j["answer_ids"] = r.answer_ids;
    j["train_answer"] = r.train_answer;
    out << j.dump() << '\n';
  }
}

inline std::pair<nlohmann::json, std::vector<PreparedRecord>> read_prepared(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("prepared dataset: cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("prepared dataset: " + path.string() + " is empty");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object() || header.value("kind", "") != "prepared")
    throw IoError("prepared dataset: " + path.string() + " has no valid header line");

  std::vector<PreparedRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw IoError("prepared dataset: " + path.string() + " line " + std::to_string(line_no) +
                    ": bad JSON");
    PreparedRecord r;
    r.raw.image_id = j.at("image_id").get<std::string>();
    r.raw.question = j.at("question").get<std::string>();
    r.raw.answers = j.at("answers").get<std::vector<std::string>>();
    r.raw.type = j.value("type", "");
    r.question_ids = j.at("question_ids").get<std::vector<int>>();
    r.answer_ids = j.at("answer_ids").get<std::vector<std::vector<int>>>();
    r.train_answer = j.at("train_answer").get<int>();
    records.push_back(std::move(r));
  }
  return {header, records};
}

struct TokenizedSplit {
  std::vector<PreparedRecord> records;
  std::vector<std::string> skipped;     // unresolvable image ids
  std::size_t degenerate = 0;          // empty question or all-empty answers
  std::size_t tokens = 0, unk_tokens = 0;
};

inline TokenizedSplit tokenize_split(const std::vector<DatasetRecord>& raw,
                                     const std::set<std::string>& known_images,
                                     const vqalstm::VqaVocab& vocab) {
  TokenizedSplit split;
  for (const DatasetRecord& rec : raw) {
    if (known_images.count(rec.image_id) == 0) {
      split.skipped.push_back(rec.image_id);
      continue;
    }
    PreparedRecord p;
    p.raw = rec;
    for (const std::string& tok : text::tokenize(rec.question)) {
      const int id = vocab.id_or_unk(tok);
      ++split.tokens;
      if (id == vocab.unk_id()) ++split.unk_tokens;
      p.question_ids.push_back(id);
    }
    bool any_answer = false;
    for (const std::string& ans : rec.answers) {
      std::vector<int> ids;
      for (const std::string& tok : text::tokenize(ans)) {
        const int id = vocab.id_or_unk(tok);
        ++split.tokens;
        if (id == vocab.unk_id()) ++split.unk_tokens;
        ids.push_back(id);
      }
      any_answer = any_answer || !ids.empty();
      p.answer_ids.push_back(std::move(ids));
    }
    if (p.question_ids.empty() || !any_answer) {
      ++split.degenerate;
      continue;
    }
    p.train_answer = consensus_pick(rec.answers);
    if (p.answer_ids[p.train_answer].empty())
      for (std::size_t i = 0; i < p.answer_ids.size(); ++i)
        if (!p.answer_ids[i].empty()) {
          p.train_answer = static_cast<int>(i);
          break;
        }
    split.records.push_back(std::move(p));
  }
  return split;
}

}  // namespace detail

struct PrepareStats {
  std::size_t train_records = 0, eval_records = 0;
  std::size_t train_skipped = 0, eval_skipped = 0, degenerate = 0;
  double train_unk_rate = 0.0, eval_unk_rate = 0.0;
  int vocab_size = 0;
};

// Tokenize both splits with the shared tokenizer, build the joint
// question/answer vocabulary from the training split, and link records to
// region features (unresolvable image ids are listed and skipped).
inline PrepareStats prepare(const PipelineConfig& cfg, bool quiet = false) {
  detail::require_artifact(cfg.dataset, "dataset", "(provide input files)");
  detail::require_artifact(cfg.features, "feature container", "(provide input files)");
  const Artifacts art(cfg);
  std::filesystem::create_directories(cfg.work_dir);

  const std::vector<DatasetRecord> train_raw = load_dataset(cfg.dataset);
  const std::vector<DatasetRecord> eval_raw = load_dataset(cfg.eval_dataset);
  VQAKIT_REQUIRE(!train_raw.empty(), "prepare: training dataset has no records");

  const TensorFile features = TensorFile::load(cfg.features);
  std::set<std::string> known;
  for (const auto& [name, t] : features.tensors) known.insert(name);

  // vocabulary comes from the training split only
  std::vector<std::vector<std::string>> texts;
  for (const DatasetRecord& r : train_raw) {
    if (known.count(r.image_id) == 0) continue;
    texts.push_back(text::tokenize(r.question));
    for (const std::string& a : r.answers) texts.push_back(text::tokenize(a));
  }
  VQAKIT_REQUIRE(!texts.empty(), "prepare: no training record has resolvable features");
  const vqalstm::VqaVocab vocab = vqalstm::VqaVocab::build(texts);
  vocab.save(art.vqa_vocab);

  detail::TokenizedSplit train = detail::tokenize_split(train_raw, known, vocab);
  detail::TokenizedSplit eval = detail::tokenize_split(eval_raw, known, vocab);
  VQAKIT_REQUIRE(!train.records.empty(), "prepare: every training record was skipped");

  for (const std::string& id : train.skipped)
    detail::log(quiet, "prepare: no features for image '" + id + "', record skipped");
  for (const std::string& id : eval.skipped)
    detail::log(quiet, "prepare: no features for eval image '" + id + "', record skipped");

  PrepareStats stats;
  stats.train_records = train.records.size();
  stats.eval_records = eval.records.size();
  stats.train_skipped = train.skipped.size();
  stats.eval_skipped = eval.skipped.size();
  stats.degenerate = train.degenerate + eval.degenerate;
  stats.train_unk_rate =
      train.tokens == 0 ? 0.0 : static_cast<double>(train.unk_tokens) / train.tokens;
  stats.eval_unk_rate = eval.tokens == 0 ? 0.0 : static_cast<double>(eval.unk_tokens) / eval.tokens;
  stats.vocab_size = vocab.size();

  const std::string hash = config_hash(cfg);
  nlohmann::json header;
  header["kind"] = "prepared";
  header["config_hash"] = hash;
  header["seed"] = cfg.seed;
  header["vocab_size"] = stats.vocab_size;
  header["unk_rate"] = stats.train_unk_rate;
  detail::write_prepared(art.prepared_train, header, train.records);
  header["unk_rate"] = stats.eval_unk_rate;
  detail::write_prepared(art.prepared_eval, header, eval.records);

  nlohmann::json sj;
  sj["config_hash"] = hash;
  sj["seed"] = cfg.seed;
  sj["train_records"] = stats.train_records;
  sj["eval_records"] = stats.eval_records;
  sj["train_skipped"] = stats.train_skipped;
  sj["eval_skipped"] = stats.eval_skipped;
  sj["degenerate"] = stats.degenerate;
  sj["train_unk_rate"] = stats.train_unk_rate;
  sj["eval_unk_rate"] = stats.eval_unk_rate;
  sj["vocab_size"] = stats.vocab_size;
  std::ofstream(art.stats) << sj.dump(2) << '\n';

  detail::log(quiet, "prepare: " + std::to_string(stats.train_records) + " train / " +
                         std::to_string(stats.eval_records) + " eval records, vocab " +
                         std::to_string(stats.vocab_size));
  return stats;
}

inline attrnet::AttributeVocab load_attr_vocab(const PipelineConfig& cfg) {
  detail::require_artifact(cfg.attr_vocab, "attribute vocabulary", "(provide input files)");
  return attrnet::AttributeVocab::load(cfg.attr_vocab);
}

// Region-feature lookup shared by several stages.
inline attrnet::RegionFeatureSet regions_for(const TensorFile& features,
                                             const std::string& image_id) {
  if (features.tensors.count(image_id) == 0)
    throw IoError("no region features for image '" + image_id + "'");
  attrnet::RegionFeatureSet set;
  set.image_id = image_id;
  set.features = features.tensors.at(image_id);
  return set;
}

inline void train_attr_stage(const PipelineConfig& cfg, bool quiet = false) {
  detail::require_artifact(cfg.attr_labels, "attribute labels", "(provide input files)");
  detail::require_artifact(cfg.features, "feature container", "(provide input files)");
  const Artifacts art(cfg);
  std::filesystem::create_directories(cfg.work_dir);

  const attrnet::AttributeVocab vocab = load_attr_vocab(cfg);
  const TensorFile features = TensorFile::load(cfg.features);

  std::ifstream in(cfg.attr_labels);
  if (!in) throw IoError("attribute labels: cannot read " + cfg.attr_labels.string());
  std::vector<attrnet::AttrExample> examples;
  std::string line;
  std::size_t line_no = 0, skipped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where =
        "attribute labels: " + cfg.attr_labels.string() + " line " + std::to_string(line_no);
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ContractViolation(where + ": not a JSON object");
    std::string image_id;
    std::vector<std::string> attrs;
    try {
      image_id = j.at("image_id").get<std::string>();
      attrs = j.at("attributes").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ContractViolation(where + ": " + e.what());
    }
    if (features.tensors.count(image_id) == 0) {
      ++skipped;
      detail::log(quiet, "train-attr: no features for image '" + image_id + "', skipped");
      continue;
    }
    attrnet::AttrExample ex;
    ex.regions = regions_for(features, image_id);
    ex.labels.assign(vocab.size(), 0.0f);
    for (const std::string& a : attrs) {
      const auto it = std::find(vocab.terms.begin(), vocab.terms.end(), a);
      if (it == vocab.terms.end())
        throw ContractViolation(where + ": attribute '" + a + "' not in the vocabulary");
      ex.labels[static_cast<std::size_t>(it - vocab.terms.begin())] = 1.0f;
    }
    examples.push_back(std::move(ex));
  }
  VQAKIT_REQUIRE(!examples.empty(), "train-attr: no usable labeled images");

  attrnet::AttrConfig acfg;
  acfg.hidden_dim = cfg.attr_hidden;
  acfg.epochs = cfg.attr_epochs;
  acfg.lr_pred = cfg.attr_lr;
  acfg.lr_hidden = cfg.attr_lr / 10.0f;
  acfg.momentum = cfg.momentum;
  acfg.dropout = cfg.dropout;
  acfg.seed = derive_seed(cfg.seed, "train_attr");

  Rng rng(derive_seed(cfg.seed, "attr_model_init"));
  attrnet::AttrModel model = attrnet::AttrModel::init(
      examples.front().regions.feature_dim(), static_cast<int>(vocab.size()), acfg, rng);
  const attrnet::AttrTrainResult res = attrnet::train_attr(model, examples, acfg);
  model.save(art.attr_model);
  detail::annotate_artifact(art.attr_model, config_hash(cfg), cfg.seed);
  detail::log(quiet, "train-attr: " + std::to_string(examples.size()) + " images (" +
                         std::to_string(skipped) + " skipped), final loss " +
                         std::to_string(res.epoch_losses.back()));
}

inline void train_captioner_stage(const PipelineConfig& cfg, bool quiet = false) {
  detail::require_artifact(cfg.captions, "caption file", "(provide input files)");
  detail::require_artifact(cfg.features, "feature container", "(provide input files)");
  const Artifacts art(cfg);
  detail::require_artifact(art.attr_model, "attribute model", "train-attr");
  std::filesystem::create_directories(cfg.work_dir);

  const attrnet::AttrModel attr = attrnet::AttrModel::load(art.attr_model);
  const attrnet::AttributeVocab avocab = load_attr_vocab(cfg);
  const TensorFile features = TensorFile::load(cfg.features);

  std::ifstream in(cfg.captions);
  if (!in) throw IoError("captions: cannot read " + cfg.captions.string());
  struct RawCaption {
    std::string image_id, caption;
  };
  std::vector<RawCaption> raw;
  std::string line;
  std::size_t line_no = 0, skipped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where =
        "captions: " + cfg.captions.string() + " line " + std::to_string(line_no);
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ContractViolation(where + ": not a JSON object");
    try {
      raw.push_back({j.at("image_id").get<std::string>(), j.at("caption").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ContractViolation(where + ": " + e.what());
    }
  }

  std::vector<std::vector<std::string>> sentences;
  for (const RawCaption& r : raw) sentences.push_back(text::tokenize(r.caption));
  const captioner::WordVocab vocab = captioner::WordVocab::build(sentences);

  // v_att once per image, reused across its captions
  std::map<std::string, std::vector<float>> v_att;
  std::vector<captioner::CaptionPair> pairs;
  for (const RawCaption& r : raw) {
    if (features.tensors.count(r.image_id) == 0) {
      ++skipped;
      detail::log(quiet, "train-captioner: no features for image '" + r.image_id + "', skipped");
      continue;
    }
    if (v_att.count(r.image_id) == 0) {
      const Tensor scores = attrnet::score_regions(attr, regions_for(features, r.image_id));
      v_att[r.image_id] = attrnet::max_pool_hypotheses(scores);
    }
    captioner::CaptionPair p;
    p.v_att = v_att.at(r.image_id);
    for (const std::string& tok : text::tokenize(r.caption))
      p.reference.push_back(vocab.id_or_unk(tok));
    pairs.push_back(std::move(p));
  }
  VQAKIT_REQUIRE(!pairs.empty(), "train-captioner: no usable caption pairs");

  captioner::CaptionConfig ccfg;
  ccfg.hidden_dim = cfg.caption_hidden;
  ccfg.embed_dim = cfg.caption_embed;
  ccfg.epochs = cfg.caption_epochs;
  ccfg.lr = cfg.caption_lr;
  ccfg.momentum = cfg.momentum;
  ccfg.clip_norm = cfg.clip_norm;
  ccfg.seed = derive_seed(cfg.seed, "train_captioner");

  Rng rng(derive_seed(cfg.seed, "caption_model_init"));
  captioner::CaptionModel model =
      captioner::CaptionModel::init(vocab, static_cast<int>(avocab.size()), ccfg, rng);
  const captioner::CaptionTrainResult res = captioner::train_captioner(model, pairs, ccfg);
  model.save(art.caption_model);
  detail::annotate_artifact(art.caption_model, config_hash(cfg), cfg.seed);
  detail::log(quiet, "train-captioner: " + std::to_string(pairs.size()) + " pairs (" +
                         std::to_string(skipped) + " skipped), final loss " +
                         std::to_string(res.epoch_losses.back()));
}

inline void train_doc2vec_stage(const PipelineConfig& cfg, bool quiet = false) {
  detail::require_artifact(cfg.corpus, "text corpus", "(provide input files)");
  const Artifacts art(cfg);
  std::filesystem::create_directories(cfg.work_dir);

  const std::vector<std::string> docs = doc2vec::load_corpus(cfg.corpus);
  doc2vec::Doc2VecConfig dcfg;
  dcfg.dim = cfg.doc2vec_dim;
  dcfg.window = cfg.doc2vec_window;
  dcfg.epochs = cfg.doc2vec_epochs;
  dcfg.lr = cfg.doc2vec_lr;
  dcfg.lr_end = cfg.doc2vec_lr_end;
  dcfg.seed = derive_seed(cfg.seed, "train_doc2vec");

  const doc2vec::Doc2VecTrainResult res = doc2vec::train_doc2vec(docs, dcfg);
  res.model.save(art.doc2vec_model);
  detail::annotate_artifact(art.doc2vec_model, config_hash(cfg), cfg.seed);
  detail::log(quiet, "train-doc2vec: " + std::to_string(docs.size()) + " docs, vocab " +
                         std::to_string(res.model.vocab_size()) + ", final loss " +
                         std::to_string(res.epoch_losses.back()));
}

namespace detail {

// the attribute terms whose comments feed an image's knowledge paragraph
inline std::vector<std::string> knowledge_terms(const attrnet::AttrModel& attr,
                                                const attrnet::AttributeVocab& vocab,
                                                const TensorFile& features,
                                                const std::string& image_id, int top_k) {
  const Tensor scores = attrnet::score_regions(attr, regions_for(features, image_id));
  const std::vector<float> pooled = attrnet::max_pool_hypotheses(scores);
  return attrnet::top_k_attributes(pooled, vocab,
                                   std::min<int>(top_k, static_cast<int>(vocab.size())));
}

inline std::set<std::string> dataset_image_ids(const PipelineConfig& cfg) {
  std::set<std::string> ids;
  for (const DatasetRecord& r : load_dataset(cfg.dataset)) ids.insert(r.image_id);
  if (cfg.eval_dataset != cfg.dataset)
    for (const DatasetRecord& r : load_dataset(cfg.eval_dataset)) ids.insert(r.image_id);
  return ids;
}

}  // namespace detail

// Warm the knowledge cache for every attribute term the datasets' images
// surface. The only stage that requires a reachable endpoint.
inline std::size_t fetch_kb_stage(const PipelineConfig& cfg, bool quiet = false) {
  const Artifacts art(cfg);
  detail::require_artifact(art.attr_model, "attribute model", "train-attr");
  detail::require_artifact(cfg.features, "feature container", "(provide input files)");
  std::filesystem::create_directories(cfg.work_dir);

  const std::string endpoint = knowledge::effective_endpoint(cfg.endpoint);
  if (endpoint.empty())
    throw ContractViolation("fetch-kb: no endpoint configured (config 'endpoint', --endpoint, or " +
                            std::string(knowledge::kEndpointEnvVar) + ")");

  const attrnet::AttrModel attr = attrnet::AttrModel::load(art.attr_model);
  const attrnet::AttributeVocab vocab = load_attr_vocab(cfg);
  const TensorFile features = TensorFile::load(cfg.features);

  std::set<std::string> terms;
  for (const std::string& id : detail::dataset_image_ids(cfg)) {
    if (features.tensors.count(id) == 0) continue;
    for (const std::string& t :
         detail::knowledge_terms(attr, vocab, features, id, cfg.top_k_terms))
      terms.insert(t);
  }

  knowledge::KbCache cache(cfg.kb_cache_path());
  const std::size_t before = cache.size();
  const std::vector<std::string> term_list(terms.begin(), terms.end());
  knowledge::fetch_terms(endpoint, term_list, cache);
  const std::size_t fetched = cache.size() - before;
  detail::log(quiet, "fetch-kb: " + std::to_string(term_list.size()) + " terms, " +
                         std::to_string(fetched) + " fetched, " +
                         std::to_string(term_list.size() - fetched) + " already cached");
  return fetched;
}

struct PrecomputeStats {
  std::size_t images = 0, computed = 0, skipped = 0;
  std::vector<std::string> empty_knowledge;  // zero v_know, flag logged
};

// Build (v_att, v_cap, v_know) for every dataset image and persist them in
// one container keyed "<image_id>/v_att" etc. Present keys are skipped, so
// the stage is resumable and a deleted key is recomputed exactly.
inline PrecomputeStats precompute_stage(const PipelineConfig& cfg, bool quiet = false) {
  const Artifacts art(cfg);
  detail::require_artifact(art.attr_model, "attribute model", "train-attr");
  detail::require_artifact(art.caption_model, "caption model", "train-captioner");
  detail::require_artifact(art.doc2vec_model, "paragraph-embedding model", "train-doc2vec");
  detail::require_artifact(cfg.features, "feature container", "(provide input files)");
  std::filesystem::create_directories(cfg.work_dir);

  const attrnet::AttrModel attr = attrnet::AttrModel::load(art.attr_model);
  const attrnet::AttributeVocab avocab = load_attr_vocab(cfg);
  const captioner::CaptionModel cap = captioner::CaptionModel::load(art.caption_model);
  const doc2vec::Doc2VecModel d2v = doc2vec::Doc2VecModel::load(art.doc2vec_model);
  const TensorFile features = TensorFile::load(cfg.features);
  knowledge::KbCache cache(cfg.kb_cache_path());
  const std::string endpoint = knowledge::effective_endpoint(cfg.endpoint);

  TensorFile store;
  if (std::filesystem::exists(art.precomputed)) store = TensorFile::load(art.precomputed);
  store.meta["kind"] = "precomputed";
  store.meta["config_hash"] = config_hash(cfg);
  store.meta["seed"] = std::to_string(cfg.seed);

  std::set<std::string> empty_know;
  {
    std::stringstream ss(store.meta.count("empty_knowledge") ? store.meta.at("empty_knowledge")
                                                             : std::string());
    std::string id;
    while (std::getline(ss, id, ','))
      if (!id.empty()) empty_know.insert(id);
  }

  PrecomputeStats stats;
  const captioner::CaptionConfig gen_cfg;  // beam 5 completions, default length cap

  for (const std::string& id : detail::dataset_image_ids(cfg)) {
    if (features.tensors.count(id) == 0) continue;
    ++stats.images;
    const std::string att_key = id + "/v_att";
    const std::string cap_key = id + "/v_cap";
    const std::string know_key = id + "/v_know";
    const bool need_att = store.tensors.count(att_key) == 0;
    const bool need_cap = store.tensors.count(cap_key) == 0;
    const bool need_know = store.tensors.count(know_key) == 0;
    if (!need_att && !need_cap && !need_know) {
      ++stats.skipped;
      continue;
    }

    std::vector<float> v_att;
    if (need_att || need_cap || need_know) {
      const Tensor scores = attrnet::score_regions(attr, regions_for(features, id));
      v_att = attrnet::max_pool_hypotheses(scores);
    }
    if (need_att)
      store.tensors[att_key] = Tensor({static_cast<int>(v_att.size())}, v_att);

    if (need_cap) {
      const captioner::CaptionSetEncoding enc = captioner::generate_caption_set(cap, v_att, gen_cfg);
      store.tensors[cap_key] = Tensor({static_cast<int>(enc.v_cap.size())}, enc.v_cap);
    }

    if (need_know) {
      const std::vector<std::string> terms = attrnet::top_k_attributes(
          v_att, avocab, std::min<int>(cfg.top_k_terms, static_cast<int>(avocab.size())));
      std::vector<knowledge::KnowledgePassage> passages;
      for (const std::string& term : terms) {
        if (endpoint.empty()) {
          const auto hit = cache.lookup_term(term);
          if (!hit)
            throw IoError("precompute: knowledge for term '" + term +
                          "' is not cached and no endpoint is configured; run 'fetch-kb' first");
          passages.push_back(*hit);
        } else {
          passages.push_back(knowledge::fetch_comment(endpoint, knowledge::build_comment_query(term),
                                                      cache));
        }
      }
      const knowledge::KnowledgeParagraph para = knowledge::assemble_paragraph(passages);
      std::vector<float> v_know(static_cast<std::size_t>(d2v.dim()), 0.0f);
      if (para.all_empty) {
        empty_know.insert(id);
        detail::log(quiet, "precompute: image '" + id + "' has no knowledge text, zero vector");
      } else {
        const doc2vec::InferredVector inferred = doc2vec::infer_vector(
            d2v, para.text, 100, 0.05f, derive_seed(cfg.seed, "infer_know/" + id));
        v_know = inferred.values;
        if (inferred.no_coverage) {
          empty_know.insert(id);
          detail::log(quiet, "precompute: image '" + id + "' knowledge has no known words");
        }
      }
      store.tensors[know_key] = Tensor({static_cast<int>(v_know.size())}, v_know);
    }

    ++stats.computed;
    std::string joined;
    for (const std::string& e : empty_know) {
      if (!joined.empty()) joined += ',';
      joined += e;
    }
    store.meta["empty_knowledge"] = joined;
    store.save(art.precomputed);  // persist after every image: crash-resumable
  }

  if (stats.computed == 0 && std::filesystem::exists(art.precomputed)) {
    // nothing recomputed; still refresh the manifest if the config moved
    store.save(art.precomputed);
  } else if (stats.images == 0) {
    throw ContractViolation("precompute: no dataset image has region features");
  }

  stats.empty_knowledge.assign(empty_know.begin(), empty_know.end());
  detail::log(quiet, "precompute: " + std::to_string(stats.computed) + " computed, " +
                         std::to_string(stats.skipped) + " already present");
  return stats;
}

namespace detail {

inline std::vector<float> stored_vector(const TensorFile& store, const std::string& image_id,
                                        const char* which) {
  const std::string key = image_id + "/" + which;
  if (store.tensors.count(key) == 0)
    throw IoError("precomputed vector '" + key + "' not found; run 'precompute' first");
  const std::span<const float> s = store.tensors.at(key).span();
  return {s.begin(), s.end()};
}

inline vqalstm::Episode make_episode(const TensorFile& store, const PreparedRecord& rec) {
  vqalstm::Episode ep;
  ep.v_att = stored_vector(store, rec.raw.image_id, "v_att");
  ep.v_cap = stored_vector(store, rec.raw.image_id, "v_cap");
  ep.v_know = stored_vector(store, rec.raw.image_id, "v_know");
  ep.question = rec.question_ids;
  return ep;
}

}  // namespace detail

inline vqalstm::VqaTrainResult train_vqa_stage(const PipelineConfig& cfg, bool quiet = false) {
  const Artifacts art(cfg);
  detail::require_artifact(art.prepared_train, "prepared dataset", "prepare");
  detail::require_artifact(art.precomputed, "precomputed vectors", "precompute");

  const auto [header, records] = detail::read_prepared(art.prepared_train);
  const TensorFile store = TensorFile::load(art.precomputed);
  const vqalstm::VqaVocab vocab = vqalstm::VqaVocab::load(art.vqa_vocab);

  std::vector<vqalstm::Episode> episodes;
  for (const PreparedRecord& r : records) {
    vqalstm::Episode ep = detail::make_episode(store, r);
    ep.answer = r.answer_ids[r.train_answer];
    episodes.push_back(std::move(ep));
  }
  VQAKIT_REQUIRE(!episodes.empty(), "train-vqa: no training episodes");

  vqalstm::VqaConfig vcfg;
  vcfg.embed_dim = cfg.embed_dim;
  vcfg.epochs = cfg.vqa_epochs;
  vcfg.batch_size = cfg.batch_size;
  vcfg.lr = cfg.lr;
  vcfg.momentum = cfg.momentum;
  vcfg.clip_norm = cfg.clip_norm;
  vcfg.dropout = cfg.dropout;
  vcfg.lambda = cfg.lambda;
  vcfg.seed = derive_seed(cfg.seed, "train_vqa");
  vcfg.modalities = cfg.modalities;
  vcfg.checkpoint_dir = art.vqa_epoch_dir;

  Rng rng(derive_seed(cfg.seed, "vqa_model_init"));
  vqalstm::VqaModel model = vqalstm::VqaModel::init(
      vocab, static_cast<int>(episodes.front().v_att.size()),
      static_cast<int>(episodes.front().v_cap.size()),
      static_cast<int>(episodes.front().v_know.size()), cfg.embed_dim, cfg.modalities, rng);

  const vqalstm::VqaTrainResult res = vqalstm::train_vqa(model, episodes, vcfg);
  model.save(art.vqa_model);
  detail::annotate_artifact(art.vqa_model, config_hash(cfg), cfg.seed);
  detail::log(quiet, "train-vqa: " + std::to_string(episodes.size()) + " episodes, loss " +
                         std::to_string(res.epoch_losses.front()) + " -> " +
                         std::to_string(res.epoch_losses.back()));
  return res;
}

inline std::string answer_to_text(const vqalstm::VqaModel& model, const std::vector<int>& tokens) {
  std::string out;
  for (int id : tokens) {
    if (!out.empty()) out += ' ';
    out += model.vocab.tokens.at(static_cast<std::size_t>(id));
  }
  return out;
}

inline evalkit::EvalReport eval_stage(const PipelineConfig& cfg, bool quiet = false) {
  const Artifacts art(cfg);
  detail::require_artifact(art.prepared_eval, "prepared dataset", "prepare");
  detail::require_artifact(art.precomputed, "precomputed vectors", "precompute");
  detail::require_artifact(art.vqa_model, "answering model", "train-vqa");
  detail::require_artifact(cfg.taxonomy, "taxonomy file", "(provide input files)");

  const auto [header, records] = detail::read_prepared(art.prepared_eval);
  VQAKIT_REQUIRE(!records.empty(), "eval: prepared dataset has no records");
  const TensorFile store = TensorFile::load(art.precomputed);
  const vqalstm::VqaModel model = vqalstm::VqaModel::load(art.vqa_model);
  const evalkit::TaxonomyTree tax = evalkit::TaxonomyTree::load(cfg.taxonomy);

  std::vector<evalkit::EvalRecord> scored;
  for (const PreparedRecord& r : records) {
    const vqalstm::Episode ep = detail::make_episode(store, r);
    const vqalstm::DecodeResult dec =
        vqalstm::answer(model, ep.v_att, ep.v_cap, ep.v_know, ep.question,
                        vqalstm::AnswerConfig{cfg.answer_max_len, cfg.beam_width});
    scored.push_back({r.raw.question, answer_to_text(model, dec.tokens), r.raw.answers});
  }

  const evalkit::EvalReport rep = evalkit::build_report(scored, tax, cfg.question_prefixes);
  std::ofstream out(art.report, std::ios::trunc);
  if (!out) throw IoError("eval: cannot write " + art.report.string());
  out << "# config " << config_hash(cfg) << " seed " << cfg.seed << '\n' << rep.table;
  if (!quiet) std::cout << rep.table;
  return rep;
}

struct AskResult {
  std::string answer;
  double log_prob = 0.0;
};

inline AskResult ask_stage(const PipelineConfig& cfg, const std::string& image_id,
                           const std::string& question) {
  const Artifacts art(cfg);
  detail::require_artifact(art.precomputed, "precomputed vectors", "precompute");
  detail::require_artifact(art.vqa_model, "answering model", "train-vqa");
  VQAKIT_REQUIRE(!question.empty(), "ask: question must be nonempty");

  const TensorFile store = TensorFile::load(art.precomputed);
  const vqalstm::VqaModel model = vqalstm::VqaModel::load(art.vqa_model);

  std::vector<int> q_ids;
  for (const std::string& tok : text::tokenize(question))
    q_ids.push_back(model.vocab.id_or_unk(tok));
  VQAKIT_REQUIRE(!q_ids.empty(), "ask: question has no words");

  const std::vector<float> v_att = detail::stored_vector(store, image_id, "v_att");
  const std::vector<float> v_cap = detail::stored_vector(store, image_id, "v_cap");
  const std::vector<float> v_know = detail::stored_vector(store, image_id, "v_know");
  const vqalstm::DecodeResult dec =
      vqalstm::answer(model, v_att, v_cap, v_know, q_ids,
                      vqalstm::AnswerConfig{cfg.answer_max_len, cfg.beam_width});
  return {answer_to_text(model, dec.tokens), dec.log_prob};
}

}  // namespace vqakit::pipeline
