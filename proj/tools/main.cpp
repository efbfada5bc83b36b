// vqakit command line: drives the question-answering pipeline stage by
// stage. Every subcommand reads one JSON config; a handful of flags
// override config fields for quick experiments.
//
// exit codes: 0 success, 1 validation error, 2 I/O or network error

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "vqakit/pipeline.hpp"

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> endpoint;
  std::optional<std::string> cache;
  std::optional<std::string> modalities;
  bool quiet = false;
};

vqakit::pipeline::PipelineConfig effective_config(const GlobalFlags& g) {
  vqakit::pipeline::PipelineConfig cfg = vqakit::pipeline::load_config(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.endpoint) cfg.endpoint = *g.endpoint;
  if (g.cache) cfg.kb_cache = *g.cache;
  if (g.modalities) cfg.modalities = vqakit::vqalstm::Modalities::parse(*g.modalities);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vqakit: attribute, caption, and knowledge grounded question answering"};
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--config", g.config_path, "pipeline config (JSON)")->required();
  app.add_option("--seed", g.seed, "override the master seed");
  app.add_option("--endpoint", g.endpoint, "override the knowledge endpoint URL");
  app.add_option("--cache", g.cache, "override the knowledge cache path");
  app.add_option("--modalities", g.modalities,
                 "override enabled input modalities, e.g. att,cap or att,cap,know");
  app.add_flag("--quiet", g.quiet, "suppress progress logging");

  auto* prepare = app.add_subcommand("prepare", "tokenize datasets and build the vocabulary");
  auto* train_attr = app.add_subcommand("train-attr", "train the attribute predictor");
  auto* train_captioner = app.add_subcommand("train-captioner", "train the caption generator");
  auto* train_doc2vec = app.add_subcommand("train-doc2vec", "train the paragraph embedder");
  auto* fetch_kb = app.add_subcommand("fetch-kb", "warm the knowledge cache from the endpoint");
  auto* precompute =
      app.add_subcommand("precompute", "compute per-image attribute/caption/knowledge vectors");
  auto* train_vqa = app.add_subcommand("train-vqa", "train the answering model");
  auto* eval = app.add_subcommand("eval", "score the eval split and write the report");

  auto* ask = app.add_subcommand("ask", "answer one question about one image");
  std::string ask_image, ask_question;
  ask->add_option("image_id", ask_image, "image identifier from the feature container");
  ask->add_option("question", ask_question, "question text (quote multi-word questions)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    const vqakit::pipeline::PipelineConfig cfg = effective_config(g);
    if (prepare->parsed()) {
      vqakit::pipeline::prepare(cfg, g.quiet);
    } else if (train_attr->parsed()) {
      vqakit::pipeline::train_attr_stage(cfg, g.quiet);
    } else if (train_captioner->parsed()) {
      vqakit::pipeline::train_captioner_stage(cfg, g.quiet);
    } else if (train_doc2vec->parsed()) {
      vqakit::pipeline::train_doc2vec_stage(cfg, g.quiet);
    } else if (fetch_kb->parsed()) {
      vqakit::pipeline::fetch_kb_stage(cfg, g.quiet);
    } else if (precompute->parsed()) {
      vqakit::pipeline::precompute_stage(cfg, g.quiet);
    } else if (train_vqa->parsed()) {
      vqakit::pipeline::train_vqa_stage(cfg, g.quiet);
    } else if (eval->parsed()) {
      vqakit::pipeline::eval_stage(cfg, g.quiet);
    } else if (ask->parsed()) {
      if (ask_image.empty()) {
        // fall back to one "image_id question..." line on stdin
        std::string line;
        if (!std::getline(std::cin, line))
          throw vqakit::ContractViolation("ask: no image id given");
        std::istringstream ss(line);
        ss >> ask_image;
        std::getline(ss, ask_question);
        while (!ask_question.empty() && (ask_question.front() == ' ' || ask_question.front() == '\t'))
          ask_question.erase(ask_question.begin());
      }
      const vqakit::pipeline::AskResult res =
          vqakit::pipeline::ask_stage(cfg, ask_image, ask_question);
      std::cout << res.answer << '\t' << res.log_prob << '\n';
    }
  } catch (const vqakit::ContractViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const vqakit::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const vqakit::knowledge::NetworkError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const vqakit::knowledge::MalformedResponse& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
