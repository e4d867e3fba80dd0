#pragma once

#include <filesystem>
#include <string>

#include "cma/checkpoint.hpp"
#include "cma/datasets.hpp"
#include "cma/mediation.hpp"
#include "cma/tokenizer.hpp"

namespace support {

inline std::filesystem::path source(const std::string& rel) { return std::filesystem::path(CMA_SOURCE_DIR) / rel; }

inline cma::ModelConfig toy_config(std::uint32_t layers = 2, std::uint32_t vocab = 51) {
  cma::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 32;
  c.vocab_size = vocab;
  c.max_positions = 32;
  return c;
}

// Large init spread so attention is far from uniform and effects are visible.
inline cma::Checkpoint toy_checkpoint(std::uint64_t seed = 7, std::uint32_t layers = 2) {
  return cma::init_random(toy_config(layers), seed, 0.5);
}

inline cma::Tokenizer toy_tokenizer() { return cma::Tokenizer::load(source("tests/fixtures/toy/vocab.tsv"), std::nullopt); }

inline std::vector<cma::TemplateExample> toy_professions(const cma::Tokenizer& tok) {
  const auto templates = cma::load_templates(source("data/templates.txt"));
  const auto entries = cma::load_professions(source("tests/fixtures/toy/professions.tsv"));
  return cma::build_professions(templates, entries, tok, cma::CorpusMode::binary);
}

inline std::vector<cma::WinogradExample> toy_winograd() {
  return cma::load_winograd(source("tests/fixtures/toy/winograd.tsv")).examples;
}

}  // namespace support
