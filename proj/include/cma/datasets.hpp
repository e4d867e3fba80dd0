#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cma/tokenizer.hpp"

namespace cma {

enum class Stereotype { female, male };
enum class CorpusMode { binary, neutral };

struct ProfessionEntry {
  std::string word;
  double definitionality = 0.0;   // [-1, 1]
  double stereotypicality = 0.0;  // [-1, 1]; > 0 female-, < 0 male-stereotypical
  bool is_definitional = false;

  double external_bias() const { return definitionality + stereotypicality; }
  // A rating of exactly 0 falls in the male bucket; see is_stereotype_neutral().
  Stereotype orientation() const { return stereotypicality > 0.0 ? Stereotype::female : Stereotype::male; }
  bool is_stereotype_neutral() const { return stereotypicality == 0.0; }
};

struct TokenSpan {
  int begin = 0;
  int end = 0;  // exclusive
  bool operator==(const TokenSpan&) const = default;
};

struct TemplateExample {
  std::string template_text;
  ProfessionEntry profession;
  std::string prompt;
  std::vector<TokenId> prompt_ids;
  TokenSpan site;  // tokens of the profession word
  std::string stereotypical_candidate;
  std::string anti_stereotypical_candidate;
  std::string set_gender_word;
  Stereotype orientation = Stereotype::male;
  bool stereotype_neutral = false;
  bool aggregate = true;  // false for definitional professions
};

struct WinogradExample {
  std::string shared_prompt;  // ends with the pronoun
  std::string pronoun;        // "she" | "he"
  std::string stereotypical_continuation;
  std::string anti_stereotypical_continuation;
  // Stereotypicality statistics (e.g. percent of workers of the pronoun's
  // gender) of the referent linked by the stereotypical reading (occ1) and of
  // the other referent (occ2).
  double occ1_stat = 0.0;
  double occ2_stat = 0.0;

  double external_bias() const;  // log(occ1 / occ2)
};

struct InterventionPrompt {
  std::string text;
  std::vector<TokenId> ids;
  TokenSpan site;
};

// Corpus files (UTF-8):
//   templates:   one template per line containing exactly one "<occupation>"
//   professions: word<TAB>definitionality<TAB>stereotypicality<TAB>definitional(0|1)
//   winograd:    prompt<TAB>pronoun<TAB>stereo_cont<TAB>anti_cont<TAB>occ1_stat<TAB>occ2_stat
// An occ2_stat of "NA" marks a Winogender participant; its statistic is set
// to the opposite of the occupation's, 100 - occ1_stat.
inline constexpr std::string_view kOccupationSlot = "<occupation>";

std::vector<std::string> load_templates(const std::filesystem::path& path);
std::vector<ProfessionEntry> load_professions(const std::filesystem::path& path);

struct WinogradCorpus {
  std::vector<WinogradExample> examples;
  std::size_t excluded_format = 0;  // records whose prompt does not end in the pronoun
};
WinogradCorpus load_winograd(const std::filesystem::path& path);

// Template-major cartesian product, keeping professions the tokenizer maps to
// a single token. Throws FormatError for a template without exactly one slot.
std::vector<TemplateExample> build_professions(std::span<const std::string> templates,
                                               std::span<const ProfessionEntry> professions,
                                               const Tokenizer& tokenizer, CorpusMode mode);

// Replaces the profession with the anti-stereotypical gendered word.
InterventionPrompt apply_set_gender(const TemplateExample& ex, const Tokenizer& tokenizer);

// Flips the final pronoun she <-> he; throws FormatError otherwise.
std::string apply_swap_gender(const WinogradExample& ex);
std::string swap_final_pronoun(const std::string& prompt);

// Drops negative total effects, then the lowest ceil(n/4) of the rest (stable
// by original index). Returns kept indices in original order.
std::vector<std::size_t> filter_by_total_effect(std::span<const double> total_effects,
                                                std::size_t n_examples);

}  // namespace cma
