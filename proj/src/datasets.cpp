#include "cma/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cma/errors.hpp"

namespace cma {
namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(where + ": expected a number, got '" + s + "'");
}

std::string last_word(const std::string& text) {
  const auto end = text.find_last_not_of(" \t");
  if (end == std::string::npos) return {};
  const auto start = text.find_last_of(" \t", end);
  return text.substr(start == std::string::npos ? 0 : start + 1, end - (start == std::string::npos ? 0 : start + 1) + 1);
}

std::vector<TokenId> concat(std::vector<TokenId> a, const std::vector<TokenId>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

double WinogradExample::external_bias() const {
  if (occ1_stat <= 0.0 || occ2_stat <= 0.0) {
    throw DegenerateProbability("occupation statistics must be positive for a log-ratio");
  }
  return std::log(occ1_stat / occ2_stat);
}

std::vector<std::string> load_templates(const std::filesystem::path& path) {
  std::vector<std::string> templates;
  for (auto& line : read_lines(path)) {
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    templates.push_back(std::move(line));
  }
  return templates;
}

std::vector<ProfessionEntry> load_professions(const std::filesystem::path& path) {
  std::vector<ProfessionEntry> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    const auto f = split_tabs(lines[i]);
    if (f.size() != 4) throw FormatError(where + ": expected 4 tab-separated fields");
    ProfessionEntry e;
    e.word = f[0];
    e.definitionality = parse_number(f[1], where);
    e.stereotypicality = parse_number(f[2], where);
    if (f[3] != "0" && f[3] != "1") throw FormatError(where + ": definitional flag must be 0 or 1");
    e.is_definitional = f[3] == "1";
    if (e.word.empty() || e.word.find(' ') != std::string::npos) {
      throw FormatError(where + ": profession must be a single word");
    }
    if (std::abs(e.definitionality) > 1.0 || std::abs(e.stereotypicality) > 1.0) {
      throw FormatError(where + ": ratings must lie in [-1, 1]");
    }
    out.push_back(std::move(e));
  }
  return out;
}

WinogradCorpus load_winograd(const std::filesystem::path& path) {
  WinogradCorpus corpus;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    const auto f = split_tabs(lines[i]);
    if (f.size() != 6) throw FormatError(where + ": expected 6 tab-separated fields");
    WinogradExample ex;
    ex.shared_prompt = f[0];
    ex.pronoun = f[1];
    ex.stereotypical_continuation = f[2];
    ex.anti_stereotypical_continuation = f[3];
    ex.occ1_stat = parse_number(f[4], where);
    ex.occ2_stat = f[5] == "NA" ? 100.0 - ex.occ1_stat : parse_number(f[5], where);
    if (ex.stereotypical_continuation.empty() || ex.anti_stereotypical_continuation.empty()) {
      throw FormatError(where + ": continuations must be non-empty");
    }
    if ((ex.pronoun != "she" && ex.pronoun != "he") || last_word(ex.shared_prompt) != ex.pronoun) {
      ++corpus.excluded_format;
      continue;
    }
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

std::vector<TemplateExample> build_professions(std::span<const std::string> templates,
                                               std::span<const ProfessionEntry> professions,
                                               const Tokenizer& tokenizer, CorpusMode mode) {
  for (const auto& t : templates) {
    const auto first = t.find(kOccupationSlot);
    if (first == std::string::npos || t.find(kOccupationSlot, first + 1) != std::string::npos) {
      throw FormatError("template must contain exactly one " + std::string(kOccupationSlot) + ": '" + t + "'");
    }
  }
  const std::string neutral_word = "person";
  for (const char* w : {"man", "woman", "person"}) {
    if (!tokenizer.is_single_token(w)) {
      throw FormatError(std::string("set-gender word '") + w + "' is not a single token");
    }
  }

  std::vector<TemplateExample> out;
  for (const auto& t : templates) {
    const auto slot = t.find(kOccupationSlot);
    std::string prefix = t.substr(0, slot);
    const std::string suffix = t.substr(slot + kOccupationSlot.size());
    const bool spaced = !prefix.empty() && prefix.back() == ' ';
    if (spaced) prefix.pop_back();
    const auto prefix_ids = tokenizer.encode(prefix);
    const auto suffix_ids = tokenizer.encode(suffix);

    for (const auto& prof : professions) {
      if (!tokenizer.is_single_token(prof.word)) continue;
      TemplateExample ex;
      ex.template_text = t;
      ex.profession = prof;
      ex.prompt = prefix + (spaced ? " " : "") + prof.word + suffix;
      const auto word_ids = tokenizer.encode((spaced ? " " : "") + prof.word);
      ex.prompt_ids = concat(concat(prefix_ids, word_ids), suffix_ids);
      if (ex.prompt_ids != tokenizer.encode(ex.prompt)) {
        throw FormatError("profession '" + prof.word + "' does not tokenize on a word boundary in '" +
                          ex.prompt + "'");
      }
      ex.site = {static_cast<int>(prefix_ids.size()), static_cast<int>(prefix_ids.size() + word_ids.size())};
      ex.orientation = prof.orientation();
      ex.stereotype_neutral = prof.is_stereotype_neutral();
      ex.aggregate = !prof.is_definitional;
      const bool female = ex.orientation == Stereotype::female;
      ex.stereotypical_candidate = female ? "she" : "he";
      if (mode == CorpusMode::binary) {
        ex.anti_stereotypical_candidate = female ? "he" : "she";
        ex.set_gender_word = female ? "man" : "woman";
      } else {
        ex.anti_stereotypical_candidate = "they";
        ex.set_gender_word = neutral_word;
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

InterventionPrompt apply_set_gender(const TemplateExample& ex, const Tokenizer& tokenizer) {
  const bool spaced = ex.site.begin > 0;
  const auto word_ids = tokenizer.encode((spaced ? " " : "") + ex.set_gender_word);
  InterventionPrompt out;
  out.ids.assign(ex.prompt_ids.begin(), ex.prompt_ids.begin() + ex.site.begin);
  out.ids.insert(out.ids.end(), word_ids.begin(), word_ids.end());
  out.ids.insert(out.ids.end(), ex.prompt_ids.begin() + ex.site.end, ex.prompt_ids.end());
  out.site = {ex.site.begin, ex.site.begin + static_cast<int>(word_ids.size())};

  const auto slot = ex.template_text.find(kOccupationSlot);
  out.text = ex.template_text.substr(0, slot) + ex.set_gender_word +
             ex.template_text.substr(slot + kOccupationSlot.size());
  return out;
}

std::string swap_final_pronoun(const std::string& prompt) {
  const auto end = prompt.find_last_not_of(" \t");
  const std::string word = last_word(prompt);
  if (word != "she" && word != "he") {
    throw FormatError("prompt does not end in she/he: '" + prompt + "'");
  }
  const auto start = end + 1 - word.size();
  return prompt.substr(0, start) + (word == "she" ? "he" : "she") + prompt.substr(end + 1);
}

std::string apply_swap_gender(const WinogradExample& ex) { return swap_final_pronoun(ex.shared_prompt); }

std::vector<std::size_t> filter_by_total_effect(std::span<const double> total_effects, std::size_t n_examples) {
  if (total_effects.size() != n_examples) {
    throw FormatError("filter_by_total_effect: " + std::to_string(total_effects.size()) +
                      " effects for " + std::to_string(n_examples) + " examples");
  }
  std::vector<std::size_t> positive;
  for (std::size_t i = 0; i < total_effects.size(); ++i) {
    if (total_effects[i] >= 0.0) positive.push_back(i);
  }
  std::stable_sort(positive.begin(), positive.end(),
                   [&](std::size_t a, std::size_t b) { return total_effects[a] < total_effects[b]; });
  const std::size_t drop = (positive.size() + 3) / 4;
  std::vector<std::size_t> kept(positive.begin() + static_cast<std::ptrdiff_t>(drop), positive.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

}  // namespace cma
