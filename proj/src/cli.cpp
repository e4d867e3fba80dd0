#include "cma/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include "cma/checkpoint.hpp"
#include "cma/datasets.hpp"
#include "cma/effects.hpp"
#include "cma/errors.hpp"
#include "cma/mediation.hpp"
#include "cma/model.hpp"
#include "cma/selection.hpp"
#include "cma/tokenizer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace cma::cli {

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string() + " for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string csv_field(std::string_view text) {
  if (text.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(text);
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

namespace {

struct Options {
  fs::path checkpoint, vocab, merges, corpus, templates, professions, out_dir, fixtures, manifest;
  std::string mode = "binary";
  std::string metric = "original";
  std::string mediator;
  std::string method = "greedy";
  std::string analysis;
  std::vector<int> layers, heads;
  double top_percent = 5.0;
  std::size_t block_size = 96;
  bool filter_te = false;
  int workers = 1;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool strict = false;
  bool null_intervention = false;
  std::size_t budget = 10;
  int trials = 100;
  std::size_t candidate_limit = 0;
  double tolerance = 1e-4;
  ModelConfig config;
  double init_std = 0.02;
};

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) text_ += ',';
      text_ += csv_field(fields[i]);
    }
    text_ += '\n';
  }
  const std::string& str() const { return text_; }

 private:
  std::string text_;
};

std::string num(double v) { return format_number(v); }
std::string num(std::size_t v) { return std::to_string(v); }
std::string num(int v) { return std::to_string(v); }

struct Outputs {
  std::vector<std::pair<std::string, std::string>> files;
  void add(std::string name, const CsvWriter& csv) { files.emplace_back(std::move(name), csv.str()); }
  void add(std::string name, std::string text) { files.emplace_back(std::move(name), std::move(text)); }
};

struct Corpus {
  bool winograd = false;
  std::vector<TemplateExample> professions;
  std::vector<WinogradExample> winograd_examples;
  std::vector<MediationUnit> units;
  std::vector<std::string> prompts;
  std::vector<std::string> groups;
  std::vector<double> external_bias;
  std::vector<fs::path> files;
};

struct Session {
  Checkpoint checkpoint;
  std::optional<Model> model;
  std::optional<Tokenizer> tokenizer;
  Corpus corpus;
};

void require(bool condition, const std::string& message) {
  if (!condition) throw UsageError(message);
}

MediatorKind parse_mediator(const std::string& name) {
  if (name == "neuron") return MediatorKind::neuron;
  if (name == "head") return MediatorKind::attention_head;
  throw UsageError("--mediator must be neuron|head");
}

std::string kind_name(MediatorKind k) { return k == MediatorKind::neuron ? "neuron" : "head"; }

void load_model(Session& s, const Options& o) {
  require(!o.checkpoint.empty(), "--checkpoint is required");
  s.checkpoint = load_checkpoint(o.checkpoint);
  s.model.emplace(s.checkpoint);
}

void load_tokenizer(Session& s, const Options& o) {
  require(!o.vocab.empty(), "--vocab is required");
  s.tokenizer = Tokenizer::load(o.vocab, o.merges.empty() ? std::nullopt : std::optional<fs::path>(o.merges));
}

void load_corpus(Session& s, const Options& o) {
  auto& c = s.corpus;
  const auto& tok = *s.tokenizer;
  const bool professions = !o.templates.empty() || !o.professions.empty();
  require(o.corpus.empty() != !professions, "give either --corpus (Winograd) or --templates with --professions");
  if (!o.corpus.empty()) {
    c.winograd = true;
    auto loaded = load_winograd(o.corpus);
    c.winograd_examples = std::move(loaded.examples);
    c.units = prepare_winograd_units(c.winograd_examples, tok);
    for (const auto& ex : c.winograd_examples) {
      c.prompts.push_back(ex.shared_prompt);
      c.groups.push_back(ex.pronoun == "she" ? "female" : "male");
      c.external_bias.push_back(ex.external_bias());
    }
    c.files = {o.corpus};
  } else {
    require(!o.templates.empty() && !o.professions.empty(), "--templates and --professions go together");
    require(o.mode == "binary" || o.mode == "neutral", "--mode must be binary|neutral");
    const auto templates = load_templates(o.templates);
    const auto entries = load_professions(o.professions);
    c.professions = build_professions(templates, entries, tok,
                                      o.mode == "binary" ? CorpusMode::binary : CorpusMode::neutral);
    c.units = prepare_profession_units(c.professions, tok);
    for (const auto& ex : c.professions) {
      c.prompts.push_back(ex.prompt);
      c.groups.push_back(ex.orientation == Stereotype::female ? "female" : "male");
      c.external_bias.push_back(ex.profession.external_bias());
    }
    c.files = {o.templates, o.professions};
  }
  if (c.units.empty()) throw FormatError("corpus produced no examples");
  if (o.null_intervention) {
    for (auto& u : c.units) u.intervened_prompt = u.null_prompt;
  }
}

void check_pairing(const Session& s, MediatorKind kind) {
  if (kind == MediatorKind::neuron && s.corpus.winograd) {
    throw UsageError("neuron mediators pair with the Professions corpus (--templates/--professions)");
  }
  if (kind == MediatorKind::attention_head && !s.corpus.winograd) {
    throw UsageError("head mediators pair with the Winograd corpus (--corpus)");
  }
}

MediatorSet selected_mediators(const ModelConfig& cfg, MediatorKind kind, const Options& o) {
  const int first = kind == MediatorKind::neuron ? 0 : 1;
  std::vector<int> layers = o.layers;
  if (layers.empty()) {
    for (int l = first; l <= static_cast<int>(cfg.n_layers); ++l) layers.push_back(l);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int l : layers) {
    require(l >= first && l <= static_cast<int>(cfg.n_layers), "--layers entry " + std::to_string(l) + " out of range");
  }
  std::vector<int> heads = o.heads;
  require(heads.empty() || kind == MediatorKind::attention_head, "--heads applies to head mediators only");
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  for (int h : heads) {
    require(h >= 0 && h < static_cast<int>(cfg.n_heads), "--heads entry " + std::to_string(h) + " out of range");
  }
  MediatorSet out;
  for (int l : layers) {
    const auto all = kind == MediatorKind::neuron ? neurons_in_layer(cfg, l) : heads_in_layer(cfg, l);
    for (const auto& m : all) {
      if (heads.empty() || std::binary_search(heads.begin(), heads.end(), m.index)) out.push_back(m);
    }
  }
  return out;
}

std::size_t count_degenerate(std::span<const UnitOutcome> units) {
  return static_cast<std::size_t>(std::count_if(units.begin(), units.end(),
                                                [](const UnitOutcome& u) { return u.degenerate(); }));
}

double individual_nie(const MediatorEffect& e, EffectMetric metric) { return e.value(metric).nie; }

// ---------------------------------------------------------------- commands

std::size_t cmd_total_effect(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  const auto metric = parse_metric(o.metric);
  const auto& c = s.corpus;
  const auto outcomes = run_total_effects(*s.model, c.units, o.workers);
  const auto all = summarize(outcomes, metric);

  CsvWriter rows({"example", "group", "aggregate", "prompt", "p_anti_null", "p_stereo_null",
                  "p_anti_intervened", "p_stereo_intervened", "te", "degenerate", "metric"});
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& u = outcomes[i];
    rows.row({num(i), c.groups[i], u.aggregate ? "1" : "0", c.prompts[i], num(u.null.p_anti),
              num(u.null.p_stereo), num(u.intervened.p_anti), num(u.intervened.p_stereo),
              num(all.per_example_te[i]), u.degenerate() ? "1" : "0", to_string(metric)});
  }
  out.add("total_effect.csv", rows);

  CsvWriter summary({"group", "n", "te", "metric"});
  summary.row({"all", num(all.n), num(all.te), to_string(metric)});
  for (const std::string group : {"female", "male"}) {
    std::vector<UnitOutcome> subset;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      if (c.groups[i] == group) subset.push_back(outcomes[i]);
    }
    const auto v = summarize(subset, metric);
    summary.row({group, num(v.n), num(v.te), to_string(metric)});
  }
  log << "TE (" << to_string(metric) << ", n=" << all.n << ") = " << num(all.te) << "\n";

  if (o.filter_te) {
    const auto kept = filter_by_total_effect(all.per_example_te, outcomes.size());
    std::vector<UnitOutcome> subset;
    CsvWriter filtered({"example", "prompt", "te"});
    for (std::size_t i : kept) {
      subset.push_back(outcomes[i]);
      filtered.row({num(i), c.prompts[i], num(all.per_example_te[i])});
    }
    const auto v = summarize(subset, metric);
    summary.row({"filtered", num(v.n), num(v.te), to_string(metric)});
    out.add("filtered.csv", filtered);
    if (c.winograd) {
      std::string tsv;
      for (std::size_t i : kept) {
        const auto& ex = c.winograd_examples[i];
        tsv += ex.shared_prompt + "\t" + ex.pronoun + "\t" + ex.stereotypical_continuation + "\t" +
               ex.anti_stereotypical_continuation + "\t" + num(ex.occ1_stat) + "\t" + num(ex.occ2_stat) + "\n";
      }
      out.add("filtered_corpus.tsv", tsv);
    }
    log << "filtered TE (n=" << v.n << ") = " << num(v.te) << "\n";
  }
  out.add("total_effect_summary.csv", summary);
  return count_degenerate(outcomes);
}

std::size_t cmd_mediate(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  const auto metric = parse_metric(o.metric);
  require(!o.mediator.empty(), "--mediator is required");
  const auto kind = parse_mediator(o.mediator);
  check_pairing(s, kind);
  const auto& cfg = s.model->config();
  const auto mediators = selected_mediators(cfg, kind, o);
  const auto map = build_effect_map(*s.model, s.corpus.units, mediators, EffectKinds::both, o.workers);

  std::size_t degenerate = 0;
  CsvWriter effects({"kind", "layer", "index", "te", "nde", "nie", "n", "metric"});
  std::map<int, std::vector<std::pair<int, double>>> grid;
  for (const auto& e : map.singles) {
    const auto v = e.value(metric);
    const auto& m = e.mediators.front();
    effects.row({kind_name(m.kind), num(m.layer), num(m.index), num(v.te), num(v.nde), num(v.nie), num(v.n),
                 to_string(metric)});
    grid[m.layer].emplace_back(m.index, v.nie);
    degenerate = std::max(degenerate, count_degenerate(e.units));
  }
  out.add("effects.csv", effects);

  std::vector<std::string> header{"layer"};
  if (!grid.empty()) {
    for (const auto& [index, _] : grid.begin()->second) header.push_back(num(index));
  }
  CsvWriter heatmap(header);
  for (const auto& [layer, cells] : grid) {
    std::vector<std::string> row{num(layer)};
    for (const auto& [_, v] : cells) row.push_back(num(v));
    heatmap.row(row);
  }
  out.add("nie_map.csv", heatmap);

  const auto synergy = nie_sum_vs_all(map, metric);
  const auto all = map.all->value(metric);
  CsvWriter summary({"metric", "n_mediators", "te", "nde_all", "nie_all", "nie_sum", "relative_gap"});
  summary.row({to_string(metric), num(mediators.size()), num(all.te), num(all.nde), num(synergy.nie_all),
               num(synergy.nie_sum), synergy.relative_gap ? num(*synergy.relative_gap) : ""});
  out.add("summary.csv", summary);
  log << "TE = " << num(all.te) << ", NIE-all = " << num(synergy.nie_all) << ", NIE-sum = " << num(synergy.nie_sum)
      << "\n";

  std::vector<int> layers;
  for (const auto& [layer, _] : grid) layers.push_back(layer);
  const auto sweep = per_layer_sweep(*s.model, s.corpus.units, kind, metric, o.top_percent, o.workers, layers);
  CsvWriter per_layer({"layer", "n_mediators", "te", "nie", "nie_sd", "n", "metric"});
  for (const auto& le : sweep) {
    per_layer.row({num(le.layer), num(le.mediators.size()), num(le.value.te), num(le.value.nie), num(le.nie_sd),
                   num(le.value.n), to_string(metric)});
  }
  out.add("per_layer.csv", per_layer);
  return std::max(degenerate, count_degenerate(map.all->units));
}

std::size_t cmd_select(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  const auto metric = parse_metric(o.metric);
  require(!o.mediator.empty(), "--mediator is required");
  const auto kind = parse_mediator(o.mediator);
  check_pairing(s, kind);
  require(o.method == "greedy" || o.method == "topk", "--method must be greedy|topk");
  require(!(kind == MediatorKind::neuron && o.method == "greedy"), "neuron selection supports --method topk only");
  const auto mediators = selected_mediators(s.model->config(), kind, o);
  require(o.budget <= mediators.size(), "--budget exceeds the number of mediators");

  std::vector<MediatorSet> singles;
  for (const auto& m : mediators) singles.push_back({m});
  const auto single_effects = run_mediator_sets(*s.model, s.corpus.units, singles, EffectKinds::nie, o.workers);
  std::vector<double> individual;
  for (const auto& e : single_effects) individual.push_back(individual_nie(e, metric));

  const Model& model = *s.model;
  const auto& units = s.corpus.units;
  const SetEffectOracle oracle = [&](std::span<const MediatorCoord> coords) {
    const MediatorSet set(coords.begin(), coords.end());
    return summarize(run_mediator_sets(model, units, std::span(&set, 1), EffectKinds::nie, 1).front().units,
                     metric)
        .nie;
  };

  SelectionCurve curve;
  if (o.method == "greedy") {
    GreedyOptions go;
    go.workers = o.workers;
    go.candidate_limit = o.candidate_limit;
    go.individual_effects = individual;
    curve = select_greedy(mediators, oracle, o.budget, go);
  } else {
    const std::size_t block = kind == MediatorKind::neuron ? o.block_size : 1;
    curve = top_k_curve(mediators, individual, oracle, o.budget, block, o.workers);
  }

  std::map<MediatorCoord, double> lookup;
  for (std::size_t i = 0; i < mediators.size(); ++i) lookup[mediators[i]] = individual[i];
  CsvWriter order({"rank", "kind", "layer", "index", "individual_nie"});
  for (std::size_t i = 0; i < curve.chosen.size(); ++i) {
    const auto& m = curve.chosen[i];
    order.row({num(i + 1), kind_name(m.kind), num(m.layer), num(m.index), num(lookup.at(m))});
  }
  out.add("selection_order.csv", order);

  CsvWriter steps({"step", "set_size", "cumulative_nie", "reference_nie"});
  for (std::size_t t = 0; t < curve.cumulative.size(); ++t) {
    steps.row({num(t + 1), num(curve.set_sizes[t]), num(curve.cumulative[t]), num(curve.reference)});
  }
  out.add("selection_curve.csv", steps);

  CsvWriter summary({"method", "kind", "budget", "steps", "reference_nie", "metric"});
  summary.row({o.method, kind_name(kind), num(o.budget), num(curve.cumulative.size()), num(curve.reference),
               to_string(metric)});
  out.add("selection_summary.csv", summary);
  log << o.method << ": " << curve.cumulative.size() << " steps, reference NIE-all = " << num(curve.reference)
      << "\n";
  return 0;
}

std::size_t diag_decomposition(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  check_pairing(s, MediatorKind::attention_head);
  const auto heads = selected_mediators(s.model->config(), MediatorKind::attention_head, o);
  const auto report = decomposition_check(*s.model, s.corpus.units, heads, o.workers);

  CsvWriter summary({"te", "nde", "nie", "residual", "slope", "intercept", "r2", "n_points"});
  summary.row({num(report.te), num(report.nde), num(report.nie), num(report.residual), num(report.fit.slope),
               num(report.fit.intercept), num(report.fit.r2), num(report.fit.n)});
  out.add("decomposition.csv", summary);

  CsvWriter units({"example", "residual"});
  for (std::size_t i = 0; i < report.unit_residual.size(); ++i) units.row({num(i), num(report.unit_residual[i])});
  out.add("decomposition_units.csv", units);

  const std::size_t n = s.corpus.units.size();
  CsvWriter scatter({"layer", "head", "example", "rhs", "lhs"});
  for (std::size_t p = 0; p < report.points.size(); ++p) {
    const auto& h = heads[p / n];
    scatter.row({num(h.layer), num(h.index), num(p % n), num(report.points[p].rhs), num(report.points[p].lhs)});
  }
  out.add("decomposition_scatter.csv", scatter);
  log << "TE = " << num(report.te) << ", NDE + NIE = " << num(report.nde + report.nie) << ", fit slope "
      << num(report.fit.slope) << "\n";
  return 0;
}

std::size_t diag_stripes(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  require(o.seed_given, "--seed is required for stripe permutations");
  const auto metric = parse_metric(o.metric);
  check_pairing(s, MediatorKind::neuron);
  const auto neurons = selected_mediators(s.model->config(), MediatorKind::neuron, o);
  std::vector<MediatorSet> singles;
  for (const auto& m : neurons) singles.push_back({m});
  const auto effects = run_mediator_sets(*s.model, s.corpus.units, singles, EffectKinds::nie, o.workers);

  std::map<int, std::vector<double>> by_layer;
  for (std::size_t i = 0; i < neurons.size(); ++i) by_layer[neurons[i].layer].push_back(individual_nie(effects[i], metric));
  std::vector<int> layers;
  std::vector<std::vector<double>> grid;
  for (auto& [layer, row] : by_layer) {
    layers.push_back(layer);
    grid.push_back(std::move(row));
  }
  const auto report = stripe_analysis(grid, o.trials, o.seed);
  CsvWriter rows({"layer", "next_layer", "aligned", "randomized", "trials", "top_fraction"});
  for (std::size_t l = 0; l < report.aligned.size(); ++l) {
    rows.row({num(layers[l]), num(layers[l + 1]), num(report.aligned[l]), num(report.randomized[l]),
              num(report.trials), num(report.top_fraction)});
  }
  out.add("stripes.csv", rows);
  log << "stripe analysis over " << grid.size() << " layers, " << o.trials << " permutation trials\n";
  return 0;
}

std::size_t diag_correlation(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  const auto metric = parse_metric(o.metric);
  const auto outcomes = run_total_effects(*s.model, s.corpus.units, o.workers);
  const auto v = summarize(outcomes, metric);
  std::vector<double> te, bias;
  CsvWriter points({"example", "te", "external_bias"});
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!outcomes[i].aggregate) continue;
    te.push_back(v.per_example_te[i]);
    bias.push_back(s.corpus.external_bias[i]);
    points.row({num(i), num(v.per_example_te[i]), num(s.corpus.external_bias[i])});
  }
  const auto report = correlate_effects(te, bias);
  CsvWriter summary({"r", "n_used", "n_dropped", "metric"});
  summary.row({num(report.r), num(report.n_used), num(report.n_dropped), to_string(metric)});
  out.add("correlation.csv", summary);
  out.add("correlation_points.csv", points);
  log << "r = " << num(report.r) << " over " << report.n_used << " examples\n";
  return count_degenerate(outcomes);
}

std::size_t cmd_diagnostics(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  if (o.analysis == "decomposition") return diag_decomposition(s, o, out, log);
  if (o.analysis == "stripes") return diag_stripes(s, o, out, log);
  if (o.analysis == "correlation") return diag_correlation(s, o, out, log);
  throw UsageError("--analysis must be decomposition|stripes|correlation");
}

// Fixture file: {"fixtures": [{"prompt": str, "ids": [int], "top10": [[id, prob], ...]}]}
std::size_t cmd_check_fixtures(Session& s, const Options& o, Outputs& out, std::ostream& log) {
  require(!o.fixtures.empty(), "--fixtures is required");
  std::ifstream in(o.fixtures);
  if (!in) throw FormatError("cannot open fixtures file " + o.fixtures.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("fixtures file: " + std::string(e.what()));
  }
  if (!doc.contains("fixtures") || !doc["fixtures"].is_array()) throw FormatError("fixtures file lacks a 'fixtures' array");

  CsvWriter rows({"fixture", "token_id", "expected", "actual", "abs_diff"});
  double worst = 0.0;
  std::size_t mismatched_ids = 0;
  const auto& list = doc["fixtures"];
  for (std::size_t f = 0; f < list.size(); ++f) {
    const auto& fx = list[f];
    const auto prompt = fx.at("prompt").get<std::string>();
    const auto ids = fx.at("ids").get<std::vector<TokenId>>();
    if (s.tokenizer->encode(prompt) != ids) {
      ++mismatched_ids;
      log << "fixture " << f << ": tokenization differs for '" << prompt << "'\n";
    }
    const auto probs = s.model->forward(ids).probs;
    for (const auto& pair : fx.at("top10")) {
      const auto id = pair.at(0).get<TokenId>();
      const double expected = pair.at(1).get<double>();
      if (id < 0 || static_cast<std::size_t>(id) >= probs.size()) throw FormatError("fixture token id out of range");
      const double actual = probs[static_cast<std::size_t>(id)];
      worst = std::max(worst, std::abs(actual - expected));
      rows.row({num(f), num(static_cast<int>(id)), num(expected), num(actual), num(std::abs(actual - expected))});
    }
  }
  out.add("fixtures.csv", rows);
  log << list.size() << " fixtures, max |dp| = " << num(worst) << ", tokenization mismatches " << mismatched_ids
      << "\n";
  if (mismatched_ids > 0 || worst > o.tolerance) {
    throw Error("fixture check failed (tolerance " + num(o.tolerance) + ")");
  }
  return 0;
}

void write_outputs(const Options& o, const Outputs& out, const std::string& command, const std::vector<std::string>& args,
                   const Session& s, double seconds) {
  fs::create_directories(o.out_dir);
  json manifest;
  manifest["command"] = command;
  manifest["argv"] = args;
  manifest["engine_version"] = std::string(kEngineVersion);
  if (!o.checkpoint.empty()) {
    manifest["checkpoint"] = {{"path", o.checkpoint.string()}, {"sha256", sha256_file(o.checkpoint)}};
  }
  json inputs = json::array();
  std::vector<fs::path> files = s.corpus.files;
  for (const auto& p : {o.vocab, o.merges, o.fixtures}) {
    if (!p.empty()) files.push_back(p);
  }
  for (const auto& p : files) inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  manifest["inputs"] = inputs;
  manifest["metric"] = o.metric;
  manifest["seed"] = o.seed_given ? json(o.seed) : json(nullptr);
  manifest["workers"] = o.workers;
  json outputs = json::array();
  for (const auto& [name, text] : out.files) {
    const auto path = o.out_dir / name;
    std::ofstream f(path, std::ios::binary);
    f << text;
    f.close();
    if (!f) throw Error("cannot write " + path.string());
    outputs.push_back({{"file", name}, {"sha256", sha256_file(path)}});
  }
  manifest["outputs"] = outputs;
  manifest["wall_clock_seconds"] = seconds;
  std::ofstream m(o.out_dir / "manifest.json");
  m << manifest.dump(2) << "\n";
}

void add_corpus_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--checkpoint", o.checkpoint, "CMA1 checkpoint file");
  cmd->add_option("--vocab", o.vocab, "vocabulary file (token<TAB>id)");
  cmd->add_option("--merges", o.merges, "BPE merges file; omit for a word-level vocabulary");
  cmd->add_option("--corpus", o.corpus, "Winograd-style corpus file");
  cmd->add_option("--templates", o.templates, "Professions templates file");
  cmd->add_option("--professions", o.professions, "Professions ratings file");
  cmd->add_option("--mode", o.mode, "binary|neutral");
  cmd->add_option("--metric", o.metric, "original|normdiff|tv|linf");
  cmd->add_option("--workers", o.workers, "worker threads")->check(CLI::Range(1, 1024));
  cmd->add_option("--out-dir", o.out_dir, "output directory")->required();
  cmd->add_flag("--strict", o.strict, "exit 3 if any probability was floored");
  cmd->add_flag("--null-intervention", o.null_intervention, "use the null prompt as the intervened prompt");
}

void add_mediator_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--mediator", o.mediator, "neuron|head");
  cmd->add_option("--layers", o.layers, "comma-separated layers")->delimiter(',');
  cmd->add_option("--heads", o.heads, "comma-separated head indices")->delimiter(',');
}

int run_replay(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"cma replay"};
  fs::path manifest_path, out_dir;
  app.add_option("--manifest", manifest_path)->required();
  app.add_option("--out-dir", out_dir);
  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }
  std::ifstream in(manifest_path);
  if (!in) {
    err << "error: cannot open " << manifest_path << "\n";
    return kDataError;
  }
  std::vector<std::string> replay;
  try {
    replay = json::parse(in).at("argv").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    err << "error: manifest: " << e.what() << "\n";
    return kDataError;
  }
  if (!out_dir.empty()) {
    for (std::size_t i = 0; i + 1 < replay.size(); ++i) {
      if (replay[i] == "--out-dir") replay[i + 1] = out_dir.string();
    }
  }
  return run(replay, out, err);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (!args.empty() && args.front() == "replay") return run_replay(args, out, err);

  Options o;
  CLI::App app{"Causal mediation analysis for GPT2-style language models", "cma"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kEngineVersion));

  auto* init = app.add_subcommand("init-random", "write a randomly initialized CMA1 checkpoint");
  init->add_option("--checkpoint", o.checkpoint, "output file")->required();
  init->add_option("--n-layers", o.config.n_layers)->required();
  init->add_option("--n-heads", o.config.n_heads)->required();
  init->add_option("--d-model", o.config.d_model)->required();
  init->add_option("--d-ff", o.config.d_ff)->required();
  init->add_option("--vocab-size", o.config.vocab_size)->required();
  init->add_option("--max-positions", o.config.max_positions)->required();
  init->add_option("--std", o.init_std, "weight standard deviation");
  auto* init_seed = init->add_option("--seed", o.seed)->required();

  auto* te = app.add_subcommand("total-effect", "per-example and population total effects");
  add_corpus_flags(te, o);
  te->add_flag("--filter-te", o.filter_te, "also emit the filtered corpus and its TE");

  auto* mediate = app.add_subcommand("mediate", "per-mediator TE/NDE/NIE maps and per-layer sweeps");
  add_corpus_flags(mediate, o);
  add_mediator_flags(mediate, o);
  mediate->add_option("--top-percent", o.top_percent, "neurons kept per layer in the sweep");

  auto* select = app.add_subcommand("select", "Top-k or greedy mediator selection curves");
  add_corpus_flags(select, o);
  add_mediator_flags(select, o);
  select->add_option("--method", o.method, "greedy|topk");
  select->add_option("--budget", o.budget, "number of mediators to select");
  select->add_option("--block-size", o.block_size, "neurons per Top-k step")->check(CLI::PositiveNumber);
  select->add_option("--candidate-limit", o.candidate_limit, "greedy candidates per step (0 = all)");

  auto* diag = app.add_subcommand("diagnostics", "decomposition, stripe and correlation analyses");
  add_corpus_flags(diag, o);
  add_mediator_flags(diag, o);
  diag->add_option("--analysis", o.analysis, "decomposition|stripes|correlation")->required();
  auto* diag_seed = diag->add_option("--seed", o.seed, "permutation seed");
  diag->add_option("--trials", o.trials, "permutation trials")->check(CLI::PositiveNumber);

  auto* fixtures = app.add_subcommand("check-fixtures", "compare next-token probabilities with reference fixtures");
  fixtures->add_option("--checkpoint", o.checkpoint)->required();
  fixtures->add_option("--vocab", o.vocab)->required();
  fixtures->add_option("--merges", o.merges);
  fixtures->add_option("--fixtures", o.fixtures)->required();
  fixtures->add_option("--tolerance", o.tolerance, "absolute probability tolerance");
  fixtures->add_option("--out-dir", o.out_dir)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  o.seed_given = init_seed->count() > 0 || diag_seed->count() > 0;

  const auto start = std::chrono::steady_clock::now();
  try {
    if (init->parsed()) {
      o.config.validate();
      save_checkpoint(init_random(o.config, o.seed, o.init_std), o.checkpoint);
      out << "wrote " << o.checkpoint.string() << "\n";
      return kOk;
    }
    Session s;
    Outputs outputs;
    std::string command;
    std::size_t degenerate = 0;
    load_model(s, o);
    load_tokenizer(s, o);
    if (fixtures->parsed()) {
      command = "check-fixtures";
      degenerate = cmd_check_fixtures(s, o, outputs, out);
    } else {
      load_corpus(s, o);
      if (te->parsed()) {
        command = "total-effect";
        degenerate = cmd_total_effect(s, o, outputs, out);
      } else if (mediate->parsed()) {
        command = "mediate";
        degenerate = cmd_mediate(s, o, outputs, out);
      } else if (select->parsed()) {
        command = "select";
        degenerate = cmd_select(s, o, outputs, out);
      } else {
        command = "diagnostics";
        degenerate = cmd_diagnostics(s, o, outputs, out);
      }
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_outputs(o, outputs, command, args, s, seconds);
    if (degenerate > 0) {
      err << "warning: " << degenerate << " example(s) hit the probability floor\n";
      if (o.strict) return kDegenerate;
    }
    return kOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DegenerateProbability& e) {
    err << "numeric degeneracy: " << e.what() << "\n";
    return o.strict ? kDegenerate : kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace cma::cli
