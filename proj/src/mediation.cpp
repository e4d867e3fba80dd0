#include "cma/mediation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "cma/errors.hpp"
#include "cma/parallel.hpp"
#include "cma/selection.hpp"

namespace cma {

std::vector<MediationUnit> prepare_profession_units(std::span<const TemplateExample> examples,
                                                    const Tokenizer& tokenizer) {
  std::vector<MediationUnit> units;
  units.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto gendered = apply_set_gender(ex, tokenizer);
    if (gendered.ids.size() != ex.prompt_ids.size() || ex.site.end - ex.site.begin != 1 ||
        gendered.site.end - gendered.site.begin != 1) {
      throw InterventionError("set-gender must swap one token for one token: '" + ex.prompt + "' -> '" +
                              gendered.text + "'");
    }
    MediationUnit u;
    u.null_prompt = ex.prompt_ids;
    u.intervened_prompt = gendered.ids;
    u.site = ex.site.begin;
    u.anti = tokenizer.encode(" " + ex.anti_stereotypical_candidate);
    u.stereo = tokenizer.encode(" " + ex.stereotypical_candidate);
    u.aggregate = ex.aggregate;
    units.push_back(std::move(u));
  }
  return units;
}

std::vector<MediationUnit> prepare_winograd_units(std::span<const WinogradExample> examples,
                                                  const Tokenizer& tokenizer) {
  std::vector<MediationUnit> units;
  units.reserve(examples.size());
  for (const auto& ex : examples) {
    MediationUnit u;
    u.null_prompt = tokenizer.encode(ex.shared_prompt);
    u.intervened_prompt = tokenizer.encode(apply_swap_gender(ex));
    const std::size_t n = u.null_prompt.size();
    if (n == 0 || u.intervened_prompt.size() != n ||
        !std::equal(u.null_prompt.begin(), u.null_prompt.end() - 1, u.intervened_prompt.begin())) {
      throw InterventionError("swap-gender must change only the final token: '" + ex.shared_prompt + "'");
    }
    u.site = static_cast<int>(n) - 1;
    u.anti = tokenizer.encode(" " + ex.anti_stereotypical_continuation);
    u.stereo = tokenizer.encode(" " + ex.stereotypical_continuation);
    units.push_back(std::move(u));
  }
  return units;
}

MediatorSet all_neurons(const ModelConfig& config) {
  MediatorSet out;
  for (int l = 0; l <= static_cast<int>(config.n_layers); ++l) {
    auto layer = neurons_in_layer(config, l);
    out.insert(out.end(), layer.begin(), layer.end());
  }
  return out;
}

MediatorSet neurons_in_layer(const ModelConfig& config, int layer) {
  MediatorSet out;
  for (int k = 0; k < static_cast<int>(config.d_model); ++k) out.push_back({MediatorKind::neuron, layer, k});
  return out;
}

MediatorSet all_heads(const ModelConfig& config) {
  MediatorSet out;
  for (int l = 1; l <= static_cast<int>(config.n_layers); ++l) {
    auto layer = heads_in_layer(config, l);
    out.insert(out.end(), layer.begin(), layer.end());
  }
  return out;
}

MediatorSet heads_in_layer(const ModelConfig& config, int layer) {
  MediatorSet out;
  for (int h = 0; h < static_cast<int>(config.n_heads); ++h) out.push_back({MediatorKind::attention_head, layer, h});
  return out;
}

namespace {

void check_unit(const MediationUnit& u) {
  if (u.null_prompt.empty() || u.null_prompt.size() != u.intervened_prompt.size()) {
    throw InterventionError("null and intervened prompts must have the same non-zero length");
  }
  if (u.site < 0 || static_cast<std::size_t>(u.site) >= u.null_prompt.size()) {
    throw InterventionError("mediator site outside the prompt");
  }
}

bool single_tokens(const MediationUnit& u) { return u.anti.size() == 1 && u.stereo.size() == 1; }

// Forward pass that records a trace and scores the unit's candidates.
CandidateDistribution record_and_score(const Model& model, std::span<const TokenId> prompt,
                                       const MediationUnit& u, Trace& trace) {
  auto result = model.forward(prompt, {}, true);
  trace = std::move(*result.trace);
  if (single_tokens(u)) {
    return make_distribution(result.probs.at(static_cast<std::size_t>(u.anti[0])),
                             result.probs.at(static_cast<std::size_t>(u.stereo[0])));
  }
  return score_pair(model, prompt, u.anti, u.stereo);
}

double sample_sd(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mean = population_mean(v);
  std::vector<double> sq(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - mean) * (v[i] - mean);
  return std::sqrt(pairwise_sum(sq) / static_cast<double>(v.size() - 1));
}

}  // namespace

std::vector<UnitOutcome> run_total_effects(const Model& model, std::span<const MediationUnit> units, int workers) {
  std::vector<UnitOutcome> out(units.size());
  parallel_for(units.size(), workers, [&](std::size_t i) {
    const auto& u = units[i];
    check_unit(u);
    out[i].null = score_pair(model, u.null_prompt, u.anti, u.stereo);
    out[i].intervened = score_pair(model, u.intervened_prompt, u.anti, u.stereo);
    out[i].aggregate = u.aggregate;
  });
  return out;
}

std::vector<MediatorEffect> run_mediator_sets(const Model& model, std::span<const MediationUnit> units,
                                              std::span<const MediatorSet> sets, EffectKinds which,
                                              int workers) {
  std::vector<MediatorEffect> out(sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s) {
    out[s].mediators = sets[s];
    out[s].units.resize(units.size());
  }
  const bool want_nie = which != EffectKinds::nde;
  const bool want_nde = which != EffectKinds::nie;

  parallel_for(units.size(), workers, [&](std::size_t i) {
    const auto& u = units[i];
    check_unit(u);
    Trace null_trace, gendered_trace;
    const auto null = record_and_score(model, u.null_prompt, u, null_trace);
    const auto gendered = record_and_score(model, u.intervened_prompt, u, gendered_trace);
    for (std::size_t s = 0; s < sets.size(); ++s) {
      UnitOutcome& o = out[s].units[i];
      o.null = null;
      o.intervened = gendered;
      o.aggregate = u.aggregate;
      if (want_nie) {
        const auto spec = spec_from_trace(gendered_trace, sets[s], u.site);
        o.indirect = score_pair(model, u.null_prompt, u.anti, u.stereo, spec);
      }
      if (want_nde) {
        const auto spec = spec_from_trace(null_trace, sets[s], u.site);
        o.direct = score_pair(model, u.intervened_prompt, u.anti, u.stereo, spec);
      }
    }
  });
  return out;
}

MediatorEffect run_neuron_nie(const Model& model, std::span<const MediationUnit> units,
                              const MediatorSet& neurons, int workers) {
  for (const auto& m : neurons) {
    if (m.kind != MediatorKind::neuron) throw InterventionError("run_neuron_nie expects neuron mediators");
  }
  return std::move(run_mediator_sets(model, units, std::span(&neurons, 1), EffectKinds::nie, workers).front());
}

MediatorEffect run_attention_effects(const Model& model, std::span<const MediationUnit> units,
                                     const MediatorSet& heads, EffectKinds which, int workers) {
  for (const auto& m : heads) {
    if (m.kind != MediatorKind::attention_head) {
      throw InterventionError("run_attention_effects expects attention-head mediators");
    }
  }
  return std::move(run_mediator_sets(model, units, std::span(&heads, 1), which, workers).front());
}

void EffectMap::validate() const {
  std::set<MediatorCoord> seen;
  for (const auto& e : singles) {
    if (e.mediators.size() != 1) throw Error("effect map entry must hold exactly one mediator");
    if (!seen.insert(e.mediators.front()).second) {
      throw Error("mediator " + to_string(e.mediators.front()) + " appears twice in effect map");
    }
  }
}

EffectMap build_effect_map(const Model& model, std::span<const MediationUnit> units,
                           const MediatorSet& mediators, EffectKinds which, int workers) {
  EffectMap map;
  map.kind = mediators.empty() ? MediatorKind::neuron : mediators.front().kind;
  std::vector<MediatorSet> sets;
  sets.reserve(mediators.size() + 1);
  for (const auto& m : mediators) sets.push_back({m});
  sets.push_back(mediators);
  auto effects = run_mediator_sets(model, units, sets, which, workers);
  map.all = std::move(effects.back());
  effects.pop_back();
  map.singles = std::move(effects);
  map.validate();
  return map;
}

std::vector<LayerEffect> per_layer_sweep(const Model& model, std::span<const MediationUnit> units,
                                         MediatorKind kind, EffectMetric metric, double top_percent,
                                         int workers, std::span<const int> layers) {
  const auto& cfg = model.config();
  const int first = kind == MediatorKind::neuron ? 0 : 1;
  std::vector<int> sweep(layers.begin(), layers.end());
  if (sweep.empty()) {
    for (int l = first; l <= static_cast<int>(cfg.n_layers); ++l) sweep.push_back(l);
  }
  for (int l : sweep) {
    if (l < first || l > static_cast<int>(cfg.n_layers)) {
      throw InterventionError("layer " + std::to_string(l) + " out of range");
    }
  }
  std::vector<LayerEffect> out;
  auto finish = [&](int layer, MediatorEffect effect) {
    LayerEffect le;
    le.layer = layer;
    le.mediators = std::move(effect.mediators);
    le.value = summarize(effect.units, metric);
    std::vector<double> agg;
    for (std::size_t i = 0; i < effect.units.size(); ++i) {
      if (effect.units[i].aggregate) agg.push_back(le.value.per_example_nie[i]);
    }
    le.nie_sd = sample_sd(agg);
    out.push_back(std::move(le));
  };

  if (kind == MediatorKind::attention_head) {
    std::vector<MediatorSet> sets;
    for (int l : sweep) sets.push_back(heads_in_layer(cfg, l));
    auto effects = run_mediator_sets(model, units, sets, EffectKinds::nie, workers);
    for (std::size_t i = 0; i < effects.size(); ++i) finish(sweep[i], std::move(effects[i]));
    return out;
  }

  if (!(top_percent > 0.0) || top_percent > 100.0) throw UsageError("top percent must lie in (0, 100]");
  const auto k = static_cast<std::size_t>(
      std::max(1.0, std::ceil(static_cast<double>(cfg.d_model) * top_percent / 100.0 - 1e-9)));
  for (int l : sweep) {
    const auto layer = neurons_in_layer(cfg, l);
    std::vector<MediatorSet> singles;
    for (const auto& m : layer) singles.push_back({m});
    const auto effects = run_mediator_sets(model, units, singles, EffectKinds::nie, workers);
    std::vector<double> nie(layer.size());
    for (std::size_t i = 0; i < layer.size(); ++i) nie[i] = summarize(effects[i].units, metric).nie;
    MediatorSet top;
    for (std::size_t idx : select_top_k(nie, layer, k)) top.push_back(layer[idx]);
    finish(l, run_neuron_nie(model, units, top, workers));
  }
  return out;
}

SynergyReport nie_sum_vs_all(const EffectMap& map, EffectMetric metric) {
  if (!map.all) throw Error("effect map has no concurrent (all-mediator) entry");
  SynergyReport r;
  std::vector<double> singles;
  for (const auto& e : map.singles) singles.push_back(e.value(metric).nie);
  r.nie_sum = pairwise_sum(singles);
  r.nie_all = map.all->value(metric).nie;
  if (r.nie_all != 0.0) r.relative_gap = std::abs(r.nie_sum - r.nie_all) / std::abs(r.nie_all);
  return r;
}

std::vector<BiasQuad> bias_quads(std::span<const UnitOutcome> units) {
  std::vector<BiasQuad> out;
  out.reserve(units.size());
  for (const auto& u : units) {
    if (!u.direct || !u.indirect) throw Error("bias quads need both direct and indirect outcomes");
    out.push_back({bias_y(u.null), bias_y(u.intervened), bias_y(*u.direct), bias_y(*u.indirect), u.aggregate});
  }
  return out;
}

Eq9Point no_interaction_sides(const BiasQuad& q) {
  if (!(q.y_null > 0.0)) throw DegenerateProbability("null bias measure is zero");
  return {(q.y_null_zx - q.y_null) / q.y_null, (q.y_x - q.y_x_znull) / q.y_null};
}

LinearFit fit_line(std::span<const Eq9Point> points) {
  LinearFit fit;
  fit.n = points.size();
  if (points.size() < 2) throw Error("a line fit needs at least two points");
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    xs.push_back(p.rhs);
    ys.push_back(p.lhs);
  }
  const double mx = population_mean(xs), my = population_mean(ys);
  std::vector<double> sxy(points.size()), sxx(points.size()), syy(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    sxy[i] = (xs[i] - mx) * (ys[i] - my);
    sxx[i] = (xs[i] - mx) * (xs[i] - mx);
    syy[i] = (ys[i] - my) * (ys[i] - my);
  }
  const double Sxx = pairwise_sum(sxx);
  if (Sxx == 0.0) throw Error("line fit is undefined: all x values are equal");
  fit.slope = pairwise_sum(sxy) / Sxx;
  fit.intercept = my - fit.slope * mx;
  std::vector<double> res(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double e = ys[i] - (fit.intercept + fit.slope * xs[i]);
    res[i] = e * e;
  }
  const double ss_res = pairwise_sum(res), ss_tot = pairwise_sum(syy);
  fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
  return fit;
}

DecompositionReport decomposition_check(std::span<const BiasQuad> concurrent, std::span<const BiasQuad> scatter) {
  DecompositionReport r;
  std::vector<double> te, nde, nie;
  for (const auto& q : concurrent) {
    const double t = total_effect(q.y_x, q.y_null);
    const double d = nde_unit(q.y_x_znull, q.y_null);
    const double n = nie_unit(q.y_null_zx, q.y_null);
    r.unit_residual.push_back(t - (d + n));
    if (!q.aggregate) continue;
    te.push_back(t);
    nde.push_back(d);
    nie.push_back(n);
  }
  r.te = population_mean(te);
  r.nde = population_mean(nde);
  r.nie = population_mean(nie);
  r.residual = r.te - (r.nde + r.nie);
  for (const auto& q : scatter) r.points.push_back(no_interaction_sides(q));
  if (r.points.size() >= 2) r.fit = fit_line(r.points);
  return r;
}

DecompositionReport decomposition_check(const Model& model, std::span<const MediationUnit> units,
                                        const MediatorSet& heads, int workers) {
  std::vector<MediatorSet> sets;
  for (const auto& h : heads) sets.push_back({h});
  sets.push_back(heads);
  const auto effects = run_mediator_sets(model, units, sets, EffectKinds::both, workers);
  const auto concurrent = bias_quads(effects.back().units);
  std::vector<BiasQuad> scatter;
  for (std::size_t s = 0; s + 1 < effects.size(); ++s) {
    const auto q = bias_quads(effects[s].units);
    scatter.insert(scatter.end(), q.begin(), q.end());
  }
  return decomposition_check(concurrent, scatter);
}

std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& engine) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::uint64_t m = i;
    const std::uint64_t threshold = (0 - m) % m;  // 2^64 mod m
    std::uint64_t x = engine();
    while (x < threshold) x = engine();
    std::swap(perm[i - 1], perm[static_cast<std::size_t>(x % m)]);
  }
  return perm;
}

namespace {

std::vector<bool> effective_mask(const std::vector<double>& layer, double top_fraction) {
  const auto count = static_cast<std::size_t>(
      std::max(1.0, std::ceil(static_cast<double>(layer.size()) * top_fraction - 1e-9)));
  std::vector<std::size_t> order(layer.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return layer[a] > layer[b]; });
  std::vector<bool> mask(layer.size(), false);
  for (std::size_t i = 0; i < std::min(count, order.size()); ++i) mask[order[i]] = true;
  return mask;
}

double continuation_fraction(const std::vector<bool>& lower, const std::vector<bool>& upper,
                             const std::vector<std::size_t>* perm) {
  std::size_t effective = 0, continued = 0;
  for (std::size_t k = 0; k < lower.size(); ++k) {
    if (!lower[k]) continue;
    ++effective;
    if (upper[perm ? (*perm)[k] : k]) ++continued;
  }
  return effective ? static_cast<double>(continued) / static_cast<double>(effective) : 0.0;
}

}  // namespace

StripeReport stripe_analysis(const std::vector<std::vector<double>>& grid, int trials, std::uint64_t seed,
                             double top_fraction) {
  if (grid.size() < 2) throw Error("stripe analysis needs at least two layers");
  if (trials < 1) throw UsageError("stripe analysis needs at least one permutation trial");
  if (!(top_fraction > 0.0) || top_fraction > 1.0) throw UsageError("top fraction must lie in (0, 1]");
  const std::size_t width = grid.front().size();
  for (const auto& layer : grid) {
    if (layer.size() != width || width == 0) throw Error("stripe analysis needs a dense rectangular grid");
  }
  StripeReport r;
  r.trials = trials;
  r.top_fraction = top_fraction;
  std::vector<std::vector<bool>> masks;
  for (const auto& layer : grid) masks.push_back(effective_mask(layer, top_fraction));
  std::mt19937_64 engine(seed);
  for (std::size_t l = 0; l + 1 < grid.size(); ++l) {
    r.aligned.push_back(continuation_fraction(masks[l], masks[l + 1], nullptr));
    std::vector<double> shuffled;
    for (int t = 0; t < trials; ++t) {
      const auto perm = random_permutation(width, engine);
      shuffled.push_back(continuation_fraction(masks[l], masks[l + 1], &perm));
    }
    r.randomized.push_back(population_mean(shuffled));
  }
  return r;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("pearson: length mismatch");
  if (x.size() < 3) throw Error("correlation needs at least 3 pairs");
  const double mx = population_mean(x), my = population_mean(y);
  std::vector<double> sxy(x.size()), sxx(x.size()), syy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy[i] = (x[i] - mx) * (y[i] - my);
    sxx[i] = (x[i] - mx) * (x[i] - mx);
    syy[i] = (y[i] - my) * (y[i] - my);
  }
  const double denom = std::sqrt(pairwise_sum(sxx) * pairwise_sum(syy));
  if (denom == 0.0) throw Error("correlation undefined: a variable is constant");
  return pairwise_sum(sxy) / denom;
}

CorrelationReport correlate_effects(std::span<const double> per_example_te, std::span<const double> external_bias) {
  if (per_example_te.size() != external_bias.size()) throw Error("correlate_effects: length mismatch");
  CorrelationReport r;
  std::vector<double> x, y;
  for (std::size_t i = 0; i < per_example_te.size(); ++i) {
    if (!(per_example_te[i] > 0.0) || !std::isfinite(external_bias[i])) {
      ++r.n_dropped;
      continue;
    }
    x.push_back(std::log(per_example_te[i]));
    y.push_back(external_bias[i]);
  }
  r.n_used = x.size();
  r.r = pearson(x, y);
  return r;
}

}  // namespace cma
