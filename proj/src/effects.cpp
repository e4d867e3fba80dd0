#include "cma/effects.hpp"

#include <algorithm>
#include <cmath>

#include "cma/errors.hpp"

namespace cma {

std::array<double, 2> CandidateDistribution::normalized() const {
  const double s = p_anti + p_stereo;
  if (!(s > 0.0)) throw DegenerateProbability("candidate probabilities sum to zero");
  return {p_anti / s, p_stereo / s};
}

CandidateDistribution make_distribution(double p_anti, double p_stereo) {
  CandidateDistribution d{p_anti, p_stereo, false};
  if (!(d.p_anti >= kProbabilityFloor)) {
    d.p_anti = kProbabilityFloor;
    d.degenerate = true;
  }
  if (!(d.p_stereo >= kProbabilityFloor)) {
    d.p_stereo = kProbabilityFloor;
    d.degenerate = true;
  }
  return d;
}

std::string to_string(EffectMetric metric) {
  switch (metric) {
    case EffectMetric::original: return "original";
    case EffectMetric::normalized_difference: return "normdiff";
    case EffectMetric::total_variation: return "tv";
    case EffectMetric::relative_linf: return "linf";
  }
  return "?";
}

EffectMetric parse_metric(const std::string& name) {
  if (name == "original") return EffectMetric::original;
  if (name == "normdiff") return EffectMetric::normalized_difference;
  if (name == "tv") return EffectMetric::total_variation;
  if (name == "linf") return EffectMetric::relative_linf;
  throw UsageError("unknown metric '" + name + "' (expected original|normdiff|tv|linf)");
}

double bias_y(const CandidateDistribution& dist) {
  if (!(dist.p_stereo > 0.0)) throw DegenerateProbability("stereotypical candidate has zero probability");
  return dist.p_anti / dist.p_stereo;
}

double total_effect(double y_interv, double y_null) {
  if (!(y_null > 0.0)) throw DegenerateProbability("null bias measure is zero");
  return y_interv / y_null - 1.0;
}

double nde_unit(double y_x_znull, double y_null) { return total_effect(y_x_znull, y_null); }
double nie_unit(double y_null_zx, double y_null) { return total_effect(y_null_zx, y_null); }

double alt_effect_normdiff(const CandidateDistribution& interv, const CandidateDistribution& null) {
  const auto a = interv.normalized();
  const auto b = null.normalized();
  return (a[0] - a[1]) - (b[0] - b[1]);
}

double tv_distance(std::array<double, 2> p, std::array<double, 2> q) {
  return 0.5 * (std::abs(p[0] - q[0]) + std::abs(p[1] - q[1]));
}

double rel_linf(std::array<double, 2> p, std::array<double, 2> q) {
  double sup = 0.0;
  for (int a = 0; a < 2; ++a) {
    if (!(p[a] > 0.0) || !(q[a] > 0.0)) throw DegenerateProbability("relative l-inf needs positive probabilities");
    sup = std::max(sup, std::log(std::max(p[a] / q[a], q[a] / p[a])));
  }
  return sup;
}

double unit_effect(EffectMetric metric, const CandidateDistribution& counterfactual,
                   const CandidateDistribution& null) {
  switch (metric) {
    case EffectMetric::original:
      return total_effect(bias_y(counterfactual), bias_y(null));
    case EffectMetric::normalized_difference:
      return alt_effect_normdiff(counterfactual, null);
    case EffectMetric::total_variation:
      return tv_distance(null.normalized(), counterfactual.normalized());
    case EffectMetric::relative_linf:
      return rel_linf(null.normalized(), counterfactual.normalized());
  }
  return 0.0;
}

double score_candidate(const Model& model, std::span<const TokenId> prompt,
                       std::span<const TokenId> candidate, const InterventionSpec& spec) {
  if (candidate.size() == 1) return model.forward(prompt, spec).probs.at(static_cast<std::size_t>(candidate[0]));
  const auto logp = model.sequence_log_prob(prompt, candidate, spec);
  return std::exp(pairwise_sum(logp) / static_cast<double>(logp.size()));
}

CandidateDistribution score_pair(const Model& model, std::span<const TokenId> prompt,
                                 std::span<const TokenId> anti, std::span<const TokenId> stereo,
                                 const InterventionSpec& spec) {
  if (anti.empty() || stereo.empty()) throw InterventionError("candidates must be non-empty");
  if (anti.size() == 1 && stereo.size() == 1) {
    const auto probs = model.forward(prompt, spec).probs;
    return make_distribution(probs.at(static_cast<std::size_t>(anti[0])),
                             probs.at(static_cast<std::size_t>(stereo[0])));
  }
  return make_distribution(score_candidate(model, prompt, anti, spec),
                           score_candidate(model, prompt, stereo, spec));
}

double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

double population_mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return pairwise_sum(values) / static_cast<double>(values.size());
}

bool UnitOutcome::degenerate() const {
  return null.degenerate || intervened.degenerate || (direct && direct->degenerate) ||
         (indirect && indirect->degenerate);
}

EffectValue summarize(std::span<const UnitOutcome> units, EffectMetric metric) {
  EffectValue v;
  v.metric = metric;
  const bool has_direct = !units.empty() && std::all_of(units.begin(), units.end(),
                                                        [](const UnitOutcome& u) { return u.direct.has_value(); });
  const bool has_indirect = !units.empty() && std::all_of(units.begin(), units.end(),
                                                          [](const UnitOutcome& u) { return u.indirect.has_value(); });
  std::vector<double> te, nde, nie;
  for (const auto& u : units) {
    const double t = unit_effect(metric, u.intervened, u.null);
    v.per_example_te.push_back(t);
    if (has_direct) v.per_example_nde.push_back(unit_effect(metric, *u.direct, u.null));
    if (has_indirect) v.per_example_nie.push_back(unit_effect(metric, *u.indirect, u.null));
    if (!u.aggregate) continue;
    te.push_back(t);
    if (has_direct) nde.push_back(v.per_example_nde.back());
    if (has_indirect) nie.push_back(v.per_example_nie.back());
  }
  v.n = te.size();
  v.te = population_mean(te);
  v.nde = population_mean(nde);
  v.nie = population_mean(nie);
  return v;
}

}  // namespace cma
