#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cma/model.hpp"

namespace cma {

// Raw candidate probabilities; multi-token candidates are geometric means.
struct CandidateDistribution {
  double p_anti = 0.0;
  double p_stereo = 0.0;
  bool degenerate = false;  // a probability was floored

  // {anti, stereo} normalized to sum to one.
  std::array<double, 2> normalized() const;
};

inline constexpr double kProbabilityFloor = 1e-12;

// Applies the probability floor, setting `degenerate` when it bites.
CandidateDistribution make_distribution(double p_anti, double p_stereo);

enum class EffectMetric { original, normalized_difference, total_variation, relative_linf };

std::string to_string(EffectMetric metric);
EffectMetric parse_metric(const std::string& name);  // original|normdiff|tv|linf

// y(u) = p_anti / p_stereo.
double bias_y(const CandidateDistribution& dist);

double total_effect(double y_interv, double y_null);
double nde_unit(double y_x_znull, double y_null);
double nie_unit(double y_null_zx, double y_null);

// Difference of p_anti - p_stereo on normalized probabilities, range [-2, 2].
double alt_effect_normdiff(const CandidateDistribution& interv, const CandidateDistribution& null);

double tv_distance(std::array<double, 2> p, std::array<double, 2> q);
double rel_linf(std::array<double, 2> p, std::array<double, 2> q);

// Unit-level effect of a counterfactual outcome against the null outcome.
// For the distance metrics the null distribution is P and the counterfactual Q.
double unit_effect(EffectMetric metric, const CandidateDistribution& counterfactual,
                   const CandidateDistribution& null);

// Geometric mean of the candidate's token probabilities.
double score_candidate(const Model& model, std::span<const TokenId> prompt,
                       std::span<const TokenId> candidate, const InterventionSpec& spec = {});

// Scores both candidates, sharing one pass when both are single tokens.
CandidateDistribution score_pair(const Model& model, std::span<const TokenId> prompt,
                                 std::span<const TokenId> anti, std::span<const TokenId> stereo,
                                 const InterventionSpec& spec = {});

// Pairwise (cascade) summation in index order.
double pairwise_sum(std::span<const double> values);
double population_mean(std::span<const double> values);

// Outcomes for one unit under the four readings used by the effects.
struct UnitOutcome {
  CandidateDistribution null;
  CandidateDistribution intervened;                 // y_x
  std::optional<CandidateDistribution> direct;      // y_{x, z_null}
  std::optional<CandidateDistribution> indirect;    // y_{null, z_x}
  bool aggregate = true;

  bool degenerate() const;
};

struct EffectValue {
  EffectMetric metric = EffectMetric::original;
  double te = 0.0;
  double nde = 0.0;
  double nie = 0.0;
  std::size_t n = 0;  // units entering the population means
  std::vector<double> per_example_te;
  std::vector<double> per_example_nde;  // empty when no direct outcomes
  std::vector<double> per_example_nie;  // empty when no indirect outcomes
};

// Per-unit effects for every unit; population values average aggregated units.
EffectValue summarize(std::span<const UnitOutcome> units, EffectMetric metric);

}  // namespace cma
