#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cma/datasets.hpp"
#include "cma/effects.hpp"
#include "cma/model.hpp"

namespace cma {

// One analysis unit in token space. `site` is where mediators are read and
// patched: the profession token for neurons, the final pronoun for heads.
struct MediationUnit {
  std::vector<TokenId> null_prompt;
  std::vector<TokenId> intervened_prompt;  // same length as null_prompt
  int site = 0;
  std::vector<TokenId> anti;
  std::vector<TokenId> stereo;
  bool aggregate = true;
};

// Candidates are tokenized with a leading space, as they follow the prompt.
std::vector<MediationUnit> prepare_profession_units(std::span<const TemplateExample> examples,
                                                    const Tokenizer& tokenizer);
std::vector<MediationUnit> prepare_winograd_units(std::span<const WinogradExample> examples,
                                                  const Tokenizer& tokenizer);

using MediatorSet = std::vector<MediatorCoord>;

MediatorSet all_neurons(const ModelConfig& config);                 // layers 0..n_layers
MediatorSet neurons_in_layer(const ModelConfig& config, int layer);
MediatorSet all_heads(const ModelConfig& config);                   // layers 1..n_layers
MediatorSet heads_in_layer(const ModelConfig& config, int layer);

enum class EffectKinds { nie, nde, both };

struct MediatorEffect {
  MediatorSet mediators;
  std::vector<UnitOutcome> units;  // index-aligned with the input units

  EffectValue value(EffectMetric metric) const { return summarize(units, metric); }
};

// Null and intervened outcomes only.
std::vector<UnitOutcome> run_total_effects(const Model& model, std::span<const MediationUnit> units,
                                           int workers = 1);

// For every mediator set, patches the set at each unit's site:
//   NIE: null prompt with the mediators taken from the intervened trace;
//   NDE: intervened prompt with the mediators pinned to the null trace.
// Each unit's two traces are recorded once and shared by all sets.
std::vector<MediatorEffect> run_mediator_sets(const Model& model, std::span<const MediationUnit> units,
                                              std::span<const MediatorSet> sets, EffectKinds which,
                                              int workers = 1);

MediatorEffect run_neuron_nie(const Model& model, std::span<const MediationUnit> units,
                              const MediatorSet& neurons, int workers = 1);
MediatorEffect run_attention_effects(const Model& model, std::span<const MediationUnit> units,
                                     const MediatorSet& heads, EffectKinds which, int workers = 1);

struct EffectMap {
  MediatorKind kind = MediatorKind::neuron;
  std::vector<MediatorEffect> singles;  // one entry per mediator
  std::optional<MediatorEffect> all;    // every mediator patched concurrently
  std::map<std::string, std::string> metadata;

  // Throws if a mediator appears twice.
  void validate() const;
};

EffectMap build_effect_map(const Model& model, std::span<const MediationUnit> units,
                           const MediatorSet& mediators, EffectKinds which, int workers = 1);

struct LayerEffect {
  int layer = 0;
  MediatorSet mediators;
  EffectValue value;
  double nie_sd = 0.0;  // spread of unit-level NIE over aggregated units
};

// Heads: all heads of each layer concurrently. Neurons: per layer, the top
// `top_percent` of neurons by individual NIE, then that set concurrently.
// An empty `layers` sweeps every layer of the kind.
std::vector<LayerEffect> per_layer_sweep(const Model& model, std::span<const MediationUnit> units,
                                         MediatorKind kind, EffectMetric metric,
                                         double top_percent = 5.0, int workers = 1,
                                         std::span<const int> layers = {});

struct SynergyReport {
  double nie_sum = 0.0;
  double nie_all = 0.0;
  std::optional<double> relative_gap;  // empty when NIE_all == 0
};
SynergyReport nie_sum_vs_all(const EffectMap& map, EffectMetric metric);

// Bias measures of one unit under the four readings.
struct BiasQuad {
  double y_null = 1.0;
  double y_x = 1.0;
  double y_x_znull = 1.0;
  double y_null_zx = 1.0;
  bool aggregate = true;
};
std::vector<BiasQuad> bias_quads(std::span<const UnitOutcome> units);

// Sides of the no-interaction condition, each divided by y_null:
//   x = (y_{null,z_x} - y_null) / y_null,  y = (y_x - y_{x,z_null}) / y_null.
struct Eq9Point {
  double rhs = 0.0;
  double lhs = 0.0;
};
Eq9Point no_interaction_sides(const BiasQuad& q);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};
LinearFit fit_line(std::span<const Eq9Point> points);  // least squares lhs ~ rhs

struct DecompositionReport {
  double te = 0.0;
  double nde = 0.0;
  double nie = 0.0;
  double residual = 0.0;              // te - (nde + nie)
  std::vector<double> unit_residual;  // per unit
  std::vector<Eq9Point> points;
  LinearFit fit;
};

// `concurrent` supplies TE/NDE/NIE and residuals; `scatter` supplies the
// no-interaction points (one per mediator and unit).
DecompositionReport decomposition_check(std::span<const BiasQuad> concurrent,
                                        std::span<const BiasQuad> scatter);

// Runs `heads` concurrently for the decomposition and each head alone for
// the scatter.
DecompositionReport decomposition_check(const Model& model, std::span<const MediationUnit> units,
                                        const MediatorSet& heads, int workers = 1);

struct StripeReport {
  std::vector<double> aligned;     // entry l: layers (l, l+1)
  std::vector<double> randomized;  // mean over permutation trials
  int trials = 0;
  double top_fraction = 0.1;
};

// grid[l][k] = NIE of neuron k in layer l. A neuron is effective in a layer
// when it ranks in that layer's top `top_fraction` (ties by index).
StripeReport stripe_analysis(const std::vector<std::vector<double>>& grid, int trials, std::uint64_t seed,
                             double top_fraction = 0.1);

struct CorrelationReport {
  double r = 0.0;
  std::size_t n_used = 0;
  std::size_t n_dropped = 0;  // non-positive TE, no log
};
// Pearson correlation of log(TE) with the external bias.
CorrelationReport correlate_effects(std::span<const double> per_example_te,
                                    std::span<const double> external_bias);

double pearson(std::span<const double> x, std::span<const double> y);

// Fisher-Yates with rejection-sampled bounds, so a seed fixes the result on
// every standard library (std::shuffle does not).
std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& engine);

}  // namespace cma
