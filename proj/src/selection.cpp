#include "cma/selection.hpp"

#include <algorithm>
#include <numeric>

#include "cma/errors.hpp"
#include "cma/parallel.hpp"

namespace cma {

std::vector<std::size_t> select_top_k(std::span<const double> individual_effects,
                                      std::span<const MediatorCoord> coords, std::size_t k) {
  if (individual_effects.size() != coords.size()) throw Error("select_top_k: effects and coords differ in length");
  if (k > coords.size()) throw UsageError("top-k: k exceeds the number of mediators");
  std::vector<std::size_t> order(coords.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (individual_effects[a] != individual_effects[b]) return individual_effects[a] > individual_effects[b];
    if (coords[a] != coords[b]) return coords[a] < coords[b];
    return a < b;
  });
  order.resize(k);
  return order;
}

SelectionCurve select_greedy(std::span<const MediatorCoord> coords, const SetEffectOracle& oracle,
                             std::size_t budget, const GreedyOptions& options) {
  if (options.candidate_limit > 0 && options.individual_effects.size() != coords.size()) {
    throw UsageError("a candidate limit needs one individual effect per mediator");
  }
  if (budget > coords.size()) throw UsageError("greedy: budget exceeds the number of mediators");
  SelectionCurve curve;
  curve.reference = oracle(coords);
  std::vector<bool> taken(coords.size(), false);

  for (std::size_t step = 0; step < budget; ++step) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < coords.size(); ++i) {
      if (!taken[i]) pool.push_back(i);
    }
    if (options.candidate_limit > 0 && pool.size() > options.candidate_limit) {
      std::vector<double> eff;
      std::vector<MediatorCoord> sub;
      for (std::size_t i : pool) {
        eff.push_back(options.individual_effects[i]);
        sub.push_back(coords[i]);
      }
      std::vector<std::size_t> limited;
      for (std::size_t j : select_top_k(eff, sub, options.candidate_limit)) limited.push_back(pool[j]);
      pool = std::move(limited);
    }

    std::vector<double> value(pool.size());
    parallel_for(pool.size(), options.workers, [&](std::size_t j) {
      std::vector<MediatorCoord> set = curve.chosen;
      set.push_back(coords[pool[j]]);
      value[j] = oracle(set);
    });

    std::size_t best = 0;
    for (std::size_t j = 1; j < pool.size(); ++j) {
      if (value[j] > value[best] || (value[j] == value[best] && coords[pool[j]] < coords[pool[best]])) best = j;
    }
    taken[pool[best]] = true;
    curve.chosen.push_back(coords[pool[best]]);
    curve.set_sizes.push_back(curve.chosen.size());
    curve.cumulative.push_back(value[best]);
  }
  return curve;
}

SelectionCurve top_k_curve(std::span<const MediatorCoord> coords, std::span<const double> individual_effects,
                           const SetEffectOracle& oracle, std::size_t budget, std::size_t block, int workers) {
  if (block == 0) throw UsageError("top-k block size must be positive");
  SelectionCurve curve;
  curve.reference = oracle(coords);
  for (std::size_t i : select_top_k(individual_effects, coords, budget)) curve.chosen.push_back(coords[i]);
  for (std::size_t size = block; size < curve.chosen.size() + block; size += block) {
    curve.set_sizes.push_back(std::min(size, curve.chosen.size()));
  }
  curve.cumulative.resize(curve.set_sizes.size());
  parallel_for(curve.set_sizes.size(), workers, [&](std::size_t t) {
    curve.cumulative[t] = oracle(std::span<const MediatorCoord>(curve.chosen).first(curve.set_sizes[t]));
  });
  return curve;
}

}  // namespace cma
