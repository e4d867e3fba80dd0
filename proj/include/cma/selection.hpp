#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cma/model.hpp"

namespace cma {

// Indices of the k largest effects, ordered by effect descending; equal
// effects fall back to ascending (layer, index) of `coords`.
std::vector<std::size_t> select_top_k(std::span<const double> individual_effects,
                                      std::span<const MediatorCoord> coords, std::size_t k);

// Concurrent NIE of a mediator set. Must be safe to call from several threads.
using SetEffectOracle = std::function<double(std::span<const MediatorCoord>)>;

struct SelectionCurve {
  std::vector<MediatorCoord> chosen;      // in selection order
  std::vector<std::size_t> set_sizes;     // |set| after each step
  std::vector<double> cumulative;         // oracle value after each step
  double reference = 0.0;                 // oracle value of the full set
};

struct GreedyOptions {
  int workers = 1;
  // Evaluate only the m remaining mediators with the largest individual
  // effects at each step; 0 means all. Needs `individual_effects`.
  std::size_t candidate_limit = 0;
  std::span<const double> individual_effects = {};
};

// Adds, at each step, the mediator whose union with the current set has the
// largest oracle value; ties go to the lowest (layer, index).
SelectionCurve select_greedy(std::span<const MediatorCoord> coords, const SetEffectOracle& oracle,
                             std::size_t budget, const GreedyOptions& options = {});

// Top-k ranking evaluated cumulatively: step t holds the first t * block
// mediators (the last step may be partial), up to `budget` mediators.
SelectionCurve top_k_curve(std::span<const MediatorCoord> coords, std::span<const double> individual_effects,
                           const SetEffectOracle& oracle, std::size_t budget, std::size_t block = 1,
                           int workers = 1);

}  // namespace cma
