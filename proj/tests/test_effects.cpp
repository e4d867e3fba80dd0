#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "cma/effects.hpp"
#include "cma/errors.hpp"
#include "support.hpp"

using namespace cma;

TEST_CASE("bias measure and total effect") {
  CHECK(bias_y(make_distribution(0.2, 0.2)) == 1.0);
  const double nurse = bias_y(make_distribution(0.031, 0.224));
  const double man = bias_y(make_distribution(0.315, 0.024));
  CHECK(nurse == doctest::Approx(0.14).epsilon(0.01));
  CHECK(man == doctest::Approx(13.1).epsilon(0.01));
  // Rounded intermediates as printed: 13.1 / 0.14 - 1.
  CHECK(total_effect(13.1, 0.14) == doctest::Approx(92.57).epsilon(1e-3));
  CHECK(total_effect(0.7, 0.7) == 0.0);
  CHECK_THROWS_AS(total_effect(1.0, 0.0), DegenerateProbability);

  std::mt19937 rng(1);
  std::uniform_real_distribution<double> u(0.01, 5.0);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng), b = u(rng);
    CHECK(total_effect(a, b) == a / b - 1.0);
    CHECK(nde_unit(a, b) == a / b - 1.0);
    CHECK(nie_unit(a, b) == a / b - 1.0);
  }
}

TEST_CASE("probability floor flags degeneracy") {
  const auto d = make_distribution(0.0, 0.5);
  CHECK(d.degenerate);
  CHECK(d.p_anti == kProbabilityFloor);
  CHECK_FALSE(make_distribution(0.1, 0.5).degenerate);
}

TEST_CASE("alternate metrics") {
  const auto a = make_distribution(0.2, 0.8), b = make_distribution(0.8, 0.2);
  CHECK(alt_effect_normdiff(b, a) == doctest::Approx(1.2));
  CHECK(alt_effect_normdiff(a, a) == 0.0);
  // Normalization happens before the difference.
  CHECK(alt_effect_normdiff(make_distribution(0.04, 0.01), make_distribution(0.1, 0.4)) == doctest::Approx(1.2));

  CHECK(tv_distance({0.7, 0.3}, {0.4, 0.6}) == doctest::Approx(0.3));
  CHECK(tv_distance({1, 0}, {0, 1}) == 1.0);
  CHECK(tv_distance({0.5, 0.5}, {0.5, 0.5}) == 0.0);
  CHECK(rel_linf({0.5, 0.5}, {0.25, 0.75}) == doctest::Approx(std::log(2.0)));
  CHECK(rel_linf({0.3, 0.7}, {0.3, 0.7}) == 0.0);
  CHECK_THROWS_AS(rel_linf({1, 0}, {0.5, 0.5}), DegenerateProbability);

  std::mt19937 rng(9);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int i = 0; i < 500; ++i) {
    const double p = u(rng), q = u(rng);
    const std::array<double, 2> P{p, 1 - p}, Q{q, 1 - q};
    const double tv = tv_distance(P, Q), li = rel_linf(P, Q);
    CHECK(tv >= 0.0);
    CHECK(tv <= 1.0);
    CHECK(tv == tv_distance(Q, P));
    CHECK(li >= 0.0);
    CHECK(li == rel_linf(Q, P));
    CHECK((tv == 0.0) == (p == q));
    const double nd = alt_effect_normdiff(make_distribution(p, 1 - p), make_distribution(q, 1 - q));
    CHECK(nd >= -2.0);
    CHECK(nd <= 2.0);
  }
}

TEST_CASE("metric names") {
  for (auto m : {EffectMetric::original, EffectMetric::normalized_difference, EffectMetric::total_variation,
                 EffectMetric::relative_linf})
    CHECK(parse_metric(to_string(m)) == m);
  CHECK_THROWS_AS(parse_metric("kl"), UsageError);
}

TEST_CASE("population means over hand-built units") {
  std::vector<UnitOutcome> units(3);
  units[0].null = make_distribution(0.1, 0.4);
  units[0].intervened = make_distribution(0.3, 0.2);
  units[0].indirect = make_distribution(0.2, 0.4);
  units[0].direct = make_distribution(0.15, 0.3);
  units[1].null = make_distribution(0.2, 0.2);
  units[1].intervened = make_distribution(0.1, 0.4);
  units[1].indirect = make_distribution(0.2, 0.2);
  units[1].direct = make_distribution(0.1, 0.3);
  units[2].null = make_distribution(0.5, 0.1);
  units[2].intervened = make_distribution(0.5, 0.5);
  units[2].indirect = make_distribution(0.1, 0.1);
  units[2].direct = make_distribution(0.2, 0.2);
  units[2].aggregate = false;

  // y_null: 0.25, 1; y_x: 1.5, 0.25; y_null,z_x: 0.5, 1; y_x,z_null: 0.5, 1/3.
  const auto v = summarize(units, EffectMetric::original);
  CHECK(v.n == 2);
  CHECK(std::abs(v.te - (5.0 + -0.75) / 2) <= 1e-12);
  CHECK(std::abs(v.nie - (1.0 + 0.0) / 2) <= 1e-12);
  CHECK(std::abs(v.nde - (1.0 + (1.0 / 3 - 1)) / 2) <= 1e-12);
  CHECK(v.per_example_te.size() == 3);
  CHECK(std::abs(v.per_example_te[2] - (1.0 / 5 - 1)) <= 1e-12);

  for (auto m : {EffectMetric::original, EffectMetric::normalized_difference, EffectMetric::total_variation,
                 EffectMetric::relative_linf}) {
    std::vector<UnitOutcome> nulls(units.begin(), units.end());
    for (auto& u : nulls) u.intervened = u.null;
    CHECK(summarize(nulls, m).te == 0.0);
  }
}

TEST_CASE("pairwise sum is a fixed-order sum") {
  std::vector<double> v(1000);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / double(i + 1);
  double naive = 0;
  for (double x : v) naive += x;
  CHECK(std::abs(pairwise_sum(v) - naive) <= 1e-12);
  CHECK(pairwise_sum(v) == pairwise_sum(v));
  CHECK(population_mean(std::vector<double>{1, 2, 3, 4}) == 2.5);
}

TEST_CASE("candidate scoring") {
  const auto ck = support::toy_checkpoint(2);
  const Model m(ck);
  const std::vector<TokenId> prompt{5, 6, 7};
  const auto probs = m.forward(prompt).probs;
  CHECK(score_candidate(m, prompt, std::vector<TokenId>{9}) == doctest::Approx(probs[9]).epsilon(1e-12));

  const std::vector<TokenId> two{9, 12};
  const auto lp = m.sequence_log_prob(prompt, two);
  CHECK(std::abs(score_candidate(m, prompt, two) - std::sqrt(std::exp(lp[0]) * std::exp(lp[1]))) <= 1e-12);
  CHECK(score_candidate(m, prompt, two) <= std::max(std::exp(lp[0]), std::exp(lp[1])));

  const auto d = score_pair(m, prompt, std::vector<TokenId>{9}, std::vector<TokenId>{4});
  CHECK(d.p_anti == probs[9]);
  CHECK(d.p_stereo == probs[4]);
  CHECK_THROWS_AS(score_pair(m, prompt, std::vector<TokenId>{}, std::vector<TokenId>{4}), InterventionError);
}
