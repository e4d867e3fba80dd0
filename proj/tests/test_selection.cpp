#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

#include "cma/errors.hpp"
#include "cma/selection.hpp"

using namespace cma;

namespace {

std::vector<MediatorCoord> heads(int layers, int per_layer) {
  std::vector<MediatorCoord> out;
  for (int l = 1; l <= layers; ++l)
    for (int h = 0; h < per_layer; ++h) out.push_back({MediatorKind::attention_head, l, h});
  return out;
}

// Set effect = sum of singleton effects.
SetEffectOracle modular(const std::vector<MediatorCoord>& coords, const std::vector<double>& w) {
  std::map<MediatorCoord, double> table;
  for (std::size_t i = 0; i < coords.size(); ++i) table[coords[i]] = w[i];
  return [table](std::span<const MediatorCoord> set) {
    double s = 0;
    for (const auto& m : set) s += table.at(m);
    return s;
  };
}

}  // namespace

TEST_CASE("top-k") {
  const auto c = heads(1, 3);
  const std::vector<double> e{3, 1, 2};
  CHECK(select_top_k(e, c, 2) == std::vector<std::size_t>{0, 2});
  CHECK(select_top_k(e, c, 3) == std::vector<std::size_t>{0, 2, 1});
  CHECK(select_top_k(e, c, 0).empty());
  CHECK_THROWS_AS(select_top_k(e, c, 4), UsageError);

  // Equal effects fall back to (layer, index), not input order.
  std::vector<MediatorCoord> shuffled{{MediatorKind::attention_head, 2, 0},
                                      {MediatorKind::attention_head, 1, 1},
                                      {MediatorKind::attention_head, 1, 0}};
  const std::vector<double> tie{1, 1, 1};
  CHECK(select_top_k(tie, shuffled, 3) == std::vector<std::size_t>{2, 1, 0});
}

TEST_CASE("greedy on a modular oracle is optimal and equals top-k") {
  const auto c = heads(4, 6);
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 2.0);
  std::vector<double> w(c.size());
  for (double& v : w) v = u(rng);
  const auto oracle = modular(c, w);
  for (std::size_t budget : {1u, 5u, 10u}) {
    const auto g = select_greedy(c, oracle, budget);
    const auto t = top_k_curve(c, w, oracle, budget);
    CHECK(g.chosen == t.chosen);
    CHECK(g.cumulative == t.cumulative);
    CHECK(g.set_sizes.size() == budget);
    for (std::size_t s = 0; s < budget; ++s) CHECK(g.set_sizes[s] == s + 1);
    auto sorted = w;
    std::sort(sorted.rbegin(), sorted.rend());
    double best = 0;
    for (std::size_t i = 0; i < budget; ++i) best += sorted[i];
    CHECK(g.cumulative.back() == doctest::Approx(best));
    double all = 0;
    for (double v : w) all += v;
    CHECK(g.reference == doctest::Approx(all));
  }
  const auto one = select_greedy(c, oracle, 1);
  CHECK(one.chosen.front() == c[select_top_k(w, c, 1).front()]);
}

TEST_CASE("greedy handles interactions") {
  const auto c = heads(1, 3);
  // {0,1} together are worth far more than 2 alone, though 2 is the best single.
  const SetEffectOracle oracle = [](std::span<const MediatorCoord> s) {
    bool a = false, b = false, z = false;
    for (const auto& m : s) {
      a |= m.index == 0;
      b |= m.index == 1;
      z |= m.index == 2;
    }
    return (a ? 1.0 : 0.0) + (b ? 1.0 : 0.0) + (a && b ? 5.0 : 0.0) + (z ? 1.5 : 0.0);
  };
  const auto g = select_greedy(c, oracle, 2);
  CHECK(g.chosen.front().index == 2);
  CHECK(g.cumulative == std::vector<double>{1.5, 2.5});
}

TEST_CASE("ties and determinism") {
  const auto c = heads(3, 4);
  const std::vector<double> w(c.size(), 1.0);
  const auto oracle = modular(c, w);
  const auto g = select_greedy(c, oracle, 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(g.chosen[i] == c[i]);
  GreedyOptions par;
  par.workers = 4;
  const auto g4 = select_greedy(c, oracle, 5, par);
  CHECK(g4.chosen == g.chosen);
  CHECK(g4.cumulative == g.cumulative);
}

TEST_CASE("candidate limit") {
  const auto c = heads(1, 5);
  const std::vector<double> w{0.5, 0.1, 0.4, 0.3, 0.2};
  GreedyOptions opt;
  opt.candidate_limit = 2;
  opt.individual_effects = w;
  const auto g = select_greedy(c, modular(c, w), 3, opt);
  CHECK(g.chosen == std::vector<MediatorCoord>{c[0], c[2], c[3]});
  opt.individual_effects = {};
  CHECK_THROWS_AS(select_greedy(c, modular(c, w), 3, opt), UsageError);
}

TEST_CASE("budget bounds and blocks") {
  const auto c = heads(2, 5);
  std::vector<double> w(c.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = double(i);
  const auto oracle = modular(c, w);
  const auto empty = select_greedy(c, oracle, 0);
  CHECK(empty.chosen.empty());
  CHECK(empty.cumulative.empty());
  CHECK(empty.reference == 45.0);
  CHECK_THROWS_AS(select_greedy(c, oracle, 11), UsageError);

  const auto blocks = top_k_curve(c, w, oracle, 10, 3, 2);
  CHECK(blocks.set_sizes == std::vector<std::size_t>{3, 6, 9, 10});
  CHECK(blocks.cumulative == std::vector<double>{9 + 8 + 7, 24 + 6 + 5 + 4, 39 + 3 + 2 + 1, 45});
  CHECK_THROWS_AS(top_k_curve(c, w, oracle, 4, 0), UsageError);
}
