#include "tdn/objective.hpp"

#include <algorithm>
#include <cmath>

#include "tdn/error.hpp"

namespace tdn {

Metrics make_metrics(double accuracy_pct, std::int64_t params, std::int64_t flops) {
  return {accuracy_pct, static_cast<double>(params) / 1e6, static_cast<double>(flops) / 1e9};
}

double netscore(const Metrics& m, const ObjectiveParams& o) {
  if (!(m.accuracy_pct > 0) || m.accuracy_pct > 100) {
    throw NumericError("netscore", "accuracy must lie in (0, 100]");
  }
  if (!(m.params_millions > 0) || !(m.flops_billions > 0)) {
    throw NumericError("netscore", "parameter and FLOP counts must be positive");
  }
  return 20.0 * (o.kappa * std::log10(m.accuracy_pct) - o.beta * std::log10(m.params_millions) -
                 o.gamma * std::log10(m.flops_billions));
}

double budget_deviation(std::int64_t flops, const ObjectiveParams& o) {
  const double budget = static_cast<double>(o.budget_flops);
  return std::abs(static_cast<double>(flops) - budget) / budget;
}

bool indicator(std::int64_t flops, const ObjectiveParams& o) {
  // Integer form of the closed interval so the boundary is exact.
  const long double budget = static_cast<long double>(o.budget_flops);
  const long double diff = std::abs(static_cast<long double>(flops) - budget);
  return diff <= budget * static_cast<long double>(o.tolerance) * (1 + 1e-12L);
}

std::vector<RankItem> rank_scores(std::vector<RankItem> items) {
  std::sort(items.begin(), items.end(), [](const RankItem& a, const RankItem& b) {
    if (a.feasible != b.feasible) return a.feasible;
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return items;
}

std::vector<RankItem> rank(const std::vector<RankCandidate>& candidates, const ObjectiveParams& o) {
  std::vector<RankItem> items;
  items.reserve(candidates.size());
  for (const auto& c : candidates) items.push_back({c.id, netscore(c.metrics, o), c.feasible});
  return rank_scores(std::move(items));
}

}  // namespace tdn
