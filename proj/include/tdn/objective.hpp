#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tdn {

/// Exponents of the performance score and the FLOP budget gate.
struct ObjectiveParams {
  double kappa = 2.0;
  double beta = 0.5;
  double gamma = 0.5;
  std::int64_t budget_flops = 100'000'000;
  double tolerance = 0.05;
};

struct Metrics {
  double accuracy_pct = 0;    // percent, (0, 100]
  double params_millions = 0;
  double flops_billions = 0;
};

Metrics make_metrics(double accuracy_pct, std::int64_t params, std::int64_t flops);

/// 20 * log10(a^kappa / (p^beta * c^gamma)). Throws NumericError outside the domain.
double netscore(const Metrics& m, const ObjectiveParams& o);

/// |flops - budget| / budget <= tolerance.
bool indicator(std::int64_t flops, const ObjectiveParams& o);

/// Relative distance from the budget.
double budget_deviation(std::int64_t flops, const ObjectiveParams& o);

struct RankItem {
  std::string id;
  double score = 0;
  bool feasible = false;
};

struct RankCandidate {
  std::string id;
  Metrics metrics;
  bool feasible = false;
};

/// Feasible before infeasible, then descending score, then ascending id.
std::vector<RankItem> rank_scores(std::vector<RankItem> items);
std::vector<RankItem> rank(const std::vector<RankCandidate>& candidates, const ObjectiveParams& o);

}  // namespace tdn
