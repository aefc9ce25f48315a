#pragma once

// Architecture search: categorical generator over a residual family, FLOP
// repair, proxy-trained inquisitor and a cross-entropy-method update.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "tdn/archdsl.hpp"
#include "tdn/complexity.hpp"
#include "tdn/data.hpp"
#include "tdn/objective.hpp"
#include "tdn/train.hpp"

namespace tdn {

enum class BlockType { StandardResidual, DepthwiseSeparableResidual };

struct SearchSpace {
  TensorShape input_size{200, 200, 1};
  int num_classes = 6;
  int min_stages = 3;
  int max_stages = 4;
  int min_blocks = 1;
  int max_blocks = 4;
  std::vector<int> channel_choices{8, 16, 24, 32, 48, 64, 96, 128};
  std::vector<int> kernel_choices{3, 5};
  std::vector<BlockType> block_types{BlockType::StandardResidual, BlockType::DepthwiseSeparableResidual};
  std::vector<int> stem_channels_choices{16, 24, 32};

  /// Throws ShapeError when a choice list is empty or a channel count is not a multiple of 8.
  void validate() const;
};

/// One categorical decision of the generator.
struct Decision {
  std::string name;
  Eigen::VectorXd probs;
};

struct GeneratorState {
  std::vector<Decision> decisions;
  int generation = 0;
  std::uint64_t master_seed = 0;
  std::vector<double> history;  // best archive score after each generation
  double floor = 0.02;
  double alpha = 0.5;
};

/// Uniform distributions over every decision of the space.
GeneratorState init_generator(const SearchSpace& space, std::uint64_t master_seed, double floor = 0.02,
                              double alpha = 0.5);

/// One option index per decision, in GeneratorState::decisions order.
using Genome = std::vector<int>;

Genome prototype_genome(const SearchSpace& space);
/// Stem conv, stages of residual blocks (the first of each stage strided),
/// global pooling, dense classifier, softmax. The result is shape-inferred.
ArchGraph decode(const SearchSpace& space, const Genome& genome);
ArchGraph build_prototype(const SearchSpace& space);

struct Candidate {
  int id = 0;
  std::string name;  // "g002-c005"; "proto" for the prototype
  Genome genome;
  ArchGraph arch;
  ComplexityReport report;
  std::optional<Metrics> metrics;
  bool feasible = false;
  bool failed = false;
  std::optional<double> score;
  int repair_rounds = 0;
};

std::vector<Candidate> generate(const SearchSpace& space, const GeneratorState& state, int n);

struct RepairResult {
  ArchGraph arch;
  bool feasible = false;
  int rounds = 0;
};

/// Rescales conv widths by sqrt(budget / flops), rounded to multiples of 8
/// (minimum 8), until the indicator passes or max_rounds is spent. The
/// classifier's units are left alone.
RepairResult repair(const ArchGraph& arch, const ObjectiveParams& o, int max_rounds = 3);

struct ProxyEval {
  /// Short proxy schedule: 2 epochs by default.
  TrainConfig train = [] {
    TrainConfig t;
    t.epochs = 2;
    return t;
  }();
};

/// Trains the candidate on the proxy data and fills metrics and score.
/// Divergence marks the candidate failed with score -inf.
Candidate inquire(Candidate c, const DatasetSplit& data, const ProxyEval& eval, const ObjectiveParams& o);

/// CEM step toward the empirical choice frequencies of the top
/// ceil(elite_frac * n) candidates, then floor and renormalize.
GeneratorState update(const GeneratorState& state, const std::vector<Candidate>& scored, double elite_frac,
                      const ObjectiveParams& o = {});

/// Applies the probability floor by clamping and renormalizing the rest.
Eigen::VectorXd apply_floor(Eigen::VectorXd p, double floor);

struct SearchConfig {
  SearchSpace space;
  ObjectiveParams objective;
  int population = 8;
  int generations = 5;
  double elite_frac = 0.25;
  ProxyEval eval;
  std::uint64_t master_seed = 1;
  double floor = 0.02;
  double alpha = 0.5;
  int max_repair_rounds = 3;
};

struct GenerationRecord {
  int generation = 0;
  std::optional<double> best_score;
  int feasible_count = 0;
  std::string best_name;
};

struct SearchResult {
  std::optional<Candidate> best;  // empty: no feasible architecture
  Candidate prototype;
  std::vector<GenerationRecord> history;
  std::vector<Candidate> evaluated;
  GeneratorState state;
};

SearchResult search(const SearchConfig& cfg, const DatasetSplit& data);

nlohmann::json history_json(const SearchResult& result);

}  // namespace tdn
