#pragma once

// CPU inference engine. build_plan() folds batch norm into convolution
// weights, fuses conv+relu and conv+add(+relu), packs weights and lays out a
// shared activation arena from tensor liveness. infer() runs images through
// the plan, data-parallel over the batch.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "tdn/archdsl.hpp"
#include "tdn/layers.hpp"
#include "tdn/params.hpp"
#include "tdn/tensor.hpp"

namespace tdn {

/// Tuning knobs. Defaults follow the tuned accelerator settings:
/// cache 4, blocked off, mempool on, pool limit 1, aggressive fusion, 8 threads on cores 0-7.
struct RuntimeConfig {
  /// Retained im2col scratch buffers per worker, keyed by size; 0 allocates per use.
  int primitive_cache_capacity = 4;
  /// Pack convolution weights into blocks of 8 output channels.
  bool blocked_format = false;
  /// Share one liveness-planned arena across tensors; off gives every tensor its own buffer.
  bool mempool_enable = true;
  /// Worker workspaces retained across infer() calls, per thread.
  int tensor_pool_limit = 1;
  /// On: fuse conv+add only when the add's other operand has no other consumer.
  bool conv_add_fusion_safe = false;
  int num_threads = 8;
  /// Core list such as "0-7" or "0,2,4"; best effort, empty to skip.
  std::string cpu_affinity = "0-7";
  /// Poison dead arena regions with NaN so a liveness bug surfaces as a numeric error.
  bool instrumented = false;

  bool operator==(const RuntimeConfig&) const = default;
};

/// Applies TDN_PRIMITIVE_CACHE_CAPACITY, TDN_BLOCKED_FORMAT, TDN_MEMPOOL_ENABLE,
/// TDN_TENSOR_POOL_LIMIT, TDN_CONV_ADD_FUSION_SAFE, TDN_NUM_THREADS and TDN_CPU_AFFINITY.
RuntimeConfig apply_env_overrides(RuntimeConfig cfg);

/// Parses "0-7", "0,2,4-5"; throws on malformed input.
std::vector<int> parse_core_list(const std::string& spec);

enum class OpKind { Conv, DepthwiseConv, MaxPool, GlobalAvgPool, Add, Dense, Softmax };

struct PlanValue {
  TensorShape shape;
  std::int64_t offset = 0;  // floats from the arena base (mempool only)
  int producer = -1;        // op index; -1 for the network input
  int last_use = -1;        // last op reading it
  std::string node_id;

  std::int64_t size() const { return shape.elements(); }
};

struct PlanOp {
  OpKind kind = OpKind::Conv;
  std::string id;  // "c2" or "c2+a1" when fused with an add
  int input = -1;
  int residual = -1;  // conv: fused add operand; add: second operand
  int output = -1;
  ConvGeometry geometry;
  bool relu = false;
  int weights = -1;

  std::string label() const;
};

struct PackedWeights {
  RowMatrix<float> matrix;  // taps x Cout, batch norm folded in
  Vector<float> bias;       // always present after folding
  /// [Cout/8][taps][8], zero padded, when blocked_format is on.
  std::vector<float, Eigen::aligned_allocator<float>> blocked;
  int blocks = 0;
};

struct WorkspacePool;

struct ExecutionPlan {
  RuntimeConfig config;
  TensorShape input_shape;
  std::vector<PlanValue> values;
  std::vector<PlanOp> ops;
  std::vector<PackedWeights> weights;
  std::int64_t arena_floats = 0;
  std::int64_t max_scratch_floats = 0;
  int output_value = -1;
  int logits_value = -1;  // input of a terminal softmax, else output_value
  std::shared_ptr<WorkspacePool> pool;

  int num_classes() const { return values[output_value].shape.channels; }
  /// Values live at the same time never share arena floats.
  bool arena_is_safe() const;
};

ExecutionPlan build_plan(const ArchGraph& graph, const ModelParams<float>& params, const RuntimeConfig& cfg = {});

/// Class probabilities (batch x classes).
RowMatrix<float> infer(const ExecutionPlan& plan, const Tensor<float>& batch);
/// Pre-softmax scores (batch x classes).
RowMatrix<float> infer_logits(const ExecutionPlan& plan, const Tensor<float>& batch);

/// Unfused, unfolded direct-loop interpreter with double accumulation.
RowMatrix<float> reference_infer(const ArchGraph& graph, const ModelParams<float>& params,
                                 const Tensor<float>& batch);

struct BenchReport {
  int batch_size = 0;
  int warmup_iters = 0;
  int timed_iters = 0;
  std::vector<double> latencies;  // seconds per timed iteration
  double median_seconds = 0;
  double mean_seconds = 0;
  double std_seconds = 0;
  double per_image_seconds = 0;
  double throughput = 0;  // images per second
};

BenchReport bench(const ExecutionPlan& plan, int batch_size, int warmup, int iters, std::uint64_t seed = 7);
/// Builds the statistics of a report from raw latencies.
BenchReport summarize_latencies(int batch_size, int warmup, std::vector<double> latencies);
/// a.per_image_seconds / b.per_image_seconds.
double speedup(const BenchReport& a, const BenchReport& b);

nlohmann::json to_json(const BenchReport& report);
nlohmann::json to_json(const RuntimeConfig& cfg);

}  // namespace tdn
