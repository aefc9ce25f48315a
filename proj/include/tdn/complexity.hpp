#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "tdn/archdsl.hpp"

namespace tdn {

struct LayerCost {
  std::string id;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t macs = 0;
  bool operator==(const LayerCost&) const = default;
};

/// Exact complexity of a shape-inferred graph.
///
/// Counting convention: convolutions and dense layers contribute 2 FLOPs per
/// multiply-accumulate plus one per output element for a bias add; inference
/// batch norm (unfolded) costs 2 per element, relu and add 1 per element,
/// max pooling k*k-1 comparisons per output, global average pooling one add
/// per input element plus one division per channel, softmax 3 per element.
/// Batch-norm running statistics are not counted as parameters.
struct ComplexityReport {
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
  std::int64_t peak_activation_bytes = 0;
  std::vector<LayerCost> per_layer;
  bool operator==(const ComplexityReport&) const = default;
};

ComplexityReport count_params(const ArchGraph& graph);
ComplexityReport count_flops(const ArchGraph& graph);
std::int64_t peak_activation_bytes(const ArchGraph& graph);
/// All of the above in one report.
ComplexityReport analyze(const ArchGraph& graph);

/// Cost of a single node given resolved shapes.
LayerCost layer_cost(const ArchGraph& graph, int node);

struct Ratio {
  std::int64_t numerator = 0;
  std::int64_t denominator = 1;
  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

struct RatioRecord {
  Ratio params;
  Ratio flops;
  std::string params_display;
  std::string flops_display;
};

/// How many times larger a is than b, reduced to lowest terms.
RatioRecord compare_reports(const ComplexityReport& a, const ComplexityReport& b);

/// "56×" for ratios >= 10, "7.6×" below.
std::string format_ratio(double ratio);

nlohmann::json to_json(const ComplexityReport& report);
ComplexityReport report_from_json(const nlohmann::json& j);

}  // namespace tdn
