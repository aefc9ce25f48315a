#include "tdn/complexity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "tdn/error.hpp"

namespace tdn {

namespace {

void require_shapes(const ArchGraph& graph) {
  if (!graph.shapes_resolved()) throw ShapeError("graph is not shape-inferred");
}

std::int64_t activation_ops(Activation a, std::int64_t elements) {
  return a == Activation::Relu ? elements : 0;
}

}  // namespace

LayerCost layer_cost(const ArchGraph& graph, int i) {
  const LayerSpec& node = graph.nodes[i];
  const TensorShape& out = graph.resolved_shapes[i];
  const auto inputs = graph.inputs_of(i);
  const TensorShape in = inputs.empty() ? out : graph.resolved_shapes[inputs[0]];
  const std::int64_t out_elems = out.elements();
  const std::int64_t out_pixels = static_cast<std::int64_t>(out.height) * out.width;

  LayerCost cost;
  cost.id = node.id;
  std::visit(
      [&](const auto& layer) {
        using T = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<T, ConvLayer>) {
          const std::int64_t taps = static_cast<std::int64_t>(layer.kernel) * layer.kernel * in.channels;
          cost.params = taps * layer.out_channels + (layer.has_bias ? layer.out_channels : 0) +
                        (layer.batch_norm ? 2 * layer.out_channels : 0);
          cost.macs = out_pixels * layer.out_channels * taps;
          cost.flops = 2 * cost.macs + (layer.has_bias ? out_elems : 0) +
                       (layer.batch_norm ? 2 * out_elems : 0) + activation_ops(layer.activation, out_elems);
        } else if constexpr (std::is_same_v<T, DepthwiseConvLayer>) {
          const std::int64_t c = in.channels;
          const std::int64_t kk = static_cast<std::int64_t>(layer.kernel) * layer.kernel;
          cost.params = kk * c + (layer.has_bias ? c : 0) + (layer.batch_norm ? 2 * c : 0);
          cost.macs = out_pixels * c * kk;
          cost.flops = 2 * cost.macs + (layer.has_bias ? out_elems : 0) +
                       (layer.batch_norm ? 2 * out_elems : 0) + activation_ops(layer.activation, out_elems);
        } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
          cost.flops = (static_cast<std::int64_t>(layer.kernel) * layer.kernel - 1) * out_elems;
        } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
          cost.flops = in.elements() + in.channels;
        } else if constexpr (std::is_same_v<T, AddLayer>) {
          cost.flops = out_elems + activation_ops(layer.activation, out_elems);
        } else if constexpr (std::is_same_v<T, DenseLayer>) {
          const std::int64_t fan_in = in.elements();
          cost.params = fan_in * layer.units + layer.units;
          cost.macs = fan_in * layer.units;
          cost.flops = 2 * cost.macs + layer.units + activation_ops(layer.activation, layer.units);
        } else if constexpr (std::is_same_v<T, SoftmaxLayer>) {
          cost.flops = 3 * out_elems;
        }
      },
      node.kind);
  return cost;
}

ComplexityReport count_params(const ArchGraph& graph) {
  require_shapes(graph);
  ComplexityReport r;
  for (int i = 0; i < static_cast<int>(graph.nodes.size()); ++i) {
    LayerCost c = layer_cost(graph, i);
    c.flops = 0;
    c.macs = 0;
    r.params += c.params;
    r.per_layer.push_back(std::move(c));
  }
  return r;
}

ComplexityReport count_flops(const ArchGraph& graph) {
  require_shapes(graph);
  ComplexityReport r;
  for (int i = 0; i < static_cast<int>(graph.nodes.size()); ++i) {
    LayerCost c = layer_cost(graph, i);
    c.params = 0;
    r.flops += c.flops;
    r.macs += c.macs;
    r.per_layer.push_back(std::move(c));
  }
  return r;
}

std::int64_t peak_activation_bytes(const ArchGraph& graph) {
  require_shapes(graph);
  const int n = static_cast<int>(graph.nodes.size());
  std::vector<int> last_use(n);
  std::iota(last_use.begin(), last_use.end(), 0);
  for (int i = 0; i < n; ++i) {
    for (int p : graph.inputs_of(i)) last_use[p] = std::max(last_use[p], i);
  }
  std::int64_t peak = 0;
  std::int64_t live = 0;
  for (int t = 0; t < n; ++t) {
    live += graph.resolved_shapes[t].elements();
    peak = std::max(peak, live);
    for (int j = 0; j <= t; ++j) {
      if (last_use[j] == t) live -= graph.resolved_shapes[j].elements();
    }
  }
  return peak * static_cast<std::int64_t>(sizeof(float));
}

ComplexityReport analyze(const ArchGraph& graph) {
  require_shapes(graph);
  ComplexityReport r;
  for (int i = 0; i < static_cast<int>(graph.nodes.size()); ++i) {
    LayerCost c = layer_cost(graph, i);
    r.params += c.params;
    r.flops += c.flops;
    r.macs += c.macs;
    r.per_layer.push_back(std::move(c));
  }
  r.peak_activation_bytes = peak_activation_bytes(graph);
  return r;
}

std::string format_ratio(double ratio) {
  char buf[64];
  if (ratio >= 10.0) {
    std::snprintf(buf, sizeof buf, "%.0f×", std::round(ratio));
  } else {
    std::snprintf(buf, sizeof buf, "%.1f×", ratio);
  }
  return buf;
}

RatioRecord compare_reports(const ComplexityReport& a, const ComplexityReport& b) {
  if (b.params == 0 || b.flops == 0) throw NumericError("", "cannot compare against a report with zero counts");
  auto reduce = [](std::int64_t num, std::int64_t den) {
    const std::int64_t g = std::gcd(num, den);
    return Ratio{num / (g ? g : 1), den / (g ? g : 1)};
  };
  RatioRecord r;
  r.params = reduce(a.params, b.params);
  r.flops = reduce(a.flops, b.flops);
  r.params_display = format_ratio(r.params.value());
  r.flops_display = format_ratio(r.flops.value());
  return r;
}

nlohmann::json to_json(const ComplexityReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : report.per_layer) {
    layers.push_back({{"id", l.id}, {"params", l.params}, {"flops", l.flops}, {"macs", l.macs}});
  }
  return {{"params", report.params},
          {"macs", report.macs},
          {"flops", report.flops},
          {"peak_activation_bytes", report.peak_activation_bytes},
          {"per_layer", layers}};
}

ComplexityReport report_from_json(const nlohmann::json& j) {
  ComplexityReport r;
  try {
    r.params = j.at("params").get<std::int64_t>();
    r.flops = j.at("flops").get<std::int64_t>();
    r.macs = j.value("macs", std::int64_t{0});
    r.peak_activation_bytes = j.value("peak_activation_bytes", std::int64_t{0});
    if (j.contains("per_layer")) {
      for (const auto& l : j.at("per_layer")) {
        r.per_layer.push_back({l.at("id").get<std::string>(), l.at("params").get<std::int64_t>(),
                               l.at("flops").get<std::int64_t>(), l.value("macs", std::int64_t{0})});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed complexity report: ") + e.what());
  }
  if (r.params < 0 || r.flops < 0) throw IoError("complexity report counts must be non-negative");
  return r;
}

}  // namespace tdn
