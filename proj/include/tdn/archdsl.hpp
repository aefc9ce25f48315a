#pragma once

// Architecture graphs and the line-oriented .tdn description language.
//
//   input H W C
//   conv ID k=K s=S f=F pad=same|valid bn=0|1 act=none|relu [bias=0|1] [from=ID]
//   dwconv ID k=K s=S pad=same|valid bn=0|1 act=none|relu [bias=0|1] [from=ID]
//   maxpool ID k=K s=S [from=ID]
//   gap ID [from=ID]
//   add ID from=ID,ID [act=none|relu]
//   dense ID units=U act=none|relu [from=ID]
//   softmax ID [from=ID]
//
// '#' starts a comment. An omitted from= refers to the previous line's node.
// The input node is always named "input".

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace tdn {

struct TensorShape {
  int height = 1;
  int width = 1;
  int channels = 1;

  std::int64_t elements() const {
    return static_cast<std::int64_t>(height) * width * channels;
  }
  bool operator==(const TensorShape&) const = default;
};

enum class Padding { Same, Valid };
enum class Activation { None, Relu };

struct InputLayer {
  TensorShape shape;
  bool operator==(const InputLayer&) const = default;
};

struct ConvLayer {
  int out_channels = 8;
  int kernel = 3;
  int stride = 1;
  Padding padding = Padding::Same;
  bool has_bias = true;
  bool batch_norm = false;
  Activation activation = Activation::Relu;
  bool operator==(const ConvLayer&) const = default;
};

struct DepthwiseConvLayer {
  int kernel = 3;
  int stride = 1;
  Padding padding = Padding::Same;
  bool has_bias = true;
  bool batch_norm = false;
  Activation activation = Activation::Relu;
  bool operator==(const DepthwiseConvLayer&) const = default;
};

struct MaxPoolLayer {
  int kernel = 2;
  int stride = 2;
  bool operator==(const MaxPoolLayer&) const = default;
};

struct GlobalAvgPoolLayer {
  bool operator==(const GlobalAvgPoolLayer&) const = default;
};

struct AddLayer {
  Activation activation = Activation::None;
  bool operator==(const AddLayer&) const = default;
};

struct DenseLayer {
  int units = 1;
  Activation activation = Activation::None;
  bool operator==(const DenseLayer&) const = default;
};

struct SoftmaxLayer {
  bool operator==(const SoftmaxLayer&) const = default;
};

using LayerKind = std::variant<InputLayer, ConvLayer, DepthwiseConvLayer, MaxPoolLayer,
                               GlobalAvgPoolLayer, AddLayer, DenseLayer, SoftmaxLayer>;

struct LayerSpec {
  std::string id;
  LayerKind kind;
  std::vector<std::string> predecessors;

  bool operator==(const LayerSpec&) const = default;
};

/// A typed DAG of layers in declaration (topological) order.
struct ArchGraph {
  std::vector<LayerSpec> nodes;
  TensorShape input_shape;
  /// One entry per node once infer_shapes() has run; empty before.
  std::vector<TensorShape> resolved_shapes;

  bool shapes_resolved() const {
    return !nodes.empty() && resolved_shapes.size() == nodes.size();
  }
  /// Index of the node with the given id, or -1.
  int index_of(std::string_view id) const;
  /// Predecessor indices of node i.
  std::vector<int> inputs_of(int i) const;
  /// Consumer indices of every node.
  std::vector<std::vector<int>> consumers() const;

  const TensorShape& output_shape() const { return resolved_shapes.back(); }
};

/// Structural equality: nodes and input shape. Resolved shapes are derived data.
bool same_structure(const ArchGraph& a, const ArchGraph& b);

/// Name of the layer kind as used in the DSL ("conv", "add", ...).
std::string_view kind_name(const LayerKind& kind);

ArchGraph parse_arch(std::string_view text);
ArchGraph infer_shapes(ArchGraph graph);
std::string serialize_arch(const ArchGraph& graph);

ArchGraph load_arch(const std::string& path);
void save_arch(const ArchGraph& graph, const std::string& path);

/// Output extent along one spatial axis.
int conv_output_extent(int in, int kernel, int stride, Padding padding);
/// Zero rows (or columns) inserted before the first input element.
int conv_padding_before(int in, int out, int kernel, int stride, Padding padding);

}  // namespace tdn
