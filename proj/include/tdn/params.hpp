#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tdn/archdsl.hpp"
#include "tdn/error.hpp"
#include "tdn/rng.hpp"
#include "tdn/tensor.hpp"

namespace tdn {

/// Learnable tensors of one node. Layouts:
///   conv    weight (k*k*Cin) x Cout, row index (ky*k + kx)*Cin + ci
///   dwconv  weight (k*k) x C
///   dense   weight in x units
/// Batch-norm running statistics ride along but are not learnable.
template <typename Scalar>
struct LayerParams {
  RowMatrix<Scalar> weight;
  Vector<Scalar> bias;
  Vector<Scalar> bn_scale;
  Vector<Scalar> bn_shift;
  Vector<Scalar> bn_mean;
  Vector<Scalar> bn_var;

  Eigen::Index learnable_count() const {
    return weight.size() + bias.size() + bn_scale.size() + bn_shift.size();
  }

  template <typename Other>
  LayerParams<Other> cast() const {
    return {weight.template cast<Other>(),   bias.template cast<Other>(),
            bn_scale.template cast<Other>(), bn_shift.template cast<Other>(),
            bn_mean.template cast<Other>(),  bn_var.template cast<Other>()};
  }
};

template <typename Scalar>
struct ModelParams {
  std::vector<LayerParams<Scalar>> layers;  // one per graph node, empty where not learnable
  std::uint64_t seed = 0;

  Eigen::Index learnable_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers) n += l.learnable_count();
    return n;
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    out.seed = seed;
    for (const auto& l : layers) out.layers.push_back(l.template cast<Other>());
    return out;
  }
};

/// Calls f(suffix, data pointer, element count) for every learnable tensor.
template <typename Scalar, typename F>
void for_each_learnable(LayerParams<Scalar>& p, F&& f) {
  if (p.weight.size()) f("weight", p.weight.data(), p.weight.size());
  if (p.bias.size()) f("bias", p.bias.data(), p.bias.size());
  if (p.bn_scale.size()) f("bn_scale", p.bn_scale.data(), p.bn_scale.size());
  if (p.bn_shift.size()) f("bn_shift", p.bn_shift.data(), p.bn_shift.size());
}

template <typename Scalar, typename F>
void for_each_learnable(const LayerParams<Scalar>& p, F&& f) {
  if (p.weight.size()) f("weight", p.weight.data(), p.weight.size());
  if (p.bias.size()) f("bias", p.bias.data(), p.bias.size());
  if (p.bn_scale.size()) f("bn_scale", p.bn_scale.data(), p.bn_scale.size());
  if (p.bn_shift.size()) f("bn_shift", p.bn_shift.data(), p.bn_shift.size());
}

/// Zero-filled tensors with the shapes node i requires.
template <typename Scalar>
LayerParams<Scalar> zero_layer_params(const ArchGraph& graph, int i) {
  LayerParams<Scalar> p;
  const auto inputs = graph.inputs_of(i);
  const TensorShape in = inputs.empty() ? graph.input_shape : graph.resolved_shapes[inputs[0]];
  auto with_bn = [&](int channels, bool has_bias, bool bn) {
    if (has_bias) p.bias = Vector<Scalar>::Zero(channels);
    if (bn) {
      p.bn_scale = Vector<Scalar>::Ones(channels);
      p.bn_shift = Vector<Scalar>::Zero(channels);
      p.bn_mean = Vector<Scalar>::Zero(channels);
      p.bn_var = Vector<Scalar>::Ones(channels);
    }
  };
  std::visit(
      [&](const auto& layer) {
        using T = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<T, ConvLayer>) {
          p.weight = RowMatrix<Scalar>::Zero(layer.kernel * layer.kernel * in.channels, layer.out_channels);
          with_bn(layer.out_channels, layer.has_bias, layer.batch_norm);
        } else if constexpr (std::is_same_v<T, DepthwiseConvLayer>) {
          p.weight = RowMatrix<Scalar>::Zero(layer.kernel * layer.kernel, in.channels);
          with_bn(in.channels, layer.has_bias, layer.batch_norm);
        } else if constexpr (std::is_same_v<T, DenseLayer>) {
          p.weight = RowMatrix<Scalar>::Zero(in.elements(), layer.units);
          p.bias = Vector<Scalar>::Zero(layer.units);
        }
      },
      graph.nodes[i].kind);
  return p;
}

/// Glorot-uniform weights, zero biases, unit BN scale, identity running stats.
/// Each node draws from its own stream, so the result is independent of
/// evaluation order.
template <typename Scalar>
ModelParams<Scalar> init_params(const ArchGraph& graph, std::uint64_t seed) {
  if (!graph.shapes_resolved()) throw ShapeError("init_params requires a shape-inferred graph");
  ModelParams<Scalar> params;
  params.seed = seed;
  for (int i = 0; i < static_cast<int>(graph.nodes.size()); ++i) {
    LayerParams<Scalar> p = zero_layer_params<Scalar>(graph, i);
    if (p.weight.size()) {
      double fan_in = 0, fan_out = 0;
      const auto& kind = graph.nodes[i].kind;
      if (const auto* c = std::get_if<ConvLayer>(&kind)) {
        const double kk = c->kernel * c->kernel;
        fan_in = static_cast<double>(p.weight.rows());
        fan_out = kk * c->out_channels;
      } else if (std::holds_alternative<DepthwiseConvLayer>(kind)) {
        fan_in = fan_out = static_cast<double>(p.weight.rows());
      } else {
        fan_in = static_cast<double>(p.weight.rows());
        fan_out = static_cast<double>(p.weight.cols());
      }
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
      for (Eigen::Index k = 0; k < p.weight.size(); ++k) {
        p.weight.data()[k] = static_cast<Scalar>(rng.uniform(-limit, limit));
      }
    }
    params.layers.push_back(std::move(p));
  }
  return params;
}

/// Zero tensors shaped like the learnable part of `like` (gradient / velocity buffers).
template <typename Scalar>
ModelParams<Scalar> zeros_like(const ModelParams<Scalar>& like) {
  ModelParams<Scalar> out;
  out.seed = like.seed;
  for (const auto& l : like.layers) {
    LayerParams<Scalar> z;
    z.weight = RowMatrix<Scalar>::Zero(l.weight.rows(), l.weight.cols());
    z.bias = Vector<Scalar>::Zero(l.bias.size());
    z.bn_scale = Vector<Scalar>::Zero(l.bn_scale.size());
    z.bn_shift = Vector<Scalar>::Zero(l.bn_shift.size());
    out.layers.push_back(std::move(z));
  }
  return out;
}

/// Throws unless params have exactly the shapes the graph requires.
template <typename Scalar>
void check_params_match(const ArchGraph& graph, const ModelParams<Scalar>& params) {
  if (params.layers.size() != graph.nodes.size()) {
    throw ShapeError("weights describe " + std::to_string(params.layers.size()) + " nodes, graph has " +
                     std::to_string(graph.nodes.size()));
  }
  for (int i = 0; i < static_cast<int>(graph.nodes.size()); ++i) {
    const auto expected = zero_layer_params<Scalar>(graph, i);
    const auto& got = params.layers[i];
    const bool ok = got.weight.rows() == expected.weight.rows() &&
                    got.weight.cols() == expected.weight.cols() && got.bias.size() == expected.bias.size() &&
                    got.bn_scale.size() == expected.bn_scale.size() &&
                    got.bn_shift.size() == expected.bn_shift.size() &&
                    got.bn_mean.size() == expected.bn_mean.size() && got.bn_var.size() == expected.bn_var.size();
    if (!ok) throw ShapeError(graph.nodes[i].id + ": weight shapes do not match the graph");
  }
}

}  // namespace tdn
