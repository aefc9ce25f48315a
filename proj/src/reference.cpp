#include <cmath>
#include <vector>

#include "tdn/error.hpp"
#include "tdn/runtime.hpp"

namespace tdn {

namespace {

// One sample, HWC, double precision.
struct Act {
  TensorShape shape;
  std::vector<double> v;
  double& at(int y, int x, int c) { return v[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c]; }
  double at(int y, int x, int c) const {
    return v[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c];
  }
};

Act make(const TensorShape& s) { return {s, std::vector<double>(static_cast<std::size_t>(s.elements()), 0.0)}; }

void apply_bn(Act& a, const LayerParams<float>& p) {
  if (!p.bn_scale.size()) return;
  const int c = a.shape.channels;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const int ch = static_cast<int>(i % c);
    a.v[i] = (a.v[i] - p.bn_mean[ch]) / std::sqrt(static_cast<double>(p.bn_var[ch]) + kBatchNormEps) *
                 p.bn_scale[ch] +
             p.bn_shift[ch];
  }
}

void apply_relu(Act& a, Activation act) {
  if (act != Activation::Relu) return;
  for (double& x : a.v) x = x > 0 ? x : 0;
}

Act conv(const Act& in, const ConvGeometry& g, const LayerParams<float>& p, bool depthwise) {
  Act out = make({g.out_h, g.out_w, g.out_c});
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      for (int co = 0; co < g.out_c; ++co) {
        double acc = p.bias.size() ? p.bias[co] : 0.0;
        for (int ky = 0; ky < g.kernel; ++ky) {
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = oy * g.stride + ky - g.pad_top;
            const int ix = ox * g.stride + kx - g.pad_left;
            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
            if (depthwise) {
              acc += in.at(iy, ix, co) * p.weight(ky * g.kernel + kx, co);
            } else {
              for (int ci = 0; ci < g.in_c; ++ci) {
                acc += in.at(iy, ix, ci) * p.weight((ky * g.kernel + kx) * g.in_c + ci, co);
              }
            }
          }
        }
        out.at(oy, ox, co) = acc;
      }
    }
  }
  return out;
}

}  // namespace

RowMatrix<float> reference_infer(const ArchGraph& graph, const ModelParams<float>& params,
                                 const Tensor<float>& batch) {
  if (!graph.shapes_resolved()) throw ShapeError("reference_infer requires a shape-inferred graph");
  check_params_match(graph, params);
  if (!(batch.shape() == graph.input_shape)) throw ShapeError("batch shape does not match the graph input");
  const int n_nodes = static_cast<int>(graph.nodes.size());
  const int classes = static_cast<int>(graph.output_shape().elements());
  RowMatrix<float> result(batch.batch, classes);

  for (int s = 0; s < batch.batch; ++s) {
    std::vector<Act> acts(n_nodes);
    acts[0] = make(graph.input_shape);
    for (std::size_t k = 0; k < acts[0].v.size(); ++k) acts[0].v[k] = batch.sample(s)[k];
    for (int i = 1; i < n_nodes; ++i) {
      const auto preds = graph.inputs_of(i);
      const Act& in = acts[preds[0]];
      const auto& p = params.layers[i];
      Act out;
      std::visit(
          [&](const auto& layer) {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, ConvLayer>) {
              out = conv(in, node_geometry(graph, i), p, false);
              apply_bn(out, p);
              apply_relu(out, layer.activation);
            } else if constexpr (std::is_same_v<T, DepthwiseConvLayer>) {
              out = conv(in, node_geometry(graph, i), p, true);
              apply_bn(out, p);
              apply_relu(out, layer.activation);
            } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
              const ConvGeometry g = node_geometry(graph, i);
              out = make(graph.resolved_shapes[i]);
              for (int oy = 0; oy < g.out_h; ++oy) {
                for (int ox = 0; ox < g.out_w; ++ox) {
                  for (int c = 0; c < g.in_c; ++c) {
                    double best = -INFINITY;
                    for (int ky = 0; ky < g.kernel; ++ky) {
                      for (int kx = 0; kx < g.kernel; ++kx) {
                        best = std::max(best, in.at(oy * g.stride + ky, ox * g.stride + kx, c));
                      }
                    }
                    out.at(oy, ox, c) = best;
                  }
                }
              }
            } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
              out = make(graph.resolved_shapes[i]);
              const int c = in.shape.channels;
              for (std::size_t k = 0; k < in.v.size(); ++k) out.v[k % c] += in.v[k];
              for (double& x : out.v) x /= static_cast<double>(in.shape.height) * in.shape.width;
            } else if constexpr (std::is_same_v<T, AddLayer>) {
              out = in;
              const Act& other = acts[preds[1]];
              for (std::size_t k = 0; k < out.v.size(); ++k) out.v[k] += other.v[k];
              apply_relu(out, layer.activation);
            } else if constexpr (std::is_same_v<T, DenseLayer>) {
              out = make(graph.resolved_shapes[i]);
              for (int u = 0; u < layer.units; ++u) {
                double acc = p.bias.size() ? p.bias[u] : 0.0;
                for (std::size_t k = 0; k < in.v.size(); ++k) acc += in.v[k] * p.weight(static_cast<Eigen::Index>(k), u);
                out.v[u] = acc;
              }
              apply_relu(out, layer.activation);
            } else if constexpr (std::is_same_v<T, SoftmaxLayer>) {
              out = in;
              double top = -INFINITY;
              for (double x : out.v) top = std::max(top, x);
              double sum = 0;
              for (double& x : out.v) sum += (x = std::exp(x - top));
              for (double& x : out.v) x /= sum;
            }
          },
          graph.nodes[i].kind);
      acts[i] = std::move(out);
    }
    const Act& last = acts[n_nodes - 1];
    for (int c = 0; c < classes; ++c) result(s, c) = static_cast<float>(last.v[c]);
  }
  return result;
}

}  // namespace tdn
