#include "tdn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tdn/error.hpp"
#include "tdn/layers.hpp"
#include "tdn/rng.hpp"
#include "tdn/runtime.hpp"

namespace tdn {

namespace {

template <typename Scalar>
struct Tape {
  std::vector<Tensor<Scalar>> out;      // post-activation output per node
  std::vector<Tensor<Scalar>> xhat;     // batch-norm normalized pre-affine values
  std::vector<Vector<Scalar>> inv_std;  // batch-norm 1/sqrt(var + eps)
  std::vector<Vector<Scalar>> mean;
  std::vector<Vector<Scalar>> var;
  std::vector<std::vector<int>> argmax;
};

template <typename Scalar>
void apply_relu(Tensor<Scalar>& t) {
  t.data = t.data.max(Scalar(0));
}

template <typename Scalar>
void add_bias(Tensor<Scalar>& t, const Vector<Scalar>& bias) {
  if (bias.size()) t.rows().rowwise() += bias.transpose();
}

// y = gamma * (z - mean) / sqrt(var + eps) + beta over all rows of the batch.
template <typename Scalar>
void batch_norm_train(Tensor<Scalar>& z, const LayerParams<Scalar>& p, Tape<Scalar>& tape, int i) {
  auto rows = z.rows();
  const Scalar m = static_cast<Scalar>(rows.rows());
  Vector<Scalar> mean = rows.colwise().sum().transpose() / m;
  rows.rowwise() -= mean.transpose();
  Vector<Scalar> var = rows.array().square().colwise().sum().transpose() / m;
  Vector<Scalar> inv_std = (var.array() + Scalar(kBatchNormEps)).rsqrt().matrix();
  rows.array().rowwise() *= inv_std.transpose().array();
  tape.xhat[i] = z;
  rows.array().rowwise() *= p.bn_scale.transpose().array();
  rows.rowwise() += p.bn_shift.transpose();
  tape.inv_std[i] = std::move(inv_std);
  tape.mean[i] = std::move(mean);
  tape.var[i] = std::move(var);
}

template <typename Scalar>
Tape<Scalar> run_forward(const ArchGraph& graph, const ModelParams<Scalar>& params, const Tensor<Scalar>& images) {
  if (!graph.shapes_resolved()) throw ShapeError("training requires a shape-inferred graph");
  check_params_match(graph, params);
  if (!(images.shape() == graph.input_shape)) throw ShapeError("image batch does not match the graph input");
  const int n_nodes = static_cast<int>(graph.nodes.size());
  const int batch = images.batch;
  Tape<Scalar> tape;
  tape.out.resize(n_nodes);
  tape.xhat.resize(n_nodes);
  tape.inv_std.resize(n_nodes);
  tape.mean.resize(n_nodes);
  tape.var.resize(n_nodes);
  tape.argmax.resize(n_nodes);
  std::vector<Scalar> scratch;

  for (int i = 0; i < n_nodes; ++i) {
    const auto& node = graph.nodes[i];
    const auto& p = params.layers[i];
    const auto inputs = graph.inputs_of(i);
    Tensor<Scalar>& out = tape.out[i];
    if (i == 0) {
      out = images;
      continue;
    }
    const Tensor<Scalar>& in = tape.out[inputs[0]];
    out = Tensor<Scalar>(batch, graph.resolved_shapes[i]);
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer>) {
            const ConvGeometry g = node_geometry(graph, i);
            for (int n = 0; n < batch; ++n) {
              if constexpr (std::is_same_v<T, ConvLayer>) {
                conv_forward_sample(in.sample(n), g, p.weight, scratch, out.sample(n));
              } else {
                depthwise_forward_sample(in.sample(n), g, p.weight, out.sample(n));
              }
            }
            add_bias(out, p.bias);
            if (layer.batch_norm) batch_norm_train(out, p, tape, i);
            if (layer.activation == Activation::Relu) apply_relu(out);
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            const ConvGeometry g = node_geometry(graph, i);
            tape.argmax[i].resize(static_cast<std::size_t>(out.data.size()));
            for (int n = 0; n < batch; ++n) {
              maxpool_forward_sample(in.sample(n), g, out.sample(n),
                                     tape.argmax[i].data() + n * out.sample_size());
            }
          } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
            for (int n = 0; n < batch; ++n) {
              out.sample_matrix(n) = in.sample_matrix(n).colwise().mean();
            }
          } else if constexpr (std::is_same_v<T, AddLayer>) {
            out.data = in.data + tape.out[inputs[1]].data;
            if (layer.activation == Activation::Relu) apply_relu(out);
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            Eigen::Map<const RowMatrix<Scalar>> x(in.data.data(), batch, in.sample_size());
            out.rows().noalias() = x * p.weight;
            add_bias(out, p.bias);
            if (layer.activation == Activation::Relu) apply_relu(out);
          } else if constexpr (std::is_same_v<T, SoftmaxLayer>) {
            out.data = in.data;
            softmax_rows(out.rows());
          }
        },
        node.kind);
  }
  return tape;
}

template <typename Scalar>
Tensor<Scalar>& grad_slot(std::vector<Tensor<Scalar>>& grads, const Tape<Scalar>& tape, int i) {
  if (grads[i].data.size() == 0) {
    const auto& o = tape.out[i];
    grads[i] = Tensor<Scalar>(o.batch, o.height, o.width, o.channels);
  }
  return grads[i];
}

template <typename Scalar>
void relu_mask(Tensor<Scalar>& g, const Tensor<Scalar>& out) {
  g.data = (out.data > Scalar(0)).select(g.data, Scalar(0));
}

template <typename Scalar>
void batch_norm_backward(Tensor<Scalar>& g, const LayerParams<Scalar>& p, LayerParams<Scalar>& dp,
                         const Tape<Scalar>& tape, int i) {
  auto dy = g.rows();
  const auto& xhat_t = tape.xhat[i];
  Eigen::Map<const RowMatrix<Scalar>> xhat(xhat_t.data.data(), dy.rows(), dy.cols());
  const Scalar m = static_cast<Scalar>(dy.rows());
  dp.bn_scale += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  dp.bn_shift += dy.colwise().sum().transpose();
  RowMatrix<Scalar> dxhat = dy.array().rowwise() * p.bn_scale.transpose().array();
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> sum_dxhat = dxhat.colwise().sum();
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> sum_dxhat_xhat = (dxhat.array() * xhat.array()).colwise().sum();
  dxhat *= m;
  dxhat.rowwise() -= sum_dxhat;
  dxhat.array() -= xhat.array().rowwise() * sum_dxhat_xhat.array();
  dxhat.array().rowwise() *= (tape.inv_std[i].array() / m).transpose();
  dy = dxhat;
}

template <typename Scalar>
void run_backward(const ArchGraph& graph, const ModelParams<Scalar>& params, const Tape<Scalar>& tape,
                  int logits_node, Tensor<Scalar> logits_grad, ModelParams<Scalar>& dparams) {
  const int n_nodes = static_cast<int>(graph.nodes.size());
  std::vector<Tensor<Scalar>> grads(n_nodes);
  grads[logits_node] = std::move(logits_grad);
  std::vector<Scalar> scratch;

  for (int i = logits_node; i >= 1; --i) {
    if (grads[i].data.size() == 0) continue;
    Tensor<Scalar>& g = grads[i];
    const auto inputs = graph.inputs_of(i);
    const auto& p = params.layers[i];
    auto& dp = dparams.layers[i];
    const Tensor<Scalar>& in = tape.out[inputs[0]];
    const int batch = g.batch;
    // The network input needs no gradient.
    auto in_grad_ptr = [&](int pred, int n) -> Scalar* {
      if (pred == 0) return nullptr;
      return grad_slot(grads, tape, pred).sample(n);
    };
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer>) {
            if (layer.activation == Activation::Relu) relu_mask(g, tape.out[i]);
            if (layer.batch_norm) batch_norm_backward(g, p, dp, tape, i);
            if (dp.bias.size()) dp.bias += g.rows().colwise().sum().transpose();
            const ConvGeometry geo = node_geometry(graph, i);
            for (int n = 0; n < batch; ++n) {
              if constexpr (std::is_same_v<T, ConvLayer>) {
                conv_backward_sample(in.sample(n), geo, p.weight, g.sample(n), scratch, dp.weight,
                                     in_grad_ptr(inputs[0], n));
              } else {
                depthwise_backward_sample(in.sample(n), geo, p.weight, g.sample(n), dp.weight,
                                          in_grad_ptr(inputs[0], n));
              }
            }
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            if (inputs[0] == 0) return;
            Tensor<Scalar>& din = grad_slot(grads, tape, inputs[0]);
            const auto& arg = tape.argmax[i];
            for (int n = 0; n < batch; ++n) {
              Scalar* dx = din.sample(n);
              const Scalar* dy = g.sample(n);
              const int* a = arg.data() + n * g.sample_size();
              for (Eigen::Index k = 0; k < g.sample_size(); ++k) dx[a[k]] += dy[k];
            }
          } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
            if (inputs[0] == 0) return;
            Tensor<Scalar>& din = grad_slot(grads, tape, inputs[0]);
            const Scalar inv = Scalar(1) / static_cast<Scalar>(din.pixels());
            for (int n = 0; n < batch; ++n) {
              din.sample_matrix(n).rowwise() += g.sample_matrix(n).row(0) * inv;
            }
          } else if constexpr (std::is_same_v<T, AddLayer>) {
            if (layer.activation == Activation::Relu) relu_mask(g, tape.out[i]);
            for (int pred : inputs) {
              if (pred != 0) grad_slot(grads, tape, pred).data += g.data;
            }
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            if (layer.activation == Activation::Relu) relu_mask(g, tape.out[i]);
            Eigen::Map<const RowMatrix<Scalar>> x(in.data.data(), batch, in.sample_size());
            const auto dy = g.rows();
            dp.weight.noalias() += x.transpose() * dy;
            dp.bias += dy.colwise().sum().transpose();
            if (inputs[0] != 0) {
              Tensor<Scalar>& din = grad_slot(grads, tape, inputs[0]);
              Eigen::Map<RowMatrix<Scalar>> dx(din.data.data(), batch, din.sample_size());
              dx.noalias() += dy * p.weight.transpose();
            }
          } else if constexpr (std::is_same_v<T, SoftmaxLayer>) {
            throw ShapeError("softmax must be the terminal node");
          }
        },
        graph.nodes[i].kind);
    g = Tensor<Scalar>();
  }
}

int logits_node_of(const ArchGraph& graph) {
  const int last = static_cast<int>(graph.nodes.size()) - 1;
  if (std::holds_alternative<SoftmaxLayer>(graph.nodes[last].kind)) return graph.inputs_of(last)[0];
  return last;
}

}  // namespace

template <typename Scalar>
RowMatrix<Scalar> forward_train(const ArchGraph& graph, const ModelParams<Scalar>& params,
                                const Tensor<Scalar>& images) {
  auto tape = run_forward(graph, params, images);
  const auto& out = tape.out.back();
  return Eigen::Map<const RowMatrix<Scalar>>(out.data.data(), out.batch, out.sample_size());
}

template <typename Scalar>
LossAndGrads<Scalar> loss_and_grads(const ArchGraph& graph, ModelParams<Scalar>& params, const Tensor<Scalar>& images,
                                    std::span<const int> labels, bool update_running_stats) {
  if (static_cast<int>(labels.size()) != images.batch) throw ShapeError("one label per image required");
  Tape<Scalar> tape = run_forward(graph, params, images);
  const int logits_node = logits_node_of(graph);
  const Tensor<Scalar>& logits_t = tape.out[logits_node];
  if (logits_t.height != 1 || logits_t.width != 1) throw ShapeError("classifier output must be a vector");
  const int batch = images.batch;
  const int classes = logits_t.channels;

  Eigen::Map<const RowMatrix<Scalar>> logits(logits_t.data.data(), batch, classes);
  LossAndGrads<Scalar> result;
  result.probabilities = logits;
  softmax_rows(result.probabilities);

  double loss = 0;
  for (int n = 0; n < batch; ++n) {
    const int y = labels[n];
    if (y < 0 || y >= classes) throw ShapeError("label " + std::to_string(y) + " out of range");
    const auto row = logits.row(n);
    const Scalar top = row.maxCoeff();
    const Scalar lse = top + std::log((row.array() - top).exp().sum());
    loss += static_cast<double>(lse - row(y));
  }
  result.loss = static_cast<Scalar>(loss / batch);
  result.finite = std::isfinite(loss);
  result.grads = zeros_like(params);
  if (!result.finite) return result;

  Tensor<Scalar> dlogits(batch, 1, 1, classes);
  dlogits.rows() = result.probabilities;
  for (int n = 0; n < batch; ++n) dlogits.rows()(n, labels[n]) -= Scalar(1);
  dlogits.data /= static_cast<Scalar>(batch);
  run_backward(graph, params, tape, logits_node, std::move(dlogits), result.grads);

  if (update_running_stats) {
    const Scalar mom = static_cast<Scalar>(kBatchNormMomentum);
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
      if (tape.mean[i].size() == 0) continue;
      auto& p = params.layers[i];
      p.bn_mean = mom * p.bn_mean + (Scalar(1) - mom) * tape.mean[i];
      p.bn_var = mom * p.bn_var + (Scalar(1) - mom) * tape.var[i];
    }
  }
  return result;
}

template <typename Scalar>
void sgd_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, ModelParams<Scalar>& velocity,
              const TrainConfig& cfg, double learning_rate) {
  const Scalar lr = static_cast<Scalar>(learning_rate);
  const Scalar mom = static_cast<Scalar>(cfg.momentum);
  const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    std::vector<Scalar*> w_ptrs, g_ptrs, v_ptrs;
    std::vector<Eigen::Index> sizes;
    for_each_learnable(params.layers[i], [&](const char*, Scalar* d, Eigen::Index n) {
      w_ptrs.push_back(d);
      sizes.push_back(n);
    });
    for_each_learnable(grads.layers[i], [&](const char*, const Scalar* d, Eigen::Index) {
      g_ptrs.push_back(const_cast<Scalar*>(d));
    });
    for_each_learnable(velocity.layers[i], [&](const char*, Scalar* d, Eigen::Index) { v_ptrs.push_back(d); });
    if (g_ptrs.size() != w_ptrs.size() || v_ptrs.size() != w_ptrs.size()) {
      throw ShapeError("gradient / velocity layout does not match parameters");
    }
    for (std::size_t t = 0; t < w_ptrs.size(); ++t) {
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> w(w_ptrs[t], sizes[t]), v(v_ptrs[t], sizes[t]);
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> g(g_ptrs[t], sizes[t]);
      v = mom * v + g + wd * w;
      w -= lr * v;
    }
  }
}

template LossAndGrads<float> loss_and_grads(const ArchGraph&, ModelParams<float>&, const Tensor<float>&,
                                            std::span<const int>, bool);
template LossAndGrads<double> loss_and_grads(const ArchGraph&, ModelParams<double>&, const Tensor<double>&,
                                             std::span<const int>, bool);
template RowMatrix<float> forward_train(const ArchGraph&, const ModelParams<float>&, const Tensor<float>&);
template RowMatrix<double> forward_train(const ArchGraph&, const ModelParams<double>&, const Tensor<double>&);
template void sgd_step(ModelParams<float>&, const ModelParams<float>&, ModelParams<float>&, const TrainConfig&, double);
template void sgd_step(ModelParams<double>&, const ModelParams<double>&, ModelParams<double>&, const TrainConfig&,
                       double);

double scheduled_rate(const TrainConfig& cfg, int epoch) {
  double lr = cfg.learning_rate;
  if (!cfg.step_decay || cfg.epochs <= 0) return lr;
  if (2 * epoch >= cfg.epochs) lr *= 0.1;
  if (4 * epoch >= 3 * cfg.epochs) lr *= 0.1;
  return lr;
}

EvalResult score_predictions(std::span<const int> truth, std::span<const int> predicted, int classes) {
  EvalResult r;
  r.confusion = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(classes, classes);
  for (std::size_t k = 0; k < truth.size(); ++k) r.confusion(truth[k], predicted[k]) += 1;
  const auto total = r.confusion.sum();
  r.accuracy_pct = total ? 100.0 * static_cast<double>(r.confusion.trace()) / static_cast<double>(total) : 0.0;
  return r;
}

EvalResult evaluate(const ArchGraph& graph, const ModelParams<float>& params, const std::vector<LabeledImage>& test) {
  if (test.empty()) throw ShapeError("evaluate: empty test set");
  RuntimeConfig rc;
  rc.num_threads = 1;
  const ExecutionPlan plan = build_plan(graph, params, rc);
  const int classes = graph.output_shape().channels;
  std::vector<int> truth, predicted;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    std::vector<const LabeledImage*> chunk;
    for (std::size_t k = start; k < std::min(test.size(), start + kChunk); ++k) chunk.push_back(&test[k]);
    const RowMatrix<float> probs = infer(plan, to_tensor<float>(chunk));
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      Eigen::Index best = 0;
      probs.row(static_cast<Eigen::Index>(k)).maxCoeff(&best);
      if (chunk[k]->label < 0 || chunk[k]->label >= classes) throw ShapeError("test label out of range");
      truth.push_back(chunk[k]->label);
      predicted.push_back(static_cast<int>(best));
    }
  }
  return score_predictions(truth, predicted, classes);
}

namespace {

void flip_sample(float* data, int h, int w, bool horizontal, bool vertical) {
  Eigen::Map<RowMatrix<float>> m(data, h, w);
  if (horizontal) m = m.rowwise().reverse().eval();
  if (vertical) m = m.colwise().reverse().eval();
}

}  // namespace

FitResult fit(const ArchGraph& graph, const DatasetSplit& data, const TrainConfig& cfg) {
  if (data.train.empty()) throw ShapeError("fit: empty training set");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ShapeError("fit: batch_size >= 1 and epochs >= 0 required");
  FitResult result;
  ModelParams<float> params = init_params<float>(graph, cfg.seed);
  ModelParams<float> velocity = zeros_like(params);
  result.params = params;
  result.best_accuracy = data.test.empty() ? 0.0 : evaluate(graph, params, data.test).accuracy_pct;

  std::vector<int> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x5eed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);
    const double lr = scheduled_rate(cfg, epoch);
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const LabeledImage*> chunk;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        chunk.push_back(&data.train[order[k]]);
        labels.push_back(data.train[order[k]].label);
      }
      Tensor<float> batch = to_tensor<float>(chunk);
      if (cfg.augment) {
        for (int n = 0; n < batch.batch; ++n) {
          const bool h = rng.coin();
          const bool v = rng.coin();
          flip_sample(batch.sample(n), batch.height, batch.width, h, v);
        }
      }
      auto lg = loss_and_grads(graph, params, batch, labels, true);
      if (!lg.finite) {
        result.diverged = true;
        break;
      }
      sgd_step(params, lg.grads, velocity, cfg, lr);
      loss_sum += lg.loss;
      ++batches;
    }
    if (result.diverged) break;

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / std::max(batches, 1);
    stats.learning_rate = lr;
    try {
      stats.test_accuracy = data.test.empty() ? 0.0 : evaluate(graph, params, data.test).accuracy_pct;
    } catch (const NumericError&) {
      result.diverged = true;
      break;
    }
    result.history.push_back(stats);
    // Ties with the untrained starting point go to the trained weights.
    const bool improved = stats.test_accuracy > result.best_accuracy ||
                          (result.best_epoch < 0 && stats.test_accuracy >= result.best_accuracy);
    if (improved) {
      result.best_accuracy = stats.test_accuracy;
      result.best_epoch = epoch;
      result.params = params;
    }
    if (cfg.target_accuracy && stats.test_accuracy >= *cfg.target_accuracy) break;
  }
  return result;
}

void write_curves_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "epoch,train_loss,test_acc\n";
  for (const auto& e : history) out << e.epoch << "," << e.train_loss << "," << e.test_accuracy << "\n";
}

}  // namespace tdn
