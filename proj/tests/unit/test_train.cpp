#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "oracles.hpp"
#include "support.hpp"
#include "tdn/error.hpp"
#include "tdn/runtime.hpp"
#include "tdn/train.hpp"

using namespace tdn;

namespace {

testkit::RandomGraphOptions small_nets() {
  testkit::RandomGraphOptions o;
  o.min_size = 5;
  o.max_size = 9;
  o.max_channels = 8;
  o.max_layers = 9;
  o.max_input_channels = 2;
  return o;
}

std::vector<int> random_labels(int n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(rng.range(0, classes - 1));
  return labels;
}

DatasetSplit blobs(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  DatasetSplit d;
  for (int i = 0; i < 2 * per_class; ++i) {
    LabeledImage im;
    im.label = i % 2;
    im.pixels = Image::Constant(2, 2, im.label ? 0.8f : 0.2f);
    for (Eigen::Index k = 0; k < im.pixels.size(); ++k) {
      im.pixels.data()[k] += static_cast<float>(rng.uniform(-0.1, 0.1));
    }
    im.source_id = "b" + std::to_string(i);
    (i % 5 == 4 ? d.test : d.train).push_back(im);
  }
  return d;
}

}  // namespace

TEST(Gradients, FiniteDifferencesOnRandomNets) {
  std::map<std::string, int> kinds;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ArchGraph g = testkit::random_graph(3000 + seed, small_nets());
    ModelParams<double> p = testkit::random_params<double>(g, seed);
    const auto x = testkit::random_tensor<double>(3, g.input_shape, seed + 1);
    const auto y = random_labels(3, g.output_shape().channels, seed);
    const auto base = loss_and_grads(g, p, x, y, false);
    ASSERT_TRUE(base.finite);
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      std::string kind(kind_name(g.nodes[i].kind));
      if (p.layers[i].bn_scale.size()) kinds["bn"]++;
      kinds[kind]++;
      std::vector<double*> ws;
      std::vector<const double*> gs;
      std::vector<Eigen::Index> ns;
      std::vector<std::string> names;
      for_each_learnable(p.layers[i], [&](const char* name, double* d, Eigen::Index n) {
        ws.push_back(d);
        ns.push_back(n);
        names.push_back(name);
      });
      for_each_learnable(base.grads.layers[i], [&](const char*, const double* d, Eigen::Index) { gs.push_back(d); });
      ASSERT_EQ(ws.size(), gs.size());
      for (std::size_t t = 0; t < ws.size(); ++t) {
        EXPECT_LT(testkit::fd_error(g, p, x, y, ws[t], gs[t], ns[t]), 1e-3)
            << "seed " << seed << " node " << g.nodes[i].id << "." << names[t];
      }
    }
  }
  for (const char* k : {"conv", "dwconv", "maxpool", "gap", "add", "dense", "softmax", "bn"}) {
    EXPECT_GT(kinds[k], 0) << k << " never exercised";
  }
}

TEST(Gradients, SinglePrecisionAgreesWithDouble) {
  const ArchGraph g = testkit::random_graph(3100, small_nets());
  ModelParams<double> pd = testkit::random_params<double>(g, 1);
  ModelParams<float> pf = pd.cast<float>();
  const auto xd = testkit::random_tensor<double>(4, g.input_shape, 2);
  const auto y = random_labels(4, g.output_shape().channels, 3);
  const auto a = loss_and_grads(g, pd, xd, y, false);
  const auto b = loss_and_grads(g, pf, xd.cast<float>(), y, false);
  EXPECT_NEAR(a.loss, b.loss, 1e-4);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (a.grads.layers[i].weight.size()) {
      EXPECT_LT((a.grads.layers[i].weight.cast<float>() - b.grads.layers[i].weight).cwiseAbs().maxCoeff(), 1e-3f);
    }
  }
}

TEST(Loss, UniformPredictionIsLogSix) {
  const ArchGraph g = infer_shapes(parse_arch("input 4 4 1\nconv c k=3 f=4 bn=1\ngap g\ndense d units=6\nsoftmax s\n"));
  ModelParams<double> p = init_params<double>(g, 1);
  p.layers[3].weight.setZero();
  const auto x = testkit::random_tensor<double>(5, g.input_shape, 1);
  const std::vector<int> y{0, 1, 2, 3, 4};
  EXPECT_NEAR(loss_and_grads(g, p, x, y).loss, std::log(6.0), 1e-3);
}

TEST(Loss, DuplicatedBatchUnchanged) {
  const ArchGraph g = testkit::random_graph(3200, small_nets());
  ModelParams<double> p = testkit::random_params<double>(g, 4);
  const auto x = testkit::random_tensor<double>(3, g.input_shape, 5);
  const auto y = random_labels(3, g.output_shape().channels, 6);
  Tensor<double> xx(6, g.input_shape);
  xx.data.head(x.data.size()) = x.data;
  xx.data.tail(x.data.size()) = x.data;
  std::vector<int> yy = y;
  yy.insert(yy.end(), y.begin(), y.end());
  EXPECT_NEAR(loss_and_grads(g, p, x, y, false).loss, loss_and_grads(g, p, xx, yy, false).loss, 1e-12);
}

TEST(Loss, NonFiniteIsReported) {
  const ArchGraph g = infer_shapes(parse_arch("input 2 2 1\ngap g\ndense d units=3\n"));
  ModelParams<float> p = init_params<float>(g, 1);
  p.layers[2].weight.setConstant(std::numeric_limits<float>::infinity());
  Tensor<float> x(1, 2, 2, 1);
  x.data.setConstant(1);
  const std::vector<int> y{0};
  EXPECT_FALSE(loss_and_grads(g, p, x, y).finite);
}

TEST(BatchNorm, RunningStatsMatchInference) {
  const ArchGraph g = infer_shapes(parse_arch(
      "input 6 6 1\nconv c1 k=3 f=4 bn=1 act=relu\ndwconv d1 k=3 bn=1 act=none\ngap g\ndense fc units=3\nsoftmax p\n"));
  ModelParams<float> p = testkit::random_params<float>(g, 3);
  const auto x = testkit::random_tensor<float>(4, g.input_shape, 4);
  const std::vector<int> y{0, 1, 2, 0};
  for (int it = 0; it < 200; ++it) loss_and_grads(g, p, x, y, true);
  const RowMatrix<float> train_mode = forward_train(g, p, x);
  RuntimeConfig rc;
  rc.num_threads = 1;
  const RowMatrix<float> inference = infer(build_plan(g, p, rc), x);
  EXPECT_LT((train_mode - inference).cwiseAbs().maxCoeff(), 1e-3f);
}

TEST(Sgd, HandIteration) {
  const ArchGraph g = infer_shapes(parse_arch("input 1 1 1\ndense d units=1\n"));
  ModelParams<double> p = init_params<double>(g, 1);
  p.layers[1].weight(0, 0) = 1.0;
  ModelParams<double> grads = zeros_like(p);
  grads.layers[1].weight(0, 0) = 0.5;
  ModelParams<double> v = zeros_like(p);
  TrainConfig cfg;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0;
  sgd_step(p, grads, v, cfg, 0.1);
  EXPECT_NEAR(p.layers[1].weight(0, 0), 0.95, 1e-15);
  sgd_step(p, grads, v, cfg, 0.1);
  EXPECT_NEAR(v.layers[1].weight(0, 0), 0.95, 1e-15);
  EXPECT_NEAR(p.layers[1].weight(0, 0), 0.855, 1e-15);
}

TEST(Sgd, ZeroRateAccumulatesVelocityOnly) {
  const ArchGraph g = testkit::random_graph(3300, small_nets());
  ModelParams<double> p = testkit::random_params<double>(g, 1);
  const ModelParams<double> before = p;
  ModelParams<double> grads = zeros_like(p);
  for (auto& l : grads.layers) l.weight.setConstant(0.3);
  ModelParams<double> v = zeros_like(p);
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  sgd_step(p, grads, v, cfg, 0.0);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    EXPECT_EQ(p.layers[i].weight, before.layers[i].weight);
    EXPECT_EQ(p.layers[i].bn_mean, before.layers[i].bn_mean);
    if (v.layers[i].weight.size()) {
      const Eigen::ArrayXXd expected = 0.3 + 0.01 * before.layers[i].weight.array();
      EXPECT_LT((v.layers[i].weight.array() - expected).abs().maxCoeff(), 1e-15);
    }
  }
}

TEST(Sgd, PlainGradientDescent) {
  const ArchGraph g = infer_shapes(parse_arch("input 1 1 2\ndense d units=2\n"));
  ModelParams<double> p = init_params<double>(g, 1);
  const ModelParams<double> before = p;
  ModelParams<double> grads = zeros_like(p);
  grads.layers[1].weight << 1, 2, 3, 4;
  grads.layers[1].bias << -1, 1;
  ModelParams<double> v = zeros_like(p);
  TrainConfig cfg;
  cfg.momentum = 0;
  for (int step = 0; step < 3; ++step) sgd_step(p, grads, v, cfg, 0.5);
  EXPECT_LT((p.layers[1].weight - (before.layers[1].weight - 1.5 * grads.layers[1].weight)).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_LT((p.layers[1].bias - (before.layers[1].bias - 1.5 * grads.layers[1].bias)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Init, DeterministicAndIdentityBatchNorm) {
  const ArchGraph g = testkit::random_graph(3400);
  const auto a = init_params<float>(g, 9);
  const auto b = init_params<float>(g, 9);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    EXPECT_EQ(a.layers[i].weight, b.layers[i].weight);
    if (a.layers[i].bn_scale.size()) {
      EXPECT_TRUE((a.layers[i].bn_scale.array() == 1.0f).all());
      EXPECT_TRUE((a.layers[i].bn_var.array() == 1.0f).all());
      EXPECT_TRUE((a.layers[i].bn_mean.array() == 0.0f).all());
    }
    if (a.layers[i].bias.size()) {
      EXPECT_TRUE((a.layers[i].bias.array() == 0.0f).all());
    }
  }
  const ArchGraph only_input = infer_shapes(parse_arch("input 3 3 1\n"));
  EXPECT_EQ(init_params<float>(only_input, 1).learnable_count(), 0);
}

TEST(Init, GlorotBounds) {
  const ArchGraph g = infer_shapes(parse_arch("input 4 4 3\nconv c k=3 f=5\ngap g\ndense d units=7\n"));
  const auto p = init_params<double>(g, 2);
  const double conv_limit = std::sqrt(6.0 / (27 + 45));
  EXPECT_LE(p.layers[1].weight.cwiseAbs().maxCoeff(), conv_limit);
  EXPECT_GT(p.layers[1].weight.cwiseAbs().maxCoeff(), 0.5 * conv_limit);
  EXPECT_LE(p.layers[3].weight.cwiseAbs().maxCoeff(), std::sqrt(6.0 / (5 + 7)));
}

TEST(Schedule, StepDecay) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.epochs = 30;
  EXPECT_DOUBLE_EQ(scheduled_rate(cfg, 0), 0.01);
  EXPECT_DOUBLE_EQ(scheduled_rate(cfg, 14), 0.01);
  EXPECT_NEAR(scheduled_rate(cfg, 15), 0.001, 1e-15);
  EXPECT_NEAR(scheduled_rate(cfg, 22), 0.001, 1e-15);
  EXPECT_NEAR(scheduled_rate(cfg, 23), 0.0001, 1e-15);
  cfg.step_decay = false;
  EXPECT_DOUBLE_EQ(scheduled_rate(cfg, 29), 0.01);
}

TEST(Fit, SeparableBlobs) {
  const ArchGraph g = infer_shapes(parse_arch("input 2 2 1\ngap g\ndense d units=2\nsoftmax s\n"));
  const DatasetSplit d = blobs(50, 1);
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.batch_size = 8;
  cfg.epochs = 20;  // 80 train images / 8 = 10 steps per epoch
  cfg.step_decay = false;
  const FitResult r = fit(g, d, cfg);
  EXPECT_FALSE(r.diverged);
  EXPECT_DOUBLE_EQ(evaluate(g, r.params, d.train).accuracy_pct, 100.0);
}

TEST(Fit, ZeroEpochs) {
  const ArchGraph g = infer_shapes(parse_arch("input 2 2 1\ngap g\ndense d units=2\nsoftmax s\n"));
  const DatasetSplit d = blobs(20, 2);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 5;
  const FitResult r = fit(g, d, cfg);
  EXPECT_EQ(r.best_epoch, -1);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.params.layers[2].weight, init_params<float>(g, 5).layers[2].weight);
}

TEST(Fit, DeterministicAndLossDecreases) {
  const ArchGraph g = infer_shapes(parse_arch(
      "input 6 6 1\nconv c k=3 f=4 bn=1\nmaxpool m k=2 s=2\ngap g\ndense d units=2\nsoftmax s\n"));
  DatasetSplit d = blobs(16, 3);
  for (auto& im : d.train) im.pixels = im.pixels.replicate(3, 3).eval();
  for (auto& im : d.test) im.pixels = im.pixels.replicate(3, 3).eval();
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 5;
  // one full batch per epoch: the recorded loss is the loss on the whole train set
  cfg.batch_size = 64;
  cfg.augment = false;
  const FitResult a = fit(g, d, cfg);
  const FitResult b = fit(g, d, cfg);
  ASSERT_EQ(a.history.size(), 5u);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    if (i) {
      EXPECT_LE(a.history[i].train_loss, a.history[i - 1].train_loss * 1.05);
    }
  }
}

TEST(Fit, DivergenceKeepsBestCheckpoint) {
  const ArchGraph g =
      infer_shapes(parse_arch("input 2 2 1\ngap g\ndense h units=4\ndense d units=2\nsoftmax s\n"));
  const DatasetSplit d = blobs(20, 4);
  TrainConfig cfg;
  cfg.learning_rate = 1e30;
  cfg.epochs = 5;
  const FitResult r = fit(g, d, cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_LT(r.history.size(), 5u);
  EXPECT_EQ(r.best_epoch, -1);
  EXPECT_TRUE(r.params.layers[1].weight.allFinite());
  EXPECT_TRUE(r.params.layers[2].weight.allFinite());
}

TEST(Evaluate, ScoresAndConfusion) {
  const std::vector<int> truth{0, 0, 1, 1, 2, 2};
  const EvalResult perfect = score_predictions(truth, truth, 3);
  EXPECT_DOUBLE_EQ(perfect.accuracy_pct, 100);
  EXPECT_EQ(perfect.confusion.trace(), 6);
  std::vector<int> balanced;
  for (int c = 0; c < 6; ++c)
    for (int k = 0; k < 60; ++k) balanced.push_back(c);
  const std::vector<int> constant(balanced.size(), 2);
  const EvalResult r = score_predictions(balanced, constant, 6);
  EXPECT_NEAR(r.accuracy_pct, 100.0 / 6, 1e-9);
  for (int c = 0; c < 6; ++c) EXPECT_EQ(r.confusion.row(c).sum(), 60);
}

TEST(Evaluate, OrderInvariant) {
  const ArchGraph g = infer_shapes(parse_arch("input 2 2 1\ngap g\ndense d units=2\nsoftmax s\n"));
  const DatasetSplit d = blobs(30, 6);
  const auto p = init_params<float>(g, 3);
  std::vector<LabeledImage> reversed(d.test.rbegin(), d.test.rend());
  const EvalResult a = evaluate(g, p, d.test);
  const EvalResult b = evaluate(g, p, reversed);
  EXPECT_EQ(a.accuracy_pct, b.accuracy_pct);
  EXPECT_EQ(a.confusion, b.confusion);
}

TEST(Curves, CsvLayout) {
  const auto path = std::filesystem::temp_directory_path() / "tdn_curves.csv";
  write_curves_csv(path.string(), {{0, 1.5, 50.0, 0.01}, {1, 1.25, 62.5, 0.01}});
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "epoch,train_loss,test_acc");
  EXPECT_EQ(row, "0,1.5,50");
  std::filesystem::remove(path);
}
