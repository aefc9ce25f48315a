#include <gtest/gtest.h>

#include <cstdlib>
#include <thread>

#include "support.hpp"
#include "tdn/error.hpp"
#include "tdn/runtime.hpp"
#include "tdn/zoo.hpp"

using namespace tdn;

namespace {

RuntimeConfig knobs(int mask, int threads = 1) {
  RuntimeConfig c;
  c.primitive_cache_capacity = (mask & 1) ? 4 : 0;
  c.blocked_format = (mask & 2) != 0;
  c.mempool_enable = (mask & 4) != 0;
  c.tensor_pool_limit = (mask & 8) ? 1 : 0;
  c.conv_add_fusion_safe = (mask & 16) != 0;
  c.num_threads = threads;
  c.cpu_affinity = "";
  return c;
}

float max_abs(const RowMatrix<float>& a, const RowMatrix<float>& b) {
  EXPECT_EQ(a.rows(), b.rows());
  EXPECT_EQ(a.cols(), b.cols());
  return (a - b).cwiseAbs().maxCoeff();
}

class EnvGuard {
 public:
  explicit EnvGuard(const char* name, const char* value) : name_(name) { setenv(name, value, 1); }
  ~EnvGuard() { unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST(Equivalence, AllKnobCombinationsOnRandomGraphs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ArchGraph g = testkit::random_graph(500 + seed);
    const auto params = testkit::random_params<float>(g, seed);
    const auto x = testkit::random_tensor<float>(3, g.input_shape, 40 + seed);
    const RowMatrix<float> ref = reference_infer(g, params, x);
    for (int mask = 0; mask < 32; ++mask) {
      const ExecutionPlan plan = build_plan(g, params, knobs(mask, 1 + (mask + static_cast<int>(seed)) % 2));
      ASSERT_TRUE(plan.arena_is_safe());
      const RowMatrix<float> y = infer(plan, x);
      ASSERT_LE(max_abs(y, ref), 1e-4f) << "graph seed " << seed << " knobs " << mask << "\n"
                                        << testkit::random_graph_text(500 + seed);
      for (Eigen::Index r = 0; r < y.rows(); ++r) EXPECT_NEAR(y.row(r).sum(), 1.0f, 1e-5f);
      EXPECT_GE(y.minCoeff(), 0.0f);
    }
  }
}

TEST(Equivalence, WideChannelsExerciseBlockedTiles) {
  // 12-row tiles, partial channel blocks, strided and padded convolutions
  const ArchGraph g = infer_shapes(parse_arch(
      "input 23 19 3\n"
      "conv c1 k=7 s=2 f=20 pad=same bn=1 act=relu\n"
      "conv c2 k=3 s=1 f=37 pad=same bn=1 act=none\n"
      "conv c3 k=1 s=1 f=37 pad=same bn=0 act=none from=c1\n"
      "add a1 from=c3,c2 act=relu\n"
      "dwconv d1 k=5 s=2 pad=same bn=1 act=relu\n"
      "conv c4 k=1 s=1 f=64 pad=same bn=1 act=relu\n"
      "conv c5 k=3 s=1 f=64 pad=valid bn=0 act=relu\n"
      "maxpool m1 k=2 s=1\n"
      "gap g\n"
      "dense fc units=6 act=none\n"
      "softmax p\n"));
  const auto params = testkit::random_params<float>(g, 8);
  const auto x = testkit::random_tensor<float>(5, g.input_shape, 9);
  const RowMatrix<float> ref = reference_infer(g, params, x);
  for (int mask = 0; mask < 32; ++mask) {
    for (int threads : {1, 3}) {
      EXPECT_LE(max_abs(infer(build_plan(g, params, knobs(mask, threads)), x), ref), 1e-4f) << mask;
    }
  }
}

TEST(Equivalence, CacheCapacities) {
  const ArchGraph g = testkit::random_graph(77);
  const auto params = testkit::random_params<float>(g, 1);
  const auto x = testkit::random_tensor<float>(4, g.input_shape, 2);
  const RowMatrix<float> ref = reference_infer(g, params, x);
  for (int capacity : {0, 1, 2, 4, 16}) {
    RuntimeConfig c = knobs(31);
    c.primitive_cache_capacity = capacity;
    const ExecutionPlan plan = build_plan(g, params, c);
    for (int rep = 0; rep < 3; ++rep) EXPECT_LE(max_abs(infer(plan, x), ref), 1e-4f);
  }
}

TEST(Equivalence, CompactNet) {
  const ArchGraph g = compact_net(64);
  const auto params = testkit::random_params<float>(g, 5);
  const auto x = testkit::random_tensor<float>(2, g.input_shape, 6);
  const RowMatrix<float> ref = reference_infer(g, params, x);
  for (int mask : {0, 7, 31}) {
    const ExecutionPlan plan = build_plan(g, params, knobs(mask, 2));
    EXPECT_LE(max_abs(infer(plan, x), ref), 1e-4f);
  }
}

TEST(Plan, IdentityConvolution) {
  const ArchGraph g = infer_shapes(parse_arch("input 1 1 1\nconv c k=1 f=1 bn=0 act=none\n"));
  ModelParams<float> p = init_params<float>(g, 1);
  p.layers[1].weight(0, 0) = 1.0f;
  p.layers[1].bias[0] = 0.0f;
  Tensor<float> x(3, 1, 1, 1);
  x.data << 0.25f, -3.5f, 7.0f;
  for (int mask = 0; mask < 32; ++mask) {
    const RowMatrix<float> y = infer(build_plan(g, p, knobs(mask)), x);
    for (int n = 0; n < 3; ++n) EXPECT_EQ(y(n, 0), x.data[n]);
  }
}

TEST(Plan, UniformSoftmaxForZeroHead) {
  const ArchGraph g = infer_shapes(parse_arch("input 8 8 1\ngap g\ndense d units=6\nsoftmax s\n"));
  ModelParams<float> p = init_params<float>(g, 1);
  p.layers[2].weight.setZero();
  const auto x = testkit::random_tensor<float>(4, g.input_shape, 3);
  const RowMatrix<float> y = infer(build_plan(g, p, knobs(0)), x);
  for (Eigen::Index i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], 1.0f / 6, 1e-7f);
}

TEST(Plan, ResidualTailFusion) {
  const ArchGraph g = infer_shapes(parse_arch(
      "input 8 8 4\nconv c1 k=3 f=4 bn=1 act=relu\nconv c2 k=3 f=4 bn=1 act=none\n"
      "add a1 from=input,c2 act=relu\ngap g\n"));
  const auto p = testkit::random_params<float>(g, 2);
  const ExecutionPlan aggressive = build_plan(g, p, knobs(0));
  int fused = 0;
  for (const auto& op : aggressive.ops) {
    EXPECT_NE(op.kind, OpKind::Add);
    if (op.label() == "conv_add_relu") {
      ++fused;
      EXPECT_EQ(op.id, "c2+a1");
    }
  }
  EXPECT_EQ(fused, 1);
  EXPECT_EQ(aggressive.ops.size(), 3u);
}

TEST(Plan, SafeFusionNeedsSingleConsumer) {
  // the skip tensor c0 also feeds c1, so safe mode keeps the add separate
  const ArchGraph g = infer_shapes(parse_arch(
      "input 8 8 2\nconv c0 k=1 f=4 act=none\nconv c1 k=3 f=4 act=relu\nconv c2 k=3 f=4 act=none\n"
      "add a from=c0,c2\ngap g\n"));
  const auto p = testkit::random_params<float>(g, 3);
  auto count_adds = [](const ExecutionPlan& plan) {
    int n = 0;
    for (const auto& op : plan.ops) n += op.kind == OpKind::Add;
    return n;
  };
  EXPECT_EQ(count_adds(build_plan(g, p, knobs(0))), 0);
  EXPECT_EQ(count_adds(build_plan(g, p, knobs(16))), 1);
}

TEST(Plan, ArenaReusesMemory) {
  const ArchGraph g = compact_net(64);
  const auto p = init_params<float>(g, 1);
  const ExecutionPlan plan = build_plan(g, p, knobs(4));
  EXPECT_TRUE(plan.arena_is_safe());
  std::int64_t total = 0;
  for (const auto& v : plan.values) total += v.size();
  EXPECT_LT(plan.arena_floats, total / 2);
}

TEST(Plan, RejectsBadWeights) {
  const ArchGraph g = testkit::random_graph(4);
  auto p = init_params<float>(g, 1);
  ModelParams<float> wrong = p;
  wrong.layers.pop_back();
  EXPECT_THROW(build_plan(g, wrong), ShapeError);
  for (auto& l : p.layers) {
    if (l.weight.size()) {
      l.weight(0, 0) = std::numeric_limits<float>::infinity();
      break;
    }
  }
  EXPECT_THROW(build_plan(g, p), NumericError);
}

TEST(Infer, NonFiniteActivationNamesOp) {
  const ArchGraph g = infer_shapes(parse_arch("input 4 4 1\nconv c1 k=3 f=2\ngap g\ndense d units=2\n"));
  const auto p = init_params<float>(g, 1);
  const ExecutionPlan plan = build_plan(g, p, knobs(0));
  Tensor<float> x(1, 4, 4, 1);
  x.data.setConstant(std::numeric_limits<float>::quiet_NaN());
  try {
    infer(plan, x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.op_id(), "c1");
  }
}

TEST(Infer, ShapeMismatch) {
  const ArchGraph g = testkit::random_graph(1);
  const ExecutionPlan plan = build_plan(g, init_params<float>(g, 1), knobs(0));
  Tensor<float> x(1, g.input_shape.height + 1, g.input_shape.width, g.input_shape.channels);
  EXPECT_THROW(infer(plan, x), ShapeError);
}

TEST(Infer, DeterministicAcrossCallsAndThreads) {
  const ArchGraph g = testkit::random_graph(12);
  const auto p = testkit::random_params<float>(g, 2);
  const auto x = testkit::random_tensor<float>(7, g.input_shape, 3);
  const ExecutionPlan one = build_plan(g, p, knobs(31, 1));
  const ExecutionPlan four = build_plan(g, p, knobs(31, 4));
  const RowMatrix<float> a = infer(one, x);
  EXPECT_EQ(infer(one, x), a);
  EXPECT_EQ(infer(four, x), a);
}

TEST(Infer, ConcurrentCallersShareOnePlan) {
  const ArchGraph g = testkit::random_graph(21);
  const auto p = testkit::random_params<float>(g, 2);
  const auto x = testkit::random_tensor<float>(4, g.input_shape, 3);
  const ExecutionPlan plan = build_plan(g, p, knobs(31, 2));
  const RowMatrix<float> expected = infer(plan, x);
  std::vector<RowMatrix<float>> got(4);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int rep = 0; rep < 5; ++rep) got[t] = infer(plan, x);
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& y : got) EXPECT_EQ(y, expected);
}

TEST(Infer, InstrumentedArenaPoisoning) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ArchGraph g = testkit::random_graph(900 + seed);
    const auto p = testkit::random_params<float>(g, seed);
    const auto x = testkit::random_tensor<float>(2, g.input_shape, seed);
    RuntimeConfig c = knobs(31);
    c.instrumented = true;
    EXPECT_LE(max_abs(infer(build_plan(g, p, c), x), reference_infer(g, p, x)), 1e-4f);
  }
}

TEST(Infer, LogitsBeforeSoftmax) {
  const ArchGraph g = testkit::random_graph(30);
  const auto p = testkit::random_params<float>(g, 2);
  const auto x = testkit::random_tensor<float>(3, g.input_shape, 3);
  const ExecutionPlan plan = build_plan(g, p, knobs(7));
  RowMatrix<float> logits = infer_logits(plan, x);
  softmax_rows(logits);
  EXPECT_LE(max_abs(logits, infer(plan, x)), 1e-6f);
}

TEST(Config, TunedDefaults) {
  const RuntimeConfig c;
  EXPECT_EQ(c.primitive_cache_capacity, 4);
  EXPECT_FALSE(c.blocked_format);
  EXPECT_TRUE(c.mempool_enable);
  EXPECT_EQ(c.tensor_pool_limit, 1);
  EXPECT_FALSE(c.conv_add_fusion_safe);
  EXPECT_EQ(c.num_threads, 8);
  EXPECT_EQ(c.cpu_affinity, "0-7");
}

TEST(Config, EnvironmentOverrides) {
  EnvGuard a("TDN_PRIMITIVE_CACHE_CAPACITY", "2");
  EnvGuard b("TDN_BLOCKED_FORMAT", "1");
  EnvGuard c("TDN_MEMPOOL_ENABLE", "0");
  EnvGuard d("TDN_TENSOR_POOL_LIMIT", "3");
  EnvGuard e("TDN_CONV_ADD_FUSION_SAFE", "1");
  EnvGuard f("TDN_NUM_THREADS", "2");
  EnvGuard h("TDN_CPU_AFFINITY", "0,1");
  const RuntimeConfig cfg = apply_env_overrides({});
  EXPECT_EQ(cfg.primitive_cache_capacity, 2);
  EXPECT_TRUE(cfg.blocked_format);
  EXPECT_FALSE(cfg.mempool_enable);
  EXPECT_EQ(cfg.tensor_pool_limit, 3);
  EXPECT_TRUE(cfg.conv_add_fusion_safe);
  EXPECT_EQ(cfg.num_threads, 2);
  EXPECT_EQ(cfg.cpu_affinity, "0,1");
}

TEST(Config, BadEnvironmentValue) {
  EnvGuard a("TDN_NUM_THREADS", "many");
  EXPECT_THROW(apply_env_overrides({}), ConfigError);
}

TEST(Config, CoreLists) {
  EXPECT_EQ(parse_core_list("0-7"), (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(parse_core_list("0,2,4-5"), (std::vector<int>{0, 2, 4, 5}));
  EXPECT_TRUE(parse_core_list("").empty());
  EXPECT_THROW(parse_core_list("3-1"), Error);
  EXPECT_THROW(parse_core_list("a"), Error);
  EXPECT_THROW(parse_core_list("1,,2"), Error);
}

TEST(Bench, ArithmeticIdentities) {
  const BenchReport r = summarize_latencies(1024, 2, {0.3, 0.1, 0.2, 0.4});
  EXPECT_EQ(r.timed_iters, 4);
  EXPECT_DOUBLE_EQ(r.median_seconds, 0.25);
  EXPECT_DOUBLE_EQ(r.per_image_seconds, 0.25 / 1024);
  EXPECT_DOUBLE_EQ(r.throughput, 1024 / 0.25);
  EXPECT_DOUBLE_EQ(r.mean_seconds, 0.25);
  const nlohmann::json j = to_json(r);
  EXPECT_EQ(j["batch_size"], 1024);
}

TEST(Bench, ThreePositiveLatencies) {
  const ArchGraph g = infer_shapes(parse_arch("input 2 2 1\ngap g\n"));
  const BenchReport r = bench(build_plan(g, init_params<float>(g, 1), knobs(0)), 4, 0, 3);
  ASSERT_EQ(r.latencies.size(), 3u);
  for (double t : r.latencies) EXPECT_GT(t, 0);
  EXPECT_DOUBLE_EQ(r.per_image_seconds, r.median_seconds / 4);
  EXPECT_THROW(bench(build_plan(g, init_params<float>(g, 1), knobs(0)), 4, 0, 2), ConfigError);
}

TEST(Bench, PublishedSpeedup) {
  const BenchReport big = summarize_latencies(1, 0, {0.01881, 0.01881, 0.01881});
  const BenchReport small = summarize_latencies(1, 0, {0.00247, 0.00247, 0.00247});
  EXPECT_NEAR(speedup(big, small), 7.615, 5e-4);
  EXPECT_DOUBLE_EQ(speedup(big, big), 1.0);
  EXPECT_THROW(speedup(big, BenchReport{}), NumericError);
}
