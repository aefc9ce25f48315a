#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tdn/cli.hpp"
#include "tdn/data.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = tdn::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("tdn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }
  std::string report(const std::string& name, long long params, long long flops) {
    return write(name, "{\"params\": " + std::to_string(params) + ", \"flops\": " + std::to_string(flops) + "}");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, CheckPassesCompactReport) {
  const Outcome r = run({"check", report("compact.json", 427'776, 97'263'435), "--budget", "100000000", "--tol", "0.05"});
  EXPECT_EQ(r.code, tdn::cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("2.74%"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST_F(Cli, CheckFailsOutsideWindow) {
  const Outcome r = run({"check", report("big.json", 1, 106'000'000), "--budget", "100000000", "--tol", "0.05"});
  EXPECT_EQ(r.code, tdn::cli::kExitConstraint);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, CheckUsesConfigBudget) {
  const std::string cfg = write("c.cfg", "objective.budget_flops=20000000\n");
  EXPECT_EQ(run({"--config", cfg, "check", report("a.json", 1, 20'500'000)}).code, tdn::cli::kExitOk);
  EXPECT_EQ(run({"--config", cfg, "check", report("b.json", 1, 97'263'435)}).code, tdn::cli::kExitConstraint);
}

TEST_F(Cli, AnalyzeComparesReports) {
  const Outcome r = run({"analyze", report("ref.json", 24'136'710, 1'115'962'374),
                     report("compact.json", 427'776, 97'263'435), "--acc", "98"});
  ASSERT_EQ(r.code, tdn::cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("56×"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("11×"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("93.46"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("65.35"), std::string::npos) << r.out;
}

TEST_F(Cli, AnalyzeArchitectureWritesJson) {
  const std::string arch = write("a.tdn", "input 8 8 1\nconv c1 k=3 f=2 bn=0\ngap g\ndense fc units=2\n");
  const std::string json = (dir_ / "r.json").string();
  const Outcome r = run({"analyze", arch, "--json", json});
  ASSERT_EQ(r.code, tdn::cli::kExitOk) << r.err;
  EXPECT_TRUE(fs::exists(json));
  // conv 3*3*1*2 + 2, dense 2*2 + 2
  EXPECT_NE(r.out.find("params                26"), std::string::npos) << r.out;
  EXPECT_EQ(run({"analyze", json}).code, tdn::cli::kExitOk);
}

TEST_F(Cli, UsageAndIoErrors) {
  EXPECT_EQ(run({}).code, tdn::cli::kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, tdn::cli::kExitUsage);
  EXPECT_EQ(run({"check"}).code, tdn::cli::kExitUsage);
  const Outcome missing = run({"analyze", (dir_ / "nope.tdn").string()});
  EXPECT_EQ(missing.code, tdn::cli::kExitUsage);
  EXPECT_FALSE(missing.err.empty());
  const Outcome bad = run({"analyze", write("bad.tdn", "input 8 8 1\nconv c1 k=banana\n")});
  EXPECT_EQ(bad.code, tdn::cli::kExitUsage);
  EXPECT_NE(bad.err.find("line 2"), std::string::npos) << bad.err;
  EXPECT_EQ(run({"--config", write("x.cfg", "objective.tolerance=banana\n"), "check", report("a.json", 1, 1)}).code,
            tdn::cli::kExitUsage);
  EXPECT_EQ(run({"bench", write("a.tdn", "input 8 8 1\nconv c1 k=3 f=2\ngap g\ndense fc units=2\n"), "--iters", "2"}).code,
            tdn::cli::kExitUsage);
}

TEST_F(Cli, SynthWritesDataset) {
  const std::string out = (dir_ / "data").string();
  const Outcome r = run({"synth", "--per-class", "5", "--size", "16", "--seed", "3", "--out", out});
  ASSERT_EQ(r.code, tdn::cli::kExitOk) << r.err;
  const tdn::DatasetSplit split = tdn::read_dataset(out);
  EXPECT_EQ(split.train.size() + split.test.size(), 30u);
  EXPECT_EQ(split.train.front().pixels.rows(), 16);
}

TEST_F(Cli, TrainEvalBenchExplain) {
  const std::string arch = write("net.tdn",
                                 "input 16 16 1\nconv c1 k=3 s=2 f=8 bn=1\ngap g\ndense fc units=6\nsoftmax p\n");
  const std::string cfg = write("c.cfg", "data.per_class=6\ntrain.batch_size=8\nruntime.num_threads=1\n");
  const std::string out = (dir_ / "run").string();
  const Outcome t = run({"--config", cfg, "train", arch, "--data", "synthetic", "--epochs", "2", "--out", out});
  ASSERT_EQ(t.code, tdn::cli::kExitOk) << t.err;
  const std::string weights = (fs::path(out) / "model.tdnw").string();
  EXPECT_TRUE(fs::exists(weights));
  EXPECT_TRUE(fs::exists(fs::path(out) / "curves.csv"));

  const Outcome e = run({"--config", cfg, "eval", arch, weights, "--data", "synthetic"});
  ASSERT_EQ(e.code, tdn::cli::kExitOk) << e.err;
  EXPECT_NE(e.out.find("accuracy_pct"), std::string::npos);

  const std::string bench_json = (dir_ / "bench.json").string();
  const Outcome b = run({"--config", cfg, "bench", arch, weights, "--batch", "4", "--iters", "3", "--out", bench_json});
  ASSERT_EQ(b.code, tdn::cli::kExitOk) << b.err;
  EXPECT_TRUE(fs::exists(bench_json));

  const tdn::LabeledImage im = tdn::synth_image(1, tdn::kScratches, 0, 16);
  const std::string image = (dir_ / "img.pgm").string();
  tdn::write_pgm(image, im.pixels);
  const std::string prefix = (dir_ / "ex").string();
  const Outcome x = run({"--config", cfg, "explain", arch, weights, image, "--patch", "4", "--stride", "2",
                     "--baseline", "0.5", "--out", prefix});
  ASSERT_EQ(x.code, tdn::cli::kExitOk) << x.err;
  EXPECT_TRUE(fs::exists(prefix + ".explain.pgm"));
  EXPECT_TRUE(fs::exists(prefix + ".input.pgm"));
  EXPECT_NE(x.out.find("\"grid\":[7,7]"), std::string::npos) << x.out;
}
