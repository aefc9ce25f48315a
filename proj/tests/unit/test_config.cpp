#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "tdn/config.hpp"
#include "tdn/error.hpp"

using namespace tdn;

TEST(Config, Defaults) {
  const AppConfig c = parse_config("");
  EXPECT_EQ(c.objective.budget_flops, 100'000'000);
  EXPECT_DOUBLE_EQ(c.objective.tolerance, 0.05);
  EXPECT_EQ(c.data.source, "synthetic");
  EXPECT_EQ(c.data.per_class, 300);
}

TEST(Config, SectionsAndComments) {
  const AppConfig c = parse_config(
      "# budget\n"
      "objective.budget_flops = 5000000\n"
      "\n"
      "search.channels = 8,16,32\n"
      "search.block_types = standard, depthwise\n"
      "train.epochs=7\n"
      "runtime.blocked_format=false\n"
      "data.source=/tmp/neu\n");
  EXPECT_EQ(c.objective.budget_flops, 5'000'000);
  EXPECT_EQ(c.search.space.channel_choices, (std::vector<int>{8, 16, 32}));
  EXPECT_EQ(c.search.space.block_types.size(), 2u);
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_FALSE(c.runtime.blocked_format);
  EXPECT_EQ(c.data.source, "/tmp/neu");
}

TEST(Config, ErrorsCarryLine) {
  try {
    parse_config("objective.budget_flops=1\n\nobjective.tolerance=banana\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 3);
    EXPECT_NE(std::string(e.what()).find("objective.tolerance"), std::string::npos);
  }
  try {
    parse_config("train.epochs=3\nobjective.colour=red\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 2);
  }
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  EXPECT_THROW(parse_config("objective.tolerance=1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("search.channels=\n"), ConfigError);
  EXPECT_THROW(parse_config("runtime.cpu_affinity=7-2\n"), ConfigError);
  EXPECT_THROW(parse_config("search.block_types=fancy\n"), ConfigError);
}

TEST(Config, SetValue) {
  AppConfig c;
  set_config_value(c, "train.learning_rate", "0.05");
  EXPECT_DOUBLE_EQ(c.train.learning_rate, 0.05);
  EXPECT_THROW(set_config_value(c, "train.learning_rate", "-1", 9), ConfigError);
}

TEST(Config, FileAndEnvironment) {
  const auto path = std::filesystem::temp_directory_path() / "tdn_config_test.cfg";
  {
    std::ofstream out(path);
    out << "runtime.num_threads=3\ntrain.batch_size=8\n";
  }
  setenv("TDN_NUM_THREADS", "2", 1);
  const AppConfig c = load_config(path.string());
  unsetenv("TDN_NUM_THREADS");
  EXPECT_EQ(c.train.batch_size, 8);
  EXPECT_EQ(c.runtime.num_threads, 2);
  EXPECT_EQ(load_config(path.string()).runtime.num_threads, 3);
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path.string()), IoError);
}
