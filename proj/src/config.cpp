#include "tdn/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tdn/error.hpp"

namespace tdn {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

struct Reader {
  std::string_view key;
  std::string_view value;
  int line;

  [[noreturn]] void fail(const std::string& expected) const {
    throw ConfigError(line, std::string(key) + ": expected " + expected + ", got '" + std::string(value) + "'");
  }
  std::int64_t integer(std::int64_t lo = INT64_MIN, std::int64_t hi = INT64_MAX) const {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size() || v < lo || v > hi) {
      fail("an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return v;
  }
  int small(int lo, int hi = 1 << 30) const { return static_cast<int>(integer(lo, hi)); }
  double real(double lo, double hi, bool open_lo = false) const {
    std::string s(value);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v) || v < lo || v > hi || (open_lo && v == lo)) {
      fail("a number in " + std::string(open_lo ? "(" : "[") + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return v;
  }
  bool flag() const {
    if (value == "1" || value == "true" || value == "on") return true;
    if (value == "0" || value == "false" || value == "off") return false;
    fail("a boolean (0/1/true/false)");
  }
  std::vector<int> int_list(int lo) const {
    std::vector<int> out;
    std::string_view rest = value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      Reader part{key, trim(rest.substr(0, comma)), line};
      out.push_back(part.small(lo));
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    if (out.empty()) fail("a comma-separated list");
    return out;
  }
};

using Setter = std::function<void(AppConfig&, const Reader&)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"objective.kappa", [](AppConfig& c, const Reader& r) { c.objective.kappa = r.real(0, 1e6, true); }},
      {"objective.beta", [](AppConfig& c, const Reader& r) { c.objective.beta = r.real(0, 1e6, true); }},
      {"objective.gamma", [](AppConfig& c, const Reader& r) { c.objective.gamma = r.real(0, 1e6, true); }},
      {"objective.budget_flops", [](AppConfig& c, const Reader& r) { c.objective.budget_flops = r.integer(1); }},
      {"objective.tolerance", [](AppConfig& c, const Reader& r) { c.objective.tolerance = r.real(0, 1, true); }},

      {"search.population", [](AppConfig& c, const Reader& r) { c.search.population = r.small(1); }},
      {"search.generations", [](AppConfig& c, const Reader& r) { c.search.generations = r.small(0); }},
      {"search.elite_frac", [](AppConfig& c, const Reader& r) { c.search.elite_frac = r.real(0, 1, true); }},
      {"search.seed", [](AppConfig& c, const Reader& r) { c.search.master_seed = static_cast<std::uint64_t>(r.integer(0)); }},
      {"search.alpha", [](AppConfig& c, const Reader& r) { c.search.alpha = r.real(0, 1); }},
      {"search.floor", [](AppConfig& c, const Reader& r) { c.search.floor = r.real(0, 1); }},
      {"search.repair_rounds", [](AppConfig& c, const Reader& r) { c.search.max_repair_rounds = r.small(0, 100); }},
      {"search.min_stages", [](AppConfig& c, const Reader& r) { c.search.space.min_stages = r.small(1, 8); }},
      {"search.max_stages", [](AppConfig& c, const Reader& r) { c.search.space.max_stages = r.small(1, 8); }},
      {"search.min_blocks", [](AppConfig& c, const Reader& r) { c.search.space.min_blocks = r.small(1, 16); }},
      {"search.max_blocks", [](AppConfig& c, const Reader& r) { c.search.space.max_blocks = r.small(1, 16); }},
      {"search.channels", [](AppConfig& c, const Reader& r) { c.search.space.channel_choices = r.int_list(8); }},
      {"search.stem_channels", [](AppConfig& c, const Reader& r) { c.search.space.stem_channels_choices = r.int_list(8); }},
      {"search.kernels", [](AppConfig& c, const Reader& r) { c.search.space.kernel_choices = r.int_list(1); }},
      {"search.block_types",
       [](AppConfig& c, const Reader& r) {
         std::vector<BlockType> types;
         std::string_view rest = r.value;
         while (!rest.empty()) {
           const auto comma = rest.find(',');
           const auto name = trim(rest.substr(0, comma));
           if (name == "standard") {
             types.push_back(BlockType::StandardResidual);
           } else if (name == "depthwise") {
             types.push_back(BlockType::DepthwiseSeparableResidual);
           } else {
             r.fail("a list of standard / depthwise");
           }
           rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
         }
         if (types.empty()) r.fail("a list of standard / depthwise");
         c.search.space.block_types = types;
       }},
      {"search.proxy_epochs", [](AppConfig& c, const Reader& r) { c.search.eval.train.epochs = r.small(0); }},
      {"search.proxy_batch_size", [](AppConfig& c, const Reader& r) { c.search.eval.train.batch_size = r.small(1); }},
      {"search.proxy_learning_rate",
       [](AppConfig& c, const Reader& r) { c.search.eval.train.learning_rate = r.real(0, 10); }},
      {"search.proxy_seed",
       [](AppConfig& c, const Reader& r) { c.search.eval.train.seed = static_cast<std::uint64_t>(r.integer(0)); }},

      {"train.learning_rate", [](AppConfig& c, const Reader& r) { c.train.learning_rate = r.real(0, 10); }},
      {"train.momentum", [](AppConfig& c, const Reader& r) { c.train.momentum = r.real(0, 0.999999); }},
      {"train.weight_decay", [](AppConfig& c, const Reader& r) { c.train.weight_decay = r.real(0, 1); }},
      {"train.epochs", [](AppConfig& c, const Reader& r) { c.train.epochs = r.small(0); }},
      {"train.batch_size", [](AppConfig& c, const Reader& r) { c.train.batch_size = r.small(1); }},
      {"train.seed", [](AppConfig& c, const Reader& r) { c.train.seed = static_cast<std::uint64_t>(r.integer(0)); }},
      {"train.augment", [](AppConfig& c, const Reader& r) { c.train.augment = r.flag(); }},
      {"train.step_decay", [](AppConfig& c, const Reader& r) { c.train.step_decay = r.flag(); }},
      {"train.target_accuracy", [](AppConfig& c, const Reader& r) { c.train.target_accuracy = r.real(0, 100); }},

      {"runtime.primitive_cache_capacity",
       [](AppConfig& c, const Reader& r) { c.runtime.primitive_cache_capacity = r.small(0); }},
      {"runtime.blocked_format", [](AppConfig& c, const Reader& r) { c.runtime.blocked_format = r.flag(); }},
      {"runtime.mempool_enable", [](AppConfig& c, const Reader& r) { c.runtime.mempool_enable = r.flag(); }},
      {"runtime.tensor_pool_limit", [](AppConfig& c, const Reader& r) { c.runtime.tensor_pool_limit = r.small(0); }},
      {"runtime.conv_add_fusion_safe",
       [](AppConfig& c, const Reader& r) { c.runtime.conv_add_fusion_safe = r.flag(); }},
      {"runtime.num_threads", [](AppConfig& c, const Reader& r) { c.runtime.num_threads = r.small(1, 1024); }},
      {"runtime.cpu_affinity",
       [](AppConfig& c, const Reader& r) {
         std::string v(r.value);
         if (!v.empty()) {
           try {
             parse_core_list(v);
           } catch (const ConfigError&) {
             r.fail("a core list such as 0-7");
           }
         }
         c.runtime.cpu_affinity = v;
       }},
      {"runtime.instrumented", [](AppConfig& c, const Reader& r) { c.runtime.instrumented = r.flag(); }},

      {"data.source", [](AppConfig& c, const Reader& r) { c.data.source = std::string(r.value); }},
      {"data.per_class", [](AppConfig& c, const Reader& r) { c.data.per_class = r.small(2); }},
      {"data.size", [](AppConfig& c, const Reader& r) { c.data.size = r.small(8, 4096); }},
      {"data.seed", [](AppConfig& c, const Reader& r) { c.data.seed = static_cast<std::uint64_t>(r.integer(0)); }},
      {"data.train_fraction", [](AppConfig& c, const Reader& r) { c.data.train_fraction = r.real(0, 1, true); }},
  };
  return table;
}

}  // namespace

void set_config_value(AppConfig& cfg, std::string_view key, std::string_view value, int line) {
  const auto& table = setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError(line, "unknown key '" + std::string(key) + "'");
  it->second(cfg, Reader{key, value, line});
}

AppConfig parse_config(std::string_view text, AppConfig base) {
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(line_no, "expected key=value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    set_config_value(base, key, value, line_no);
  }
  base.search.objective = base.objective;
  base.search.space.input_size = {base.data.size, base.data.size, 1};
  return base;
}

AppConfig load_config(const std::string& path) {
  AppConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    cfg = parse_config(ss.str());
  } else {
    cfg = parse_config("");
  }
  cfg.runtime = apply_env_overrides(cfg.runtime);
  return cfg;
}

}  // namespace tdn
