#include "tdn/genesis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "tdn/error.hpp"
#include "tdn/rng.hpp"

namespace tdn {

void SearchSpace::validate() const {
  if (num_classes < 1) throw ShapeError("search space needs at least one class");
  if (min_stages < 1 || max_stages < min_stages) throw ShapeError("bad stage range");
  if (min_blocks < 1 || max_blocks < min_blocks) throw ShapeError("bad blocks-per-stage range");
  if (channel_choices.empty() || kernel_choices.empty() || block_types.empty() || stem_channels_choices.empty()) {
    throw ShapeError("search space choice lists must be nonempty");
  }
  for (int c : channel_choices) {
    if (c < 8 || c % 8) throw ShapeError("channel choices must be positive multiples of 8");
  }
  for (int c : stem_channels_choices) {
    if (c < 8 || c % 8) throw ShapeError("stem channel choices must be positive multiples of 8");
  }
  for (int k : kernel_choices) {
    if (k < 1 || k > 7 || k % 2 == 0) throw ShapeError("kernel choices must be odd and at most 7");
  }
  if (input_size.height < 1 || input_size.width < 1 || input_size.channels < 1) {
    throw ShapeError("input size must be positive");
  }
}

namespace {

// Decision layout: stages, stem, then per stage channels / blocks / kernel / block type.
constexpr int kPerStage = 4;

int option_count(const SearchSpace& s, int d) {
  if (d == 0) return s.max_stages - s.min_stages + 1;
  if (d == 1) return static_cast<int>(s.stem_channels_choices.size());
  switch ((d - 2) % kPerStage) {
    case 0: return static_cast<int>(s.channel_choices.size());
    case 1: return s.max_blocks - s.min_blocks + 1;
    case 2: return static_cast<int>(s.kernel_choices.size());
    default: return static_cast<int>(s.block_types.size());
  }
}

int decision_count(const SearchSpace& s) { return 2 + kPerStage * s.max_stages; }

class Builder {
 public:
  explicit Builder(const TensorShape& input) {
    graph_.input_shape = input;
    graph_.nodes.push_back({"input", InputLayer{input}, {}});
  }

  std::string conv(const std::string& id, const std::string& from, int f, int k, int s, Activation act) {
    ConvLayer c;
    c.out_channels = f;
    c.kernel = k;
    c.stride = s;
    c.padding = Padding::Same;
    c.batch_norm = true;
    c.has_bias = false;
    c.activation = act;
    return push(id, c, {from});
  }
  std::string dwconv(const std::string& id, const std::string& from, int k, int s) {
    DepthwiseConvLayer d;
    d.kernel = k;
    d.stride = s;
    d.padding = Padding::Same;
    d.batch_norm = true;
    d.has_bias = false;
    d.activation = Activation::Relu;
    return push(id, d, {from});
  }
  std::string add(const std::string& id, const std::string& a, const std::string& b) {
    return push(id, AddLayer{Activation::Relu}, {a, b});
  }
  std::string push(const std::string& id, LayerKind kind, std::vector<std::string> preds) {
    graph_.nodes.push_back({id, std::move(kind), std::move(preds)});
    return id;
  }

  ArchGraph finish() { return infer_shapes(std::move(graph_)); }

 private:
  ArchGraph graph_;
};

std::string block_residual(Builder& b, const std::string& prefix, const std::string& in, int in_channels,
                           int channels, int kernel, int stride, BlockType type) {
  std::string shortcut = in;
  if (stride != 1 || in_channels != channels) {
    shortcut = b.conv(prefix + "_sc", in, channels, 1, stride, Activation::None);
  }
  std::string out;
  if (type == BlockType::StandardResidual) {
    const std::string c1 = b.conv(prefix + "_c1", in, channels, kernel, stride, Activation::Relu);
    out = b.conv(prefix + "_c2", c1, channels, kernel, 1, Activation::None);
  } else {
    const std::string d1 = b.dwconv(prefix + "_d1", in, kernel, stride);
    const std::string p1 = b.conv(prefix + "_p1", d1, channels, 1, 1, Activation::Relu);
    const std::string d2 = b.dwconv(prefix + "_d2", p1, kernel, 1);
    out = b.conv(prefix + "_p2", d2, channels, 1, 1, Activation::None);
  }
  return b.add(prefix + "_add", shortcut, out);
}

std::string candidate_name(int generation, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "g%03d-c%03d", generation, index);
  return buf;
}

int index_of_value(const std::vector<int>& v, int x, int fallback) {
  auto it = std::find(v.begin(), v.end(), x);
  return it == v.end() ? fallback : static_cast<int>(it - v.begin());
}

bool is_classifier(const ArchGraph& g, int i, const std::vector<std::vector<int>>& consumers) {
  if (i == static_cast<int>(g.nodes.size()) - 1) return true;
  for (int c : consumers[i]) {
    if (std::holds_alternative<SoftmaxLayer>(g.nodes[c].kind)) return true;
  }
  return false;
}

}  // namespace

GeneratorState init_generator(const SearchSpace& space, std::uint64_t master_seed, double floor, double alpha) {
  space.validate();
  GeneratorState state;
  state.master_seed = master_seed;
  state.floor = floor;
  state.alpha = alpha;
  static const char* kStageNames[kPerStage] = {"channels", "blocks", "kernel", "block"};
  for (int d = 0; d < decision_count(space); ++d) {
    Decision dec;
    if (d == 0) {
      dec.name = "stages";
    } else if (d == 1) {
      dec.name = "stem_channels";
    } else {
      dec.name = "stage" + std::to_string((d - 2) / kPerStage + 1) + "." + kStageNames[(d - 2) % kPerStage];
    }
    const int n = option_count(space, d);
    dec.probs = Eigen::VectorXd::Constant(n, 1.0 / n);
    state.decisions.push_back(std::move(dec));
  }
  return state;
}

Genome prototype_genome(const SearchSpace& space) {
  space.validate();
  Genome g(static_cast<std::size_t>(decision_count(space)), 0);
  g[0] = (space.max_stages - space.min_stages) / 2;
  g[1] = static_cast<int>(space.stem_channels_choices.size() - 1) / 2;
  for (int s = 0; s < space.max_stages; ++s) {
    const int base = 2 + kPerStage * s;
    g[base] = static_cast<int>(space.channel_choices.size() - 1) / 2;
    g[base + 1] = std::clamp(2, space.min_blocks, space.max_blocks) - space.min_blocks;
    g[base + 2] = index_of_value(space.kernel_choices, 3, 0);
    g[base + 3] = 0;
  }
  return g;
}

ArchGraph decode(const SearchSpace& space, const Genome& genome) {
  space.validate();
  if (static_cast<int>(genome.size()) != decision_count(space)) throw ShapeError("genome length mismatch");
  for (int d = 0; d < decision_count(space); ++d) {
    if (genome[d] < 0 || genome[d] >= option_count(space, d)) throw ShapeError("genome option out of range");
  }
  Builder b(space.input_size);
  const int stem = space.stem_channels_choices[genome[1]];
  std::string cur = b.conv("stem", "input", stem, 3, 2, Activation::Relu);
  int channels = stem;
  const int stages = space.min_stages + genome[0];
  for (int s = 0; s < stages; ++s) {
    const int base = 2 + kPerStage * s;
    const int width = space.channel_choices[genome[base]];
    const int blocks = space.min_blocks + genome[base + 1];
    const int kernel = space.kernel_choices[genome[base + 2]];
    const BlockType type = space.block_types[genome[base + 3]];
    for (int k = 0; k < blocks; ++k) {
      const std::string prefix = "s" + std::to_string(s + 1) + "b" + std::to_string(k + 1);
      cur = block_residual(b, prefix, cur, channels, width, kernel, k == 0 ? 2 : 1, type);
      channels = width;
    }
  }
  b.push("gap", GlobalAvgPoolLayer{}, {cur});
  b.push("fc", DenseLayer{space.num_classes, Activation::None}, {"gap"});
  b.push("prob", SoftmaxLayer{}, {"fc"});
  return b.finish();
}

ArchGraph build_prototype(const SearchSpace& space) { return decode(space, prototype_genome(space)); }

std::vector<Candidate> generate(const SearchSpace& space, const GeneratorState& state, int n) {
  if (n < 1) throw ShapeError("generate needs n >= 1");
  if (static_cast<int>(state.decisions.size()) != decision_count(space)) {
    throw ShapeError("generator state does not match the search space");
  }
  constexpr int kRetries = 8;
  std::vector<Candidate> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(state.master_seed, static_cast<std::uint64_t>(state.generation), static_cast<std::uint64_t>(i)));
    Candidate c;
    c.id = i;
    c.name = candidate_name(state.generation, i);
    bool ok = false;
    for (int attempt = 0; attempt < kRetries && !ok; ++attempt) {
      Genome g;
      for (const auto& d : state.decisions) {
        const double u = rng.uniform();
        double cum = 0;
        int pick = static_cast<int>(d.probs.size()) - 1;
        for (int k = 0; k < d.probs.size(); ++k) {
          cum += d.probs[k];
          if (u < cum) {
            pick = k;
            break;
          }
        }
        g.push_back(pick);
      }
      try {
        c.arch = decode(space, g);
        c.genome = std::move(g);
        ok = true;
      } catch (const Error&) {
      }
    }
    if (!ok) {
      c.genome = prototype_genome(space);
      c.arch = decode(space, c.genome);
    }
    c.report = analyze(c.arch);
    out.push_back(std::move(c));
  }
  return out;
}

RepairResult repair(const ArchGraph& arch, const ObjectiveParams& o, int max_rounds) {
  if (!arch.shapes_resolved()) throw ShapeError("repair requires a shape-inferred graph");
  RepairResult r{arch, false, 0};
  std::int64_t flops = count_flops(arch).flops;
  if (indicator(flops, o)) {
    r.feasible = true;
    return r;
  }
  const auto consumers = arch.consumers();
  double scale = 1.0;
  for (int round = 1; round <= max_rounds; ++round) {
    scale *= std::sqrt(static_cast<double>(o.budget_flops) / static_cast<double>(flops));
    ArchGraph next = arch;
    next.resolved_shapes.clear();
    for (std::size_t i = 0; i < next.nodes.size(); ++i) {
      auto width = [&](int w) { return std::max(8, static_cast<int>(std::lround(w * scale / 8.0)) * 8); };
      if (auto* c = std::get_if<ConvLayer>(&next.nodes[i].kind)) {
        c->out_channels = width(c->out_channels);
      } else if (auto* d = std::get_if<DenseLayer>(&next.nodes[i].kind)) {
        if (!is_classifier(arch, static_cast<int>(i), consumers)) d->units = width(d->units);
      }
    }
    try {
      next = infer_shapes(std::move(next));
    } catch (const ShapeError&) {
      break;
    }
    r.rounds = round;
    r.arch = std::move(next);
    flops = count_flops(r.arch).flops;
    if (indicator(flops, o)) break;
  }
  r.feasible = indicator(flops, o);
  return r;
}

Candidate inquire(Candidate c, const DatasetSplit& data, const ProxyEval& eval, const ObjectiveParams& o) {
  if (!c.feasible) return c;
  const FitResult fr = fit(c.arch, data, eval.train);
  if (fr.diverged && fr.best_epoch < 0) {
    c.failed = true;
    c.score = -std::numeric_limits<double>::infinity();
    return c;
  }
  if (!(fr.best_accuracy > 0)) {
    c.failed = true;
    c.score = -std::numeric_limits<double>::infinity();
    return c;
  }
  c.metrics = make_metrics(fr.best_accuracy, c.report.params, c.report.flops);
  c.score = netscore(*c.metrics, o);
  return c;
}

Eigen::VectorXd apply_floor(Eigen::VectorXd p, double floor) {
  const Eigen::Index n = p.size();
  if (n == 0) return p;
  if (floor * static_cast<double>(n) >= 1.0) return Eigen::VectorXd::Constant(n, 1.0 / n);
  p /= p.sum();
  std::vector<bool> pinned(static_cast<std::size_t>(n), false);
  for (;;) {
    bool changed = false;
    double free_mass = 0;
    int pinned_count = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (!pinned[k] && p[k] < floor) {
        pinned[k] = true;
        changed = true;
      }
      if (pinned[k]) {
        ++pinned_count;
      } else {
        free_mass += p[k];
      }
    }
    if (!changed) break;
    const double target = 1.0 - floor * pinned_count;
    for (Eigen::Index k = 0; k < n; ++k) p[k] = pinned[k] ? floor : p[k] * target / free_mass;
  }
  return p;
}

GeneratorState update(const GeneratorState& state, const std::vector<Candidate>& scored, double elite_frac,
                      const ObjectiveParams&) {
  if (scored.empty()) throw ShapeError("update needs at least one candidate");
  if (!(elite_frac > 0 && elite_frac <= 1)) throw ShapeError("elite_frac must be in (0, 1]");
  GeneratorState next = state;
  next.generation = state.generation + 1;

  std::vector<RankItem> items;
  std::map<std::string, const Candidate*> by_name;
  for (const auto& c : scored) {
    const bool usable = c.feasible && !c.failed && c.score && std::isfinite(*c.score);
    items.push_back({c.name, usable ? *c.score : -std::numeric_limits<double>::infinity(), usable});
    by_name[c.name] = &c;
  }
  const auto ranked = rank_scores(items);
  const auto k = static_cast<std::size_t>(std::ceil(elite_frac * static_cast<double>(scored.size()) - 1e-12));
  std::vector<const Candidate*> elites;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (ranked[i].feasible) elites.push_back(by_name[ranked[i].id]);
  }
  if (elites.empty()) return next;

  for (std::size_t d = 0; d < next.decisions.size(); ++d) {
    Eigen::VectorXd freq = Eigen::VectorXd::Zero(next.decisions[d].probs.size());
    int counted = 0;
    for (const Candidate* e : elites) {
      if (d < e->genome.size()) {
        freq[e->genome[d]] += 1.0;
        ++counted;
      }
    }
    if (counted == 0) continue;
    freq /= counted;
    Eigen::VectorXd p = (1.0 - state.alpha) * next.decisions[d].probs + state.alpha * freq;
    next.decisions[d].probs = apply_floor(std::move(p), state.floor);
  }
  return next;
}

SearchResult search(const SearchConfig& cfg, const DatasetSplit& data) {
  cfg.space.validate();
  if (cfg.population < 1 || cfg.generations < 0) throw ShapeError("population >= 1 and generations >= 0 required");
  SearchResult result;
  result.state = init_generator(cfg.space, cfg.master_seed, cfg.floor, cfg.alpha);

  // Identical architectures are trained once.
  std::map<std::string, Candidate> cache;
  auto evaluate = [&](Candidate c) {
    const RepairResult rep = repair(c.arch, cfg.objective, cfg.max_repair_rounds);
    c.arch = rep.arch;
    c.repair_rounds = rep.rounds;
    c.feasible = rep.feasible;
    c.report = analyze(c.arch);
    if (!c.feasible) return c;
    const std::string key = serialize_arch(c.arch);
    if (auto it = cache.find(key); it != cache.end()) {
      c.metrics = it->second.metrics;
      c.score = it->second.score;
      c.failed = it->second.failed;
      return c;
    }
    c = inquire(std::move(c), data, cfg.eval, cfg.objective);
    cache.emplace(key, c);
    return c;
  };
  auto better = [](const Candidate& a, const Candidate& b) {
    const auto ranked = rank_scores({{a.name, *a.score, true}, {b.name, *b.score, true}});
    return ranked.front().id == a.name;
  };
  auto usable = [](const Candidate& c) { return c.feasible && !c.failed && c.score && std::isfinite(*c.score); };

  Candidate proto;
  proto.id = -1;
  proto.name = "proto";
  proto.genome = prototype_genome(cfg.space);
  proto.arch = decode(cfg.space, proto.genome);
  result.prototype = evaluate(std::move(proto));
  result.evaluated.push_back(result.prototype);
  if (usable(result.prototype)) result.best = result.prototype;

  for (int g = 0; g < cfg.generations; ++g) {
    std::vector<Candidate> batch = generate(cfg.space, result.state, cfg.population);
    GenerationRecord rec;
    rec.generation = result.state.generation;
    for (auto& c : batch) {
      c = evaluate(std::move(c));
      if (c.feasible) ++rec.feasible_count;
      if (usable(c) && (!result.best || better(c, *result.best))) result.best = c;
      result.evaluated.push_back(c);
    }
    result.state = update(result.state, batch, cfg.elite_frac, cfg.objective);
    if (result.best) {
      rec.best_score = result.best->score;
      rec.best_name = result.best->name;
      result.state.history.push_back(*result.best->score);
    } else {
      result.state.history.push_back(-std::numeric_limits<double>::infinity());
    }
    result.history.push_back(rec);
  }
  return result;
}

nlohmann::json history_json(const SearchResult& result) {
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& r : result.history) {
    nlohmann::json j = {{"generation", r.generation}, {"feasible_count", r.feasible_count}};
    j["best_score"] = r.best_score ? nlohmann::json(*r.best_score) : nlohmann::json(nullptr);
    j["best"] = r.best_name;
    gens.push_back(j);
  }
  nlohmann::json out = {{"history", gens}};
  out["prototype_score"] = result.prototype.score && std::isfinite(*result.prototype.score)
                               ? nlohmann::json(*result.prototype.score)
                               : nlohmann::json(nullptr);
  out["prototype_feasible"] = result.prototype.feasible;
  if (result.best) {
    out["best"] = {{"name", result.best->name},
                   {"score", *result.best->score},
                   {"accuracy_pct", result.best->metrics->accuracy_pct},
                   {"params", result.best->report.params},
                   {"flops", result.best->report.flops}};
  } else {
    out["best"] = nullptr;
  }
  return out;
}

}  // namespace tdn
