#include "tdn/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "tdn/complexity.hpp"
#include "tdn/config.hpp"
#include "tdn/data.hpp"
#include "tdn/error.hpp"
#include "tdn/explain.hpp"
#include "tdn/genesis.hpp"
#include "tdn/objective.hpp"
#include "tdn/runtime.hpp"
#include "tdn/train.hpp"
#include "tdn/weights_io.hpp"

namespace fs = std::filesystem;

namespace tdn::cli {

namespace {

struct Analyzed {
  std::string name;
  ComplexityReport report;
  std::optional<ArchGraph> graph;
};

Analyzed analyze_input(const std::string& path) {
  Analyzed a;
  a.name = path;
  if (fs::path(path).extension() == ".json") {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ": " + e.what());
    }
    a.report = report_from_json(j);
  } else {
    a.graph = load_arch(path);
    a.report = analyze(*a.graph);
  }
  return a;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

DatasetSplit load_data(const std::string& source, const DataConfig& d, std::ostream& err) {
  if (source == "synthetic") {
    SynthConfig s;
    s.per_class = d.per_class;
    s.size = d.size;
    s.seed = d.seed;
    s.train_fraction = d.train_fraction;
    return synth(s);
  }
  if (fs::exists(fs::path(source) / "manifest.tsv")) return read_dataset(source);
  LoadReport report = load_neu(source, d.size, d.size);
  for (const auto& f : report.failures) err << "warning: skipped " << f << "\n";
  SplitOptions opts;
  opts.train_fraction = d.train_fraction;
  return split_neu(std::move(report.images), opts);
}

nlohmann::json confusion_json(const EvalResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < r.confusion.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < r.confusion.cols(); ++j) row.push_back(r.confusion(i, j));
    rows.push_back(row);
  }
  return rows;
}

ModelParams<float> weights_or_init(const std::string& path, const ArchGraph& graph, std::uint64_t seed) {
  if (path.empty()) return init_params<float>(graph, seed);
  return load_weights(path, graph);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tiny defect network toolkit: design search, complexity analysis, training, inference and audits"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);

  // analyze
  auto* analyze_cmd = app.add_subcommand("analyze", "Complexity report of .tdn or report .json files");
  std::vector<std::string> analyze_files;
  std::optional<double> accuracy;
  std::string analyze_json;
  analyze_cmd->add_option("files", analyze_files, "one file, or two to compare (first / second)")
      ->required()
      ->expected(1, 2);
  analyze_cmd->add_option("--acc", accuracy, "test accuracy in percent; prints the performance score");
  analyze_cmd->add_option("--json", analyze_json, "write the (first) report as JSON");

  // check
  auto* check_cmd = app.add_subcommand("check", "FLOP budget gate; exit 2 when outside the window");
  std::string check_file;
  std::optional<std::int64_t> budget;
  std::optional<double> tolerance;
  check_cmd->add_option("file", check_file)->required();
  check_cmd->add_option("--budget", budget, "FLOP budget");
  check_cmd->add_option("--tol", tolerance, "relative tolerance");

  // search
  auto* search_cmd = app.add_subcommand("search", "Generator / inquisitor architecture search");
  std::string search_out = ".";
  std::optional<std::uint64_t> search_seed;
  search_cmd->add_option("--out", search_out, "output directory");
  search_cmd->add_option("--seed", search_seed, "master seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train an architecture");
  std::string train_arch, train_data = "synthetic", train_out = ".";
  std::optional<int> train_epochs;
  std::optional<std::uint64_t> train_seed;
  train_cmd->add_option("arch", train_arch)->required();
  train_cmd->add_option("--data", train_data, "dataset directory or 'synthetic'");
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--epochs", train_epochs);
  train_cmd->add_option("--seed", train_seed);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy and confusion on the test split");
  std::string eval_arch, eval_weights, eval_data = "synthetic";
  eval_cmd->add_option("arch", eval_arch)->required();
  eval_cmd->add_option("weights", eval_weights)->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory or 'synthetic'");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Inference latency and throughput");
  std::string bench_arch, bench_weights, bench_out = "bench.json";
  int bench_batch = 1024, bench_iters = 10, bench_warmup = 2;
  bench_cmd->add_option("arch", bench_arch)->required();
  bench_cmd->add_option("weights", bench_weights, "TDNW file; random weights when omitted");
  bench_cmd->add_option("--batch", bench_batch)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--iters", bench_iters)->check(CLI::Range(3, 1 << 20));
  bench_cmd->add_option("--warmup", bench_warmup)->check(CLI::NonNegativeNumber);
  bench_cmd->add_option("--out", bench_out, "report path");

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "Occlusion attribution for one image");
  std::string ex_arch, ex_weights, ex_image, ex_mask, ex_out;
  std::optional<int> ex_target;
  int ex_patch = 16, ex_stride = 8, ex_dilate = 5;
  double ex_top = 0.1;
  std::optional<double> ex_baseline;
  explain_cmd->add_option("arch", ex_arch)->required();
  explain_cmd->add_option("weights", ex_weights)->required();
  explain_cmd->add_option("image", ex_image)->required();
  explain_cmd->add_option("--target", ex_target, "class index (default: predicted class)");
  explain_cmd->add_option("--patch", ex_patch)->check(CLI::PositiveNumber);
  explain_cmd->add_option("--stride", ex_stride)->check(CLI::PositiveNumber);
  explain_cmd->add_option("--baseline", ex_baseline, "constant fill value (default: dataset mean of the config data)");
  explain_cmd->add_option("--mask", ex_mask, "ground-truth mask image; reports mass_in_mask");
  explain_cmd->add_option("--top", ex_top, "top fraction for mass_in_mask");
  explain_cmd->add_option("--dilate", ex_dilate, "mask dilation radius in pixels");
  explain_cmd->add_option("--out", ex_out, "output prefix (default: image stem)");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic defect dataset");
  std::optional<int> synth_per_class, synth_size;
  std::optional<std::uint64_t> synth_seed;
  std::string synth_out = "synthetic";
  synth_cmd->add_option("--per-class", synth_per_class)->check(CLI::Range(2, 1 << 20));
  synth_cmd->add_option("--size", synth_size)->check(CLI::Range(8, 4096));
  synth_cmd->add_option("--seed", synth_seed);
  synth_cmd->add_option("--out", synth_out, "output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    AppConfig cfg = load_config(config_path);

    if (analyze_cmd->parsed()) {
      std::vector<Analyzed> items;
      for (const auto& f : analyze_files) items.push_back(analyze_input(f));
      for (const auto& a : items) {
        out << a.name << "\n";
        out << "  params                " << a.report.params << "\n";
        out << "  macs                  " << a.report.macs << "\n";
        out << "  flops                 " << a.report.flops << "\n";
        out << "  peak_activation_bytes " << a.report.peak_activation_bytes << "\n";
        out << "  within_budget         " << (indicator(a.report.flops, cfg.objective) ? "yes" : "no") << "\n";
        if (accuracy) {
          const Metrics m = make_metrics(*accuracy, a.report.params, a.report.flops);
          out << "  netscore              " << std::fixed << std::setprecision(2) << netscore(m, cfg.objective)
              << std::defaultfloat << "\n";
        }
      }
      if (items.size() == 2) {
        const RatioRecord r = compare_reports(items[0].report, items[1].report);
        out << std::fixed << std::setprecision(2);
        out << "params ratio " << r.params.value() << " (" << r.params_display << ")\n";
        out << "flops ratio  " << r.flops.value() << " (" << r.flops_display << ")\n";
        out << std::defaultfloat;
      }
      if (!analyze_json.empty()) write_json(analyze_json, to_json(items[0].report));
      return kExitOk;
    }

    if (check_cmd->parsed()) {
      ObjectiveParams o = cfg.objective;
      if (budget) o.budget_flops = *budget;
      if (tolerance) o.tolerance = *tolerance;
      if (o.budget_flops <= 0 || !(o.tolerance > 0 && o.tolerance < 1)) {
        throw ConfigError(0, "budget must be positive and tolerance in (0, 1)");
      }
      const Analyzed a = analyze_input(check_file);
      const bool ok = indicator(a.report.flops, o);
      out << "flops " << a.report.flops << " budget " << o.budget_flops << " deviation " << std::fixed
          << std::setprecision(2) << 100.0 * budget_deviation(a.report.flops, o) << "% tolerance "
          << 100.0 * o.tolerance << "% " << (ok ? "PASS" : "FAIL") << "\n"
          << std::defaultfloat;
      return ok ? kExitOk : kExitConstraint;
    }

    if (search_cmd->parsed()) {
      SearchConfig sc = cfg.search;
      if (search_seed) sc.master_seed = *search_seed;
      const DatasetSplit data = load_data(cfg.data.source, cfg.data, err);
      const SearchResult result = search(sc, data);
      fs::create_directories(search_out);
      write_json((fs::path(search_out) / "history.json").string(), history_json(result));
      for (const auto& rec : result.history) {
        out << "generation " << rec.generation << " feasible " << rec.feasible_count << " best "
            << (rec.best_score ? std::to_string(*rec.best_score) : std::string("none")) << "\n";
      }
      if (!result.best) {
        err << "no feasible architecture found\n";
        return kExitConstraint;
      }
      save_arch(result.best->arch, (fs::path(search_out) / "best.tdn").string());
      write_json((fs::path(search_out) / "best_report.json").string(), to_json(result.best->report));
      out << "best " << result.best->name << " score " << *result.best->score << " flops "
          << result.best->report.flops << "\n";
      return kExitOk;
    }

    if (train_cmd->parsed()) {
      const ArchGraph graph = load_arch(train_arch);
      TrainConfig tc = cfg.train;
      if (train_epochs) tc.epochs = *train_epochs;
      if (train_seed) tc.seed = *train_seed;
      DataConfig dc = cfg.data;
      dc.size = graph.input_shape.height;
      const DatasetSplit data = load_data(train_data, dc, err);
      const FitResult fr = fit(graph, data, tc);
      fs::create_directories(train_out);
      save_weights((fs::path(train_out) / "model.tdnw").string(), graph, fr.params);
      write_curves_csv((fs::path(train_out) / "curves.csv").string(), fr.history);
      out << "best test accuracy " << fr.best_accuracy << "% at epoch " << fr.best_epoch << "\n";
      if (fr.diverged) {
        err << "training diverged; kept the best checkpoint\n";
        return kExitNumeric;
      }
      return kExitOk;
    }

    if (eval_cmd->parsed()) {
      const ArchGraph graph = load_arch(eval_arch);
      const ModelParams<float> params = load_weights(eval_weights, graph);
      DataConfig dc = cfg.data;
      dc.size = graph.input_shape.height;
      const DatasetSplit data = load_data(eval_data, dc, err);
      if (data.test.empty()) throw IoError("test split is empty");
      const EvalResult r = evaluate(graph, params, data.test);
      nlohmann::json j = {{"accuracy_pct", r.accuracy_pct}, {"confusion", confusion_json(r)}};
      out << j.dump(2) << "\n";
      return kExitOk;
    }

    if (bench_cmd->parsed()) {
      const ArchGraph graph = load_arch(bench_arch);
      const ModelParams<float> params = weights_or_init(bench_weights, graph, cfg.train.seed);
      const ExecutionPlan plan = build_plan(graph, params, cfg.runtime);
      const BenchReport r = bench(plan, bench_batch, bench_warmup, bench_iters);
      nlohmann::json j = to_json(r);
      j["runtime"] = to_json(cfg.runtime);
      j["flops"] = analyze(graph).flops;
      write_json(bench_out, j);
      out << "median " << r.median_seconds << " s per batch of " << r.batch_size << ", " << r.per_image_seconds
          << " s per image, " << r.throughput << " images/s\n";
      return kExitOk;
    }

    if (explain_cmd->parsed()) {
      const ArchGraph graph = load_arch(ex_arch);
      const ModelParams<float> params = load_weights(ex_weights, graph);
      RuntimeConfig rc = cfg.runtime;
      const ExecutionPlan plan = build_plan(graph, params, rc);
      const Image image = resize_bilinear(read_image(ex_image), graph.input_shape.height, graph.input_shape.width);
      OcclusionConfig oc;
      oc.patch = ex_patch;
      oc.stride = ex_stride;
      if (ex_baseline) {
        oc.baseline = ConstantBaseline{*ex_baseline};
      } else {
        DataConfig dc = cfg.data;
        dc.size = graph.input_shape.height;
        oc.baseline = DatasetMeanBaseline{mean_std(load_data(dc.source, dc, err).train).mean};
      }
      int target = 0;
      if (ex_target) {
        target = *ex_target;
      } else {
        Tensor<float> one(1, graph.input_shape);
        Eigen::Map<RowMatrix<float>>(one.sample(0), image.rows(), image.cols()) = image;
        infer(plan, one).row(0).maxCoeff(&target);
      }
      const AttributionMap map = occlusion_map(plan, image, target, oc);
      const std::string prefix = ex_out.empty() ? fs::path(ex_image).stem().string() : ex_out;
      render_overlay(map, image, prefix + ".input.pgm", prefix + ".explain.pgm");
      nlohmann::json j = {{"target_class", map.target_class},
                          {"base_score", map.base_score},
                          {"grid", {map.grid_rows(), map.grid_cols()}}};
      if (!ex_mask.empty()) {
        const Image m = resize_bilinear(read_image(ex_mask), graph.input_shape.height, graph.input_shape.width);
        const Mask mask = dilate((m.array() > 0.5f).cast<std::uint8_t>().matrix(), ex_dilate);
        j["mass_in_mask"] = mass_in_mask(map, mask, ex_top);
      }
      write_json(prefix + ".explain.json", j);
      out << j.dump() << "\n";
      return kExitOk;
    }

    if (synth_cmd->parsed()) {
      SynthConfig s;
      s.per_class = synth_per_class.value_or(cfg.data.per_class);
      s.size = synth_size.value_or(cfg.data.size);
      s.seed = synth_seed.value_or(cfg.data.seed);
      s.train_fraction = cfg.data.train_fraction;
      const DatasetSplit split = synth(s);
      write_dataset(split, synth_out);
      out << "wrote " << split.train.size() << " train / " << split.test.size() << " test images to " << synth_out
          << "\n";
      return kExitOk;
    }
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace tdn::cli
