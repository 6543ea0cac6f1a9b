// reasonlens: per-module importance of reasoning behaviors in decoder-only
// checkpoints, checkpoint diffing, and selective quantize/prune/protect
// passes driven by those maps.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rlens/attribution.hpp"
#include "rlens/compress.hpp"
#include "rlens/corpus.hpp"
#include "rlens/eval.hpp"
#include "rlens/heatmap.hpp"
#include "rlens/model.hpp"
#include "rlens/steering.hpp"
#include "rlens/version.hpp"
#include "rlens/weights_io.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Tracks files created during a command so a failed run leaves nothing
// half-written behind.
class OutputTracker {
 public:
  void created(const fs::path& p) { paths_.push_back(p); }
  void discard_all() {
    for (const auto& p : paths_) {
      std::error_code ec;
      fs::remove_all(p, ec);
    }
  }

 private:
  std::vector<fs::path> paths_;
};

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

ordered_json metrics_json(const rlens::Metrics& m) {
  ordered_json j;
  j["accuracy"] = m.accuracy ? ordered_json(*m.accuracy) : ordered_json(nullptr);
  j["em"] = m.em ? ordered_json(*m.em) : ordered_json(nullptr);
  j["f1"] = m.f1 ? ordered_json(*m.f1) : ordered_json(nullptr);
  j["mean_span_ce"] = m.mean_span_ce;
  j["n"] = m.n;
  return j;
}

void write_text(const fs::path& path, const std::string& text, OutputTracker& tracker) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw rlens::Error("cannot write " + path.string());
  out << text;
  if (!out) throw rlens::Error("I/O error writing " + path.string());
  tracker.created(path);
}

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const ordered_json& flags, const ordered_json& inputs,
                        std::chrono::steady_clock::time_point start, OutputTracker& tracker) {
  ordered_json run;
  run["command"] = command;
  run["flags"] = flags;
  run["inputs"] = inputs;
  run["version"] = rlens::kVersion;
  run["duration_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
          .count();
  write_text(out_dir / "run.json", run.dump(2) + "\n", tracker);
}

std::vector<rlens::HeatmapPanel> panels_from(const std::vector<std::string>& behaviors,
                                             int n_layers,
                                             const std::vector<std::vector<double>>& scores) {
  std::vector<rlens::HeatmapPanel> panels;
  for (std::size_t b = 0; b < behaviors.size(); ++b) {
    panels.push_back({behaviors[b], n_layers, scores[b]});
  }
  return panels;
}

std::string sweep_axis_name(rlens::SweepAxis axis) {
  return axis == rlens::SweepAxis::sparsity ? "sparsity" : "bits";
}

std::string format_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::string(buf);
}

struct GlobalOpts {
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
};

std::string task_with_seed(const std::string& spec, const GlobalOpts& g) {
  if (!g.seed_given || spec.find("seed=") != std::string::npos) return spec;
  const char sep = spec.find(':') == std::string::npos ? ':' : ',';
  return spec + sep + "seed=" + std::to_string(g.seed);
}

int cmd_importance(const std::string& weights_dir, const std::string& corpus_file,
                   const std::string& behaviors_arg, const std::string& out_dir,
                   const GlobalOpts& g) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    fs::create_directories(out_dir);
    const auto store = rlens::load_weights(weights_dir);
    const auto corpus = rlens::load_corpus(corpus_file);

    std::vector<std::string> behaviors = split_commas(behaviors_arg);
    if (behaviors.empty()) {
      behaviors.assign(corpus.behaviors.begin(), corpus.behaviors.end());
    }
    if (behaviors.empty()) throw rlens::Error("corpus has no labeled behaviors");
    for (const auto& b : behaviors) {
      if (corpus.behaviors.find(b) == corpus.behaviors.end()) {
        throw rlens::Error("behavior not found: " + b);
      }
    }

    const auto steering = rlens::steering_all(corpus, store, behaviors, g.threads);
    rlens::save_steering(steering, store.config, fs::path(out_dir) / "steering");
    tracker.created(fs::path(out_dir) / "steering");

    const auto imap = rlens::importance_map(corpus, store, steering, behaviors, g.threads);
    const auto rmap = rlens::relative_importance(imap);

    rlens::write_map_csv(fs::path(out_dir) / "importance.csv", imap.behaviors, imap.n_layers,
                         imap.scores);
    tracker.created(fs::path(out_dir) / "importance.csv");
    rlens::write_map_csv(fs::path(out_dir) / "relative.csv", rmap.behaviors, rmap.n_layers,
                         rmap.scores);
    tracker.created(fs::path(out_dir) / "relative.csv");

    rlens::write_heatmap_svg(fs::path(out_dir) / "importance.svg",
                             panels_from(imap.behaviors, imap.n_layers, imap.scores));
    tracker.created(fs::path(out_dir) / "importance.svg");
    rlens::write_heatmap_svg(fs::path(out_dir) / "relative.svg",
                             panels_from(rmap.behaviors, rmap.n_layers, rmap.scores));
    tracker.created(fs::path(out_dir) / "relative.svg");

    ordered_json flags;
    flags["weights"] = weights_dir;
    flags["corpus"] = corpus_file;
    std::string blist;
    for (const auto& b : behaviors) blist += (blist.empty() ? "" : ",") + b;
    flags["behaviors"] = blist;
    flags["out"] = out_dir;
    flags["threads"] = g.threads;
    ordered_json inputs;
    inputs["weights_digest"] = rlens::container_digest(weights_dir);
    inputs["corpus_digest"] = rlens::corpus_digest(corpus);
    write_run_manifest(out_dir, "importance", flags, inputs, start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "importance: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

int cmd_shift(const std::string& from_file, const std::string& to_file, const std::string& mode_s,
              const std::string& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    const auto mode = rlens::shift_mode_from_name(mode_s);
    if (!mode) throw rlens::Error("unknown shift mode '" + mode_s + "'");
    fs::create_directories(out_dir);

    const auto from_csv = rlens::read_map_csv(from_file);
    const auto to_csv = rlens::read_map_csv(to_file);
    rlens::RelativeImportanceMap from{from_csv.behaviors, from_csv.n_layers, from_csv.scores, {}};
    rlens::RelativeImportanceMap to{to_csv.behaviors, to_csv.n_layers, to_csv.scores, {}};
    const auto smap = rlens::shift(from, to, *mode);

    const std::string stem = std::string("shift_") + rlens::shift_mode_name(*mode);
    rlens::write_map_csv(fs::path(out_dir) / (stem + ".csv"), smap.behaviors, smap.n_layers,
                         smap.values);
    tracker.created(fs::path(out_dir) / (stem + ".csv"));
    rlens::write_heatmap_svg(fs::path(out_dir) / (stem + ".svg"),
                             panels_from(smap.behaviors, smap.n_layers, smap.values));
    tracker.created(fs::path(out_dir) / (stem + ".svg"));

    ordered_json flags;
    flags["from-ri"] = from_file;
    flags["to-ri"] = to_file;
    flags["mode"] = mode_s;
    flags["out"] = out_dir;
    write_run_manifest(out_dir, "shift", flags, ordered_json::object(), start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "shift: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

void write_error_report(const rlens::WeightStore& original, const rlens::WeightStore& modified,
                        const fs::path& path, OutputTracker& tracker) {
  const auto stats = rlens::quant_error_stats(original, modified);
  ordered_json report;
  for (const auto& [name, s] : stats) {
    ordered_json e;
    e["max_abs_err"] = s.max_abs_err;
    e["mse"] = s.mse;
    e["changed_fraction"] = s.changed_fraction;
    report[name] = std::move(e);
  }
  write_text(path, report.dump(2) + "\n", tracker);
}

int cmd_quantize(const std::string& weights_dir, int bits, int group, const std::string& only_s,
                 const std::string& protect_s, const std::string& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    const auto store = rlens::load_weights(weights_dir);
    rlens::QuantConfig cfg;
    cfg.bits = bits;
    cfg.group_size = group;
    rlens::ModuleSelector selector{split_commas(only_s), split_commas(protect_s)};
    const auto quantized = rlens::quantize_model(store, cfg, selector);

    fs::create_directories(out_dir);
    rlens::save_weights(quantized, out_dir);
    tracker.created(fs::path(out_dir) / "manifest.json");
    tracker.created(fs::path(out_dir) / "weights.bin");
    write_error_report(store, quantized, fs::path(out_dir) / "quant_error.json", tracker);

    ordered_json flags;
    flags["weights"] = weights_dir;
    flags["bits"] = bits;
    flags["group"] = group;
    flags["only"] = only_s;
    flags["protect"] = protect_s;
    flags["out"] = out_dir;
    ordered_json inputs;
    inputs["weights_digest"] = rlens::container_digest(weights_dir);
    write_run_manifest(out_dir, "quantize", flags, inputs, start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "quantize: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

int cmd_prune(const std::string& weights_dir, double sparsity, const std::string& only_s,
              const std::string& protect_s, const std::string& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    const auto store = rlens::load_weights(weights_dir);
    rlens::PruneConfig cfg{sparsity};
    rlens::ModuleSelector selector{split_commas(only_s), split_commas(protect_s)};
    const auto pruned = rlens::magnitude_prune(store, cfg, selector);

    fs::create_directories(out_dir);
    rlens::save_weights(pruned, out_dir);
    tracker.created(fs::path(out_dir) / "manifest.json");
    tracker.created(fs::path(out_dir) / "weights.bin");
    write_error_report(store, pruned, fs::path(out_dir) / "quant_error.json", tracker);

    ordered_json flags;
    flags["weights"] = weights_dir;
    flags["sparsity"] = sparsity;
    flags["only"] = only_s;
    flags["protect"] = protect_s;
    flags["out"] = out_dir;
    ordered_json inputs;
    inputs["weights_digest"] = rlens::container_digest(weights_dir);
    write_run_manifest(out_dir, "prune", flags, inputs, start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "prune: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

int cmd_protect(const std::string& weights_dir, const std::string& original_dir,
                const std::string& protect_s, const std::string& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    const auto quantized = rlens::load_weights(weights_dir);
    const auto original = rlens::load_weights(original_dir);
    const auto patterns = split_commas(protect_s);
    if (patterns.empty()) throw rlens::Error("protect: no --protect patterns given");
    const auto restored = rlens::protect_restore(quantized, original, patterns);

    fs::create_directories(out_dir);
    rlens::save_weights(restored, out_dir);
    tracker.created(fs::path(out_dir) / "manifest.json");
    tracker.created(fs::path(out_dir) / "weights.bin");
    write_error_report(original, restored, fs::path(out_dir) / "quant_error.json", tracker);

    ordered_json flags;
    flags["weights"] = weights_dir;
    flags["original"] = original_dir;
    flags["protect"] = protect_s;
    flags["out"] = out_dir;
    ordered_json inputs;
    inputs["weights_digest"] = rlens::container_digest(weights_dir);
    inputs["original_digest"] = rlens::container_digest(original_dir);
    write_run_manifest(out_dir, "protect", flags, inputs, start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "protect: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

int cmd_eval(const std::string& weights_dir, const std::string& task_spec,
             const std::string& out_dir, const GlobalOpts& g) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    const auto store = rlens::load_weights(weights_dir);
    const auto task = rlens::make_task(task_with_seed(task_spec, g), store.config);
    const auto metrics = rlens::evaluate(store, task);

    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "metrics.json", metrics_json(metrics).dump(2) + "\n", tracker);

    ordered_json flags;
    flags["weights"] = weights_dir;
    flags["task"] = task_spec;
    flags["out"] = out_dir;
    ordered_json inputs;
    inputs["weights_digest"] = rlens::container_digest(weights_dir);
    write_run_manifest(out_dir, "eval", flags, inputs, start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "eval: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

int cmd_sweep(const std::string& weights_dir, const std::string& task_spec,
              const std::string& axis_s, const std::string& levels_s, const std::string& out_dir,
              const GlobalOpts& g) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    rlens::SweepAxis axis;
    if (axis_s == "sparsity") {
      axis = rlens::SweepAxis::sparsity;
    } else if (axis_s == "bits") {
      axis = rlens::SweepAxis::bits;
    } else {
      throw rlens::Error("unknown sweep axis '" + axis_s + "' (sparsity|bits)");
    }
    std::vector<double> levels;
    for (const auto& part : split_commas(levels_s)) levels.push_back(std::stod(part));

    const auto store = rlens::load_weights(weights_dir);
    const auto task = rlens::make_task(task_with_seed(task_spec, g), store.config);
    const auto result = rlens::sweep(store, axis, levels, task);

    fs::create_directories(out_dir);
    std::string csv = "level,score,em,f1,mean_span_ce\n";
    for (const auto& row : result.rows) {
      csv += format_g(row.level) + "," + format_g(row.metrics.primary_score()) + ",";
      csv += (row.metrics.em ? format_g(*row.metrics.em) : "") + std::string(",");
      csv += (row.metrics.f1 ? format_g(*row.metrics.f1) : "") + std::string(",");
      csv += format_g(row.metrics.mean_span_ce) + "\n";
    }
    write_text(fs::path(out_dir) / "sweep.csv", csv, tracker);

    ordered_json j;
    j["axis"] = sweep_axis_name(axis);
    auto jl = ordered_json::array();
    auto jm = ordered_json::array();
    for (const auto& row : result.rows) {
      jl.push_back(row.level);
      jm.push_back(metrics_json(row.metrics));
    }
    j["levels"] = std::move(jl);
    j["metrics"] = std::move(jm);
    j["collapse_level"] =
        result.collapse_level ? ordered_json(*result.collapse_level) : ordered_json(nullptr);
    write_text(fs::path(out_dir) / "sweep.json", j.dump(2) + "\n", tracker);

    ordered_json flags;
    flags["weights"] = weights_dir;
    flags["task"] = task_spec;
    flags["axis"] = axis_s;
    flags["levels"] = levels_s;
    flags["out"] = out_dir;
    ordered_json inputs;
    inputs["weights_digest"] = rlens::container_digest(weights_dir);
    write_run_manifest(out_dir, "sweep", flags, inputs, start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "sweep: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

int cmd_lenstats(const std::string& weights_dir, const std::string& task_spec, double p,
                 const std::string& out_dir, const GlobalOpts& g) {
  const auto start = std::chrono::steady_clock::now();
  OutputTracker tracker;
  try {
    const auto store = rlens::load_weights(weights_dir);
    const auto task = rlens::make_task(task_with_seed(task_spec, g), store.config);
    const auto records = rlens::evaluate_records(store, task);
    const auto stats = rlens::length_percentile_stats(records, p);

    fs::create_directories(out_dir);
    ordered_json j;
    j["p"] = stats.p;
    j["short_metrics"] = metrics_json(stats.short_metrics);
    j["long_metrics"] = metrics_json(stats.long_metrics);
    j["length_ratio"] = stats.length_ratio;
    write_text(fs::path(out_dir) / "lenstats.json", j.dump(2) + "\n", tracker);

    ordered_json flags;
    flags["weights"] = weights_dir;
    flags["task"] = task_spec;
    flags["p"] = p;
    flags["out"] = out_dir;
    ordered_json inputs;
    inputs["weights_digest"] = rlens::container_digest(weights_dir);
    write_run_manifest(out_dir, "lenstats", flags, inputs, start, tracker);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "lenstats: " << e.what() << "\n";
    tracker.discard_all();
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reasonlens: module-level importance maps of reasoning behaviors, "
               "checkpoint diffs, and selective compression"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--seed", g.seed, "Default seed for task generators")
      ->each([&g](const std::string&) { g.seed_given = true; });
  app.add_option("--threads", g.threads, "Worker threads for per-instance passes")
      ->check(CLI::PositiveNumber);
  app.set_version_flag("--version", std::string("reasonlens ") + rlens::kVersion);

  std::string weights, corpus, behaviors, out, from_ri, to_ri, mode = "decrease";
  std::string only, protect, original, task, axis = "sparsity", levels;
  int bits = 3;
  int group = 64;
  double sparsity = 0.5;
  double p = 0.3;

  auto* imp = app.add_subcommand("importance", "Steering + attribution pipeline -> CSVs, heatmaps");
  imp->add_option("--weights", weights, "Weight container directory")->required();
  imp->add_option("--corpus", corpus, "Annotated corpus (JSON-Lines)")->required();
  imp->add_option("--behaviors", behaviors, "Comma-separated behavior tags (default: all)");
  imp->add_option("--out", out, "Output directory")->required();

  auto* shf = app.add_subcommand("shift", "Diff two relative-importance CSVs");
  shf->add_option("--from-ri", from_ri, "relative.csv of the more capable model")->required();
  shf->add_option("--to-ri", to_ri, "relative.csv of the compressed variant")->required();
  shf->add_option("--mode", mode, "decrease|increase|net")->required();
  shf->add_option("--out", out, "Output directory")->required();

  auto* qnt = app.add_subcommand("quantize", "Round-to-nearest pseudo-quantization");
  qnt->add_option("--weights", weights, "Weight container directory")->required();
  qnt->add_option("--bits", bits, "Bit width in [2, 8]")->required();
  qnt->add_option("--group", group, "Group size (0 = whole row)");
  qnt->add_option("--only", only, "Comma-separated globs to quantize");
  qnt->add_option("--protect", protect, "Comma-separated globs to skip");
  qnt->add_option("--out", out, "Output weight directory")->required();

  auto* prn = app.add_subcommand("prune", "Magnitude pruning");
  prn->add_option("--weights", weights, "Weight container directory")->required();
  prn->add_option("--sparsity", sparsity, "Fraction of entries to zero, in [0, 1)")->required();
  prn->add_option("--only", only, "Comma-separated globs to prune");
  prn->add_option("--protect", protect, "Comma-separated globs to skip");
  prn->add_option("--out", out, "Output weight directory")->required();

  auto* prt = app.add_subcommand("protect", "Restore selected tensors from the original");
  prt->add_option("--weights", weights, "Compressed weight container")->required();
  prt->add_option("--original", original, "Original weight container")->required();
  prt->add_option("--protect", protect, "Comma-separated globs to restore")->required();
  prt->add_option("--out", out, "Output weight directory")->required();

  auto* evl = app.add_subcommand("eval", "Score a checkpoint on a synthetic task");
  evl->add_option("--weights", weights, "Weight container directory")->required();
  evl->add_option("--task", task, "Task spec, e.g. succ:n=48,len=6,vocab=16,seed=1")->required();
  evl->add_option("--out", out, "Output directory")->required();

  auto* swp = app.add_subcommand("sweep", "Compression sweep with collapse detection");
  swp->add_option("--weights", weights, "Weight container directory")->required();
  swp->add_option("--task", task, "Task spec")->required();
  swp->add_option("--axis", axis, "sparsity|bits")->required();
  swp->add_option("--levels", levels, "Comma-separated ascending levels")->required();
  swp->add_option("--out", out, "Output directory")->required();

  auto* len = app.add_subcommand("lenstats", "Shortest/longest length-percentile statistics");
  len->add_option("--weights", weights, "Weight container directory")->required();
  len->add_option("--task", task, "Task spec")->required();
  len->add_option("--p", p, "Tail fraction in (0, 0.5]")->required();
  len->add_option("--out", out, "Output directory")->required();

  // Missing --task should list the available generators.
  for (auto* cmd : {evl, swp, len}) {
    cmd->get_option("--task")->description(
        "Task spec (generators: succ, copy, qa), e.g. succ:n=48,len=6,vocab=16,seed=1");
  }

  CLI11_PARSE(app, argc, argv);

  if (imp->parsed()) return cmd_importance(weights, corpus, behaviors, out, g);
  if (shf->parsed()) return cmd_shift(from_ri, to_ri, mode, out);
  if (qnt->parsed()) return cmd_quantize(weights, bits, group, only, protect, out);
  if (prn->parsed()) return cmd_prune(weights, sparsity, only, protect, out);
  if (prt->parsed()) return cmd_protect(weights, original, protect, out);
  if (evl->parsed()) return cmd_eval(weights, task, out, g);
  if (swp->parsed()) return cmd_sweep(weights, task, axis, levels, out, g);
  if (len->parsed()) return cmd_lenstats(weights, task, p, out, g);
  return 2;
}
