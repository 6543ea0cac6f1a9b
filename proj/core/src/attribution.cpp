#include "rlens/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "internal_parallel.hpp"

namespace rlens {

namespace {

const char* const kShiftModeNames[] = {"decrease", "increase", "net"};

std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::string(buf);
}

}  // namespace

const char* shift_mode_name(ShiftMode mode) { return kShiftModeNames[static_cast<int>(mode)]; }

std::optional<ShiftMode> shift_mode_from_name(std::string_view name) {
  for (int i = 0; i < 3; ++i) {
    if (name == kShiftModeNames[i]) return static_cast<ShiftMode>(i);
  }
  return std::nullopt;
}

std::map<LinearModuleId, double> importance(const AnnotatedCorpus& corpus,
                                            const WeightStore& store, const SteeringSet& steering,
                                            const std::string& behavior, int threads) {
  const auto bit = steering.by_behavior.find(behavior);
  if (bit == steering.by_behavior.end()) {
    throw Error("no steering vectors for behavior '" + behavior + "'");
  }
  if (!steering.model_provenance.empty() && steering.model_provenance != store.provenance) {
    throw Error("steering/store provenance mismatch: steering built for '" +
                steering.model_provenance + "', store is '" + store.provenance + "'");
  }
  if (!steering.corpus_digest.empty() && steering.corpus_digest != corpus_digest(corpus)) {
    throw Error("steering/corpus mismatch for behavior '" + behavior + "'");
  }

  const auto sets = split_sets(corpus, behavior);
  if (sets.d_plus.empty()) throw Error("empty D+ for behavior '" + behavior + "'");

  const auto modules = all_linear_modules(store.config);
  for (const auto& id : modules) {
    if (bit->second.find(id) == bit->second.end()) {
      throw Error("steering vector missing for module " + tensor_name(id));
    }
  }

  // Per-sequence dot-product sums, computed in parallel, reduced in order.
  std::vector<std::vector<double>> per_seq(sets.d_plus.size());
  detail::parallel_for(sets.d_plus.size(), threads, [&](std::size_t s) {
    const auto& pos = sets.d_plus[s];
    const TokenSpan window = pos.window;
    // The loss span predicts the window's tokens; position 0 has no context.
    const TokenSpan loss_span{std::max<std::size_t>(window.begin, 1), window.end};
    const auto grads =
        activation_grads(store, pos.instance->tokens, loss_span, CaptureSet::all());
    auto& sums = per_seq[s];
    sums.assign(modules.size(), 0.0);
    for (std::size_t m = 0; m < modules.size(); ++m) {
      const Tensor& g = grads.at(modules[m]);
      const auto& u = bit->second.at(modules[m]).u_norm;
      double acc = 0.0;
      for (std::size_t t = window.begin; t < window.end; ++t) {
        double dot = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
          dot += u[i] * static_cast<double>(g.at(t, i));
        }
        acc += dot;
      }
      sums[m] = acc;
    }
  });

  std::map<LinearModuleId, double> result;
  for (std::size_t m = 0; m < modules.size(); ++m) {
    double total = 0.0;
    for (std::size_t s = 0; s < sets.d_plus.size(); ++s) total += per_seq[s][m];
    result[modules[m]] = std::abs(total / static_cast<double>(sets.d_plus.size()));
  }
  return result;
}

ImportanceMap importance_map(const AnnotatedCorpus& corpus, const WeightStore& store,
                             const SteeringSet& steering,
                             const std::vector<std::string>& behaviors, int threads) {
  ImportanceMap imap;
  imap.behaviors = behaviors;
  imap.n_layers = store.config.n_layers;
  imap.model_provenance = store.provenance;
  imap.corpus_hash = corpus_digest(corpus);
  for (const auto& b : behaviors) {
    const auto slice = importance(corpus, store, steering, b, threads);
    std::vector<double> row(static_cast<std::size_t>(imap.n_layers) * kModuleKindCount, 0.0);
    for (const auto& [id, v] : slice) row[imap.cell(id)] = v;
    imap.scores.push_back(std::move(row));
  }
  return imap;
}

RelativeImportanceMap relative_importance(const ImportanceMap& imap) {
  RelativeImportanceMap ri;
  ri.behaviors = imap.behaviors;
  ri.n_layers = imap.n_layers;
  for (std::size_t b = 0; b < imap.behaviors.size(); ++b) {
    double total = 0.0;
    for (double v : imap.scores[b]) total += v;
    if (!(total > 0.0)) {
      throw Error("relative_importance: all-zero importance for behavior '" +
                  imap.behaviors[b] + "'");
    }
    std::vector<double> row(imap.scores[b].size());
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = imap.scores[b][i] / total;
    ri.scores.push_back(std::move(row));
    ri.normalizer.push_back(total);
  }
  return ri;
}

ShiftMap shift(const RelativeImportanceMap& from, const RelativeImportanceMap& to,
               ShiftMode mode) {
  if (from.behaviors != to.behaviors || from.n_layers != to.n_layers) {
    throw Error("shift: index sets differ between the two maps");
  }
  ShiftMap out;
  out.mode = mode;
  out.behaviors = from.behaviors;
  out.n_layers = from.n_layers;
  for (std::size_t b = 0; b < from.behaviors.size(); ++b) {
    if (from.scores[b].size() != to.scores[b].size()) {
      throw Error("shift: index sets differ between the two maps");
    }
    std::vector<double> row(from.scores[b].size());
    for (std::size_t i = 0; i < row.size(); ++i) {
      const double delta = from.scores[b][i] - to.scores[b][i];
      switch (mode) {
        case ShiftMode::decrease: row[i] = delta > 0.0 ? delta : 0.0; break;
        case ShiftMode::increase: row[i] = delta < 0.0 ? -delta : 0.0; break;
        case ShiftMode::net: row[i] = delta; break;
      }
    }
    out.values.push_back(std::move(row));
  }
  return out;
}

std::vector<std::pair<LinearModuleId, double>> rank_modules(const ImportanceMap& imap,
                                                            const RankScope& scope) {
  std::vector<std::pair<LinearModuleId, double>> entries;
  for (int layer = 0; layer < imap.n_layers; ++layer) {
    for (ModuleKind kind : all_module_kinds()) {
      if (scope.kind == RankScope::Kind::within_layer && layer != scope.layer) continue;
      if (scope.kind == RankScope::Kind::within_module_kind && kind != scope.module_kind)
        continue;
      const LinearModuleId id{layer, kind};
      double total = 0.0;
      for (std::size_t b = 0; b < imap.behaviors.size(); ++b) total += imap.at(b, id);
      entries.emplace_back(id, total);
    }
  }
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return entries;
}

void write_map_csv(const std::filesystem::path& path, const std::vector<std::string>& behaviors,
                   int n_layers, const std::vector<std::vector<double>>& scores) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot write CSV: " + path.string());
  out << "behavior,layer,module,score\n";
  for (std::size_t b = 0; b < behaviors.size(); ++b) {
    for (int layer = 0; layer < n_layers; ++layer) {
      for (ModuleKind kind : all_module_kinds()) {
        const std::size_t cell = static_cast<std::size_t>(layer) * kModuleKindCount +
                                 static_cast<std::size_t>(kind);
        out << behaviors[b] << ',' << layer << ',' << module_kind_name(kind) << ','
            << format_score(scores[b][cell]) << "\n";
      }
    }
  }
  if (!out) throw Error("I/O error writing CSV: " + path.string());
}

LoadedMapCsv read_map_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open CSV: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error("empty CSV: " + path.string());
  if (line.ends_with("\r")) line.pop_back();
  if (line != "behavior,layer,module,score") {
    throw Error("unexpected CSV header in " + path.string());
  }

  LoadedMapCsv out;
  std::map<std::string, std::map<std::pair<int, int>, double>> grid;
  int max_layer = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.ends_with("\r")) line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string behavior, layer_s, module_s, score_s;
    if (!std::getline(ss, behavior, ',') || !std::getline(ss, layer_s, ',') ||
        !std::getline(ss, module_s, ',') || !std::getline(ss, score_s)) {
      throw Error("malformed CSV row at line " + std::to_string(line_no) + " in " +
                  path.string());
    }
    const auto kind = module_kind_from_name(module_s);
    if (!kind) throw Error("unknown module '" + module_s + "' at line " + std::to_string(line_no));
    int layer = 0;
    try {
      layer = std::stoi(layer_s);
    } catch (const std::exception&) {
      throw Error("bad layer at line " + std::to_string(line_no));
    }
    max_layer = std::max(max_layer, layer);
    grid[behavior][{layer, static_cast<int>(*kind)}] = std::stod(score_s);
  }
  if (grid.empty()) throw Error("CSV has no data rows: " + path.string());
  out.n_layers = max_layer + 1;
  for (const auto& [behavior, cells] : grid) {
    out.behaviors.push_back(behavior);
    std::vector<double> row(static_cast<std::size_t>(out.n_layers) * kModuleKindCount, 0.0);
    if (cells.size() != row.size()) {
      throw Error("CSV grid incomplete for behavior '" + behavior + "' in " + path.string());
    }
    for (const auto& [key, v] : cells) {
      row[static_cast<std::size_t>(key.first) * kModuleKindCount +
          static_cast<std::size_t>(key.second)] = v;
    }
    out.scores.push_back(std::move(row));
  }
  return out;
}

}  // namespace rlens
