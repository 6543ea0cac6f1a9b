#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rlens/corpus.hpp"
#include "rlens/model.hpp"
#include "rlens/steering.hpp"

namespace rlens {

/// behavior x layer x module score grid. Cell index = layer * 7 + kind.
struct ImportanceMap {
  std::vector<std::string> behaviors;
  int n_layers = 0;
  std::vector<std::vector<double>> scores;  // [behavior][layer*7 + kind]
  std::string model_provenance;
  std::string corpus_hash;

  std::size_t cell(const LinearModuleId& id) const {
    return static_cast<std::size_t>(id.layer) * kModuleKindCount +
           static_cast<std::size_t>(id.kind);
  }
  double at(std::size_t behavior_idx, const LinearModuleId& id) const {
    return scores[behavior_idx][cell(id)];
  }
};

struct RelativeImportanceMap {
  std::vector<std::string> behaviors;
  int n_layers = 0;
  std::vector<std::vector<double>> scores;      // rows sum to 1 per behavior
  std::vector<double> normalizer;               // per-behavior grand total of I
};

enum class ShiftMode { decrease, increase, net };
const char* shift_mode_name(ShiftMode mode);
std::optional<ShiftMode> shift_mode_from_name(std::string_view name);

/// Per-cell change of relative importance between two checkpoints. `from` is
/// the more capable model, `to` its compressed variant; decrease/increase
/// are the positive parts of (from - to) and (to - from).
struct ShiftMap {
  ShiftMode mode = ShiftMode::decrease;
  std::vector<std::string> behaviors;
  int n_layers = 0;
  std::vector<std::vector<double>> values;
  std::string from_label;
  std::string to_label;
};

/// Importance of every module for one behavior:
///   I = | mean over labeled windows of sum over window tokens of
///         u_norm . dL/d(activation) |
/// with L the span loss over that window.
std::map<LinearModuleId, double> importance(const AnnotatedCorpus& corpus,
                                            const WeightStore& store, const SteeringSet& steering,
                                            const std::string& behavior, int threads = 1);

ImportanceMap importance_map(const AnnotatedCorpus& corpus, const WeightStore& store,
                             const SteeringSet& steering,
                             const std::vector<std::string>& behaviors, int threads = 1);

RelativeImportanceMap relative_importance(const ImportanceMap& imap);

ShiftMap shift(const RelativeImportanceMap& from, const RelativeImportanceMap& to,
               ShiftMode mode);

/// Ranking scope: whole grid, one layer's seven modules, or one projection
/// kind across layers.
struct RankScope {
  enum class Kind { global, within_layer, within_module_kind } kind = Kind::global;
  int layer = -1;
  ModuleKind module_kind = ModuleKind::q_proj;

  static RankScope global() { return {}; }
  static RankScope within_layer(int layer) {
    return {Kind::within_layer, layer, ModuleKind::q_proj};
  }
  static RankScope within_module_kind(ModuleKind kind) {
    return {Kind::within_module_kind, -1, kind};
  }
};

/// Modules sorted by summed-over-behaviors importance, descending; ties break
/// on (layer asc, module enum order).
std::vector<std::pair<LinearModuleId, double>> rank_modules(const ImportanceMap& imap,
                                                            const RankScope& scope);

// CSV: header "behavior,layer,module,score", layers 0-based, 9 significant
// digits, rows in (behavior, layer, module) order.
void write_map_csv(const std::filesystem::path& path,
                   const std::vector<std::string>& behaviors, int n_layers,
                   const std::vector<std::vector<double>>& scores);
struct LoadedMapCsv {
  std::vector<std::string> behaviors;
  int n_layers = 0;
  std::vector<std::vector<double>> scores;
};
LoadedMapCsv read_map_csv(const std::filesystem::path& path);

}  // namespace rlens
