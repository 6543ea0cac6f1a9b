#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rlens/corpus.hpp"
#include "rlens/model.hpp"

namespace rlens {

struct MeanActivation {
  LinearModuleId module;
  std::vector<double> vector;  // module out-dim
  std::size_t token_count = 0;
};

/// Difference-of-means direction for one (behavior, module):
///   u_raw  = mean over labeled windows of per-window means
///          - mean over instances of per-instance whole-sequence means
///   u_norm = u_raw rescaled to the norm of the all-token mean activation.
struct SteeringVector {
  std::string behavior;
  LinearModuleId module;
  std::vector<double> u_raw;
  std::vector<double> u_norm;
  double ref_norm = 0.0;   // ||mean activation over all D- tokens||
  bool zero_raw = false;   // u_raw was exactly zero; u_norm left at zero
};

/// All steering vectors for a (model, corpus) pair.
struct SteeringSet {
  std::map<std::string, std::map<LinearModuleId, SteeringVector>> by_behavior;
  std::string model_provenance;
  std::string corpus_digest;
};

/// Arithmetic mean of activation rows over `window` tokens, 64-bit
/// accumulation.
MeanActivation mean_over_window(const ActivationTrace& trace, const LinearModuleId& module,
                                TokenSpan window);

SteeringVector steering_vector(const AnnotatedCorpus& corpus, const WeightStore& store,
                               const std::string& behavior, const LinearModuleId& module);

/// Batch driver: one forward pass per instance with capture = ALL; agrees
/// bitwise with per-module steering_vector calls. `threads` parallelizes the
/// per-instance passes; reductions stay in instance order.
SteeringSet steering_all(const AnnotatedCorpus& corpus, const WeightStore& store,
                         const std::vector<std::string>& behaviors, int threads = 1);

/// Sidecar container: tensors keyed steer.{behavior}.layers.{l}.{module}
/// (the normalized direction) and ...{module}.ref_norm scalars.
void save_steering(const SteeringSet& set, const ModelConfig& config,
                   const std::filesystem::path& dir);
SteeringSet load_steering(const std::filesystem::path& dir, const ModelConfig& config);

}  // namespace rlens
