#pragma once

#include <map>
#include <string>
#include <vector>

#include "rlens/model.hpp"

namespace rlens {

/// Symmetric absmax round-to-nearest pseudo-quantization config. group_size
/// divides rows into contiguous groups; a shorter final group is allowed.
struct QuantConfig {
  int bits = 3;                 // in [2, 8]
  int group_size = 64;          // kWholeRow = one group per row
  static constexpr int kWholeRow = 0;
  void validate() const;
};

/// Glob selectors over canonical tensor names ('*' matches any run of
/// characters). `only` empty means every linear module; `protect` wins.
struct ModuleSelector {
  std::vector<std::string> only;
  std::vector<std::string> protect;
};

struct PruneConfig {
  double sparsity = 0.0;  // in [0, 1)
  void validate() const;
};

bool glob_match(std::string_view pattern, std::string_view name);

/// Round-half-away-from-zero codes on a per-group absmax lattice, returned
/// dequantized at full precision. An all-zero group stays zero.
Tensor rtn_quantize_tensor(const Tensor& tensor, const QuantConfig& config);

/// Applies rtn_quantize_tensor to the selected linear modules. Embeddings,
/// head and norms are never touched; unselected tensors are byte-identical.
WeightStore quantize_model(const WeightStore& store, const QuantConfig& config,
                           const ModuleSelector& selector);

/// Copies every tensor matching one of `patterns` byte-exactly from
/// `original` into a copy of `quantized`.
WeightStore protect_restore(const WeightStore& quantized, const WeightStore& original,
                            const std::vector<std::string>& patterns);

/// Zeroes the floor(sparsity * n) smallest-magnitude entries per selected
/// tensor; ties break on flat index ascending.
WeightStore magnitude_prune(const WeightStore& store, const PruneConfig& config,
                            const ModuleSelector& selector);

struct TensorErrorStats {
  double max_abs_err = 0.0;
  double mse = 0.0;
  double changed_fraction = 0.0;
};
std::map<std::string, TensorErrorStats> quant_error_stats(const WeightStore& original,
                                                          const WeightStore& modified);

/// Linear-module tensors selected by (only minus protect). Throws on
/// unmatched patterns and on `only` patterns that resolve to no linear
/// module.
std::vector<std::string> resolve_selector(const WeightStore& store,
                                          const ModuleSelector& selector);

}  // namespace rlens
