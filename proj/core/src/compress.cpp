#include "rlens/compress.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rlens {

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) throw Error("QuantConfig: bits must be in [2, 8]");
  if (group_size < 0) throw Error("QuantConfig: group_size must be positive or kWholeRow");
}

void PruneConfig::validate() const {
  if (!(sparsity >= 0.0) || sparsity >= 1.0) {
    throw Error("PruneConfig: sparsity must be in [0, 1)");
  }
}

bool glob_match(std::string_view pattern, std::string_view name) {
  // Iterative '*' matcher with backtracking to the last star.
  std::size_t p = 0, n = 0;
  std::size_t star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

namespace {

bool matches_any(const std::vector<std::string>& patterns, const std::string& name) {
  return std::any_of(patterns.begin(), patterns.end(),
                     [&name](const std::string& p) { return glob_match(p, name); });
}

void check_patterns_resolve(const WeightStore& store, const std::vector<std::string>& patterns,
                            bool linear_only, const char* what) {
  for (const auto& pattern : patterns) {
    bool any = false;
    bool any_linear = false;
    for (const auto& [name, _] : store.tensors) {
      if (!glob_match(pattern, name)) continue;
      any = true;
      if (linear_module_from_tensor_name(name)) any_linear = true;
    }
    if (!any) {
      throw Error(std::string(what) + " pattern matches no tensor: '" + pattern + "'");
    }
    if (linear_only && !any_linear) {
      throw Error(std::string(what) + " pattern targets no linear module: '" + pattern + "'");
    }
  }
}

}  // namespace

std::vector<std::string> resolve_selector(const WeightStore& store,
                                          const ModuleSelector& selector) {
  check_patterns_resolve(store, selector.only, /*linear_only=*/true, "only");
  check_patterns_resolve(store, selector.protect, /*linear_only=*/false, "protect");

  std::vector<std::string> selected;
  for (const auto& id : all_linear_modules(store.config)) {
    const std::string name = tensor_name(id);
    const bool in_only = selector.only.empty() || matches_any(selector.only, name);
    const bool protected_ = matches_any(selector.protect, name);
    if (in_only && !protected_) selected.push_back(name);
  }
  return selected;
}

Tensor rtn_quantize_tensor(const Tensor& tensor, const QuantConfig& config) {
  config.validate();
  if (tensor.rank() != 2) throw Error("rtn_quantize_tensor: expected a 2-D tensor");
  for (float v : tensor.data) {
    if (!std::isfinite(v)) throw Error("rtn_quantize_tensor: non-finite input");
  }

  const std::size_t rows = tensor.rows();
  const std::size_t cols = tensor.cols();
  const std::size_t group =
      config.group_size == QuantConfig::kWholeRow ? cols : static_cast<std::size_t>(config.group_size);
  const double max_code = static_cast<double>((1 << (config.bits - 1)) - 1);
  const double min_code = -static_cast<double>(1 << (config.bits - 1));

  Tensor out = tensor;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g0 = 0; g0 < cols; g0 += group) {
      const std::size_t g1 = std::min(cols, g0 + group);
      double absmax = 0.0;
      for (std::size_t c = g0; c < g1; ++c) {
        absmax = std::max(absmax, std::abs(static_cast<double>(tensor.at(r, c))));
      }
      if (absmax == 0.0) {
        for (std::size_t c = g0; c < g1; ++c) out.at(r, c) = 0.0f;
        continue;
      }
      // Scale kept in double so requantizing a quantized group is an exact
      // fixed point.
      const double scale = absmax / max_code;
      for (std::size_t c = g0; c < g1; ++c) {
        double code = std::round(static_cast<double>(tensor.at(r, c)) / scale);
        code = std::clamp(code, min_code, max_code);
        out.at(r, c) = static_cast<float>(code * scale);
      }
    }
  }
  return out;
}

WeightStore quantize_model(const WeightStore& store, const QuantConfig& config,
                           const ModuleSelector& selector) {
  config.validate();
  const auto selected = resolve_selector(store, selector);
  WeightStore out = store;
  for (const auto& name : selected) {
    out.at(name) = rtn_quantize_tensor(store.at(name), config);
  }
  std::string note = "; rtn bits=" + std::to_string(config.bits) +
                     " group=" + std::to_string(config.group_size);
  if (!selector.only.empty()) {
    note += " only=";
    for (std::size_t i = 0; i < selector.only.size(); ++i) {
      note += (i ? "," : "") + selector.only[i];
    }
  }
  if (!selector.protect.empty()) {
    note += " protect=";
    for (std::size_t i = 0; i < selector.protect.size(); ++i) {
      note += (i ? "," : "") + selector.protect[i];
    }
  }
  out.provenance = store.provenance + note;
  return out;
}

WeightStore protect_restore(const WeightStore& quantized, const WeightStore& original,
                            const std::vector<std::string>& patterns) {
  if (quantized.config != original.config) {
    throw Error("protect_restore: stores have different configs");
  }
  for (const auto& [name, tensor] : quantized.tensors) {
    const auto it = original.tensors.find(name);
    if (it == original.tensors.end() || it->second.shape != tensor.shape) {
      throw Error("protect_restore: layout mismatch on tensor " + name);
    }
  }
  check_patterns_resolve(quantized, patterns, /*linear_only=*/false, "protect");

  WeightStore out = quantized;
  std::vector<std::string> touched;
  for (const auto& [name, _] : out.tensors) {
    if (matches_any(patterns, name)) {
      out.at(name) = original.at(name);
      touched.push_back(name);
    }
  }
  out.provenance = quantized.provenance + "; protected " + std::to_string(touched.size()) +
                   " tensors from '" + original.provenance + "'";
  return out;
}

WeightStore magnitude_prune(const WeightStore& store, const PruneConfig& config,
                            const ModuleSelector& selector) {
  config.validate();
  const auto selected = resolve_selector(store, selector);
  WeightStore out = store;
  for (const auto& name : selected) {
    Tensor& t = out.at(name);
    const std::size_t n = t.data.size();
    const std::size_t k =
        static_cast<std::size_t>(std::floor(config.sparsity * static_cast<double>(n)));
    if (k == 0) continue;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1),
                     order.end(), [&t](std::size_t a, std::size_t b) {
                       const float ma = std::abs(t.data[a]);
                       const float mb = std::abs(t.data[b]);
                       if (ma != mb) return ma < mb;
                       return a < b;
                     });
    for (std::size_t i = 0; i < k; ++i) t.data[order[i]] = 0.0f;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "; pruned sparsity=%g", config.sparsity);
  out.provenance = store.provenance + buf;
  return out;
}

std::map<std::string, TensorErrorStats> quant_error_stats(const WeightStore& original,
                                                          const WeightStore& modified) {
  if (original.config != modified.config) {
    throw Error("quant_error_stats: stores have different configs");
  }
  std::map<std::string, TensorErrorStats> stats;
  for (const auto& [name, orig] : original.tensors) {
    const auto it = modified.tensors.find(name);
    if (it == modified.tensors.end() || it->second.shape != orig.shape) {
      throw Error("quant_error_stats: layout mismatch on tensor " + name);
    }
    const Tensor& mod = it->second;
    TensorErrorStats s;
    double sq_sum = 0.0;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < orig.data.size(); ++i) {
      const double err = static_cast<double>(orig.data[i]) - static_cast<double>(mod.data[i]);
      s.max_abs_err = std::max(s.max_abs_err, std::abs(err));
      sq_sum += err * err;
      if (orig.data[i] != mod.data[i]) ++changed;
    }
    const double n = static_cast<double>(orig.data.size());
    s.mse = n > 0 ? sq_sum / n : 0.0;
    s.changed_fraction = n > 0 ? static_cast<double>(changed) / n : 0.0;
    stats.emplace(name, s);
  }
  return stats;
}

}  // namespace rlens
