#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlens {

/// Toolkit-level error. Messages name the offending tensor / record / flag.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Model layout
// ---------------------------------------------------------------------------

/// The seven linear maps of a decoder layer, in canonical order.
enum class ModuleKind : int {
  q_proj = 0,
  k_proj,
  v_proj,
  o_proj,
  gate_proj,
  up_proj,
  down_proj,
};
inline constexpr int kModuleKindCount = 7;

const char* module_kind_name(ModuleKind kind);
std::optional<ModuleKind> module_kind_from_name(std::string_view name);
std::vector<ModuleKind> all_module_kinds();

struct LinearModuleId {
  int layer = 0;
  ModuleKind kind = ModuleKind::q_proj;

  // Canonical ordering: layer ascending, then enum order.
  auto operator<=>(const LinearModuleId&) const = default;
};

/// "layers.{layer}.attn.q_proj", "layers.{layer}.mlp.up_proj", ...
std::string tensor_name(const LinearModuleId& id);
std::optional<LinearModuleId> linear_module_from_tensor_name(std::string_view name);

struct ModelConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int d_ff = 0;
  int vocab_size = 0;
  int max_seq = 0;
  double rope_theta = 10000.0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws Error on violated invariants
  bool operator==(const ModelConfig&) const = default;
};

/// Dense row-major f32 tensor, 1-D or 2-D.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor zeros1d(std::size_t n);

  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  std::size_t numel() const { return data.size(); }
  float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool operator==(const Tensor&) const = default;
};

/// Named tensors of one checkpoint. Immutable by convention after load;
/// all toolkit passes produce new stores instead of mutating in place.
struct WeightStore {
  ModelConfig config;
  std::string provenance;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;  // throws, names the tensor
  Tensor& at(const std::string& name);
};

/// Tensor names in canonical layout order (embed, head, final norm, then per
/// layer: q/k/v/o, gate/up/down, and the two norms).
std::vector<std::string> canonical_tensor_names(const ModelConfig& config);
std::vector<LinearModuleId> all_linear_modules(const ModelConfig& config);
int module_out_dim(const ModelConfig& config, ModuleKind kind);
int module_in_dim(const ModelConfig& config, ModuleKind kind);

/// Expected shape of a canonical tensor name, given the config.
std::vector<std::size_t> expected_shape(const ModelConfig& config, const std::string& name);

/// Checks the full layout contract: exact name set, shapes, finite values.
void validate_store(const WeightStore& store);

/// All-zero weights for the given config.
WeightStore zero_store(const ModelConfig& config, std::string provenance = "zero");

/// Seeded random initialization (normal weights, unit norms). Deterministic
/// across runs on one platform: the sampler is implemented in-tree.
WeightStore initialized_store(const ModelConfig& config, std::uint64_t seed,
                              std::string provenance = "");

// ---------------------------------------------------------------------------
// Running the model
// ---------------------------------------------------------------------------

/// Half-open token-index range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const TokenSpan&) const = default;
};

/// Which linear-module outputs to record during a pass.
class CaptureSet {
 public:
  static CaptureSet all();
  static CaptureSet none();
  static CaptureSet of(std::vector<LinearModuleId> ids);
  bool contains(const LinearModuleId& id) const;
  bool empty() const { return !all_ && ids_.empty(); }
  bool is_all() const { return all_; }

 private:
  bool all_ = false;
  std::vector<LinearModuleId> ids_;  // sorted
};

/// Raw linear-map outputs: one seq x out_dim matrix per captured module.
using ActivationTrace = std::map<LinearModuleId, Tensor>;
/// dL/d(activation), shape-matched to the ActivationTrace of the same run.
using GradientTrace = std::map<LinearModuleId, Tensor>;

struct ForwardResult {
  Tensor logits;  // seq x vocab
  ActivationTrace trace;
};

/// Pre-norm decoder pass (RMSNorm -> RoPE attention -> RMSNorm -> gated MLP,
/// residual around each block, final RMSNorm, tied-style head matrix).
/// Activations are captured at each linear map's raw output, before RoPE,
/// SiLU, or any elementwise product.
ForwardResult forward(const WeightStore& store, std::span<const int> tokens,
                      const CaptureSet& capture);

/// Mean next-token cross-entropy (natural log) over target positions in
/// `span`: each target token is predicted from the logits one position back,
/// so span.begin must be >= 1.
double span_loss(const WeightStore& store, std::span<const int> tokens, TokenSpan span);

/// Exact reverse-mode gradient of span_loss with respect to every captured
/// module's raw output, at every token position.
GradientTrace activation_grads(const WeightStore& store, std::span<const int> tokens,
                               TokenSpan span, const CaptureSet& capture);

/// span_loss evaluated entirely in 64-bit arithmetic.
double span_loss_f64(const WeightStore& store, std::span<const int> tokens, TokenSpan span);

/// span_loss (64-bit path) with `delta` added to one component of one
/// module's raw output. This is the probe used by central-finite-difference
/// checks of activation_grads.
double span_loss_perturbed_f64(const WeightStore& store, std::span<const int> tokens,
                               TokenSpan span, const LinearModuleId& module,
                               std::size_t token, std::size_t component, double delta);

/// Loss plus gradients with respect to every weight tensor (training path).
struct WeightGradients {
  double loss = 0.0;
  std::map<std::string, std::vector<double>> grads;  // keyed like WeightStore
};
WeightGradients loss_and_weight_grads(const WeightStore& store, std::span<const int> tokens,
                                      TokenSpan span);

}  // namespace rlens
