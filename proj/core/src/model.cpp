#include "rlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <type_traits>

#include "rlens/rng.hpp"

namespace rlens {

namespace {

constexpr double kRmsEps = 1e-5;

const char* const kModuleKindNames[kModuleKindCount] = {
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"};

std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }

}  // namespace

const char* module_kind_name(ModuleKind kind) {
  return kModuleKindNames[static_cast<int>(kind)];
}

std::optional<ModuleKind> module_kind_from_name(std::string_view name) {
  for (int i = 0; i < kModuleKindCount; ++i) {
    if (name == kModuleKindNames[i]) return static_cast<ModuleKind>(i);
  }
  return std::nullopt;
}

std::vector<ModuleKind> all_module_kinds() {
  std::vector<ModuleKind> kinds;
  kinds.reserve(kModuleKindCount);
  for (int i = 0; i < kModuleKindCount; ++i) kinds.push_back(static_cast<ModuleKind>(i));
  return kinds;
}

std::string tensor_name(const LinearModuleId& id) {
  const bool attn = static_cast<int>(id.kind) <= static_cast<int>(ModuleKind::o_proj);
  return layer_prefix(id.layer) + (attn ? "attn." : "mlp.") + module_kind_name(id.kind);
}

std::optional<LinearModuleId> linear_module_from_tensor_name(std::string_view name) {
  if (!name.starts_with("layers.")) return std::nullopt;
  name.remove_prefix(7);
  const auto dot = name.find('.');
  if (dot == std::string_view::npos || dot == 0) return std::nullopt;
  int layer = 0;
  for (char c : name.substr(0, dot)) {
    if (c < '0' || c > '9') return std::nullopt;
    layer = layer * 10 + (c - '0');
  }
  name.remove_prefix(dot + 1);
  std::string_view group;
  if (name.starts_with("attn.")) {
    group = "attn";
    name.remove_prefix(5);
  } else if (name.starts_with("mlp.")) {
    group = "mlp";
    name.remove_prefix(4);
  } else {
    return std::nullopt;
  }
  const auto kind = module_kind_from_name(name);
  if (!kind) return std::nullopt;
  const bool is_attn_kind = static_cast<int>(*kind) <= static_cast<int>(ModuleKind::o_proj);
  if (is_attn_kind != (group == "attn")) return std::nullopt;
  return LinearModuleId{layer, *kind};
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw Error("ModelConfig: n_layers must be >= 1");
  if (d_model < 1) throw Error("ModelConfig: d_model must be >= 1");
  if (n_heads < 1) throw Error("ModelConfig: n_heads must be >= 1");
  if (d_ff < 1) throw Error("ModelConfig: d_ff must be >= 1");
  if (vocab_size < 1) throw Error("ModelConfig: vocab_size must be >= 1");
  if (max_seq < 1) throw Error("ModelConfig: max_seq must be >= 1");
  if (d_model % n_heads != 0) throw Error("ModelConfig: d_model must be divisible by n_heads");
  if (!(rope_theta > 0.0)) throw Error("ModelConfig: rope_theta must be positive");
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) {
  Tensor t;
  t.shape = {rows, cols};
  t.data.assign(rows * cols, 0.0f);
  return t;
}

Tensor Tensor::zeros1d(std::size_t n) {
  Tensor t;
  t.shape = {n};
  t.data.assign(n, 0.0f);
  return t;
}

const Tensor& WeightStore::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("missing tensor: " + name);
  return it->second;
}

Tensor& WeightStore::at(const std::string& name) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("missing tensor: " + name);
  return it->second;
}

std::vector<std::string> canonical_tensor_names(const ModelConfig& config) {
  std::vector<std::string> names;
  names.reserve(3 + 9 * static_cast<std::size_t>(config.n_layers));
  names.emplace_back("embed.tokens");
  names.emplace_back("head.lm");
  names.emplace_back("norm.final");
  for (int l = 0; l < config.n_layers; ++l) {
    for (ModuleKind kind : all_module_kinds()) {
      names.push_back(tensor_name(LinearModuleId{l, kind}));
    }
    names.push_back(layer_prefix(l) + "norm.attn");
    names.push_back(layer_prefix(l) + "norm.mlp");
  }
  return names;
}

std::vector<LinearModuleId> all_linear_modules(const ModelConfig& config) {
  std::vector<LinearModuleId> ids;
  ids.reserve(static_cast<std::size_t>(config.n_layers) * kModuleKindCount);
  for (int l = 0; l < config.n_layers; ++l) {
    for (ModuleKind kind : all_module_kinds()) ids.push_back({l, kind});
  }
  return ids;
}

int module_out_dim(const ModelConfig& config, ModuleKind kind) {
  switch (kind) {
    case ModuleKind::gate_proj:
    case ModuleKind::up_proj:
      return config.d_ff;
    default:
      return config.d_model;
  }
}

int module_in_dim(const ModelConfig& config, ModuleKind kind) {
  return kind == ModuleKind::down_proj ? config.d_ff : config.d_model;
}

std::vector<std::size_t> expected_shape(const ModelConfig& config, const std::string& name) {
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.d_model);
  if (name == "embed.tokens" || name == "head.lm") return {v, d};
  if (name == "norm.final" || name.ends_with("norm.attn") || name.ends_with("norm.mlp"))
    return {d};
  const auto id = linear_module_from_tensor_name(name);
  if (!id) throw Error("unknown tensor name: " + name);
  return {static_cast<std::size_t>(module_out_dim(config, id->kind)),
          static_cast<std::size_t>(module_in_dim(config, id->kind))};
}

void validate_store(const WeightStore& store) {
  store.config.validate();
  const auto names = canonical_tensor_names(store.config);
  for (const auto& name : names) {
    const auto it = store.tensors.find(name);
    if (it == store.tensors.end()) throw Error("missing tensor: " + name);
    const auto want = expected_shape(store.config, name);
    if (it->second.shape != want) {
      throw Error("shape mismatch for tensor " + name);
    }
    for (float x : it->second.data) {
      if (!std::isfinite(x)) throw Error("non-finite value in tensor " + name);
    }
  }
  if (store.tensors.size() != names.size()) {
    for (const auto& [name, _] : store.tensors) {
      if (std::find(names.begin(), names.end(), name) == names.end()) {
        throw Error("unexpected tensor: " + name);
      }
    }
  }
}

WeightStore zero_store(const ModelConfig& config, std::string provenance) {
  config.validate();
  WeightStore store;
  store.config = config;
  store.provenance = std::move(provenance);
  for (const auto& name : canonical_tensor_names(config)) {
    const auto shape = expected_shape(config, name);
    Tensor t = shape.size() == 1 ? Tensor::zeros1d(shape[0]) : Tensor::zeros(shape[0], shape[1]);
    store.tensors.emplace(name, std::move(t));
  }
  return store;
}

WeightStore initialized_store(const ModelConfig& config, std::uint64_t seed,
                              std::string provenance) {
  WeightStore store = zero_store(config);
  store.provenance =
      provenance.empty() ? "init seed=" + std::to_string(seed) : std::move(provenance);
  Rng rng(seed);
  const double resid_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (const auto& name : canonical_tensor_names(config)) {
    Tensor& t = store.at(name);
    if (t.rank() == 1) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);  // norm weights
      continue;
    }
    double std_dev;
    if (name == "embed.tokens" || name == "head.lm") {
      std_dev = 0.05;
    } else {
      std_dev = 1.0 / std::sqrt(static_cast<double>(t.cols()));
      const auto id = linear_module_from_tensor_name(name);
      if (id && (id->kind == ModuleKind::o_proj || id->kind == ModuleKind::down_proj)) {
        std_dev *= resid_scale;
      }
    }
    for (float& x : t.data) x = static_cast<float>(rng.normal() * std_dev);
  }
  return store;
}

// ---------------------------------------------------------------------------
// CaptureSet
// ---------------------------------------------------------------------------

CaptureSet CaptureSet::all() {
  CaptureSet c;
  c.all_ = true;
  return c;
}

CaptureSet CaptureSet::none() { return CaptureSet{}; }

CaptureSet CaptureSet::of(std::vector<LinearModuleId> ids) {
  CaptureSet c;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  c.ids_ = std::move(ids);
  return c;
}

bool CaptureSet::contains(const LinearModuleId& id) const {
  if (all_) return true;
  return std::binary_search(ids_.begin(), ids_.end(), id);
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

namespace {

// All matrix reductions accumulate in double regardless of the storage type.

template <typename T>
void matvec(const float* w, std::size_t out_dim, std::size_t in_dim, const T* x, T* y) {
  for (std::size_t r = 0; r < out_dim; ++r) {
    const float* row = w + r * in_dim;
    double acc = 0.0;
    for (std::size_t c = 0; c < in_dim; ++c) acc += static_cast<double>(row[c]) * x[c];
    y[r] = static_cast<T>(acc);
  }
}

// y += W^T g  (gradient pull-back through y = W x).
template <typename T>
void matvec_transpose_add(const float* w, std::size_t out_dim, std::size_t in_dim, const T* g,
                          T* y) {
  for (std::size_t c = 0; c < in_dim; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < out_dim; ++r) acc += static_cast<double>(w[r * in_dim + c]) * g[r];
    y[c] = static_cast<T>(static_cast<double>(y[c]) + acc);
  }
}

template <typename T>
double inv_rms(const T* x, std::size_t n) {
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += static_cast<double>(x[i]) * x[i];
  return 1.0 / std::sqrt(ss / static_cast<double>(n) + kRmsEps);
}

// dL/dx for y = w * x * inv_r with r = rms(x); dy arrives in `dy`.
template <typename T>
void rmsnorm_backward(const float* w, const T* x, double inv_r, const T* dy, std::size_t n,
                      T* dx_add) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    s += static_cast<double>(dy[i]) * w[i] * static_cast<double>(x[i]);
  const double k = s * inv_r * inv_r * inv_r / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(dy[i]) * w[i] * inv_r - static_cast<double>(x[i]) * k;
    dx_add[i] = static_cast<T>(static_cast<double>(dx_add[i]) + d);
  }
}

struct Injection {
  LinearModuleId module;
  std::size_t token = 0;
  std::size_t component = 0;
  double delta = 0.0;
};

template <typename T>
struct LayerWork {
  std::vector<T> x_in;            // S*D, input to the attention block
  std::vector<double> inv_rms1;   // S
  std::vector<T> h1;              // S*D
  std::vector<T> q, k, v;         // S*D raw projection outputs
  std::vector<T> q_rot, k_rot;    // S*D
  std::vector<T> probs;           // H*S*S
  std::vector<T> ctx;             // S*D
  std::vector<T> attn_out;        // S*D raw o_proj output
  std::vector<T> x_mid;           // S*D
  std::vector<double> inv_rms2;   // S
  std::vector<T> h2;              // S*D
  std::vector<T> gate, up;        // S*F raw projection outputs
  std::vector<T> mlp_mid;         // S*F, silu(gate) * up
  std::vector<T> down_out;        // S*D raw down_proj output
};

template <typename T>
struct Work {
  std::size_t seq = 0;
  std::vector<LayerWork<T>> layers;
  std::vector<T> x_final;           // S*D
  std::vector<double> inv_rms_final;  // S
  std::vector<T> f;                 // S*D
  std::vector<T> logits;            // S*V
  std::vector<double> rope_cos, rope_sin;  // S * (Dh/2)
};

template <typename T>
void check_inputs(const WeightStore& store, std::span<const int> tokens) {
  const ModelConfig& cfg = store.config;
  if (tokens.empty()) throw Error("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw Error("sequence too long: " + std::to_string(tokens.size()) + " > max_seq " +
                std::to_string(cfg.max_seq));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) {
      throw Error("token out of range at position " + std::to_string(i));
    }
  }
}

void check_span(std::span<const int> tokens, TokenSpan span) {
  if (span.begin >= span.end) throw Error("empty span");
  if (span.begin < 1 || span.end > tokens.size()) {
    throw Error("span outside sequence (need 1 <= begin < end <= len)");
  }
}

template <typename T>
void apply_injection(std::vector<T>& out, std::size_t token, std::size_t width,
                     const Injection* inj, const LinearModuleId& id) {
  if (inj == nullptr || !(inj->module == id)) return;
  if (inj->token != token || inj->component >= width) return;
  out[token * width + inj->component] =
      static_cast<T>(static_cast<double>(out[token * width + inj->component]) + inj->delta);
}

template <typename T>
void run_forward(const WeightStore& store, std::span<const int> tokens, Work<T>& w,
                 const Injection* inj) {
  const ModelConfig& cfg = store.config;
  const std::size_t S = tokens.size();
  const std::size_t D = static_cast<std::size_t>(cfg.d_model);
  const std::size_t F = static_cast<std::size_t>(cfg.d_ff);
  const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t Dh = D / H;
  const std::size_t half = Dh / 2;

  w.seq = S;
  w.layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerWork<T>{});

  // RoPE tables, position-major.
  w.rope_cos.assign(S * half, 0.0);
  w.rope_sin.assign(S * half, 0.0);
  for (std::size_t t = 0; t < S; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(cfg.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(Dh));
      const double angle = static_cast<double>(t) * freq;
      w.rope_cos[t * half + i] = std::cos(angle);
      w.rope_sin[t * half + i] = std::sin(angle);
    }
  }

  std::vector<T> x(S * D);
  const float* embed = store.at("embed.tokens").data.data();
  for (std::size_t t = 0; t < S; ++t) {
    const float* row = embed + static_cast<std::size_t>(tokens[t]) * D;
    for (std::size_t i = 0; i < D; ++i) x[t * D + i] = static_cast<T>(row[i]);
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    LayerWork<T>& lw = w.layers[static_cast<std::size_t>(layer)];
    lw.x_in = x;
    lw.inv_rms1.resize(S);
    lw.h1.resize(S * D);
    lw.q.resize(S * D);
    lw.k.resize(S * D);
    lw.v.resize(S * D);
    lw.q_rot.resize(S * D);
    lw.k_rot.resize(S * D);
    lw.probs.assign(H * S * S, static_cast<T>(0));
    lw.ctx.assign(S * D, static_cast<T>(0));
    lw.attn_out.resize(S * D);
    lw.inv_rms2.resize(S);
    lw.h2.resize(S * D);
    lw.gate.resize(S * F);
    lw.up.resize(S * F);
    lw.mlp_mid.resize(S * F);
    lw.down_out.resize(S * D);

    const std::string prefix = layer_prefix(layer);
    const float* norm_attn = store.at(prefix + "norm.attn").data.data();
    const float* wq = store.at(prefix + "attn.q_proj").data.data();
    const float* wk = store.at(prefix + "attn.k_proj").data.data();
    const float* wv = store.at(prefix + "attn.v_proj").data.data();
    const float* wo = store.at(prefix + "attn.o_proj").data.data();
    const float* norm_mlp = store.at(prefix + "norm.mlp").data.data();
    const float* wgate = store.at(prefix + "mlp.gate_proj").data.data();
    const float* wup = store.at(prefix + "mlp.up_proj").data.data();
    const float* wdown = store.at(prefix + "mlp.down_proj").data.data();

    // Attention block.
    for (std::size_t t = 0; t < S; ++t) {
      lw.inv_rms1[t] = inv_rms(&lw.x_in[t * D], D);
      for (std::size_t i = 0; i < D; ++i) {
        lw.h1[t * D + i] = static_cast<T>(static_cast<double>(lw.x_in[t * D + i]) *
                                          lw.inv_rms1[t] * norm_attn[i]);
      }
      matvec(wq, D, D, &lw.h1[t * D], &lw.q[t * D]);
      apply_injection(lw.q, t, D, inj, {layer, ModuleKind::q_proj});
      matvec(wk, D, D, &lw.h1[t * D], &lw.k[t * D]);
      apply_injection(lw.k, t, D, inj, {layer, ModuleKind::k_proj});
      matvec(wv, D, D, &lw.h1[t * D], &lw.v[t * D]);
      apply_injection(lw.v, t, D, inj, {layer, ModuleKind::v_proj});

      // RoPE on q and k per head; odd head dims leave the last lane as-is.
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = t * D + h * Dh;
        for (std::size_t i = 0; i < half; ++i) {
          const double c = w.rope_cos[t * half + i];
          const double s = w.rope_sin[t * half + i];
          const double q0 = static_cast<double>(lw.q[off + 2 * i]);
          const double q1 = static_cast<double>(lw.q[off + 2 * i + 1]);
          lw.q_rot[off + 2 * i] = static_cast<T>(q0 * c - q1 * s);
          lw.q_rot[off + 2 * i + 1] = static_cast<T>(q0 * s + q1 * c);
          const double k0 = static_cast<double>(lw.k[off + 2 * i]);
          const double k1 = static_cast<double>(lw.k[off + 2 * i + 1]);
          lw.k_rot[off + 2 * i] = static_cast<T>(k0 * c - k1 * s);
          lw.k_rot[off + 2 * i + 1] = static_cast<T>(k0 * s + k1 * c);
        }
        if (Dh % 2 != 0) {
          lw.q_rot[off + Dh - 1] = lw.q[off + Dh - 1];
          lw.k_rot[off + Dh - 1] = lw.k[off + Dh - 1];
        }
      }
    }

    std::vector<double> scores;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < S; ++t) {
        scores.assign(t + 1, 0.0);
        double mx = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          const T* qr = &lw.q_rot[t * D + h * Dh];
          const T* kr = &lw.k_rot[s * D + h * Dh];
          for (std::size_t i = 0; i < Dh; ++i)
            dot += static_cast<double>(qr[i]) * static_cast<double>(kr[i]);
          scores[s] = dot * inv_sqrt_dh;
          mx = std::max(mx, scores[s]);
        }
        double denom = 0.0;
        for (std::size_t s = 0; s <= t; ++s) denom += std::exp(scores[s] - mx);
        T* prow = &lw.probs[(h * S + t) * S];
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = static_cast<T>(std::exp(scores[s] - mx) / denom);
        }
        T* crow = &lw.ctx[t * D + h * Dh];
        for (std::size_t i = 0; i < Dh; ++i) {
          double acc = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            acc += static_cast<double>(prow[s]) * static_cast<double>(lw.v[s * D + h * Dh + i]);
          }
          crow[i] = static_cast<T>(acc);
        }
      }
    }

    for (std::size_t t = 0; t < S; ++t) {
      matvec(wo, D, D, &lw.ctx[t * D], &lw.attn_out[t * D]);
      apply_injection(lw.attn_out, t, D, inj, {layer, ModuleKind::o_proj});
      for (std::size_t i = 0; i < D; ++i) {
        x[t * D + i] = static_cast<T>(static_cast<double>(x[t * D + i]) +
                                      static_cast<double>(lw.attn_out[t * D + i]));
      }
    }
    lw.x_mid = x;

    // MLP block.
    for (std::size_t t = 0; t < S; ++t) {
      lw.inv_rms2[t] = inv_rms(&lw.x_mid[t * D], D);
      for (std::size_t i = 0; i < D; ++i) {
        lw.h2[t * D + i] = static_cast<T>(static_cast<double>(lw.x_mid[t * D + i]) *
                                          lw.inv_rms2[t] * norm_mlp[i]);
      }
      matvec(wgate, F, D, &lw.h2[t * D], &lw.gate[t * F]);
      apply_injection(lw.gate, t, F, inj, {layer, ModuleKind::gate_proj});
      matvec(wup, F, D, &lw.h2[t * D], &lw.up[t * F]);
      apply_injection(lw.up, t, F, inj, {layer, ModuleKind::up_proj});
      for (std::size_t i = 0; i < F; ++i) {
        const double g = static_cast<double>(lw.gate[t * F + i]);
        const double silu = g / (1.0 + std::exp(-g));
        lw.mlp_mid[t * F + i] =
            static_cast<T>(silu * static_cast<double>(lw.up[t * F + i]));
      }
      matvec(wdown, D, F, &lw.mlp_mid[t * F], &lw.down_out[t * D]);
      apply_injection(lw.down_out, t, D, inj, {layer, ModuleKind::down_proj});
      for (std::size_t i = 0; i < D; ++i) {
        x[t * D + i] = static_cast<T>(static_cast<double>(x[t * D + i]) +
                                      static_cast<double>(lw.down_out[t * D + i]));
      }
    }
  }

  w.x_final = x;
  w.inv_rms_final.resize(S);
  w.f.resize(S * D);
  const float* norm_final = store.at("norm.final").data.data();
  const float* head = store.at("head.lm").data.data();
  w.logits.resize(S * V);
  for (std::size_t t = 0; t < S; ++t) {
    w.inv_rms_final[t] = inv_rms(&w.x_final[t * D], D);
    for (std::size_t i = 0; i < D; ++i) {
      w.f[t * D + i] = static_cast<T>(static_cast<double>(w.x_final[t * D + i]) *
                                      w.inv_rms_final[t] * norm_final[i]);
    }
    matvec(head, V, D, &w.f[t * D], &w.logits[t * V]);
  }
}

template <typename T>
double loss_from_logits(const std::vector<T>& logits, std::size_t vocab,
                        std::span<const int> tokens, TokenSpan span) {
  double total = 0.0;
  for (std::size_t t = span.begin; t < span.end; ++t) {
    const T* row = &logits[(t - 1) * vocab];
    double mx = static_cast<double>(row[0]);
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    total += std::log(denom) - (static_cast<double>(row[static_cast<std::size_t>(tokens[t])]) - mx);
  }
  return total / static_cast<double>(span.size());
}

// Reverse pass. Fills `trace_out` with dL/d(raw output) for captured modules
// and, when `wgrads` is non-null, accumulates dL/dW for every weight tensor.
template <typename T>
double run_backward(const WeightStore& store, std::span<const int> tokens, TokenSpan span,
                    const Work<T>& w, const CaptureSet* capture, GradientTrace* trace_out,
                    std::map<std::string, std::vector<double>>* wgrads) {
  const ModelConfig& cfg = store.config;
  const std::size_t S = tokens.size();
  const std::size_t D = static_cast<std::size_t>(cfg.d_model);
  const std::size_t F = static_cast<std::size_t>(cfg.d_ff);
  const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t Dh = D / H;
  const std::size_t half = Dh / 2;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));

  const double loss = loss_from_logits(w.logits, V, tokens, span);

  if (wgrads != nullptr) {
    for (const auto& name : canonical_tensor_names(cfg)) {
      (*wgrads)[name].assign(store.at(name).data.size(), 0.0);
    }
  }

  auto record = [&](const LinearModuleId& id, const std::vector<T>& grad, std::size_t width) {
    if (capture == nullptr || trace_out == nullptr || !capture->contains(id)) return;
    Tensor t = Tensor::zeros(S, width);
    for (std::size_t i = 0; i < S * width; ++i) t.data[i] = static_cast<float>(grad[i]);
    (*trace_out)[id] = std::move(t);
  };

  // d logits.
  std::vector<T> dlogits(S * V, static_cast<T>(0));
  const double inv_n = 1.0 / static_cast<double>(span.size());
  for (std::size_t t = span.begin; t < span.end; ++t) {
    const T* row = &w.logits[(t - 1) * V];
    double mx = static_cast<double>(row[0]);
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    T* drow = &dlogits[(t - 1) * V];
    for (std::size_t j = 0; j < V; ++j) {
      double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
      if (j == static_cast<std::size_t>(tokens[t])) p -= 1.0;
      drow[j] = static_cast<T>(static_cast<double>(drow[j]) + p * inv_n);
    }
  }

  const float* head = store.at("head.lm").data.data();
  const float* norm_final = store.at("norm.final").data.data();

  // Through the head and final norm.
  std::vector<T> dx(S * D, static_cast<T>(0));
  {
    std::vector<T> df(S * D, static_cast<T>(0));
    for (std::size_t t = 0; t < S; ++t) {
      matvec_transpose_add(head, V, D, &dlogits[t * V], &df[t * D]);
    }
    if (wgrads != nullptr) {
      auto& gh = (*wgrads)["head.lm"];
      auto& gn = (*wgrads)["norm.final"];
      for (std::size_t t = 0; t < S; ++t) {
        for (std::size_t r = 0; r < V; ++r) {
          const double g = static_cast<double>(dlogits[t * V + r]);
          if (g == 0.0) continue;
          for (std::size_t c = 0; c < D; ++c)
            gh[r * D + c] += g * static_cast<double>(w.f[t * D + c]);
        }
        for (std::size_t i = 0; i < D; ++i) {
          gn[i] += static_cast<double>(df[t * D + i]) *
                   static_cast<double>(w.x_final[t * D + i]) * w.inv_rms_final[t];
        }
      }
    }
    for (std::size_t t = 0; t < S; ++t) {
      rmsnorm_backward(norm_final, &w.x_final[t * D], w.inv_rms_final[t], &df[t * D], D,
                       &dx[t * D]);
    }
  }

  std::vector<T> dmid(S * F), dgate(S * F), dup(S * F), dh2(S * D);
  std::vector<T> dctx(S * D), dq_rot(S * D), dk_rot(S * D), dq(S * D), dk(S * D), dv(S * D),
      dh1(S * D);

  for (int layer = cfg.n_layers - 1; layer >= 0; --layer) {
    const LayerWork<T>& lw = w.layers[static_cast<std::size_t>(layer)];
    const std::string prefix = layer_prefix(layer);
    const float* norm_attn = store.at(prefix + "norm.attn").data.data();
    const float* wq = store.at(prefix + "attn.q_proj").data.data();
    const float* wk = store.at(prefix + "attn.k_proj").data.data();
    const float* wv = store.at(prefix + "attn.v_proj").data.data();
    const float* wo = store.at(prefix + "attn.o_proj").data.data();
    const float* norm_mlp = store.at(prefix + "norm.mlp").data.data();
    const float* wgate = store.at(prefix + "mlp.gate_proj").data.data();
    const float* wup = store.at(prefix + "mlp.up_proj").data.data();
    const float* wdown = store.at(prefix + "mlp.down_proj").data.data();

    // MLP block backward; dx currently holds dL/d(x after the block).
    record({layer, ModuleKind::down_proj}, dx, D);
    std::fill(dmid.begin(), dmid.end(), static_cast<T>(0));
    for (std::size_t t = 0; t < S; ++t) {
      matvec_transpose_add(wdown, D, F, &dx[t * D], &dmid[t * F]);
    }
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t i = 0; i < F; ++i) {
        const double g = static_cast<double>(lw.gate[t * F + i]);
        const double sig = 1.0 / (1.0 + std::exp(-g));
        const double silu = g * sig;
        const double dsilu = sig * (1.0 + g * (1.0 - sig));
        const double dm = static_cast<double>(dmid[t * F + i]);
        dup[t * F + i] = static_cast<T>(dm * silu);
        dgate[t * F + i] =
            static_cast<T>(dm * static_cast<double>(lw.up[t * F + i]) * dsilu);
      }
    }
    record({layer, ModuleKind::gate_proj}, dgate, F);
    record({layer, ModuleKind::up_proj}, dup, F);

    std::fill(dh2.begin(), dh2.end(), static_cast<T>(0));
    for (std::size_t t = 0; t < S; ++t) {
      matvec_transpose_add(wgate, F, D, &dgate[t * F], &dh2[t * D]);
      matvec_transpose_add(wup, F, D, &dup[t * F], &dh2[t * D]);
    }
    if (wgrads != nullptr) {
      auto& gdown = (*wgrads)[prefix + "mlp.down_proj"];
      auto& ggate = (*wgrads)[prefix + "mlp.gate_proj"];
      auto& gup = (*wgrads)[prefix + "mlp.up_proj"];
      auto& gnorm = (*wgrads)[prefix + "norm.mlp"];
      for (std::size_t t = 0; t < S; ++t) {
        for (std::size_t r = 0; r < D; ++r) {
          const double g = static_cast<double>(dx[t * D + r]);
          for (std::size_t c = 0; c < F; ++c)
            gdown[r * F + c] += g * static_cast<double>(lw.mlp_mid[t * F + c]);
        }
        for (std::size_t r = 0; r < F; ++r) {
          const double gg = static_cast<double>(dgate[t * F + r]);
          const double gu = static_cast<double>(dup[t * F + r]);
          for (std::size_t c = 0; c < D; ++c) {
            ggate[r * D + c] += gg * static_cast<double>(lw.h2[t * D + c]);
            gup[r * D + c] += gu * static_cast<double>(lw.h2[t * D + c]);
          }
        }
        for (std::size_t i = 0; i < D; ++i) {
          gnorm[i] += static_cast<double>(dh2[t * D + i]) *
                      static_cast<double>(lw.x_mid[t * D + i]) * lw.inv_rms2[t];
        }
      }
    }
    for (std::size_t t = 0; t < S; ++t) {
      rmsnorm_backward(norm_mlp, &lw.x_mid[t * D], lw.inv_rms2[t], &dh2[t * D], D, &dx[t * D]);
    }

    // Attention block backward; dx now holds dL/d(x after attention).
    record({layer, ModuleKind::o_proj}, dx, D);
    std::fill(dctx.begin(), dctx.end(), static_cast<T>(0));
    for (std::size_t t = 0; t < S; ++t) {
      matvec_transpose_add(wo, D, D, &dx[t * D], &dctx[t * D]);
    }

    std::fill(dq_rot.begin(), dq_rot.end(), static_cast<T>(0));
    std::fill(dk_rot.begin(), dk_rot.end(), static_cast<T>(0));
    std::fill(dv.begin(), dv.end(), static_cast<T>(0));
    std::vector<double> dprob, dscore;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < S; ++t) {
        const T* prow = &lw.probs[(h * S + t) * S];
        const T* dctx_row = &dctx[t * D + h * Dh];
        dprob.assign(t + 1, 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          double acc = 0.0;
          const T* vrow = &lw.v[s * D + h * Dh];
          for (std::size_t i = 0; i < Dh; ++i)
            acc += static_cast<double>(dctx_row[i]) * static_cast<double>(vrow[i]);
          dprob[s] = acc;
          // dv accumulation.
          T* dvrow = &dv[s * D + h * Dh];
          const double p = static_cast<double>(prow[s]);
          for (std::size_t i = 0; i < Dh; ++i) {
            dvrow[i] = static_cast<T>(static_cast<double>(dvrow[i]) +
                                      p * static_cast<double>(dctx_row[i]));
          }
        }
        double dot = 0.0;
        for (std::size_t s = 0; s <= t; ++s) dot += static_cast<double>(prow[s]) * dprob[s];
        dscore.assign(t + 1, 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          dscore[s] = static_cast<double>(prow[s]) * (dprob[s] - dot) * inv_sqrt_dh;
        }
        T* dqr = &dq_rot[t * D + h * Dh];
        for (std::size_t s = 0; s <= t; ++s) {
          const T* kr = &lw.k_rot[s * D + h * Dh];
          T* dkr = &dk_rot[s * D + h * Dh];
          for (std::size_t i = 0; i < Dh; ++i) {
            dqr[i] = static_cast<T>(static_cast<double>(dqr[i]) +
                                    dscore[s] * static_cast<double>(kr[i]));
            dkr[i] = static_cast<T>(static_cast<double>(dkr[i]) +
                                    dscore[s] *
                                        static_cast<double>(lw.q_rot[t * D + h * Dh + i]));
          }
        }
      }
    }

    // RoPE backward: inverse rotation.
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = t * D + h * Dh;
        for (std::size_t i = 0; i < half; ++i) {
          const double c = w.rope_cos[t * half + i];
          const double s = w.rope_sin[t * half + i];
          const double a = static_cast<double>(dq_rot[off + 2 * i]);
          const double b = static_cast<double>(dq_rot[off + 2 * i + 1]);
          dq[off + 2 * i] = static_cast<T>(a * c + b * s);
          dq[off + 2 * i + 1] = static_cast<T>(-a * s + b * c);
          const double a2 = static_cast<double>(dk_rot[off + 2 * i]);
          const double b2 = static_cast<double>(dk_rot[off + 2 * i + 1]);
          dk[off + 2 * i] = static_cast<T>(a2 * c + b2 * s);
          dk[off + 2 * i + 1] = static_cast<T>(-a2 * s + b2 * c);
        }
        if (Dh % 2 != 0) {
          dq[off + Dh - 1] = dq_rot[off + Dh - 1];
          dk[off + Dh - 1] = dk_rot[off + Dh - 1];
        }
      }
    }
    record({layer, ModuleKind::q_proj}, dq, D);
    record({layer, ModuleKind::k_proj}, dk, D);
    record({layer, ModuleKind::v_proj}, dv, D);

    std::fill(dh1.begin(), dh1.end(), static_cast<T>(0));
    for (std::size_t t = 0; t < S; ++t) {
      matvec_transpose_add(wq, D, D, &dq[t * D], &dh1[t * D]);
      matvec_transpose_add(wk, D, D, &dk[t * D], &dh1[t * D]);
      matvec_transpose_add(wv, D, D, &dv[t * D], &dh1[t * D]);
    }
    if (wgrads != nullptr) {
      auto& go = (*wgrads)[prefix + "attn.o_proj"];
      auto& gq = (*wgrads)[prefix + "attn.q_proj"];
      auto& gk = (*wgrads)[prefix + "attn.k_proj"];
      auto& gv = (*wgrads)[prefix + "attn.v_proj"];
      auto& gnorm = (*wgrads)[prefix + "norm.attn"];
      for (std::size_t t = 0; t < S; ++t) {
        for (std::size_t r = 0; r < D; ++r) {
          const double ga = static_cast<double>(dx[t * D + r]);
          const double gqr = static_cast<double>(dq[t * D + r]);
          const double gkr = static_cast<double>(dk[t * D + r]);
          const double gvr = static_cast<double>(dv[t * D + r]);
          for (std::size_t c = 0; c < D; ++c) {
            go[r * D + c] += ga * static_cast<double>(lw.ctx[t * D + c]);
            gq[r * D + c] += gqr * static_cast<double>(lw.h1[t * D + c]);
            gk[r * D + c] += gkr * static_cast<double>(lw.h1[t * D + c]);
            gv[r * D + c] += gvr * static_cast<double>(lw.h1[t * D + c]);
          }
        }
        for (std::size_t i = 0; i < D; ++i) {
          gnorm[i] += static_cast<double>(dh1[t * D + i]) *
                      static_cast<double>(lw.x_in[t * D + i]) * lw.inv_rms1[t];
        }
      }
    }
    for (std::size_t t = 0; t < S; ++t) {
      rmsnorm_backward(norm_attn, &lw.x_in[t * D], lw.inv_rms1[t], &dh1[t * D], D, &dx[t * D]);
    }
  }

  if (wgrads != nullptr) {
    auto& ge = (*wgrads)["embed.tokens"];
    for (std::size_t t = 0; t < S; ++t) {
      const std::size_t row = static_cast<std::size_t>(tokens[t]) * D;
      for (std::size_t i = 0; i < D; ++i) ge[row + i] += static_cast<double>(dx[t * D + i]);
    }
  }

  return loss;
}

}  // namespace

ForwardResult forward(const WeightStore& store, std::span<const int> tokens,
                      const CaptureSet& capture) {
  check_inputs<float>(store, tokens);
  Work<float> w;
  run_forward<float>(store, tokens, w, nullptr);

  const std::size_t S = tokens.size();
  const std::size_t V = static_cast<std::size_t>(store.config.vocab_size);
  ForwardResult result;
  result.logits = Tensor::zeros(S, V);
  std::copy(w.logits.begin(), w.logits.end(), result.logits.data.begin());

  for (const auto& id : all_linear_modules(store.config)) {
    if (!capture.contains(id)) continue;
    const std::size_t width = static_cast<std::size_t>(module_out_dim(store.config, id.kind));
    const LayerWork<float>& lw = w.layers[static_cast<std::size_t>(id.layer)];
    const std::vector<float>* src = nullptr;
    switch (id.kind) {
      case ModuleKind::q_proj: src = &lw.q; break;
      case ModuleKind::k_proj: src = &lw.k; break;
      case ModuleKind::v_proj: src = &lw.v; break;
      case ModuleKind::o_proj: src = &lw.attn_out; break;
      case ModuleKind::gate_proj: src = &lw.gate; break;
      case ModuleKind::up_proj: src = &lw.up; break;
      case ModuleKind::down_proj: src = &lw.down_out; break;
    }
    Tensor t = Tensor::zeros(S, width);
    std::copy(src->begin(), src->end(), t.data.begin());
    result.trace.emplace(id, std::move(t));
  }
  return result;
}

double span_loss(const WeightStore& store, std::span<const int> tokens, TokenSpan span) {
  check_inputs<float>(store, tokens);
  check_span(tokens, span);
  Work<float> w;
  run_forward<float>(store, tokens, w, nullptr);
  return loss_from_logits(w.logits, static_cast<std::size_t>(store.config.vocab_size), tokens,
                          span);
}

GradientTrace activation_grads(const WeightStore& store, std::span<const int> tokens,
                               TokenSpan span, const CaptureSet& capture) {
  check_inputs<float>(store, tokens);
  check_span(tokens, span);
  if (capture.empty()) throw Error("activation_grads: empty capture set");
  Work<float> w;
  run_forward<float>(store, tokens, w, nullptr);
  GradientTrace trace;
  run_backward<float>(store, tokens, span, w, &capture, &trace, nullptr);
  return trace;
}

double span_loss_f64(const WeightStore& store, std::span<const int> tokens, TokenSpan span) {
  check_inputs<double>(store, tokens);
  check_span(tokens, span);
  Work<double> w;
  run_forward<double>(store, tokens, w, nullptr);
  return loss_from_logits(w.logits, static_cast<std::size_t>(store.config.vocab_size), tokens,
                          span);
}

double span_loss_perturbed_f64(const WeightStore& store, std::span<const int> tokens,
                               TokenSpan span, const LinearModuleId& module, std::size_t token,
                               std::size_t component, double delta) {
  check_inputs<double>(store, tokens);
  check_span(tokens, span);
  Injection inj{module, token, component, delta};
  Work<double> w;
  run_forward<double>(store, tokens, w, &inj);
  return loss_from_logits(w.logits, static_cast<std::size_t>(store.config.vocab_size), tokens,
                          span);
}

WeightGradients loss_and_weight_grads(const WeightStore& store, std::span<const int> tokens,
                                      TokenSpan span) {
  check_inputs<float>(store, tokens);
  check_span(tokens, span);
  Work<float> w;
  run_forward<float>(store, tokens, w, nullptr);
  WeightGradients out;
  out.loss = run_backward<float>(store, tokens, span, w, nullptr, nullptr, &out.grads);
  return out;
}

}  // namespace rlens
