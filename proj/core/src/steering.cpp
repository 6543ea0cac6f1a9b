#include "rlens/steering.hpp"

#include <algorithm>
#include <cmath>

#include "internal_parallel.hpp"
#include "json.hpp"
#include "rlens/weights_io.hpp"

namespace rlens {

namespace {

// Per-instance partial sums for one module.
struct InstancePartial {
  std::vector<double> whole_mean;       // per-instance mean over all tokens
  std::vector<double> token_sum;        // sum over all tokens (for the all-token mean)
  std::vector<std::vector<double>> window_means;  // one per span of the target behavior
};

std::vector<double> mean_rows(const Tensor& act, TokenSpan window) {
  const std::size_t width = act.cols();
  std::vector<double> mean(width, 0.0);
  for (std::size_t t = window.begin; t < window.end; ++t) {
    for (std::size_t i = 0; i < width; ++i) mean[i] += static_cast<double>(act.at(t, i));
  }
  const double inv = 1.0 / static_cast<double>(window.size());
  for (auto& v : mean) v *= inv;
  return mean;
}

double l2_norm(const std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

SteeringVector finalize(const std::string& behavior, const LinearModuleId& module,
                        std::vector<double> dplus_sum, std::size_t n_plus,
                        std::vector<double> dminus_mean_sum, std::size_t n_minus,
                        std::vector<double> all_token_sum, std::size_t total_tokens) {
  const std::size_t width = dminus_mean_sum.size();
  SteeringVector sv;
  sv.behavior = behavior;
  sv.module = module;
  sv.u_raw.resize(width);
  for (std::size_t i = 0; i < width; ++i) {
    sv.u_raw[i] = dplus_sum[i] / static_cast<double>(n_plus) -
                  dminus_mean_sum[i] / static_cast<double>(n_minus);
  }
  std::vector<double> all_mean(width);
  for (std::size_t i = 0; i < width; ++i) {
    all_mean[i] = all_token_sum[i] / static_cast<double>(total_tokens);
  }
  sv.ref_norm = l2_norm(all_mean);
  const double raw_norm = l2_norm(sv.u_raw);
  sv.u_norm.assign(width, 0.0);
  if (raw_norm == 0.0) {
    sv.zero_raw = true;
  } else {
    const double scale = sv.ref_norm / raw_norm;
    for (std::size_t i = 0; i < width; ++i) sv.u_norm[i] = sv.u_raw[i] * scale;
  }
  return sv;
}

}  // namespace

MeanActivation mean_over_window(const ActivationTrace& trace, const LinearModuleId& module,
                                TokenSpan window) {
  const auto it = trace.find(module);
  if (it == trace.end()) throw Error("module not captured: " + tensor_name(module));
  const Tensor& act = it->second;
  if (window.begin >= window.end) throw Error("empty window");
  if (window.end > act.rows()) throw Error("window outside trace rows");
  MeanActivation out;
  out.module = module;
  out.vector = mean_rows(act, window);
  out.token_count = window.size();
  return out;
}

SteeringVector steering_vector(const AnnotatedCorpus& corpus, const WeightStore& store,
                               const std::string& behavior, const LinearModuleId& module) {
  const auto sets = split_sets(corpus, behavior);
  if (sets.d_plus.empty()) throw Error("empty D+ for behavior '" + behavior + "'");

  const std::size_t width = static_cast<std::size_t>(module_out_dim(store.config, module.kind));
  std::vector<double> dplus_sum(width, 0.0);
  std::vector<double> dminus_mean_sum(width, 0.0);
  std::vector<double> all_token_sum(width, 0.0);
  std::size_t total_tokens = 0;

  // Per-instance partial sums first, then one ordered add per instance, so
  // the reduction tree matches steering_all bitwise.
  const auto capture = CaptureSet::of({module});
  for (const auto* inst : sets.d_minus) {
    const auto result = forward(store, inst->tokens, capture);
    const Tensor& act = result.trace.at(module);
    const auto whole_mean = mean_rows(act, {0, inst->tokens.size()});
    std::vector<double> inst_token_sum(width, 0.0);
    for (std::size_t t = 0; t < inst->tokens.size(); ++t) {
      for (std::size_t i = 0; i < width; ++i) {
        inst_token_sum[i] += static_cast<double>(act.at(t, i));
      }
    }
    for (std::size_t i = 0; i < width; ++i) {
      dminus_mean_sum[i] += whole_mean[i];
      all_token_sum[i] += inst_token_sum[i];
    }
    total_tokens += inst->tokens.size();
    for (const auto& pos : sets.d_plus) {
      if (pos.instance != inst) continue;
      const auto wmean = mean_rows(act, pos.window);
      for (std::size_t i = 0; i < width; ++i) dplus_sum[i] += wmean[i];
    }
  }

  return finalize(behavior, module, std::move(dplus_sum), sets.d_plus.size(),
                  std::move(dminus_mean_sum), sets.d_minus.size(), std::move(all_token_sum),
                  total_tokens);
}

SteeringSet steering_all(const AnnotatedCorpus& corpus, const WeightStore& store,
                         const std::vector<std::string>& behaviors, int threads) {
  SteeringSet set;
  set.model_provenance = store.provenance;
  set.corpus_digest = corpus_digest(corpus);
  if (behaviors.empty()) return set;

  const auto modules = all_linear_modules(store.config);
  const std::size_t n_inst = corpus.instances.size();

  // Per-instance partials, computed in parallel, reduced in instance order.
  struct Partial {
    std::vector<std::vector<double>> whole_mean;   // [module][dim]
    std::vector<std::vector<double>> token_sum;    // [module][dim]
    std::size_t token_count = 0;
    // window means per behavior, span order: [behavior][span][module][dim]
    std::vector<std::vector<std::vector<std::vector<double>>>> windows;
  };
  std::vector<Partial> partials(n_inst);

  // Pre-split per behavior so windows match split_sets exactly.
  std::vector<SplitSets> splits;
  splits.reserve(behaviors.size());
  for (const auto& b : behaviors) {
    auto s = split_sets(corpus, b);
    if (s.d_plus.empty()) throw Error("empty D+ for behavior '" + b + "'");
    splits.push_back(std::move(s));
  }

  detail::parallel_for(n_inst, threads, [&](std::size_t idx) {
    const AnnotatedInstance& inst = corpus.instances[idx];
    const auto result = forward(store, inst.tokens, CaptureSet::all());
    Partial& p = partials[idx];
    p.token_count = inst.tokens.size();
    p.whole_mean.resize(modules.size());
    p.token_sum.resize(modules.size());
    for (std::size_t m = 0; m < modules.size(); ++m) {
      const Tensor& act = result.trace.at(modules[m]);
      const std::size_t width = act.cols();
      p.whole_mean[m] = mean_rows(act, {0, inst.tokens.size()});
      auto& sum = p.token_sum[m];
      sum.assign(width, 0.0);
      for (std::size_t t = 0; t < inst.tokens.size(); ++t) {
        for (std::size_t i = 0; i < width; ++i) sum[i] += static_cast<double>(act.at(t, i));
      }
    }
    p.windows.resize(behaviors.size());
    for (std::size_t b = 0; b < behaviors.size(); ++b) {
      for (const auto& pos : splits[b].d_plus) {
        if (pos.instance != &inst) continue;
        std::vector<std::vector<double>> per_module(modules.size());
        for (std::size_t m = 0; m < modules.size(); ++m) {
          per_module[m] = mean_rows(result.trace.at(modules[m]), pos.window);
        }
        p.windows[b].push_back(std::move(per_module));
      }
    }
  });

  // Ordered reduction.
  std::vector<std::vector<double>> dminus_mean_sum(modules.size());
  std::vector<std::vector<double>> all_token_sum(modules.size());
  std::size_t total_tokens = 0;
  for (std::size_t m = 0; m < modules.size(); ++m) {
    const std::size_t width =
        static_cast<std::size_t>(module_out_dim(store.config, modules[m].kind));
    dminus_mean_sum[m].assign(width, 0.0);
    all_token_sum[m].assign(width, 0.0);
  }
  // dplus_sum[b][m]
  std::vector<std::vector<std::vector<double>>> dplus_sum(behaviors.size());
  for (std::size_t b = 0; b < behaviors.size(); ++b) {
    dplus_sum[b].resize(modules.size());
    for (std::size_t m = 0; m < modules.size(); ++m) {
      dplus_sum[b][m].assign(dminus_mean_sum[m].size(), 0.0);
    }
  }

  for (std::size_t idx = 0; idx < n_inst; ++idx) {
    const Partial& p = partials[idx];
    for (std::size_t m = 0; m < modules.size(); ++m) {
      for (std::size_t i = 0; i < dminus_mean_sum[m].size(); ++i) {
        dminus_mean_sum[m][i] += p.whole_mean[m][i];
        all_token_sum[m][i] += p.token_sum[m][i];
      }
    }
    total_tokens += p.token_count;
    for (std::size_t b = 0; b < behaviors.size(); ++b) {
      for (const auto& per_module : p.windows[b]) {
        for (std::size_t m = 0; m < modules.size(); ++m) {
          for (std::size_t i = 0; i < per_module[m].size(); ++i) {
            dplus_sum[b][m][i] += per_module[m][i];
          }
        }
      }
    }
  }

  for (std::size_t b = 0; b < behaviors.size(); ++b) {
    auto& slot = set.by_behavior[behaviors[b]];
    for (std::size_t m = 0; m < modules.size(); ++m) {
      slot[modules[m]] =
          finalize(behaviors[b], modules[m], dplus_sum[b][m], splits[b].d_plus.size(),
                   dminus_mean_sum[m], splits[b].d_minus.size(), all_token_sum[m], total_tokens);
    }
  }
  return set;
}

void save_steering(const SteeringSet& set, const ModelConfig& config,
                   const std::filesystem::path& dir) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [behavior, modules] : set.by_behavior) {
    for (const auto& [id, sv] : modules) {
      const std::string key = "steer." + behavior + "." + tensor_name(id);
      Tensor u = Tensor::zeros1d(sv.u_norm.size());
      for (std::size_t i = 0; i < sv.u_norm.size(); ++i) {
        u.data[i] = static_cast<float>(sv.u_norm[i]);
      }
      tensors.emplace_back(key, std::move(u));
      Tensor rn = Tensor::zeros1d(1);
      rn.data[0] = static_cast<float>(sv.ref_norm);
      tensors.emplace_back(key + ".ref_norm", std::move(rn));
    }
  }
  nlohmann::ordered_json extra;
  extra["kind"] = "steering";
  extra["corpus_digest"] = set.corpus_digest;
  extra["n_layers"] = config.n_layers;
  save_container(dir, tensors, set.model_provenance, extra.dump());
}

SteeringSet load_steering(const std::filesystem::path& dir, const ModelConfig& config) {
  const auto loaded = load_container(dir);
  const auto manifest = nlohmann::json::parse(loaded.manifest_json);
  SteeringSet set;
  set.model_provenance = manifest.value("provenance", "");
  set.corpus_digest = manifest.value("corpus_digest", "");
  for (const auto& [key, tensor] : loaded.tensors) {
    if (!key.starts_with("steer.") || key.ends_with(".ref_norm")) continue;
    const auto layers_pos = key.rfind(".layers.");
    if (layers_pos == std::string::npos) throw Error("bad steering key: " + key);
    const std::string behavior = key.substr(6, layers_pos - 6);
    const auto id = linear_module_from_tensor_name(key.substr(layers_pos + 1));
    if (!id || id->layer >= config.n_layers) throw Error("bad steering key: " + key);
    SteeringVector sv;
    sv.behavior = behavior;
    sv.module = *id;
    sv.u_norm.assign(tensor.data.begin(), tensor.data.end());
    const auto rn_it = loaded.tensors.find(key + ".ref_norm");
    if (rn_it == loaded.tensors.end() || rn_it->second.data.size() != 1) {
      throw Error("missing ref_norm for steering key: " + key);
    }
    sv.ref_norm = static_cast<double>(rn_it->second.data[0]);
    sv.zero_raw = std::all_of(sv.u_norm.begin(), sv.u_norm.end(),
                              [](double v) { return v == 0.0; });
    set.by_behavior[behavior].emplace(*id, std::move(sv));
  }
  return set;
}

}  // namespace rlens
