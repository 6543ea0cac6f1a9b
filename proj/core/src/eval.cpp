#include "rlens/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "rlens/compress.hpp"
#include "rlens/rng.hpp"

namespace rlens {

namespace {

// Reserved token ids shared by the generators.
constexpr int kEos = 0;
constexpr int kBos = 1;
constexpr int kSep = 2;
constexpr int kPayloadBase = 3;

std::map<std::string, std::string> parse_kv(const std::string& s) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw Error("bad task parameter '" + part + "'");
    kv[part.substr(0, eq)] = part.substr(eq + 1);
  }
  return kv;
}

long long kv_int(const std::map<std::string, std::string>& kv, const std::string& key,
                 long long fallback) {
  const auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stoll(it->second);
  } catch (const std::exception&) {
    throw Error("bad integer for task parameter '" + key + "'");
  }
}

std::vector<int> payload_permutation(Rng& rng, int vocab) {
  std::vector<int> perm;
  for (int v = kPayloadBase; v < vocab; ++v) perm.push_back(v);
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::swap(perm[i - 1], perm[rng.below(i)]);
  }
  return perm;
}

void check_task_fits(const TaskSpec& task, const ModelConfig& config, int task_vocab) {
  if (task_vocab > config.vocab_size) {
    throw Error("task vocab " + std::to_string(task_vocab) + " exceeds model vocab " +
                std::to_string(config.vocab_size));
  }
  for (const auto& inst : task.instances) {
    const std::size_t decode_len =
        inst.prompt.size() + inst.gold.size() +
        (task.eos_token >= 0 ? static_cast<std::size_t>(task.decode_margin) + 1 : 0);
    if (decode_len > static_cast<std::size_t>(config.max_seq)) {
      throw Error("task instance does not fit max_seq");
    }
    if (inst.gold.empty()) throw Error("task gold answer must be non-empty");
  }
}

}  // namespace

std::vector<std::string> task_generator_names() { return {"succ", "copy", "qa"}; }

TaskSpec make_task(const std::string& spec, const ModelConfig& config) {
  const auto colon = spec.find(':');
  const std::string name = spec.substr(0, colon);
  const auto kv = colon == std::string::npos ? std::map<std::string, std::string>{}
                                             : parse_kv(spec.substr(colon + 1));

  TaskSpec task;
  task.name = name;
  task.seed = static_cast<std::uint64_t>(kv_int(kv, "seed", 0));
  const int n = static_cast<int>(kv_int(kv, "n", 48));
  const int vocab = static_cast<int>(kv_int(kv, "vocab", std::min(config.vocab_size, 16)));
  if (n < 1) throw Error("task needs n >= 1");
  if (vocab < kPayloadBase + 2) throw Error("task vocab too small (need >= 5)");

  Rng rng(task.seed * 0x9e3779b9ULL + 17);

  if (name == "succ") {
    const int len = static_cast<int>(kv_int(kv, "len", 6));
    if (len < 1) throw Error("succ needs len >= 1");
    const auto perm = payload_permutation(rng, vocab);
    const int payload = static_cast<int>(perm.size());
    task.answer_mode = AnswerMode::exact_sequence;
    task.eos_token = -1;
    for (int i = 0; i < n; ++i) {
      TaskInstance inst;
      int x = kPayloadBase + static_cast<int>(rng.below(static_cast<std::uint64_t>(payload)));
      inst.prompt = {kBos, x};
      for (int t = 0; t < len; ++t) {
        x = perm[static_cast<std::size_t>(x - kPayloadBase)];
        inst.gold.push_back(x);
      }
      task.instances.push_back(std::move(inst));
    }
  } else if (name == "copy") {
    const int len = static_cast<int>(kv_int(kv, "len", 4));
    if (len < 1) throw Error("copy needs len >= 1");
    task.answer_mode = AnswerMode::exact_sequence;
    task.eos_token = -1;
    for (int i = 0; i < n; ++i) {
      TaskInstance inst;
      inst.prompt.push_back(kBos);
      for (int t = 0; t < len; ++t) {
        inst.prompt.push_back(kPayloadBase +
                              static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - kPayloadBase))));
      }
      inst.prompt.push_back(kSep);
      inst.gold.assign(inst.prompt.begin() + 1, inst.prompt.end() - 1);
      task.instances.push_back(std::move(inst));
    }
  } else if (name == "qa") {
    const int max_ans = static_cast<int>(kv_int(kv, "maxans", 4));
    if (max_ans < 1) throw Error("qa needs maxans >= 1");
    task.answer_mode = AnswerMode::em_f1;
    task.eos_token = kEos;
    // Fixed question -> answer mapping over the payload range.
    const int payload = vocab - kPayloadBase;
    std::vector<std::vector<int>> answers(static_cast<std::size_t>(payload));
    for (auto& ans : answers) {
      const int alen = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_ans)));
      for (int t = 0; t < alen; ++t) {
        ans.push_back(kPayloadBase +
                      static_cast<int>(rng.below(static_cast<std::uint64_t>(payload))));
      }
    }
    for (int i = 0; i < n; ++i) {
      const int q = static_cast<int>(rng.below(static_cast<std::uint64_t>(payload)));
      TaskInstance inst;
      inst.prompt = {kBos, kPayloadBase + q, kSep};
      inst.gold = answers[static_cast<std::size_t>(q)];
      task.instances.push_back(std::move(inst));
    }
    task.vocab_words.reserve(static_cast<std::size_t>(vocab));
    for (int v = 0; v < vocab; ++v) task.vocab_words.push_back("w" + std::to_string(v));
  } else {
    std::string known;
    for (const auto& g : task_generator_names()) known += (known.empty() ? "" : ", ") + g;
    throw Error("unknown task generator '" + name + "' (available: " + known + ")");
  }

  check_task_fits(task, config, vocab);
  return task;
}

double Metrics::primary_score() const {
  if (accuracy) return *accuracy;
  if (f1) return *f1;
  return 0.0;
}

WeightStore train_toy(const ModelConfig& config, const TaskSpec& task, int steps,
                      std::uint64_t seed) {
  config.validate();
  if (steps < 0) throw Error("train_toy: steps must be >= 0");

  char tag[128];
  std::snprintf(tag, sizeof(tag), "toy-%s seed=%llu steps=%d", task.name.c_str(),
                static_cast<unsigned long long>(seed), steps);
  WeightStore store = initialized_store(config, seed, tag);
  if (steps == 0) return store;

  // Training sequences: prompt + gold (+ EOS), loss over the answer span.
  struct Sequence {
    std::vector<int> tokens;
    TokenSpan span;
  };
  std::vector<Sequence> seqs;
  for (const auto& inst : task.instances) {
    Sequence s;
    s.tokens = inst.prompt;
    s.tokens.insert(s.tokens.end(), inst.gold.begin(), inst.gold.end());
    if (task.eos_token >= 0) s.tokens.push_back(task.eos_token);
    s.span = {inst.prompt.size(), s.tokens.size()};
    seqs.push_back(std::move(s));
  }

  const double lr = 0.01;
  const double beta1 = 0.9;
  const double beta2 = 0.999;
  const double adam_eps = 1e-8;
  const std::size_t batch = std::min<std::size_t>(8, seqs.size());

  std::map<std::string, std::vector<double>> m1, m2;
  for (const auto& name : canonical_tensor_names(config)) {
    m1[name].assign(store.at(name).data.size(), 0.0);
    m2[name].assign(store.at(name).data.size(), 0.0);
  }

  double last_loss = 0.0;
  for (int step = 0; step < steps; ++step) {
    std::map<std::string, std::vector<double>> grad_sum;
    double loss_sum = 0.0;
    for (std::size_t j = 0; j < batch; ++j) {
      const auto& s = seqs[(static_cast<std::size_t>(step) * batch + j) % seqs.size()];
      auto wg = loss_and_weight_grads(store, s.tokens, s.span);
      loss_sum += wg.loss;
      if (grad_sum.empty()) {
        grad_sum = std::move(wg.grads);
      } else {
        for (auto& [name, g] : wg.grads) {
          auto& acc = grad_sum[name];
          for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
      }
    }
    last_loss = loss_sum / static_cast<double>(batch);
    if (!std::isfinite(last_loss)) {
      throw Error("train_toy: loss diverged at step " + std::to_string(step));
    }

    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);
    for (auto& [name, g] : grad_sum) {
      auto& w = store.at(name).data;
      auto& m = m1[name];
      auto& v = m2[name];
      const double inv_batch = 1.0 / static_cast<double>(batch);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * inv_batch;
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + adam_eps);
        w[i] = static_cast<float>(static_cast<double>(w[i]) - update);
      }
    }
  }

  char prov[192];
  std::snprintf(prov, sizeof(prov), "%s final_loss=%.6g", tag, last_loss);
  store.provenance = prov;
  return store;
}

std::string detokenize(const TaskSpec& task, const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) out += ' ';
    if (t >= 0 && static_cast<std::size_t>(t) < task.vocab_words.size()) {
      out += task.vocab_words[static_cast<std::size_t>(t)];
    } else {
      out += "w" + std::to_string(t);
    }
  }
  return out;
}

namespace {

std::vector<std::string> normalize_tokens(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : text) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) {
      cleaned += static_cast<char>(std::tolower(u));
    } else {
      cleaned += ' ';
    }
  }
  std::vector<std::string> tokens;
  std::stringstream ss(cleaned);
  std::string tok;
  while (ss >> tok) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    tokens.push_back(tok);
  }
  return tokens;
}

}  // namespace

std::pair<double, double> em_f1(const std::string& predicted, const std::string& gold) {
  const auto p = normalize_tokens(predicted);
  const auto g = normalize_tokens(gold);
  if (p.empty() && g.empty()) return {1.0, 1.0};
  if (p.empty() || g.empty()) return {0.0, 0.0};

  const double em = p == g ? 1.0 : 0.0;

  std::map<std::string, int> gold_counts;
  for (const auto& t : g) ++gold_counts[t];
  int common = 0;
  for (const auto& t : p) {
    const auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return {em, 0.0};
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return {em, 2.0 * precision * recall / (precision + recall)};
}

std::vector<LengthRecord> evaluate_records(const WeightStore& store, const TaskSpec& task) {
  std::vector<LengthRecord> records;
  for (const auto& inst : task.instances) {
    const std::size_t limit =
        inst.gold.size() +
        (task.eos_token >= 0 ? static_cast<std::size_t>(task.decode_margin) : 0);
    if (inst.prompt.size() + limit > static_cast<std::size_t>(store.config.max_seq)) {
      throw Error("decode overflow beyond max_seq");
    }

    std::vector<int> seq = inst.prompt;
    std::vector<int> predicted;
    for (std::size_t step = 0; step < limit; ++step) {
      const auto result = forward(store, seq, CaptureSet::none());
      const std::size_t last = seq.size() - 1;
      int best = 0;
      float best_logit = result.logits.at(last, 0);
      for (int v = 1; v < store.config.vocab_size; ++v) {
        const float l = result.logits.at(last, static_cast<std::size_t>(v));
        if (l > best_logit) {  // strict: ties keep the lowest token id
          best_logit = l;
          best = v;
        }
      }
      if (task.eos_token >= 0 && best == task.eos_token) break;
      predicted.push_back(best);
      seq.push_back(best);
    }

    LengthRecord rec;
    rec.length = predicted.size();

    std::vector<int> teacher = inst.prompt;
    teacher.insert(teacher.end(), inst.gold.begin(), inst.gold.end());
    rec.span_ce = span_loss(store, teacher, {inst.prompt.size(), teacher.size()});

    if (task.answer_mode == AnswerMode::exact_sequence) {
      rec.accuracy = predicted == inst.gold ? 1.0 : 0.0;
    } else {
      const auto [em, f1] = em_f1(detokenize(task, predicted), detokenize(task, inst.gold));
      rec.em = em;
      rec.f1 = f1;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

namespace {

Metrics aggregate(const std::vector<LengthRecord>& records) {
  Metrics m;
  m.n = records.size();
  if (records.empty()) return m;
  double acc = 0.0, em = 0.0, f1 = 0.0, ce = 0.0;
  std::size_t n_acc = 0, n_em = 0;
  for (const auto& r : records) {
    ce += r.span_ce;
    if (r.accuracy) {
      acc += *r.accuracy;
      ++n_acc;
    }
    if (r.em) {
      em += *r.em;
      f1 += r.f1.value_or(0.0);
      ++n_em;
    }
  }
  m.mean_span_ce = ce / static_cast<double>(records.size());
  if (n_acc > 0) m.accuracy = acc / static_cast<double>(n_acc);
  if (n_em > 0) {
    m.em = em / static_cast<double>(n_em);
    m.f1 = f1 / static_cast<double>(n_em);
  }
  return m;
}

}  // namespace

Metrics evaluate(const WeightStore& store, const TaskSpec& task) {
  return aggregate(evaluate_records(store, task));
}

SweepResult sweep(const WeightStore& store, SweepAxis axis, const std::vector<double>& levels,
                  const TaskSpec& task, int quant_group_size) {
  if (levels.empty()) throw Error("sweep: no levels given");
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) throw Error("sweep: levels must be strictly ascending");
  }
  const double baseline_level = axis == SweepAxis::sparsity ? 0.0 : 16.0;
  if (std::find(levels.begin(), levels.end(), baseline_level) == levels.end()) {
    throw Error(axis == SweepAxis::sparsity ? "sweep: sparsity levels must include 0"
                                            : "sweep: bit levels must include 16");
  }

  SweepResult result;
  result.axis = axis;
  for (double level : levels) {
    Metrics metrics;
    if (level == baseline_level) {
      metrics = evaluate(store, task);
    } else if (axis == SweepAxis::sparsity) {
      PruneConfig cfg{level};
      metrics = evaluate(magnitude_prune(store, cfg, ModuleSelector{}), task);
    } else {
      const int bits = static_cast<int>(level);
      if (static_cast<double>(bits) != level || bits < 2 || bits > 8) {
        throw Error("sweep: bit levels must be integers in [2, 8] plus the 16 baseline");
      }
      QuantConfig cfg;
      cfg.bits = bits;
      cfg.group_size = quant_group_size;
      metrics = evaluate(quantize_model(store, cfg, ModuleSelector{}), task);
    }
    result.rows.push_back({level, metrics});
  }

  // Scan in increasing-compression order: ascending sparsity, descending bits.
  const Metrics* baseline = nullptr;
  for (const auto& row : result.rows) {
    if (row.level == baseline_level) baseline = &row.metrics;
  }
  const double base_score = baseline->primary_score();
  if (base_score > 0.0) {
    std::vector<const SweepLevel*> scan;
    for (const auto& row : result.rows) {
      if (row.level != baseline_level) scan.push_back(&row);
    }
    if (axis == SweepAxis::bits) std::reverse(scan.begin(), scan.end());
    for (const auto* row : scan) {
      if (row->metrics.primary_score() < 0.5 * base_score) {
        result.collapse_level = row->level;
        break;
      }
    }
  }
  return result;
}

LengthStats length_percentile_stats(const std::vector<LengthRecord>& records, double p) {
  if (!(p > 0.0) || p > 0.5) throw Error("length_percentile_stats: p must be in (0, 0.5]");
  const std::size_t need = static_cast<std::size_t>(std::ceil(1.0 / p));
  if (records.size() < need) {
    throw Error("length_percentile_stats: need at least " + std::to_string(need) + " records");
  }
  const std::size_t n = records.size();
  const std::size_t k = static_cast<std::size_t>(std::floor(p * static_cast<double>(n)));

  std::vector<std::size_t> by_short(n), by_long(n);
  std::iota(by_short.begin(), by_short.end(), 0);
  by_long = by_short;
  std::sort(by_short.begin(), by_short.end(), [&records](std::size_t a, std::size_t b) {
    if (records[a].length != records[b].length) return records[a].length < records[b].length;
    return a < b;
  });
  std::sort(by_long.begin(), by_long.end(), [&records](std::size_t a, std::size_t b) {
    if (records[a].length != records[b].length) return records[a].length > records[b].length;
    return a < b;
  });

  std::vector<LengthRecord> short_tail, long_tail;
  for (std::size_t i = 0; i < k; ++i) {
    short_tail.push_back(records[by_short[i]]);
    long_tail.push_back(records[by_long[i]]);
  }

  LengthStats stats;
  stats.p = p;
  stats.short_metrics = aggregate(short_tail);
  stats.long_metrics = aggregate(long_tail);
  double mean_short = 0.0, mean_long = 0.0;
  for (const auto& r : short_tail) mean_short += static_cast<double>(r.length);
  for (const auto& r : long_tail) mean_long += static_cast<double>(r.length);
  mean_short /= static_cast<double>(k);
  mean_long /= static_cast<double>(k);
  if (mean_short == 0.0) {
    if (mean_long != 0.0) throw Error("length_percentile_stats: zero-length short tail");
    stats.length_ratio = 1.0;
  } else {
    stats.length_ratio = mean_long / mean_short;
  }
  return stats;
}

AnnotatedCorpus corpus_from_task(const TaskSpec& task, const std::vector<std::string>& behaviors,
                                 std::uint64_t seed) {
  if (behaviors.empty()) throw Error("corpus_from_task: need at least one behavior");
  Rng rng(seed ^ 0xabcdef1234567890ULL);
  AnnotatedCorpus corpus;
  for (std::size_t i = 0; i < task.instances.size(); ++i) {
    const auto& inst = task.instances[i];
    AnnotatedInstance out;
    char idbuf[24];
    std::snprintf(idbuf, sizeof(idbuf), "task-%04zu", i);
    out.id = idbuf;
    out.tokens = inst.prompt;
    out.tokens.insert(out.tokens.end(), inst.gold.begin(), inst.gold.end());
    out.output_start = inst.prompt.size();
    const std::size_t out_len = inst.gold.size();
    const std::size_t n_spans = 1 + rng.below(2);
    for (std::size_t s = 0; s < n_spans; ++s) {
      const std::size_t span_len = 1 + rng.below(std::min<std::size_t>(out_len, 3));
      const std::size_t start = out.output_start + rng.below(out_len - span_len + 1);
      BehaviorSpan span;
      span.behavior = behaviors[(i + s) % behaviors.size()];
      span.begin = start;
      span.end = start + span_len;
      // Keep the loader's invariant: no strictly nested same-behavior spans.
      const bool nested = std::any_of(
          out.spans.begin(), out.spans.end(), [&span](const BehaviorSpan& other) {
            if (other.behavior != span.behavior) return false;
            const auto lo = std::min(other.begin, span.begin);
            const auto hi = std::max(other.end, span.end);
            return (lo == other.begin && hi == other.end) || (lo == span.begin && hi == span.end);
          });
      if (!nested) out.spans.push_back(std::move(span));
    }
    for (const auto& s : out.spans) corpus.behaviors.insert(s.behavior);
    corpus.instances.push_back(std::move(out));
  }
  std::sort(corpus.instances.begin(), corpus.instances.end(),
            [](const AnnotatedInstance& a, const AnnotatedInstance& b) { return a.id < b.id; });
  return corpus;
}

double behavior_window_ce(const WeightStore& store, const AnnotatedCorpus& corpus,
                          const std::string& behavior) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& inst : corpus.instances) {
    for (const auto& span : inst.spans) {
      if (!behavior.empty() && span.behavior != behavior) continue;
      const auto window = behavior_window(inst, span);
      const TokenSpan loss_span{std::max<std::size_t>(window.begin, 1), window.end};
      total += span_loss(store, inst.tokens, loss_span);
      ++count;
    }
  }
  if (count == 0) throw Error("behavior_window_ce: no labeled windows");
  return total / static_cast<double>(count);
}

}  // namespace rlens
