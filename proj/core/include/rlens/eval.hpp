#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rlens/corpus.hpp"
#include "rlens/model.hpp"

namespace rlens {

enum class AnswerMode { exact_sequence, em_f1 };

struct TaskInstance {
  std::vector<int> prompt;
  std::vector<int> gold;  // answer tokens, EOS not included
};

/// Synthetic benchmark: generated instances plus the decoding conventions
/// needed to score them.
struct TaskSpec {
  std::string name;
  std::uint64_t seed = 0;
  AnswerMode answer_mode = AnswerMode::exact_sequence;
  int eos_token = -1;  // < 0: no end-of-answer token
  std::vector<TaskInstance> instances;
  std::vector<std::string> vocab_words;  // token id -> word; empty = "w{id}"
  int decode_margin = 8;
};

/// Spec strings look like "succ:n=48,len=6,vocab=16,seed=1". Generators:
/// succ (successor chain), copy (echo the prompt body), qa (memorized
/// variable-length word answers, scored with EM/F1).
TaskSpec make_task(const std::string& spec, const ModelConfig& config);
std::vector<std::string> task_generator_names();

struct Metrics {
  std::optional<double> accuracy;  // exact_sequence mode
  std::optional<double> em;        // em_f1 mode
  std::optional<double> f1;        // em_f1 mode
  double mean_span_ce = 0.0;       // teacher-forced gold cross-entropy
  std::size_t n = 0;

  /// Accuracy when present, else F1. The score used for collapse detection.
  double primary_score() const;
};

struct SweepLevel {
  double level = 0.0;
  Metrics metrics;
};

enum class SweepAxis { sparsity, bits };

struct SweepResult {
  SweepAxis axis = SweepAxis::sparsity;
  std::vector<SweepLevel> rows;            // in the given (ascending) level order
  std::optional<double> collapse_level;    // first level scoring < half of baseline
};

struct LengthRecord {
  std::size_t length = 0;  // generated-output length in tokens
  std::optional<double> accuracy;
  std::optional<double> em;
  std::optional<double> f1;
  double span_ce = 0.0;
};

struct LengthStats {
  double p = 0.0;
  Metrics short_metrics;
  Metrics long_metrics;
  double length_ratio = 0.0;  // mean long length / mean short length
};

/// Adam training of next-token cross-entropy over each instance's answer
/// span. Deterministic given (config, task, steps, seed); steps = 0 returns
/// the seeded initialization. Throws on divergence, naming the step.
WeightStore train_toy(const ModelConfig& config, const TaskSpec& task, int steps,
                      std::uint64_t seed);

/// Greedy decoding (ties -> lowest token id) up to gold length + margin,
/// stopping at the task's EOS token when one is defined.
Metrics evaluate(const WeightStore& store, const TaskSpec& task);

/// Per-instance evaluation records for length-percentile analysis.
std::vector<LengthRecord> evaluate_records(const WeightStore& store, const TaskSpec& task);

/// Open-domain QA normalization: lowercase, strip punctuation, collapse
/// whitespace, drop articles; EM on equality, F1 on bag-of-token overlap.
std::pair<double, double> em_f1(const std::string& predicted, const std::string& gold);

/// Joins the task's words for a token sequence ("w{id}" fallback).
std::string detokenize(const TaskSpec& task, const std::vector<int>& tokens);

/// Compression sweep. Levels ascending; the baseline level (0 sparsity or 16
/// bits) must be present. Every level is applied to `store` fresh.
SweepResult sweep(const WeightStore& store, SweepAxis axis, const std::vector<double>& levels,
                  const TaskSpec& task, int quant_group_size = 64);

LengthStats length_percentile_stats(const std::vector<LengthRecord>& records, double p);

/// Builds an annotated corpus over (prompt + gold) sequences of a task,
/// tagging output sub-spans with the given behaviors. Fixture generator for
/// importance analyses of toy checkpoints.
AnnotatedCorpus corpus_from_task(const TaskSpec& task, const std::vector<std::string>& behaviors,
                                 std::uint64_t seed);

/// Mean span_loss over every labeled window of `behavior` (all behaviors if
/// empty). The signal used to compare compressed checkpoint variants.
double behavior_window_ce(const WeightStore& store, const AnnotatedCorpus& corpus,
                          const std::string& behavior = "");

}  // namespace rlens
