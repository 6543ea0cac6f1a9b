#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "rlens/model.hpp"

namespace rlens {

/// Behavior-labeled token range within one instance's output region.
struct BehaviorSpan {
  std::string behavior;
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  bool operator==(const BehaviorSpan&) const = default;
};

struct AnnotatedInstance {
  std::string id;
  std::vector<int> tokens;  // prompt followed by output
  std::size_t output_start = 0;
  std::vector<BehaviorSpan> spans;
  bool operator==(const AnnotatedInstance&) const = default;
};

struct AnnotatedCorpus {
  std::vector<AnnotatedInstance> instances;  // sorted by id
  std::set<std::string> behaviors;
  std::size_t dropped_spans = 0;  // invalid / unclosed / nested-inner, from load
  bool operator==(const AnnotatedCorpus& other) const {
    return instances == other.instances && behaviors == other.behaviors;
  }
};

/// JSON-Lines loader. Invalid spans (unclosed end marker -1, end > length,
/// start >= end, span before output_start) are dropped and counted; when two
/// same-behavior spans strictly nest, the inner one is dropped. Malformed
/// records and duplicate ids are hard errors naming the line.
AnnotatedCorpus load_corpus(const std::filesystem::path& path);

void save_corpus(const AnnotatedCorpus& corpus, const std::filesystem::path& path);

/// Digest of the corpus content (id/tokens/output_start/spans), 16 hex chars.
std::string corpus_digest(const AnnotatedCorpus& corpus);

/// Labeled span widened by up to `k` preceding tokens, clamped at 0. May
/// reach into the prompt.
TokenSpan behavior_window(const AnnotatedInstance& instance, const BehaviorSpan& span,
                          std::size_t k = 5);

/// One positive example: a labeled sequence and its window.
struct PositiveSequence {
  const AnnotatedInstance* instance = nullptr;
  BehaviorSpan span;
  TokenSpan window;
};

struct SplitSets {
  std::vector<PositiveSequence> d_plus;            // one entry per labeled span
  std::vector<const AnnotatedInstance*> d_minus;   // every instance
  bool behavior_missing = false;                   // warning flag, not an error
};

/// D+ enumerates every surviving span of `behavior` (instance id ascending,
/// then span order); D- is all instances.
SplitSets split_sets(const AnnotatedCorpus& corpus, const std::string& behavior,
                     std::size_t window_k = 5);

/// Synthetic corpus over random token sequences; spans are placed inside the
/// output region. Fixture generator for tests and demos.
AnnotatedCorpus synthetic_corpus(std::uint64_t seed, std::size_t n_instances, int vocab_size,
                                 std::size_t min_len, std::size_t max_len,
                                 const std::vector<std::string>& behaviors);

}  // namespace rlens
