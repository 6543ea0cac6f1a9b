#include "rlens/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "rlens/rng.hpp"

namespace rlens {

namespace {

// Drops invalid spans (counted), then inner spans of strictly nested
// same-behavior pairs.
std::vector<BehaviorSpan> clean_spans(const std::vector<BehaviorSpan>& raw,
                                      std::size_t token_count, std::size_t output_start,
                                      long long raw_end_marker_count, std::size_t* dropped) {
  (void)raw_end_marker_count;
  std::vector<BehaviorSpan> valid;
  for (const auto& s : raw) {
    const bool ok = s.begin < s.end && s.end <= token_count && s.begin >= output_start;
    if (ok) {
      valid.push_back(s);
    } else {
      ++*dropped;
    }
  }
  std::vector<bool> drop(valid.size(), false);
  for (std::size_t i = 0; i < valid.size(); ++i) {
    for (std::size_t j = 0; j < valid.size(); ++j) {
      if (i == j || valid[i].behavior != valid[j].behavior) continue;
      const auto& outer = valid[j];
      const auto& inner = valid[i];
      const bool contains = outer.begin <= inner.begin && inner.end <= outer.end;
      const bool strict = contains && (outer.begin < inner.begin || inner.end < outer.end);
      if (strict) drop[i] = true;
    }
  }
  std::vector<BehaviorSpan> out;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (drop[i]) {
      ++*dropped;
    } else {
      out.push_back(valid[i]);
    }
  }
  return out;
}

}  // namespace

AnnotatedCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path.string());

  AnnotatedCorpus corpus;
  std::set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw Error("malformed corpus record at line " + std::to_string(line_no) + ": " + e.what());
    }

    AnnotatedInstance inst;
    try {
      inst.id = j.at("id").get<std::string>();
      inst.tokens = j.at("tokens").get<std::vector<int>>();
      const auto os = j.at("output_start").get<long long>();
      if (os < 0 || static_cast<std::size_t>(os) > inst.tokens.size()) {
        throw Error("output_start out of range");
      }
      inst.output_start = static_cast<std::size_t>(os);
      if (inst.tokens.empty()) throw Error("empty token list");
    } catch (const Error&) {
      throw Error("malformed corpus record at line " + std::to_string(line_no));
    } catch (const std::exception& e) {
      throw Error("malformed corpus record at line " + std::to_string(line_no) + ": " + e.what());
    }

    if (!seen_ids.insert(inst.id).second) {
      throw Error("duplicate instance id '" + inst.id + "' at line " + std::to_string(line_no));
    }

    std::vector<BehaviorSpan> raw;
    if (j.contains("spans")) {
      for (const auto& sj : j["spans"]) {
        BehaviorSpan s;
        long long begin = 0;
        long long end = 0;
        try {
          s.behavior = sj.at("behavior").get<std::string>();
          begin = sj.at("start").get<long long>();
          end = sj.at("end").get<long long>();
        } catch (const std::exception& e) {
          throw Error("malformed span at line " + std::to_string(line_no) + ": " + e.what());
        }
        if (begin < 0 || end < 0 || end < begin) {
          // Unclosed (end marker -1) or inverted; keep as sentinel so the
          // cleaner counts the drop.
          s.begin = 1;
          s.end = 0;
        } else {
          s.begin = static_cast<std::size_t>(begin);
          s.end = static_cast<std::size_t>(end);
        }
        raw.push_back(std::move(s));
      }
    }
    inst.spans = clean_spans(raw, inst.tokens.size(), inst.output_start, 0,
                             &corpus.dropped_spans);
    for (const auto& s : inst.spans) corpus.behaviors.insert(s.behavior);
    corpus.instances.push_back(std::move(inst));
  }

  std::sort(corpus.instances.begin(), corpus.instances.end(),
            [](const AnnotatedInstance& a, const AnnotatedInstance& b) { return a.id < b.id; });
  return corpus;
}

void save_corpus(const AnnotatedCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write corpus file: " + path.string());
  for (const auto& inst : corpus.instances) {
    nlohmann::ordered_json j;
    j["id"] = inst.id;
    j["tokens"] = inst.tokens;
    j["output_start"] = inst.output_start;
    auto spans = nlohmann::ordered_json::array();
    for (const auto& s : inst.spans) {
      spans.push_back({{"behavior", s.behavior}, {"start", s.begin}, {"end", s.end}});
    }
    j["spans"] = std::move(spans);
    out << j.dump() << "\n";
  }
  if (!out) throw Error("I/O error writing corpus file: " + path.string());
}

std::string corpus_digest(const AnnotatedCorpus& corpus) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_bytes = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  auto mix_str = [&](const std::string& s) { mix_bytes(s.data(), s.size()); };
  auto mix_u64 = [&](std::uint64_t v) { mix_bytes(&v, sizeof(v)); };
  for (const auto& inst : corpus.instances) {
    mix_str(inst.id);
    mix_u64(inst.tokens.size());
    for (int t : inst.tokens) mix_u64(static_cast<std::uint64_t>(t));
    mix_u64(inst.output_start);
    for (const auto& s : inst.spans) {
      mix_str(s.behavior);
      mix_u64(s.begin);
      mix_u64(s.end);
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

TokenSpan behavior_window(const AnnotatedInstance& instance, const BehaviorSpan& span,
                          std::size_t k) {
  if (span.begin >= span.end || span.end > instance.tokens.size()) {
    throw Error("invalid span for behavior_window");
  }
  const std::size_t begin = span.begin >= k ? span.begin - k : 0;
  return TokenSpan{begin, span.end};
}

SplitSets split_sets(const AnnotatedCorpus& corpus, const std::string& behavior,
                     std::size_t window_k) {
  SplitSets sets;
  for (const auto& inst : corpus.instances) {
    sets.d_minus.push_back(&inst);
    for (const auto& span : inst.spans) {
      if (span.behavior != behavior) continue;
      sets.d_plus.push_back({&inst, span, behavior_window(inst, span, window_k)});
    }
  }
  if (sets.d_plus.empty()) sets.behavior_missing = true;
  return sets;
}

AnnotatedCorpus synthetic_corpus(std::uint64_t seed, std::size_t n_instances, int vocab_size,
                                 std::size_t min_len, std::size_t max_len,
                                 const std::vector<std::string>& behaviors) {
  if (vocab_size < 2 || min_len < 4 || max_len < min_len) {
    throw Error("synthetic_corpus: degenerate parameters");
  }
  Rng rng(seed);
  AnnotatedCorpus corpus;
  for (std::size_t i = 0; i < n_instances; ++i) {
    AnnotatedInstance inst;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "inst-%04zu", i);
    inst.id = idbuf;
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    inst.tokens.resize(len);
    for (auto& t : inst.tokens) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size)));
    inst.output_start = 1 + rng.below(len / 2);  // always at least one prompt token
    const std::size_t out_len = len - inst.output_start;
    if (out_len >= 2 && !behaviors.empty()) {
      // Zero to two spans per instance.
      const std::size_t n_spans = rng.below(3);
      for (std::size_t s = 0; s < n_spans; ++s) {
        const std::size_t span_len = 1 + rng.below(std::min<std::size_t>(out_len, 4));
        const std::size_t start = inst.output_start + rng.below(out_len - span_len + 1);
        BehaviorSpan span;
        span.behavior = behaviors[rng.below(behaviors.size())];
        span.begin = start;
        span.end = start + span_len;
        inst.spans.push_back(std::move(span));
      }
      // Keep the invariant the loader enforces: drop strictly nested pairs.
      std::size_t dropped = 0;
      inst.spans = clean_spans(inst.spans, inst.tokens.size(), inst.output_start, 0, &dropped);
    }
    for (const auto& s : inst.spans) corpus.behaviors.insert(s.behavior);
    corpus.instances.push_back(std::move(inst));
  }
  std::sort(corpus.instances.begin(), corpus.instances.end(),
            [](const AnnotatedInstance& a, const AnnotatedInstance& b) { return a.id < b.id; });
  return corpus;
}

}  // namespace rlens
