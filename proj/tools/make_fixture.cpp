// Generates the small checked-in fixture used by the CLI examples and the
// acceptance suite: a briefly trained 2-layer checkpoint plus a
// behavior-annotated corpus over its task.

#include <filesystem>
#include <iostream>

#include "rlens/corpus.hpp"
#include "rlens/eval.hpp"
#include "rlens/weights_io.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path out_dir = argc > 1 ? argv[1] : "fixtures";
  try {
    rlens::ModelConfig config;
    config.n_layers = 2;
    config.d_model = 32;
    config.n_heads = 4;
    config.d_ff = 64;
    config.vocab_size = 16;
    config.max_seq = 64;

    const auto task = rlens::make_task("succ:n=12,len=6,vocab=16,seed=7", config);
    const auto store = rlens::train_toy(config, task, 120, 7);
    const auto corpus = rlens::corpus_from_task(
        task, {"backtracking", "uncertainty-estimation", "example-testing", "adding-knowledge"},
        11);

    std::filesystem::create_directories(out_dir);
    rlens::save_weights(store, out_dir / "model");
    rlens::save_corpus(corpus, out_dir / "corpus.jsonl");
    std::cout << "fixture written to " << out_dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "make_fixture: " << e.what() << "\n";
    return 1;
  }
}
